import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stationary_np import tensor as T
from stationary_np.errors import DomainError, ShapeError
from stationary_np.gradcheck import check_op, numerical_gradient


def _loop_conv(x, w, b, pad):
    # direct cross-correlation oracle
    c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, length + 2 * pad))
    xp[:, pad:pad + length] = x
    out = np.zeros((c_out, length + 2 * pad - k + 1))
    for o in range(c_out):
        for l in range(out.shape[1]):
            s = b[o]
            for c in range(c_in):
                for j in range(k):
                    s += w[o, c, j] * xp[c, l + j]
            out[o, l] = s
    return out


def test_conv1d_identity_kernel():
    out = T.conv1d([[1.0, 2.0, 3.0]], [[[1.0]]], [0.0])
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_conv1d_box_kernel_hand_value():
    out = T.conv1d([[1.0, 2.0, 3.0]], [[[1.0, 1.0, 1.0]]], [0.0], padding=1)
    np.testing.assert_array_equal(out.data, [[3.0, 6.0, 5.0]])


def test_conv1d_zero_kernel_gives_bias():
    x = np.random.default_rng(0).normal(size=(2, 9))
    out = T.conv1d(x, np.zeros((3, 2, 5)), [0.5, -1.0, 2.0], padding=2)
    np.testing.assert_array_equal(out.data, np.repeat([[0.5], [-1.0], [2.0]], 9, axis=1))


def test_conv1d_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(3, 12)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
    out = T.conv1d(x, w, b, padding=2)
    np.testing.assert_allclose(out.data, _loop_conv(x, w, b, 2), atol=1e-12)


def test_conv1d_batched_matches_unbatched():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(3, 2, 10)), rng.normal(size=(2, 2, 3)), rng.normal(size=2)
    out = T.conv1d(x, w, b, padding=1).data
    for i in range(3):
        np.testing.assert_allclose(out[i], T.conv1d(x[i], w, b, padding=1).data, atol=1e-14)


def test_conv1d_shape_errors_name_dimension():
    with pytest.raises(ShapeError) as err:
        T.conv1d(np.zeros((2, 5)), np.zeros((1, 3, 3)), [0.0])
    assert err.value.dim == "C_in"
    with pytest.raises(ShapeError):
        T.conv1d(np.zeros((1, 5)), np.zeros((1, 1, 2)), [0.0])
    with pytest.raises(ShapeError):
        T.conv1d(np.zeros((1, 2)), np.zeros((1, 1, 5)), [0.0])


def test_conv1d_translation_equivariance():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 40)), rng.normal(size=(3, 2, 5)), rng.normal(size=3)
    s = 4
    a = T.conv1d(x, w, b, padding=2).data
    shifted = T.conv1d(np.roll(x, s, axis=1), w, b, padding=2).data
    np.testing.assert_allclose(shifted[:, 10 + s:30 + s], a[:, 10:30], atol=1e-12)


def test_affine_values():
    out = T.affine([[1.0, 2.0]], [[1.0], [1.0]], [0.0])
    np.testing.assert_array_equal(out.data, [[3.0]])
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(T.affine(x, np.eye(3), np.zeros(3)).data, x)
    np.testing.assert_array_equal(T.affine(x, np.zeros((3, 2)), [1.0, 2.0]).data,
                                  np.tile([1.0, 2.0], (4, 1)))
    with pytest.raises(ShapeError):
        T.affine(x, np.zeros((2, 2)), np.zeros(2))


def test_pointwise_values_and_domain():
    assert T.relu(T.tensor(-1.0)).item() == 0.0
    assert T.softplus(T.tensor(0.0)).item() == pytest.approx(0.6931471805599453)
    x = T.tensor([1.5, -2.0])
    np.testing.assert_array_equal(T.pointwise("mul", x, 1.0).data, x.data)
    with pytest.raises(DomainError):
        T.log(T.tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.div(T.tensor(1.0), T.tensor(0.0))


def test_softplus_large_input_finite():
    out = T.softplus(T.tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[1] == pytest.approx(800.0)


def test_reductions():
    assert T.sum(T.tensor([1.0, 2.0, 3.0])).item() == 6.0
    v = 0.37
    assert T.logsumexp(T.tensor(np.full(7, v))).item() == pytest.approx(v + np.log(7))
    big = T.logsumexp(T.tensor([1000.0, 1000.0])).item()
    assert big == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)
    with pytest.raises(ShapeError):
        T.reduce("sum", T.tensor(np.zeros((0, 3))), axis=0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_logsumexp_jensen_bounds(x):
    lse = T.logsumexp(T.tensor(x)).item()
    assert lse >= x.mean() - 1e-9
    assert lse <= x.max() + np.log(len(x)) + 1e-9


def test_backward_square_matches_finite_difference():
    x = T.tensor([3.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.sum(x * x)
    g = T.backward(y, tape)[x]
    fd = numerical_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), eps=1e-5)
    assert g[0] == pytest.approx(6.0)
    assert g[0] == pytest.approx(fd[0], rel=1e-8)


def test_backward_constant_and_relu():
    x = T.tensor([-1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        c = T.sum(T.tensor([4.0]) * 1.0) + 0.0 * T.sum(x)
    np.testing.assert_array_equal(T.backward(c, tape)[x], [0.0, 0.0])
    with T.Tape() as tape:
        y = T.sum(T.relu(x))
    np.testing.assert_array_equal(T.backward(y, tape)[x], [0.0, 1.0])


def test_backward_rejects_non_scalar():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        T.backward(y, tape)


def test_tape_visits_in_topological_order():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        a = T.exp(x)
        b = a * x
        T.sum(b + a)
    seen = set()
    for out, parents, _ in tape.nodes:
        for p in parents:
            if p.requires_grad and p is not x:
                assert id(p) in seen
        seen.add(id(out))


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", T.add, [(3, 4), (4,)]),
    ("mul", T.mul, [(3, 4), (3, 1)]),
    ("div", lambda a, b: T.div(a, T.exp(b)), [(3,), (3,)]),
    ("tanh", T.tanh, [(5,)]),
    ("softplus", T.softplus, [(5,)]),
    ("exp", T.exp, [(5,)]),
    ("log", lambda a: T.log(T.exp(a) + 1.0), [(5,)]),
    ("square", T.square, [(5,)]),
    ("affine", T.affine, [(4, 3), (3, 2), (2,)]),
    ("conv1d", lambda x, w, b: T.conv1d(x, w, b, padding=2), [(2, 9), (3, 2, 5), (3,)]),
    ("logsumexp", lambda a: T.logsumexp(a, axis=1), [(3, 4)]),
    ("mean", lambda a: T.mean(a, axis=0), [(3, 4)]),
    ("amax", lambda a: T.amax(a, axis=1), [(3, 4)]),
    ("log_softmax", T.log_softmax, [(2, 5)]),
])
def test_gradients_match_finite_differences(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    inputs = [rng.normal(size=s) for s in shapes]
    assert check_op(fn, *inputs) <= 1e-4


def test_solve_gradient():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    assert check_op(T.solve, a, rng.normal(size=4)) <= 1e-4


def test_adam_zero_gradient_leaves_parameter():
    p = {"w": T.tensor([1.0, -2.0])}
    state = T.AdamState(lr=1e-3, weight_decay=0.0)
    T.adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_hand_value():
    p = {"w": T.tensor([0.5])}
    state = T.AdamState(lr=1e-3, eps=1e-8, weight_decay=0.0)
    T.adam_step(p, {"w": np.ones(1)}, state)
    # bias corrected m/sqrt(v) is exactly 1 at t=1
    assert p["w"].data[0] - 0.5 == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_moves_against_gradient_and_decays():
    p = {"w": T.tensor([0.0])}
    state = T.AdamState(lr=1e-2, weight_decay=0.0)
    T.adam_step(p, {"w": np.array([-3.0])}, state)
    first = p["w"].data[0]
    T.adam_step(p, {"w": np.array([-3.0])}, state)
    assert 0.0 < first < p["w"].data[0]
    assert state.t == 2 and state.m["w"].shape == (1,)
    q = {"w": T.tensor([2.0])}
    T.adam_step(q, {"w": np.zeros(1)}, T.AdamState(lr=0.1, weight_decay=0.5))
    assert q["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        T.adam_step({"w": T.tensor([1.0])}, {"w": np.zeros(2)}, T.AdamState())
