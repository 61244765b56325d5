import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stationary_np import tensor as T
from stationary_np.convdeepsets import make_grid
from stationary_np.errors import ConfigError
from stationary_np.gradcheck import numerical_gradient
from stationary_np.kernels import make_kernel_bank
from stationary_np.latent import (
    PnnConfig,
    gumbel_noise,
    gumbel_softmax_sample,
    init_pnn_params,
    kl_categorical,
    pnn_forward,
)

BANK = make_kernel_bank(4, 4.0)


def _context(seed, n=8, lo=0.0, hi=3.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, n), rng.normal(size=n)


def test_zero_head_gives_uniform():
    cfg = PnnConfig(Q=4)
    params = init_pnn_params(cfg, np.random.default_rng(0))
    params["pnn.head0.w"].data[:] = 0.0
    out = pnn_forward(cfg, params, [_context(1)], BANK).data
    np.testing.assert_allclose(out, 0.25, atol=1e-15)


def test_empty_context_uniform():
    for version in ("v1", "v2"):
        cfg = PnnConfig(Q=4, version=version)
        params = init_pnn_params(cfg, np.random.default_rng(0))
        out = pnn_forward(cfg, params, [([], [])], BANK, grid=make_grid(0, 1, 16)).data
        np.testing.assert_allclose(out, 0.25)


def test_v1_permutation_and_shift_invariance():
    cfg = PnnConfig(Q=4)
    params = init_pnn_params(cfg, np.random.default_rng(2))
    xc, yc = _context(3)
    base = pnn_forward(cfg, params, [(xc, yc)], BANK).data
    perm = np.random.default_rng(4).permutation(len(xc))
    np.testing.assert_array_equal(pnn_forward(cfg, params, [(xc[perm], yc[perm])], BANK).data, base)
    np.testing.assert_allclose(pnn_forward(cfg, params, [(xc + 1.7, yc)], BANK).data, base, atol=1e-9)
    np.testing.assert_allclose(base.sum(-1), 1.0, atol=1e-9)


def test_v2_grid_aligned_shift_invariance():
    cfg = PnnConfig(Q=4, version="v2")
    params = init_pnn_params(cfg, np.random.default_rng(5))
    xc, yc = _context(6, lo=0.5, hi=2.5)
    g = make_grid(0.0, 3.0, 16, margin=0.5)
    s = 16
    gs = make_grid(s / 16, 3.0 + s / 16, 16, margin=0.5)
    a = pnn_forward(cfg, params, [(xc, yc)], BANK, grid=g).data
    b = pnn_forward(cfg, params, [(xc + s / 16, yc)], BANK, grid=gs).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    with pytest.raises(ConfigError):
        pnn_forward(cfg, params, [(xc, yc)], BANK)


def test_multichannel_heads():
    cfg = PnnConfig(Q=3, channels=2)
    bank = make_kernel_bank(3, 3.0)
    params = init_pnn_params(cfg, np.random.default_rng(7))
    out = pnn_forward(cfg, params, [_context(8), _context(9)], bank).data
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)
    with pytest.raises(ConfigError):
        pnn_forward(cfg, params, [_context(8)], bank)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_output_on_simplex(seed, scale):
    cfg = PnnConfig(Q=4)
    params = init_pnn_params(cfg, np.random.default_rng(seed))
    for v in params.values():
        v.data *= scale
    out = pnn_forward(cfg, params, [_context(seed)], BANK).data
    assert np.all(out >= 0) and abs(out.sum() - 1.0) <= 1e-9


def test_gumbel_argmax_frequencies():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    z = gumbel_softmax_sample(p, 0.5, np.random.default_rng(0), n=100_000).data
    freq = np.bincount(z.argmax(-1), minlength=4) / 100_000
    np.testing.assert_allclose(freq, p, atol=0.02)


def test_gumbel_one_hot_probs_concentrate():
    for temp in (0.1, 0.5, 2.0):
        z = gumbel_softmax_sample([0, 0, 1.0, 0], temp, np.random.default_rng(1), n=200).data
        assert np.all(z.argmax(-1) == 2)
        assert z[:, 2].min() > 0.99


def test_gumbel_low_temperature_mostly_one_hot():
    z = gumbel_softmax_sample([0.1, 0.2, 0.3, 0.4], 0.01, np.random.default_rng(2), n=10_000).data
    # close to one-hot for the vast majority; the exact 99.9% level is analysed in the acceptance suite
    assert (z.max(-1) >= 0.99).mean() > 0.95


def test_gumbel_hard_straight_through():
    p = T.tensor([0.2, 0.3, 0.5], requires_grad=True)
    noise = gumbel_noise(np.random.default_rng(3), (3,))
    with T.Tape() as tape:
        z = gumbel_softmax_sample(p, 0.5, noise=noise, hard=True)
        loss = T.sum(z * np.array([1.0, 2.0, 3.0]))
    assert set(np.unique(z.data)) <= {0.0, 1.0}
    assert np.abs(T.backward(loss, tape)[p]).sum() > 0


def test_gumbel_gradient_matches_finite_differences():
    noise = gumbel_noise(np.random.default_rng(4), (4,))
    w = np.array([0.3, -1.0, 2.0, 0.5])
    p0 = np.array([0.1, 0.2, 0.3, 0.4])
    p = T.tensor(p0, requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(gumbel_softmax_sample(p, 0.5, noise=noise) * w)
    g = T.backward(loss, tape)[p]
    fd = numerical_gradient(lambda v: float((gumbel_softmax_sample(v, 0.5, noise=noise).data * w).sum()),
                            p0, eps=1e-5)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4
    with pytest.raises(ConfigError):
        gumbel_softmax_sample(p0, 0.0, np.random.default_rng(0))


def test_kl_values():
    p = np.array([0.1, 0.2, 0.7])
    assert kl_categorical(p, p).item() == pytest.approx(0.0, abs=1e-15)
    assert kl_categorical([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(np.log(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    q, p = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    assert kl_categorical(q, p).item() >= -1e-12
