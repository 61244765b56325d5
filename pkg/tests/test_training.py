import numpy as np
import pytest

from stationary_np import tensor as T
from stationary_np.errors import ConfigError
from stationary_np.kernels import make_kernel_bank
from stationary_np.model import ModelConfig, init_params
from stationary_np.taskgen import generate_tasks
from stationary_np.training import (
    MetricsWriter,
    TrainConfig,
    evaluate_tasks,
    gaussian_logpdf,
    mean_stderr,
    meta_train_step,
    multisample_loglik,
    report_csv,
    task_gradients,
    task_loss,
    task_targets,
    tempered_posterior_params,
    tempered_softmax,
    train,
)


def test_gaussian_logpdf_hand_value():
    v = gaussian_logpdf(np.array([1.0]), T.tensor([0.0]), T.tensor([2.0])).data[0]
    assert v == pytest.approx(-0.5 * np.log(2 * np.pi) - np.log(2.0) - 0.125)


def test_multisample_loglik_cases():
    rng = np.random.default_rng(0)
    mu, sigma, y = rng.normal(size=(1, 6)), rng.uniform(0.5, 2, (1, 6)), rng.normal(size=6)
    single = multisample_loglik(mu, sigma, y).item()
    plain = float(gaussian_logpdf(y, T.Tensor(mu[0]), T.Tensor(sigma[0])).data.sum())
    assert single == pytest.approx(plain, abs=1e-12)
    dup = multisample_loglik(np.repeat(mu, 3, 0), np.repeat(sigma, 3, 0), y).item()
    assert dup == pytest.approx(single, abs=1e-12)
    mu5, sig5 = rng.normal(size=(5, 6)), rng.uniform(0.5, 2, (5, 6))
    per = gaussian_logpdf(y, T.Tensor(mu5), T.Tensor(sig5)).data.sum(1)
    assert multisample_loglik(mu5, sig5, y).item() >= per.mean()


def test_tempered_softmax_cases():
    np.testing.assert_allclose(tempered_softmax([-3.0, -3.0, -3.0]), 1 / 3)
    np.testing.assert_allclose(tempered_softmax([0.0, -50.0, 7.0], tau0=1e12), 1 / 3, atol=1e-9)
    p = tempered_softmax([0.0, -10.0], tau0=1.0)
    assert p[0] == pytest.approx(0.9999546, abs=1e-7)
    assert p[1] == pytest.approx(4.54e-5, rel=1e-3)
    ll = np.array([-4.0, -1.5, -9.0, -2.25])
    np.testing.assert_array_equal(tempered_softmax(ll), tempered_softmax(ll + 8.0))
    with pytest.raises(ConfigError):
        tempered_softmax(ll, tau0=0.0)


def test_tempered_posterior_on_simplex():
    bank = make_kernel_bank(4, 4.0)
    task = generate_tasks("rbf", 1, 3)[0]
    p = tempered_posterior_params(task.xc[0], task.yc[0], task.xt[0], task.yt[0], bank,
                                  rng=np.random.default_rng(0)).probs
    assert p.shape == (4,) and p.sum() == pytest.approx(1.0)


def test_beta_zero_is_pure_likelihood():
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(1))
    task = generate_tasks("rbf", 1, 4)[0]
    parts = task_loss(cfg, params, task, np.random.default_rng(2), beta=0.0)
    assert parts.kl == 0.0 and parts.loss.item() == pytest.approx(-parts.loglik)
    targets = task_targets(cfg, params, task, TrainConfig(), np.random.default_rng(3))
    full = task_loss(cfg, params, task, np.random.default_rng(2), beta=0.1, targets=targets)
    assert full.kl >= 0.0
    assert full.loglik == pytest.approx(parts.loglik)
    assert -full.loss.item() <= full.loglik
    with pytest.raises(ConfigError):
        task_loss(cfg, params, task, np.random.default_rng(2), beta=0.1)


def test_task_gradient_matches_finite_differences():
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(5))
    task = generate_tasks("rbf", 1, 6)[0]
    tc = TrainConfig()
    _, grads = task_gradients(cfg, params, task, np.random.default_rng(7), tc.beta, tc)
    targets = task_targets(cfg, params, task, tc, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    names = sorted(params)
    picks = [(names[i], int(rng.integers(params[names[i]].size)))
             for i in rng.choice(len(names), 10, replace=False)]

    def value():
        # the targets consume the stream first; replay it before the forward pass
        r = np.random.default_rng(7)
        task_targets(cfg, params, task, tc, r)
        return task_loss(cfg, params, task, r, tc.beta, targets).loss.item()

    num, ana = [], []
    for name, idx in picks:
        flat = params[name].data.reshape(-1)
        old = flat[idx]
        flat[idx] = old + 1e-6
        up = value()
        flat[idx] = old - 1e-6
        down = value()
        flat[idx] = old
        num.append((up - down) / 2e-6)
        ana.append(grads[name].reshape(-1)[idx])
    num, ana = np.array(num), np.array(ana)
    assert np.linalg.norm(num - ana) / np.linalg.norm(num) <= 1e-3


def test_meta_train_step_independent_of_workers():
    cfg = ModelConfig(variant="convcnp")
    tasks = generate_tasks("rbf", 4, 9)
    tc = TrainConfig()
    results = []
    for workers in (1, 3):
        params = init_params(cfg, np.random.default_rng(10))
        state = T.AdamState(lr=tc.lr, weight_decay=tc.weight_decay)
        rep = meta_train_step(cfg, tc, params, state, tasks, np.random.default_rng(11), workers)
        assert rep.n_tasks == 4 and rep.skipped == 0 and state.t == 1
        results.append(params["head.w2"].data.copy())
    np.testing.assert_array_equal(results[0], results[1])
    with pytest.raises(ConfigError):
        meta_train_step(cfg, tc, params, state, [], np.random.default_rng(0))


def test_repeated_steps_reduce_loss():
    cfg = ModelConfig()
    tc = TrainConfig()
    passed = 0
    for seed in range(3):
        tasks = generate_tasks("rbf", 2, 100 + seed)
        params = init_params(cfg, np.random.default_rng(seed))
        state = T.AdamState(lr=tc.lr, weight_decay=tc.weight_decay)
        losses = [meta_train_step(cfg, tc, params, state, tasks, np.random.default_rng(seed)).loss
                  for _ in range(100)]
        passed += losses[-1] < losses[0]
    assert passed >= 2


def test_mean_stderr_hand_values():
    assert mean_stderr([-1.0, -3.0]) == pytest.approx((-2.0, 1.0))
    assert mean_stderr([-0.5]) == (-0.5, 0.0)


def test_evaluate_tasks_deterministic_and_flags_single():
    cfg = ModelConfig(Q=2)
    params = init_params(cfg, np.random.default_rng(12))
    groups = {5: generate_tasks("rbf", 3, 13, nc=5), 10: generate_tasks("rbf", 1, 14, nc=10)}
    a = evaluate_tasks(cfg, params, groups, np.random.default_rng(15))
    b = evaluate_tasks(cfg, params, groups, np.random.default_rng(15))
    assert a == b
    assert a.row(10).single_task and a.row(10).stderr == 0.0
    assert not a.row(5).single_task and a.row(5).n_tasks == 3
    text = report_csv(a, header="h")
    assert text.startswith("# h\n") and text.count("\n") == 4


def test_train_records_epochs(tmp_path):
    cfg = ModelConfig(variant="convcnp")
    params = init_params(cfg, np.random.default_rng(16))
    tasks = generate_tasks("rbf", 6, 17)
    writer = MetricsWriter(tmp_path / "m.csv", header="run")
    seen = []
    state, history = train(cfg, TrainConfig(epochs=2, batch_size=4), params, tasks,
                           metrics=writer, log=seen.append)
    assert [h.epoch for h in history] == [1, 2] and len(seen) == 2
    assert state.t == 4
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# run" and lines[1].startswith("epoch,split") and len(lines) == 4


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(beta=-1)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
