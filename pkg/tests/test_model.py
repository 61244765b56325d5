import numpy as np
import pytest

from stationary_np import tensor as T
from stationary_np.errors import ConfigError, ShapeError
from stationary_np.gradcheck import numerical_gradient
from stationary_np.model import (
    ModelConfig,
    bank_from_params,
    config_hash,
    decoder_layout,
    init_params,
    load_checkpoint,
    predict,
    predictive_head,
    rho_forward,
    save_checkpoint,
)
from stationary_np.training import gaussian_logpdf


def _task(seed, nc=6, nt=10):
    rng = np.random.default_rng(seed)
    xc, xt = rng.uniform(0, 2, nc), rng.uniform(0, 2, nt)
    return xc, np.sin(3 * xc), xt, np.sin(3 * xt)


def test_config_validation_and_variant_rules():
    with pytest.raises(ConfigError):
        ModelConfig(variant="other")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"nope": 1})
    assert ModelConfig(variant="convcnp", n_samples=5).n_samples == 1
    gp = ModelConfig(variant="gpconvcnp", Q=4)
    assert gp.Q == 1 and not gp.train_kernels
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert config_hash(cfg.to_dict()) == config_hash(ModelConfig().to_dict())
    assert len(config_hash(cfg.to_dict())) == 12


def test_bank_parameters_start_at_linear_spacing():
    cfg = ModelConfig(Q=5, hz_max=5.0)
    bank = bank_from_params(cfg, init_params(cfg, np.random.default_rng(0)))
    np.testing.assert_allclose(bank.mu.data, [0, 1.25, 2.5, 3.75, 5], atol=1e-12)
    np.testing.assert_allclose(bank.sigma2.data, 0.625**2, atol=1e-12)


def test_deep_layout_skips():
    skips = {name: skip for name, _, _, skip in decoder_layout(ModelConfig(decoder="deep"))}
    assert len(skips) == 12
    assert [skips[f"L{i}"] for i in range(8, 13)] == ["L5", "L4", "L3", "L2", "L1"]


@pytest.mark.parametrize("decoder", ["shallow", "deep"])
def test_rho_zero_weights_give_bias(decoder):
    cfg = ModelConfig(decoder=decoder)
    params = init_params(cfg, np.random.default_rng(1))
    for k, v in params.items():
        if k.startswith("rho.") and k.endswith(".w"):
            v.data[:] = 0.0
    last = decoder_layout(cfg)[-1][0]
    params[f"rho.{last}.b"].data[:] = np.arange(cfg.feature_width)
    x = np.random.default_rng(2).normal(size=(2, 2, 64))
    out = rho_forward(cfg, params, x).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(8.0)[None, :, None], out.shape))


def test_rho_shift_equivariance_and_channel_check():
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=(1, 2, 80))
    s = 3
    a = rho_forward(cfg, params, x).data
    b = rho_forward(cfg, params, np.roll(x, s, axis=2)).data
    np.testing.assert_allclose(b[..., 20 + s:60 + s], a[..., 20:60], atol=1e-9)
    np.testing.assert_array_equal(a, rho_forward(cfg, params, x).data)
    with pytest.raises(ShapeError):
        rho_forward(cfg, params, np.zeros((1, 3, 20)))


def test_head_positive_sigma_and_zero_weights():
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(5))
    feats = np.random.default_rng(6).normal(size=(3, 7, 8)) * 50
    _, sigma = predictive_head(params, feats)
    assert np.all(sigma.data > 0)
    params["head.w2"].data[:] = 0.0
    params["head.b2"].data[:] = [0.7, -1.2]
    mu, sigma = predictive_head(params, feats)
    np.testing.assert_allclose(mu.data, 0.7)
    np.testing.assert_allclose(sigma.data, 0.01 + np.log1p(np.exp(-1.2)))


def test_head_gradient_matches_finite_differences():
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(7))
    feats = np.random.default_rng(8).normal(size=(5, 8))
    y = np.random.default_rng(9).normal(size=5)

    def value(w2):
        p = dict(params, **{"head.w2": T.Tensor(w2)})
        mu, sigma = predictive_head(p, feats)
        return float(gaussian_logpdf(y, mu, sigma).data.sum())

    with T.Tape() as tape:
        mu, sigma = predictive_head(params, feats)
        ll = T.sum(gaussian_logpdf(y, mu, sigma))
    g = T.backward(ll, tape)[params["head.w2"]]
    fd = numerical_gradient(value, params["head.w2"].data.copy(), eps=1e-5)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4


def test_convcnp_is_deterministic_single_sample():
    cfg = ModelConfig(variant="convcnp")
    params = init_params(cfg, np.random.default_rng(10))
    xc, yc, xt, _ = _task(11)
    a = predict(cfg, params, xc, yc, xt, np.random.default_rng(0))
    b = predict(cfg, params, xc, yc, xt, np.random.default_rng(99))
    assert a.n_samples == 1
    np.testing.assert_array_equal(a.mu[0].data, b.mu[0].data)


def test_bayes_prediction_shapes_and_density():
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(12))
    xc, yc, xt, yt = _task(13)
    pred = predict(cfg, params, xc, yc, xt, np.random.default_rng(0))
    assert pred.n_samples == 5
    assert pred.mu[0].shape == pred.sigma[0].shape == (5, len(xt))
    assert np.isfinite(pred.log_density(yt).item())
    np.testing.assert_allclose(pred.probs.data.sum(-1), 1.0)


def test_log_density_of_identical_samples():
    cfg = ModelConfig(variant="convcnp")
    params = init_params(cfg, np.random.default_rng(14))
    xc, yc, xt, yt = _task(15)
    pred = predict(cfg, params, xc, yc, xt, np.random.default_rng(0))
    single = pred.log_density(yt).item()
    pred.mu[0] = T.Tensor(np.repeat(pred.mu[0].data, 4, axis=0))
    pred.sigma[0] = T.Tensor(np.repeat(pred.sigma[0].data, 4, axis=0))
    assert pred.log_density(yt).item() == pytest.approx(single, abs=1e-12)


def test_convcnp_pipeline_translation_equivariance():
    cfg = ModelConfig(variant="convcnp", points_per_unit=32)
    params = init_params(cfg, np.random.default_rng(16))
    xc, yc, xt, _ = _task(17)
    shift = 40 / 32
    a = predict(cfg, params, xc, yc, xt, np.random.default_rng(0))
    b = predict(cfg, params, xc + shift, yc, xt + shift, np.random.default_rng(0))
    interior = (xt > 0.5) & (xt < 1.5)
    np.testing.assert_allclose(b.mu[0].data[:, interior], a.mu[0].data[:, interior], atol=1e-6)
    np.testing.assert_allclose(b.sigma[0].data[:, interior], a.sigma[0].data[:, interior], atol=1e-6)


def test_gpconvcnp_equals_bayes_with_fixed_one_hot():
    gp = ModelConfig(variant="gpconvcnp", gpconvcnp_lengthscale=1.0)
    # single density with variance 1 / (2 pi l)^2 at l = 1, reached through hz_max = 1 / pi
    bayes = ModelConfig(variant="bayes", Q=1, hz_max=1.0 / np.pi, train_kernels=False)
    params = init_params(gp, np.random.default_rng(18))
    xc, yc, xt, _ = _task(19)
    a = predict(gp, params, xc, yc, xt, np.random.default_rng(5))
    b = predict(bayes, params, xc, yc, xt, np.random.default_rng(5), probs=T.Tensor([[1.0]]))
    np.testing.assert_allclose(a.mu[0].data, b.mu[0].data, atol=1e-12)
    np.testing.assert_allclose(a.sigma[0].data, b.sigma[0].data, atol=1e-12)


def test_multichannel_prediction():
    cfg = ModelConfig(channels=3, Q=3)
    params = init_params(cfg, np.random.default_rng(20))
    rng = np.random.default_rng(21)
    xc = [rng.uniform(0, 3, n) for n in (4, 5, 6)]
    yc = [np.cos(x) for x in xc]
    xt = [rng.uniform(0, 3, 7) for _ in range(3)]
    pred = predict(cfg, params, xc, yc, xt, rng)
    assert len(pred.mu) == 3 and pred.probs.shape == (3, 3)
    assert np.isfinite(pred.log_density([np.cos(x) for x in xt]).item())


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(variant="bayes", Q=3)
    params = init_params(cfg, np.random.default_rng(22))
    path = tmp_path / "ck.json"
    save_checkpoint(path, cfg, params, header={"seed": 1})
    cfg2, params2, head = load_checkpoint(path)
    assert cfg2 == cfg and head == {"seed": 1}
    assert set(params2) == set(params)
    for k in params:
        np.testing.assert_array_equal(params2[k].data, params[k].data)
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "other"}')
    with pytest.raises(ConfigError):
        load_checkpoint(bad)
