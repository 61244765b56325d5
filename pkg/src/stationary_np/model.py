"""Predictive model: representation, CNN decoder, target smoothing and Gaussian head.

Three variants share the decoder and head:

``bayes``
    kernel bank + amortized categorical latent + path-wise posterior channels.
``convcnp``
    deterministic kernel-smoother channels under a fixed narrow RBF.
``gpconvcnp``
    path-wise posterior channels under one fixed RBF kernel, no latent.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .convdeepsets import (
    deterministic_representation,
    grid_for,
    random_functional_representation,
    rbf,
    smooth_to_targets,
)
from .errors import ConfigError, ShapeError
from .kernels import BankTensors, make_kernel_bank, rbf_density
from .latent import PnnConfig, init_pnn_params, pnn_forward

VARIANTS = ("bayes", "convcnp", "gpconvcnp")
CHECKPOINT_FORMAT = "stationary_np.checkpoint"
CHECKPOINT_VERSION = 1
SIGMA_FLOOR = 0.01


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "bayes"
    Q: int = 4
    hz_max: float = 4.0
    sigma_eps: float = 1e-2
    l_spec: int = 10
    n_samples: int = 5
    mode: str = "exact"
    alpha: float = 0.1
    decoder: str = "shallow"
    points_per_unit: int = 64
    margin: float = 0.1
    gs_temperature: float = 0.5
    hard_gumbel: bool = False
    obs_noise: bool = True
    pnn_version: str = "v1"
    pnn_hidden: int = 32
    channels: int = 1
    train_kernels: bool = True
    convcnp_lengthscale: float = 0.01
    gpconvcnp_lengthscale: float = 1.0
    feature_width: int = 8
    hidden_channels: int = 16
    unet_base: int = 8
    head_hidden: int = 16
    kernel_size: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.decoder not in ("shallow", "deep"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.mode not in ("exact", "approx"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "approx" and not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.n_samples < 1 or self.channels < 1 or self.Q < 1:
            raise ConfigError("n_samples, channels and Q must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.variant == "convcnp" and self.n_samples != 1:
            object.__setattr__(self, "n_samples", 1)
        if self.variant == "gpconvcnp":
            object.__setattr__(self, "Q", 1)
            object.__setattr__(self, "train_kernels", False)

    @property
    def latent(self):
        return self.variant == "bayes"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def pnn_config(self):
        return PnnConfig(Q=self.Q, version=self.pnn_version, channels=self.channels,
                         hidden=self.pnn_hidden)


def config_hash(d):
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ------------------------------------------------------------------ parameters


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def _conv_init(rng, c_out, c_in, k):
    return rng.normal(0.0, np.sqrt(2.0 / ((c_in + c_out) * k)), (c_out, c_in, k))


def decoder_layout(config):
    """[(name, c_in, c_out, skip_from)] for the decoder layers after the input projection."""
    F, H = config.feature_width, config.hidden_channels
    if config.decoder == "shallow":
        return [("L1", F, H, None), ("L2", H, H, None), ("L3", H, H, None),
                ("L4", H, H, None), ("L5", H, F, None)]
    b = config.unet_base
    width = [b * 2**i for i in range(6)]  # L1..L6 outputs
    layers, c_in = [], F
    for i in range(6):
        layers.append((f"L{i + 1}", c_in, width[i], None))
        c_in = width[i]
    layers.append(("L7", width[5], width[4], None))
    # L8 <- [L5, L7], L9 <- [L4, L8], ..., L12 <- [L1, L11]
    for i, skip in zip(range(8, 13), (5, 4, 3, 2, 1)):
        c_prev = width[4] if i == 8 else width[13 - i]
        c_out = width[12 - i] if i < 12 else F
        layers.append((f"L{i}", width[skip - 1] + c_prev, c_out, f"L{skip}"))
    return layers


def init_params(config, rng):
    """Fresh parameter store; names are dotted paths, values trainable tensors."""
    P = {}
    K, F = config.channels, config.feature_width
    if config.variant == "bayes":
        bank = make_kernel_bank(config.Q, config.hz_max, config.sigma_eps)
        mus = bank.mus[:, 0]
        if config.train_kernels:
            if config.Q > 1:
                P["bank.mu_steps"] = _inv_softplus(np.diff(mus))
            P["bank.log_sigma2"] = np.log(bank.sigma2s[:, 0])
    ks = config.kernel_size
    P["rho.in.w"] = _conv_init(rng, F, 2 * K, 1)
    P["rho.in.b"] = np.zeros(F)
    for name, c_in, c_out, _ in decoder_layout(config):
        P[f"rho.{name}.w"] = _conv_init(rng, c_out, c_in, ks)
        P[f"rho.{name}.b"] = np.zeros(c_out)
    P["smooth.log_ls"] = np.array([np.log(2.0 / config.points_per_unit)])
    Hh = config.head_hidden
    P["head.w1"] = rng.normal(0.0, np.sqrt(2.0 / (F + Hh)), (F, Hh))
    P["head.b1"] = np.zeros(Hh)
    P["head.w2"] = rng.normal(0.0, np.sqrt(2.0 / (Hh + 2 * K)), (Hh, 2 * K))
    P["head.b2"] = np.zeros(2 * K)
    store = {k: T.Tensor(v, requires_grad=True) for k, v in P.items()}
    if config.latent:
        store.update(init_pnn_params(config.pnn_config(), rng))
    return store


def bank_from_params(config, params):
    """Kernel bank tensors: means as cumulative softplus steps from 0, variances via exp."""
    if config.variant == "gpconvcnp":
        d = rbf_density(config.gpconvcnp_lengthscale)
        return BankTensors(T.Tensor(d.mu), T.Tensor(d.sigma2), config.sigma_eps)
    if config.variant != "bayes":
        return None
    if "bank.log_sigma2" not in params:
        bank = make_kernel_bank(config.Q, config.hz_max, config.sigma_eps)
        return BankTensors(T.Tensor(bank.mus[:, 0]), T.Tensor(bank.sigma2s[:, 0]), config.sigma_eps)
    sigma2 = T.exp(params["bank.log_sigma2"])
    if config.Q == 1:
        mu = T.Tensor(np.zeros(1))
    else:
        steps = T.softplus(params["bank.mu_steps"])
        lower = np.tril(np.ones((config.Q, config.Q - 1)), k=-1)
        mu = T.reshape(T.matmul(lower, T.reshape(steps, (-1, 1))), (-1,))
    return BankTensors(mu, sigma2, config.sigma_eps)


# -------------------------------------------------------------------- forward


def rho_forward(config, params, x):
    """Decode (N, 2K, M) representation channels into (N, F, M) grid features."""
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != 2 * config.channels:
        raise ShapeError(f"decoder expects (N, {2 * config.channels}, M) input, got {x.shape}",
                         dim="C_in", expected=2 * config.channels,
                         got=x.shape[1] if x.ndim == 3 else x.shape)
    pad = config.kernel_size // 2
    h = T.conv1d(x, params["rho.in.w"], params["rho.in.b"])
    acts = {}
    layout = decoder_layout(config)
    for i, (name, _, _, skip) in enumerate(layout):
        inp = h if skip is None else T.concat([acts[skip], h], axis=1)
        h = T.conv1d(inp, params[f"rho.{name}.w"], params[f"rho.{name}.b"], padding=pad)
        if i < len(layout) - 1:
            h = T.relu(h)
        acts[name] = h
    return h


def predictive_head(params, feats, channel=0):
    """(mu, sigma) from smoothed features (..., F); sigma = 0.01 + softplus(raw)."""
    a = T.relu(T.affine(feats, params["head.w1"], params["head.b1"]))
    out = T.affine(a, params["head.w2"], params["head.b2"])
    mu = out[..., 2 * channel]
    sigma = SIGMA_FLOOR + T.softplus(out[..., 2 * channel + 1])
    return mu, sigma


@dataclass
class Prediction:
    """Per-channel predictive parameters, each (N, N^t_k), plus the latent probabilities."""

    mu: list
    sigma: list
    probs: T.Tensor | None
    grid: object = None

    @property
    def n_samples(self):
        return self.mu[0].shape[0]

    def per_sample_loglik(self, yt):
        from .training import gaussian_logpdf

        total = 0.0
        for mu, sigma, y in zip(self.mu, self.sigma, _channels(yt, len(self.mu))):
            if mu.shape[-1]:
                total = total + T.sum(gaussian_logpdf(y, mu, sigma), axis=-1)
        return T.as_tensor(total) * np.ones(self.n_samples)

    def log_density(self, yt):
        """log (1/N) sum_n prod_i N(y_i; mu_n, sigma_n^2)."""
        ll = self.per_sample_loglik(yt)
        return T.logsumexp(ll, axis=0) - np.log(self.n_samples)


def _channels(v, k):
    if k == 1 and not (isinstance(v, (list, tuple)) and len(v) == 1):
        return [np.asarray(v, dtype=np.float64).reshape(-1)]
    if len(v) != k:
        raise ShapeError(f"expected {k} channels, got {len(v)}", dim="K", expected=k, got=len(v))
    return [np.asarray(c, dtype=np.float64).reshape(-1) for c in v]


def represent(config, params, xc, yc, grid, rng, probs=None):
    """Stacked decoder input (N, 2K, M) and the per-channel latent probabilities."""
    K = config.channels
    xc, yc = _channels(xc, K), _channels(yc, K)
    blocks = []
    if config.variant == "convcnp":
        k = rbf(config.convcnp_lengthscale)
        for x, y in zip(xc, yc):
            blocks.append(deterministic_representation(x, y, grid, k).stacked())
        return T.concat(blocks, axis=1), None
    bank = bank_from_params(config, params)
    if probs is None:
        if config.latent:
            probs = pnn_forward(config.pnn_config(), params, list(zip(xc, yc)), bank, grid)
        else:
            probs = T.Tensor(np.ones((K, 1)))
    for k, (x, y) in enumerate(zip(xc, yc)):
        rep = random_functional_representation(
            x, y, bank, probs[k], config.n_samples, config.l_spec, rng, grid,
            mode=config.mode, alpha=config.alpha, temperature=config.gs_temperature,
            hard=config.hard_gumbel, obs_noise=config.obs_noise)
        blocks.append(rep.stacked())
    return T.concat(blocks, axis=1), probs


def predict(config, params, xc, yc, xt, rng, probs=None):
    """Predictive parameters at target inputs ``xt`` for each of the N representation samples.

    Inputs are per-channel lists when ``config.channels > 1``; for one channel
    plain arrays are accepted.
    """
    K = config.channels
    xt = _channels(xt, K)
    grid = grid_for(*_channels(xc, K), *xt, points_per_unit=config.points_per_unit,
                    margin=config.margin)
    x, probs = represent(config, params, xc, yc, grid, rng, probs)
    feats = rho_forward(config, params, x)  # N, F, M
    smoother = rbf(T.exp(params["smooth.log_ls"]))
    mus, sigmas = [], []
    for k, xk in enumerate(xt):
        sm = smooth_to_targets(feats, grid, xk, smoother)  # N, F, Nt
        mu, sigma = predictive_head(params, T.transpose(sm, (0, 2, 1)), k)
        mus.append(mu)
        sigmas.append(sigma)
    return Prediction(mus, sigmas, probs, grid)


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path, config, params, header=None):
    """JSON checkpoint: format tag, version, header, model config and named arrays."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header or {},
        "model_config": config.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                   for k, v in sorted(params.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig.from_dict(doc["model_config"])
    params = {k: T.Tensor(np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]),
                          requires_grad=True)
              for k, v in doc["params"].items()}
    return config, params, doc.get("header", {})


def with_overrides(config, **kw):
    return replace(config, **kw)
