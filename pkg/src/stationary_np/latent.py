"""Amortized categorical distribution over the kernel bank.

``pnn_forward`` maps a context set to one probability vector per output
channel. Both network versions only ever see input differences (v1) or a
grid-aligned smoother channel followed by pooling (v2), so translating the
context leaves the output unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .convdeepsets import deterministic_data_channel, rbf
from .errors import ConfigError
from .kernels import bank_kernels, bank_tensors

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class CategoricalParams:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or np.any(np.abs(p.sum(-1) - 1.0) > 1e-9):
            raise ConfigError("categorical parameters must lie on the simplex")
        object.__setattr__(self, "probs", p)

    @property
    def Q(self):
        return self.probs.shape[-1]


@dataclass(frozen=True)
class PnnConfig:
    Q: int
    version: str = "v1"
    channels: int = 1
    hidden: int = 32
    pooling: str = "sum"
    cnn_channels: int = 16
    cnn_layers: int = 2
    kernel_size: int = 5
    rbf_lengthscale: float = 0.1

    def __post_init__(self):
        if self.version not in ("v1", "v2"):
            raise ConfigError(f"unknown p_nn version {self.version!r}")
        if self.pooling not in ("sum", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.Q < 1 or self.channels < 1:
            raise ConfigError("Q and channels must be >= 1")

    @property
    def out_width(self):
        return self.Q * self.channels


def _glorot(rng, fan_in, fan_out, shape):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), shape)


def init_pnn_params(config, rng, prefix="pnn."):
    p = {}
    Q, K, H = config.Q, config.channels, config.hidden
    if config.version == "v1":
        p["mlp1.w1"] = _glorot(rng, Q + 1, H, (Q + 1, H))
        p["mlp1.b1"] = np.zeros(H)
        p["mlp1.w2"] = _glorot(rng, H, H, (H, H))
        p["mlp1.b2"] = np.zeros(H)
        width = H
    else:
        C, k = config.cnn_channels, config.kernel_size
        c_in = K
        for i in range(config.cnn_layers):
            p[f"cnn{i}.w"] = _glorot(rng, c_in * k, C * k, (C, c_in, k))
            p[f"cnn{i}.b"] = np.zeros(C)
            c_in = C
        width = C
    for k_ in range(K):
        p[f"head{k_}.w"] = _glorot(rng, width, Q, (width, Q))
        p[f"head{k_}.b"] = np.zeros(Q)
    return {prefix + name: T.Tensor(v, requires_grad=True) for name, v in p.items()}


def _pool(h, config, axis):
    return T.sum(h, axis=axis) if config.pooling == "sum" else T.mean(h, axis=axis)


def _uniform(Q):
    return T.Tensor(np.full(Q, 1.0 / Q))


def pnn_forward(config, params, contexts, bank, grid=None, prefix="pnn."):
    """Per-channel categorical parameters, shape (channels, Q).

    ``contexts`` is a list of ``(xc, yc)`` pairs, one per channel. A channel
    with an empty context gets the uniform distribution.
    """
    if len(contexts) != config.channels:
        raise ConfigError(f"expected {config.channels} context channels, got {len(contexts)}")
    P = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    if config.version == "v1":
        rows = [_v1_channel(config, P, xc, yc, bank, k) for k, (xc, yc) in enumerate(contexts)]
        return T.stack(rows, axis=0)
    if grid is None:
        raise ConfigError("p_nn version 2 needs a grid")
    return _v2(config, P, contexts, grid)


def _sorted(xc, yc):
    xc = np.asarray(xc, dtype=np.float64).reshape(-1)
    yc = np.asarray(yc, dtype=np.float64).reshape(-1)
    order = np.lexsort((yc, xc))
    return xc[order], yc[order]


def _v1_channel(config, P, xc, yc, bank, k):
    xc, yc = _sorted(xc, yc)
    if len(xc) == 0:
        return _uniform(config.Q)
    bt = bank_tensors(bank)
    kq = bank_kernels(bt.mu, bt.sigma2, xc[:, None] - xc[None, :])  # Q, Nc, Nc
    h = T.reshape(T.matmul(kq, yc.reshape(1, -1, 1)), (config.Q, -1))  # Q, Nc
    feats = T.concat([T.transpose(h), yc.reshape(-1, 1)], axis=1)  # Nc, Q + 1
    a = T.relu(T.affine(feats, P["mlp1.w1"], P["mlp1.b1"]))
    a = T.relu(T.affine(a, P["mlp1.w2"], P["mlp1.b2"]))
    logits = T.affine(_pool(a, config, 0), P[f"head{k}.w"], P[f"head{k}.b"])
    return T.softmax(logits, axis=-1)


def _v2(config, P, contexts, grid):
    t = grid.t if hasattr(grid, "t") else np.asarray(grid)
    smoother = rbf(config.rbf_lengthscale)
    chans = [deterministic_data_channel(xc, yc, t, smoother) for xc, yc in contexts]
    x = T.stack(chans, axis=0)  # K, M
    pad = config.kernel_size // 2
    for i in range(config.cnn_layers):
        x = T.relu(T.conv1d(x, P[f"cnn{i}.w"], P[f"cnn{i}.b"], padding=pad))
    pooled = T.mean(x, axis=1)
    rows = []
    for k, (xc, _) in enumerate(contexts):
        if len(np.atleast_1d(xc)) == 0:
            rows.append(_uniform(config.Q))
        else:
            rows.append(T.softmax(T.affine(pooled, P[f"head{k}.w"], P[f"head{k}.b"]), axis=-1))
    return T.stack(rows, axis=0)


def gumbel_noise(rng, shape):
    u = rng.uniform(np.finfo(float).tiny, 1.0, shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(probs, temperature, rng=None, n=None, hard=False, noise=None):
    """Relaxed categorical sample softmax((log p + g) / temperature), g ~ Gumbel(0, 1).

    ``n`` draws are stacked on a new leading axis. Pass ``noise`` to freeze the
    Gumbel draws. With ``hard`` the value is the one-hot argmax while the
    gradient flows through the relaxed sample.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    probs = T.as_tensor(probs)
    shape = probs.shape if n is None else (n,) + probs.shape
    if noise is None:
        noise = gumbel_noise(rng, shape)
    logits = (T.log(probs + PROB_FLOOR) + noise) / temperature
    z = T.softmax(logits, axis=-1)
    if not hard:
        return z
    onehot = (z.data == z.data.max(axis=-1, keepdims=True)).astype(np.float64)
    return z + (onehot - z.data)


def kl_categorical(q, p):
    """KL(q || p) = sum q log(q / p) with 0 log 0 = 0 and p floored at 1e-12."""
    q = T.as_tensor(q)
    p = np.maximum(np.asarray(p.probs if isinstance(p, CategoricalParams) else T.as_tensor(p).data),
                   PROB_FLOOR)
    safe_q = T.relu(q - 1e-300) + 1e-300
    return T.sum(q * (T.log(safe_q) - np.log(p)), axis=-1)
