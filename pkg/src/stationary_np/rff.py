"""Random Fourier feature priors and path-wise GP posterior function samples.

A posterior sample is a prior draw plus a kernel-smoothed correction,

    f(x) = sum_q sqrt(z_q) phi_q(x) + sum_n v_n kbar(x - x_n),
    v = (Kbar(X, X) + sigma_eps^2 I)^-1 (Y - Psi(X) - eps),

where ``phi_q`` are random Fourier feature draws from basis kernel q, ``kbar``
is the probability-weighted expected kernel and ``Psi`` the prior term at the
context inputs. Everything is built from :mod:`stationary_np.tensor` ops so the
same code serves training (differentiable in the bank parameters and the
probabilities) and Monte Carlo checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .kernels import BankTensors, bank_tensors, expected_kernel, jittered_cholesky


@dataclass(frozen=True)
class RffPrior:
    """Random features for Q basis kernels, optionally batched over a leading axis.

    ``freqs`` are realized as ``mu_q + sqrt(sigma2_q) * unit_freqs`` so that
    they can be rebuilt differentiably from trainable bank parameters.
    """

    weights: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    unit_freqs: np.ndarray

    @property
    def l_spec(self):
        return self.weights.shape[-1]

    @property
    def Q(self):
        return self.weights.shape[-2]

    def frequencies(self, bank=None):
        """Spectral points as a tensor; differentiable when ``bank`` holds tensors."""
        if bank is None:
            return T.Tensor(self.freqs)
        bt = bank_tensors(bank)
        mu = T.reshape(bt.mu, (bt.Q, 1))
        sd = T.reshape(T.sqrt(bt.sigma2), (bt.Q, 1))
        return mu + sd * self.unit_freqs


def sample_rff_prior(bank, l_spec, rng, n=None):
    """Draw w ~ N(0, 1), s ~ p_q, b ~ U[0, 2 pi) for every basis and feature.

    With ``n`` given, ``n`` independent priors are stacked on a leading axis.
    """
    if l_spec < 1:
        raise ConfigError("l_spec must be >= 1")
    bt = bank_tensors(bank)
    shape = (bt.Q, l_spec) if n is None else (n, bt.Q, l_spec)
    w = rng.standard_normal(shape)
    unit = rng.standard_normal(shape)
    b = rng.uniform(0.0, 2.0 * np.pi, shape)
    s = bt.mu.data[:, None] + np.sqrt(bt.sigma2.data)[:, None] * unit
    return RffPrior(w, s, b, unit)


def rff_basis_values(prior, x, bank=None):
    """phi_q(x) for each basis: shape (..., Q, len(x))."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    s = prior.frequencies(bank)
    arg = (2.0 * np.pi) * T.reshape(s, s.shape + (1,)) * x + prior.phases[..., None]
    feats = T.cos(arg) * prior.weights[..., None]
    return np.sqrt(2.0 / prior.l_spec) * T.sum(feats, axis=-2)


def _check_weights(z, Q):
    z = T.as_tensor(z)
    if z.shape[-1] != Q:
        raise ShapeError(f"expected {Q} mixture weights, got {z.shape[-1]}", dim="Q",
                         expected=Q, got=z.shape[-1])
    if np.any(z.data < 0):
        raise DomainError("mixture weights must be nonnegative (square root undefined)")
    return z


def prior_term(prior, z, x, bank=None):
    """sum_q sqrt(z_q) phi_q(x); batched priors pair with batched weights."""
    z = _check_weights(z, prior.Q)
    phi = rff_basis_values(prior, x, bank)
    sz = T.sqrt(z)
    return T.sum(T.reshape(sz, sz.shape + (1,)) * phi, axis=-2)


def eval_rff_prior(prior, z, x):
    return prior_term(prior, z, x)


def rff_kernel_estimate(prior, tau):
    """Empirical feature covariance (2/l) sum_i cos(2 pi s tau + b) cos(b), per basis."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    arg = 2.0 * np.pi * prior.freqs[..., None] * tau + prior.phases[..., None]
    return 2.0 / prior.l_spec * (np.cos(arg) * np.cos(prior.phases)[..., None]).sum(-2)


def _solve_system(bt, probs, xc):
    """Expected-kernel Gram plus noise, with jitter escalation; returns a tensor."""
    kcc = expected_kernel(bt.mu, bt.sigma2, probs, xc[:, None] - xc[None, :])
    kcc = 0.5 * (kcc + T.transpose(kcc))
    noise = bt.sigma_eps**2
    _, jitter = jittered_cholesky(kcc.data, base=noise)
    return kcc + (noise + jitter) * np.eye(len(xc))


@dataclass
class PathwiseSample:
    """Posterior function draws: prior features, mixture weights ``z`` and smoothing weights ``v``.

    ``v`` has shape (..., N^c); calling the sample evaluates it at query inputs.
    """

    prior: RffPrior
    z: T.Tensor
    v: T.Tensor
    xc: np.ndarray
    probs: T.Tensor
    bank: BankTensors

    def __call__(self, xq):
        xq = np.asarray(xq, dtype=np.float64).reshape(-1)
        out = prior_term(self.prior, self.z, xq, self.bank)
        if len(self.xc) == 0:
            return out
        kqc = expected_kernel(self.bank.mu, self.bank.sigma2, self.probs,
                              xq[:, None] - self.xc[None, :])
        return out + update_term(kqc, self.v)


def update_term(kqc, v):
    """sum_n v_n k(x - x_n) for (possibly batched) weights ``v``."""
    if v.ndim == 1:
        return T.reshape(T.matmul(kqc, T.reshape(v, (-1, 1))), (-1,))
    return T.transpose(T.matmul(kqc, T.transpose(v)))


def pathwise_weights(xc, yc, bank, probs, prior, z, noise=None):
    """Smoothing weights of the update term; ``noise`` are observation-noise draws (same shape as the residual)."""
    bt = bank_tensors(bank)
    xc = np.asarray(xc, dtype=np.float64).reshape(-1)
    yc = np.asarray(yc, dtype=np.float64).reshape(-1)
    if len(xc) != len(yc):
        raise ShapeError("context inputs and outputs differ in length", dim="N^c",
                         expected=len(xc), got=len(yc))
    probs = T.as_tensor(probs)
    z = _check_weights(z, bt.Q)
    if len(xc) == 0:
        return PathwiseSample(prior, z, T.Tensor(np.zeros(z.shape[:-1] + (0,))), xc, probs, bt)
    resid = yc - prior_term(prior, z, xc, bt)
    if noise is not None:
        resid = resid - noise
    A = _solve_system(bt, probs, xc)
    v = T.solve(A, T.transpose(resid)) if resid.ndim > 1 else T.solve(A, resid)
    v = T.transpose(v) if resid.ndim > 1 else v
    return PathwiseSample(prior, z, v, xc, probs, bt)


def pathwise_posterior_sample(xc, yc, bank, probs, prior, z, xq, noise=None):
    """Evaluate path-wise posterior draws at ``xq``; returns a tensor of shape (..., len(xq))."""
    return pathwise_weights(xc, yc, bank, probs, prior, z, noise)(xq)


def sample_posterior_functions(xc, yc, bank, probs, n_samples, l_spec, rng, xq,
                               z=None, obs_noise=True):
    """``n_samples`` independent path-wise draws at ``xq`` as an (n_samples, len(xq)) array.

    ``z`` defaults to ``probs`` for every draw, which with one-hot ``probs``
    gives exact draws under a single basis kernel.
    """
    bt = bank_tensors(bank)
    probs = np.asarray(T.as_tensor(probs).data, dtype=np.float64)
    prior = sample_rff_prior(bt, l_spec, rng, n=n_samples)
    zz = np.broadcast_to(probs if z is None else np.asarray(z), (n_samples, bt.Q))
    nc = len(np.asarray(xc).reshape(-1))
    noise = bt.sigma_eps * rng.standard_normal((n_samples, nc)) if obs_noise else None
    return pathwise_posterior_sample(xc, yc, bt, probs, prior, zz, xq, noise).data


# ----------------------------------------------------------- alpha approximation


def data_delta_channel(xc, yc, grid_t):
    """Place each y at its nearest grid cell (summing collisions)."""
    grid_t = np.asarray(grid_t, dtype=np.float64)
    out = np.zeros_like(grid_t)
    if len(np.atleast_1d(xc)) == 0:
        return out
    spacing = grid_t[1] - grid_t[0] if len(grid_t) > 1 else 1.0
    idx = np.clip(np.rint((np.asarray(xc) - grid_t[0]) / spacing).astype(int), 0, len(grid_t) - 1)
    np.add.at(out, idx, np.asarray(yc, dtype=np.float64))
    return out


def filter_half_width(sigma2, spacing, n_std=3.0):
    """Half-width in cells covering ``n_std`` envelope lengthscales of the widest basis kernel."""
    s = np.sqrt(np.min(np.asarray(sigma2)))
    return int(np.ceil(n_std / (spacing * 2.0 * np.pi * s)))


def truncated_filter(bank, probs, spacing, half_width):
    """Expected kernel sampled at integer multiples of the grid spacing, length 2h + 1."""
    bt = bank_tensors(bank)
    lags = spacing * np.arange(-half_width, half_width + 1)
    return expected_kernel(bt.mu, bt.sigma2, probs, lags)


def approx_random_representation(data_delta, prior_values, alpha, filt):
    """alpha * prior + filt (*) (data_delta - alpha * prior), zero-padded 'same' convolution.

    ``data_delta`` and ``prior_values`` are (M,) or (N, M) on the grid.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    filt = T.as_tensor(filt)
    k = filt.shape[0]
    if k % 2 == 0:
        raise ShapeError("filter length must be odd", dim="K", got=k)
    prior_values = T.as_tensor(prior_values)
    m = prior_values.shape[-1]
    if k > m:
        raise ShapeError(f"filter length {k} exceeds grid size {m}", dim="K", expected=m, got=k)
    resid = data_delta - alpha * prior_values
    batched = resid.ndim == 2
    x = T.reshape(resid, (-1, 1, m))
    kern = T.reshape(filt[::-1], (1, 1, k))
    smoothed = T.conv1d(x, kern, np.zeros(1), padding=k // 2)
    smoothed = T.reshape(smoothed, (-1, m) if batched else (m,))
    return alpha * prior_values + smoothed


# ------------------------------------------------------------------- exact GP


def exact_gp_posterior(xc, yc, kernel, sigma_eps, xq):
    """Cholesky GP regression posterior: (mean, covariance) at ``xq``."""
    xc = np.asarray(xc, dtype=np.float64).reshape(-1)
    yc = np.asarray(yc, dtype=np.float64).reshape(-1)
    xq = np.asarray(xq, dtype=np.float64).reshape(-1)
    if len(xc) < 1:
        raise ShapeError("exact posterior needs at least one context point", dim="N^c", got=0)
    kcc = np.asarray(kernel(xc[:, None] - xc[None, :]))
    kcc = 0.5 * (kcc + kcc.T)
    kqc = np.asarray(kernel(xq[:, None] - xc[None, :]))
    kqq = np.asarray(kernel(xq[:, None] - xq[None, :]))
    L, _ = jittered_cholesky(kcc, base=sigma_eps**2)
    mean = kqc @ cho_solve((L, True), yc)
    cov = kqq - kqc @ cho_solve((L, True), kqc.T)
    return mean, cov


def empirical_posterior_stats(samples, floor=1e-8):
    """Per-query sample mean and unbiased variance (floored) over the leading axis."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ShapeError("need at least two samples", dim="N", expected=2, got=samples.shape[0])
    return samples.mean(axis=0), np.maximum(samples.var(axis=0, ddof=1), floor)
