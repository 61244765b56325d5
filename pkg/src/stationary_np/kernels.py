"""Stationary kernels: the Gaussian spectral-density bank and the data-generating kernels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalError, ShapeError

TWO_PI2 = 2.0 * np.pi**2

# escalation ladder for Gram factorizations
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class SpectralDensity:
    """Gaussian spectral density N(mu, diag(sigma2)) over frequencies (cycles per unit)."""

    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=np.float64))
        if sigma2.shape != mu.shape:
            sigma2 = np.broadcast_to(sigma2, mu.shape).copy()
        if np.any(sigma2 <= 0.0):
            raise ConfigError("spectral variances must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def dim(self):
        return self.mu.shape[0]


@dataclass(frozen=True)
class KernelBank:
    """Ordered spectral densities defining Q stationary basis kernels, plus noise std."""

    densities: tuple
    sigma_eps: float = 1e-2

    def __post_init__(self):
        dens = tuple(self.densities)
        object.__setattr__(self, "densities", dens)
        if not dens:
            raise ConfigError("a kernel bank needs at least one density")
        if self.sigma_eps <= 0:
            raise ConfigError("sigma_eps must be positive")
        mus = np.stack([d.mu for d in dens])
        if np.any(mus[0] != 0.0):
            raise ConfigError("the first density must be centred at zero frequency")
        if np.any(np.diff(mus, axis=0) < 0.0):
            raise ConfigError("density means must be nondecreasing")

    @property
    def Q(self):
        return len(self.densities)

    @property
    def mus(self):
        return np.stack([d.mu for d in self.densities])

    @property
    def sigma2s(self):
        return np.stack([d.sigma2 for d in self.densities])


def make_kernel_bank(Q, hz_max, sigma_eps=1e-2):
    """Bank of Q densities with means spaced linearly on [0, hz_max].

    Every density gets standard deviation ``0.5 * (mu_2 - mu_1)``; for Q == 1
    the spacing is taken as ``hz_max``.
    """
    if Q < 1:
        raise ConfigError(f"Q must be >= 1, got {Q}")
    if hz_max <= 0:
        raise ConfigError("hz_max must be positive")
    mus = np.linspace(0.0, hz_max, Q)
    step = mus[1] - mus[0] if Q > 1 else float(hz_max)
    sigma = 0.5 * step
    dens = tuple(SpectralDensity(np.array([m]), np.array([sigma**2])) for m in mus)
    return KernelBank(dens, sigma_eps)


def rbf_density(lengthscale):
    """Zero-mean density whose kernel is exp(-tau^2 / (2 l^2))."""
    return SpectralDensity(np.array([0.0]), np.array([1.0 / (2.0 * np.pi * lengthscale) ** 2]))


def _as_diff(density, tau):
    tau = np.asarray(tau, dtype=np.float64)
    if density.dim == 1:
        return tau[..., None]
    if tau.shape[-1:] != (density.dim,):
        raise ShapeError("tau must end with the input dimension", dim="D",
                         expected=density.dim, got=tau.shape[-1:])
    return tau


def sm_kernel_eval(density, tau):
    """exp(-2 pi^2 tau' Sigma tau) cos(2 pi mu' tau): the real Fourier transform of the density."""
    d = _as_diff(density, tau)
    quad = (d * d * density.sigma2).sum(-1)
    return np.exp(-TWO_PI2 * quad) * np.cos(2.0 * np.pi * (d * density.mu).sum(-1))


def mixture_kernel_eval(bank, weights, tau):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (bank.Q,):
        raise ShapeError(f"expected {bank.Q} weights, got {w.shape}", dim="Q",
                         expected=bank.Q, got=w.shape)
    if np.any(w < 0):
        raise ConfigError("mixture weights must be nonnegative")
    return sum(wq * sm_kernel_eval(d, tau) for wq, d in zip(w, bank.densities))


def bank_kernels(mu, sigma2, tau):
    """Differentiable 1D basis kernels: Q x tau.shape values for tensors ``mu`` and ``sigma2``."""
    mu, sigma2, tau = T.as_tensor(mu), T.as_tensor(sigma2), T.as_tensor(tau)
    extra = (1,) * tau.ndim
    mu_b = T.reshape(mu, mu.shape + extra)
    s2_b = T.reshape(sigma2, sigma2.shape + extra)
    tau2 = T.square(tau)
    return T.exp(-TWO_PI2 * s2_b * tau2) * T.cos((2.0 * np.pi) * mu_b * tau)


def expected_kernel(mu, sigma2, probs, tau):
    """Probability-weighted mixture of the basis kernels, differentiable in every argument."""
    k = bank_kernels(mu, sigma2, tau)
    probs = T.as_tensor(probs)
    p = T.reshape(probs, probs.shape + (1,) * (k.ndim - 1))
    return T.sum(p * k, axis=0)


def gram_matrix(kernel, X, X2=None, jitter=0.0):
    """G[i, j] = kernel(X[i] - X2[j]) for 1D inputs, with ``jitter`` on the diagonal when X2 is X."""
    X = np.asarray(X, dtype=np.float64).reshape(-1)
    same = X2 is None
    X2 = X if same else np.asarray(X2, dtype=np.float64).reshape(-1)
    G = np.asarray(kernel(X[:, None] - X2[None, :]), dtype=np.float64)
    if same:
        G = 0.5 * (G + G.T)
        if jitter:
            G = G + jitter * np.eye(len(X))
    return G


def jittered_cholesky(G, base=0.0, jitters=JITTERS):
    """Cholesky of ``G + (base + j) I`` for the first j in the ladder that succeeds.

    Returns ``(L, j)``; raises :class:`NumericalError` when every level fails.
    """
    eye = np.eye(G.shape[0])
    for j in jitters:
        try:
            return np.linalg.cholesky(G + (base + j) * eye), j
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"Cholesky failed up to jitter {jitters[-1]:g}")


# ------------------------------------------------------------ data-generating kernels

FAMILIES = ("rbf", "matern52", "weakly_periodic")


@dataclass(frozen=True)
class DataKernelSpec:
    family: str
    lengthscale: float = 1.0
    frequency: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES + ("mosm",):
            raise ConfigError(f"unknown kernel family {self.family!r}")
        if self.lengthscale <= 0:
            raise ConfigError("lengthscale must be positive")


def data_kernel_eval(spec, x, x2):
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if spec.family == "rbf":
        return np.exp(-0.5 * ((x - x2) / spec.lengthscale) ** 2)
    if spec.family == "matern52":
        d = np.abs(x - x2) / spec.lengthscale
        return (1.0 + np.sqrt(5.0) * d + 5.0 / 3.0 * d**2) * np.exp(-np.sqrt(5.0) * d)
    if spec.family == "weakly_periodic":
        w = 2.0 * np.pi * spec.frequency
        e = (-0.5 * (np.cos(w * x) - np.cos(w * x2)) ** 2
             - 0.5 * (np.sin(w * x) - np.sin(w * x2)) ** 2
             - (x - x2) ** 2 / 32.0)
        return np.exp(e)
    raise ConfigError(f"data_kernel_eval does not handle family {spec.family!r}")


@dataclass(frozen=True)
class MosmParams:
    """Per-channel multi-output spectral mixture parameters (1D inputs)."""

    mu: np.ndarray
    sigma: np.ndarray
    delay: np.ndarray
    phase: np.ndarray = field(default=None)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        k = mu.shape[0]

        def fill(v, default):
            return np.full(k, default) if v is None else np.broadcast_to(
                np.asarray(v, dtype=np.float64), (k,)).copy()

        sigma = fill(self.sigma, 0.1)
        if np.any(sigma <= 0):
            raise ConfigError("MOSM covariances must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "delay", fill(self.delay, 0.0))
        object.__setattr__(self, "phase", fill(self.phase, 0.0))

    @property
    def channels(self):
        return self.mu.shape[0]


def mosm_pair_params(params, i, j):
    """(mu_ij, Sigma_ij, theta_ij, phi_ij) for channels i and j."""
    si, sj = params.sigma[i], params.sigma[j]
    mi, mj = params.mu[i], params.mu[j]
    mu_ij = (si * mj + sj * mi) / (si + sj)
    sigma_ij = 2.0 * si * sj / (si + sj)
    return mu_ij, sigma_ij, params.delay[i] - params.delay[j], params.phase[i] - params.phase[j]


def mosm_magnitude(params, i, j):
    """Cross-channel scale that makes the stacked Gram positive semi-definite.

    Reading Sigma_i as 4 pi^2 times a spectral variance, the cross spectrum of
    two Gaussian "square-root" spectra carries the factor
    sqrt(2 sqrt(S_i S_j) / (S_i + S_j)) exp(-pi^2 (mu_i - mu_j)^2 / (S_i + S_j)).
    It equals 1 when i == j.
    """
    si, sj = params.sigma[i], params.sigma[j]
    dmu = params.mu[i] - params.mu[j]
    return np.sqrt(2.0 * np.sqrt(si * sj) / (si + sj)) * np.exp(-np.pi**2 * dmu**2 / (si + sj))


def mosm_cross_eval(params, i, j, x, x2, magnitude=True):
    """k_ij(x, x') = a_ij exp(-(1/2) d Sigma_ij d) cos(2 pi d mu_ij + phi_ij), d = x - x' + theta_ij.

    With ``magnitude=False`` the scale a_ij is dropped (bare closed form,
    which is not a valid cross-covariance for separated means).
    """
    mu_ij, sigma_ij, theta_ij, phi_ij = mosm_pair_params(params, i, j)
    d = np.asarray(x, dtype=np.float64) - np.asarray(x2, dtype=np.float64) + theta_ij
    k = np.exp(-0.5 * d * sigma_ij * d) * np.cos(2.0 * np.pi * d * mu_ij + phi_ij)
    return mosm_magnitude(params, i, j) * k if magnitude else k


def mosm_gram(params, xs, magnitude=True):
    """Stacked multi-output Gram over per-channel input arrays ``xs``."""
    blocks = [[mosm_cross_eval(params, i, j, np.asarray(xi)[:, None], np.asarray(xj)[None, :],
                               magnitude)
               for j, xj in enumerate(xs)] for i, xi in enumerate(xs)]
    G = np.block(blocks)
    return 0.5 * (G + G.T)


@dataclass
class BankTensors:
    """Tensor view of a 1D bank: means and variances (Q,) plus the noise std."""

    mu: T.Tensor
    sigma2: T.Tensor
    sigma_eps: float

    @property
    def Q(self):
        return self.mu.shape[0]

    def to_bank(self):
        dens = tuple(SpectralDensity(np.array([m]), np.array([s]))
                     for m, s in zip(self.mu.data, self.sigma2.data))
        return KernelBank(dens, float(self.sigma_eps))


def bank_tensors(bank):
    if isinstance(bank, BankTensors):
        return bank
    if any(d.dim != 1 for d in bank.densities):
        raise ShapeError("tensor kernels support 1D inputs only", dim="D")
    return BankTensors(T.Tensor(bank.mus[:, 0]), T.Tensor(bank.sigma2s[:, 0]), bank.sigma_eps)
