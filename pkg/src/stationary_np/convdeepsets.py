"""Discretization grid, ConvDeepsets channels and random functional representations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .kernels import bank_tensors, expected_kernel
from .rff import (
    approx_random_representation,
    data_delta_channel,
    filter_half_width,
    pathwise_posterior_sample,
    prior_term,
    sample_rff_prior,
    truncated_filter,
)

DENSITY_FLOOR = 1e-12


@dataclass(frozen=True)
class Grid:
    t: np.ndarray
    spacing: float
    margin: float

    def __len__(self):
        return len(self.t)


def make_grid(x_min, x_max, points_per_unit=64, margin=0.1):
    """Uniform grid with step 1/points_per_unit starting at ``x_min - margin``."""
    if x_max < x_min:
        raise ConfigError(f"x_max ({x_max}) < x_min ({x_min})")
    if points_per_unit < 1:
        raise ConfigError("points_per_unit must be >= 1")
    width = (x_max - x_min + 2.0 * margin) * points_per_unit
    m = int(math.ceil(width - 1e-9)) + 1
    if m < 2:
        raise ConfigError("degenerate input range yields a single-point grid; use a margin")
    spacing = 1.0 / points_per_unit
    return Grid((x_min - margin) + spacing * np.arange(m), spacing, margin)


def grid_for(*xs, points_per_unit=64, margin=0.1):
    """Grid covering every input array in ``xs`` (empty arrays are ignored)."""
    pts = [np.asarray(x, dtype=np.float64).reshape(-1) for x in xs]
    pts = np.concatenate([p for p in pts if p.size] or [np.zeros(1)])
    return make_grid(float(pts.min()), float(pts.max()), points_per_unit, margin)


def rbf(lengthscale):
    """RBF evaluator exp(-tau^2 / 2 l^2); ``lengthscale`` may be a tensor."""

    def k(tau):
        return T.exp(-0.5 * T.square(T.as_tensor(tau)) / T.square(lengthscale))

    return k


def expected(bank, probs):
    """Evaluator for the probability-weighted mixture of the bank's basis kernels."""
    bt = bank_tensors(bank)
    return lambda tau: expected_kernel(bt.mu, bt.sigma2, probs, tau)


def _canonical(xc, yc=None):
    xc = np.asarray(xc, dtype=np.float64).reshape(-1)
    if yc is None:
        return np.sort(xc), None
    yc = np.asarray(yc, dtype=np.float64).reshape(-1)
    if len(xc) != len(yc):
        raise ShapeError("context inputs and outputs differ in length", dim="N^c",
                         expected=len(xc), got=len(yc))
    order = np.lexsort((yc, xc))
    return xc[order], yc[order]


def _grid_t(grid):
    return grid.t if isinstance(grid, Grid) else np.asarray(grid, dtype=np.float64)


def density_channel(xc, grid, kernel):
    """d(t_m) = sum_n k(t_m - x_n); context order does not affect the result."""
    t = _grid_t(grid)
    xc, _ = _canonical(xc)
    if len(xc) == 0:
        return T.Tensor(np.zeros_like(t))
    return T.sum(kernel(t[:, None] - xc[None, :]), axis=1)


def _floored(d):
    return T.relu(d - DENSITY_FLOOR) + DENSITY_FLOOR


def deterministic_data_channel(xc, yc, grid, kernel):
    """Kernel-smoother ratio sum_n y_n k(t - x_n) / sum_n k(t - x_n), denominator floored."""
    t = _grid_t(grid)
    xc, yc = _canonical(xc, yc)
    if len(xc) == 0:
        return T.Tensor(np.zeros_like(t))
    kmat = kernel(t[:, None] - xc[None, :])
    num = T.reshape(T.matmul(kmat, yc.reshape(-1, 1)), (-1,))
    return num / _floored(T.sum(kmat, axis=1))


def smooth_to_targets(grid_values, grid, xt, kernel):
    """out[..., c, j] = sum_m grid_values[..., c, m] k(x_j - t_m)."""
    t = _grid_t(grid)
    xt = np.asarray(xt, dtype=np.float64).reshape(-1)
    grid_values = T.as_tensor(grid_values)
    if grid_values.shape[-1] != len(t):
        raise ShapeError("grid values do not match the grid size", dim="M",
                         expected=len(t), got=grid_values.shape[-1])
    return T.matmul(grid_values, kernel(xt[None, :] - t[:, None]))


@dataclass
class FunctionalRepresentation:
    """Density channel (M,) and N data channels (N, M) on a grid."""

    density: T.Tensor
    data_channels: T.Tensor
    grid: Grid

    @property
    def n_samples(self):
        return self.data_channels.shape[0]

    def stacked(self):
        """(N, 2, M): each sample's data channel paired with the shared density."""
        n, m = self.data_channels.shape
        d = T.reshape(self.density, (1, 1, m)) * np.ones((n, 1, 1))
        return T.concat([d, T.reshape(self.data_channels, (n, 1, m))], axis=1)


def deterministic_representation(xc, yc, grid, kernel):
    density = density_channel(xc, grid, kernel)
    data = deterministic_data_channel(xc, yc, grid, kernel)
    return FunctionalRepresentation(density, T.reshape(data, (1, -1)), grid)


def random_functional_representation(xc, yc, bank, probs, n_samples, l_spec, rng, grid,
                                     mode="exact", alpha=0.1, temperature=0.5, hard=False,
                                     obs_noise=True, half_width=None, z=None):
    """Density under the expected kernel plus ``n_samples`` random data channels.

    In ``exact`` mode each data channel is a path-wise posterior draw with a
    Gumbel-softmax mixture weight; ``approx`` blends a prior draw with the
    filtered data-delta residual. RNG use order: Gumbel noise, RFF prior,
    observation noise.
    """
    from .latent import gumbel_softmax_sample

    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if mode not in ("exact", "approx"):
        raise ConfigError(f"unknown representation mode {mode!r}")
    bt = bank_tensors(bank)
    probs = T.as_tensor(probs)
    t = _grid_t(grid)
    xc = np.asarray(xc, dtype=np.float64).reshape(-1)
    yc = np.asarray(yc, dtype=np.float64).reshape(-1)
    density = density_channel(xc, t, expected(bt, probs))
    if z is None:
        z = gumbel_softmax_sample(probs, temperature, rng, n=n_samples, hard=hard)
    prior = sample_rff_prior(bt, l_spec, rng, n=n_samples)
    if mode == "exact":
        noise = (bt.sigma_eps * rng.standard_normal((n_samples, len(xc)))
                 if obs_noise and len(xc) else None)
        data = pathwise_posterior_sample(xc, yc, bt, probs, prior, z, t, noise)
    else:
        spacing = grid.spacing if isinstance(grid, Grid) else float(t[1] - t[0])
        h = half_width if half_width is not None else filter_half_width(bt.sigma2.data, spacing)
        h = min(h, (len(t) - 1) // 2)
        filt = truncated_filter(bt, probs, spacing, h)
        prior_grid = prior_term(prior, z, t, bt)
        delta = data_delta_channel(xc, yc, t)
        data = approx_random_representation(delta, prior_grid, alpha, filt)
    return FunctionalRepresentation(density, data, grid if isinstance(grid, Grid) else
                                    Grid(t, float(t[1] - t[0]), 0.0))
