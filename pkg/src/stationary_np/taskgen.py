"""Seeded synthetic task generators: 1D GP and sawtooth processes, multi-channel
sinusoids and MOSM GPs, and Lotka-Volterra predator-prey series.

Every generator is a pure function of its arguments and the ``rng`` it is
handed; :func:`generate_tasks` derives one child stream per task index so
batches can be built in any order and still match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .kernels import (
    FAMILIES,
    DataKernelSpec,
    MosmParams,
    data_kernel_eval,
    mosm_gram,
    sm_kernel_eval,
)

GP_JITTER = 1e-8
MAX_RETRIES = 5
TRAIN_RANGE = (0.0, 4.0)
OOR_RANGE = (4.0, 8.0)
MULTI_RANGE = (0.0, 3.0)

TASK_FAMILIES = FAMILIES + ("sawtooth", "sinusoidal-phase", "sinusoidal-all", "mosm-fixed",
                            "mosm-varying", "lotka-volterra")


@dataclass
class Task:
    """Context and target sets, one array per output channel, plus generator metadata."""

    xc: list
    yc: list
    xt: list
    yt: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.xc)
        if not (len(self.yc) == len(self.xt) == len(self.yt) == n):
            raise ConfigError("every task field needs one entry per channel")
        for a, b in ((self.xc, self.yc), (self.xt, self.yt)):
            for x, y in zip(a, b):
                if len(x) != len(y):
                    raise ConfigError("inputs and outputs differ in length")

    @property
    def channels(self):
        return len(self.xc)

    @property
    def nc(self):
        return sum(len(x) for x in self.xc)

    @property
    def nt(self):
        return sum(len(x) for x in self.xt)

    def shifted(self, tau):
        """The same task with every input translated by ``tau``."""
        return Task([x + tau for x in self.xc], list(self.yc), [x + tau for x in self.xt],
                    list(self.yt), dict(self.meta, shift=tau))

    def to_dict(self):
        def arr(v):
            return [np.asarray(a, dtype=np.float64).tolist() for a in v]

        return {"meta": self.meta, "xc": arr(self.xc), "yc": arr(self.yc),
                "xt": arr(self.xt), "yt": arr(self.yt)}

    @classmethod
    def from_dict(cls, d):
        def arr(v):
            return [np.asarray(a, dtype=np.float64) for a in v]

        return cls(arr(d["xc"]), arr(d["yc"]), arr(d["xt"]), arr(d["yt"]), dict(d.get("meta", {})))


def dump_tasks_json(tasks, header=None):
    """Deterministic JSON text for a list of tasks."""
    return json.dumps({"header": header or {}, "tasks": [t.to_dict() for t in tasks]},
                      sort_keys=True, indent=None, separators=(",", ":")) + "\n"


def load_tasks_json(text):
    doc = json.loads(text)
    return [Task.from_dict(d) for d in doc["tasks"]]


def save_tasks_npz(path, tasks):
    """Compact binary variant: one flat array per (task, field, channel) plus JSON metadata."""
    arrays = {}
    for i, t in enumerate(tasks):
        for name in ("xc", "yc", "xt", "yt"):
            for k, a in enumerate(getattr(t, name)):
                arrays[f"{i}/{name}/{k}"] = np.asarray(a, dtype=np.float64)
    meta = json.dumps([{"meta": t.meta, "channels": t.channels} for t in tasks], sort_keys=True)
    np.savez_compressed(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_tasks_npz(path):
    with np.load(path) as z:
        info = json.loads(z["__meta__"].tobytes().decode())
        tasks = []
        for i, m in enumerate(info):
            parts = {name: [z[f"{i}/{name}/{k}"] for k in range(m["channels"])]
                     for name in ("xc", "yc", "xt", "yt")}
            tasks.append(Task(meta=m["meta"], **parts))
    return tasks


# -------------------------------------------------------------------- helpers


def task_seed(base_seed, index):
    """Independent child stream for task ``index`` under ``base_seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(index)]))


def _count(rule, rng, lower=None):
    """Draw an integer from ``rule``: an int, or an inclusive (lo, hi) range with lo=None meaning ``lower``."""
    if isinstance(rule, (int, np.integer)):
        return int(rule)
    lo, hi = rule
    lo = lower if lo is None else lo
    if lo is None or hi < lo:
        raise ConfigError(f"bad count rule {rule!r}")
    return int(rng.integers(lo, hi + 1))


def _split(x, y, nc, nt):
    """First ``nc`` points are the context, the next ``nt`` the targets (disjoint)."""
    return [x[:nc]], [y[:nc]], [x[nc:nc + nt]], [y[nc:nc + nt]]


def _check_range(rng_range):
    lo, hi = rng_range
    if not hi > lo:
        raise ConfigError(f"empty input range {rng_range!r}")
    return float(lo), float(hi)


def sample_gp_values(kernel2, x, rng, jitter=GP_JITTER):
    """One joint draw at ``x`` from a zero-mean GP with covariance ``kernel2(x, x')``.

    Raises ``numpy.linalg.LinAlgError`` if the jittered Gram is not positive definite.
    """
    x = np.asarray(x, dtype=np.float64)
    G = np.asarray(kernel2(x[:, None], x[None, :]), dtype=np.float64)
    G = 0.5 * (G + G.T) + jitter * np.eye(len(x))
    return np.linalg.cholesky(G) @ rng.standard_normal(len(x))


def _gp_kernel(family, rng, lengthscale=None, frequency=None):
    if family == "rbf":
        ls = rng.uniform(1.1, 2.1) if lengthscale is None else lengthscale
        spec = DataKernelSpec("rbf", lengthscale=ls)
    elif family == "matern52":
        ls = rng.uniform(0.19, 0.21) if lengthscale is None else lengthscale
        spec = DataKernelSpec("matern52", lengthscale=ls)
    elif family == "weakly_periodic":
        f = rng.uniform(2.0, 3.0) if frequency is None else frequency
        spec = DataKernelSpec("weakly_periodic", frequency=f)
    else:
        raise ConfigError(f"unknown GP family {family!r}; choose from {FAMILIES}")
    return spec


def _gp_draw(kernel2, lo, hi, n, rng):
    for _ in range(MAX_RETRIES):
        x = rng.uniform(lo, hi, n)
        try:
            return x, sample_gp_values(kernel2, x, rng)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"GP Gram factorization failed after {MAX_RETRIES} input draws")


def gp_family_kernel(family, lengthscale=None, frequency=None):
    """Two-argument covariance for a GP family with fixed hyperparameters."""
    spec = DataKernelSpec(family, lengthscale=lengthscale or 1.0, frequency=frequency or 1.0)
    return lambda a, b: data_kernel_eval(spec, a, b)


# ----------------------------------------------------------------- 1D families


def sample_gp_task(family, rng, x_range=TRAIN_RANGE, nc=(5, 25), nt=(None, 50),
                   lengthscale=None, frequency=None):
    """GP task: hyperparameters drawn per family unless fixed, inputs uniform on ``x_range``."""
    lo, hi = _check_range(x_range)
    spec = _gp_kernel(family, rng, lengthscale, frequency)
    n_c = _count(nc, rng)
    n_t = _count(nt, rng, lower=n_c)
    x, y = _gp_draw(lambda a, b: data_kernel_eval(spec, a, b), lo, hi, n_c + n_t, rng)
    meta = {"family": family, "lengthscale": spec.lengthscale, "frequency": spec.frequency,
            "x_range": [lo, hi]}
    if family == "weakly_periodic":
        meta.pop("lengthscale")
    else:
        meta.pop("frequency")
    return Task(*_split(x, y, n_c, n_t), meta)


def sample_bank_task(bank, q, rng, x_range=TRAIN_RANGE, nc=(5, 25), nt=(None, 50)):
    """GP task drawn from basis kernel ``q`` of a kernel bank."""
    lo, hi = _check_range(x_range)
    dens = bank.densities[q]
    n_c = _count(nc, rng)
    n_t = _count(nt, rng, lower=n_c)
    x, y = _gp_draw(lambda a, b: sm_kernel_eval(dens, a - b), lo, hi, n_c + n_t, rng)
    return Task(*_split(x, y, n_c, n_t), {"family": "bank", "q": int(q), "x_range": [lo, hi]})


def sawtooth(t, amplitude, frequency, shift, n_terms):
    """A/2 - (A/pi) sum_{k=1}^{K} (-1)^k sin(2 pi k f (t + shift)) / k."""
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(1, n_terms + 1)
    terms = (-1.0) ** k * np.sin(2.0 * np.pi * k * frequency * (t[..., None] + shift)) / k
    return amplitude / 2.0 - amplitude / np.pi * terms.sum(-1)


def sample_sawtooth_task(rng, x_range=TRAIN_RANGE, nc=(5, 25), nt=(None, 50)):
    lo, hi = _check_range(x_range)
    A = rng.uniform(0.8, 1.2)
    f = rng.uniform(1.0, 2.0)
    K = int(rng.integers(10, 21))
    shift = rng.uniform(-1.0, 1.0)
    n_c = _count(nc, rng)
    n_t = _count(nt, rng, lower=n_c)
    x = rng.uniform(lo, hi, n_c + n_t)
    y = sawtooth(x, A, f, shift, K)
    meta = {"family": "sawtooth", "amplitude": A, "frequency": f, "n_terms": K, "shift": shift,
            "x_range": [lo, hi]}
    return Task(*_split(x, y, n_c, n_t), meta)


# ------------------------------------------------------------- multi-channel

SIN_FREQS = (2.1, 4.1, 6.1)
SIN_PHASE_RANGES = ((-1.0, 1.0), (-1.5, 0.5), (-2.0, 0.0))
SIN_NOISE = 0.1


def sinusoid(t, amplitude, frequency, phase):
    return amplitude * np.sin(2.0 * np.pi * frequency * (np.asarray(t) - phase))


def _multi_split(fns, rng, x_range, nc, nt, noise):
    lo, hi = _check_range(x_range)
    xc, yc, xt, yt = [], [], [], []
    for fn in fns:
        n_c = _count(nc, rng)
        n_t = _count(nt, rng, lower=n_c)
        x = rng.uniform(lo, hi, n_c + n_t)
        y = fn(x) + (noise * rng.standard_normal(len(x)) if noise else 0.0)
        xc.append(x[:n_c])
        yc.append(y[:n_c])
        xt.append(x[n_c:])
        yt.append(y[n_c:])
    return xc, yc, xt, yt


def sample_sinusoidal_task(variant, rng, x_range=MULTI_RANGE, nc=(5, 25), nt=(None, 50),
                           noise=SIN_NOISE, theta=None):
    """Three-channel sinusoids; ``all`` adds per-task frequency offsets (theta, 2 theta, 3 theta)."""
    if variant not in ("phase", "all"):
        raise ConfigError(f"unknown sinusoidal variant {variant!r}")
    a = rng.uniform(-0.25, 0.25)
    phases = [rng.uniform(lo, hi) for lo, hi in SIN_PHASE_RANGES]
    th = 0.0
    if variant == "all":
        th = rng.uniform(0.0, 5.0) if theta is None else float(theta)
    amps = [i + 1 + a for i in range(3)]
    freqs = [w + (i + 1) * th for i, w in enumerate(SIN_FREQS)]
    fns = [lambda x, A=A, w=w, p=p: sinusoid(x, A, w, p) for A, w, p in zip(amps, freqs, phases)]
    parts = _multi_split(fns, rng, x_range, nc, nt, noise)
    meta = {"family": f"sinusoidal-{variant}", "amplitudes": amps, "frequencies": freqs,
            "phases": phases, "theta": th, "noise": noise}
    return Task(*parts, meta)


MOSM_MU = (0.1, 3.0, 5.0)
MOSM_SIGMA = 0.1
MOSM_DELAY = 1.0
MOSM_PHASE = 0.0


def mosm_params(perturbation=(0.0, 0.0, 0.0)):
    mu = np.asarray(MOSM_MU) + np.asarray(perturbation, dtype=np.float64)
    return MosmParams(mu, np.full(3, MOSM_SIGMA), np.full(3, MOSM_DELAY), np.full(3, MOSM_PHASE))


def sample_mosm_task(variant, rng, x_range=MULTI_RANGE, nc=(5, 25), nt=(None, 50),
                     perturbation_std=None):
    """One joint three-channel MOSM GP draw; ``varying`` perturbs the means by N(0, 0.5^2)."""
    if variant not in ("fixed", "varying"):
        raise ConfigError(f"unknown MOSM variant {variant!r}")
    std = (0.5 if variant == "varying" else 0.0) if perturbation_std is None else perturbation_std
    # always consume the perturbation draws so both variants share the rest of the stream
    pert = std * rng.standard_normal(3)
    params = mosm_params(pert)
    lo, hi = _check_range(x_range)
    counts = []
    for _ in range(3):
        n_c = _count(nc, rng)
        counts.append((n_c, _count(nt, rng, lower=n_c)))
    for _ in range(MAX_RETRIES):
        xs = [rng.uniform(lo, hi, a + b) for a, b in counts]
        G = mosm_gram(params, xs) + GP_JITTER * np.eye(sum(len(x) for x in xs))
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            continue
        y = L @ rng.standard_normal(G.shape[0])
        break
    else:
        raise NumericalError("MOSM Gram factorization failed")
    ys = np.split(y, np.cumsum([len(x) for x in xs])[:-1])
    xc = [x[:a] for x, (a, _) in zip(xs, counts)]
    yc = [v[:a] for v, (a, _) in zip(ys, counts)]
    xt = [x[a:] for x, (a, _) in zip(xs, counts)]
    yt = [v[a:] for v, (a, _) in zip(ys, counts)]
    meta = {"family": f"mosm-{variant}", "mu": params.mu.tolist(), "sigma": MOSM_SIGMA,
            "delay": MOSM_DELAY, "phase": MOSM_PHASE}
    return Task(xc, yc, xt, yt, meta)


# ----------------------------------------------------------- Lotka-Volterra

LV_DEFAULTS = {"alpha": 2.0 / 3.0, "beta": 4.0 / 3.0, "delta": 1.0, "gamma": 1.0}
LV_UNDERFLOW = 1e-9


def lotka_volterra_rhs(state, alpha, beta, delta, gamma):
    x, y = state
    return np.array([alpha * x - beta * x * y, delta * x * y - gamma * y])


def simulate_lotka_volterra(alpha, beta, delta, gamma, x0, y0, horizon, dt=0.01):
    """RK4 trajectory of dX/dt = aX - bXY, dY/dt = dXY - gY; returns (times, (steps + 1, 2) states)."""
    if dt <= 0 or horizon <= 0:
        raise ConfigError("dt and horizon must be positive")
    if x0 <= 0 or y0 <= 0:
        raise ConfigError("initial populations must be positive")
    n = int(round(horizon / dt))
    out = np.empty((n + 1, 2))
    s = np.array([x0, y0], dtype=np.float64)
    out[0] = s
    p = (alpha, beta, delta, gamma)
    for i in range(n):
        k1 = lotka_volterra_rhs(s, *p)
        k2 = lotka_volterra_rhs(s + 0.5 * dt * k1, *p)
        k3 = lotka_volterra_rhs(s + 0.5 * dt * k2, *p)
        k4 = lotka_volterra_rhs(s + dt * k3, *p)
        s = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = s
    return dt * np.arange(n + 1), out


def sample_lotka_volterra_task(rng, horizon=20.0, dt=0.01, n_total=(85, 100), nc=(10, 30),
                               jitter=0.1, x0_range=(0.5, 2.0), y0_range=(0.5, 2.0),
                               params=None):
    """Two-channel predator/prey task; context points are a random subset of the targets."""
    base = dict(LV_DEFAULTS, **(params or {}))
    for _ in range(MAX_RETRIES):
        p = {k: v * rng.uniform(1.0 - jitter, 1.0 + jitter) for k, v in base.items()}
        x0 = rng.uniform(*x0_range)
        y0 = rng.uniform(*y0_range)
        times, states = simulate_lotka_volterra(p["alpha"], p["beta"], p["delta"], p["gamma"],
                                                x0, y0, horizon, dt)
        if np.all(np.isfinite(states)) and states.min() >= LV_UNDERFLOW:
            break
    else:
        raise NumericalError("Lotka-Volterra populations underflowed on every retry")
    n = _count(n_total, rng)
    n_c = min(_count(nc, rng), n)
    idx = np.sort(rng.choice(len(times), size=n, replace=False))
    ctx = np.sort(rng.choice(n, size=n_c, replace=False))
    t = times[idx]
    xc = [t[ctx], t[ctx]]
    yc = [states[idx[ctx], 0], states[idx[ctx], 1]]
    meta = {"family": "lotka-volterra", "x0": x0, "y0": y0, "horizon": horizon, "dt": dt, **p}
    return Task(xc, yc, [t, t], [states[idx, 0], states[idx, 1]], meta)


# ----------------------------------------------------------------- batches


def sample_task(family, rng, **kw):
    """Dispatch on a family name from :data:`TASK_FAMILIES`."""
    if family in FAMILIES:
        return sample_gp_task(family, rng, **kw)
    if family == "sawtooth":
        return sample_sawtooth_task(rng, **kw)
    if family.startswith("sinusoidal-"):
        return sample_sinusoidal_task(family.split("-", 1)[1], rng, **kw)
    if family.startswith("mosm-"):
        return sample_mosm_task(family.split("-", 1)[1], rng, **kw)
    if family == "lotka-volterra":
        return sample_lotka_volterra_task(rng, **kw)
    raise ConfigError(f"unknown task family {family!r}; choose from {TASK_FAMILIES}")


def generate_tasks(family, n, seed, start=0, **kw):
    """``n`` tasks, task i drawn from its own stream ``task_seed(seed, start + i)``.

    ``family`` may be a list, in which case families are cycled so each gets
    the same number of tasks (up to one).
    """
    fams = [family] if isinstance(family, str) else list(family)
    tasks = []
    for i in range(start, start + n):
        fam = fams[i % len(fams)]
        t = sample_task(fam, task_seed(seed, i), **kw)
        t.meta.update(seed=int(seed), index=i)
        tasks.append(t)
    return tasks
