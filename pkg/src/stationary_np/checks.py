"""Acceptance checks shared by the test suite and ``stationary-np verify``.

Each ``check_*`` function runs one criterion at its stated tolerance and
returns a :class:`CheckResult`; none of them raise on a failed comparison.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .convdeepsets import (
    deterministic_data_channel,
    density_channel,
    expected,
    make_grid,
    random_functional_representation,
    rbf,
)
from .gradcheck import check_op, numerical_gradient, relative_error
from .kernels import make_kernel_bank, mixture_kernel_eval, sm_kernel_eval
from .latent import PnnConfig, gumbel_softmax_sample, init_pnn_params, pnn_forward
from .model import ModelConfig, init_params, predict
from .rff import (
    empirical_posterior_stats,
    exact_gp_posterior,
    rff_kernel_estimate,
    sample_posterior_functions,
    sample_rff_prior,
)
from .taskgen import (
    OOR_RANGE,
    gp_family_kernel,
    generate_tasks,
    sample_bank_task,
    sample_gp_values,
    sawtooth,
    simulate_lotka_volterra,
)
from .training import TrainConfig, evaluate_tasks, task_targets, task_loss, tempered_posterior_params, train


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    budget: float | None = None
    values: dict = field(default_factory=dict)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        budget = f"/{self.budget:.0f}s" if self.budget else ""
        return f"[{status}] {self.number}. {self.name}: {self.detail} ({self.seconds:.1f}s{budget})"


def _timed(number, name, budget):
    def wrap(fn):
        def run(*args, **kw):
            t0 = time.perf_counter()
            passed, detail, values = fn(*args, **kw)
            elapsed = time.perf_counter() - t0
            ok = bool(passed) and (budget is None or elapsed < budget)
            if passed and not ok:
                detail += f"; over the {budget:.0f}s budget"
            return CheckResult(number, name, ok, detail, elapsed, budget, values)

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


# ------------------------------------------------------------------------ 1


@_timed(1, "RFF-kernel consistency", 10.0)
def check_rff_consistency(Q=4, hz_max=4.0, seed=0, n_seeds=20, sizes=(64, 512, 4096), tol=0.05):
    """Sup error of the random-feature kernel estimate over tau in [-3, 3] (step 0.05)."""
    bank = make_kernel_bank(Q, hz_max)
    tau = np.round(np.arange(-60, 61) * 0.05, 12)
    exact = np.stack([sm_kernel_eval(d, tau) for d in bank.densities])

    def sup_err(l, s):
        prior = sample_rff_prior(bank, l, np.random.default_rng(s))
        return np.abs(rff_kernel_estimate(prior, tau) - exact).max(axis=1)

    big = sup_err(sizes[-1], seed)
    medians = [float(np.median([sup_err(l, s).max() for s in range(n_seeds)])) for l in sizes]
    decreasing = all(a > b for a, b in zip(medians, medians[1:]))
    passed = bool(np.all(big <= tol)) and decreasing
    detail = (f"sup err at l={sizes[-1]} per kernel {np.array2string(big, precision=4)} (tol {tol}); "
              f"medians {['%.4f' % m for m in medians]} strictly decreasing={decreasing}")
    return passed, detail, {"sup": big.tolist(), "medians": medians}


# ------------------------------------------------------------------------ 2


@_timed(2, "path-wise sampling vs exact GP", 60.0)
def check_pathwise_vs_exact(nc_list=(1, 4, 8), n_samples=2000, n_query=32, l_spec=10, seed=0,
                            mean_tol=0.1, var_tol=0.2):
    bank = make_kernel_bank(4, 4.0)
    probs = np.array([0.4, 0.3, 0.2, 0.1])
    xq = np.linspace(-0.5, 2.5, n_query)
    worst_mean, worst_var = 0.0, 0.0
    for nc in nc_list:
        rng = np.random.default_rng([seed, nc])
        xc = rng.uniform(0.0, 2.0, nc)
        yc = rng.standard_normal(nc)
        draws = sample_posterior_functions(xc, yc, bank, probs, n_samples, l_spec, rng, xq)
        mean, var = empirical_posterior_stats(draws)
        em, ec = exact_gp_posterior(xc, yc, lambda d: mixture_kernel_eval(bank, probs, d),
                                    bank.sigma_eps, xq)
        ev = np.diag(ec)
        worst_mean = max(worst_mean, float(np.abs(mean - em).max()))
        worst_var = max(worst_var, float((np.abs(var - ev) / ev).max()))
    passed = worst_mean <= mean_tol and worst_var <= var_tol
    detail = (f"max |mean err| {worst_mean:.4f} (tol {mean_tol}), "
              f"max variance rel err {worst_var:.3f} (tol {var_tol})")
    return passed, detail, {"mean": worst_mean, "var": worst_var}


# ------------------------------------------------------------------------ 3


@_timed(3, "kernel smoother equals rescaled restricted GP mean", 5.0)
def check_smoother_identity(n_instances=100, seed=0, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        nc = int(rng.integers(1, 30))
        xc = rng.uniform(-2.0, 2.0, nc)
        yc = rng.standard_normal(nc)
        ls = rng.uniform(0.05, 1.0)
        t = np.linspace(-2.5, 2.5, 101)
        k = rbf(ls)
        chan = deterministic_data_channel(xc, yc, t, k).data
        K = np.exp(-0.5 * (t[:, None] - xc[None, :]) ** 2 / ls**2)
        restricted = np.eye(nc)  # Diag(K(X, X)) has unit entries for a unit-variance kernel
        gp_mean = K @ np.linalg.solve(restricted, yc)
        dens = K.sum(axis=1)
        ok = dens > 1e-12
        worst = max(worst, float(np.abs(chan[ok] - gp_mean[ok] / dens[ok]).max()))
    return worst <= tol, f"max abs diff {worst:.2e} over {n_instances} instances (tol {tol:g})", {"max": worst}


# ------------------------------------------------------------------------ 4


def _convcnp_shift_error(seed, shift_cells):
    config = ModelConfig(variant="convcnp")
    params = init_params(config, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    xc = rng.uniform(0.0, 4.0, 10)
    yc = np.sin(2.0 * xc)
    xt = rng.uniform(0.0, 4.0, 20)
    tau = shift_cells / config.points_per_unit
    a = predict(config, params, xc, yc, xt, rng)
    b = predict(config, params, xc + tau, yc, xt + tau, rng)
    return max(float(np.abs(a.mu[0].data - b.mu[0].data).max()),
               float(np.abs(a.sigma[0].data - b.sigma[0].data).max()))


@_timed(4, "translation equivariance", 120.0)
def check_translation_equivariance(seed=0, shifts=(1.7, -3.14159, 123.456), n_samples=2000,
                                   tol_pnn=1e-9, tol_grid=1e-6, tol_dist=0.1):
    rng = np.random.default_rng(seed)
    bank = make_kernel_bank(4, 4.0)
    # (a) p_nn v1 invariance for arbitrary real shifts
    cfg = PnnConfig(Q=4)
    params = init_pnn_params(cfg, rng)
    xc = rng.uniform(0.0, 3.0, 12)
    yc = rng.standard_normal(12)
    base = pnn_forward(cfg, params, [(xc, yc)], bank).data
    err_a = max(float(np.abs(pnn_forward(cfg, params, [(xc + s, yc)], bank).data - base).max())
                for s in shifts)
    # (b) grid-aligned shifts of channels and of the ConvCNP pipeline
    ppu = 64
    grid = make_grid(xc.min(), xc.max(), ppu, 0.1)
    probs = np.array([0.4, 0.3, 0.2, 0.1])
    err_b = 0.0
    for cells in (5, -37, 640):
        tau = cells / ppu
        g2 = make_grid(xc.min() + tau, xc.max() + tau, ppu, 0.1)
        for k in (rbf(0.1), expected(bank, probs)):
            err_b = max(err_b,
                        float(np.abs(density_channel(xc, grid, k).data
                                     - density_channel(xc + tau, g2, k).data).max()),
                        float(np.abs(deterministic_data_channel(xc, yc, grid, k).data
                                     - deterministic_data_channel(xc + tau, yc, g2, k).data).max()))
        err_b = max(err_b, _convcnp_shift_error(seed, cells))
    # (c) equality in distribution of the random data channels
    xs = np.sort(rng.uniform(0.0, 2.0, 6))
    ys = np.sin(2.0 * xs)
    g1 = make_grid(xs.min(), xs.max(), ppu, 0.1)
    tau = 3.0
    g2 = make_grid(xs.min() + tau, xs.max() + tau, ppu, 0.1)
    r1 = random_functional_representation(xs, ys, bank, probs, n_samples, 10,
                                          np.random.default_rng([seed, 1]), g1)
    r2 = random_functional_representation(xs + tau, ys, bank, probs, n_samples, 10,
                                          np.random.default_rng([seed, 2]), g2)
    a, b = r1.data_channels.data, r2.data_channels.data
    err_c = max(float(np.abs(a.mean(0) - b.mean(0)).max()), float(np.abs(a.var(0) - b.var(0)).max()))
    passed = err_a <= tol_pnn and err_b <= tol_grid and err_c <= tol_dist
    detail = (f"(a) p_nn {err_a:.1e} (tol {tol_pnn:g}); (b) grid-aligned {err_b:.1e} (tol {tol_grid:g}); "
              f"(c) moments {err_c:.3f} (tol {tol_dist})")
    return passed, detail, {"a": err_a, "b": err_b, "c": err_c}


# ------------------------------------------------------------------------ 5


def primitive_cases(rng):
    """(name, fn, inputs) triples covering every differentiable primitive."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    away = np.where(np.abs(a) < 0.1, 0.5, a)  # keep relu away from its kink
    spd = rng.standard_normal((4, 4))
    spd = spd @ spd.T + 4.0 * np.eye(4)
    return [
        ("add", T.add, (a, b)),
        ("sub", T.sub, (a, b)),
        ("mul", T.mul, (a, b)),
        ("div", T.div, (a, pos)),
        ("neg", T.neg, (a,)),
        ("square", T.square, (a,)),
        ("sqrt", T.sqrt, (pos,)),
        ("exp", T.exp, (a,)),
        ("log", T.log, (pos,)),
        ("cos", T.cos, (a,)),
        ("sin", T.sin, (a,)),
        ("tanh", T.tanh, (a,)),
        ("relu", T.relu, (away,)),
        ("softplus", T.softplus, (a,)),
        ("power", lambda x: T.power(x, 2.5), (pos,)),
        ("broadcast mul", T.mul, (a, rng.standard_normal(4))),
        ("matmul", T.matmul, (a, rng.standard_normal((4, 2)))),
        ("affine", T.affine, (a, rng.standard_normal((4, 5)), rng.standard_normal(5))),
        ("solve", T.solve, (spd, rng.standard_normal((4, 2)))),
        ("conv1d", lambda x, w, bb: T.conv1d(x, w, bb, padding=2),
         (rng.standard_normal((2, 3, 12)), rng.standard_normal((4, 3, 5)), rng.standard_normal(4))),
        ("sum", lambda x: T.sum(x, axis=1), (a,)),
        ("mean", lambda x: T.mean(x, axis=0), (a,)),
        ("amax", lambda x: T.amax(x, axis=1), (a,)),
        ("logsumexp", lambda x: T.logsumexp(x, axis=1), (a,)),
        ("softmax", lambda x: T.softmax(x, axis=-1), (a,)),
        ("log_softmax", lambda x: T.log_softmax(x, axis=-1), (a,)),
        ("reshape", lambda x: T.reshape(x, (2, 6)), (a,)),
        ("transpose", T.transpose, (a,)),
        ("getitem", lambda x: x[1:, ::2], (a,)),
        ("concat", lambda x, y: T.concat([x, y], axis=1), (a, b)),
        ("stack", lambda x, y: T.stack([x, y], axis=0), (a, b)),
    ]


def end_to_end_gradient_error(seed=0, n_params=10, eps=1e-6):
    """Relative error of tape vs finite-difference gradients of the bayes per-task loss."""
    config = ModelConfig()
    params = init_params(config, np.random.default_rng(seed))
    task = generate_tasks("rbf", 1, seed, nc=8, nt=12)[0]
    targets = task_targets(config, params, task, TrainConfig(), np.random.default_rng(seed))

    def loss_value():
        return task_loss(config, params, task, np.random.default_rng(seed + 7), 0.1, targets).loss

    with T.Tape() as tape:
        loss = loss_value()
    grads = T.backward(loss, tape)
    rng = np.random.default_rng(seed + 1)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    ad, fd = [], []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, j = names[i], int(flat - offsets[i])
        p = params[name]
        ad.append(grads[p].reshape(-1)[j])

        def f(v, p=p):
            old = p.data
            p.data = v
            out = float(loss_value().data)
            p.data = old
            return out

        fd.append(numerical_gradient(f, p.data, eps, index=[j]).reshape(-1)[j])
    return relative_error(ad, fd)


@_timed(5, "autodiff vs finite differences", 30.0)
def check_autodiff(seed=0, tol_primitive=1e-4, tol_end_to_end=1e-3):
    rng = np.random.default_rng(seed)
    errs = {name: check_op(fn, *inputs) for name, fn, inputs in primitive_cases(rng)}
    worst_name = max(errs, key=errs.get)
    e2e = end_to_end_gradient_error(seed)
    passed = errs[worst_name] <= tol_primitive and e2e <= tol_end_to_end
    detail = (f"{len(errs)} primitives, worst {worst_name} rel {errs[worst_name]:.1e} "
              f"(tol {tol_primitive:g}); end-to-end rel {e2e:.1e} (tol {tol_end_to_end:g})")
    return passed, detail, {"primitives": errs, "end_to_end": e2e}


# ------------------------------------------------------------------------ 6


@_timed(6, "Gumbel-softmax statistics", 10.0)
def check_gumbel(probs=(0.1, 0.2, 0.3, 0.4), n_draws=100_000, seed=0, freq_tol=0.02,
                 cold=0.01, cold_level=0.99, cold_frac=0.999):
    p = np.asarray(probs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    hard = gumbel_softmax_sample(p, 0.5, rng, n=n_draws, hard=True).data
    freq_err = float(np.abs(hard.mean(axis=0) - p).max())
    cold_draws = gumbel_softmax_sample(p, cold, rng, n=n_draws).data
    frac = float((cold_draws.max(axis=1) >= cold_level).mean())
    passed = freq_err <= freq_tol and frac >= cold_frac
    detail = (f"hard-argmax freq err {freq_err:.4f} (tol {freq_tol}); temperature {cold}: "
              f"max entry >= {cold_level} in {frac:.4%} of draws (need {cold_frac:.1%})")
    return passed, detail, {"freq_err": freq_err, "cold_frac": frac}


# ------------------------------------------------------------------------ 7


@_timed(7, "tempered posterior identifies the generating kernel", 120.0)
def check_tempered_posterior(n_tasks=500, Q=4, hz_max=4.0, tau0=1.0, n_mc=5, seed=0, margin=0.15):
    bank = make_kernel_bank(Q, hz_max)
    mass = np.empty(n_tasks)
    for i in range(n_tasks):
        q = i % Q
        rng = np.random.default_rng([seed, i])
        task = sample_bank_task(bank, q, rng)
        p = tempered_posterior_params(task.xc[0], task.yc[0], task.xt[0], task.yt[0], bank,
                                      n_mc=n_mc, tau0=tau0, rng=rng).probs
        mass[i] = p[q]
    excess = float(mass.mean() - 1.0 / Q)
    per_q = [float(mass[q::Q].mean()) for q in range(Q)]
    detail = (f"mean mass on generating kernel {mass.mean():.3f} = 1/Q + {excess:.3f} "
              f"(need >= {margin}); per kernel {['%.3f' % m for m in per_q]}")
    return excess >= margin, detail, {"excess": excess, "per_kernel": per_q}


# ------------------------------------------------------------------------ 8


def gp_moment_errors(n_draws=5000, seed=0, lags=(0.0, 0.3, 1.0)):
    """Per (family, lag): |sample E[y(0) y(lag)] - k(lag)| in Monte Carlo standard errors."""
    settings = {"rbf": {"lengthscale": 1.5}, "matern52": {"lengthscale": 0.2},
                "weakly_periodic": {"frequency": 2.5}}
    out = {}
    x = np.array([0.0, *[l for l in lags if l > 0]])
    for fam, kw in settings.items():
        k2 = gp_family_kernel(fam, **kw)
        rng = np.random.default_rng([seed, len(out)])
        ys = np.stack([sample_gp_values(k2, x, rng) for _ in range(n_draws)])
        for lag in lags:
            j = int(np.argmin(np.abs(x - lag)))
            prod = ys[:, 0] * ys[:, j]
            se = prod.std(ddof=1) / np.sqrt(n_draws)
            out[(fam, lag)] = float(abs(prod.mean() - k2(0.0, lag)) / se)
    return out


@_timed(8, "generator fidelity", 60.0)
def check_generators(seed=0):
    z = gp_moment_errors(seed=seed)
    worst_z = max(z.values())
    rng = np.random.default_rng(seed)
    saw = 0.0
    for _ in range(20):
        A, f, K, s = rng.uniform(0.8, 1.2), rng.uniform(1, 2), int(rng.integers(10, 21)), rng.uniform(-1, 1)
        t = np.linspace(0.0, 4.0, 201)
        saw = max(saw, float(np.abs(sawtooth(t + 1.0 / f, A, f, s, K) - sawtooth(t, A, f, s, K)).max()))
    a, b, d, g = 2.0 / 3.0, 4.0 / 3.0, 1.0, 1.0
    _, eq = simulate_lotka_volterra(a, b, d, g, g / d, a / b, horizon=20.0)
    eq_err = float(np.abs(eq - np.array([g / d, a / b])).max())
    times, dec = simulate_lotka_volterra(a, 0.0, 0.0, g, 1.3, 0.7, horizon=5.0)
    ref = np.stack([1.3 * np.exp(a * times), 0.7 * np.exp(-g * times)], axis=1)
    dec_err = float((np.abs(dec - ref) / ref).max())
    passed = worst_z <= 3.0 and saw <= 1e-12 and eq_err <= 1e-6 and dec_err <= 1e-5
    detail = (f"GP moments worst {worst_z:.2f} SE (tol 3); sawtooth period err {saw:.1e} (tol 1e-12); "
              f"LV equilibrium drift {eq_err:.1e} (tol 1e-6); decoupled rel err {dec_err:.1e} (tol 1e-5)")
    return passed, detail, {"gp_z": {f"{k[0]}@{k[1]}": v for k, v in z.items()},
                            "sawtooth": saw, "equilibrium": eq_err, "decoupled": dec_err}


# ------------------------------------------------------------------------ 9


def trend_run(variant, seed, n_tasks=2000, epochs=4, n_eval=256, nc_eval=5, nt_eval=50,
              batch_size=16, log=None):
    """Train one variant on RBF tasks and evaluate out of range; returns (history, eval row)."""
    config = ModelConfig(variant=variant, decoder="shallow")
    params = init_params(config, np.random.default_rng([seed, 0]))
    tasks = generate_tasks("rbf", n_tasks, 1000 + seed)
    tc = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed)
    _, history = train(config, tc, params, tasks, log=log)
    held_out = generate_tasks("rbf", n_eval, 5000 + seed, x_range=OOR_RANGE, nc=nc_eval, nt=nt_eval)
    report = evaluate_tasks(config, params, {nc_eval: held_out}, np.random.default_rng([seed, 9]))
    return history, report.row(nc_eval)


@_timed(9, "desk-scale training trend", 1800.0)
def check_training_trend(seeds=(0, 1, 2), n_tasks=2000, epochs=4, n_eval=256, nc_eval=5, log=None):
    decreased, wins, rows = True, 0, []
    for seed in seeds:
        ll = {}
        for variant in ("bayes", "convcnp"):
            history, row = trend_run(variant, seed, n_tasks, epochs, n_eval, nc_eval, log=log)
            first, last = history[0].loss, history[-1].loss
            decreased &= last < first
            ll[variant] = row.mean_ll
            rows.append({"seed": seed, "variant": variant, "first_loss": first, "last_loss": last,
                         "mean_ll": row.mean_ll, "stderr": row.stderr})
        wins += ll["bayes"] >= ll["convcnp"]
    passed = decreased and wins >= 2
    summary = "; ".join(f"s{r['seed']} {r['variant']} loss {r['first_loss']:.2f}->{r['last_loss']:.2f} "
                        f"ll {r['mean_ll']:.3f}+-{r['stderr']:.3f}" for r in rows)
    detail = f"loss decreased everywhere={decreased}; bayes >= convcnp in {wins}/{len(seeds)} seeds [{summary}]"
    return passed, detail, {"rows": rows, "wins": wins}


FAST_CHECKS = (check_rff_consistency, check_pathwise_vs_exact, check_smoother_identity,
               check_translation_equivariance, check_autodiff, check_gumbel,
               check_tempered_posterior, check_generators)
ALL_CHECKS = FAST_CHECKS + (check_training_trend,)
