"""Meta-training: multi-sample likelihood, tempered-posterior KL regularizer, Adam and evaluation."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalError, ShapeError
from .kernels import bank_tensors
from .latent import CategoricalParams, kl_categorical
from .rff import empirical_posterior_stats, sample_posterior_functions

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    tau0: float = 1.0
    lr: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 16
    tasks_per_epoch: int = 256
    seed: int = 0
    n_mc: int | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.tau0 <= 0:
            raise ConfigError("tau0 must be > 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.tasks_per_epoch < 1:
            raise ConfigError("epochs, batch_size and tasks_per_epoch must be >= 1")
        if self.n_mc is not None and self.n_mc < 2:
            raise ConfigError("n_mc must be >= 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ likelihoods


def gaussian_logpdf(y, mu, sigma):
    """Elementwise log N(y; mu, sigma^2)."""
    z = (y - mu) / sigma
    return -0.5 * LOG_2PI - T.log(sigma) - 0.5 * T.square(z)


def multisample_loglik(mu, sigma, y):
    """log (1/N) sum_n sum_i log N(y_i; mu_ni, sigma_ni^2) for (N, N^t) parameters."""
    mu = T.as_tensor(mu)
    if mu.ndim != 2:
        raise ShapeError("expected (N, N^t) predictive parameters", dim="N", got=mu.shape)
    per_sample = T.sum(gaussian_logpdf(np.asarray(y, dtype=np.float64), mu, sigma), axis=1)
    return T.logsumexp(per_sample, axis=0) - math.log(mu.shape[0])


# ----------------------------------------------------------- tempered posterior


def tempered_softmax(logliks, tau0=1.0):
    """softmax(ll / tau0), exactly invariant to a common shift of the log-likelihoods."""
    if tau0 <= 0:
        raise ConfigError("tau0 must be > 0")
    a = np.asarray(logliks, dtype=np.float64) / tau0
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def kernel_logliks(xc, yc, xt, yt, bank, n_mc, rng, l_spec=10, sigma_eps=None):
    """Per-kernel log N(yt; empirical mean, diag empirical variance) of path-wise draws."""
    if n_mc < 2:
        raise ConfigError("n_mc must be >= 2")
    bt = bank_tensors(bank)
    if sigma_eps is not None:
        bt = type(bt)(bt.mu, bt.sigma2, sigma_eps)
    yt = np.asarray(yt, dtype=np.float64).reshape(-1)
    out = np.empty(bt.Q)
    for q in range(bt.Q):
        onehot = np.eye(bt.Q)[q]
        draws = sample_posterior_functions(xc, yc, bt, onehot, n_mc, l_spec, rng, xt)
        mean, var = empirical_posterior_stats(draws)
        out[q] = np.sum(-0.5 * LOG_2PI - 0.5 * np.log(var) - 0.5 * (yt - mean) ** 2 / var)
    return out


def tempered_posterior_params(xc, yc, xt, yt, bank, sigma_eps=None, n_mc=5, tau0=1.0,
                              rng=None, l_spec=10):
    """Training-time target over the bank: softmax of per-kernel empirical log-likelihoods / tau0."""
    ll = kernel_logliks(xc, yc, xt, yt, bank, n_mc, rng, l_spec, sigma_eps)
    return CategoricalParams(tempered_softmax(ll, tau0))


def task_targets(model_config, params, task, train_config, rng):
    """(K, Q) tempered-posterior targets for every channel of a task, with the current bank frozen."""
    from .model import bank_from_params

    bank = bank_from_params(model_config, params)
    bt = type(bank)(T.Tensor(bank.mu.data), T.Tensor(bank.sigma2.data), bank.sigma_eps)
    n_mc = train_config.n_mc or max(model_config.n_samples, 2)
    rows = []
    for xc, yc, xt, yt in zip(task.xc, task.yc, task.xt, task.yt):
        rows.append(tempered_posterior_params(xc, yc, xt, yt, bt, n_mc=n_mc,
                                              tau0=train_config.tau0, rng=rng,
                                              l_spec=model_config.l_spec).probs)
    return np.stack(rows)


# ------------------------------------------------------------------ objectives


@dataclass
class LossParts:
    loss: T.Tensor
    loglik: float
    kl: float


def task_loss(model_config, params, task, rng, beta=0.1, targets=None):
    """Negative per-task objective -(L_ll - beta * KL); ``targets`` are precomputed (stop-gradient)."""
    from .model import predict

    pred = predict(model_config, params, task.xc, task.yc, task.xt, rng)
    ll = pred.log_density(task.yt)
    kl = T.Tensor(0.0)
    if model_config.latent and beta > 0:
        if targets is None:
            raise ConfigError("the bayes variant needs tempered-posterior targets when beta > 0")
        kl = T.sum(kl_categorical(pred.probs, targets))
    loss = -(ll - beta * kl)
    return LossParts(loss, float(ll.data), float(kl.data))


@dataclass
class StepReport:
    loss: float
    loglik: float
    kl: float
    n_tasks: int
    skipped: int = 0


def _child(rng):
    return np.random.default_rng(rng.integers(0, 2**63))


def task_gradients(model_config, params, task, rng, beta, train_config):
    """Loss parts and per-parameter gradients for one task (deterministic given ``rng``)."""
    targets = None
    if model_config.latent and beta > 0:
        targets = task_targets(model_config, params, task, train_config, rng)
    with T.Tape() as tape:
        parts = task_loss(model_config, params, task, rng, beta, targets)
    grads = T.backward(parts.loss, tape)
    return parts, {k: grads[v] for k, v in params.items()}


def _map(fn, items, workers):
    """Ordered map, on a thread pool when ``workers > 1``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def meta_train_step(model_config, train_config, params, adam_state, tasks, rng, workers=1):
    """One Adam step on the mean loss over ``tasks``; non-finite tasks are skipped and counted.

    Child streams are drawn in task order before any work starts and gradients
    are summed in task order, so results do not depend on ``workers``.
    """
    if not tasks:
        raise ConfigError("empty task batch")
    children = [_child(rng) for _ in tasks]

    def one(item):
        task, trng = item
        try:
            parts, grads = task_gradients(model_config, params, task, trng, train_config.beta,
                                          train_config)
        except NumericalError:
            return None
        if not np.isfinite(parts.loss.data) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            return None
        return parts, grads

    results = _map(one, list(zip(tasks, children)), workers)
    acc = {k: np.zeros_like(v.data) for k, v in params.items()}
    losses, lls, kls = [], [], []
    for res in results:
        if res is None:
            continue
        parts, grads = res
        for k, g in grads.items():
            acc[k] += g
        losses.append(float(parts.loss.data))
        lls.append(parts.loglik)
        kls.append(parts.kl)
    n = len(losses)
    if n:
        T.adam_step(params, {k: g / n for k, g in acc.items()}, adam_state)
    nan = float("nan")
    return StepReport(float(np.mean(losses)) if n else nan, float(np.mean(lls)) if n else nan,
                      float(np.mean(kls)) if n else nan, n, len(tasks) - n)


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalRow:
    nc: int
    mean_ll: float
    stderr: float
    n_tasks: int
    mean_ll_raw: float
    single_task: bool = False


@dataclass
class EvalReport:
    variant: str
    rows: list = field(default_factory=list)

    def row(self, nc):
        for r in self.rows:
            if r.nc == nc:
                return r
        raise KeyError(nc)


def mean_stderr(values):
    """Mean and standard error stddev / sqrt(n) (ddof=1); a single value gets stderr 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ShapeError("no values to summarize", dim="tasks", got=0)
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def task_loglik(model_config, params, task, rng):
    """Multi-sample log-likelihood of a task's targets: (total, per point)."""
    from .model import predict

    pred = predict(model_config, params, task.xc, task.yc, task.xt, rng)
    total = float(pred.log_density(task.yt).data)
    n_t = sum(len(np.atleast_1d(y)) for y in task.yt)
    return total, total / max(n_t, 1)


def evaluate_tasks(model_config, params, tasks_by_nc, rng, workers=1):
    """Grouped per-point log-likelihood means and standard errors."""
    if not tasks_by_nc or not any(tasks_by_nc.values()):
        raise ConfigError("no evaluation tasks")
    report = EvalReport(model_config.variant)
    for nc in sorted(tasks_by_nc):
        tasks = tasks_by_nc[nc]
        if not tasks:
            continue
        children = [_child(rng) for _ in tasks]
        vals = _map(lambda item: task_loglik(model_config, params, *item), list(zip(tasks, children)),
                    workers)
        mean, se = mean_stderr([v[1] for v in vals])
        report.rows.append(EvalRow(nc, mean, se, len(tasks), float(np.mean([v[0] for v in vals])),
                                   single_task=len(tasks) == 1))
    return report


# ------------------------------------------------------------------ training loop

METRIC_COLUMNS = ("epoch", "split", "variant", "nc_bucket", "mean_ll", "stderr", "loss", "kl")


class MetricsWriter:
    """Append-only CSV metrics stream with a leading ``#`` header comment."""

    def __init__(self, path, header=""):
        self.path = path
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            csv.writer(fh).writerow(METRIC_COLUMNS)

    def write(self, **row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row.get(c, "") for c in METRIC_COLUMNS])


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loglik: float
    kl: float
    skipped: int


def train(model_config, train_config, params, tasks, metrics=None, log=None, workers=1):
    """Run ``train_config.epochs`` passes over ``tasks`` in shuffled minibatches.

    Returns the Adam state and per-epoch records. ``params`` is updated in place.
    """
    rng = np.random.default_rng(train_config.seed)
    state = T.AdamState(lr=train_config.lr, weight_decay=train_config.weight_decay)
    history = []
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(tasks))
        reports = []
        for i in range(0, len(order), train_config.batch_size):
            batch = [tasks[j] for j in order[i:i + train_config.batch_size]]
            reports.append(meta_train_step(model_config, train_config, params, state, batch, rng,
                                           workers))
        ok = [r for r in reports if r.n_tasks]
        weights = np.array([r.n_tasks for r in ok], dtype=np.float64)

        def avg(attr):
            return float(np.average([getattr(r, attr) for r in ok], weights=weights)) if ok else float("nan")

        rec = EpochRecord(epoch, avg("loss"), avg("loglik"), avg("kl"),
                          sum(r.skipped for r in reports))
        history.append(rec)
        if metrics is not None:
            metrics.write(epoch=epoch, split="train", variant=model_config.variant,
                          nc_bucket="all", mean_ll=rec.loglik, loss=rec.loss, kl=rec.kl)
        if log is not None:
            log(rec)
    return state, history


def report_csv(report, header=""):
    """RFC-4180 CSV text for an evaluation report."""
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf)
    w.writerow(("variant", "nc", "mean_ll", "stderr", "n_tasks", "mean_ll_raw", "single_task"))
    for r in report.rows:
        w.writerow((report.variant, r.nc, repr(r.mean_ll), repr(r.stderr), r.n_tasks,
                    repr(r.mean_ll_raw), int(r.single_task)))
    return buf.getvalue()
