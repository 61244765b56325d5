"""Command-line entry point: ``stationary-np {train,eval,gen-tasks,verify,plot-data}``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .errors import ConfigError, NumericalError, StationaryNPError
from .model import (
    ModelConfig,
    bank_from_params,
    config_hash,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .taskgen import OOR_RANGE, TASK_FAMILIES, TRAIN_RANGE, dump_tasks_json, generate_tasks, save_tasks_npz
from .training import MetricsWriter, TrainConfig, evaluate_tasks, report_csv, train

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 1, 2, 3
NC_LIST = (5, 10, 15, 20, 25, 30)

DATA_DEFAULTS = {
    "families": ["rbf"],
    "x_range": list(TRAIN_RANGE),
    "eval_range": list(OOR_RANGE),
    "nc": [5, 25],
    "nt": [None, 50],
    "eval_nt": 50,
    "eval_tasks": 64,
}

SCHEMA_DOC = {
    "data.families": "task families for training and evaluation, from " + ", ".join(TASK_FAMILIES),
    "data.x_range": "training input range [lo, hi]",
    "data.eval_range": "evaluation input range [lo, hi]",
    "data.nc": "training context count, inclusive [lo, hi]",
    "data.nt": "training target count [lo, hi]; lo=null means 'same as the context count'",
    "data.eval_nt": "target points per evaluation task",
    "data.eval_tasks": "evaluation tasks per (N^c, family) bucket",
    "train.tasks_per_epoch": "number of training tasks generated (each epoch passes over all of them)",
}


def default_config():
    return {"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict(),
            "data": dict(DATA_DEFAULTS)}


def schema_text():
    """Human-readable listing of every config key with its default and type."""
    lines = ["# stationary-np config schema (JSON object with sections model/train/data)"]
    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        for f in fields(cls):
            default = getattr(cls(), f.name)
            lines.append(f"{section}.{f.name} = {json.dumps(default)}  ({f.type})"
                         + (f"  # {SCHEMA_DOC[section + '.' + f.name]}"
                            if section + "." + f.name in SCHEMA_DOC else ""))
    for k, v in DATA_DEFAULTS.items():
        lines.append(f"data.{k} = {json.dumps(v)}  # {SCHEMA_DOC['data.' + k]}")
    return "\n".join(lines) + "\n"


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, item):
    """Set ``section.key=value`` in place; values are parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in cfg:
        raise ConfigError(f"override key {key!r} must be model.*, train.* or data.*")
    if parts[1] not in cfg[parts[0]]:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[parts[0]][parts[1]] = _parse_value(value)


def load_config(args):
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        for section, values in user.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section {section!r}")
            for k, v in values.items():
                if k not in cfg[section]:
                    raise ConfigError(f"unknown config key {section}.{k}")
                cfg[section][k] = v
    for item in getattr(args, "override", None) or []:
        apply_override(cfg, item)
    if getattr(args, "variant", None):
        cfg["model"]["variant"] = args.variant
    if getattr(args, "epochs", None):
        cfg["train"]["epochs"] = args.epochs
    if getattr(args, "family", None):
        cfg["data"]["families"] = args.family
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    return cfg


def header(seed, cfg):
    return f"stationary_np {version_string()} seed={seed} config={config_hash(cfg)}"


def version_string():
    """``<package version>[-g<commit>]``, git-describe style when a checkout is available."""
    head = Path(__file__).resolve().parents[2] / ".git" / "HEAD"
    try:
        ref = head.read_text().strip()
        if ref.startswith("ref:"):
            ref = (head.parent / ref.split(" ", 1)[1]).read_text().strip()
        return f"{__version__}-g{ref[:7]}"
    except OSError:
        return __version__


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("STATIONARY_NP_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError as exc:
        raise ConfigError(f"STATIONARY_NP_THREADS must be an integer, got {env!r}") from exc


def _prepare_out(path, force, is_dir=True):
    p = Path(path)
    if is_dir:
        if p.exists() and any(p.iterdir()) and not force:
            raise ConfigError(f"{p} exists and is not empty; pass --force to overwrite")
        p.mkdir(parents=True, exist_ok=True)
    else:
        if p.exists() and not force:
            raise ConfigError(f"{p} exists; pass --force to overwrite")
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _nc_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad N^c list {text!r}") from exc
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("N^c list must hold nonnegative integers")
    return vals


def _data_kw(data, eval_mode=False, nc=None):
    kw = {"x_range": tuple(data["eval_range"] if eval_mode else data["x_range"])}
    if eval_mode:
        kw.update(nc=nc, nt=data["eval_nt"])
    else:
        kw.update(nc=tuple(data["nc"]), nt=tuple(data["nt"]))
    return kw


def _gp_like(families):
    return all(f in ("rbf", "matern52", "weakly_periodic", "sawtooth") for f in families)


# ------------------------------------------------------------------ commands


def cmd_train(args):
    cfg = load_config(args)
    model_config = ModelConfig.from_dict(cfg["model"])
    train_config = TrainConfig.from_dict(cfg["train"])
    seed = train_config.seed
    out = _prepare_out(args.out, args.force)
    fams = cfg["data"]["families"]
    kw = _data_kw(cfg["data"]) if _gp_like(fams) else {}
    tasks = generate_tasks(fams, train_config.tasks_per_epoch, seed, **kw)
    params = init_params(model_config, np.random.default_rng(seed))
    head = header(seed, cfg)
    metrics = MetricsWriter(out / "metrics.csv", head)

    def log(rec):
        print(f"epoch {rec.epoch}: loss {rec.loss:.4f} ll {rec.loglik:.4f} kl {rec.kl:.4f}"
              + (f" skipped {rec.skipped}" if rec.skipped else ""), file=sys.stderr)

    _, history = train(model_config, train_config, params, tasks, metrics, log, _threads(args))
    if not history or not np.isfinite(history[-1].loss):
        raise NumericalError("training produced a non-finite loss")
    save_checkpoint(out / "checkpoint.json", model_config, params,
                    {"version": version_string(), "seed": seed, "config_hash": config_hash(cfg),
                     "config": cfg})
    print(out / "checkpoint.json")
    return 0


def _eval_rows(args, cfg, model_config, params, seed):
    fams = cfg["data"]["families"]
    rows = []
    for fi, fam in enumerate(fams):
        by_nc = {}
        for nc in args.nc_list:
            kw = _data_kw(cfg["data"], True, nc) if _gp_like([fam]) else {}
            by_nc[nc] = generate_tasks(fam, cfg["data"]["eval_tasks"], seed + 7919 * (fi + 1),
                                       start=1000 * nc, **kw)
        report = evaluate_tasks(model_config, params, by_nc, np.random.default_rng([seed, fi]),
                                _threads(args))
        rows.extend((fam, r) for r in report.rows)
    return rows


def _write_eval_csv(path, rows, variant, head):
    buf = io.StringIO()
    buf.write(f"# {head}\n")
    w = csv.writer(buf)
    w.writerow(("variant", "family", "nc", "mean_ll", "stderr", "n_tasks", "mean_ll_raw", "single_task"))
    for fam, r in rows:
        w.writerow((variant, fam, r.nc, repr(r.mean_ll), repr(r.stderr), r.n_tasks,
                    repr(r.mean_ll_raw), int(r.single_task)))
    Path(path).write_text(buf.getvalue())


def cmd_eval(args):
    model_config, params, ck_header = load_checkpoint(args.checkpoint)
    cfg = load_config(args)
    if not args.config and not args.family and "config" in ck_header:
        cfg["data"] = dict(DATA_DEFAULTS, **ck_header["config"].get("data", {}))
    cfg["model"] = model_config.to_dict()
    seed = args.seed if args.seed is not None else 0
    out = _prepare_out(args.out, args.force, is_dir=False)
    rows = _eval_rows(args, cfg, model_config, params, seed)
    _write_eval_csv(out, rows, model_config.variant, header(seed, cfg))
    print(out)
    return 0


def cmd_gen_tasks(args):
    cfg = load_config(args)
    fams = args.family or ["rbf"]
    seed = args.seed if args.seed is not None else 0
    kw = _data_kw(cfg["data"]) if _gp_like(fams) else {}
    tasks = generate_tasks(fams, args.n, seed, **kw)
    out = _prepare_out(args.out, args.force, is_dir=False)
    head = {"version": version_string(), "seed": seed, "config_hash": config_hash(cfg),
            "families": fams}
    if args.binary:
        save_tasks_npz(out, tasks)
    else:
        out.write_text(dump_tasks_json(tasks, head))
    print(out)
    return 0


def cmd_verify(args):
    from .checks import ALL_CHECKS, FAST_CHECKS

    checks = ALL_CHECKS if args.full else FAST_CHECKS
    if args.only:
        checks = [c for c in ALL_CHECKS if c.__name__.replace("check_", "") in args.only
                  or str(ALL_CHECKS.index(c) + 1) in args.only]
    results = []
    for check in checks:
        res = check()
        results.append(res)
        print(res.line(), flush=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out:
        out = _prepare_out(args.out, args.force, is_dir=False)
        buf = io.StringIO()
        buf.write(f"# {header(0, {'checks': [r.number for r in results]})}\n")
        w = csv.writer(buf)
        w.writerow(("criterion", "name", "passed", "seconds", "detail"))
        for r in results:
            w.writerow((r.number, r.name, int(r.passed), f"{r.seconds:.2f}", r.detail))
        out.write_text(buf.getvalue())
    return EXIT_VERIFY if failed else 0


def _spectral_rows(model_config, params):
    bank = bank_from_params(model_config, params)
    if bank is None:
        raise ConfigError("the convcnp variant has no kernel bank to plot")
    freqs = np.linspace(0.0, 1.25 * max(model_config.hz_max, 1.0), 201)
    mu, s2 = bank.mu.data, bank.sigma2.data
    rows = []
    for q in range(bank.Q):
        dens = np.exp(-0.5 * (freqs - mu[q]) ** 2 / s2[q]) / np.sqrt(2.0 * np.pi * s2[q])
        rows.extend((q, repr(float(f)), repr(float(d))) for f, d in zip(freqs, dens))
    return ("kernel", "frequency", "density"), rows


def _pnn_rows(model_config, params, cfg, seed, n_sets=128):
    if not model_config.latent:
        raise ConfigError("only the bayes variant has a p_nn network")
    from .convdeepsets import grid_for
    from .latent import pnn_forward

    fams = cfg["data"]["families"]
    kw = _data_kw(cfg["data"]) if _gp_like(fams) else {}
    tasks = generate_tasks(fams, n_sets, seed, **kw)
    bank = bank_from_params(model_config, params)
    rows = []
    for i, t in enumerate(tasks):
        grid = grid_for(*t.xc, points_per_unit=model_config.points_per_unit,
                        margin=model_config.margin)
        probs = pnn_forward(model_config.pnn_config(), params, list(zip(t.xc, t.yc)), bank, grid).data
        for k, row in enumerate(probs):
            rows.append((i, t.meta.get("family", ""), k, len(t.xc[k]), *[repr(float(p)) for p in row]))
    cols = ("set", "family", "channel", "nc", *[f"p{q}" for q in range(model_config.Q)])
    return cols, rows


def cmd_plot_data(args):
    model_config, params, _ = load_checkpoint(args.checkpoint)
    cfg = load_config(args)
    cfg["model"] = model_config.to_dict()
    seed = args.seed if args.seed is not None else 0
    out = _prepare_out(args.out, args.force, is_dir=False)
    head = header(seed, dict(cfg, kind=args.kind))
    if args.kind == "ll-vs-nc":
        _write_eval_csv(out, _eval_rows(args, cfg, model_config, params, seed),
                        model_config.variant, head)
        print(out)
        return 0
    if args.kind == "spectral-density":
        cols, rows = _spectral_rows(model_config, params)
    else:
        cols, rows = _pnn_rows(model_config, params, cfg, seed)
    buf = io.StringIO()
    buf.write(f"# {head}\n")
    w = csv.writer(buf)
    w.writerow(cols)
    w.writerows(rows)
    out.write_text(buf.getvalue())
    print(out)
    return 0


# -------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="stationary-np", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp, family=True):
        sp.add_argument("--config", help="JSON config file (see --print-schema)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output path")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $STATIONARY_NP_THREADS or 1)")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. model.Q=3 (repeatable)")
        if family:
            sp.add_argument("--family", action="append", choices=TASK_FAMILIES)

    sp = sub.add_parser("train", help="meta-train a model and write checkpoint + metrics")
    common(sp)
    sp.add_argument("--variant", choices=("bayes", "convcnp", "gpconvcnp"))
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(fn=cmd_train, out_required=True)

    sp = sub.add_parser("eval", help="evaluate a checkpoint per (N^c, family) bucket")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--nc-list", type=_nc_list, default=list(NC_LIST))
    sp.set_defaults(fn=cmd_eval, out_required=True)

    sp = sub.add_parser("gen-tasks", help="write seeded synthetic tasks")
    common(sp)
    sp.add_argument("--n", type=int, default=16, help="number of tasks")
    sp.add_argument("--binary", action="store_true", help="write compressed npz instead of JSON")
    sp.set_defaults(fn=cmd_gen_tasks, out_required=True)

    sp = sub.add_parser("verify", help="run the acceptance checks and print a pass/fail table")
    common(sp, family=False)
    sp.add_argument("--full", action="store_true", help="include the training-trend check")
    sp.add_argument("--only", nargs="+", help="criterion numbers or names to run")
    sp.set_defaults(fn=cmd_verify, out_required=False)

    sp = sub.add_parser("plot-data", help="export per-figure CSV data from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--kind", choices=("ll-vs-nc", "spectral-density", "pnn-outputs"),
                    default="ll-vs-nc")
    sp.add_argument("--nc-list", type=_nc_list, default=list(NC_LIST))
    sp.set_defaults(fn=cmd_plot_data, out_required=True)
    return p


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        sys.stdout.write(schema_text())
        return 0
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    if args.out_required and not args.out:
        print(f"error: {args.command} needs --out", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StationaryNPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
