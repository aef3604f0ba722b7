"""Command-line interface.

Subcommands: calibrate, account, gen-data, train, compare, sweep.

Exit codes: 0 success, 2 configuration error, 3 calibration failure,
4 budget exhausted, 5 numerical failure during training.

Output files (fixed column order):
  metrics.csv   step,micro_index,loss,batch_size,cum_mu
  epochs.csv    step,dev_accuracy
  summary.txt   key=value run summary (config echo, sigma, mu_total, accuracy)
  config.json   full effective configuration; ``train --config`` on it reproduces the run
  compare.csv   mode,reported_accuracy,final_accuracy,best_accuracy,sigma,mu_total,epsilon,delta,steps
  sweep.csv     axis,value,seed,status,final_accuracy,reported_accuracy,sigma,mu_total,epsilon,delta
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .accountant import (
    AccountingError,
    BudgetExhausted,
    CompositionSchedule,
    PrivacyBudget,
    account,
    calibrate_sigma_dpfp,
    calibrate_sigma_dpsgd,
    compose_mu_dpfp,
)
from .data import make_blobs, read_dataset, write_dataset
from .trainer import MODES, OPTIMIZERS, NonFiniteError, TrainConfig, TrainRunMetrics, train

log = logging.getLogger("dpfp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_BUDGET = 4
EXIT_NUMERIC = 5

# config keys beyond TrainConfig
RUN_KEYS = {"train": None, "dev": None, "out_dir": "runs/latest"}
SWEEP_AXES = {"B": "batch_size", "C": "clip", "M": "micro_batches", "lr": "learning_rate"}


class ConfigError(ValueError):
    pass


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _config_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.update(RUN_KEYS)
    return d


def load_config_file(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - set(_config_defaults()))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return raw


def resolve_config(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    """Defaults, then the config file, then explicit flags."""
    values = _config_defaults()
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    run = {k: values.pop(k) for k in RUN_KEYS}
    try:
        cfg = TrainConfig(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg, run


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run-config file; flags override its values")
    p.add_argument("--train", help="training set CSV (label,x0,...)")
    p.add_argument("--dev", help="development set CSV")
    p.add_argument("--out-dir", dest="out_dir", help="output directory (default runs/latest)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float, help="default 1/(2D)")
    p.add_argument("--epochs", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=float, help="expected batch size B")
    p.add_argument("--micro-batches", dest="micro_batches", type=int)
    p.add_argument("--clip", type=float, help="L2 clip threshold C ('inf' disables clipping)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--rep-dim", dest="rep_dim", type=int)
    p.add_argument("--init-seed", dest="init_seed", type=int)
    p.add_argument("--sampler-seed", dest="sampler_seed", type=int)
    p.add_argument("--noise-seed", dest="noise_seed", type=int)
    p.add_argument("--sigma", type=float, help="use this noise scale instead of calibrating")
    p.add_argument(
        "--extra-steps",
        dest="extra_steps",
        type=int,
        help="attempt this many steps past the schedule (always stops with exit code 4)",
    )


def _load_data(run: dict):
    if not run["train"]:
        raise ConfigError("no training set given (--train or 'train' in the config file)")
    try:
        train_set = read_dataset(run["train"])
        dev = read_dataset(run["dev"], train_set.num_classes) if run["dev"] else None
    except (OSError, ValueError) as err:
        raise ConfigError(str(err)) from err
    if dev is not None and dev.input_dim != train_set.input_dim:
        raise ConfigError("train and dev sets have different feature counts")
    return train_set, dev


def write_run(out_dir: Path, cfg: TrainConfig, run: dict, metrics: TrainRunMetrics, status: str = "ok") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {**cfg.to_dict(), **run}
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "micro_index", "loss", "batch_size", "cum_mu"])
        for r in metrics.records:
            w.writerow([r.step, r.micro_index, _fmt(r.loss), r.batch_size, _fmt(r.cum_mu)])
    with open(out_dir / "epochs.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "dev_accuracy"])
        for step, acc in metrics.epoch_accuracy:
            w.writerow([step, _fmt(acc)])
    summary = {"status": status, **{f"config.{k}": v for k, v in sorted(echo.items())}, **metrics.summary()}
    with open(out_dir / "summary.txt", "w", encoding="utf-8") as fh:
        for k, v in summary.items():
            fh.write(f"{k}={_fmt(v)}\n")


def cmd_calibrate(args) -> int:
    budget = PrivacyBudget(args.epsilon, args.delta)
    if args.mechanism == "dpsgd":
        res = calibrate_sigma_dpsgd(budget, args.steps, args.sample_rate, args.clip)
    else:
        schedule = CompositionSchedule(args.steps, args.micro_batches, args.sample_rate, args.clip)
        res = calibrate_sigma_dpfp(budget, schedule)
    ach = res.achieved_budget
    print(
        f"{args.mechanism} calibration: sigma={res.sigma:.12g} mu_total={res.mu_total:.12g} "
        f"epsilon={ach.epsilon:.12g} delta={ach.delta:.12g}"
    )
    return EXIT_OK


def cmd_account(args) -> int:
    schedule = CompositionSchedule(args.steps, args.micro_batches, args.sample_rate, args.clip)
    spent = account(args.sigma, schedule, args.delta)
    mu_total = compose_mu_dpfp(args.clip / args.sigma, schedule)
    print(
        f"privacy spent: sigma={args.sigma:.12g} mu_total={mu_total:.12g} "
        f"epsilon={spent.epsilon:.12g} delta={spent.delta:.12g}"
    )
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        train_set, dev = make_blobs(args.num_records, args.input_dim, args.num_classes, args.separation, args.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    out = Path(args.out_dir)
    write_dataset(train_set, out / "train.csv")
    write_dataset(dev, out / "dev.csv")
    print(f"wrote {len(train_set)} train and {len(dev)} dev records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, run = resolve_config(args)
    train_set, dev = _load_data(run)
    out = Path(run["out_dir"])
    try:
        metrics = train(cfg, train_set, dev)
    except BudgetExhausted as err:
        write_run(out, cfg, run, err.metrics, status="budget_exhausted")
        raise
    write_run(out, cfg, run, metrics)
    print(
        f"{cfg.mode}: steps={metrics.steps_taken} sigma={metrics.sigma:.6g} mu_total={metrics.mu_total:.6g} "
        f"epsilon={metrics.epsilon:.6g} delta={metrics.delta:.6g} accuracy={metrics.reported_accuracy:.4f}"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, run = resolve_config(args)
    train_set, dev = _load_data(run)
    out = Path(run["out_dir"])
    rows = []
    for mode in MODES:
        mcfg = dataclasses.replace(cfg, mode=mode)
        metrics = train(mcfg, train_set, dev)
        write_run(out / mode, mcfg, {**run, "out_dir": str(out / mode)}, metrics)
        rows.append(
            [mode, metrics.reported_accuracy, metrics.final_accuracy, metrics.best_accuracy, metrics.sigma,
             metrics.mu_total, metrics.epsilon, metrics.delta, metrics.steps]
        )
    with open(out / "compare.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "reported_accuracy", "final_accuracy", "best_accuracy", "sigma", "mu_total",
                    "epsilon", "delta", "steps"])
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    for r in rows:
        print(f"{r[0]:>10}  accuracy={r[1]:.4f}  sigma={r[4]:.6g}  epsilon={r[6]:.6g}")
    return EXIT_OK


def _sweep_point(cfg: TrainConfig, train_path: str, dev_path: str | None, seed: int) -> dict:
    train_set = read_dataset(train_path)
    dev = read_dataset(dev_path, train_set.num_classes) if dev_path else None
    try:
        m = train(cfg, train_set, dev)
    except (AccountingError, ValueError, NonFiniteError) as err:
        return {"status": f"error: {err}"}
    return {
        "status": "ok",
        "final_accuracy": m.final_accuracy,
        "reported_accuracy": m.reported_accuracy,
        "sigma": m.sigma,
        "mu_total": m.mu_total,
        "epsilon": m.epsilon,
        "delta": m.delta,
    }


def cmd_sweep(args) -> int:
    cfg, run = resolve_config(args)
    _load_data(run)
    field = SWEEP_AXES[args.axis]
    cast = int if field == "micro_batches" else float
    try:
        values = [cast(v) for v in args.values.split(",")]
    except ValueError as err:
        raise ConfigError(f"bad --values: {err}") from err
    points = []
    for v in values:
        for s in range(args.seeds):
            try:
                pcfg = dataclasses.replace(
                    cfg,
                    **{field: v},
                    init_seed=cfg.init_seed + s,
                    sampler_seed=cfg.sampler_seed + s,
                    noise_seed=cfg.noise_seed + s,
                )
            except ValueError as err:
                points.append((v, s, None, str(err)))
                continue
            points.append((v, s, pcfg, None))
    jobs = [(pcfg, run["train"], run["dev"], s) for _, s, pcfg, _ in points if pcfg is not None]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_point, *zip(*jobs))) if jobs else []
    else:
        results = [_sweep_point(*job) for job in jobs]
    results = iter(results)
    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cols = ["final_accuracy", "reported_accuracy", "sigma", "mu_total", "epsilon", "delta"]
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "seed", "status"] + cols)
        for v, s, pcfg, err in points:
            res = {"status": f"error: {err}"} if pcfg is None else next(results)
            w.writerow([args.axis, _fmt(v), s, res["status"]] + [_fmt(res.get(c, "")) for c in cols])
            if res["status"] != "ok":
                log.warning("sweep point %s=%s seed=%d failed: %s", args.axis, v, s, res["status"])
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        echo = {**cfg.to_dict(), **run}
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(points)} sweep points to {out / 'sweep.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfp",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="noise scale that spends an (epsilon, delta) budget")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--micro-batches", dest="micro_batches", type=int, default=1)
    p.add_argument("--sample-rate", dest="sample_rate", type=float, required=True)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--mechanism", choices=("dpfp", "dpsgd"), default="dpfp")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("account", help="(epsilon, delta) spent by a given noise scale")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--micro-batches", dest="micro_batches", type=int, default=1)
    p.add_argument("--sample-rate", dest="sample_rate", type=float, required=True)
    p.add_argument("--clip", type=float, default=1.0)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("gen-data", help="write a synthetic Gaussian-blob train/dev pair")
    p.add_argument("--num-records", dest="num_records", type=int, default=2000)
    p.add_argument("--input-dim", dest="input_dim", type=int, default=20)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=2)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="one training run")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="dpfp, dpsgd and nonprivate on a matched budget")
    _add_config_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="grid over one hyperparameter, several seeds per point")
    _add_config_flags(p)
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated grid, e.g. 1,8,32")
    p.add_argument("--seeds", type=int, default=5, help="seeds per grid point (offsets added to each seed)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except AccountingError as err:
        print(f"calibration failed: {err}", file=sys.stderr)
        return EXIT_CALIBRATION
    except BudgetExhausted as err:
        print(f"stopped: {err}", file=sys.stderr)
        return EXIT_BUDGET
    except (NonFiniteError, OverflowError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
