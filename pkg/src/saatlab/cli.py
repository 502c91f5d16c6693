"""Command-line experiment runner.

Subcommands:

  train       run one training experiment into an isolated run directory
  eval        evaluate a checkpoint over the budget grid, write report JSON
  compare     tabulate several runs (accuracies, disparity, best-last deltas)
  sweep       run `train` once per value of a dotted config key
  synth-data  write a synthetic dataset in the official file format

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
5 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfgmod
from . import data as datamod
from . import evaluation, models, plots, synth, training
from .attacks import AttackError, AttackSpec
from .config import ConfigError, ExperimentConfig
from .data import DataError
from .engine import NonFiniteError
from .evaluation import EvalError, PgdParams
from .training import EvalSettings, NumericAbort, TrainError, TrainSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def _load_config(args) -> ExperimentConfig:
    cfg = cfgmod.load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if getattr(args, "data_dir", None):
        overrides.append(f"dataset.dir={args.data_dir}")
    if getattr(args, "out", None):
        overrides.append(f"output.dir={args.out}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    return cfg.resolved()


def _datasets(cfg: ExperimentConfig):
    train, test = datamod.load(cfg.dataset.name, cfg.dataset.dir)
    return train.subset(cfg.dataset.subset), test.subset(cfg.dataset.test_subset)


def _train_spec(cfg: ExperimentConfig) -> TrainSpec:
    a = cfg.attack
    attack = AttackSpec(rho=a.rho, eps_max=a.eps_max, tau=a.tau, k_steps=a.k_steps,
                        alpha=a.alpha, pgd_iters=a.pgd_iters,
                        random_start=a.random_start)
    t = cfg.train
    return TrainSpec(mode=t.mode, epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                     momentum=t.momentum, weight_decay=t.weight_decay,
                     lr_drops=tuple((int(e), float(d)) for e, d in t.lr_drops),
                     attack=attack, seed=t.seed, eval_every=t.eval_every,
                     best_metric=t.best_metric)


def _eval_settings(cfg: ExperimentConfig) -> EvalSettings:
    e = cfg.eval
    return EvalSettings(eps_grid=tuple(float(x) for x in e.grid),
                        pgd=PgdParams(e.pgd_iters, e.alpha, e.random_start),
                        subset=e.subset, best_eps=float(e.best_eps),
                        batch_size=e.batch_size)


def _build_net(cfg: ExperimentConfig, input_shape, class_count):
    return models.build(cfg.model.arch_id, cfg.model.width_factor, input_shape,
                        class_count, cfg.model.seed, cfg.model.precision)


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> Path:
    """Train per config; the run directory gets the resolved-config snapshot,
    metrics CSV, best/last checkpoints, summary JSON, and learning curves."""
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.snapshot(cfg, out_dir / "config.json")
    train_set, test_set = _datasets(cfg)
    net = _build_net(cfg, train_set.input_shape, train_set.class_count)
    spec = _train_spec(cfg)
    settings = _eval_settings(cfg)
    record = training.run(net, train_set, test_set, spec, settings, out_dir,
                          crop_pad=cfg.dataset.crop_pad,
                          use_hflip=bool(cfg.dataset.hflip), resume=resume)
    if record.rows:
        plots.save_learning_curves(record.rows, settings.eps_grid,
                                   out_dir / "curves.png",
                                   title=cfg.output.tag or spec.mode)
    return out_dir


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = run_experiment(cfg, resume=args.resume)
    summary = json.loads((out_dir / "summary.json").read_text())
    print(f"run complete: {out_dir}")
    print(f"  mode={summary['mode']} best_epoch={summary['best_epoch']} "
          f"last_epoch={summary['last_epoch']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    net = models.load_checkpoint(args.checkpoint)
    _, test_set = _datasets(cfg)
    settings = _eval_settings(cfg)
    subset = test_set.subset(settings.subset)
    report = evaluation.eps_sweep(net, subset, settings.eps_grid, settings.pgd,
                                  batch_size=settings.batch_size,
                                  checkpoint=str(args.checkpoint))
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "eval_report.json"
    report_path.write_text(report.to_json())
    plots.save_eval_figure(report, out_dir / "eval_report.png")

    print(f"{'eps':>12}  {'accuracy':>8}")
    for e, a in zip(report.eps_grid, report.accuracies):
        print(f"{e:>12.6f}  {a:>8.4f}")
    print(f"robustness disparity: {report.rd:.6f}")
    print(f"report written to {report_path}")
    return EXIT_OK


def _read_run(run_dir: Path) -> dict:
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"{run_dir}: missing metrics.csv")
    with open(metrics, newline="") as fh:
        rows = [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
    if not rows:
        raise FileNotFoundError(f"{run_dir}: metrics.csv has no evaluation rows")
    summary = {}
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
    robust_cols = [c for c in rows[0] if c.startswith("robust_acc@")]
    best_eps = summary.get("best_eps")
    best_col = (f"robust_acc@{repr(float(best_eps))}"
                if best_eps is not None else robust_cols[-1])
    if best_col not in rows[0]:
        raise FileNotFoundError(f"{run_dir}: column {best_col} not in metrics.csv")
    best_row = max(rows, key=lambda r: (r[best_col], -r["epoch"]))
    grid = [0.0] + [float(c.split("@")[1]) for c in robust_cols]
    accs_of = lambda r: [r["test_nat_acc"]] + [r[c] for c in robust_cols]

    def rd(accs):
        return sum((accs[0] - a) / e for e, a in zip(grid[1:], accs[1:])) / len(grid[1:])

    return {
        "name": summary.get("tag") or run_dir.name,
        "grid": grid,
        "robust_cols": robust_cols,
        "last": rows[-1],
        "best": best_row,
        "last_accs": accs_of(rows[-1]),
        "best_accs": accs_of(best_row),
        "rd_last": rd(accs_of(rows[-1])),
        "rd_best": rd(accs_of(best_row)),
        "best_col": best_col,
    }


def cmd_compare(args) -> int:
    """Aligned table + CSV + figure comparing runs; per-run errors are
    reported without aborting the rest."""
    runs, failures = [], []
    for d in args.run_dirs:
        try:
            runs.append(_read_run(Path(d)))
        except (FileNotFoundError, ValueError, KeyError) as exc:
            failures.append(f"{d}: {exc}")
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    if len(runs) < 2:
        print("error: need at least 2 readable runs to compare", file=sys.stderr)
        return EXIT_DATA

    grid0 = runs[0]["grid"]
    for r in runs[1:]:
        if r["grid"] != grid0:
            print(f"error: eval grid of {r['name']} {r['grid']} "
                  f"is incompatible with {runs[0]['name']} {grid0}", file=sys.stderr)
            return EXIT_DATA

    header = (["run", "nat_acc_last", "nat_acc_best"]
              + [f"robust_last@{e}" for e in grid0[1:]]
              + [f"robust_best@{e}" for e in grid0[1:]]
              + ["rd_last", "rd_best", "best_epoch", "best_minus_last@best_eps"])
    table = []
    for r in runs:
        delta = r["best"][r["best_col"]] - r["last"][r["best_col"]]
        table.append([r["name"], r["last_accs"][0], r["best_accs"][0]]
                     + r["last_accs"][1:] + r["best_accs"][1:]
                     + [r["rd_last"], r["rd_best"], r["best"]["epoch"], delta])

    out_path = Path(args.out) if args.out else Path("compare.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in table:
            writer.writerow([row[0]] + [repr(v) if isinstance(v, float) else str(v)
                                        for v in row[1:]])

    widths = [max(len(str(h)), 12) for h in header]
    print("  ".join(h[:w].ljust(w) for h, w in zip(header, widths)))
    for row in table:
        cells = [str(row[0])] + [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row[1:]]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    print(f"comparison written to {out_path}")

    plots.save_compare_figure(
        {r["name"]: (r["grid"], r["last_accs"]) for r in runs},
        out_path.with_suffix(".png"))
    return EXIT_OK


def _sweep_one(payload) -> str:
    raw, resume = payload
    cfg = cfgmod.from_dict(raw).resolved()
    return str(run_experiment(cfg, resume=resume))


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    key, _, values_text = args.grid.partition("=")
    values = [v for v in values_text.split(",") if v]
    if not values or "." not in key:
        raise ConfigError(f"--grid must be block.key=v1,v2,..., got {args.grid!r}")
    base_out = Path(cfg.output.dir)
    leaf = key.split(".")[-1]
    jobs = []
    for value in values:
        sub = cfgmod.apply_overrides(cfg, [f"{key}={value}"])
        sub_dir = base_out / f"{leaf}={value.replace('/', '_')}"
        sub = cfgmod.apply_overrides(sub, [f"output.dir={sub_dir}"])
        jobs.append((cfgmod.to_dict(sub), args.resume))

    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            for out in pool.map(_sweep_one, jobs):
                print(f"run complete: {out}")
    else:
        for job in jobs:
            print(f"run complete: {_sweep_one(job)}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    if args.dataset == "mnist":
        synth.write_mnist_like(out, n_train=args.train_n, n_test=args.test_n,
                               seed=args.seed)
    else:
        synth.write_cifar_like(out, seed=args.seed)
    print(f"synthetic {args.dataset} written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saatlab",
                                     description="strength-adaptive adversarial training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", metavar="BLOCK.KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--data-dir", help="dataset directory (overrides dataset.dir)")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="run seed (overrides train.seed)")
        p.add_argument("--threads", type=int, default=1,
                       help="parallel runs for sweep; 1 keeps everything sequential")

    p_train = sub.add_parser("train", help="run one training experiment")
    common(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the run dir's last checkpoint")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint over the budget grid")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_cmp = sub.add_parser("compare", help="compare two or more run directories")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--out", help="comparison CSV path (default compare.csv)")
    p_cmp.set_defaults(func=cmd_compare)

    p_sweep = sub.add_parser("sweep", help="train once per value of one config key")
    common(p_sweep)
    p_sweep.add_argument("--grid", required=True, metavar="BLOCK.KEY=V1,V2,...")
    p_sweep.add_argument("--resume", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_synth = sub.add_parser("synth-data", help="write a synthetic dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    p_synth.add_argument("--train-n", type=int, default=10000)
    p_synth.add_argument("--test-n", type=int, default=2000)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrainError, AttackError, EvalError, models.ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, models.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbort, NonFiniteError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
