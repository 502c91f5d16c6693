"""Optimization loops: natural training, fixed-budget adversarial training,
and strength-adaptive adversarial training.

One loop serves all three modes; they differ only in the per-batch input
transform (identity, fixed-budget PGD, or strength-adaptive PGD).  With
the loss threshold rho at 0 the adaptive mode degenerates to natural
training, and with rho infinite plus a single budget rung it reproduces
fixed-budget adversarial training exactly: given equal seeds the
parameter trajectories are bit-identical.

Metrics are appended to metrics.csv (one row per evaluated epoch),
checkpoints are written through the models module, and every random
draw comes from streams keyed by (seed, purpose, epoch, batch), so a
run is reproducible bit-exactly from its resolved config.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import engine, evaluation
from .attacks import AttackSpec, pgd, sa_pgd
from .data import BatchStream, Dataset
from .evaluation import PgdParams
from .models import Network, read_checkpoint, save_checkpoint
from .rng import stream

MODES = ("natural", "standard_at", "saat")


class TrainError(Exception):
    """Invalid training specification."""


class NumericAbort(Exception):
    """Non-finite loss or gradient; carries the epoch/batch where it appeared."""


@dataclass
class TrainSpec:
    mode: str = "saat"
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drops: tuple = ((10, 10.0), (15, 10.0))  # (epoch, divisor), strictly increasing
    attack: AttackSpec = field(default_factory=AttackSpec)
    seed: int = 0
    eval_every: int = 1
    best_metric: str = "robust_acc_at_eps"

    def validate(self) -> "TrainSpec":
        if self.mode not in MODES:
            raise TrainError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise TrainError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise TrainError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise TrainError(f"weight_decay must be >= 0, got {self.weight_decay}")
        epochs_of_drops = [e for e, _ in self.lr_drops]
        if any(b <= a for a, b in zip(epochs_of_drops, epochs_of_drops[1:])):
            raise TrainError(f"lr_drops epochs must be strictly increasing, got {self.lr_drops}")
        if self.eval_every < 1:
            raise TrainError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.best_metric != "robust_acc_at_eps":
            raise TrainError(f"unknown best_metric {self.best_metric!r}")
        self.attack.validate()
        return self

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for drop_epoch, divisor in self.lr_drops:
            if epoch >= drop_epoch:
                lr /= divisor
        return lr


@dataclass
class EvalSettings:
    """What to measure at evaluation epochs (and at the end of the run)."""

    eps_grid: tuple = (0.0, 0.05, 0.1, 0.2, 0.3)
    pgd: PgdParams = field(default_factory=PgdParams)
    subset: int | None = None        # test examples used at eval epochs
    best_eps: float = 0.1            # grid point used for best-checkpoint selection
    batch_size: int = 256

    def validate(self) -> "EvalSettings":
        evaluation.validate_grid(self.eps_grid)
        if self.best_eps not in tuple(float(e) for e in self.eps_grid):
            raise TrainError(f"best_eps {self.best_eps} is not on the eval grid {self.eps_grid}")
        return self


@dataclass
class OptState:
    velocity: dict[str, np.ndarray]
    lr: float
    epoch: int = 0

    @staticmethod
    def fresh(net: Network, lr: float) -> "OptState":
        return OptState({name: np.zeros_like(p.data) for name, p in net.params.items()}, lr)


@dataclass
class RunRecord:
    rows: list[dict]
    best_epoch: int
    last_epoch: int
    best_checkpoint: str
    last_checkpoint: str

    def row_for(self, epoch: int) -> dict:
        for row in self.rows:
            if row["epoch"] == epoch:
                return row
        raise KeyError(f"no evaluation row for epoch {epoch}")


def sgd_step(net: Network, opt: OptState, spec: TrainSpec, *, epoch: int = 0, batch: int = 0) -> None:
    """Classical momentum SGD with L2 regularization folded into the gradient:
    v <- momentum*v + (grad + weight_decay*theta); theta <- theta - lr*v."""
    dtype = net.dtype
    mom = dtype(spec.momentum)
    wd = dtype(spec.weight_decay)
    lr = dtype(opt.lr)
    for name, p in net.params.items():
        g = p.grad
        if g is None:
            raise TrainError(f"sgd_step: parameter {name} has no gradient")
        if g.shape != p.shape:
            raise TrainError(f"sgd_step: gradient shape {g.shape} does not match {name} {p.shape}")
        if not np.isfinite(g).all():
            raise NumericAbort(f"non-finite gradient for {name} at epoch {epoch}, batch {batch}")
        v = opt.velocity[name]
        v *= mom
        v += g + wd * p.data
        p.data -= lr * v
        p.grad = None


def _attack_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return stream(seed, "attack", epoch, batch)


def train_epoch(net: Network, batches: BatchStream, spec: TrainSpec, opt: OptState,
                epoch: int) -> dict:
    """One pass over the data; returns aggregated training metrics."""
    atk = spec.attack
    n_seen = 0
    loss_sum = 0.0
    correct_adv = 0
    correct_clean = 0
    eps_sum = 0.0
    satisfied_count = 0

    for b, (idx, images, labels) in enumerate(batches.epoch(epoch)):
        m = images.shape[0]
        x = images.astype(net.dtype, copy=False)

        if spec.mode == "natural":
            x_used = x
            eps_sum += 0.0
            satisfied_count += m
        elif spec.mode == "standard_at":
            x_used = pgd(net, x, labels, atk.eps_max, atk.alpha, atk.pgd_iters,
                         random_start=atk.random_start,
                         rng=_attack_rng(spec.seed, epoch, b))
            eps_sum += atk.eps_max * m
            satisfied_count += m
            correct_clean += int((net.logits(x).argmax(axis=1) == labels).sum())
        else:
            adv = sa_pgd(net, x, labels, atk)
            x_used = adv.x_adv
            eps_sum += float(adv.per_example_eps.sum())
            satisfied_count += int(adv.satisfied.sum())
            correct_clean += int((adv.clean_pred == labels).sum())

        with engine.Graph():
            logits = net.forward(engine.tensor(x_used))
            loss = engine.cross_entropy_with_softmax(logits, labels, reduction="mean")
            engine.backward(loss)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericAbort(f"non-finite training loss at epoch {epoch}, batch {b}")
        sgd_step(net, opt, spec, epoch=epoch, batch=b)

        preds = logits.data.argmax(axis=1)
        correct_adv += int((preds == labels).sum())
        if spec.mode == "natural":
            correct_clean += int((preds == labels).sum())
        loss_sum += loss_val * m
        n_seen += m

    return {
        "train_loss": loss_sum / n_seen,
        "train_acc_adv": correct_adv / n_seen,
        "train_acc_clean": correct_clean / n_seen,
        "mean_eps": eps_sum / n_seen,
        "satisfied_frac": satisfied_count / n_seen,
    }


# ---------------------------------------------------------------------------
# full runs


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_columns(eps_grid) -> list[str]:
    robust = [f"robust_acc@{_fmt(float(e))}" for e in eps_grid if e > 0]
    return (["epoch", "lr", "train_loss", "train_acc_adv", "train_acc_clean",
             "test_nat_acc"] + robust + ["mean_eps", "satisfied_frac"])


def _evaluate(net: Network, test_set: Dataset, settings: EvalSettings) -> dict:
    subset = test_set.subset(settings.subset)
    report = evaluation.eps_sweep(net, subset, settings.eps_grid, settings.pgd,
                                  batch_size=settings.batch_size)
    out = {"test_nat_acc": report.accuracies[0]}
    for e, a in zip(report.eps_grid[1:], report.accuracies[1:]):
        out[f"robust_acc@{_fmt(e)}"] = a
    return out


def run(net: Network, train_set: Dataset, test_set: Dataset, spec: TrainSpec,
        settings: EvalSettings, out_dir, *, crop_pad: int = 0,
        use_hflip: bool = False, resume: bool = False) -> RunRecord:
    """Train for spec.epochs with the step LR schedule, periodic evaluation,
    best/last checkpointing, and CSV metric persistence under out_dir."""
    spec.validate()
    settings.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "ckpt_best.saat"
    last_path = out_dir / "ckpt_last.saat"
    columns = _csv_columns(settings.eps_grid)
    best_col = f"robust_acc@{_fmt(float(settings.best_eps))}"

    start_epoch = 1
    rows: list[dict] = []
    best_epoch, best_value = 0, -1.0
    opt = OptState.fresh(net, spec.lr)

    if resume and last_path.exists():
        ckpt = read_checkpoint(last_path)
        net.set_param_arrays({n: ckpt.arrays[n] for n in net.params})
        for name in opt.velocity:
            opt.velocity[name] = ckpt.arrays[f"opt.v.{name}"].astype(net.dtype, copy=True)
        start_epoch = int(ckpt.header["epoch"]) + 1
        if metrics_path.exists():
            with open(metrics_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    if int(row["epoch"]) < start_epoch:
                        rows.append({k: (int(v) if k == "epoch" else float(v))
                                     for k, v in row.items()})
        for row in rows:
            if row[best_col] > best_value:
                best_value, best_epoch = row[best_col], row["epoch"]

    batches = BatchStream(train_set, spec.batch_size, spec.seed,
                          crop_pad=crop_pad, use_hflip=use_hflip)
    # rewrite from the kept rows: rows past the resumed checkpoint are dropped
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])

        for epoch in range(start_epoch, spec.epochs + 1):
            opt.lr = spec.lr_at(epoch)
            opt.epoch = epoch
            epoch_metrics = train_epoch(net, batches, spec, opt, epoch)

            if epoch % spec.eval_every == 0 or epoch == spec.epochs:
                row = {"epoch": epoch, "lr": opt.lr}
                row.update(epoch_metrics)
                row.update(_evaluate(net, test_set, settings))
                rows.append(row)
                writer.writerow([_fmt(row[c]) for c in columns])
                fh.flush()
                if row[best_col] > best_value:
                    best_value, best_epoch = row[best_col], epoch
                    save_checkpoint(net, best_path,
                                    meta=_meta(spec, epoch),
                                    extra=_opt_blobs(opt))
            save_checkpoint(net, last_path, meta=_meta(spec, epoch),
                            extra=_opt_blobs(opt))

    record = RunRecord(rows, best_epoch, spec.epochs, str(best_path), str(last_path))
    _write_summary(out_dir, spec, settings, record)
    return record


def _meta(spec: TrainSpec, epoch: int) -> dict:
    return {"epoch": epoch, "rng_state": {"seed": spec.seed, "next_epoch": epoch + 1}}


def _opt_blobs(opt: OptState) -> dict[str, np.ndarray]:
    return {f"opt.v.{name}": v for name, v in opt.velocity.items()}


def _write_summary(out_dir: Path, spec: TrainSpec, settings: EvalSettings,
                   record: RunRecord) -> None:
    last_row = record.rows[-1] if record.rows else {}
    best_row = next((r for r in record.rows if r["epoch"] == record.best_epoch), {})
    summary = {
        "mode": spec.mode,
        "epochs": spec.epochs,
        "seed": spec.seed,
        "rho": spec.attack.rho if spec.mode == "saat" else None,
        "eps_max": spec.attack.eps_max,
        "eps_grid": [float(e) for e in settings.eps_grid],
        "best_eps": float(settings.best_eps),
        "best_epoch": record.best_epoch,
        "last_epoch": record.last_epoch,
        "best_checkpoint": Path(record.best_checkpoint).name,
        "last_checkpoint": Path(record.last_checkpoint).name,
        "last": last_row,
        "best": best_row,
    }
    with open(Path(out_dir) / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def spec_for_equivalence(spec: TrainSpec, target: str) -> TrainSpec:
    """The spec whose trajectory provably matches `spec` in the given limit.

    saat with rho = 0 matches natural training; saat with rho = inf,
    tau = eps_max and k_steps = pgd_iters (no random start) matches
    fixed-budget adversarial training.
    """
    if target == "natural":
        return replace(spec, mode="saat", attack=replace(spec.attack, rho=0.0))
    if target == "standard_at":
        atk = replace(spec.attack, rho=float("inf"), tau=spec.attack.eps_max,
                      k_steps=spec.attack.pgd_iters, random_start=False)
        return replace(spec, mode="saat", attack=atk)
    raise TrainError(f"unknown equivalence target {target!r}")
