"""Robustness measurement: accuracy sweeps over perturbation budgets,
the robustness-disparity score, and robust generalization gaps.

Robustness disparity summarizes how steeply accuracy decays with attack
budget: the mean of (A0 - A_i) / eps_i over the nonzero budgets of the
evaluation grid, with accuracies as fractions and budgets in pixel units.
A flat, robust model scores near 0; a brittle one scores high.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attacks


class EvalError(Exception):
    """Invalid evaluation request (empty data, bad grid, mismatched grids)."""


@dataclass
class PgdParams:
    iters: int = 20
    alpha: float | None = None  # None: eps / 8 at each grid point
    random_start: bool = False

    def step_size(self, eps: float) -> float:
        return self.alpha if self.alpha is not None else eps / 8


@dataclass
class EvalReport:
    eps_grid: list[float]        # strictly increasing, eps_grid[0] == 0
    accuracies: list[float]      # fractions in [0, 1], aligned with eps_grid
    rd: float
    attack: dict                 # pgd iters / alpha / random_start used
    split: str
    subset: int
    checkpoint: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("extra")
        d.update(self.extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        d = json.loads(text)
        known = {k: d[k] for k in ("eps_grid", "accuracies", "rd", "attack", "split", "subset", "checkpoint") if k in d}
        extra = {k: v for k, v in d.items() if k not in known}
        return EvalReport(**known, extra=extra)


def accuracy(net, dataset, attack: tuple | None = None, batch_size: int = 256,
             rng: np.random.Generator | None = None) -> float:
    """Fraction of examples classified correctly, optionally after a PGD attack.

    attack is (eps, iters, alpha, random_start); argmax ties break toward
    the lowest class index.
    """
    n = len(dataset)
    if n == 0:
        raise EvalError("accuracy: empty dataset")
    correct = 0
    for start in range(0, n, batch_size):
        x = dataset.images[start : start + batch_size].astype(net.dtype, copy=False)
        y = dataset.labels[start : start + batch_size]
        if attack is not None:
            eps, iters, alpha, random_start = attack
            if eps > 0:
                x = attacks.pgd(net, x, y, eps, alpha, iters,
                                random_start=random_start, rng=rng)
        logits = net.logits(x)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / n


def validate_grid(eps_grid) -> list[float]:
    grid = [float(e) for e in eps_grid]
    if not grid or grid[0] != 0.0:
        raise EvalError(f"eps grid must start at 0, got {grid}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise EvalError(f"eps grid must be strictly increasing, got {grid}")
    return grid


def eps_sweep(net, dataset, eps_grid, pgd_params: PgdParams | None = None,
              batch_size: int = 256, checkpoint: str = "",
              rng: np.random.Generator | None = None) -> EvalReport:
    """Accuracy at every grid budget with one PGD configuration throughout."""
    grid = validate_grid(eps_grid)
    params = pgd_params or PgdParams()
    accs = []
    for eps in grid:
        if eps == 0.0:
            accs.append(accuracy(net, dataset, None, batch_size))
        else:
            accs.append(accuracy(
                net, dataset,
                (eps, params.iters, params.step_size(eps), params.random_start),
                batch_size, rng=rng))
    report = EvalReport(
        eps_grid=grid, accuracies=accs, rd=0.0,
        attack={"iters": params.iters, "alpha": params.alpha,
                "random_start": params.random_start},
        split=dataset.split, subset=len(dataset), checkpoint=checkpoint)
    report.rd = robustness_disparity(report)
    return report


def robustness_disparity(report: EvalReport) -> float:
    """Mean of (A0 - A_i) / eps_i over the nonzero budgets of the grid."""
    grid = validate_grid(report.eps_grid)
    if len(report.accuracies) != len(grid):
        raise EvalError("report accuracies and eps grid lengths differ")
    if len(grid) < 2:
        raise EvalError("robustness disparity needs at least one nonzero budget")
    a0 = report.accuracies[0]
    terms = [(a0 - a) / e for e, a in zip(grid[1:], report.accuracies[1:])]
    return sum(terms) / len(terms)


def generalization_gap(train_report: EvalReport, test_report: EvalReport) -> list[float]:
    """Per-budget train-minus-test accuracy; grids must match exactly."""
    if train_report.eps_grid != test_report.eps_grid:
        raise EvalError(
            f"eps grids differ: {train_report.eps_grid} vs {test_report.eps_grid}")
    return [a - b for a, b in zip(train_report.accuracies, test_report.accuracies)]
