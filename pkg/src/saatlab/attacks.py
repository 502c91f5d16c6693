"""Adversarial example generation under the l-infinity threat model.

Three generators:

  fgsm    one signed-gradient step of size eps.
  pgd     fixed-budget iterated signed-gradient ascent with projection
          into the eps-ball intersected with [0, 1].
  sa_pgd  strength-adaptive PGD: the per-example budget starts at 0 and
          grows in steps of tau, with up to k_steps projected attack
          steps per rung, until the example's loss reaches the minimum
          adversarial loss rho or the budget cap eps_max is exhausted.

All gradient steps use the sign of the gradient of the summed loss, so
each example's step depends only on its own loss; batches are processed
as independent examples and a vectorized call is bit-identical to
attacking each example alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Graph, Tensor, backward, frozen_params


class AttackError(Exception):
    """Invalid attack specification."""


@dataclass
class AttackSpec:
    """Adversary knobs; budgets are in pixel units (fractions of 255 pre-divided)."""

    rho: float = 1.5            # minimum adversarial loss; 0 disables, inf never satisfied
    eps_max: float = 8 / 255    # cap on the adaptive budget
    tau: float = 2 / 255        # budget step size
    k_steps: int = 3            # attack steps per budget rung
    alpha: float = 2 / 255      # signed-gradient step size
    pgd_iters: int = 10         # iterations for fixed-budget pgd
    random_start: bool = True   # uniform start for fixed-budget pgd only
    norm: str = "linf"

    def validate(self) -> "AttackSpec":
        if self.norm != "linf":
            raise AttackError(f"unsupported norm {self.norm!r}; only linf is implemented")
        if math.isnan(self.rho) or self.rho < 0:
            raise AttackError(f"rho must be >= 0 (or inf), got {self.rho}")
        if not 0 <= self.eps_max <= 1:
            raise AttackError(f"eps_max must be in [0, 1], got {self.eps_max}")
        if self.tau <= 0:
            raise AttackError(f"tau must be > 0, got {self.tau}")
        if self.eps_max > 0 and self.tau > self.eps_max:
            raise AttackError(f"tau ({self.tau}) must not exceed eps_max ({self.eps_max})")
        if self.alpha <= 0:
            raise AttackError(f"alpha must be > 0, got {self.alpha}")
        if self.k_steps < 1:
            raise AttackError(f"k_steps must be >= 1, got {self.k_steps}")
        if self.pgd_iters < 1:
            raise AttackError(f"pgd_iters must be >= 1, got {self.pgd_iters}")
        return self

    def ladder_rungs(self) -> int:
        """Number of budget increments before eps_max is reached."""
        if self.eps_max == 0:
            return 0
        return math.ceil(self.eps_max / self.tau)


@dataclass
class AdvBatch:
    """Result of sa_pgd on one batch."""

    x_adv: np.ndarray
    per_example_eps: np.ndarray
    per_example_loss: np.ndarray
    satisfied: np.ndarray     # loss >= rho reached (possibly at eps = 0)
    grad_steps: np.ndarray    # attack steps actually spent per example
    clean_loss: np.ndarray    # per-example loss of the unperturbed input
    clean_pred: np.ndarray    # argmax prediction on the unperturbed input


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Clamp elementwise into [x - eps, x + eps] intersected with [0, 1]."""
    if x_adv.shape != x.shape:
        raise AttackError(f"project: shapes {x_adv.shape} and {x.shape} differ")
    if eps < 0:
        raise AttackError(f"project: eps must be >= 0, got {eps}")
    e = x.dtype.type(eps)
    lo = np.maximum(x - e, x.dtype.type(0))
    hi = np.minimum(x + e, x.dtype.type(1))
    return np.clip(x_adv, lo, hi)


def _step_and_project(xa: np.ndarray, g: np.ndarray, alpha, x: np.ndarray, eps) -> np.ndarray:
    """xa + alpha * sign(g), projected; mutates xa and g (both are owned copies)."""
    np.sign(g, out=g)
    g *= alpha
    xa += g
    lo = np.maximum(x - eps, x.dtype.type(0))
    np.maximum(xa, lo, out=xa)
    np.minimum(x + eps, x.dtype.type(1), out=lo)
    np.minimum(xa, lo, out=xa)
    return xa


def _loss_and_grad(net, x_np: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example losses and the input gradient of the summed loss."""
    leaf = Tensor(x_np, requires_grad=True)
    with Graph():
        loss = engine.cross_entropy_with_softmax(net.forward(leaf), y, reduction="sum")
        backward(loss)
    return loss.per_example, leaf.grad


def _per_example_loss(net, x_np: np.ndarray, y: np.ndarray) -> np.ndarray:
    logits = net.forward(engine.tensor(x_np))
    return engine.cross_entropy_with_softmax(logits, y).per_example


def _clean_forward(net, x_np: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = net.forward(engine.tensor(x_np))
    per = engine.cross_entropy_with_softmax(logits, y).per_example
    return per, logits.data.argmax(axis=1)


def fgsm(net, x: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    """x + eps * sign(grad) clamped to [0, 1]; sign(0) = 0."""
    if eps < 0:
        raise AttackError(f"fgsm: eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=net.dtype)
    with frozen_params(net):
        _, g = _loss_and_grad(net, x, y)
    step = x.dtype.type(eps) * np.sign(g)
    return np.clip(x + step, x.dtype.type(0), x.dtype.type(1))


def pgd(net, x: np.ndarray, y: np.ndarray, eps: float, alpha: float, iters: int,
        random_start: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Fixed-budget PGD; delta starts at 0, or uniform in the ball with random_start."""
    if iters < 1:
        raise AttackError(f"pgd: iters must be >= 1, got {iters}")
    if eps < 0:
        raise AttackError(f"pgd: eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=net.dtype)
    x_adv = x.copy()
    if random_start and eps > 0:
        if rng is None:
            raise AttackError("pgd: random_start requires an rng")
        noise = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
        x_adv = project(x + noise, x, eps)
    alpha_t = x.dtype.type(alpha)
    eps_t = x.dtype.type(eps)
    with frozen_params(net):
        for _ in range(iters):
            _, g = _loss_and_grad(net, x_adv, y)
            x_adv = _step_and_project(x_adv, g, alpha_t, x, eps_t)
    return x_adv


def sa_pgd(net, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> AdvBatch:
    """Strength-adaptive PGD over a batch of independent examples.

    Per example: if the clean loss already meets rho the input is returned
    unchanged with budget 0.  Otherwise the budget eps climbs by tau
    (capped at eps_max); each rung runs up to k_steps projected attack
    steps, stopping the whole search at the first step whose loss reaches
    rho.  If eps_max is exhausted the final iterate is returned with
    satisfied = False.  At most k_steps * ceil(eps_max / tau) gradient
    steps are spent on any example.
    """
    spec.validate()
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y)
    n = x.shape[0]

    x_adv = x.copy()
    alpha_t = x.dtype.type(spec.alpha)
    with frozen_params(net):
        clean_loss, clean_pred = _clean_forward(net, x, y)
        final_loss = clean_loss.copy()
        satisfied = clean_loss >= spec.rho
        per_eps = np.zeros(n, dtype=x.dtype)
        steps = np.zeros(n, dtype=np.int64)

        active = np.flatnonzero(~satisfied)
        rungs = spec.ladder_rungs()
        for r in range(1, rungs + 1):
            if not active.size:
                break
            # indexed rung budget: the step bound k_steps * ceil(eps_max / tau)
            # holds exactly, with the last rung capped at eps_max
            eps = spec.eps_max if r == rungs else min(r * spec.tau, spec.eps_max)
            for _ in range(spec.k_steps):
                xa = x_adv[active]
                # one fused pass: losses check the previous step, the
                # gradient drives the next one
                losses, g = _loss_and_grad(net, xa, y[active])
                final_loss[active] = losses
                done = losses >= spec.rho
                if done.any():
                    satisfied[active[done]] = True
                    keep = ~done
                    active = active[keep]
                    if not active.size:
                        break
                    xa = xa[keep]
                    g = g[keep]
                per_eps[active] = x.dtype.type(eps)
                xa = _step_and_project(xa, g, alpha_t, x[active], x.dtype.type(eps))
                x_adv[active] = xa
                steps[active] += 1
        if active.size and rungs:
            # examples that exhausted the ladder: evaluate their last iterate
            losses = _per_example_loss(net, x_adv[active], y[active])
            final_loss[active] = losses
            satisfied[active[losses >= spec.rho]] = True
    return AdvBatch(x_adv, per_eps, final_loss, satisfied, steps,
                    clean_loss, clean_pred)
