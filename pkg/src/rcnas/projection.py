"""Iterative projection of architecture logits into a cost box.

Given logits theta and a box [C_L, C_H] per metric, find nearby logits
theta_p whose expected cost lies inside the box by descending

    h(theta_p) = 1/2 ||theta - theta_p||^2
               + lambda1 * sum_m max(C_L_m - Phi_m(theta_p), 0)
               + lambda2 * sum_m max(Phi_m(theta_p) - C_H_m, 0)

with Adam, for at most e_p steps or until feasible. The anchor theta
never moves; under the TopK scope the active edge set is frozen from the
anchor so the objective stays smooth during the descent. Both penalty
weights decay geometrically across projection rounds, and at lambda = 0
the projection degenerates to the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .cost import ConstraintBox, CostScope, CostTable, cost_gradient, expected_cost, scope_edges, violation
from .optim import Adam

__all__ = ["ProjectionConfig", "ProjectionResult", "ProjectionError", "lagrangian", "lagrangian_grad", "project", "decay_lambda"]

ThetaMap = dict[tuple[str, tuple[int, int]], np.ndarray]


class ProjectionError(ArithmeticError):
    """The penalty objective became non-finite during descent."""


@dataclass(frozen=True)
class ProjectionConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    gamma: float = 0.98  # per-round geometric decay of both lambdas
    max_iters: int = 500  # e_p
    lr: float = 3e-4
    betas: tuple[float, float] = (0.5, 0.999)
    feas_tol: float = 1e-6

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty weights must be non-negative")
        if self.gamma <= 0:
            raise ValueError("decay factor must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


def decay_lambda(cfg: ProjectionConfig, t: int) -> tuple[float, float]:
    """Penalty weights for projection round t: lambda * gamma^t."""
    f = cfg.gamma**t
    return cfg.lambda1 * f, cfg.lambda2 * f


def _hinge_sums(phi: np.ndarray, box: ConstraintBox) -> tuple[float, float]:
    lower_v, upper_v = violation(phi, box)
    return float(lower_v.sum()), float(upper_v.sum())


def lagrangian(
    theta_p: ThetaMap,
    theta_anchor: ThetaMap,
    box: ConstraintBox,
    table: CostTable,
    scope: CostScope,
    lambda1: float,
    lambda2: float,
    frozen_scope=None,
) -> float:
    """Penalty objective h(theta_p); the proximal term plus hinge penalties."""
    sq = 0.0
    for key, anchor in theta_anchor.items():
        d = theta_p[key] - anchor
        sq += float(d @ d)
    phi = expected_cost(theta_p, table, scope, frozen_scope)
    low, up = _hinge_sums(phi, box)
    return 0.5 * sq + lambda1 * low + lambda2 * up


def lagrangian_grad(
    theta_p: ThetaMap,
    theta_anchor: ThetaMap,
    box: ConstraintBox,
    table: CostTable,
    scope: CostScope,
    lambda1: float,
    lambda2: float,
    frozen_scope=None,
) -> ThetaMap:
    """Analytic gradient of h. Hinge terms switch per metric on the side
    of the box the current cost violates; on the boundary the subgradient
    is taken as zero."""
    phi = expected_cost(theta_p, table, scope, frozen_scope)
    lower_v, upper_v = violation(phi, box)
    coeff = lambda2 * (upper_v > 0).astype(np.float64) - lambda1 * (lower_v > 0).astype(np.float64)
    grads = {key: theta_p[key] - theta_anchor[key] for key in theta_anchor}
    if np.any(coeff != 0.0):
        dphi = cost_gradient(theta_p, table, scope, frozen_scope)
        for key in grads:
            grads[key] = grads[key] + coeff @ dphi[key]
    return grads


@dataclass
class ProjectionResult:
    theta_p: ThetaMap
    iterations: int
    feasible: bool
    phi: np.ndarray
    objective: float
    trajectory: list[dict] = field(default_factory=list)


def project(
    theta: ThetaMap,
    box: ConstraintBox,
    table: CostTable,
    scope: CostScope = CostScope.TOP_K,
    cfg: ProjectionConfig = ProjectionConfig(),
    lambda1: float | None = None,
    lambda2: float | None = None,
    record_trajectory: bool = False,
) -> ProjectionResult:
    """Project logits into the cost box.

    Feasibility is checked before any step, so a feasible anchor returns
    bit-identical logits with zero iterations. With both penalty weights
    at zero the gradient reduces to the proximal pull on an anchored
    start, which is zero, so the anchor is returned unchanged.
    """
    lam1 = cfg.lambda1 if lambda1 is None else lambda1
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    anchor = {key: np.asarray(v, dtype=np.float64).copy() for key, v in theta.items()}
    frozen = scope_edges(anchor, table.templates) if scope is CostScope.TOP_K else None

    theta_p = {key: v.copy() for key, v in anchor.items()}
    trajectory: list[dict] = []

    def snapshot(it: int, phi: np.ndarray, h: float) -> None:
        if not record_trajectory:
            return
        lower_v, upper_v = violation(phi, box)
        trajectory.append(
            {
                "iteration": it,
                "objective": h,
                "phi_params": float(phi[0]),
                "phi_flops": float(phi[1]),
                "violation": float(lower_v.sum() + upper_v.sum()),
            }
        )

    phi = expected_cost(theta_p, table, scope, frozen)
    h = lagrangian(theta_p, anchor, box, table, scope, lam1, lam2, frozen)
    snapshot(0, phi, h)
    if box.feasible(phi, cfg.feas_tol):
        return ProjectionResult(theta_p, 0, True, phi, h, trajectory)
    if lam1 == 0.0 and lam2 == 0.0:
        # no penalty: h is minimized exactly at the anchor
        return ProjectionResult(theta_p, 0, False, phi, h, trajectory)

    keys = list(anchor)
    holders = [Tensor(theta_p[k], requires_grad=True) for k in keys]
    opt = Adam(holders, lr=cfg.lr, betas=cfg.betas)
    for it in range(1, cfg.max_iters + 1):
        current = {k: t.data for k, t in zip(keys, holders)}
        g = lagrangian_grad(current, anchor, box, table, scope, lam1, lam2, frozen)
        for k, t in zip(keys, holders):
            t.grad = g[k]
        opt.step()
        current = {k: t.data for k, t in zip(keys, holders)}
        phi = expected_cost(current, table, scope, frozen)
        h = lagrangian(current, anchor, box, table, scope, lam1, lam2, frozen)
        if not np.isfinite(h) or not np.all(np.isfinite(phi)):
            raise ProjectionError(f"non-finite objective at projection step {it}: h={h}, phi={phi}")
        snapshot(it, phi, h)
        if box.feasible(phi, cfg.feas_tol):
            return ProjectionResult({k: v.copy() for k, v in current.items()}, it, True, phi, h, trajectory)
    final = {k: t.data.copy() for k, t in zip(keys, holders)}
    return ProjectionResult(final, cfg.max_iters, False, phi, h, trajectory)
