"""Differentiable cost model over parameter count and FLOPs.

The expected cost of the relaxed network is

    Phi_m(theta) = fixed_m + sum_edges [edge in scope] * u_edge_m . softmax(theta_edge)

where u is a theta-free table holding every candidate op's cost at its
placement. Cells sharing logits each contribute their own shape-dependent
u row. Under the TopK scope only the top-2 strongest incoming edges per
intermediate node count (matching what discretization will keep); under
FullDag every edge counts.

The gradient has the closed form  dPhi/dtheta_o = F_o(theta) * (u_o - u.F(theta)).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import cells, ops
from .network import STEM, NetworkPlan, _FixedAdapter

__all__ = [
    "METRICS",
    "CostScope",
    "ConstraintBox",
    "CostTable",
    "build_cost_table",
    "expected_cost",
    "cost_gradient",
    "exact_cost",
    "violation",
    "scope_edges",
    "phi_range",
    "cost_report_rows",
]

METRICS = ("params", "flops")
N_METRICS = len(METRICS)


class CostScope(Enum):
    FULL_DAG = "fulldag"
    TOP_K = "topk"

    @classmethod
    def parse(cls, s: str) -> "CostScope":
        for member in cls:
            if member.value == s.lower():
                return member
        raise ValueError(f"unknown cost scope {s!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class ConstraintBox:
    """Per-metric closed interval [lower, upper] on the expected cost."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != (N_METRICS,) or hi.shape != (N_METRICS,):
            raise ValueError(f"bounds must have shape ({N_METRICS},)")
        if np.any(lo < 0):
            raise ValueError("lower bounds must be non-negative")
        if np.any(lo > hi):
            raise ValueError(f"empty box: lower {lo} exceeds upper {hi}")

    @classmethod
    def unbounded(cls) -> "ConstraintBox":
        return cls(np.zeros(N_METRICS), np.full(N_METRICS, np.inf))

    def feasible(self, phi: np.ndarray, tol: float = 1e-6) -> bool:
        """Membership with relative slack ``tol`` on each finite bound."""
        phi = np.asarray(phi, dtype=np.float64)
        lo_ok = phi >= self.lower - tol * np.abs(self.lower)
        slack = np.where(np.isfinite(self.upper), tol * np.abs(self.upper), 0.0)
        hi_ok = phi <= self.upper + slack
        return bool(np.all(lo_ok) and np.all(hi_ok))


def violation(phi: np.ndarray, box: ConstraintBox) -> tuple[np.ndarray, np.ndarray]:
    """Hinge distances to the box: (max(C_L - phi, 0), max(phi - C_H, 0)).

    Both are zero exactly on the (closed) box, boundary included.
    """
    phi = np.asarray(phi, dtype=np.float64)
    lower_v = np.maximum(box.lower - phi, 0.0)
    with np.errstate(invalid="ignore"):
        upper_v = np.maximum(phi - box.upper, 0.0)
    upper_v = np.where(np.isfinite(box.upper), upper_v, 0.0)
    return lower_v, upper_v


@dataclass(frozen=True)
class EdgeCost:
    """Cost rows for one mixed edge at one placement in the network."""

    owner: str  # "cell3" or "cell3.in0" for links
    kind: str
    edge: tuple[int, int]
    node: int
    u: np.ndarray  # (N_METRICS, n_ops)


@dataclass
class CostTable:
    """theta-free cost data for a plan: per-edge op costs plus fixed costs."""

    entries: list[EdgeCost]
    fixed: np.ndarray  # (N_METRICS,)
    templates: dict[str, cells.CellTemplate] = field(default_factory=dict)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.fixed.tobytes())
        for e in self.entries:
            h.update(f"{e.owner}:{e.kind}:{e.edge}".encode())
            h.update(e.u.tobytes())
        return h.hexdigest()

    def theta_keys(self) -> list[tuple[str, tuple[int, int]]]:
        out = []
        for kind, tpl in self.templates.items():
            out.extend((kind, edge) for edge in tpl.edges())
        return out


def _fixed_costs(plan: NetworkPlan) -> np.ndarray:
    layout = plan.layout()
    h, w = plan.image_hw
    C = plan.init_channels
    stem_params = 9 * plan.in_channels * C + 2 * C
    stem_flops = 9 * plan.in_channels * C * h * w
    feat = layout.final_channels
    fc_params = feat * plan.n_classes + plan.n_classes
    fc_flops = feat * plan.n_classes
    fixed = np.array([stem_params + fc_params, stem_flops + fc_flops], dtype=np.float64)
    if not plan.use_connection:
        for cell_links in layout.links:
            for link in cell_links:
                fixed[0] += _FixedAdapter.param_cost(link.context)
                fixed[1] += _FixedAdapter.flop_cost(link.context)
    return fixed


def build_cost_table(plan: NetworkPlan) -> CostTable:
    """Tabulate every candidate op's cost at every placement. Never reads theta."""
    layout = plan.layout()
    templates = plan.templates()
    entries: list[EdgeCost] = []
    for info in layout.cells:
        tpl = templates[info.kind]
        for edge in tpl.edges():
            ctx = info.edge_context(tpl, edge)
            u = np.zeros((N_METRICS, tpl.n_ops))
            for oi, op_name in enumerate(tpl.op_names):
                u[0, oi] = ops.param_count(op_name, ctx)
                u[1, oi] = ops.flop_count(op_name, ctx)
            entries.append(EdgeCost(f"cell{info.index}", info.kind, edge, edge[1], u))
    if plan.use_connection:
        tpl = templates[cells.CONNECT_KIND]
        for cell_links in layout.links:
            for link in cell_links:
                u = np.zeros((N_METRICS, tpl.n_ops))
                for oi, op_name in enumerate(tpl.op_names):
                    u[0, oi] = ops.param_count(op_name, link.context)
                    u[1, oi] = ops.flop_count(op_name, link.context)
                entries.append(EdgeCost(f"cell{link.dst}.in{link.slot}", cells.CONNECT_KIND, (0, 1), 1, u))
    return CostTable(entries=entries, fixed=_fixed_costs(plan), templates=templates)


ThetaMap = dict[tuple[str, tuple[int, int]], np.ndarray]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def scope_edges(theta: ThetaMap, templates: dict[str, cells.CellTemplate]) -> dict[str, frozenset]:
    """Edges the TopK scope keeps: per intermediate node, the top-2 by
    non-zero strength (ties prefer the smaller predecessor). Shared logits
    make this identical for every cell of a kind."""
    kept: dict[str, frozenset] = {}
    for kind, tpl in templates.items():
        zi = tpl.zero_index
        edges = set()
        for j in tpl.intermediates:
            ranked = sorted(
                tpl.predecessors(j),
                key=lambda i: (-cells.edge_strength(theta[(kind, (i, j))], zi), i),
            )
            for i in ranked[: tpl.kept_per_node(j)]:
                edges.add((i, j))
        kept[kind] = frozenset(edges)
    return kept


def _resolve_scope(theta: ThetaMap, table: CostTable, scope: CostScope, frozen_scope) -> dict[str, frozenset] | None:
    if scope is CostScope.FULL_DAG:
        return None
    if frozen_scope is not None:
        return frozen_scope
    return scope_edges(theta, table.templates)


def expected_cost(
    theta: ThetaMap,
    table: CostTable,
    scope: CostScope = CostScope.TOP_K,
    frozen_scope: dict[str, frozenset] | None = None,
) -> np.ndarray:
    """Expected cost vector (params, flops) of the relaxed network.

    ``frozen_scope`` overrides the TopK edge selection; projection uses it
    to keep the active set fixed while logits move.
    """
    kept = _resolve_scope(theta, table, scope, frozen_scope)
    phi = table.fixed.copy()
    for e in table.entries:
        if kept is not None and e.edge not in kept[e.kind]:
            continue
        phi += e.u @ _softmax(theta[(e.kind, e.edge)])
    return phi


def cost_gradient(
    theta: ThetaMap,
    table: CostTable,
    scope: CostScope = CostScope.TOP_K,
    frozen_scope: dict[str, frozenset] | None = None,
) -> dict[tuple[str, tuple[int, int]], np.ndarray]:
    """dPhi/dtheta for every logits vector, shaped (N_METRICS, n_ops).

    Closed form per edge: F * (u - (u.F)) per metric; edges outside the
    scope get exact zeros. Contributions from cells sharing a kind sum.
    """
    kept = _resolve_scope(theta, table, scope, frozen_scope)
    grads = {key: np.zeros((N_METRICS, len(theta[key]))) for key in table.theta_keys()}
    for e in table.entries:
        if kept is not None and e.edge not in kept[e.kind]:
            continue
        F = _softmax(theta[(e.kind, e.edge)])
        mean = e.u @ F  # (N_METRICS,)
        grads[(e.kind, e.edge)] += F[None, :] * (e.u - mean[:, None])
    return grads


def exact_cost(arch: cells.DiscreteArch, plan: NetworkPlan) -> np.ndarray:
    """Cost vector of the discrete network an architecture instantiates.

    Matches the scalar-weight count of DiscreteNetwork exactly: both walk
    the same layout with the same per-op formulas.
    """
    layout = plan.layout()
    templates = plan.templates()
    arch.validate(templates)
    total = _fixed_costs(plan)
    for info in layout.cells:
        tpl = templates[info.kind]
        for j, picks in arch.choices[info.kind].items():
            for p, op_name in picks:
                ctx = info.edge_context(tpl, (p, j))
                total[0] += ops.param_count(op_name, ctx)
                total[1] += ops.flop_count(op_name, ctx)
    if plan.use_connection:
        (_, conn_op), = arch.choices[cells.CONNECT_KIND][1]
        for cell_links in layout.links:
            for link in cell_links:
                total[0] += ops.param_count(conn_op, link.context)
                total[1] += ops.flop_count(conn_op, link.context)
    return total


def phi_range(table: CostTable) -> tuple[np.ndarray, np.ndarray]:
    """Extremes of the expected cost over all logits under FullDag scope,
    attained in the saturated limit.

    Cells sharing a logits vector commit to the same op, so the extremes
    are taken over each vector's summed cost rows, per metric.
    """
    summed: dict[tuple[str, tuple[int, int]], np.ndarray] = {}
    for e in table.entries:
        key = (e.kind, e.edge)
        summed[key] = e.u.copy() if key not in summed else summed[key] + e.u
    lo = table.fixed.copy()
    hi = table.fixed.copy()
    for u in summed.values():
        lo += u.min(axis=1)
        hi += u.max(axis=1)
    return lo, hi


def cost_report_rows(
    phi: np.ndarray,
    exact: np.ndarray,
    box: ConstraintBox,
) -> list[dict]:
    """Rows for the cost report CSV: one per metric."""
    lower_v, upper_v = violation(phi, box)
    rows = []
    for m, name in enumerate(METRICS):
        rows.append(
            {
                "metric": name,
                "expected": float(phi[m]),
                "exact": float(exact[m]),
                "lower_bound": float(box.lower[m]),
                "upper_bound": float(box.upper[m]),
                "violation": float(lower_v[m] + upper_v[m]),
            }
        )
    return rows
