"""Differentiable cost model: expected cost, closed-form gradient, exact costs."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcnas import ops
from rcnas.cells import CellTemplate, DiscreteArch, derive_discrete
from rcnas.cost import (
    METRICS,
    ConstraintBox,
    CostScope,
    CostTable,
    EdgeCost,
    build_cost_table,
    cost_gradient,
    cost_report_rows,
    exact_cost,
    expected_cost,
    phi_range,
    scope_edges,
    violation,
)
from rcnas.exhaustive import enumerate_vertex_costs, saturate_theta
from rcnas.network import NetworkPlan, Supernet

SMALL_OPS = (ops.ZERO, ops.IDENTITY, ops.MAX_POOL_3)


def _micro_plan(**kw):
    base = dict(
        n_cells=2, init_channels=4, n_classes=4, image_hw=(8, 8), n_nodes=4, k_levels=1
    )
    base.update(kw)
    return NetworkPlan(**base)


def _single_edge_table(u_params, u_flops=None, copies=1):
    tpl = CellTemplate(n_inputs=2, n_intermediate=1, op_names=SMALL_OPS)
    u = np.array([u_params, u_flops if u_flops is not None else [0.0] * len(u_params)])
    entries = [
        EdgeCost(owner=f"cell{i}", kind="cell", edge=(0, 2), node=2, u=u.copy())
        for i in range(copies)
    ]
    # edge (1, 2) exists in the template but carries no cost here
    zero_u = np.zeros_like(u)
    for i in range(copies):
        entries.append(EdgeCost(owner=f"cell{i}", kind="cell", edge=(1, 2), node=2, u=zero_u.copy()))
    return CostTable(entries=entries, fixed=np.array([10.0, 20.0]), templates={"cell": tpl})


def _uniform_theta(table):
    return {
        key: np.zeros(len(table.templates[key[0]].op_names))
        for key in table.theta_keys()
    }


def test_expected_cost_hand_value():
    table = _single_edge_table([0.0, 0.0, 9216.0])
    phi = expected_cost(_uniform_theta(table), table, CostScope.FULL_DAG)
    np.testing.assert_allclose(phi, [10.0 + 3072.0, 20.0], rtol=1e-12)


def test_cost_gradient_hand_value():
    table = _single_edge_table([0.0, 0.0, 9216.0])
    g = cost_gradient(_uniform_theta(table), table, CostScope.FULL_DAG)
    np.testing.assert_allclose(
        g[("cell", (0, 2))][0], [-1024.0, -1024.0, 2048.0], rtol=1e-12
    )
    np.testing.assert_allclose(g[("cell", (0, 2))][1], 0.0, atol=0)
    np.testing.assert_allclose(g[("cell", (1, 2))], 0.0, atol=0)


def test_shared_logits_accumulate():
    one = _single_edge_table([0.0, 0.0, 9216.0], copies=1)
    two = _single_edge_table([0.0, 0.0, 9216.0], copies=2)
    theta = _uniform_theta(one)
    phi1 = expected_cost(theta, one, CostScope.FULL_DAG)
    phi2 = expected_cost(theta, two, CostScope.FULL_DAG)
    np.testing.assert_allclose(phi2 - two.fixed, 2 * (phi1 - one.fixed), rtol=1e-12)
    g1 = cost_gradient(theta, one, CostScope.FULL_DAG)[("cell", (0, 2))]
    g2 = cost_gradient(theta, two, CostScope.FULL_DAG)[("cell", (0, 2))]
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12)


def test_cost_gradient_matches_finite_differences():
    plan = _micro_plan()
    table = build_cost_table(plan)
    rng = np.random.default_rng(np.random.SeedSequence(5))
    theta = {key: rng.standard_normal(len(table.templates[key[0]].op_names)) for key in table.theta_keys()}
    for scope in (CostScope.FULL_DAG, CostScope.TOP_K):
        frozen = scope_edges(theta, table.templates) if scope is CostScope.TOP_K else None
        grads = cost_gradient(theta, table, scope, frozen_scope=frozen)
        h = 1e-5
        for key in table.theta_keys():
            vec = theta[key]
            for i in range(len(vec)):
                for m in range(2):
                    orig = vec[i]
                    vec[i] = orig + h
                    up = expected_cost(theta, table, scope, frozen_scope=frozen)[m]
                    vec[i] = orig - h
                    dn = expected_cost(theta, table, scope, frozen_scope=frozen)[m]
                    vec[i] = orig
                    fd = (up - dn) / (2 * h)
                    an = grads[key][m, i]
                    denom = max(abs(an), abs(fd), 1.0)
                    assert abs(an - fd) / denom < 1e-6, (key, m, i)


def test_saturated_expected_equals_exact():
    plan = _micro_plan()
    table = build_cost_table(plan)
    net = Supernet(plan, seed=3, theta_init_scale=1.0)
    arch = derive_discrete(net.arch, plan.templates())
    theta = saturate_theta(arch, plan.templates())
    phi = expected_cost(theta, table, CostScope.TOP_K)
    np.testing.assert_allclose(phi, exact_cost(arch, plan), rtol=1e-9)


def test_all_identity_arch_costs_only_fixed_plus_links():
    plan = _micro_plan()
    table = build_cost_table(plan)
    arch = DiscreteArch(
        {
            "normal.0": {2: ((0, ops.IDENTITY), (1, ops.IDENTITY))},
            "connect": {1: ((0, ops.GROUP_CONV_G1),)},
        }
    )
    exact = exact_cost(arch, plan)
    # 4 links (2 cells x 2 inputs), each a 1x1 conv c4->c4 plus bn: 16 + 8 params
    assert exact[0] == table.fixed[0] + 4 * 24
    # each link conv: 1*1*4*4*8*8 = 1024 flops; identity edges and bn add none
    assert exact[1] == table.fixed[1] + 4 * 1024


def test_violation_trivials():
    box = ConstraintBox(np.array([10.0, 0.0]), np.array([20.0, 5.0]))
    lo, hi = violation(np.array([15.0, 2.0]), box)
    assert not lo.any() and not hi.any()
    lo, hi = violation(np.array([25.0, 2.0]), box)
    np.testing.assert_allclose(hi, [5.0, 0.0])
    assert not lo.any()
    lo, hi = violation(np.array([7.0, 2.0]), box)
    np.testing.assert_allclose(lo, [3.0, 0.0])
    # boundary counts as inside
    lo, hi = violation(np.array([20.0, 0.0]), box)
    assert not lo.any() and not hi.any()


def test_feasible_uses_relative_slack():
    box = ConstraintBox(np.array([0.0, 0.0]), np.array([100.0, 100.0]))
    assert box.feasible(np.array([100.0 + 1e-7, 50.0]))
    assert not box.feasible(np.array([100.0 + 1e-3, 50.0]))
    assert ConstraintBox.unbounded().feasible(np.array([1e18, 1e18]))


def test_box_validation():
    with pytest.raises(ValueError):
        ConstraintBox(np.array([5.0, 0.0]), np.array([1.0, 10.0]))
    with pytest.raises(ValueError):
        ConstraintBox(np.array([-1.0, 0.0]), np.array([1.0, 10.0]))
    with pytest.raises(ValueError):
        ConstraintBox(np.zeros(3), np.ones(3))


def test_phi_range_matches_vertex_enumeration():
    table = build_cost_table(_micro_plan())
    lo, hi = phi_range(table)
    costs = enumerate_vertex_costs(table)
    np.testing.assert_allclose(lo, costs.min(axis=0), rtol=1e-12)
    np.testing.assert_allclose(hi, costs.max(axis=0), rtol=1e-12)


def test_content_hash_identifies_plan():
    a = build_cost_table(_micro_plan())
    b = build_cost_table(_micro_plan())
    c = build_cost_table(_micro_plan(init_channels=8))
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != c.content_hash()


def test_topk_never_exceeds_fulldag():
    plan = NetworkPlan(
        n_cells=3, init_channels=4, n_classes=4, image_hw=(8, 8), n_nodes=5, k_levels=1
    )
    table = build_cost_table(plan)
    rng = np.random.default_rng(np.random.SeedSequence(9))
    for _ in range(20):
        theta = {
            key: rng.standard_normal(len(table.templates[key[0]].op_names))
            for key in table.theta_keys()
        }
        full = expected_cost(theta, table, CostScope.FULL_DAG)
        top = expected_cost(theta, table, CostScope.TOP_K)
        assert np.all(top <= full + 1e-9)


def test_topk_equals_fulldag_when_no_edge_dropped():
    # N=4 keeps both of node 2's predecessors, so the scopes coincide
    table = build_cost_table(_micro_plan())
    rng = np.random.default_rng(np.random.SeedSequence(10))
    theta = {
        key: rng.standard_normal(len(table.templates[key[0]].op_names))
        for key in table.theta_keys()
    }
    np.testing.assert_allclose(
        expected_cost(theta, table, CostScope.TOP_K),
        expected_cost(theta, table, CostScope.FULL_DAG),
        rtol=1e-12,
    )


def test_frozen_scope_overrides_live_selection():
    plan = NetworkPlan(
        n_cells=3, init_channels=4, n_classes=4, image_hw=(8, 8), n_nodes=5, k_levels=1
    )
    table = build_cost_table(plan)
    kind = "normal.0"
    theta0 = {key: np.zeros(len(table.templates[key[0]].op_names)) for key in table.theta_keys()}
    # ties keep preds (0, 1) for node 3
    frozen = scope_edges(theta0, table.templates)
    assert (2, 3) not in frozen[kind]

    theta1 = {k: v.copy() for k, v in theta0.items()}
    idx = table.templates[kind].op_names.index(ops.SEP_CONV_5)
    theta1[(kind, (2, 3))][idx] = 6.0  # edge (2,3) now strongest, and expensive
    live = scope_edges(theta1, table.templates)
    assert (2, 3) in live[kind]
    phi_live = expected_cost(theta1, table, CostScope.TOP_K)
    phi_frozen = expected_cost(theta1, table, CostScope.TOP_K, frozen_scope=frozen)
    assert phi_frozen[0] < phi_live[0]


def test_scope_parse():
    assert CostScope.parse("topk") is CostScope.TOP_K
    assert CostScope.parse("fulldag") is CostScope.FULL_DAG
    with pytest.raises(ValueError):
        CostScope.parse("everything")


def test_cost_report_rows_schema():
    box = ConstraintBox(np.array([0.0, 0.0]), np.array([10.0, 10.0]))
    rows = cost_report_rows(np.array([12.0, 5.0]), np.array([11.0, 4.0]), box)
    assert [r["metric"] for r in rows] == list(METRICS)
    assert rows[0]["violation"] == pytest.approx(2.0)
    assert rows[1]["violation"] == 0.0
    assert set(rows[0]) == {
        "metric", "expected", "exact", "lower_bound", "upper_bound", "violation",
    }


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_expected_cost_stays_within_phi_range(seed):
    table = build_cost_table(_micro_plan())
    lo, hi = phi_range(table)
    rng = np.random.default_rng(seed)
    theta = {
        key: 5 * rng.standard_normal(len(table.templates[key[0]].op_names))
        for key in table.theta_keys()
    }
    phi = expected_cost(theta, table, CostScope.FULL_DAG)
    assert np.all(phi >= lo - 1e-9) and np.all(phi <= hi + 1e-9)
