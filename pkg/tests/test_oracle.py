from __future__ import annotations

import ast
import json
from pathlib import Path

import numpy as np
import pytest

import radial_sopf.oracle as oracle
from radial_sopf.conic import solve_conic
from radial_sopf.errors import ShapeMismatch
from radial_sopf.oracle import (
    FEASIBLE_P,
    FEASIBLE_SOC_ONLY,
    INFEASIBLE,
    constraint_violation_report,
    radial_load_flow,
)
from radial_sopf.program import build_program, extract_operating_point
from radial_sopf.sweep import recover_feasible_point

from corpus import random_network
from toys import Z, four_bus_instance, quadratic_root, single_node_instance, two_bus_net, two_bus_point


def test_two_bus_closed_form():
    lf = radial_load_flow(two_bus_net(), np.array([0.0, -1.0]))
    I, v = quadratic_root()
    assert lf.converged
    assert lf.I[1] == pytest.approx(I, abs=1e-10)
    assert lf.v[1] == pytest.approx(v, abs=1e-10)
    assert lf.s0 == pytest.approx(1.0 + Z * I, abs=1e-10)
    assert lf.residual <= 1e-12


def test_zero_injections():
    lf = radial_load_flow(random_network(np.random.default_rng(0), 6), np.zeros(6))
    assert lf.converged
    np.testing.assert_array_equal(lf.v, 1.0)
    assert not np.any(lf.I) and lf.s0 == 0


def test_voltage_collapse_is_reported():
    lf = radial_load_flow(two_bus_net(), np.array([0.0, -1000.0]))
    assert not lf.converged


def test_batched_nodes_match_single_runs():
    net = random_network(np.random.default_rng(3), 7)
    rng = np.random.default_rng(4)
    s = -(rng.uniform(0, 0.3, (3, 7)) + 1j * rng.uniform(0, 0.1, (3, 7)))
    both = radial_load_flow(net, s)
    for k in range(3):
        one = radial_load_flow(net, s[k])
        np.testing.assert_allclose(both.v[k], one.v, atol=1e-14)


def test_oracle_shares_no_code_with_the_sweep():
    tree = ast.parse(Path(oracle.__file__).read_text())
    imported = {node.module for node in ast.walk(tree) if isinstance(node, ast.ImportFrom)}
    assert not any(m and "sweep" in m for m in imported)


def test_recovered_point_is_exactly_feasible():
    inst = single_node_instance(two_bus_net(), [[0.0, 1.0]], restricted=True)
    point = recover_feasible_point(inst, two_bus_point(inst))
    audit = constraint_violation_report(inst, point)
    assert audit.classification == FEASIBLE_P
    assert audit.restricted_feasible
    assert all(f.max_violation <= 1e-9 for f in audit.families.values())


def test_slack_cone_point_is_relaxation_only():
    inst = single_node_instance(two_bus_net(), [[0.0, 1.0]], restricted=True)
    start = two_bus_point(inst, I=1.1)
    audit = constraint_violation_report(inst, start)
    assert audit.classification == FEASIBLE_SOC_ONLY
    gap = start.v[0, 1] * start.I[0, 1] - 1.0
    assert audit.families["current_definition"].max_violation == pytest.approx(gap, abs=1e-12)
    assert audit.families["current_cone"].max_violation == 0.0


def test_storage_excess_is_infeasible():
    inst = four_bus_instance()
    prog, idx = build_program(inst)
    point = extract_operating_point(idx, solve_conic(prog).x)
    bad = point.copy()
    cap = inst.net.storage_field("cap_max")
    bad.X[2, 3] = cap[3] + 0.1
    audit = constraint_violation_report(inst, bad)
    assert audit.classification == INFEASIBLE
    rep = audit.families["storage_bounds"]
    assert rep.max_violation == pytest.approx(0.1, abs=1e-12)
    assert (rep.node, rep.element) == (2, 3)
    doc = json.loads(audit.to_json())
    assert doc["verdict"] == INFEASIBLE
    assert "storage_bounds" in [v["condition"] for v in doc["violations"]]


def test_shape_mismatch():
    inst = four_bus_instance()
    _, idx = build_program(inst)
    point = extract_operating_point(idx, np.zeros(idx.n_vars))
    point.v = point.v[:, :2]
    with pytest.raises(ShapeMismatch):
        constraint_violation_report(inst, point)
