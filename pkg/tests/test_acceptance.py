"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The corpus for criteria 1, 2 and 4 is built in ``corpus.py``.  Criterion 8
needs the 56-bus feeder data, which is not redistributed; point
``RADIAL_SOPF_SCE56`` at a directory holding ``network.json`` (or
``network.csv``) and ``profile.csv`` to run it.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from radial_sopf.certify import (
    a_priori_certificate,
    bus_pattern,
    diffuse_pattern,
    injection_upper_bound,
    max_capacity_lp,
    relative_gap_bound,
)
from radial_sopf.conic import solve_conic
from radial_sopf.network import Reactive, Storage, chain_network, load_network
from radial_sopf.oracle import radial_load_flow
from radial_sopf.program import CostSpec, build_program, extract_operating_point, make_instance
from radial_sopf.scenario import CASE_STUDY_GRID, SdeParams, build_scenario_tree, load_profile
from radial_sopf.sweep import cone_gap, recover, recover_feasible_point

from acceptance_log import record
from corpus import corpus
from toys import Z, four_bus_instance, quadratic_root, single_node_instance, two_bus_net, two_bus_point

pytestmark = pytest.mark.acceptance

CORPUS_SIZE = 100


def _check(number: int, ok: bool, detail: str):
    record(number, ok, detail)
    assert ok, detail


def test_criterion_1_fixed_point_exactness():
    t0 = time.perf_counter()
    cases = corpus(CORPUS_SIZE)
    worst_gap, worst_iter = 0.0, 0
    for case in cases:
        res = recover(case.inst, case.start, max_iter=200)
        worst_gap = max(worst_gap, cone_gap(res.state))
        worst_iter = max(worst_iter, res.iterations)
    elapsed = time.perf_counter() - t0
    ok = len(cases) >= 100 and worst_iter <= 200 and worst_gap <= 1e-8 and elapsed < 60
    _check(1, ok, f"{len(cases)} instances, max iterations {worst_iter}, "
                  f"max |vI-|S|^2| {worst_gap:.2e}, {elapsed:.1f} s")


def test_criterion_2_monotone_iterates():
    t0 = time.perf_counter()
    cases = corpus(CORPUS_SIZE)
    worst = -math.inf
    n_iter = 0
    for case in cases:
        res = recover(case.inst, case.start, max_iter=200)
        n_iter += len(res.log)
        worst = max(worst, max(r.worst_monotone for r in res.log))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 60
    _check(2, ok, f"{n_iter} iterations checked, worst monotonicity slack {worst:.2e}, {elapsed:.1f} s")


def test_criterion_3_zero_gap_at_desk_scale():
    t0 = time.perf_counter()
    inst = four_bus_instance()
    assert inst.n == 4 and inst.grid.n_stages == 3 and inst.tree.n_leaves == 2
    cert = a_priori_certificate(inst.net, injection_upper_bound(inst))
    val = solve_conic(build_program(inst)[0])
    rinst = inst.with_options(restricted=True)
    rprog, ridx = build_program(rinst)
    rsol = solve_conic(rprog)
    point = recover_feasible_point(rinst, extract_operating_point(ridx, rsol.x))
    rel = abs(val.objective - point.objective) / abs(val.objective)
    elapsed = time.perf_counter() - t0
    ok = cert.passed and val.status == rsol.status == "optimal" and rel <= 1e-6 and elapsed < 30
    _check(3, ok, f"certificate {cert.verdict}, val(P_SOC) {val.objective:.10f}, recovered cost "
                  f"{point.objective:.10f}, relative difference {rel:.2e}, {elapsed:.2f} s")


def test_criterion_4_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for case in corpus(CORPUS_SIZE):
        got = recover(case.inst, case.start, max_iter=200).point
        ref = radial_load_flow(case.inst.net, case.start.s)
        assert ref.converged
        for a, b in ((got.S, ref.S), (got.I, ref.I), (got.v, ref.v), (got.s0, ref.s0)):
            worst = max(worst, float(np.max(np.abs(a - b))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 30
    _check(4, ok, f"max componentwise difference {worst:.2e}, {elapsed:.1f} s")


def test_criterion_5_gap_bound_formula():
    t0 = time.perf_counter()
    e0 = relative_gap_bound(100.0, 100.0)
    e1 = relative_gap_bound(101.0, 100.0)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        b = rng.uniform(-1e3, 1e3)
        a = b + abs(rng.normal()) * 10
        lam = 10 ** rng.uniform(-3, 3)
        e = relative_gap_bound(a, b)
        worst = max(worst, abs(relative_gap_bound(lam * a, lam * b) - e) / max(e, 1e-300))
    elapsed = time.perf_counter() - t0
    # the stated 0.00995025 is 2/201 rounded to 8 decimals, 1.24e-9 off the exact value
    exact = 2.0 / 201.0
    ok = (e0 == 0.0 and abs(e1 - exact) <= 1e-9 and round(e1, 8) == 0.00995025 and worst <= 1e-9
          and elapsed < 1)
    _check(5, ok, f"eps(100,100)={e0}, eps(101,100)={e1:.11f} (2/201; stated 0.00995025 differs by "
                  f"{abs(e1 - 0.00995025):.2e}), worst relative scaling drift {worst:.1e}, {elapsed * 1e3:.0f} ms")


def test_criterion_6_two_bus_load_flow():
    t0 = time.perf_counter()
    I_root, v_root = quadratic_root(Z, 1.0)
    lf = radial_load_flow(two_bus_net(), np.array([0.0, -1.0]))
    inst = single_node_instance(two_bus_net(), [[0.0, 1.0]], restricted=True)
    rec = recover_feasible_point(inst, two_bus_point(inst))
    errs = [abs(lf.I[1] - I_root), abs(lf.v[1] - v_root), abs(rec.I[0, 1] - I_root), abs(rec.v[0, 1] - v_root)]
    elapsed = time.perf_counter() - t0
    # the stated v matches the root; the stated I = 1.020408 equals 1/0.98, not the root
    ok = max(errs) <= 1e-9 and abs(v_root - 0.979796) <= 5e-7 and elapsed < 1
    _check(6, ok, f"v1={lf.v[1]:.9f} I={lf.I[1]:.9f} (root {v_root:.9f}, {I_root:.9f}); max error "
                  f"{max(errs):.1e}; stated I 1.020408 differs from the root by {abs(I_root - 1.020408):.2e}")


def test_criterion_7_capacity_toy():
    t0 = time.perf_counter()
    net = chain_network([Z], v_min=0.81, v_max=1.0, peak=1.0)
    pattern, fixed = bus_pattern(net, [1])
    res = max_capacity_lp(net, pattern, fixed)
    # binding constraint: r P + x Q <= 0 with P = lam - 0.55 p, Q = -0.11 p, p = 1/sqrt(1.04)
    hand = 0.66 / math.sqrt(1.04)
    elapsed = time.perf_counter() - t0
    ok = abs(res.threshold - 0.647183) <= 1e-6 and abs(res.threshold - hand) <= 1e-6 and elapsed < 5
    _check(7, ok, f"threshold {res.threshold:.7f} (hand {hand:.7f}), {elapsed:.2f} s")


def _sce56_dir() -> Path | None:
    root = os.environ.get("RADIAL_SOPF_SCE56")
    return Path(root) if root and Path(root).is_dir() else None


def _case_study_network(net, solar_total: float, x_tot: float = 1.0, hours: float = 2.0):
    """Storage and solar proportional to bus size, as in the case study."""
    share = net.peak / net.peak.sum()
    buses = []
    for k, b in enumerate(net.buses):
        if k == 0:
            buses.append(b)
            continue
        cap = share[k] * x_tot
        sol = share[k] * solar_total
        buses.append(replace(b, solar_cap=sol, reactive=Reactive(-0.3 * sol, 0.0),
                             storage=Storage(cap, 0.0, b.storage.x_init, cap / hours, cap / hours, 0.95, 1 / 0.95)))
    return replace(net, buses=tuple(buses))


def test_criterion_8_case_study_reproduction():
    root = _sce56_dir()
    if root is None:
        record(8, None, "56-bus dataset absent (set RADIAL_SOPF_SCE56); criteria 1-7 constitute acceptance")
        pytest.skip("56-bus dataset not available")
    t0 = time.perf_counter()
    net_file = root / "network.json" if (root / "network.json").exists() else root / "network.csv"
    net = load_network(net_file)
    profile = load_profile(root / "profile.csv")
    pattern, fixed = diffuse_pattern(net, x_tot=1.0, hours=2.0)
    lp = max_capacity_lp(net, pattern, fixed)
    bpat, bfixed = bus_pattern(net, [7, 20])
    lp2 = max_capacity_lp(net, bpat, bfixed)
    eps = {}
    study = _case_study_network(net, 3.0)
    cost = CostSpec(1.0, 0.5, 2.0)
    for n, branching in ((1, (1,) * 8), (8, (1, 1, 2, 2, 2, 1, 1, 1)), (12, (1, 1, 2, 3, 2, 1, 1, 1))):
        tree = build_scenario_tree(SdeParams(), CASE_STUDY_GRID, branching, seed=0)
        inst = make_instance(study, tree, CASE_STUDY_GRID, profile, cost, periodic_storage=True)
        a = solve_conic(build_program(inst)[0])
        b = solve_conic(build_program(inst.with_options(restricted=True))[0])
        eps[n] = relative_gap_bound(b.objective if b.status == "optimal" else None, a.objective)
    elapsed = time.perf_counter() - t0
    ok = (abs(lp.threshold - 1.7023) <= 1e-3 and abs(lp2.threshold - 2.0851) <= 1e-3
          and abs(lp2.allocation[0] - 0.4399) <= 1e-3 and abs(lp2.allocation[1] - 1.6452) <= 1e-3
          and all(e <= 1e-5 for e in eps.values()) and elapsed < 600)
    _check(8, ok, f"val(LP)={lp.threshold:.4f}, LP' total {lp2.threshold:.4f} "
                  f"({lp2.allocation[0]:.4f}, {lp2.allocation[1]:.4f}), eps {eps}, {elapsed:.0f} s")


def test_criterion_9_scenario_tree_statistics():
    t0 = time.perf_counter()
    params = SdeParams()
    # two children for nodes at tau = 10, 12 and 14
    branching = tuple(2 if tau in (10.0, 12.0, 14.0) else 1 for tau in CASE_STUDY_GRID.taus[:-2])
    tree = build_scenario_tree(params, CASE_STUDY_GRID, branching, seed=0)
    again = build_scenario_tree(params, CASE_STUDY_GRID, branching, seed=0)
    leaf_p = np.array([tree.nodes[k].prob for k in tree.leaves])
    ordered = all(
        [tree.nodes[c].value for c in kids] == sorted(tree.nodes[c].value for c in kids) for kids in tree.children
    )
    identical = tree.to_dict() == again.to_dict() and np.array_equal(tree.value, again.value)
    elapsed = time.perf_counter() - t0
    ok = (tree.n_leaves == 8 and np.all(leaf_p == 1 / 8) and tree.value.min() >= 0 and tree.value.max() <= 1
          and ordered and identical and elapsed < 30)
    _check(9, ok, f"branching {branching}, {tree.n_leaves} leaves of probability {leaf_p[0]}, "
                  f"values in [{tree.value.min():.3f}, {tree.value.max():.3f}], bit-identical {identical}, "
                  f"{elapsed:.1f} s")
