"""Random restricted-feasible instances shared by the sweep, oracle and acceptance tests.

Each start point is an optimum of the restricted relaxation under a random
objective on the currents (negative weights leave cones slack), then
polished: flows, voltages and the slack injection are recomputed exactly from
the branch equations and the currents are inflated by 1e-7 so every cone is
strictly satisfied.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from radial_sopf.conic import ConicProgram, check_residuals, solve_conic
from radial_sopf.network import Bus, Line, RadialNetwork, Reactive, Storage, check_network
from radial_sopf.program import (
    CostSpec,
    Instance,
    OperatingPoint,
    build_program,
    extract_operating_point,
    make_instance,
    pack,
    with_linear_block,
)
from radial_sopf.scenario import TimeGrid, tree_from_branching


@dataclass
class Case:
    inst: Instance
    start: OperatingPoint
    seed: int


BRANCHINGS = {
    2: [(1, 1), (1, 2), (2, 1), (1, 3), (2, 2), (1, 4), (4, 1)],
    3: [(1, 1, 1), (1, 2, 1), (1, 1, 2), (2, 1, 2), (1, 3, 1), (1, 2, 2), (4, 1, 1)],
}


def random_branching(rng, n_stages: int) -> tuple[int, ...]:
    T = n_stages - 1
    if T in BRANCHINGS:
        return BRANCHINGS[T][rng.integers(len(BRANCHINGS[T]))]
    b = [1] * T
    leaves = int(rng.integers(1, 5))
    if leaves > 1:
        b[int(rng.integers(T))] = leaves
    return tuple(b)


def random_network(rng, n_buses: int) -> RadialNetwork:
    buses = [Bus(0)]
    lines = []
    for k in range(1, n_buses):
        p = int(rng.integers(0, k))
        peak = float(rng.uniform(0.02, 0.25))
        cap = float(rng.uniform(0.0, 0.2))
        solar = float(rng.uniform(0.0, 0.3))
        tap = 1.0 if rng.random() < 0.8 else float(rng.uniform(0.97, 1.03))
        buses.append(Bus(
            k, p, v_min=0.81, v_max=1.21, tap=tap, peak=peak,
            storage=Storage(cap, 0.0, cap * float(rng.uniform(0.2, 0.8)), cap / 2, cap / 2, 0.95, 1 / 0.95),
            reactive=Reactive(-0.3 * solar, float(rng.uniform(0.0, 0.05))),
            solar_cap=solar,
        ))
        lines.append(Line(k, p, float(rng.uniform(0.002, 0.03)), float(rng.uniform(0.002, 0.03)),
                          i_max=float(rng.uniform(1.0, 4.0))))
    return check_network(RadialNetwork(tuple(buses), tuple(lines)))


def polish(inst: Instance, point: OperatingPoint, inflate: float = 1e-7) -> OperatingPoint:
    """Recompute S, v, s0 (and the linear block) exactly from I and s."""
    net = inst.net
    n = net.n_buses
    par = net.parent
    z = net.z
    out = point.copy()
    bump = np.minimum(inflate * (1.0 + point.I), np.maximum(net.i_max[None, :] - point.I, 0.0))
    I = np.where(np.arange(n)[None, :] > 0, point.I + bump, 0.0)
    S = np.zeros_like(point.S)
    acc = point.s.copy()
    acc[:, 0] = 0.0
    for i in range(n - 1, 0, -1):
        S[:, i] = acc[:, i]
        acc[:, par[i]] += S[:, i] - z[i] * I[:, i]
    v = np.ones_like(point.v)
    for i in range(1, n):
        v[:, i] = net.tap_sq_parent[i] * v[:, par[i]] + 2 * (np.conj(z[i]) * S[:, i]).real - abs(z[i]) ** 2 * I[:, i]
    out.S, out.I, out.v, out.s0 = S, I, v, -acc[:, 0]
    out.p0_plus = np.maximum(out.s0.real, 0.0)
    out.p0_minus = np.maximum(-out.s0.real, 0.0)
    return with_linear_block(inst, out)


def make_case(seed: int) -> Case | None:
    rng = np.random.default_rng(seed)
    n_buses = int(rng.integers(3, 11))
    n_stages = int(rng.integers(2, 5))
    net = random_network(rng, n_buses)
    taus = np.concatenate([[8.0], 8.0 + np.cumsum(rng.uniform(0.5, 3.0, n_stages))])
    grid = TimeGrid(tuple(taus))
    branching = random_branching(rng, n_stages)
    values = rng.uniform(0.0, 1.0, 64)
    tree = tree_from_branching(lambda t, i: values[(7 * t + i) % 64], branching, grid)
    profile = rng.uniform(0.3, 1.0, grid.n_stages)
    inst = make_instance(net, tree, grid, profile, CostSpec(1.0, 0.5, 2.0, float(rng.uniform(0, 0.1))),
                         restricted=True, periodic_storage=bool(rng.random() < 0.3))
    prog, idx = build_program(inst)
    c = prog.c.copy()
    icols = idx["I"][:, 1:].ravel()
    c[icols] += rng.uniform(-0.5, 1.0, icols.size)
    sol = solve_conic(ConicProgram(prog.n_vars, c, prog.G, prog.h, prog.cones, prog.c0))
    if sol.status != "optimal":
        return None
    start = polish(inst, extract_operating_point(idx, sol.x))
    res = check_residuals(prog, pack(idx, start))
    if res["rsoc"] > 0 or res["max"] > 1e-9:
        return None
    return Case(inst, start, seed)


@lru_cache(maxsize=None)
def corpus(size: int = 100, first_seed: int = 1000) -> tuple[Case, ...]:
    cases = []
    seed = first_seed
    while len(cases) < size:
        case = make_case(seed)
        if case is not None:
            cases.append(case)
        seed += 1
    return tuple(cases)
