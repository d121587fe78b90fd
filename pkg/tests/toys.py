"""Small hand-made instances shared by several test modules."""

from __future__ import annotations

import math

import numpy as np

from radial_sopf.network import Bus, Line, RadialNetwork, Reactive, Storage, chain_network, check_network
from radial_sopf.program import CostSpec, Instance, OperatingPoint, Options, make_instance, with_linear_block
from radial_sopf.scenario import DemandLattice, TimeGrid, deterministic_tree, tree_from_branching

Z = 0.01 + 0.01j


def quadratic_root(z: complex = Z, p: float = 1.0) -> tuple[float, float]:
    """Exact 2-bus solution for a pure load ``p``: ``(I, v1)`` on the high-voltage branch.

    With ``S = -p``: ``v1 = 1 - 2 r p - |z|^2 I`` and ``v1 I = p^2``.
    """
    a = abs(z) ** 2
    b = 1.0 - 2.0 * z.real * p
    # a I^2 - b I + p^2 = 0, smaller root
    I = (b - math.sqrt(b * b - 4 * a * p * p)) / (2 * a)
    return I, p * p / I


def single_node_instance(net: RadialNetwork, sd, restricted: bool = False, cost: CostSpec | None = None) -> Instance:
    """One tree node, one stage of length 1 h, residual demand ``sd`` per bus."""
    grid = TimeGrid((0.0, 1.0))
    tree = deterministic_tree([0.0], grid)
    cons = np.atleast_2d(np.asarray(sd, dtype=complex))
    return Instance(net, tree, grid, DemandLattice(cons, np.zeros_like(cons)), cost or CostSpec(),
                    Options(restricted=restricted))


def two_bus_net(z: complex = Z, v_min: float = 0.5, v_max: float = 1.1) -> RadialNetwork:
    return chain_network([z], v_min=v_min, v_max=v_max)


def two_bus_point(inst: Instance, S: float = -1.0, I: float = 1.1) -> OperatingPoint:
    """Restricted-feasible 2-bus start with flow ``S`` and an inflated current ``I``."""
    z = inst.net.z[1]
    v1 = 1.0 + 2.0 * (np.conj(z) * S).real - abs(z) ** 2 * I
    zero = np.zeros((1, 2))
    s = np.array([[0.0, -inst.demand.sd[0, 1]]], dtype=complex)
    s0 = -(S - z * I)
    pt = OperatingPoint(
        s0=np.array([s0]), s=s, p_inj=zero.copy(), p_abs=zero.copy(), q=zero.copy(), X=zero.copy(),
        S=np.array([[0.0, S]], dtype=complex), I=np.array([[0.0, I]]), v=np.array([[1.0, v1]]),
        p0_plus=np.array([max(s0.real, 0.0)]), p0_minus=np.array([max(-s0.real, 0.0)]),
    )
    return with_linear_block(inst, pt)


def four_bus_net(solar: float = 0.3) -> RadialNetwork:
    """Bus 1 hangs off the slack; buses 2 and 3 hang off bus 1."""
    st = Storage(cap_max=0.2, cap_min=0.0, x_init=0.1, p_inj_max=0.05, p_abs_max=0.05, eff_abs=0.95, eff_inj=1 / 0.95)
    buses = [Bus(0)]
    for k, (par, peak, sol) in enumerate([(0, 0.4, 0.0), (1, 0.3, solar), (1, 0.3, solar / 2)], start=1):
        buses.append(Bus(k, par, v_min=0.9025, v_max=1.1025, peak=peak, storage=st,
                         reactive=Reactive(-0.3 * sol, 0.0), solar_cap=sol))
    lines = [Line(1, 0, 0.01, 0.02, i_max=4.0, s_max=2.0), Line(2, 1, 0.02, 0.02, i_max=4.0),
             Line(3, 1, 0.015, 0.03, i_max=4.0)]
    return check_network(RadialNetwork(tuple(buses), tuple(lines)))


FOUR_BUS_GRID = TimeGrid((10.0, 12.0, 14.0, 17.0))


def four_bus_instance(restricted: bool = False, periodic: bool = False, solar: float = 0.3,
                      cost: CostSpec | None = None, path_form: bool = False) -> Instance:
    """4 buses, 3 stages, 2 scenarios (branching at the last stage)."""
    values = {(0, 0): 0.6, (1, 0): 0.7, (2, 0): 0.3, (2, 1): 0.9}
    tree = tree_from_branching(lambda t, i: values[(t, i)], (1, 2), FOUR_BUS_GRID)
    if path_form:
        from radial_sopf.scenario import expand_to_paths

        tree = expand_to_paths(tree)
    return make_instance(four_bus_net(solar), tree, FOUR_BUS_GRID, [0.7, 0.8, 0.75], cost,
                         restricted=restricted, periodic_storage=periodic)
