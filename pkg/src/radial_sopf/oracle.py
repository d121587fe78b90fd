"""Independent radial load flow and constraint audit.

The load flow is written in matrix form (descendant-incidence sums and a
sparse triangular voltage solve) so it shares no recursion with the sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import ShapeMismatch
from .network import RadialNetwork, subtree_lines
from .program import Instance, OperatingPoint

FEASIBLE_P = "feasible_P"
FEASIBLE_SOC_ONLY = "feasible_SOC_only"
INFEASIBLE = "infeasible"


@dataclass
class LoadFlowResult:
    S: np.ndarray
    I: np.ndarray
    v: np.ndarray
    s0: np.ndarray
    converged: bool
    iterations: int
    residual: float


def _operators(net: RadialNetwork):
    n = net.n_buses
    D = np.zeros((n, n))
    for i, desc in enumerate(net.descendants):
        D[i, list(desc)] = 1.0
    D[0, :] = 0.0
    strict = D - np.diag((np.arange(n) > 0).astype(float))
    rows = [i for i in range(1, n)]
    M = sp.lil_matrix((n, n))
    M[0, 0] = 1.0
    for i in rows:
        M[i, i] = 1.0
        M[i, net.parent[i]] = -net.tap_sq_parent[i]
    order = np.argsort(net.depth, kind="stable")
    return D, strict, M.tocsr(), order


def _solve_voltage(M: sp.csr_matrix, b: np.ndarray, order: np.ndarray) -> np.ndarray:
    # permuting to depth order makes the operator lower triangular
    P = M[order][:, order]
    x = spsolve_triangular(P.tocsr(), b[order], lower=True)
    out = np.empty_like(x)
    out[order] = x
    return out


def radial_load_flow(net: RadialNetwork, s, tol: float = 1e-12, max_iter: int = 2000) -> LoadFlowResult:
    """Solve the branch-flow equations for fixed injections ``s``.

    ``s`` is ``(n,)`` or ``(K, n)``; the slack entry is ignored.  Fixed-point
    iteration ``I <- |S(I)|^2 / v(I)`` from ``I = 0`` (so ``v = 1``).
    Divergence (a nonpositive voltage, or a residual that grew for ten
    consecutive iterations) is reported through ``converged = False``.
    """
    s = np.asarray(s, dtype=complex)
    single = s.ndim == 1
    s = np.atleast_2d(s).copy()
    s[:, 0] = 0.0
    K, n = s.shape
    D, strict, M, order = _operators(net)
    z = net.z.copy()
    z[0] = 0.0
    zz = np.abs(z) ** 2
    base = s @ D.T  # sum of descendant injections per line
    parent = net.parent
    top = np.array([i for i in range(1, n) if parent[i] == 0], dtype=int)

    S = np.zeros((K, n), complex)
    I = np.zeros((K, n))
    v = np.ones((K, n))
    ok = np.ones(K, bool)
    iters = 0
    res = np.full(K, np.inf)
    for k in range(K):
        Ik = np.zeros(n)
        prev = np.inf
        growth = 0
        for it in range(1, max_iter + 1):
            Sk = base[k] - strict @ (z * Ik)
            rhs = 2.0 * (np.conj(z) * Sk).real - zz * Ik
            rhs[0] = 1.0
            vk = _solve_voltage(M, rhs, order)
            if np.any(vk[1:] <= 0):
                ok[k] = False
                break
            Inew = np.abs(Sk) ** 2 / vk
            Inew[0] = 0.0
            r = float(np.max(np.abs(Inew - Ik), initial=0.0))
            Ik = Inew
            growth = growth + 1 if r > prev else 0
            prev = r
            if growth >= 10 or not np.isfinite(r):
                ok[k] = False
                break
            if r < tol:
                break
        else:
            ok[k] = False
        iters = max(iters, it)
        Sk = base[k] - strict @ (z * Ik)
        rhs = 2.0 * (np.conj(z) * Sk).real - zz * Ik
        rhs[0] = 1.0
        S[k], I[k], v[k] = Sk, Ik, _solve_voltage(M, rhs, order)
        S[k, 0] = 0.0
        res[k] = float(np.max(np.abs(v[k, 1:] * I[k, 1:] - np.abs(S[k, 1:]) ** 2), initial=0.0))
    s0 = -(S[:, top] - z[top] * I[:, top]).sum(axis=1)
    if single:
        return LoadFlowResult(S[0], I[0], v[0], s0[0], bool(ok[0]), iters, float(res[0]))
    return LoadFlowResult(S, I, v, s0, bool(ok.all()), iters, float(res.max(initial=0.0)))


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


@dataclass
class FamilyReport:
    max_violation: float
    node: int | None
    element: int | None


@dataclass
class Audit:
    families: dict[str, FamilyReport]
    classification: str
    restricted_feasible: bool | None
    tol: float
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": "audit",
            "verdict": self.classification,
            "restricted_feasible": self.restricted_feasible,
            "tol": self.tol,
            "violations": [
                {"condition": name, "node": f.node, "bus": f.element, "amount": f.max_violation}
                for name, f in self.families.items()
                if f.max_violation > self.tol
            ],
            "families": {name: f.max_violation for name, f in self.families.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


P_FAMILIES = (
    "slack_voltage", "voltage_bounds", "current_bounds", "flow_limit", "p_inj_bounds", "p_abs_bounds",
    "q_bounds", "storage_dynamics", "storage_bounds", "injection_definition", "power_balance",
    "slack_balance", "voltage_propagation", "current_cone", "periodicity",
)
LIN_FAMILIES = ("lin_power_balance", "lin_slack_balance", "lin_voltage_propagation", "lin_voltage_bound",
                "reverse_flow")


def _worst(viol: np.ndarray, offset: int = 1) -> FamilyReport:
    """Largest entry and its (node, bus); ``offset`` maps sliced columns back to buses."""
    viol = np.asarray(viol, dtype=float)
    if viol.size == 0:
        return FamilyReport(0.0, None, None)
    flat = int(np.argmax(viol))
    if viol.ndim == 1:
        return FamilyReport(float(max(viol[flat], 0.0)), flat, None)
    k, i = np.unravel_index(flat, viol.shape)
    return FamilyReport(float(max(viol[k, i], 0.0)), int(k), int(i) + offset)


def _excess(x, lo, hi):
    return np.maximum(np.maximum(lo - x, x - hi), 0.0)


def constraint_violation_report(inst: Instance, point: OperatingPoint, tol: float = 1e-7) -> Audit:
    """Worst violation of each constraint family and a feasibility class.

    ``current_definition`` measures ``|v I - |S|^2|`` and decides between
    exact and relaxed feasibility; every other family must hold in both.
    """
    net, tree = inst.net, inst.tree
    K, n = inst.K, inst.n
    for name in ("s", "p_inj", "p_abs", "q", "X", "S", "I", "v"):
        if getattr(point, name).shape != (K, n):
            raise ShapeMismatch(f"{name} has shape {getattr(point, name).shape}, expected {(K, n)}")
    if point.s0.shape != (K,):
        raise ShapeMismatch(f"s0 has shape {point.s0.shape}, expected {(K,)}")
    b = slice(1, None)
    par = net.parent
    z = net.z
    sf = net.storage_field
    fam: dict[str, FamilyReport] = {}

    fam["slack_voltage"] = _worst(np.abs(point.v[:, 0] - 1.0))
    fam["voltage_bounds"] = _worst(_excess(point.v[:, b], net.v_min[b], net.v_max[b]))
    fam["current_bounds"] = _worst(_excess(point.I[:, b], 0.0, net.i_max[b]))
    fam["flow_limit"] = _worst(np.maximum(np.abs(point.S[:, b]) - net.s_max[b], 0.0))
    fam["p_inj_bounds"] = _worst(_excess(point.p_inj[:, b], 0.0, sf("p_inj_max")[b]))
    fam["p_abs_bounds"] = _worst(_excess(point.p_abs[:, b], 0.0, sf("p_abs_max")[b]))
    fam["q_bounds"] = _worst(_excess(point.q[:, b], net.q_min[b], net.q_max[b]))

    parent = np.asarray(tree.parent)
    x_start = np.where(parent[:, None] >= 0, point.X[np.maximum(parent, 0)], sf("x_init")[None, :])
    dt = inst.node_delta[:, None]
    dyn = point.X - x_start - dt * (sf("eff_abs") * point.p_abs - sf("eff_inj") * point.p_inj)
    fam["storage_dynamics"] = _worst(np.abs(dyn[:, b]))
    fam["storage_bounds"] = _worst(_excess(point.X[:, b], sf("cap_min")[b], sf("cap_max")[b]))

    s_def = point.p_inj - point.p_abs + 1j * point.q - inst.demand.sd
    fam["injection_definition"] = _worst(np.abs(point.s[:, b] - s_def[:, b]))

    inflow = np.zeros((K, n), complex)
    for k in range(1, n):
        inflow[:, par[k]] += point.S[:, k] - z[k] * point.I[:, k]
    bal = point.S - inflow - point.s
    fam["power_balance"] = _worst(np.maximum(np.abs(bal.real), np.abs(bal.imag))[:, b])
    slack = inflow[:, 0] + point.s0
    fam["slack_balance"] = _worst(np.maximum(np.abs(slack.real), np.abs(slack.imag)))

    v_par = np.where(par[None, b] >= 0, point.v[:, par[b]], 1.0)
    prop = (point.v[:, b] - net.tap_sq_parent[b] * v_par
            - 2 * (np.conj(z[b]) * point.S[:, b]).real + np.abs(z[b]) ** 2 * point.I[:, b])
    fam["voltage_propagation"] = _worst(np.abs(prop))
    gap = point.v[:, b] * point.I[:, b] - np.abs(point.S[:, b]) ** 2
    fam["current_cone"] = _worst(np.maximum(-gap, 0.0))
    fam["current_definition"] = _worst(np.abs(gap))

    if inst.options.periodic_storage:
        root_of = np.asarray(tree.root_of)
        leaves = [l for l in inst.leaves if l != root_of[l]]
        diff = np.array([np.abs(point.X[l, b] - point.X[root_of[l], b]) for l in leaves]).reshape(-1, n - 1)
        rep = _worst(diff)
        fam["periodicity"] = FamilyReport(rep.max_violation, None if rep.node is None else leaves[rep.node],
                                          rep.element)
    else:
        fam["periodicity"] = FamilyReport(0.0, None, None)

    restricted_ok = None
    if point.S_lin is not None:
        lin_in = np.zeros((K, n), complex)
        for k in range(1, n):
            lin_in[:, par[k]] += point.S_lin[:, k]
        lb = point.S_lin - lin_in - point.s
        lin = {
            "lin_power_balance": _worst(np.maximum(np.abs(lb.real), np.abs(lb.imag))[:, b]),
            "lin_slack_balance": _worst(np.abs(lin_in[:, 0] + point.s0_lin)),
        }
        vl_par = np.where(par[None, b] >= 0, point.v_lin[:, par[b]], 1.0)
        lp = point.v_lin[:, b] - net.tap_sq_parent[b] * vl_par - 2 * (np.conj(z[b]) * point.S_lin[:, b]).real
        lin["lin_voltage_propagation"] = _worst(np.abs(lp))
        lin["lin_voltage_bound"] = _worst(np.maximum(point.v_lin[:, b] - net.v_max[b], 0.0))
        sub = subtree_lines(net, inst.options.subtree_includes_outgoing)
        worst = FamilyReport(0.0, None, None)
        for i in range(1, n):
            for k in sub[i]:
                amount = (np.conj(z[k]) * point.S_lin[:, i]).real
                j = int(np.argmax(amount))
                if amount[j] > worst.max_violation:
                    worst = FamilyReport(float(amount[j]), j, i)
        lin["reverse_flow"] = worst
        fam.update(lin)
        restricted_ok = all(f.max_violation <= tol for f in lin.values())

    relaxed_ok = all(fam[name].max_violation <= tol for name in P_FAMILIES)
    if not relaxed_ok:
        cls = INFEASIBLE
    elif fam["current_definition"].max_violation <= tol:
        cls = FEASIBLE_P
    else:
        cls = FEASIBLE_SOC_ONLY
    return Audit(fam, cls, restricted_ok, tol)
