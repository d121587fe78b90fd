"""A-priori exactness certificates, hosting-capacity LPs and the a-posteriori gap bound."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import _Builder, solve_conic
from .errors import GapOrderError, InfeasibleLP
from .network import RadialNetwork, ensure_depth_ordered, linear_flow, subtree_lines
from .scenario import CONSUMPTION_PHASOR

CONDITION_SLACK = 1e-9


@dataclass(frozen=True)
class ConditionViolation:
    condition: str  # "voltage" or "reverse_flow"
    line: int | None
    node: int | None
    amount: float
    bus: int | None = None
    subtree_edge: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        out = {"condition": self.condition, "line": self.line, "node": self.node, "amount": self.amount}
        if self.bus is not None:
            out["bus"] = self.bus
        if self.subtree_edge is not None:
            out["subtree_edge"] = list(self.subtree_edge)
        return out


@dataclass
class Certificate:
    kind: str  # a_priori | no_reverse_flow | capacity_lp | a_posteriori
    verdict: str  # pass | fail | threshold | unbounded | infeasible
    violations: list[ConditionViolation] = field(default_factory=list)
    threshold: float | None = None
    provenance: dict = field(default_factory=dict)
    inputs_digest: str = ""
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "verdict": self.verdict,
            "violations": [v.to_dict() for v in self.violations],
            "inputs_digest": self.inputs_digest,
        }
        if self.threshold is not None:
            out["threshold"] = self.threshold if math.isfinite(self.threshold) else "inf"
        if self.notes:
            out["notes"] = list(self.notes)
        for key, val in self.provenance.items():
            out.setdefault("provenance", {})[key] = _jsonable(val)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _jsonable(val):
    if isinstance(val, np.ndarray):
        if np.iscomplexobj(val):
            return {"re": val.real.tolist(), "im": val.imag.tolist()}
        return val.tolist()
    if isinstance(val, (np.floating, np.integer)):
        return val.item()
    if isinstance(val, complex):
        return {"re": val.real, "im": val.imag}
    return val


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a))
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def worst_case_linear_flow(net: RadialNetwork, s_bar) -> tuple[np.ndarray, np.ndarray]:
    """Loss-free flows ``S_bar`` and voltages ``v_bar`` driven by the injection
    upper bounds ``s_bar`` (shape ``(n,)`` or ``(K, n)``)."""
    v, S, _ = linear_flow(net, s_bar)
    return v, S


def injection_upper_bound(inst) -> np.ndarray:
    """``p_inj_max + i q_max - s_d`` per (node, bus)."""
    net = inst.net
    ub = net.storage_field("p_inj_max")[None, :] + 1j * net.q_max[None, :] - inst.demand.sd
    ub[:, 0] = 0.0
    return ub


def floor_upper_bound(net: RadialNetwork, cons_floor: float = 0.55, solar_cap=None) -> np.ndarray:
    """Tree- and grid-independent bound for a consumption profile never below
    ``cons_floor``: solar and storage at full output, reactive at its maximum."""
    solar = net.solar_cap if solar_cap is None else np.asarray(solar_cap, dtype=float)
    ub = solar + net.storage_field("p_inj_max") + 1j * net.q_max - cons_floor * CONSUMPTION_PHASOR * net.peak
    ub = ub.astype(complex)
    ub[0] = 0.0
    return ub


def check_conditions(net: RadialNetwork, v_bar, S_bar, include_outgoing: bool = False,
                     slack: float = CONDITION_SLACK) -> list[ConditionViolation]:
    """Violations of ``v_bar <= v_max`` and of ``Re(z_k^* S_bar_i) <= 0`` for
    every line ``i`` and line ``k`` of its subtree."""
    v_bar = np.atleast_2d(v_bar)
    S_bar = np.atleast_2d(S_bar)
    ids = [b.id for b in net.buses]
    orig = net.original_ids or tuple(ids)
    out: list[ConditionViolation] = []
    excess = v_bar[:, 1:] - net.v_max[None, 1:]
    for m, i in zip(*np.nonzero(excess > slack)):
        out.append(ConditionViolation("voltage", None, int(m), float(excess[m, i]), bus=orig[i + 1]))
    sub = subtree_lines(net, include_outgoing)
    par = net.parent
    for i in range(1, net.n_buses):
        for k in sub[i]:
            amount = net.r[k] * S_bar[:, i].real + net.x[k] * S_bar[:, i].imag
            for m in np.nonzero(amount > slack)[0]:
                out.append(ConditionViolation("reverse_flow", orig[i], int(m), float(amount[m]),
                                              subtree_edge=(orig[k], orig[par[k]])))
    return out


def a_priori_certificate(net: RadialNetwork, s_bar, include_outgoing: bool = False,
                         slack: float = CONDITION_SLACK) -> Certificate:
    """Check the worst-case linear-flow conditions for injection bounds ``s_bar``.

    ``provenance['no_reverse_flow']`` reports the stronger sufficient
    condition ``S_bar <= 0`` componentwise.
    """
    net = ensure_depth_ordered(net)
    s_bar = np.asarray(s_bar, dtype=complex)
    v_bar, S_bar = worst_case_linear_flow(net, s_bar)
    viol = check_conditions(net, v_bar, S_bar, include_outgoing, slack)
    S2 = np.atleast_2d(S_bar)[:, 1:]
    no_reverse = bool(np.all(S2.real <= slack) and np.all(S2.imag <= slack))
    return Certificate(
        "a_priori",
        "fail" if viol else "pass",
        viol,
        provenance={"v_lin": v_bar, "S_lin": S_bar, "no_reverse_flow": no_reverse},
        inputs_digest=digest(s_bar, net.r, net.x, net.v_max, net.parent),
    )


def no_reverse_flow_certificate(net: RadialNetwork, s_bar) -> Certificate:
    net = ensure_depth_ordered(net)
    v_bar, S_bar = worst_case_linear_flow(net, s_bar)
    S2 = np.atleast_2d(S_bar)
    viol = []
    for m, i in zip(*np.nonzero((S2.real[:, 1:] > CONDITION_SLACK) | (S2.imag[:, 1:] > CONDITION_SLACK))):
        amount = float(max(S2[m, i + 1].real, S2[m, i + 1].imag))
        viol.append(ConditionViolation("reverse_flow", int(i + 1), int(m), amount))
    return Certificate("no_reverse_flow", "fail" if viol else "pass", viol,
                       provenance={"S_lin": S_bar}, inputs_digest=digest(np.asarray(s_bar), net.r, net.x))


@dataclass
class CapacityResult:
    status: str  # optimal | unbounded
    threshold: float
    allocation: np.ndarray  # one multiplier per pattern row
    certificate: Certificate


def max_capacity_lp(net: RadialNetwork, pattern, fixed_injections, include_outgoing: bool = False,
                    tol: float = 1e-9) -> CapacityResult:
    """Largest nonnegative multipliers ``lam`` for which the injection bounds
    ``fixed + sum_r lam_r pattern_r`` (active power) still pass the a-priori
    conditions; the objective is ``sum_r lam_r sum(pattern_r)``.

    Variables are ``lam``, the worst-case flows ``(P, Q)`` and voltages; the
    flow/voltage recursions enter as equalities, so the program is an LP.
    """
    net = ensure_depth_ordered(net)
    pattern = np.atleast_2d(np.asarray(pattern, dtype=float))
    fixed = np.asarray(fixed_injections, dtype=complex)
    n = net.n_buses
    if pattern.shape[1] != n:
        raise ValueError(f"pattern rows need {n} entries")
    if np.any(pattern < 0) or not np.any(pattern > 0):
        raise ValueError("pattern must be nonnegative and not all zero")
    R = pattern.shape[0]
    # columns: lam (R) | P (n-1) | Q (n-1) | v (n-1); bus i -> offset i-1
    lam = np.arange(R)
    P = R + np.arange(n - 1)
    Q = R + (n - 1) + np.arange(n - 1)
    V = R + 2 * (n - 1) + np.arange(n - 1)
    B = _Builder(R + 3 * (n - 1))
    par = net.parent
    kids = [[k for k in range(1, n) if par[k] == i] for i in range(n)]
    for part, cols in ((0, P), (1, Q)):
        for i in range(1, n):
            r, c, v = [0], [cols[i - 1]], [1.0]
            for k in kids[i]:
                r.append(0), c.append(cols[k - 1]), v.append(-1.0)
            if part == 0:
                for j in range(R):
                    if pattern[j, i] != 0:
                        r.append(0), c.append(lam[j]), v.append(-pattern[j, i])
            h = -(fixed[i].real if part == 0 else fixed[i].imag)
            B.add("zero", r, c, v, [h])
    t2 = net.tap_sq_parent
    for i in range(1, n):
        r, c, v = [0, 0, 0], [V[i - 1], P[i - 1], Q[i - 1]], [1.0, -2 * net.r[i], -2 * net.x[i]]
        h = 0.0
        if par[i] == 0:
            h = -t2[i]
        else:
            r.append(0), c.append(V[par[i] - 1]), v.append(-t2[i])
        B.add("zero", r, c, v, [h])
    B.add("nonneg", np.arange(R), lam, np.ones(R), np.zeros(R))
    finite = [i for i in range(1, n) if np.isfinite(net.v_max[i])]
    B.add("nonneg", np.arange(len(finite)), [V[i - 1] for i in finite], -np.ones(len(finite)),
          [net.v_max[i] for i in finite])
    sub = subtree_lines(net, include_outgoing)
    for i in range(1, n):
        for k in sub[i]:
            B.add("nonneg", [0, 0], [P[i - 1], Q[i - 1]], [-net.r[k], -net.x[k]], [0.0])
    c = np.zeros(B.n_vars)
    c[lam] = -pattern.sum(axis=1)
    prog = B.build(c)
    sol = solve_conic(prog, tol=tol)
    dig = digest(pattern, fixed, net.r, net.x, net.v_max, net.parent)
    if sol.status == "infeasible":
        raise InfeasibleLP("capacity conditions already fail at zero capacity")
    if sol.status == "unbounded":
        cert = Certificate("capacity_lp", "unbounded", threshold=math.inf, inputs_digest=dig,
                           notes=["conditions hold for every capacity along the pattern"])
        return CapacityResult("unbounded", math.inf, np.full(R, math.inf), cert)
    if sol.status != "optimal":
        raise InfeasibleLP(f"capacity LP ended with status {sol.status}")
    alloc = sol.x[lam]
    threshold = float(alloc @ pattern.sum(axis=1))
    cert = Certificate("capacity_lp", "threshold", threshold=threshold, inputs_digest=dig,
                       provenance={"allocation": alloc, "solver_residual": sol.residuals.get("max", 0.0)})
    return CapacityResult("optimal", threshold, alloc, cert)


def diffuse_pattern(net: RadialNetwork, x_tot: float = 0.0, hours: float = 2.0, cons_floor: float = 0.55):
    """Solar and storage proportional to bus size: returns ``(pattern, fixed)``."""
    share = net.peak / net.peak.sum()
    share[0] = 0.0
    fixed = share * (x_tot / hours) - cons_floor * CONSUMPTION_PHASOR * net.peak
    fixed[0] = 0.0
    return share[None, :], fixed


def bus_pattern(net: RadialNetwork, buses, cons_floor: float = 0.55):
    """One unit direction per listed bus id, no storage: returns ``(pattern, fixed)``."""
    ids = net.original_ids or tuple(b.id for b in net.buses)
    pos = {bid: k for k, bid in enumerate(ids)}
    pattern = np.zeros((len(buses), net.n_buses))
    for r, b in enumerate(buses):
        pattern[r, pos[b]] = 1.0
    fixed = -cons_floor * CONSUMPTION_PHASOR * net.peak
    fixed[0] = 0.0
    return pattern, fixed


def relative_gap_bound(val_restricted_soc: float | None, val_soc: float, tol: float = 1e-8) -> float:
    """Relative bound ``2 (val' - val) / (|val| + |val'|)`` on the relaxation gap.

    Returns ``inf`` when the restricted problem is infeasible (``None`` or
    ``inf``).  Differences below ``tol`` (relative) are clamped to zero; a
    larger negative difference raises :class:`GapOrderError`.  Two zero
    values give zero.
    """
    if val_restricted_soc is None or val_restricted_soc == math.inf:
        return math.inf
    a, b = float(val_restricted_soc), float(val_soc)
    denom = abs(a) + abs(b)
    if denom == 0.0:
        return 0.0
    eps = 2.0 * (a - b) / denom
    if eps < 0:
        if -eps <= 2.0 * tol:
            return 0.0
        raise GapOrderError(f"restricted value {a!r} lies below the relaxed value {b!r}")
    return eps


def gap_certificate(val_restricted_soc: float | None, val_soc: float, tol: float = 1e-8) -> Certificate:
    eps = relative_gap_bound(val_restricted_soc, val_soc, tol)
    notes = []
    if val_restricted_soc is None or val_restricted_soc == math.inf:
        notes.append("restricted relaxation infeasible; no statement on the exact gap")
    elif val_restricted_soc == 0 and val_soc == 0:
        notes.append("both values are zero; bound set to 0 by convention")
    return Certificate("a_posteriori", "threshold", threshold=eps,
                       provenance={"val_restricted_soc": val_restricted_soc, "val_soc": val_soc},
                       inputs_digest=digest(np.array([val_soc, math.inf if val_restricted_soc is None
                                                      else val_restricted_soc])),
                       notes=notes)
