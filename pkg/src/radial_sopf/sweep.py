"""Forward-backward sweep and the fixed-point recovery of exact power flows."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .conic import check_residuals
from .errors import MonotonicityViolation, NoConvergence, NonpositiveVoltage, NotFeasibleInput
from .program import (
    Instance,
    OperatingPoint,
    build_program,
    evaluate_cost,
    pack,
    split_import,
)

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-7
MONOTONE_ABORT = 1e-8


@dataclass
class IterationRecord:
    iter: int
    max_dI: float  # largest increase of I (should be <= 0)
    max_dv: float  # largest decrease of v (should be <= 0)
    max_dS: float  # largest decrease of Re S or Im S (should be <= 0)
    max_dabsS: float  # largest increase of |S|
    max_ds0: float  # largest increase of Re s0 or Im s0
    change: float
    residual: float  # max |v I - |S|^2|
    feasibility: float = float("nan")

    @property
    def worst_monotone(self) -> float:
        return max(self.max_dI, self.max_dv, self.max_dS, self.max_dabsS, self.max_ds0)


@dataclass
class SweepState:
    """Quantities transformed by the pass, per tree node: ``s0`` is ``(K,)``,
    the others ``(K, n)`` with the slack in column 0.  ``s`` (the bus
    injections) is carried along unchanged."""

    s: np.ndarray
    s0: np.ndarray
    S: np.ndarray
    I: np.ndarray
    v: np.ndarray
    iteration: int = 0
    log: list[IterationRecord] = field(default_factory=list)

    @classmethod
    def from_point(cls, point: OperatingPoint) -> "SweepState":
        return cls(point.s.copy(), point.s0.copy(), point.S.copy(), point.I.copy(), point.v.copy())


def forward_backward_pass(inst: Instance, state: SweepState) -> SweepState:
    """One application of the sweep to every tree node at once.

    Backward over buses ``n-1..1``: ``S' = s + sum_children (S' - z I')`` and
    ``I' = |S'|^2 / v`` with the input ``v``.  Then the slack balance gives
    ``s0'``, and a forward pass rebuilds ``v'`` from ``v'_0 = 1``.
    """
    net = inst.net
    n = net.n_buses
    par = net.parent
    z = net.z
    if np.any(state.v[:, 1:] <= 0):
        raise NonpositiveVoltage("sweep input has a nonpositive voltage")
    S = np.zeros_like(state.S)
    I = np.zeros_like(state.I)
    acc = np.array(state.s, dtype=complex, copy=True)  # s_i + sum over processed children
    acc[:, 0] = 0.0
    for i in range(n - 1, 0, -1):
        S[:, i] = acc[:, i]
        I[:, i] = (S[:, i].real ** 2 + S[:, i].imag ** 2) / state.v[:, i]
        acc[:, par[i]] += S[:, i] - z[i] * I[:, i]
    s0 = -acc[:, 0]
    v = np.ones_like(state.v)
    t2 = net.tap_sq_parent
    for i in range(1, n):
        v[:, i] = t2[i] * v[:, par[i]] + 2.0 * (z[i].conjugate() * S[:, i]).real - abs(z[i]) ** 2 * I[:, i]
    return SweepState(state.s, s0, S, I, v, state.iteration + 1, state.log)


def _record(k: int, old: SweepState, new: SweepState) -> IterationRecord:
    cols = slice(1, None)
    dS = old.S[:, cols] - new.S[:, cols]
    ds0 = new.s0 - old.s0
    change = max(
        np.abs(dS.real).max(initial=0.0), np.abs(dS.imag).max(initial=0.0),
        np.abs(new.I - old.I).max(initial=0.0), np.abs(new.v - old.v).max(initial=0.0),
        np.abs(ds0.real).max(initial=0.0), np.abs(ds0.imag).max(initial=0.0),
    )
    return IterationRecord(
        iter=k,
        max_dI=float((new.I - old.I)[:, cols].max(initial=-np.inf)),
        max_dv=float((old.v - new.v)[:, cols].max(initial=-np.inf)),
        max_dS=float(max(dS.real.max(initial=-np.inf), dS.imag.max(initial=-np.inf))),
        max_dabsS=float((np.abs(new.S) - np.abs(old.S))[:, cols].max(initial=-np.inf)),
        max_ds0=float(max(ds0.real.max(initial=-np.inf), ds0.imag.max(initial=-np.inf))),
        change=float(change),
        residual=cone_gap(new),
    )


def cone_gap(state) -> float:
    """max over lines and nodes of ``|v I - |S|^2|``."""
    g = state.v[:, 1:] * state.I[:, 1:] - np.abs(state.S[:, 1:]) ** 2
    return float(np.abs(g).max(initial=0.0))


@dataclass
class RecoveryResult:
    point: OperatingPoint
    state: SweepState
    heuristic: bool

    @property
    def iterations(self) -> int:
        return self.state.iteration

    @property
    def log(self) -> list[IterationRecord]:
        return self.state.log


def _start_program(inst: Instance, start: OperatingPoint):
    restricted = inst.options.restricted or start.S_lin is not None
    target = inst.with_options(restricted=restricted)
    prog, idx = build_program(target)
    return restricted, prog, idx


def recover(inst: Instance, start: OperatingPoint, tol: float = 1e-10, max_iter: int = 500,
            check_each_iter: bool = False, feasibility_tol: float = FEASIBILITY_TOL) -> RecoveryResult:
    """Iterate the sweep from a feasible point of the restricted relaxation.

    Without a linear block on ``start`` (and an unrestricted instance) the
    run is heuristic: monotonicity is logged but does not abort.
    """
    if not 0 < tol <= 1e-4:
        raise ValueError("tol must lie in (0, 1e-4]")
    restricted, prog, idx = _start_program(inst, start)
    heuristic = not restricted
    feas = check_residuals(prog, pack(idx, split_import(start)))["max"]
    if feas > feasibility_tol:
        raise NotFeasibleInput(f"start violates the {'restricted ' if restricted else ''}relaxation by {feas:.3e}")
    state = SweepState.from_point(start)
    while True:
        new = forward_backward_pass(inst, state)
        rec = _record(new.iteration, state, new)
        if check_each_iter:
            rec.feasibility = check_residuals(prog, pack(idx, _point_from(start, new)))["max"]
        new.log.append(rec)
        if not heuristic and rec.worst_monotone > MONOTONE_ABORT:
            raise MonotonicityViolation(
                f"iteration {rec.iter}: monotone sequences violated by {rec.worst_monotone:.3e}", new.log)
        state = new
        if rec.change < tol:
            break
        if state.iteration >= max_iter:
            raise NoConvergence(f"no convergence after {max_iter} sweeps (last change {rec.change:.3e})", state)
    log.debug("sweep converged in %d iterations", state.iteration)
    point = _point_from(start, state)
    point.objective = evaluate_cost(inst, point)
    return RecoveryResult(point, state, heuristic)


def _point_from(start: OperatingPoint, state: SweepState) -> OperatingPoint:
    out = start.copy()
    out.s0, out.S, out.I, out.v = state.s0.copy(), state.S.copy(), state.I.copy(), state.v.copy()
    return split_import(out)


def recover_feasible_point(inst: Instance, start: OperatingPoint, tol: float = 1e-10,
                           max_iter: int = 500, **kw) -> OperatingPoint:
    """Exact-physics point with cost no larger than the start's (see :func:`recover`)."""
    return recover(inst, start, tol, max_iter, **kw).point


def write_iteration_log(records: list[IterationRecord], fh=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "max_dI", "max_dv", "max_dS", "residual"])
    for r in records:
        w.writerow([r.iter, repr(r.max_dI), repr(r.max_dv), repr(r.max_dS), repr(r.residual)])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text
