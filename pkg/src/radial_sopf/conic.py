"""Solver-agnostic conic programs and the solving contract.

A :class:`ConicProgram` reads

    minimize    c @ x + c0
    subject to  G @ x + h  in  K_1 x K_2 x ... (row blocks, in order)

with block kinds

* ``zero``    : the rows equal 0,
* ``nonneg``  : the rows are >= 0,
* ``soc``     : (t, w) with t >= ||w||,
* ``rsoc``    : (u1, u2, w) with 2 u1 u2 >= ||w||^2, u1, u2 >= 0.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BackendUnavailable, DimensionError, ParseError

CONE_KINDS = ("zero", "nonneg", "soc", "rsoc")
STATUSES = ("optimal", "infeasible", "unbounded", "numerical_limit")
DEFAULT_TOL = 1e-8
INNER_TOL_FACTOR = 0.1


@dataclass(frozen=True)
class ConicProgram:
    n_vars: int
    c: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    cones: tuple[tuple[str, int], ...]
    c0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))
        object.__setattr__(self, "G", sp.csr_matrix(self.G))
        object.__setattr__(self, "cones", tuple((str(k), int(d)) for k, d in self.cones))
        if self.c.shape != (self.n_vars,):
            raise DimensionError(f"objective has {self.c.size} entries for {self.n_vars} variables")
        if self.G.shape != (self.h.size, self.n_vars):
            raise DimensionError(f"constraint matrix {self.G.shape} does not match h ({self.h.size}) "
                                 f"and n_vars ({self.n_vars})")
        total = 0
        for kind, dim in self.cones:
            if kind not in CONE_KINDS:
                raise DimensionError(f"unknown cone kind {kind!r}")
            if dim < {"zero": 0, "nonneg": 0, "soc": 1, "rsoc": 2}[kind]:
                raise DimensionError(f"{kind} block of dimension {dim}")
            total += dim
        if total != self.h.size:
            raise DimensionError(f"cone blocks cover {total} rows, program has {self.h.size}")

    @property
    def n_rows(self) -> int:
        return self.h.size

    def blocks(self):
        """Yield ``(kind, start, stop)`` row ranges."""
        start = 0
        for kind, dim in self.cones:
            yield kind, start, start + dim
            start += dim


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray | None
    objective: float
    dual_objective: float | None = None
    residuals: dict[str, float] = field(default_factory=dict)
    solve_time: float = 0.0
    backend: str = ""
    iterations: int = 0


class _Builder:
    """Incremental assembly of cone blocks from sparse triplets."""

    def __init__(self, n_vars: int):
        self.n_vars = n_vars
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.h: list[np.ndarray] = []
        self.cones: list[tuple[str, int]] = []
        self.n_rows = 0

    def add(self, kind: str, rows, cols, vals, h, dim: int | None = None):
        """Append a block; ``rows`` are local (0..dim-1) row indices."""
        h = np.atleast_1d(np.asarray(h, dtype=float))
        dim = h.size if dim is None else dim
        if dim == 0:
            return
        self.rows.append(np.asarray(rows, dtype=np.int64) + self.n_rows)
        self.cols.append(np.asarray(cols, dtype=np.int64))
        self.vals.append(np.asarray(vals, dtype=float))
        self.h.append(h)
        if self.cones and self.cones[-1][0] == kind and kind in ("zero", "nonneg"):
            self.cones[-1] = (kind, self.cones[-1][1] + dim)
        else:
            self.cones.append((kind, dim))
        self.n_rows += dim

    def build(self, c, c0=0.0) -> ConicProgram:
        if self.rows:
            r, cidx, v = (np.concatenate(a) for a in (self.rows, self.cols, self.vals))
            h = np.concatenate(self.h)
        else:
            r = cidx = np.zeros(0, dtype=np.int64)
            v = h = np.zeros(0)
        G = sp.csr_matrix((v, (r, cidx)), shape=(self.n_rows, self.n_vars))
        G.sum_duplicates()
        return ConicProgram(self.n_vars, np.asarray(c, dtype=float), G, h, tuple(self.cones), float(c0))


def check_residuals(p: ConicProgram, x) -> dict[str, float]:
    """Maximum cone violation of ``G x + h`` per block kind, plus ``max``.

    Second-order violations are measured as ``||w|| - t`` (rotated blocks in
    their equivalent standard form).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n_vars,):
        raise DimensionError(f"point has {x.size} entries, program has {p.n_vars} variables")
    y = p.G @ x + p.h
    out = {k: 0.0 for k in CONE_KINDS}
    for kind, a, b in p.blocks():
        blk = y[a:b]
        if kind == "zero":
            viol = float(np.max(np.abs(blk))) if blk.size else 0.0
        elif kind == "nonneg":
            viol = float(max(0.0, -blk.min())) if blk.size else 0.0
        elif kind == "soc":
            viol = max(0.0, float(np.linalg.norm(blk[1:]) - blk[0]))
        else:
            t = (blk[0] + blk[1]) / math.sqrt(2)
            w = np.concatenate([[(blk[0] - blk[1]) / math.sqrt(2)], blk[2:]])
            viol = max(0.0, float(np.linalg.norm(w) - t))
        out[kind] = max(out[kind], viol)
    out["max"] = max(out.values())
    return out


def block_violations(p: ConicProgram, x) -> list[tuple[str, int, float]]:
    """Per-block ``(kind, first_row, violation)`` list; used by audits."""
    x = np.asarray(x, dtype=float)
    y = p.G @ x + p.h
    out = []
    for kind, a, b in p.blocks():
        sub = ConicProgram(0, np.zeros(0), sp.csr_matrix((b - a, 0)), y[a:b], ((kind, b - a),))
        out.append((kind, a, check_residuals(sub, np.zeros(0))["max"]))
    return out


def _rsoc_to_soc(p: ConicProgram) -> tuple[sp.csr_matrix, np.ndarray, list[tuple[str, int]]]:
    """Rewrite rotated blocks as standard second-order blocks (row transform)."""
    n = p.n_rows
    T = sp.lil_matrix((n, n))
    cones = []
    s2 = 1 / math.sqrt(2)
    for kind, a, b in p.blocks():
        if kind == "rsoc":
            T[a, a] = s2
            T[a, a + 1] = s2
            T[a + 1, a] = s2
            T[a + 1, a + 1] = -s2
            for r in range(a + 2, b):
                T[r, r] = 1.0
            cones.append(("soc", b - a))
        else:
            for r in range(a, b):
                T[r, r] = 1.0
            cones.append((kind, b - a))
    T = T.tocsr()
    return (T @ p.G).tocsr(), T @ p.h, cones


def _finish(p: ConicProgram, status: str, x, obj, dual_obj, tol, t0, backend, iters) -> ConicSolution:
    """Settle ``optimal`` versus ``numerical_limit`` on the backend-independent
    residuals: primal and cone violation within ``tol * max(1, ||h||_inf)`` and
    a duality gap within ``tol * max(1, |obj|)``."""
    residuals = {}
    if x is not None:
        residuals = check_residuals(p, x)
        if dual_obj is not None:
            residuals["gap"] = abs(obj - dual_obj)
        scale = max(1.0, float(np.max(np.abs(p.h))) if p.h.size else 1.0)
        if status in ("optimal", "numerical_limit"):
            ok = residuals["max"] <= tol * scale and residuals.get("gap", 0.0) <= tol * max(1.0, abs(obj))
            status = "optimal" if ok else "numerical_limit"
    return ConicSolution(status, x, obj, dual_obj, residuals, time.perf_counter() - t0, backend, iters)


def _clarabel_once(clarabel, p: ConicProgram, G, h, cones, tol: float, equilibrate: bool) -> ConicSolution:
    t0 = time.perf_counter()
    cl_cones = []
    for kind, dim in cones:
        if dim == 0:
            continue
        if kind == "zero":
            cl_cones.append(clarabel.ZeroConeT(dim))
        elif kind == "nonneg":
            cl_cones.append(clarabel.NonnegativeConeT(dim))
        else:
            cl_cones.append(clarabel.SecondOrderConeT(dim))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    # the backend measures residuals in its own scaling; aim below the
    # unscaled contract checked in _finish
    inner = tol * INNER_TOL_FACTOR
    settings.tol_gap_abs = inner
    settings.tol_gap_rel = inner
    settings.tol_feas = inner
    settings.tol_ktratio = min(1e-6, inner * 1e2)
    settings.equilibrate_enable = equilibrate
    settings.max_iter = 400
    P = sp.csc_matrix((p.n_vars, p.n_vars))
    solver = clarabel.DefaultSolver(P, p.c, (-G).tocsc(), h, cl_cones, settings)
    sol = solver.solve()
    name = str(sol.status).split(".")[-1]
    x = np.array(sol.x)
    if name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return ConicSolution("infeasible", None, math.inf, None, {}, time.perf_counter() - t0, "clarabel",
                             sol.iterations)
    if name in ("DualInfeasible", "AlmostDualInfeasible"):
        return ConicSolution("unbounded", None, -math.inf, None, {}, time.perf_counter() - t0, "clarabel",
                             sol.iterations)
    if x.size != p.n_vars:
        return ConicSolution("numerical_limit", None, math.nan, None, {}, time.perf_counter() - t0, "clarabel",
                             sol.iterations)
    status = "optimal" if name in ("Solved", "AlmostSolved") else "numerical_limit"
    return _finish(p, status, x, sol.obj_val + p.c0, sol.obj_val_dual + p.c0, tol, t0, "clarabel",
                   sol.iterations)


def _solve_clarabel(p: ConicProgram, tol: float) -> ConicSolution:
    try:
        import clarabel
    except ImportError as exc:  # pragma: no cover - declared dependency
        raise BackendUnavailable("clarabel is not installed") from exc
    G, h, cones = _rsoc_to_soc(p)
    sol = _clarabel_once(clarabel, p, G, h, cones, tol, equilibrate=True)
    if sol.status == "numerical_limit":
        # equilibration occasionally stalls short of the contract on badly
        # scaled cones; the unscaled run is the deterministic fallback
        alt = _clarabel_once(clarabel, p, G, h, cones, tol, equilibrate=False)
        if alt.status != "numerical_limit" or alt.residuals.get("max", math.inf) < sol.residuals.get("max", math.inf):
            sol = alt
    return sol


def _solve_cvxopt(p: ConicProgram, tol: float) -> ConicSolution:
    try:
        import cvxopt
        from cvxopt import solvers
    except ImportError as exc:
        raise BackendUnavailable("cvxopt is not installed") from exc
    t0 = time.perf_counter()
    G, h, cones = _rsoc_to_soc(p)
    # cvxopt wants equalities apart and inequality blocks ordered: nonneg first, then soc
    eq, lin, socs = [], [], []
    start = 0
    for kind, dim in cones:
        rows = list(range(start, start + dim))
        {"zero": eq, "nonneg": lin, "soc": socs}[kind].append(rows)
        start += dim
    eq_rows = [r for blk in eq for r in blk]
    ineq_rows = [r for blk in lin for r in blk] + [r for blk in socs for r in blk]

    def spm(M):
        M = M.tocoo()
        return cvxopt.spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), M.shape)

    # s = h + G x in K  <=>  (-G) x + s = h
    Gi = spm(-G[ineq_rows]) if ineq_rows else cvxopt.spmatrix([], [], [], (0, p.n_vars))
    hi = cvxopt.matrix(h[ineq_rows] if ineq_rows else np.zeros(0))
    dims = {"l": sum(len(b) for b in lin), "q": [len(b) for b in socs], "s": []}
    kwargs = {}
    if eq_rows:
        kwargs["A"] = spm(-G[eq_rows])
        kwargs["b"] = cvxopt.matrix(h[eq_rows])
    opts = {"show_progress": False, "abstol": tol, "reltol": tol, "feastol": tol, "maxiters": 200}
    res = solvers.conelp(cvxopt.matrix(p.c), Gi, hi, dims, options=opts, **kwargs)
    status = {"optimal": "optimal", "primal infeasible": "infeasible",
              "dual infeasible": "unbounded"}.get(res["status"], "numerical_limit")
    if status in ("infeasible", "unbounded"):
        return ConicSolution(status, None, math.inf if status == "infeasible" else -math.inf, None, {},
                             time.perf_counter() - t0, "cvxopt", res.get("iterations", 0))
    x = np.array(res["x"]).ravel() if res["x"] is not None else None
    obj = float(p.c @ x) + p.c0 if x is not None else math.nan
    dual = res.get("dual objective")
    return _finish(p, status, x, obj, None if dual is None else float(dual) + p.c0, tol, t0, "cvxopt",
                   res.get("iterations", 0))


BACKENDS = {"clarabel": _solve_clarabel, "cvxopt": _solve_cvxopt}


def solve_conic(p: ConicProgram, tol: float = DEFAULT_TOL, backend: str = "clarabel") -> ConicSolution:
    """Solve ``p``; ``optimal`` is only reported when residuals meet ``tol``
    (scaled by ``max(1, ||h||_inf)``)."""
    if not 0 < tol <= 1e-2:
        raise ValueError("tol must lie in (0, 1e-2]")
    if backend not in BACKENDS:
        raise BackendUnavailable(f"unknown backend {backend!r}; choose from {sorted(BACKENDS)}")
    if p.n_vars == 0:
        raise DimensionError("program has no variables")
    return BACKENDS[backend](p, tol)


# ---------------------------------------------------------------------------
# sparse text format
# ---------------------------------------------------------------------------


def write_program(p: ConicProgram, fh=None) -> str:
    """Serialize ``p`` as text.  Layout::

        conic v1
        n_vars <n> n_rows <m> c0 <c0>
        cones <kind>:<dim> ...
        c <nnz>          then 'col value' lines
        G <nnz>          then 'row col value' lines
        h <nnz>          then 'row value' lines
    """
    buf = io.StringIO()
    buf.write("conic v1\n")
    buf.write(f"n_vars {p.n_vars} n_rows {p.n_rows} c0 {p.c0!r}\n")
    buf.write("cones " + " ".join(f"{k}:{d}" for k, d in p.cones) + "\n")
    nz = np.flatnonzero(p.c)
    buf.write(f"c {nz.size}\n")
    for j in nz:
        buf.write(f"{j} {float(p.c[j])!r}\n")
    G = p.G.tocoo()
    order = np.lexsort((G.col, G.row))
    buf.write(f"G {G.nnz}\n")
    for k in order:
        buf.write(f"{G.row[k]} {G.col[k]} {float(G.data[k])!r}\n")
    nz = np.flatnonzero(p.h)
    buf.write(f"h {nz.size}\n")
    for i in nz:
        buf.write(f"{i} {float(p.h[i])!r}\n")
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def read_program(text: str) -> ConicProgram:
    lines = iter(text.splitlines())
    try:
        if next(lines).strip() != "conic v1":
            raise ParseError("missing 'conic v1' header")
        head = next(lines).split()
        n, m, c0 = int(head[1]), int(head[3]), float(head[5])
        cones = tuple((k, int(d)) for k, d in (tok.split(":") for tok in next(lines).split()[1:]))
        c = np.zeros(n)
        for _ in range(int(next(lines).split()[1])):
            j, v = next(lines).split()
            c[int(j)] = float(v)
        nnz = int(next(lines).split()[1])
        rows, cols, vals = np.zeros(nnz, int), np.zeros(nnz, int), np.zeros(nnz)
        for k in range(nnz):
            r, j, v = next(lines).split()
            rows[k], cols[k], vals[k] = int(r), int(j), float(v)
        h = np.zeros(m)
        for _ in range(int(next(lines).split()[1])):
            i, v = next(lines).split()
            h[int(i)] = float(v)
    except (StopIteration, ValueError, IndexError) as exc:
        raise ParseError(f"malformed conic program text: {exc}") from exc
    return ConicProgram(n, c, sp.csr_matrix((vals, (rows, cols)), shape=(m, n)), h, cones, c0)

