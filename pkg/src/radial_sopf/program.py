"""Assembly of the relaxed and restricted conic programs over tree nodes."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .conic import ConicProgram, _Builder
from .errors import DomainError, InconsistentInstance, LengthMismatch
from .network import RadialNetwork, linear_flow, relabel_by_depth, subtree_lines
from .scenario import DemandLattice, PathForest, ScenarioTree, TimeGrid, residual_demand

NODE_KINDS = ("s0_re", "s0_im", "p0_plus", "p0_minus")
BUS_KINDS = ("p_inj", "p_abs", "q", "X", "P", "Q", "I", "v")
LIN_NODE_KINDS = ("s0_lin_re", "s0_lin_im")
LIN_BUS_KINDS = ("P_lin", "Q_lin", "v_lin")


@dataclass(frozen=True)
class CostSpec:
    """Expected cost: import/export of the slack, Joule losses, storage
    throughput and optional per-bus linear terms, all per hour."""

    c0_plus: float = 1.0
    c0_minus: float = 0.5
    c_loss: float = 2.0
    c_bat: float = 0.0
    lin_p_inj: float | tuple[float, ...] = 0.0
    lin_p_abs: float | tuple[float, ...] = 0.0
    lin_q: float | tuple[float, ...] = 0.0
    lin_x: float | tuple[float, ...] = 0.0

    def __post_init__(self):
        if not self.c0_plus >= self.c0_minus >= 0:
            raise DomainError("costs need c0_plus >= c0_minus >= 0")
        if self.c_loss < 0 or self.c_bat < 0:
            raise DomainError("c_loss and c_bat must be nonnegative")

    def linear(self, name: str, n: int) -> np.ndarray:
        val = np.broadcast_to(np.asarray(getattr(self, f"lin_{name}"), dtype=float), (n,)).copy()
        val[0] = 0.0
        return val


@dataclass(frozen=True)
class Options:
    restricted: bool = False
    periodic_storage: bool = False
    subtree_includes_outgoing: bool = False


@dataclass(frozen=True)
class Instance:
    """Network, tree (or its path expansion), grid, demand, cost and flags.

    The network must be depth ordered; ``demand`` arrays are ``(K, n)``.
    """

    net: RadialNetwork
    tree: ScenarioTree | PathForest
    grid: TimeGrid
    demand: DemandLattice
    cost: CostSpec = field(default_factory=CostSpec)
    options: Options = field(default_factory=Options)

    def __post_init__(self):
        if not self.net.is_depth_ordered:
            raise InconsistentInstance("network must be relabeled by depth before building an instance")
        shape = (self.tree.n_nodes, self.net.n_buses)
        if self.demand.sd.shape != shape:
            raise InconsistentInstance(f"demand has shape {self.demand.sd.shape}, expected {shape}")
        if int(np.max(self.tree.stage)) >= self.grid.n_stages:
            raise InconsistentInstance("tree has more stages than the time grid")

    @property
    def K(self) -> int:
        return self.tree.n_nodes

    @property
    def n(self) -> int:
        return self.net.n_buses

    @cached_property
    def node_delta(self) -> np.ndarray:
        return self.grid.deltas[np.asarray(self.tree.stage)]

    @cached_property
    def leaves(self) -> list[int]:
        return list(self.tree.leaves)

    def with_options(self, **kw) -> "Instance":
        return replace(self, options=replace(self.options, **kw))


def make_instance(net: RadialNetwork, tree, grid: TimeGrid, profile, cost: CostSpec | None = None,
                  **options) -> Instance:
    """Relabel ``net`` by depth, compute the demand lattice and bundle an instance."""
    if not (net.is_depth_ordered and net.original_ids is not None):
        net = relabel_by_depth(net)
    demand = residual_demand(net, tree, grid, profile)
    return Instance(net, tree, grid, demand, cost or CostSpec(), Options(**options))


@dataclass(frozen=True)
class VariableIndex:
    """Column of every variable; ``-1`` where a quantity has no variable
    (the slack column of per-bus kinds, or Lin kinds when unrestricted)."""

    inst: Instance
    cols: dict[str, np.ndarray]
    n_vars: int

    def __getitem__(self, kind: str) -> np.ndarray:
        return self.cols[kind]

    @property
    def restricted(self) -> bool:
        return "P_lin" in self.cols

    def kinds(self) -> tuple[str, ...]:
        return tuple(self.cols)


def build_index(inst: Instance) -> VariableIndex:
    K, n = inst.K, inst.n
    cols: dict[str, np.ndarray] = {}
    nxt = 0
    node_kinds = NODE_KINDS + (LIN_NODE_KINDS if inst.options.restricted else ())
    bus_kinds = BUS_KINDS + (LIN_BUS_KINDS if inst.options.restricted else ())
    for kind in node_kinds:
        cols[kind] = np.arange(nxt, nxt + K)
        nxt += K
    for kind in bus_kinds:
        a = np.full((K, n), -1, dtype=np.int64)
        a[:, 1:] = np.arange(nxt, nxt + K * (n - 1)).reshape(K, n - 1)
        cols[kind] = a
        nxt += K * (n - 1)
    return VariableIndex(inst, cols, nxt)


@dataclass
class OperatingPoint:
    """Per-node values; per-bus arrays are ``(K, n)`` with the slack in column 0.

    ``X[m, i]`` is the state of charge at the end of node ``m``'s stage.
    """

    s0: np.ndarray
    s: np.ndarray
    p_inj: np.ndarray
    p_abs: np.ndarray
    q: np.ndarray
    X: np.ndarray
    S: np.ndarray
    I: np.ndarray
    v: np.ndarray
    p0_plus: np.ndarray
    p0_minus: np.ndarray
    S_lin: np.ndarray | None = None
    v_lin: np.ndarray | None = None
    s0_lin: np.ndarray | None = None
    objective: float = float("nan")

    def copy(self) -> "OperatingPoint":
        return OperatingPoint(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()})


def injections(inst: Instance, p_inj, p_abs, q) -> np.ndarray:
    s = p_inj - p_abs + 1j * q - inst.demand.sd
    s[:, 0] = 0.0
    return s


def evaluate_cost(inst: Instance, point: OperatingPoint) -> float:
    """Expected cost of ``point`` using the positive and negative parts of Re s0."""
    c = inst.cost
    n = inst.n
    p0 = point.s0.real
    w = np.asarray(inst.tree.weight) * inst.node_delta
    net = inst.net
    per_node = (
        c.c0_plus * np.maximum(p0, 0.0)
        - c.c0_minus * np.maximum(-p0, 0.0)
        + c.c_loss * (point.I[:, 1:] @ net.r[1:])
        + c.c_bat * (point.p_inj[:, 1:] + point.p_abs[:, 1:]).sum(axis=1)
        + point.p_inj @ c.linear("p_inj", n)
        + point.p_abs @ c.linear("p_abs", n)
        + point.q @ c.linear("q", n)
        + point.X @ c.linear("x", n)
    )
    return float(w @ per_node)


def _objective_vector(inst: Instance, idx: VariableIndex) -> np.ndarray:
    c = np.zeros(idx.n_vars)
    cs = inst.cost
    n = inst.n
    w = np.asarray(inst.tree.weight) * inst.node_delta
    c[idx["p0_plus"]] += w * cs.c0_plus
    c[idx["p0_minus"]] -= w * cs.c0_minus
    wb = w[:, None]
    c[idx["I"][:, 1:]] += wb * cs.c_loss * inst.net.r[None, 1:]
    for kind, name in (("p_inj", "p_inj"), ("p_abs", "p_abs"), ("q", "q"), ("X", "x")):
        coef = cs.linear(name, n)[None, 1:]
        if kind in ("p_inj", "p_abs"):
            coef = coef + cs.c_bat
        c[idx[kind][:, 1:]] += wb * coef
    return c


class _Rows:
    """Triplets of one constraint family; rows are local to the family."""

    def __init__(self, n_rows: int):
        self.n_rows = n_rows
        self.r: list[np.ndarray] = []
        self.c: list[np.ndarray] = []
        self.v: list[np.ndarray] = []
        self.h = np.zeros(n_rows)

    def term(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        keep = (cols >= 0) & (vals != 0)
        self.r.append(rows[keep].ravel())
        self.c.append(cols[keep].ravel())
        self.v.append(vals[keep].ravel())

    def emit(self, builder: _Builder, kind: str):
        if self.n_rows == 0:
            return
        r = np.concatenate(self.r) if self.r else np.zeros(0, int)
        c = np.concatenate(self.c) if self.c else np.zeros(0, int)
        v = np.concatenate(self.v) if self.v else np.zeros(0)
        builder.add(kind, r, c, v, self.h, self.n_rows)


@dataclass
class ProgramLayout:
    """Row ranges of each named constraint family (for audits and tests)."""

    families: list[tuple[str, str, int, int]] = field(default_factory=list)

    def add(self, name: str, kind: str, start: int, stop: int):
        if stop > start:
            self.families.append((name, kind, start, stop))

    def count(self, name: str) -> int:
        return sum(b - a for nm, _, a, b in self.families if nm == name)


def _storage_start(inst: Instance, idx: VariableIndex):
    """Column of the state at the start of each node's stage, or -1 with the
    constant initial state at root nodes."""
    parent = np.asarray(inst.tree.parent)
    x_init = inst.net.storage_field("x_init")
    K, n = inst.K, inst.n
    cols = np.full((K, n), -1, dtype=np.int64)
    const = np.zeros((K, n))
    has_parent = parent >= 0
    cols[has_parent] = idx["X"][parent[has_parent]]
    const[~has_parent] = x_init[None, :]
    cols[:, 0] = -1
    const[:, 0] = 0.0
    return cols, const


def _balance(rows: _Rows, inst: Instance, idx: VariableIndex, Pk, Qk, with_losses: bool, imag: bool):
    """Branch power balance rows for every (node, non-slack bus)."""
    K, n = inst.K, inst.n
    net = inst.net
    m = np.arange(K)[:, None]
    bus = np.arange(1, n)[None, :]
    local = m * (n - 1) + (bus - 1)
    flow = idx[Qk if imag else Pk]
    rows.term(local, flow[:, 1:], 1.0)
    par = net.parent
    kids = np.array([k for k in range(1, n) if par[k] > 0], dtype=int)
    if kids.size:
        krow = m * (n - 1) + (par[kids][None, :] - 1)
        rows.term(krow, flow[:, kids], -1.0)
        if with_losses:
            coef = (net.x if imag else net.r)[kids][None, :]
            rows.term(krow, idx["I"][:, kids], coef)
    if imag:
        rows.term(local, idx["q"][:, 1:], -1.0)
        rows.h[:] = inst.demand.sd[:, 1:].imag.ravel()
    else:
        rows.term(local, idx["p_inj"][:, 1:], -1.0)
        rows.term(local, idx["p_abs"][:, 1:], 1.0)
        rows.h[:] = inst.demand.sd[:, 1:].real.ravel()


def _slack(rows: _Rows, inst: Instance, idx: VariableIndex, Pk, Qk, s0k, with_losses: bool, imag: bool):
    net = inst.net
    m = np.arange(inst.K)[:, None]
    kids = np.array([k for k in range(1, inst.n) if net.parent[k] == 0], dtype=int)
    rows.term(m, idx[Qk if imag else Pk][:, kids], 1.0)
    if with_losses:
        rows.term(m, idx["I"][:, kids], -(net.x if imag else net.r)[kids][None, :])
    rows.term(m[:, 0], idx[s0k], 1.0)


def _propagation(rows: _Rows, inst: Instance, idx: VariableIndex, Pk, Qk, vk, with_losses: bool):
    K, n = inst.K, inst.n
    net = inst.net
    m = np.arange(K)[:, None]
    bus = np.arange(1, n)
    local = m * (n - 1) + (bus[None, :] - 1)
    v = idx[vk]
    t2 = net.tap_sq_parent
    par = net.parent
    rows.term(local, v[:, 1:], 1.0)
    rows.term(local, v[:, par[1:]], -t2[None, 1:])  # slack column is -1 and dropped
    rows.term(local, idx[Pk][:, 1:], -2.0 * net.r[None, 1:])
    rows.term(local, idx[Qk][:, 1:], -2.0 * net.x[None, 1:])
    if with_losses:
        rows.term(local, idx["I"][:, 1:], (np.abs(net.z) ** 2)[None, 1:])
    h = np.zeros((K, n - 1))
    h[:, par[1:] == 0] = -t2[1:][par[1:] == 0]
    rows.h[:] = h.ravel()


def build_program(inst: Instance) -> tuple[ConicProgram, VariableIndex]:
    prog, idx, _ = build_program_with_layout(inst)
    return prog, idx


def build_program_with_layout(inst: Instance) -> tuple[ConicProgram, VariableIndex, ProgramLayout]:
    """Assemble the relaxed (or, with ``options.restricted``, the restricted) program.

    Rows are emitted family by family: equalities, then inequalities, then
    one second-order block per (line, node) flow limit, then one rotated
    block ``(v/2, I, P, Q)`` per (line, node) so that ``v I >= P^2 + Q^2``.
    """
    idx = build_index(inst)
    K, n = inst.K, inst.n
    net = inst.net
    B = _Builder(idx.n_vars)
    layout = ProgramLayout()
    nb = K * (n - 1)
    m = np.arange(K)
    mb = m[:, None] * (n - 1) + np.arange(n - 1)[None, :]

    def emit(name, rows, kind):
        start = B.n_rows
        rows.emit(B, kind)
        layout.add(name, kind, start, B.n_rows)

    # ---- equalities --------------------------------------------------------
    for imag, name in ((False, "balance_re"), (True, "balance_im")):
        r = _Rows(nb)
        _balance(r, inst, idx, "P", "Q", True, imag)
        emit(name, r, "zero")
    for imag, name in ((False, "slack_re"), (True, "slack_im")):
        r = _Rows(K)
        _slack(r, inst, idx, "P", "Q", "s0_im" if imag else "s0_re", True, imag)
        emit(name, r, "zero")
    r = _Rows(nb)
    _propagation(r, inst, idx, "P", "Q", "v", True)
    emit("propagation", r, "zero")

    r = _Rows(K)
    r.term(m, idx["s0_re"], 1.0)
    r.term(m, idx["p0_plus"], -1.0)
    r.term(m, idx["p0_minus"], 1.0)
    emit("import_split", r, "zero")

    # storage dynamics: X_end - X_start - dt (rho_abs p_abs - rho_inj p_inj) = 0
    start_cols, start_const = _storage_start(inst, idx)
    dt = inst.node_delta[:, None]
    rho_a = net.storage_field("eff_abs")[None, 1:]
    rho_i = net.storage_field("eff_inj")[None, 1:]
    r = _Rows(nb)
    r.term(mb, idx["X"][:, 1:], 1.0)
    r.term(mb, start_cols[:, 1:], -1.0)
    r.term(mb, idx["p_abs"][:, 1:], -dt * rho_a)
    r.term(mb, idx["p_inj"][:, 1:], dt * rho_i)
    r.h[:] = -start_const[:, 1:].ravel()
    emit("storage_dynamics", r, "zero")

    if inst.options.periodic_storage:
        root_of = np.asarray(inst.tree.root_of)
        # state after the first stage, i.e. X_end of the stage-0 ancestor
        pairs = [(leaf, int(root_of[leaf])) for leaf in inst.leaves if leaf != int(root_of[leaf])]
        r = _Rows(len(pairs) * (n - 1))
        for k, (leaf, root) in enumerate(pairs):
            loc = k * (n - 1) + np.arange(n - 1)
            r.term(loc, idx["X"][leaf, 1:], 1.0)
            r.term(loc, idx["X"][root, 1:], -1.0)
        emit("periodicity", r, "zero")

    if inst.options.restricted:
        for imag, name in ((False, "lin_balance_re"), (True, "lin_balance_im")):
            r = _Rows(nb)
            _balance(r, inst, idx, "P_lin", "Q_lin", False, imag)
            emit(name, r, "zero")
        for imag, name in ((False, "lin_slack_re"), (True, "lin_slack_im")):
            r = _Rows(K)
            _slack(r, inst, idx, "P_lin", "Q_lin", "s0_lin_im" if imag else "s0_lin_re", False, imag)
            emit(name, r, "zero")
        r = _Rows(nb)
        _propagation(r, inst, idx, "P_lin", "Q_lin", "v_lin", False)
        emit("lin_propagation", r, "zero")

    if isinstance(inst.tree, PathForest):
        origin = np.asarray(inst.tree.origin)
        first: dict[int, int] = {}
        pairs = []
        for k, o in enumerate(origin):
            if int(o) in first:
                pairs.append((k, first[int(o)]))
            else:
                first[int(o)] = k
        cols_per_node = [np.concatenate([np.atleast_1d(idx[kind][k]).ravel() for kind in idx.kinds()])
                         for k in range(K)]
        cols_per_node = [c[c >= 0] for c in cols_per_node]
        width = cols_per_node[0].size if K else 0
        r = _Rows(len(pairs) * width)
        for j, (k, k0) in enumerate(pairs):
            loc = j * width + np.arange(width)
            r.term(loc, cols_per_node[k], 1.0)
            r.term(loc, cols_per_node[k0], -1.0)
        emit("non_anticipativity", r, "zero")

    # ---- bounds ------------------------------------------------------------
    def box(name, kind, lo, hi):
        """lo <= x <= hi per (node, non-slack bus); equal bounds give equalities."""
        cols = idx[kind][:, 1:]
        lo = np.broadcast_to(lo, cols.shape)
        hi = np.broadcast_to(hi, cols.shape)
        fixed = lo == hi
        if fixed.any():
            r = _Rows(int(fixed.sum()))
            r.term(np.arange(r.n_rows), cols[fixed], 1.0)
            r.h[:] = -lo[fixed]
            emit(name + "_fixed", r, "zero")
        for side, bound, sign in (("lo", lo, 1.0), ("hi", hi, -1.0)):
            mask = np.isfinite(bound) & ~fixed
            if not mask.any():
                continue
            r = _Rows(int(mask.sum()))
            r.term(np.arange(r.n_rows), cols[mask], sign)
            r.h[:] = -sign * bound[mask]
            emit(f"{name}_{side}", r, "nonneg")

    sf = net.storage_field
    box("voltage", "v", net.v_min[None, 1:], net.v_max[None, 1:])
    box("current", "I", 0.0, net.i_max[None, 1:])
    box("p_inj", "p_inj", 0.0, sf("p_inj_max")[None, 1:])
    box("p_abs", "p_abs", 0.0, sf("p_abs_max")[None, 1:])
    box("q", "q", net.q_min[None, 1:], net.q_max[None, 1:])
    box("storage", "X", sf("cap_min")[None, 1:], sf("cap_max")[None, 1:])
    r = _Rows(2 * K)
    r.term(m, idx["p0_plus"], 1.0)
    r.term(K + m, idx["p0_minus"], 1.0)
    emit("import_sign", r, "nonneg")

    if inst.options.restricted:
        box("lin_voltage", "v_lin", -np.inf, net.v_max[None, 1:])
        sub = subtree_lines(net, inst.options.subtree_includes_outgoing)
        pairs = [(i, k) for i in range(1, n) for k in sub[i]]
        if pairs:
            li = np.array([p[0] for p in pairs])
            lk = np.array([p[1] for p in pairs])
            loc = m[:, None] * len(pairs) + np.arange(len(pairs))[None, :]
            r = _Rows(K * len(pairs))
            r.term(loc, idx["P_lin"][:, li], -net.r[lk][None, :])
            r.term(loc, idx["Q_lin"][:, li], -net.x[lk][None, :])
            emit("reverse_flow", r, "nonneg")

    # ---- cones -------------------------------------------------------------
    start = B.n_rows
    for mm in range(K):
        for i in range(1, n):
            if np.isfinite(net.s_max[i]):
                B.add("soc", [1, 2], [idx["P"][mm, i], idx["Q"][mm, i]], [1.0, 1.0], [net.s_max[i], 0.0, 0.0])
    layout.add("flow_limit", "soc", start, B.n_rows)
    start = B.n_rows
    for mm in range(K):
        for i in range(1, n):
            B.add("rsoc", [0, 1, 2, 3], [idx["v"][mm, i], idx["I"][mm, i], idx["P"][mm, i], idx["Q"][mm, i]],
                  [0.5, 1.0, 1.0, 1.0], np.zeros(4))
    layout.add("current_cone", "rsoc", start, B.n_rows)

    return B.build(_objective_vector(inst, idx)), idx, layout


# ---------------------------------------------------------------------------
# raw vector <-> operating point
# ---------------------------------------------------------------------------


def _take(raw: np.ndarray, cols: np.ndarray, fill: float = 0.0) -> np.ndarray:
    out = np.full(cols.shape, fill, dtype=float)
    mask = cols >= 0
    out[mask] = raw[cols[mask]]
    return out


def extract_operating_point(idx: VariableIndex, raw) -> OperatingPoint:
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (idx.n_vars,):
        raise LengthMismatch(f"raw vector has {raw.size} entries, expected {idx.n_vars}")
    inst = idx.inst
    p_inj, p_abs, q = _take(raw, idx["p_inj"]), _take(raw, idx["p_abs"]), _take(raw, idx["q"])
    point = OperatingPoint(
        s0=_take(raw, idx["s0_re"]) + 1j * _take(raw, idx["s0_im"]),
        s=injections(inst, p_inj, p_abs, q),
        p_inj=p_inj,
        p_abs=p_abs,
        q=q,
        X=_take(raw, idx["X"]),
        S=_take(raw, idx["P"]) + 1j * _take(raw, idx["Q"]),
        I=_take(raw, idx["I"]),
        v=_take(raw, idx["v"], fill=1.0),
        p0_plus=_take(raw, idx["p0_plus"]),
        p0_minus=_take(raw, idx["p0_minus"]),
    )
    if idx.restricted:
        point.S_lin = _take(raw, idx["P_lin"]) + 1j * _take(raw, idx["Q_lin"])
        point.v_lin = _take(raw, idx["v_lin"], fill=1.0)
        point.s0_lin = _take(raw, idx["s0_lin_re"]) + 1j * _take(raw, idx["s0_lin_im"])
    point.objective = evaluate_cost(inst, point)
    return point


def pack(idx: VariableIndex, point: OperatingPoint) -> np.ndarray:
    """Inverse of :func:`extract_operating_point` (the ``s`` field is derived, not packed)."""
    raw = np.zeros(idx.n_vars)
    values = {
        "s0_re": point.s0.real, "s0_im": point.s0.imag,
        "p0_plus": point.p0_plus, "p0_minus": point.p0_minus,
        "p_inj": point.p_inj, "p_abs": point.p_abs, "q": point.q, "X": point.X,
        "P": point.S.real, "Q": point.S.imag, "I": point.I, "v": point.v,
    }
    if idx.restricted:
        if point.S_lin is None:
            raise InconsistentInstance("restricted index needs the linear block; see with_linear_block")
        values.update({"P_lin": point.S_lin.real, "Q_lin": point.S_lin.imag, "v_lin": point.v_lin,
                       "s0_lin_re": point.s0_lin.real, "s0_lin_im": point.s0_lin.imag})
    for kind, cols in idx.cols.items():
        val = np.asarray(values[kind], dtype=float)
        if val.shape != cols.shape:
            raise LengthMismatch(f"{kind} has shape {val.shape}, expected {cols.shape}")
        mask = cols >= 0
        raw[cols[mask]] = val[mask]
    return raw


def split_import(point: OperatingPoint) -> OperatingPoint:
    """Reset ``p0_plus``/``p0_minus`` to the positive and negative parts of Re s0."""
    out = point.copy()
    out.p0_plus = np.maximum(point.s0.real, 0.0)
    out.p0_minus = np.maximum(-point.s0.real, 0.0)
    return out


def with_linear_block(inst: Instance, point: OperatingPoint) -> OperatingPoint:
    """Attach the loss-free flows and voltages induced by the point's injections."""
    v_lin, S_lin, s0_lin = linear_flow(inst.net, point.s)
    out = point.copy()
    out.S_lin, out.v_lin, out.s0_lin = S_lin, v_lin, s0_lin
    return out


def zero_point(inst: Instance) -> OperatingPoint:
    K, n = inst.K, inst.n
    z = np.zeros((K, n))
    return OperatingPoint(np.zeros(K, complex), injections(inst, z, z, z), z.copy(), z.copy(), z.copy(), z.copy(),
                          np.zeros((K, n), complex), z.copy(), np.ones((K, n)), np.zeros(K), np.zeros(K))


def storage_paths(inst: Instance, point: OperatingPoint) -> list[np.ndarray]:
    """State of charge along each root-to-leaf path, stages 0..T+1 (rows) by bus."""
    x0 = inst.net.storage_field("x_init")
    parent = np.asarray(inst.tree.parent)
    out = []
    for leaf in inst.leaves:
        path = []
        k = leaf
        while k >= 0:
            path.append(k)
            k = int(parent[k])
        path.reverse()
        out.append(np.vstack([x0] + [point.X[k] for k in path]))
    return out
