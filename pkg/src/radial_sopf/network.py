"""Radial feeder data model, validation, depth relabeling and file formats.

A feeder is a rooted tree: bus 0 is the slack bus and every other bus owns
exactly one line pointing towards its parent.  Line quantities are therefore
indexed by their child bus, which is the convention used by every other
module (``S[:, i]`` is the flow on the line leaving bus ``i``).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Iterable

import numpy as np

from .errors import DomainError, ParseError, StructureError, UnknownBus

SLACK = 0


@dataclass(frozen=True)
class Storage:
    cap_max: float = 0.0
    cap_min: float = 0.0
    x_init: float = 0.0
    p_inj_max: float = 0.0
    p_abs_max: float = 0.0
    eff_abs: float = 1.0
    eff_inj: float = 1.0


@dataclass(frozen=True)
class Reactive:
    q_min: float = 0.0
    q_max: float = 0.0


@dataclass(frozen=True)
class Bus:
    """A bus of the feeder.

    ``v_min``/``v_max`` bound the *squared* voltage magnitude (p.u.^2) and
    ``peak`` is the size parameter used to scale consumption, storage and
    solar.  The slack bus carries no bounds other than ``v = 1``.
    """

    id: int
    parent: int | None = None
    v_min: float = 1.0
    v_max: float = 1.0
    tap: float = 1.0
    peak: float = 0.0
    storage: Storage = field(default_factory=Storage)
    reactive: Reactive = field(default_factory=Reactive)
    solar_cap: float = 0.0


@dataclass(frozen=True)
class Line:
    """Line ``frm -> to`` directed towards the root (``to`` is the parent)."""

    frm: int
    to: int
    r: float
    x: float
    i_max: float = math.inf
    s_max: float = math.inf

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class Violation:
    kind: str
    element: object
    message: str

    def to_dict(self):
        return {"kind": self.kind, "element": self.element, "message": self.message}


STRUCTURAL_KINDS = frozenset(
    {"duplicate_id", "root", "unknown_parent", "cycle", "disconnected", "line_mismatch"}
)


@dataclass(frozen=True)
class RadialNetwork:
    """Immutable radial feeder.

    Positions (indices into ``buses``) are used for all array views.  After
    :func:`relabel_by_depth` positions and ids coincide and every parent has
    a smaller label than its children.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    s_base_mva: float = 1.0
    v_base_kv: float | None = None
    original_ids: tuple[int, ...] | None = None

    # ---- structure -------------------------------------------------------
    @cached_property
    def index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @cached_property
    def parent(self) -> np.ndarray:
        """Parent position of every bus, ``-1`` for the slack."""
        out = np.full(self.n_buses, -1, dtype=int)
        for k, b in enumerate(self.buses):
            if b.parent is not None:
                out[k] = self.index[b.parent]
        return out

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[int]] = [[] for _ in self.buses]
        for k, p in enumerate(self.parent):
            if p >= 0:
                kids[p].append(k)
        return tuple(tuple(c) for c in kids)

    @cached_property
    def depth(self) -> np.ndarray:
        d = np.full(self.n_buses, -1, dtype=int)
        root = self.index[SLACK]
        d[root] = 0
        stack = [root]
        while stack:
            k = stack.pop()
            for c in self.children[k]:
                d[c] = d[k] + 1
                stack.append(c)
        return d

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Positions sorted by (depth, id): the depth-nondecreasing labeling."""
        ids = [b.id for b in self.buses]
        return tuple(sorted(range(self.n_buses), key=lambda k: (self.depth[k], ids[k])))

    @property
    def is_depth_ordered(self) -> bool:
        ids_ok = all(b.id == k for k, b in enumerate(self.buses))
        return ids_ok and all(self.parent[k] < k for k in range(1, self.n_buses))

    def line_of(self, bus_id: int) -> Line:
        for ln in self.lines:
            if ln.frm == bus_id:
                return ln
        raise UnknownBus(bus_id)

    # ---- array views (position indexed; line data stored at child) ------
    def _line_field(self, name: str) -> np.ndarray:
        out = np.zeros(self.n_buses)
        for ln in self.lines:
            out[self.index[ln.frm]] = getattr(ln, name)
        return out

    @cached_property
    def r(self) -> np.ndarray:
        return self._line_field("r")

    @cached_property
    def x(self) -> np.ndarray:
        return self._line_field("x")

    @cached_property
    def z(self) -> np.ndarray:
        return self.r + 1j * self.x

    @cached_property
    def i_max(self) -> np.ndarray:
        a = self._line_field("i_max")
        a[self.index[SLACK]] = math.inf
        return a

    @cached_property
    def s_max(self) -> np.ndarray:
        a = self._line_field("s_max")
        a[self.index[SLACK]] = math.inf
        return a

    def _bus_field(self, getter) -> np.ndarray:
        return np.array([float(getter(b)) for b in self.buses])

    @cached_property
    def tap(self) -> np.ndarray:
        return self._bus_field(lambda b: b.tap)

    @cached_property
    def tap_sq_parent(self) -> np.ndarray:
        """``|t_j|^2`` of the parent ``j`` of each bus (1 at the slack)."""
        t2 = self.tap**2
        out = np.ones(self.n_buses)
        mask = self.parent >= 0
        out[mask] = t2[self.parent[mask]]
        return out

    @cached_property
    def v_min(self) -> np.ndarray:
        return self._bus_field(lambda b: b.v_min)

    @cached_property
    def v_max(self) -> np.ndarray:
        return self._bus_field(lambda b: b.v_max)

    @cached_property
    def peak(self) -> np.ndarray:
        return self._bus_field(lambda b: b.peak)

    @cached_property
    def solar_cap(self) -> np.ndarray:
        return self._bus_field(lambda b: b.solar_cap)

    def storage_field(self, name: str) -> np.ndarray:
        return self._bus_field(lambda b: getattr(b.storage, name))

    @cached_property
    def q_min(self) -> np.ndarray:
        return self._bus_field(lambda b: b.reactive.q_min)

    @cached_property
    def q_max(self) -> np.ndarray:
        return self._bus_field(lambda b: b.reactive.q_max)

    @cached_property
    def descendants(self) -> tuple[frozenset[int], ...]:
        """Positions in the subtree rooted at each bus (the bus included)."""
        out: list[set[int]] = [set([k]) for k in range(self.n_buses)]
        for k in reversed(self.order):
            p = self.parent[k]
            if p >= 0:
                out[p] |= out[k]
        return tuple(frozenset(s) for s in out)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_network(net: RadialNetwork) -> list[Violation]:
    """List every violated modeling assumption; empty means all hold."""
    report: list[Violation] = []
    ids = [b.id for b in net.buses]
    seen: set[int] = set()
    for i in ids:
        if i in seen:
            report.append(Violation("duplicate_id", i, f"bus id {i} appears twice"))
        seen.add(i)
    roots = [b.id for b in net.buses if b.parent is None]
    if roots != [SLACK]:
        if len(roots) > 1:
            report.append(Violation("root", tuple(roots), f"several roots {roots}"))
        elif not roots:
            report.append(Violation("root", None, "no root bus"))
        else:
            report.append(Violation("root", roots[0], f"root must be bus {SLACK}, got {roots[0]}"))
        for r in roots:
            if r != SLACK and SLACK in seen:
                report.append(Violation("disconnected", r, f"bus {r} is a second component"))
    parent_of = {b.id: b.parent for b in net.buses}
    for b in net.buses:
        if b.parent is not None and b.parent not in parent_of:
            report.append(Violation("unknown_parent", b.id, f"bus {b.id} has unknown parent {b.parent}"))
    # follow parent pointers; any bus that never reaches the slack is on or behind a cycle
    status: dict[int, int] = {}  # 1 reaches slack, 2 does not
    for start in parent_of:
        path = []
        cur: int | None = start
        on_path: set[int] = set()
        result = 2
        while cur is not None:
            if cur in status:
                result = status[cur]
                break
            if cur in on_path:
                report.append(Violation("cycle", cur, f"cycle through bus {cur}"))
                result = 2
                break
            on_path.add(cur)
            path.append(cur)
            if cur not in parent_of:
                result = 2
                break
            nxt = parent_of[cur]
            if nxt is None:
                result = 1 if cur == SLACK else 2
                break
            cur = nxt
        for p in path:
            status[p] = result
    for b in net.buses:
        if status.get(b.id) == 2 and b.parent is not None and b.parent in parent_of:
            if not any(v.kind == "cycle" for v in report):
                report.append(Violation("disconnected", b.id, f"bus {b.id} is not connected to the slack"))
    # lines must mirror the parent relation
    line_count: dict[int, int] = {}
    for ln in net.lines:
        line_count[ln.frm] = line_count.get(ln.frm, 0) + 1
        if ln.frm not in parent_of:
            report.append(Violation("line_mismatch", (ln.frm, ln.to), f"line from unknown bus {ln.frm}"))
        elif parent_of[ln.frm] != ln.to:
            report.append(
                Violation("line_mismatch", (ln.frm, ln.to), f"line {ln.frm}->{ln.to} does not point to the parent")
            )
    for b in net.buses:
        if b.parent is not None and line_count.get(b.id, 0) != 1:
            report.append(
                Violation("line_mismatch", b.id, f"bus {b.id} has {line_count.get(b.id, 0)} outgoing lines")
            )
    # physical ranges
    for ln in net.lines:
        if ln.r < 0 or ln.x < 0:
            report.append(Violation("passivity", (ln.frm, ln.to), f"line {ln.frm}->{ln.to} has r={ln.r}, x={ln.x}"))
        if ln.i_max < 0 or ln.s_max < 0:
            report.append(Violation("line_bounds", (ln.frm, ln.to), "negative current or power bound"))
    for b in net.buses:
        if not b.tap > 0:
            report.append(Violation("tap", b.id, f"bus {b.id} has tap {b.tap}"))
        if b.parent is None:
            continue
        if b.v_min > b.v_max:
            report.append(Violation("voltage_bounds", b.id, f"bus {b.id}: v_min {b.v_min} > v_max {b.v_max}"))
        st = b.storage
        if not (st.cap_min <= st.x_init <= st.cap_max):
            report.append(Violation("storage", b.id, f"bus {b.id}: x_init outside [cap_min, cap_max]"))
        if st.p_inj_max < 0 or st.p_abs_max < 0:
            report.append(Violation("storage", b.id, f"bus {b.id}: negative storage power bound"))
        if not (0 < st.eff_abs <= 1) or st.eff_inj < 1:
            report.append(Violation("storage", b.id, f"bus {b.id}: efficiencies out of range"))
        if b.reactive.q_min > b.reactive.q_max:
            report.append(Violation("reactive", b.id, f"bus {b.id}: q_min > q_max"))
    return report


def check_network(net: RadialNetwork) -> RadialNetwork:
    """Raise on the first class of violation found, else return ``net``."""
    report = validate_network(net)
    structural = [v for v in report if v.kind in STRUCTURAL_KINDS]
    if structural:
        raise StructureError("; ".join(v.message for v in structural))
    if report:
        raise DomainError("; ".join(v.message for v in report))
    return net


# ---------------------------------------------------------------------------
# relabeling and subtrees
# ---------------------------------------------------------------------------


def relabel_by_depth(net: RadialNetwork) -> RadialNetwork:
    """Return the network relabeled 0..n in depth order (ties by original id).

    ``original_ids[k]`` gives the label bus ``k`` carried in the input (or
    in the input's own ``original_ids`` if it was already relabeled).
    """
    order = net.order
    old_ids = [net.buses[k].id for k in order]
    if net.is_depth_ordered and list(order) == list(range(net.n_buses)):
        if net.original_ids is None:
            return replace(net, original_ids=tuple(old_ids))
        return net
    new_of = {old: new for new, old in enumerate(old_ids)}
    buses = tuple(
        replace(net.buses[k], id=new_of[net.buses[k].id],
                parent=None if net.buses[k].parent is None else new_of[net.buses[k].parent])
        for k in order
    )
    lines = tuple(
        sorted(
            (replace(ln, frm=new_of[ln.frm], to=new_of[ln.to]) for ln in net.lines),
            key=lambda ln: ln.frm,
        )
    )
    base = net.original_ids
    orig = tuple(old if base is None else base[net.index[old]] for old in old_ids)
    return RadialNetwork(buses, lines, net.s_base_mva, net.v_base_kv, orig)


def ensure_depth_ordered(net: RadialNetwork) -> RadialNetwork:
    return net if net.is_depth_ordered and net.original_ids is not None else relabel_by_depth(net)


def subtree_edges(net: RadialNetwork, bus: int, include_outgoing: bool = False) -> frozenset[tuple[int, int]]:
    """Lines with both endpoints in the subtree rooted at ``bus``.

    A leaf has no such line.  With ``include_outgoing`` the line from ``bus``
    to its parent is added as well.
    """
    if bus not in net.index:
        raise UnknownBus(bus)
    k = net.index[bus]
    edges = {
        (net.buses[d].id, net.buses[net.parent[d]].id) for d in net.descendants[k] if d != k
    }
    if include_outgoing and net.parent[k] >= 0:
        edges.add((bus, net.buses[net.parent[k]].id))
    return frozenset(edges)


def subtree_lines(net: RadialNetwork, include_outgoing: bool = False) -> tuple[tuple[int, ...], ...]:
    """Position form of :func:`subtree_edges`: child positions of the lines in each E_i."""
    out = []
    for k in range(net.n_buses):
        lines = sorted(d for d in net.descendants[k] if d != k)
        if include_outgoing and net.parent[k] >= 0:
            lines = sorted(lines + [k])
        out.append(tuple(lines))
    return tuple(out)


def linear_flow(net: RadialNetwork, s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Loss-free (linearized DistFlow) flows and voltages for injections ``s``.

    ``s`` has shape ``(..., n_buses)`` (column of the slack ignored).  Returns
    ``(v, S, s0)`` where ``S[..., i]`` is the flow on the line leaving bus
    ``i`` and ``s0`` balances the slack.  One backward accumulation and one
    forward propagation; the network must be depth ordered.
    """
    if not net.is_depth_ordered:
        raise StructureError("network must be relabeled by depth")
    s = np.asarray(s, dtype=complex)
    S = np.zeros_like(s)
    S[..., 1:] = s[..., 1:]
    parent = net.parent
    for i in range(net.n_buses - 1, 0, -1):
        if parent[i] > 0:
            S[..., parent[i]] += S[..., i]
    s0 = -S[..., [i for i in range(1, net.n_buses) if parent[i] == 0]].sum(axis=-1)
    v = np.ones(s.shape, dtype=float)
    t2 = net.tap_sq_parent
    z = net.z
    for i in range(1, net.n_buses):
        v[..., i] = t2[i] * v[..., parent[i]] + 2.0 * (z[i].conjugate() * S[..., i]).real
    S[..., 0] = 0.0
    return v, S, s0


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "id", "parent", "r", "x", "i_max", "s_max", "v_min", "v_max", "tap", "peak",
    "cap_max", "cap_min", "x_init", "p_inj_max", "p_abs_max", "eff_abs", "eff_inj",
    "q_min", "q_max", "solar_cap",
)
_STORAGE_KEYS = ("cap_max", "cap_min", "x_init", "p_inj_max", "p_abs_max", "eff_abs", "eff_inj")


def _num(rec: dict, key: str, default=None, where: str = ""):
    val = rec.get(key, default)
    if val is None or val == "":
        if default is None:
            raise ParseError(f"missing field '{key}' {where}".strip())
        return default
    try:
        return float(val)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"field '{key}' {where} is not numeric: {val!r}") from exc


def _bus_from_record(rec: dict, scale: dict[str, float]) -> tuple[Bus, Line | None]:
    if "id" not in rec:
        raise ParseError(f"bus record without id: {rec!r}")
    try:
        bid = int(rec["id"])
        parent = rec.get("parent")
        parent = None if parent in (None, "") else int(parent)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad id/parent in {rec!r}") from exc
    where = f"(bus {bid})"
    pw = scale["power"]
    if parent is None:
        v_min = _num(rec, "v_min", 1.0, where)
        v_max = _num(rec, "v_max", 1.0, where)
    else:
        v_min = _num(rec, "v_min", None, where)
        v_max = _num(rec, "v_max", None, where)
    st_rec = rec.get("storage") or {}
    storage = Storage(
        cap_max=_num(st_rec, "cap_max", 0.0, where) / pw,
        cap_min=_num(st_rec, "cap_min", 0.0, where) / pw,
        x_init=_num(st_rec, "x_init", 0.0, where) / pw,
        p_inj_max=_num(st_rec, "p_inj_max", 0.0, where) / pw,
        p_abs_max=_num(st_rec, "p_abs_max", 0.0, where) / pw,
        eff_abs=_num(st_rec, "eff_abs", 1.0, where),
        eff_inj=_num(st_rec, "eff_inj", 1.0, where),
    )
    re_rec = rec.get("reactive") or {}
    reactive = Reactive(_num(re_rec, "q_min", 0.0, where) / pw, _num(re_rec, "q_max", 0.0, where) / pw)
    bus = Bus(
        id=bid,
        parent=parent,
        v_min=v_min,
        v_max=v_max,
        tap=_num(rec, "tap", 1.0, where),
        peak=_num(rec, "peak", 0.0, where) / pw,
        storage=storage,
        reactive=reactive,
        solar_cap=_num(rec, "solar_cap", 0.0, where) / pw,
    )
    line = None
    if parent is not None:
        line = Line(
            frm=bid,
            to=parent,
            r=_num(rec, "r", None, where) / scale["impedance"],
            x=_num(rec, "x", None, where) / scale["impedance"],
            i_max=_num(rec, "i_max", math.inf, where) / scale["current_sq"],
            s_max=_num(rec, "s_max", math.inf, where) / pw,
        )
    return bus, line


def _unit_scales(doc: dict, s_base: float, v_base: float | None) -> dict[str, float]:
    units = doc.get("units") or {}
    scale = {"power": 1.0, "impedance": 1.0, "current_sq": 1.0}
    if units.get("power", "pu") in ("MVA", "MW", "mva"):
        scale["power"] = s_base
    if units.get("impedance", "pu") in ("ohm", "Ohm"):
        if not v_base:
            raise ParseError("impedance in ohm requires v_base_kv")
        scale["impedance"] = v_base**2 / s_base
    if units.get("current", "pu") in ("A", "A2"):
        if not v_base:
            raise ParseError("currents in A require v_base_kv")
        i_base = s_base * 1e3 / (math.sqrt(3.0) * v_base)  # balanced three-phase base, A
        scale["current_sq"] = i_base**2
    return scale


def _read_source(source) -> tuple[str, str | None]:
    if isinstance(source, (bytes, bytearray)):
        return source.decode("utf-8"), None
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, "rb") as fh:
            return fh.read().decode("utf-8"), os.path.splitext(str(source))[1].lstrip(".").lower()
    if hasattr(source, "read"):
        data = source.read()
        return (data.decode("utf-8") if isinstance(data, bytes) else data), None
    if isinstance(source, str):
        return source, None
    raise ParseError(f"cannot read network from {type(source).__name__}")


def load_network(source, format: str | None = None) -> RadialNetwork:
    """Parse a JSON or CSV feeder description and validate it.

    ``source`` may be bytes, a path, a text/binary stream or the text itself.
    Raises :class:`ParseError`, :class:`StructureError` or :class:`DomainError`.
    """
    text, ext = _read_source(source)
    fmt = (format or ext or ("json" if text.lstrip().startswith("{") else "csv")).lower()
    if fmt == "json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
        if not isinstance(doc, dict) or not isinstance(doc.get("buses"), list):
            raise ParseError("JSON network needs a 'buses' list")
        s_base = float(doc.get("s_base_mva", 1.0))
        v_base = doc.get("v_base_kv")
        v_base = None if v_base is None else float(v_base)
        records = doc["buses"]
        scale = _unit_scales(doc, s_base, v_base)
    elif fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise ParseError("CSV network needs a header with an 'id' column")
        records = []
        for row in reader:
            rec = {k: v for k, v in row.items() if k in ("id", "parent", "r", "x", "i_max", "s_max",
                                                           "v_min", "v_max", "tap", "peak", "solar_cap")}
            rec["storage"] = {k: row[k] for k in _STORAGE_KEYS if row.get(k) not in (None, "")}
            rec["reactive"] = {k: row[k] for k in ("q_min", "q_max") if row.get(k) not in (None, "")}
            records.append(rec)
        s_base, v_base = 1.0, None
        scale = {"power": 1.0, "impedance": 1.0, "current_sq": 1.0}
    else:
        raise ParseError(f"unknown network format {fmt!r}")
    buses, lines = [], []
    for rec in records:
        if not isinstance(rec, dict):
            raise ParseError(f"bus record is not an object: {rec!r}")
        b, ln = _bus_from_record(rec, scale)
        buses.append(b)
        if ln is not None:
            lines.append(ln)
    return check_network(RadialNetwork(tuple(buses), tuple(lines), s_base, v_base))


def _bus_record(net: RadialNetwork, b: Bus) -> dict:
    rec: dict = {"id": b.id}
    if b.parent is not None:
        ln = net.line_of(b.id)
        rec.update(parent=b.parent, r=ln.r, x=ln.x)
        if math.isfinite(ln.i_max):
            rec["i_max"] = ln.i_max
        if math.isfinite(ln.s_max):
            rec["s_max"] = ln.s_max
    rec.update(v_min=b.v_min, v_max=b.v_max, tap=b.tap, peak=b.peak)
    if b.storage != Storage():
        rec["storage"] = asdict(b.storage)
    if b.reactive != Reactive():
        rec["reactive"] = asdict(b.reactive)
    if b.solar_cap:
        rec["solar_cap"] = b.solar_cap
    return rec


def dump_network(net: RadialNetwork, format: str = "json") -> str:
    """Serialize in per-unit; floats use shortest round-trip repr (bit exact)."""
    if format == "json":
        doc = {
            "s_base_mva": net.s_base_mva,
            "v_base_kv": net.v_base_kv,
            "buses": [_bus_record(net, b) for b in net.buses],
        }
        return json.dumps(doc, indent=1)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for b in net.buses:
            rec = _bus_record(net, b)
            flat = dict(rec)
            flat.update(asdict(b.storage))
            flat.update(asdict(b.reactive))
            flat.setdefault("solar_cap", b.solar_cap)
            w.writerow(["" if flat.get(c) is None else repr(flat[c]) if isinstance(flat.get(c), float)
                        else flat.get(c, "") for c in CSV_COLUMNS])
        return buf.getvalue()
    raise ParseError(f"unknown network format {format!r}")


def chain_network(impedances: Iterable[complex], v_min: float = 0.0, v_max: float = math.inf,
                  **bus_kwargs) -> RadialNetwork:
    """Small helper: buses 0 <- 1 <- 2 <- ... with the given line impedances."""
    buses = [Bus(0)]
    lines = []
    for k, z in enumerate(impedances, start=1):
        buses.append(Bus(k, k - 1, v_min=v_min, v_max=v_max, **bus_kwargs))
        lines.append(Line(k, k - 1, complex(z).real, complex(z).imag))
    return check_network(RadialNetwork(tuple(buses), tuple(lines)))
