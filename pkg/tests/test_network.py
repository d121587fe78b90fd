from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radial_sopf.errors import DomainError, ParseError, StructureError, UnknownBus
from radial_sopf.network import (
    Bus,
    Line,
    RadialNetwork,
    Storage,
    check_network,
    dump_network,
    linear_flow,
    load_network,
    relabel_by_depth,
    subtree_edges,
    subtree_lines,
    validate_network,
)

CHAIN_JSON = """
{"s_base_mva": 1.0, "buses": [
  {"id": 0, "peak": 0},
  {"id": 1, "parent": 0, "r": 0.01, "x": 0.01, "v_min": 0.9, "v_max": 1.1, "peak": 1},
  {"id": 2, "parent": 1, "r": 0.01, "x": 0.01, "v_min": 0.9, "v_max": 1.1, "peak": 1}
]}
"""


def random_network(parents, rng_values=None, ids=None):
    n = len(parents) + 1
    ids = list(range(n)) if ids is None else ids
    buses = [Bus(ids[0])]
    lines = []
    for k, p in enumerate(parents, start=1):
        buses.append(Bus(ids[k], ids[p], v_min=0.9, v_max=1.1, peak=0.1 * k))
        lines.append(Line(ids[k], ids[p], 0.01 * k, 0.02))
    return RadialNetwork(tuple(buses), tuple(lines))


parents_strategy = st.integers(2, 12).flatmap(
    lambda n: st.tuples(*[st.integers(0, k - 1) for k in range(1, n)])
)


def test_minimal_chain_loads():
    net = load_network(CHAIN_JSON.encode(), "json")
    assert net.n_buses == 3 and len(net.lines) == 2
    assert list(net.depth) == [0, 1, 2]


def test_cycle_is_rejected():
    doc = """{"buses": [{"id": 0}, {"id": 1, "parent": 2, "r": 0.01, "x": 0.01, "v_min": 0.9, "v_max": 1.1},
    {"id": 2, "parent": 1, "r": 0.01, "x": 0.01, "v_min": 0.9, "v_max": 1.1}]}"""
    with pytest.raises(StructureError, match="cycle"):
        load_network(doc, "json")


def test_duplicate_and_two_roots():
    dup = RadialNetwork((Bus(0), Bus(1, 0, 0.9, 1.1), Bus(1, 0, 0.9, 1.1)),
                        (Line(1, 0, 0.01, 0.01), Line(1, 0, 0.01, 0.01)))
    kinds = {v.kind for v in validate_network(dup)}
    assert "duplicate_id" in kinds
    two = RadialNetwork((Bus(0), Bus(1, 0, 0.9, 1.1), Bus(2, None, 0.9, 1.1)), (Line(1, 0, 0.01, 0.01),))
    kinds = {v.kind for v in validate_network(two)}
    assert "disconnected" in kinds


def test_negative_resistance_reported_once():
    net = RadialNetwork((Bus(0), Bus(1, 0, 0.9, 1.1)), (Line(1, 0, -0.01, 0.01),))
    report = validate_network(net)
    assert [(v.kind, v.element) for v in report] == [("passivity", (1, 0))]
    with pytest.raises(DomainError):
        check_network(net)


def test_valid_chain_has_empty_report():
    assert validate_network(load_network(CHAIN_JSON, "json")) == []


def test_parse_errors():
    with pytest.raises(ParseError):
        load_network(b"{not json", "json")
    with pytest.raises(ParseError):
        load_network('{"buses": [{"id": 0}, {"id": 1, "parent": 0, "r": "abc", "x": 0, "v_min": 1, "v_max": 1}]}', "json")


def test_relabel_chain_identity():
    net = relabel_by_depth(load_network(CHAIN_JSON, "json"))
    assert net.original_ids == (0, 1, 2)
    assert [b.id for b in net.buses] == [0, 1, 2]


def test_relabel_star():
    net = check_network(random_network([0, 0], ids=[0, 5, 3]))
    out = relabel_by_depth(net)
    assert out.original_ids == (0, 3, 5)
    assert [b.parent for b in out.buses] == [None, 0, 0]
    # physical data follows the bus: original bus 3 had line r = 0.02
    assert out.r[1] == pytest.approx(0.02) and out.r[2] == pytest.approx(0.01)


def test_subtree_edges_chain():
    net = load_network(CHAIN_JSON, "json")
    assert subtree_edges(net, 2) == frozenset()
    assert subtree_edges(net, 1) == {(2, 1)}
    assert subtree_edges(net, 0) == {(1, 0), (2, 1)}
    assert subtree_edges(net, 1, include_outgoing=True) == {(2, 1), (1, 0)}
    with pytest.raises(UnknownBus):
        subtree_edges(net, 9)


@settings(max_examples=60, deadline=None)
@given(parents_strategy, st.randoms(use_true_random=False))
def test_relabel_invariant_and_subtree_counts(parents, rnd):
    ids = list(range(len(parents) + 1))
    perm = ids[1:]
    rnd.shuffle(perm)
    ids = [0] + perm
    net = check_network(random_network(list(parents), ids=ids))
    out = relabel_by_depth(net)
    assert out.is_depth_ordered
    for ln in out.lines:
        assert ln.frm > ln.to
    assert np.all(np.diff(out.depth) >= 0)
    # brute force: each line (k, parent k) lies in E_i for every proper ancestor i of k
    total = sum(len(subtree_edges(out, b.id)) for b in out.buses)
    assert total == sum(out.depth[ln.frm] for ln in out.lines)
    assert subtree_edges(out, 0) == {(ln.frm, ln.to) for ln in out.lines}
    assert [len(e) for e in subtree_lines(out)] == [len(subtree_edges(out, b.id)) for b in out.buses]


@settings(max_examples=40, deadline=None)
@given(parents_strategy, st.floats(0.0, 1.0), st.floats(1e-7, 3.0))
def test_json_and_csv_round_trip(parents, xi, tap):
    base = random_network(list(parents))
    buses = list(base.buses)
    buses[1] = Bus(1, buses[1].parent, 0.81, 1.21, tap=tap, peak=math.pi / 7,
                   storage=Storage(1.0 / 3, 0.0, xi / 3, 0.1, 0.2, 0.95, 1 / 0.95), solar_cap=0.1 + xi)
    net = check_network(RadialNetwork(tuple(buses), base.lines))
    for fmt in ("json", "csv"):
        again = load_network(dump_network(net, fmt), fmt)
        assert again.buses == net.buses
        assert again.lines == net.lines


def test_csv_source_stream():
    net = load_network(CHAIN_JSON, "json")
    text = dump_network(net, "csv")
    assert load_network(io.StringIO(text), "csv").buses == net.buses


def test_amp_units_are_converted():
    doc = """{"s_base_mva": 1.0, "v_base_kv": 12.0, "units": {"current": "A"},
    "buses": [{"id": 0}, {"id": 1, "parent": 0, "r": 0.01, "x": 0.01, "v_min": 0.9, "v_max": 1.1,
    "i_max": 90000}]}"""
    net = load_network(doc, "json")
    i_base = 1e3 / (math.sqrt(3) * 12.0)
    assert net.i_max[1] == pytest.approx(90000 / i_base**2)


def test_linear_flow_three_bus():
    net = load_network(CHAIN_JSON, "json")
    v, S, s0 = linear_flow(net, np.array([0, -0.5, -0.5], dtype=complex))
    assert S[1] == pytest.approx(-1.0) and S[2] == pytest.approx(-0.5)
    assert v == pytest.approx([1.0, 0.98, 0.97])
    assert s0 == pytest.approx(1.0)
