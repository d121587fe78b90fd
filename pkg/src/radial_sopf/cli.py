"""Command-line entry point: ``radial-sopf <command> [options]``.

Exit codes: 0 success, 1 usage or data error, 2 infeasible model.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .certify import (
    a_priori_certificate,
    bus_pattern,
    diffuse_pattern,
    floor_upper_bound,
    gap_certificate,
    injection_upper_bound,
    max_capacity_lp,
)
from .conic import solve_conic
from .errors import InfeasibleLP, RadialSopfError
from .network import RadialNetwork, load_network, relabel_by_depth
from .oracle import constraint_violation_report
from .program import (
    CostSpec,
    Instance,
    OperatingPoint,
    build_program,
    evaluate_cost,
    extract_operating_point,
    injections,
    make_instance,
    with_linear_block,
)
from .scenario import CASE_STUDY_TAUS, SdeParams, TimeGrid, build_scenario_tree, load_profile, load_tree
from .sweep import recover, write_iteration_log

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
COMMANDS = ("tree-gen", "solve", "recover", "certify", "gap", "capacity", "audit")


class UsageError(RadialSopfError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radial-sopf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, network=True, scenario=True, costs=True):
        if network:
            p.add_argument("--network", required=True, type=Path, help="network file (.json or .csv)")
        if scenario:
            src = p.add_mutually_exclusive_group()
            src.add_argument("--tree", type=Path, help="scenario tree JSON")
            src.add_argument("--sde-params", type=Path, help="SDE parameter JSON; builds a tree")
            p.add_argument("--profile", type=Path, help="reference consumption CSV (stage,value)")
            p.add_argument("--taus", type=_floats, default=None, help="time grid in hours, comma separated")
            p.add_argument("--branching", type=_ints, default=None, help="children per stage, comma separated")
            p.add_argument("--restricted", action="store_true", help="add the restriction constraints")
            p.add_argument("--periodic", action="store_true", help="final storage state equals the first")
            p.add_argument("--include-outgoing", action="store_true",
                           help="subtree sets also contain the bus's own line")
            p.add_argument("--solar-total", type=float, default=None,
                           help="total solar capacity (MW) spread proportionally to bus size")
        if costs:
            p.add_argument("--c0-plus", type=float, default=1.0)
            p.add_argument("--c0-minus", type=float, default=0.5)
            p.add_argument("--closs", type=float, default=2.0)
            p.add_argument("--cbat", type=float, default=0.0)
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("out"))

    p = sub.add_parser("tree-gen", help="generate a quantile scenario tree")
    p.add_argument("--sde-params", type=Path)
    p.add_argument("--taus", type=_floats, default=None)
    p.add_argument("--branching", type=_ints, default=None)
    common(p, network=False, scenario=False, costs=False)

    p = sub.add_parser("solve", help="solve the relaxed (or restricted) program")
    common(p)
    p = sub.add_parser("recover", help="solve the restricted relaxation and recover exact flows")
    common(p)
    p.add_argument("--start", type=Path, help="solution.csv to start from instead of solving")
    p.add_argument("--max-iter", type=int, default=500)
    p = sub.add_parser("certify", help="a-priori zero-gap certificate")
    common(p, costs=False)
    p.add_argument("--cons-floor", type=float, default=0.55)
    p = sub.add_parser("gap", help="solve both relaxations and print the relative gap bound")
    common(p)
    p = sub.add_parser("capacity", help="hosting-capacity LP")
    common(p, scenario=False, costs=False)
    p.add_argument("--pattern", default="diffuse", help="'diffuse' or 'buses:7,20'")
    p.add_argument("--x-tot", type=float, default=0.0, help="total storage capacity (MWh), diffuse pattern")
    p.add_argument("--hours", type=float, default=2.0, help="full charge time of the storage")
    p.add_argument("--cons-floor", type=float, default=0.55)
    p.add_argument("--include-outgoing", action="store_true")
    p = sub.add_parser("audit", help="constraint audit of a solution file")
    common(p)
    p.add_argument("--solution", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from exc


def _load_network(args) -> RadialNetwork:
    fmt = "csv" if args.network.suffix.lower() == ".csv" else "json"
    data = _read_bytes(args.network)
    try:
        net = load_network(data, fmt)
    except RadialSopfError as exc:
        raise type(exc)(f"{args.network}: {exc}") from exc
    if getattr(args, "solar_total", None) is not None:
        share = np.array([b.peak for b in net.buses])
        share = share / share.sum() if share.sum() > 0 else share
        buses = tuple(replace(b, solar_cap=float(args.solar_total * share[k] / net.s_base_mva))
                      if b.parent is not None else b for k, b in enumerate(net.buses))
        net = RadialNetwork(buses, net.lines, net.s_base_mva, net.v_base_kv, net.original_ids)
    return relabel_by_depth(net)


def _grid(args) -> TimeGrid:
    return TimeGrid(args.taus if args.taus else CASE_STUDY_TAUS)


def _sde(args) -> SdeParams:
    if getattr(args, "sde_params", None) is None:
        return SdeParams()
    try:
        return SdeParams.from_dict(json.loads(_read_bytes(args.sde_params)))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.sde_params}: invalid JSON: {exc}") from exc


def _tree(args, grid: TimeGrid):
    if getattr(args, "tree", None) is not None:
        tree = load_tree(args.tree)
        if tree.grid is not None:
            grid = tree.grid
        return tree, grid
    branching = args.branching or (1,) * grid.T
    return build_scenario_tree(_sde(args), grid, branching, seed=args.seed), grid


def _instance(args, restricted: bool | None = None) -> Instance:
    if args.profile is None:
        raise UsageError("--profile is required for this command")
    net = _load_network(args)
    tree, grid = _tree(args, _grid(args))
    profile = load_profile(args.profile)
    defaults = CostSpec()
    cost = CostSpec(getattr(args, "c0_plus", defaults.c0_plus), getattr(args, "c0_minus", defaults.c0_minus),
                    getattr(args, "closs", defaults.c_loss), getattr(args, "cbat", defaults.c_bat))
    return make_instance(net, tree, grid, profile, cost,
                         restricted=args.restricted if restricted is None else restricted,
                         periodic_storage=args.periodic, subtree_includes_outgoing=args.include_outgoing)


def _solve(inst: Instance, tol: float):
    prog, idx = build_program(inst)
    sol = solve_conic(prog, tol=tol)
    if sol.status == "infeasible":
        return None, sol
    if sol.status != "optimal":
        raise RadialSopfError(f"solver ended with status {sol.status}")
    return extract_operating_point(idx, sol.x), sol


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


POINT_QUANTITIES = (("p_inj", "p_inj"), ("p_abs", "p_abs"), ("q", "q"), ("X", "X"), ("P", "S.real"),
                    ("Q", "S.imag"), ("I", "I"), ("v", "v"))
LIN_QUANTITIES = (("P_lin", "S_lin.real"), ("Q_lin", "S_lin.imag"), ("v_lin", "v_lin"))


def _field(point: OperatingPoint, spec: str) -> np.ndarray:
    name, _, part = spec.partition(".")
    arr = getattr(point, name)
    return getattr(arr, part) if part else arr


def solution_csv(inst: Instance, point: OperatingPoint) -> str:
    ids = inst.net.original_ids or tuple(range(inst.n))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node", "quantity", "bus", "value"])
    node_level = [("s0_re", point.s0.real), ("s0_im", point.s0.imag), ("p0_plus", point.p0_plus),
                  ("p0_minus", point.p0_minus)]
    if point.s0_lin is not None:
        node_level += [("s0_lin_re", point.s0_lin.real), ("s0_lin_im", point.s0_lin.imag)]
    bus_level = list(POINT_QUANTITIES) + (list(LIN_QUANTITIES) if point.S_lin is not None else [])
    for m in range(inst.K):
        for name, arr in node_level:
            w.writerow([m, name, "", _fmt(arr[m])])
        for name, spec in bus_level:
            arr = _field(point, spec)
            for i in range(1, inst.n):
                w.writerow([m, name, ids[i], _fmt(arr[m, i])])
    return buf.getvalue()


def read_solution(inst: Instance, path: Path) -> OperatingPoint:
    ids = inst.net.original_ids or tuple(range(inst.n))
    pos = {bid: k for k, bid in enumerate(ids)}
    K, n = inst.K, inst.n
    vals: dict[str, np.ndarray] = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                q = row["quantity"]
                if row["bus"] == "":
                    vals.setdefault(q, np.zeros(K))[int(row["node"])] = float(row["value"])
                else:
                    arr = vals.setdefault(q, np.ones((K, n)) if q in ("v", "v_lin") else np.zeros((K, n)))
                    arr[int(row["node"]), pos[int(row["bus"])]] = float(row["value"])
    except (OSError, KeyError, ValueError, IndexError) as exc:
        raise UsageError(f"{path}: cannot read solution ({exc})") from exc
    try:
        p_inj, p_abs, q = vals["p_inj"], vals["p_abs"], vals["q"]
        point = OperatingPoint(
            s0=vals["s0_re"] + 1j * vals["s0_im"], s=injections(inst, p_inj, p_abs, q), p_inj=p_inj,
            p_abs=p_abs, q=q, X=vals["X"], S=vals["P"] + 1j * vals["Q"], I=vals["I"], v=vals["v"],
            p0_plus=vals["p0_plus"], p0_minus=vals["p0_minus"],
        )
    except KeyError as exc:
        raise UsageError(f"{path}: missing quantity {exc}") from exc
    if "P_lin" in vals:
        point.S_lin = vals["P_lin"] + 1j * vals["Q_lin"]
        point.v_lin = vals["v_lin"]
        point.s0_lin = vals["s0_lin_re"] + 1j * vals["s0_lin_im"]
    point.objective = evaluate_cost(inst, point)
    return point


def tree_csv(tree) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "node", "value", "prob"])
    for nd in sorted(tree.nodes, key=lambda nd: (nd.stage, nd.id)):
        w.writerow([nd.stage, nd.id, _fmt(nd.value), _fmt(nd.prob)])
    return buf.getvalue()


def stage_series(inst: Instance, per_node: np.ndarray) -> list[list]:
    """Per stage, the distribution of ``per_node`` across scenario paths."""
    parent = np.asarray(inst.tree.parent)
    paths = []
    for leaf in inst.leaves:
        path, k = [], leaf
        while k >= 0:
            path.append(k)
            k = int(parent[k])
        paths.append(path[::-1])
    rows = []
    for t in range(max(len(p) for p in paths)):
        vals = np.array([per_node[p[t]] for p in paths if t < len(p)])
        q = np.percentile(vals, [0, 25, 50, 75, 100])
        rows.append([t, _fmt(inst.grid.taus[t]), len(vals)] + [_fmt(x) for x in q])
    return rows


def series_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "tau", "n", "min", "q25", "median", "q75", "max"])
    w.writerows(rows)
    return buf.getvalue()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    """Collects artifacts and writes them with a manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.files: dict[str, bytes] = {}
        self.summary: dict = {}

    def add(self, name: str, text: str):
        self.files[name] = text.encode("utf-8")

    def inputs(self) -> dict[str, str]:
        out = {}
        for key in ("network", "tree", "sde_params", "profile", "start", "solution"):
            path = getattr(self.args, key, None)
            if path is not None:
                out[key] = _sha(_read_bytes(path))
        return out

    def write(self):
        out: Path = self.args.out
        try:
            out.mkdir(parents=True, exist_ok=True)
            for name, data in sorted(self.files.items()):
                (out / name).write_bytes(data)
            options = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(self.args).items())
                       if k not in ("out",)}
            manifest = {
                "command": self.args.command,
                "version": __version__,
                "seed": self.args.seed,
                "tol": self.args.tol,
                "options": options,
                "inputs": self.inputs(),
                "outputs": {name: _sha(data) for name, data in sorted(self.files.items())},
                "summary": self.summary,
            }
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default)
                                               + "\n", encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot write to {out}: {exc}") from exc


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    return str(x)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_tree_gen(args, run: Run) -> int:
    grid = _grid(args)
    branching = args.branching or (1,) * grid.T
    tree = build_scenario_tree(_sde(args), grid, branching, seed=args.seed)
    run.add("tree.json", json.dumps(tree.to_dict(), indent=2) + "\n")
    run.add("tree.csv", tree_csv(tree))
    run.summary = {"nodes": tree.n_nodes, "leaves": tree.n_leaves}
    print(f"tree: {tree.n_nodes} nodes, {tree.n_leaves} scenarios")
    return EXIT_OK


def _emit_solution(run: Run, inst: Instance, point: OperatingPoint):
    run.add("solution.csv", solution_csv(inst, point))
    run.add("tree.csv", tree_csv(inst.tree))
    losses = point.I[:, 1:] @ inst.net.r[1:]
    run.add("series_losses.csv", series_csv(stage_series(inst, losses)))
    run.add("series_p0.csv", series_csv(stage_series(inst, point.s0.real)))


def cmd_solve(args, run: Run) -> int:
    inst = _instance(args)
    point, sol = _solve(inst, args.tol)
    if point is None:
        print("infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    _emit_solution(run, inst, point)
    run.summary = {"objective": point.objective, "restricted": inst.options.restricted}
    print(f"objective {point.objective:.10g}")
    return EXIT_OK


def cmd_recover(args, run: Run) -> int:
    inst = _instance(args, restricted=True)
    if args.start is not None:
        start = read_solution(inst, args.start)
        if start.S_lin is None:
            start = with_linear_block(inst, start)
    else:
        start, _ = _solve(inst, args.tol)
        if start is None:
            print("restricted relaxation infeasible", file=sys.stderr)
            return EXIT_INFEASIBLE
    res = recover(inst, start, tol=1e-10, max_iter=args.max_iter)
    _emit_solution(run, inst, res.point)
    run.add("sweep_log.csv", write_iteration_log(res.log))
    run.summary = {"start_cost": start.objective, "recovered_cost": res.point.objective,
                   "iterations": res.iterations}
    print(f"recovered cost {res.point.objective:.10g} (start {start.objective:.10g}) "
          f"after {res.iterations} sweeps")
    return EXIT_OK


def cmd_certify(args, run: Run) -> int:
    if args.profile is not None:
        inst = _instance(args)
        net, s_bar = inst.net, injection_upper_bound(inst)
    else:
        net = _load_network(args)
        s_bar = floor_upper_bound(net, args.cons_floor)
    cert = a_priori_certificate(net, s_bar, include_outgoing=args.include_outgoing)
    run.add("certificate.json", cert.to_json() + "\n")
    run.summary = {"verdict": cert.verdict, "no_reverse_flow": cert.provenance["no_reverse_flow"],
                   "violations": len(cert.violations)}
    print(f"verdict {cert.verdict} (no reverse flow: {cert.provenance['no_reverse_flow']}, "
          f"{len(cert.violations)} violations)")
    return EXIT_OK


def cmd_gap(args, run: Run) -> int:
    relaxed = _instance(args, restricted=False)
    p_soc, _ = _solve(relaxed, args.tol)
    if p_soc is None:
        print("relaxation infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    p_res, _ = _solve(relaxed.with_options(restricted=True), args.tol)
    val_r = None if p_res is None else p_res.objective
    cert = gap_certificate(val_r, p_soc.objective, tol=10 * args.tol)
    run.add("gap.json", cert.to_json() + "\n")
    run.summary = {"val_soc": p_soc.objective, "val_restricted_soc": val_r, "epsilon": cert.threshold}
    eps = cert.threshold
    print(f"epsilon = {eps:.6g}" if math.isfinite(eps) else "epsilon = inf (restricted relaxation infeasible)")
    print(f"val_soc = {p_soc.objective:.10g}, val_restricted_soc = {val_r if val_r is None else f'{val_r:.10g}'}")
    return EXIT_OK


def cmd_capacity(args, run: Run) -> int:
    net = _load_network(args)
    if args.pattern == "diffuse":
        pattern, fixed = diffuse_pattern(net, args.x_tot / net.s_base_mva, args.hours, args.cons_floor)
    elif args.pattern.startswith("buses:"):
        try:
            buses = [int(b) for b in args.pattern[len("buses:"):].split(",") if b]
        except ValueError as exc:
            raise UsageError(f"bad --pattern {args.pattern!r}") from exc
        ids = set(net.original_ids or ())
        missing = [b for b in buses if b not in ids]
        if missing:
            raise UsageError(f"--pattern names unknown buses {missing}")
        pattern, fixed = bus_pattern(net, buses, args.cons_floor)
    else:
        raise UsageError("--pattern must be 'diffuse' or 'buses:<id>,<id>,...'")
    try:
        res = max_capacity_lp(net, pattern, fixed, include_outgoing=args.include_outgoing)
    except InfeasibleLP as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INFEASIBLE
    run.add("capacity.json", res.certificate.to_json() + "\n")
    mw = res.threshold * net.s_base_mva
    run.summary = {"threshold_mw": mw if math.isfinite(mw) else "inf",
                   "allocation_mw": [a * net.s_base_mva for a in res.allocation.tolist()]}
    if res.status == "unbounded":
        print("capacity unbounded")
    else:
        parts = ", ".join(f"{a * net.s_base_mva:.4f}" for a in res.allocation)
        print(f"capacity {mw:.4f} MW (allocation {parts})")
    return EXIT_OK


def cmd_audit(args, run: Run) -> int:
    inst = _instance(args)
    point = read_solution(inst, args.solution)
    audit = constraint_violation_report(inst, point, tol=max(args.tol * 10, 1e-7))
    run.add("audit.json", audit.to_json() + "\n")
    run.summary = {"classification": audit.classification}
    print(f"classification {audit.classification}")
    return EXIT_OK


HANDLERS = {"tree-gen": cmd_tree_gen, "solve": cmd_solve, "recover": cmd_recover, "certify": cmd_certify,
            "gap": cmd_gap, "capacity": cmd_capacity, "audit": cmd_audit}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if not 0 < args.tol <= 1e-2:
            raise UsageError("--tol must lie in (0, 1e-2]")
        run = Run(args, argv)
        code = HANDLERS[args.command](args, run)
        if code == EXIT_OK:
            run.write()
        return code
    except RadialSopfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
