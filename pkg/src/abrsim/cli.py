"""Command-line surface.

Five subcommands: ``run`` (simulate, write artifacts), ``fairness`` (oracle
table for all four definitions), ``compare`` (simulation vs oracle),
``cell`` (encode/decode one RM cell), ``validate`` (parse and check a
scenario file).  Machine-facing output is CSV or ``key: value`` lines.

Exit codes: 0 success / comparison passed; 1 comparison failed or cell
rejected; 2 bad arguments or invalid scenario.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import metrics
from .codec import CodecError, Direction, RMCellFields, decode_cell, encode_cell
from .engine import run_scenario
from .fairness import FairnessDefinition, allocate, stage1_entities, verify_maxmin
from .metrics import source_convergence, throughput
from .model import TopologyError
from .scenario import EventKind, Scenario, ScenarioError, parse_scenario


def _error_block(errors) -> int:
    for e in errors:
        print(f"error: {e}")
    return 2


def _load(path: str, seed: int | None = None, quantize: bool = False) -> Scenario:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    sc = parse_scenario(text)
    run = sc.run
    if seed is not None:
        run = replace(run, seed=seed)
    if quantize:
        run = replace(run, quantize=True)
    if run is not sc.run:
        sc = replace(sc, run=run)
    return sc


def _demands(sc: Scenario):
    d = {k: p.demand for k, p in sc.source_params.items() if p.demand is not None}
    return d or None


def _parse_window(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ValueError("window must be START:END in seconds")
    return float(lo), float(hi)


def _window_network(sc: Scenario, start: float):
    """Oracle inputs as they stand at the window start.

    Capacity and demand events at or before the start are applied, so a
    window placed after a mid-run change is judged against the allocation
    that change calls for.  Silence events are ignored here: they are a
    feedback-liveness matter, not part of any fairness definition.
    """
    caps: dict[int, float] = {}
    demands = dict(_demands(sc) or {})
    for ev in sc.events:
        if ev.time > start + 1e-9:
            continue
        if ev.kind == EventKind.CAPACITY:
            caps[ev.link] = ev.value
        elif ev.kind == EventKind.DEMAND:
            demands[(ev.vc, ev.source)] = ev.value
    if caps:
        sc = replace(sc, links=tuple(
            replace(l, capacity=caps.get(l.id, l.capacity)) for l in sc.links
        ))
    return sc.compile(), (demands or None)


# ------------------------------------------------------------------ run


def cmd_run(args) -> int:
    try:
        sc = _load(args.scenario, args.seed, args.quantize)
        sc.compile()
    except ScenarioError as e:
        return _error_block(e.errors)
    except TopologyError as e:
        return _error_block(e.args[0])
    out = args.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "trace.bin"), "wb") as sink:
        result = run_scenario(sc, trace_sink=sink)
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(metrics.metrics_csv(result))
    with open(os.path.join(out, "allocations.txt"), "w", encoding="utf-8") as f:
        f.write(metrics.allocation_dump(result))
    summary = metrics.summary_text(result)
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary)
    if not args.no_figures:
        from .report import write_figures

        write_figures(result, out)
    print(summary, end="")
    return 0


# ------------------------------------------------------------------ fairness


def cmd_fairness(args) -> int:
    try:
        sc = _load(args.scenario)
        net = sc.compile()
    except ScenarioError as e:
        return _error_block(e.errors)
    except TopologyError as e:
        return _error_block(e.args[0])
    demands = _demands(sc)
    columns = list(FairnessDefinition)
    results = {}
    certs = {}
    try:
        for definition in columns:
            result = allocate(definition, net, demands)
            results[definition] = result.per_source
            entities, caps = stage1_entities(definition, net, demands)
            certs[definition] = verify_maxmin(entities, caps, result.stages[0][1].rates)
    except ValueError as e:
        return _error_block([str(e)])

    keys = sorted(results[columns[0]])
    header = ["vc", "source"] + [d.value for d in columns]
    rows = [
        [str(vc), str(src)] + [f"{results[d][(vc, src)]:.6f}" for d in columns]
        for vc, src in keys
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    for definition in columns:
        cert = certs[definition]
        status = "ok" if cert.ok else f"FAIL ({len(cert.violations)} violations)"
        print(f"certificate.{definition.value}: {status}")

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "fairness.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(r) + "\n")
        for definition in columns:
            f.write(f"certificate,{definition.value},{'ok' if certs[definition].ok else 'fail'}\n")
    return 0 if all(c.ok for c in certs.values()) else 1


# ------------------------------------------------------------------ compare


def cmd_compare(args) -> int:
    try:
        sc = _load(args.scenario, args.seed, args.quantize)
        net = sc.compile()
    except ScenarioError as e:
        return _error_block(e.errors)
    except TopologyError as e:
        return _error_block(e.args[0])
    epsilon = sc.run.epsilon if args.epsilon is None else args.epsilon
    if args.window is not None:
        try:
            start, end = _parse_window(args.window)
        except ValueError as e:
            return _error_block([str(e)])
    else:
        start, end = sc.run.window_start, sc.run.window_end
    if not 0.0 <= start < end or end > sc.run.duration:
        return _error_block([f"window {start}..{end} outside the run (duration {sc.run.duration})"])

    definition = FairnessDefinition(args.definition)
    oracle_net, oracle_demands = _window_network(sc, start)
    oracle = allocate(definition, oracle_net, oracle_demands).per_source
    result = run_scenario(sc)

    print(f"definition: {definition.value}")
    print(f"window: {start} .. {end}")
    print(f"epsilon: {epsilon}")
    failures = []
    for key in sorted(oracle):
        target = oracle[key]
        sim = throughput(result, key, start, end)
        if target > 0:
            err = abs(sim - target) / target
            err_text = f"{100 * err:.2f}%"
            bad = err > epsilon
        else:
            err = abs(sim)
            err_text = f"{err:.3f} cells/s absolute"
            bad = err > 1.0
        flag = "  OUT-OF-BAND" if bad else ""
        print(f"source vc{key[0]}.src{key[1]}: sim={sim:.3f} oracle={target:.3f} error={err_text}{flag}")
        if bad:
            failures.append(key)
    positive = {k: v for k, v in oracle.items() if v > 0}
    conv = source_convergence(result, positive, epsilon=epsilon, start=0.0) if positive else 0.0
    if conv is None:
        print("convergence_time: never")
        failures.append("convergence")
    else:
        print(f"convergence_time: {conv:.3f}")
    verdict = "PASS" if not failures else "FAIL"
    print(f"result: {verdict}")
    if failures:
        print(f"diagnostics: {len(failures)} check(s) failed; "
              f"feedback ratio={metrics.network_feedback_ratio(result)}; "
              f"drops={sum(result.drops.values())}; misrouted={result.misrouted_feedback}")
    return 0 if verdict == "PASS" else 1


# ------------------------------------------------------------------ cell


def _print_cell(fields: RMCellFields) -> None:
    print(f"direction: {fields.direction.name.lower()}")
    for name in ("bn", "ci", "ni"):
        print(f"{name}: {getattr(fields, name)}")
    for name in ("er", "ccr", "mcr"):
        print(f"{name}: {getattr(fields, name)} cells/s")
    print(f"vc: {fields.vc}")
    print(f"origin: {fields.origin}")
    print(f"seq: {fields.seq}")


def cmd_cell(args) -> int:
    if args.encode:
        if args.er is None:
            return _error_block(["--encode needs at least --er"])
        try:
            fields = RMCellFields(
                direction=Direction.BACKWARD if args.direction == "backward" else Direction.FORWARD,
                bn=args.bn,
                ci=args.ci,
                ni=args.ni,
                er=args.er,
                ccr=args.ccr,
                mcr=args.mcr,
                vc=args.vc,
                origin=args.origin,
                seq=args.seq,
            )
            print(encode_cell(fields).hex())
        except (ValueError, CodecError) as e:
            print(f"error: {e}")
            return 1
        return 0
    if not args.hex:
        return _error_block(["give a 53-byte hex string, or --encode with field flags"])
    try:
        data = bytes.fromhex("".join(args.hex))
    except ValueError:
        return _error_block(["not valid hex"])
    try:
        fields, _header = decode_cell(data)
    except CodecError as e:
        print(f"error: {e}")
        return 1
    _print_cell(fields)
    return 0


# ------------------------------------------------------------------ validate


def cmd_validate(args) -> int:
    try:
        sc = _load(args.scenario)
        net = sc.compile()
    except ScenarioError as e:
        return _error_block(e.errors)
    except TopologyError as e:
        return _error_block(e.args[0])
    print("ok")
    print(f"nodes: {len(sc.nodes)}")
    print(f"links: {len(sc.links)}")
    print(f"vcs: {len(sc.vcs)}")
    print(f"sources: {len(sc.source_params)}")
    print(f"events: {len(sc.events)}")
    print(f"flows: {sum(len(net.flows_on_link(l.id)) for l in sc.links)}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abrsim",
        description="cell-level simulation of explicit-rate flow control on multipoint connections",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario and write trace, metrics, summary, figures")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", default="out", help="output directory (default: out)")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--quantize", action="store_true", help="force 16-bit rate rounding at every hop")
    p_run.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p_run.set_defaults(func=cmd_run)

    p_fair = sub.add_parser("fairness", help="print the four max-min allocations and their certificates")
    p_fair.add_argument("scenario")
    p_fair.add_argument("--out", default=".", help="directory for fairness.csv (default: .)")
    p_fair.set_defaults(func=cmd_fairness)

    p_cmp = sub.add_parser("compare", help="run a scenario and compare steady state against an oracle")
    p_cmp.add_argument("scenario")
    p_cmp.add_argument("--definition", default="source",
                       choices=[d.value for d in FairnessDefinition])
    p_cmp.add_argument("--epsilon", type=float, default=None, help="relative tolerance (default: scenario)")
    p_cmp.add_argument("--window", default=None, help="steady-state window START:END seconds")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--quantize", action="store_true")
    p_cmp.set_defaults(func=cmd_compare)

    p_cell = sub.add_parser("cell", help="decode 53 hex-encoded bytes, or --encode fields to hex")
    p_cell.add_argument("hex", nargs="*", help="hex string (spaces allowed)")
    p_cell.add_argument("--encode", action="store_true")
    p_cell.add_argument("--direction", choices=["forward", "backward"], default="forward")
    p_cell.add_argument("--bn", type=int, default=0)
    p_cell.add_argument("--ci", type=int, default=0)
    p_cell.add_argument("--ni", type=int, default=0)
    p_cell.add_argument("--er", type=float, default=None)
    p_cell.add_argument("--ccr", type=float, default=0.0)
    p_cell.add_argument("--mcr", type=float, default=0.0)
    p_cell.add_argument("--vc", type=int, default=0)
    p_cell.add_argument("--origin", type=int, default=0)
    p_cell.add_argument("--seq", type=int, default=0)
    p_cell.set_defaults(func=cmd_cell)

    p_val = sub.add_parser("validate", help="check a scenario file; errors carry line numbers")
    p_val.add_argument("scenario")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
