"""Scenario files: parsing, validation, canonical formatting.

The format is line-oriented text: ``[section]`` headers open records,
``key = value`` lines fill them, ``#`` starts a comment.  Records may appear
in any order; cross references are resolved once the whole file is read.

Sections and their keys:

``[run]``
    duration, seed, window_start, window_end, epsilon, quantize,
    control_interval
``[node]``
    id
``[link]``
    id, from, to, capacity, delay, buffer
``[vc]``
    id, kind, root, destination (repeatable), link (repeatable)
``[source]``
    vc, id, attach, pcr, mcr, icr, rif, rdf, nrm, demand
``[node_config]``
    node (an id, or ``*`` for the scenario-wide default), variant,
    subdivision, algorithm, utilization, averaging, ci_threshold,
    nr_timeout, overload, headroom, erase_origin, mark_fraction
``[event]``
    time, kind (capacity | demand | silence), link, vc, source, node, value

Rates are ``<x> cells/s`` or ``<x> Mb/s`` (converted at 53-byte cells);
durations are ``<x> s`` or ``<x> ms``; bare numbers mean cells/s and
seconds.  ``rif`` and ``rdf`` accept ``1/16`` style fractions.  ``auto``
keeps an adaptive default (icr, ci_threshold, nr_timeout); ``none`` means
unbounded (buffer) or greedy (demand); ``nr_timeout`` also accepts ``inf``.

Unknown sections and unknown keys are rejected, with line numbers.

:func:`format_scenario` renders a scenario back to canonical text with every
constant default made explicit.  Run summaries embed that text after a
``--- scenario ---`` marker so any run can be reproduced from its summary
alone; :func:`extract_scenario_text` recovers it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .branchpoint import Variant
from .endsystem import SourceParams
from .mergepoint import SubdivisionMode
from .model import (
    Link,
    LinkId,
    NodeId,
    SourceId,
    VcId,
    VcKind,
    VirtualConnection,
    compile_network,
    validate_topology,
)
from .switchalloc import MARK_FRACTION, Algorithm

CELL_BITS = 53 * 8

SCENARIO_MARKER = "--- scenario ---"


class ScenarioError(ValueError):
    """All problems found in one parse, each tagged with a line number."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    duration: float = 10.0
    seed: int = 1
    window_start: float = 0.0
    window_end: float | None = None
    epsilon: float = 0.05
    quantize: bool = False
    control_interval: float = 0.010

    def __post_init__(self):
        if self.window_end is None:
            object.__setattr__(self, "window_end", self.duration)


@dataclass(frozen=True)
class NodeConfig:
    """Per-node behaviour knobs; ``*`` in a file sets the scenario default."""

    variant: Variant = Variant.V2_WAITALL
    subdivision: SubdivisionMode = SubdivisionMode.EQUAL
    algorithm: Algorithm = Algorithm.CONSISTENT_MARKING
    utilization: float = 0.95
    averaging: float = 0.010
    #: None picks half the link buffer, or the unbounded default
    ci_threshold: int | None = None
    #: None adapts to the observed FRM cadence; math.inf disables exclusion
    nr_timeout: float | None = None
    overload: float = 0.5
    headroom: float = 1.2
    erase_origin: bool = False
    mark_fraction: float = MARK_FRACTION


class EventKind:
    CAPACITY = "capacity"
    DEMAND = "demand"
    SILENCE = "silence"

    ALL = (CAPACITY, DEMAND, SILENCE)


@dataclass(frozen=True)
class ScenarioEvent:
    time: float
    kind: str
    link: LinkId | None = None
    vc: VcId | None = None
    source: SourceId | None = None
    node: NodeId | None = None
    #: new capacity or demand; None means greedy (demand events only)
    value: float | None = None


@dataclass
class Scenario:
    run: RunConfig = field(default_factory=RunConfig)
    nodes: tuple[NodeId, ...] = ()
    links: tuple[Link, ...] = ()
    vcs: tuple[VirtualConnection, ...] = ()
    source_params: dict[tuple[VcId, SourceId], SourceParams] = field(default_factory=dict)
    node_defaults: NodeConfig = field(default_factory=NodeConfig)
    #: fully resolved per-node configurations (defaults already folded in)
    node_overrides: dict[NodeId, NodeConfig] = field(default_factory=dict)
    events: tuple[ScenarioEvent, ...] = ()

    def node_config(self, node: NodeId) -> NodeConfig:
        return self.node_overrides.get(node, self.node_defaults)

    def compile(self):
        return compile_network(self.nodes, self.links, self.vcs)


# ---------------------------------------------------------------- value parsing


def _number(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("nan is not a value")
    if math.isinf(v):
        raise ValueError("inf is not allowed here")
    return v


def parse_rate(text: str) -> float:
    """cells/s, with ``Mb/s`` converted at 53-byte cells."""
    t = text.strip()
    if t.endswith("cells/s"):
        return _number(t[: -len("cells/s")])
    if t.endswith("Mb/s"):
        return _number(t[: -len("Mb/s")]) * 1e6 / CELL_BITS
    return _number(t)


def parse_duration(text: str) -> float:
    t = text.strip()
    if t.endswith("ms"):
        return _number(t[:-2]) / 1000.0
    if t.endswith("s"):
        return _number(t[:-1])
    return _number(t)


def parse_fraction(text: str) -> float:
    t = text.strip()
    if "/" in t:
        num, _, den = t.partition("/")
        d = _number(den)
        if d == 0:
            raise ValueError("zero denominator")
        return _number(num) / d
    return _number(t)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _parse_int(text: str) -> int:
    return int(text.strip(), 10)


def _fmt(v: float) -> str:
    """Shortest exact decimal for a float; keeps the canonical text bit-stable."""
    return repr(float(v))


# ---------------------------------------------------------------- tokenizing


@dataclass
class _Rec:
    name: str
    line: int
    pairs: dict[str, list[tuple[int, str]]] = field(default_factory=dict)


_KEYS = {
    "run": {"duration", "seed", "window_start", "window_end", "epsilon", "quantize", "control_interval"},
    "node": {"id"},
    "link": {"id", "from", "to", "capacity", "delay", "buffer"},
    "vc": {"id", "kind", "root", "destination", "link"},
    "source": {"vc", "id", "attach", "pcr", "mcr", "icr", "rif", "rdf", "nrm", "demand"},
    "node_config": {
        "node", "variant", "subdivision", "algorithm", "utilization", "averaging",
        "ci_threshold", "nr_timeout", "overload", "headroom", "erase_origin", "mark_fraction",
    },
    "event": {"time", "kind", "link", "vc", "source", "node", "value"},
}

_REPEATABLE = {("vc", "destination"), ("vc", "link")}


def _tokenize(text: str) -> tuple[list[_Rec], list[str]]:
    recs: list[_Rec] = []
    errors: list[str] = []
    current: _Rec | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _KEYS:
                errors.append(f"line {lineno}: unknown section [{name}]")
                current = None
                continue
            current = _Rec(name, lineno)
            recs.append(current)
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value' or a [section] header")
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if current is None:
            errors.append(f"line {lineno}: {key!r} outside any section")
            continue
        if key not in _KEYS[current.name]:
            errors.append(f"line {lineno}: unknown key {key!r} in [{current.name}]")
            continue
        slot = current.pairs.setdefault(key, [])
        if slot and (current.name, key) not in _REPEATABLE:
            errors.append(f"line {lineno}: duplicate key {key!r} in [{current.name}]")
            continue
        slot.append((lineno, value))
    return recs, errors


class _Reader:
    """Pulls typed values out of one record, reporting errors with lines."""

    def __init__(self, rec: _Rec, errors: list[str]):
        self.rec = rec
        self.errors = errors

    def get(self, key: str, parse, default=None, required: bool = False):
        slot = self.rec.pairs.get(key)
        if not slot:
            if required:
                self.errors.append(
                    f"line {self.rec.line}: [{self.rec.name}] is missing required key {key!r}"
                )
            return default
        lineno, raw = slot[0]
        try:
            return parse(raw)
        except ValueError as exc:
            self.errors.append(f"line {lineno}: {key}: {exc}")
            return default

    def get_all(self, key: str, parse) -> list:
        out = []
        for lineno, raw in self.rec.pairs.get(key, []):
            try:
                out.append(parse(raw))
            except ValueError as exc:
                self.errors.append(f"line {lineno}: {key}: {exc}")
        return out

    def line_of(self, key: str) -> int:
        slot = self.rec.pairs.get(key)
        return slot[0][0] if slot else self.rec.line


def _enum(cls, label: str):
    choices = ", ".join(m.value for m in cls)
    def parse(text: str):
        try:
            return cls(text.strip())
        except ValueError:
            raise ValueError(f"unknown {label} {text.strip()!r} (choices: {choices})")
    return parse


def _maybe(parse, *, none=("none",), auto=()):
    """Wrap a parser so the given sentinel words map to None."""
    sentinels = {s.lower() for s in none} | {s.lower() for s in auto}
    def wrapped(text: str):
        if text.strip().lower() in sentinels:
            return None
        return parse(text)
    return wrapped


def _timeout(text: str) -> float | None:
    t = text.strip().lower()
    if t == "auto":
        return None
    if t == "inf":
        return math.inf
    v = parse_duration(text)
    if v <= 0:
        raise ValueError("timeout must be positive, 'auto', or 'inf'")
    return v


# ---------------------------------------------------------------- building


def parse_scenario(text: str) -> Scenario:
    recs, errors = _tokenize(text)

    run = RunConfig()
    run_seen = False
    nodes: list[tuple[int, NodeId]] = []
    links: list[tuple[int, Link]] = []
    vc_recs: list[tuple[_Rec, dict]] = []
    source_recs: list[tuple[_Rec, dict]] = []
    config_recs: list[tuple[_Rec, object, dict]] = []
    event_recs: list[tuple[_Rec, ScenarioEvent]] = []

    for rec in recs:
        r = _Reader(rec, errors)
        if rec.name == "run":
            if run_seen:
                errors.append(f"line {rec.line}: more than one [run] section")
                continue
            run_seen = True
            duration = r.get("duration", parse_duration, default=10.0)
            window_end = r.get("window_end", parse_duration)
            run = RunConfig(
                duration=duration,
                seed=r.get("seed", _parse_int, default=1),
                window_start=r.get("window_start", parse_duration, default=0.0),
                window_end=window_end,
                epsilon=r.get("epsilon", _number, default=0.05),
                quantize=r.get("quantize", parse_bool, default=False),
                control_interval=r.get("control_interval", parse_duration, default=0.010),
            )
        elif rec.name == "node":
            nid = r.get("id", _parse_int, required=True)
            if nid is not None:
                nodes.append((rec.line, nid))
        elif rec.name == "link":
            lid = r.get("id", _parse_int, required=True)
            src = r.get("from", _parse_int, required=True)
            dst = r.get("to", _parse_int, required=True)
            capacity = r.get("capacity", parse_rate, required=True)
            delay = r.get("delay", parse_duration, default=0.0)
            buffer_limit = r.get("buffer", _maybe(_parse_int), default=None)
            if None in (lid, src, dst, capacity):
                continue
            try:
                if capacity <= 0:
                    raise ValueError("capacity must be positive")
                if delay < 0:
                    raise ValueError("delay must be non-negative")
                if buffer_limit is not None and buffer_limit <= 0:
                    raise ValueError("buffer must be positive or none")
                links.append((rec.line, Link(lid, src, dst, capacity, delay, buffer_limit)))
            except ValueError as exc:
                errors.append(f"line {rec.line}: link {lid}: {exc}")
        elif rec.name == "vc":
            vc_recs.append((rec, {
                "id": r.get("id", _parse_int, required=True),
                "kind": r.get("kind", _enum(VcKind, "kind"), required=True),
                "root": r.get("root", _parse_int),
                "destinations": r.get_all("destination", _parse_int),
                "links": r.get_all("link", _parse_int),
            }))
        elif rec.name == "source":
            source_recs.append((rec, {
                "vc": r.get("vc", _parse_int, required=True),
                "id": r.get("id", _parse_int, required=True),
                "attach": r.get("attach", _parse_int, required=True),
                "pcr": r.get("pcr", parse_rate, required=True),
                "mcr": r.get("mcr", parse_rate, default=0.0),
                "icr": r.get("icr", _maybe(parse_rate, auto=("auto",))),
                "rif": r.get("rif", parse_fraction, default=1.0 / 16),
                "rdf": r.get("rdf", parse_fraction, default=1.0 / 16),
                "nrm": r.get("nrm", _parse_int, default=32),
                "demand": r.get("demand", _maybe(parse_rate), default=None),
            }))
        elif rec.name == "node_config":
            target = r.get("node", lambda t: t.strip(), required=True)
            kwargs = {}
            for key, parse in (
                ("variant", _enum(Variant, "variant")),
                ("subdivision", _enum(SubdivisionMode, "subdivision")),
                ("algorithm", _enum(Algorithm, "algorithm")),
                ("utilization", _number),
                ("averaging", parse_duration),
                ("ci_threshold", _maybe(_parse_int, auto=("auto",))),
                ("nr_timeout", _timeout),
                ("overload", _number),
                ("headroom", _number),
                ("erase_origin", parse_bool),
                ("mark_fraction", _number),
            ):
                if key in rec.pairs:
                    kwargs[key] = r.get(key, parse)
            config_recs.append((rec, target, kwargs))
        elif rec.name == "event":
            ev = ScenarioEvent(
                time=r.get("time", parse_duration, default=0.0),
                kind=r.get("kind", lambda t: t.strip(), required=True) or "",
                link=r.get("link", _parse_int),
                vc=r.get("vc", _parse_int),
                source=r.get("source", _parse_int),
                node=r.get("node", _parse_int),
                value=r.get("value", _maybe(parse_rate)),
            )
            if ev.kind:
                event_recs.append((rec, ev))

    # ids must be unique within their namespace
    def check_unique(pairs, what):
        seen = {}
        for line, item in pairs:
            key = item.id if hasattr(item, "id") else item
            if key in seen:
                errors.append(f"line {line}: duplicate {what} {key} (first at line {seen[key]})")
            else:
                seen[key] = line
        return seen

    node_ids = check_unique(nodes, "node")
    check_unique(links, "link")

    # sources attach to their connection before the connection is assembled
    by_vc: dict[int, dict[int, int]] = {}
    params: dict[tuple[int, int], SourceParams] = {}
    seen_sources: dict[tuple[int, int], int] = {}
    for rec, s in source_recs:
        if None in (s["vc"], s["id"], s["attach"], s["pcr"]):
            continue
        key = (s["vc"], s["id"])
        if key in seen_sources:
            errors.append(
                f"line {rec.line}: duplicate source {s['id']} on vc {s['vc']} "
                f"(first at line {seen_sources[key]})"
            )
            continue
        seen_sources[key] = rec.line
        try:
            params[key] = SourceParams(
                pcr=s["pcr"], mcr=s["mcr"], icr=s["icr"],
                rif=s["rif"], rdf=s["rdf"], nrm=s["nrm"], demand=s["demand"],
            )
        except ValueError as exc:
            errors.append(f"line {rec.line}: source {s['id']} on vc {s['vc']}: {exc}")
            continue
        by_vc.setdefault(s["vc"], {})[s["id"]] = s["attach"]

    vcs: list[VirtualConnection] = []
    seen_vcs: dict[int, int] = {}
    for rec, v in vc_recs:
        if v["id"] is None or v["kind"] is None:
            continue
        if v["id"] in seen_vcs:
            errors.append(f"line {rec.line}: duplicate vc {v['id']} (first at line {seen_vcs[v['id']]})")
            continue
        seen_vcs[v["id"]] = rec.line
        if not v["links"]:
            errors.append(f"line {rec.line}: vc {v['id']} has no 'link =' lines")
            continue
        vcs.append(VirtualConnection(
            id=v["id"],
            kind=v["kind"],
            sources=by_vc.get(v["id"], {}),
            destinations=frozenset(v["destinations"]),
            edges=frozenset(v["links"]),
            root=v["root"],
        ))
    for (vc_id, src_id), line in seen_sources.items():
        if (vc_id, src_id) in params and vc_id not in seen_vcs:
            errors.append(f"line {line}: source {src_id} references undeclared vc {vc_id}")

    # node configurations: '*' defaults first, then per-node overrides on top
    defaults = NodeConfig()
    default_line = None
    for rec, target, kwargs in config_recs:
        if target == "*":
            if default_line is not None:
                errors.append(f"line {rec.line}: more than one [node_config] for '*'")
                continue
            default_line = rec.line
            defaults = NodeConfig(**{k: v for k, v in kwargs.items() if v is not None or k in ("ci_threshold", "nr_timeout")})
            errors.extend(f"line {rec.line}: {msg}" for msg in _config_range_errors(defaults))
    overrides: dict[NodeId, NodeConfig] = {}
    for rec, target, kwargs in config_recs:
        if target == "*":
            continue
        try:
            nid = int(target)
        except ValueError:
            errors.append(f"line {rec.line}: node must be an id or '*', got {target!r}")
            continue
        if nid not in node_ids:
            errors.append(f"line {rec.line}: [node_config] for undeclared node {nid}")
            continue
        if nid in overrides:
            errors.append(f"line {rec.line}: more than one [node_config] for node {nid}")
            continue
        overrides[nid] = replace(defaults, **{k: v for k, v in kwargs.items() if v is not None or k in ("ci_threshold", "nr_timeout")})
        errors.extend(f"line {rec.line}: {msg}" for msg in _config_range_errors(overrides[nid]))

    scenario = Scenario(
        run=run,
        nodes=tuple(nid for _, nid in nodes),
        links=tuple(link for _, link in links),
        vcs=tuple(vcs),
        source_params=params,
        node_defaults=defaults,
        node_overrides=overrides,
        events=tuple(ev for _, ev in sorted(
            ((rec, ev) for rec, ev in event_recs), key=lambda pair: (pair[1].time, pair[0].line)
        )),
    )

    _check_events(scenario, event_recs, errors)
    if run.duration > 0 and not (0.0 <= run.window_start < run.window_end <= run.duration):
        errors.append(
            f"run: metrics window [{_fmt(run.window_start)}, {_fmt(run.window_end)}] "
            f"must sit inside the run [0, {_fmt(run.duration)}]"
        )

    if not errors:
        errors.extend(f"topology: {msg}" for msg in _topology_errors(scenario))
    if errors:
        raise ScenarioError(errors)
    return scenario


def _config_range_errors(cfg: NodeConfig) -> list[str]:
    out = []
    if not 0.0 < cfg.utilization <= 1.0:
        out.append(f"utilization must be in (0, 1], got {_fmt(cfg.utilization)}")
    if not 0.0 < cfg.overload <= 1.0:
        out.append(f"overload must be in (0, 1], got {_fmt(cfg.overload)}")
    if cfg.headroom <= 0.0:
        # a zero share would silence a source permanently
        out.append(f"headroom must be positive, got {_fmt(cfg.headroom)}")
    if not 0.0 < cfg.mark_fraction <= 1.0:
        out.append(f"mark_fraction must be in (0, 1], got {_fmt(cfg.mark_fraction)}")
    if cfg.averaging <= 0.0:
        out.append("averaging must be positive")
    return out


def _topology_errors(s: Scenario) -> list[str]:
    return validate_topology(s.nodes, s.links, s.vcs)


def _check_events(s: Scenario, event_recs, errors: list[str]) -> None:
    link_ids = {l.id for l in s.links}
    vc_map = {vc.id: vc for vc in s.vcs}
    for rec, ev in event_recs:
        where = f"line {rec.line}: event"
        if ev.kind not in EventKind.ALL:
            errors.append(f"{where}: unknown kind {ev.kind!r} (choices: {', '.join(EventKind.ALL)})")
            continue
        if ev.time < 0:
            errors.append(f"{where}: time must be non-negative")
        if ev.kind == EventKind.CAPACITY:
            if ev.link is None or ev.value is None:
                errors.append(f"{where}: capacity needs 'link' and a rate 'value'")
            elif ev.link not in link_ids:
                errors.append(f"{where}: unknown link {ev.link}")
            elif ev.value <= 0:
                errors.append(f"{where}: capacity must be positive")
        elif ev.kind == EventKind.DEMAND:
            if ev.vc is None or ev.source is None or "value" not in rec.pairs:
                errors.append(f"{where}: demand needs 'vc', 'source' and 'value' (a rate or none)")
            elif ev.vc not in vc_map or ev.source not in vc_map[ev.vc].sources:
                errors.append(f"{where}: no source {ev.source} on vc {ev.vc}")
        elif ev.kind == EventKind.SILENCE:
            if ev.vc is None or (ev.source is None) == (ev.node is None):
                errors.append(f"{where}: silence needs 'vc' and exactly one of 'source' or 'node'")
            elif ev.vc not in vc_map:
                errors.append(f"{where}: unknown vc {ev.vc}")
            elif ev.source is not None and ev.source not in vc_map[ev.vc].sources:
                errors.append(f"{where}: no source {ev.source} on vc {ev.vc}")
            elif ev.node is not None and ev.node not in vc_map[ev.vc].destinations:
                errors.append(f"{where}: node {ev.node} is not a destination of vc {ev.vc}")


# ---------------------------------------------------------------- formatting


def _fmt_rate(v: float | None) -> str:
    return "none" if v is None else f"{_fmt(v)} cells/s"


def _fmt_time(v: float) -> str:
    return f"{_fmt(v)} s"


def _fmt_bool(v: bool) -> str:
    return "on" if v else "off"


def _node_config_lines(target: str, cfg: NodeConfig) -> list[str]:
    return [
        "[node_config]",
        f"node = {target}",
        f"variant = {cfg.variant.value}",
        f"subdivision = {cfg.subdivision.value}",
        f"algorithm = {cfg.algorithm.value}",
        f"utilization = {_fmt(cfg.utilization)}",
        f"averaging = {_fmt_time(cfg.averaging)}",
        f"ci_threshold = {'auto' if cfg.ci_threshold is None else cfg.ci_threshold}",
        "nr_timeout = " + ("auto" if cfg.nr_timeout is None else ("inf" if math.isinf(cfg.nr_timeout) else _fmt_time(cfg.nr_timeout))),
        f"overload = {_fmt(cfg.overload)}",
        f"headroom = {_fmt(cfg.headroom)}",
        f"erase_origin = {_fmt_bool(cfg.erase_origin)}",
        f"mark_fraction = {_fmt(cfg.mark_fraction)}",
    ]


def format_scenario(s: Scenario) -> str:
    """Canonical text: every constant default explicit, deterministic order."""
    out: list[str] = [
        "[run]",
        f"duration = {_fmt_time(s.run.duration)}",
        f"seed = {s.run.seed}",
        f"window_start = {_fmt_time(s.run.window_start)}",
        f"window_end = {_fmt_time(s.run.window_end)}",
        f"epsilon = {_fmt(s.run.epsilon)}",
        f"quantize = {_fmt_bool(s.run.quantize)}",
        f"control_interval = {_fmt_time(s.run.control_interval)}",
    ]
    for nid in sorted(s.nodes):
        out += ["", "[node]", f"id = {nid}"]
    for link in sorted(s.links, key=lambda l: l.id):
        out += [
            "", "[link]",
            f"id = {link.id}",
            f"from = {link.src}",
            f"to = {link.dst}",
            f"capacity = {_fmt_rate(link.capacity)}",
            f"delay = {_fmt_time(link.delay)}",
            f"buffer = {'none' if link.buffer_limit is None else link.buffer_limit}",
        ]
    for vc in sorted(s.vcs, key=lambda v: v.id):
        out += ["", "[vc]", f"id = {vc.id}", f"kind = {vc.kind.value}"]
        if vc.root is not None:
            out.append(f"root = {vc.root}")
        out += [f"destination = {d}" for d in sorted(vc.destinations)]
        out += [f"link = {e}" for e in sorted(vc.edges)]
    for (vc_id, src_id) in sorted(s.source_params):
        p = s.source_params[(vc_id, src_id)]
        vc = next(v for v in s.vcs if v.id == vc_id)
        out += [
            "", "[source]",
            f"vc = {vc_id}",
            f"id = {src_id}",
            f"attach = {vc.sources[src_id]}",
            f"pcr = {_fmt_rate(p.pcr)}",
            f"mcr = {_fmt_rate(p.mcr)}",
            f"icr = {_fmt_rate(p.icr)}",
            f"rif = {_fmt(p.rif)}",
            f"rdf = {_fmt(p.rdf)}",
            f"nrm = {p.nrm}",
            f"demand = {_fmt_rate(p.demand)}",
        ]
    out += [""] + _node_config_lines("*", s.node_defaults)
    for nid in sorted(s.node_overrides):
        out += [""] + _node_config_lines(str(nid), s.node_overrides[nid])
    for ev in s.events:
        out += ["", "[event]", f"time = {_fmt_time(ev.time)}", f"kind = {ev.kind}"]
        if ev.link is not None:
            out.append(f"link = {ev.link}")
        if ev.vc is not None:
            out.append(f"vc = {ev.vc}")
        if ev.source is not None:
            out.append(f"source = {ev.source}")
        if ev.node is not None:
            out.append(f"node = {ev.node}")
        if ev.kind in (EventKind.CAPACITY, EventKind.DEMAND):
            out.append(f"value = {_fmt_rate(ev.value)}")
    return "\n".join(out) + "\n"


def extract_scenario_text(summary_text: str) -> str:
    """Recover the embedded canonical scenario from a run summary."""
    marker = summary_text.find(SCENARIO_MARKER)
    if marker < 0:
        raise ValueError(f"no {SCENARIO_MARKER!r} marker in summary")
    start = summary_text.index("\n", marker) + 1
    return summary_text[start:]
