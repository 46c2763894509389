"""Deterministic event-driven simulation of closed-loop rate control.

One :class:`Engine` owns one run: a compiled network, per-link FIFO and
allocation state, per-node consolidation and merge state, and the sources.
Events live in a single heap keyed (time, sequence); everything that could
depend on iteration order walks sorted containers, so a (scenario, seed)
pair always produces the identical cell trace.

Forward path of one cell hop: merge bookkeeping where streams join, then
either delivery (turnaround of forward RM cells) or replication to the
out links, with per-flow rate measurement at every link enqueue.

Backward path: a branch point absorbs per-branch feedback and emits
consolidated cells, which are stamped with the allocation of every branch
link still considered responsive; everywhere else the cell is stamped with
the link it climbed.  Merge points subdivide and re-address feedback per
credited branch.  Feedback reaching a source must carry that source's own
origin; anything else counts as a misrouted-feedback fault and is dropped.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import math
import random
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO

from . import branchpoint, mergepoint, switchalloc
from .branchpoint import ConsolidationState, Variant
from .codec import (
    CELL_BYTES,
    Direction,
    RMCellFields,
    decode_rate,
    encode_cell,
    encode_rate,
)
from .endsystem import (
    DestinationState,
    SourceParams,
    SourceState,
    destination_on_frm,
    effective_rate,
    new_source_state,
    source_next_cell,
    source_on_brm,
)
from .mergepoint import MergeState
from .metrics import Recorder, RunResult
from .model import (
    CompiledNetwork,
    DataCell,
    FlowKey,
    NodeId,
    PORT_LINK,
    PORT_SOURCE,
    SourceId,
    VcId,
)
from .scenario import EventKind, Scenario, ScenarioEvent
from .switchalloc import LinkAllocState

_EV_TICK = 0
_EV_SOURCE = 1
_EV_ARRIVAL = 2
_EV_SCENARIO = 3

_TRACE_HEAD = struct.Struct("<QI")
_TIME_EPS = 1e-12

#: sources start inside (0, 1 ms]; the seed de-synchronizes their phases
_START_JITTER = 1e-3


@dataclass
class _InFlight:
    cell: DataCell | RMCellFields
    vc: VcId
    lineage: int
    node: NodeId
    port: tuple[str, int]
    backward: bool = False


@dataclass
class _SourceRuntime:
    key: tuple[VcId, SourceId]
    attach: NodeId
    lineage: int
    params: SourceParams
    state: SourceState
    silenced: bool = False
    pending_timers: int = 0
    cells_sent: int = 0


def _data_bytes(cell: DataCell) -> bytes:
    # deterministic stand-in wire form; only the trace digest consumes it
    return struct.pack(
        "<BBHI", 0xD0, cell.origin & 0xFF, cell.vc & 0xFFFF, cell.seq & 0xFFFFFFFF
    ).ljust(CELL_BYTES, b"\x00")


def _cell_bytes(cell: DataCell | RMCellFields) -> bytes:
    if isinstance(cell, DataCell):
        return _data_bytes(cell)
    return encode_cell(cell)


class Engine:
    def __init__(self, scenario: Scenario, trace_sink: BinaryIO | None = None):
        self.scenario = scenario
        self.net: CompiledNetwork = scenario.compile()
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._sink = trace_sink
        self._sha = hashlib.sha256()
        self.trace_records = 0
        self.quantize = scenario.run.quantize
        self.misrouted_feedback = 0
        self.delivered: dict[tuple[VcId, NodeId], int] = {}
        self.recorder = Recorder(scenario)

        self.fwd: dict[int, LinkAllocState] = {}
        self._rev_busy: dict[int, float] = {}
        for link in sorted(scenario.links, key=lambda l: l.id):
            cfg = scenario.node_config(link.src)
            self.fwd[link.id] = LinkAllocState(
                capacity=link.capacity,
                target_utilization=cfg.utilization,
                averaging_interval=cfg.averaging,
                buffer_limit=link.buffer_limit,
                ci_threshold=cfg.ci_threshold,
                algorithm=cfg.algorithm,
                mark_fraction=cfg.mark_fraction,
            )
            self._rev_busy[link.id] = 0.0
            self.recorder.register_link(link.id)

        self.branchstates: dict[tuple[NodeId, VcId], ConsolidationState] = {}
        self.merges: dict[tuple[NodeId, VcId], MergeState] = {}
        self.dests: dict[tuple[VcId, NodeId], DestinationState] = {}
        for vc_id in sorted(self.net.vcs):
            cvc = self.net.vcs[vc_id]
            peak = max(scenario.source_params[(vc_id, s)].pcr for s in cvc.vc.sources)
            for node in sorted(cvc.node_plans):
                plan = cvc.node_plans[node]
                cfg = scenario.node_config(node)
                if plan.is_branch:
                    self.branchstates[(node, vc_id)] = ConsolidationState(
                        branches=tuple(plan.out_links),
                        variant=cfg.variant,
                        mer_sentinel=peak,
                        overload_fraction=cfg.overload,
                        nr_timeout=cfg.nr_timeout,
                        created_at=0.0,
                    )
                if plan.is_merge:
                    branch_links = tuple(p[1] for p in plan.merge_branches)
                    origin: dict[int, int] = {}
                    lineage: dict[int, int] = {}
                    for b in branch_links:
                        # the compiler guarantees one lineage per merge in-link
                        (lin,) = cvc.lineage_on_link[b]
                        lineage[b] = lin
                        origin[b] = cvc.lineages[lin].wire_origin
                    self.merges[(node, vc_id)] = MergeState(
                        branches=branch_links,
                        branch_origin=origin,
                        branch_lineage=lineage,
                        subdivision=cfg.subdivision,
                        headroom=cfg.headroom,
                        erase_origin=cfg.erase_origin,
                        averaging_interval=cfg.averaging,
                    )
            for node in sorted(cvc.vc.destinations):
                self.dests[(vc_id, node)] = DestinationState()
                self.delivered[(vc_id, node)] = 0

        rng = random.Random(scenario.run.seed)
        self.sources: dict[tuple[VcId, SourceId], _SourceRuntime] = {}
        for vc_id in sorted(self.net.vcs):
            cvc = self.net.vcs[vc_id]
            for sid in sorted(cvc.vc.sources):
                attach = cvc.vc.sources[sid]
                plan = cvc.node_plans[attach]
                lin = next(
                    l for l, p in sorted(plan.up_port.items()) if p == (PORT_SOURCE, sid)
                )
                params = scenario.source_params[(vc_id, sid)]
                start = (1.0 - rng.random()) * _START_JITTER
                rt = _SourceRuntime(
                    key=(vc_id, sid),
                    attach=attach,
                    lineage=lin,
                    params=params,
                    state=new_source_state(params, now=start),
                )
                self.sources[(vc_id, sid)] = rt
                hops = max(
                    (len(path) for (s, _d), path in cvc.paths.items() if s == sid),
                    default=0,
                )
                self.recorder.register_source((vc_id, sid), hops)
                self._schedule(start, _EV_SOURCE, rt.key)
                rt.pending_timers += 1

        self._tick_index = 0
        self._schedule(0.0, _EV_TICK, None)
        for ev in scenario.events:
            self._schedule(ev.time, _EV_SCENARIO, ev)

    # ------------------------------------------------------------- plumbing

    def _schedule(self, t: float, kind: int, payload) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), kind, payload))

    def _trace(self, link_id: int, backward: bool, cell) -> None:
        t_ns = round(self.now * 1e9)
        rec = _TRACE_HEAD.pack(t_ns, (link_id << 1) | int(backward)) + _cell_bytes(cell)
        self._sha.update(rec)
        if self._sink is not None:
            self._sink.write(rec)
        self.trace_records += 1

    def _q_er(self, er: float) -> float:
        if not self.quantize:
            return er
        return decode_rate(encode_rate(er))

    def _q_brm(self, brm: RMCellFields) -> RMCellFields:
        if not self.quantize:
            return brm
        return replace(brm, er=self._q_er(brm.er))

    # ------------------------------------------------------------- main loop

    def run(self) -> RunResult:
        duration = self.scenario.run.duration
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            if t > duration + _TIME_EPS:
                break
            self.now = t
            if kind == _EV_ARRIVAL:
                self._on_arrival(payload)
            elif kind == _EV_SOURCE:
                self._on_source_timer(payload)
            elif kind == _EV_TICK:
                self._on_tick()
            else:
                self._on_scenario_event(payload)
        self.now = duration
        return self._finalize()

    def _on_tick(self) -> None:
        for link_id in sorted(self.fwd):
            switchalloc.control_tick(self.fwd[link_id], self.now)
        for key in sorted(self.branchstates):
            branchpoint.check_nonresponsive(self.branchstates[key], self.now)
        self.recorder.sample(
            self.now,
            self._source_samples(),
            [(lid, switchalloc.advertised_rate(self.fwd[lid])) for lid in sorted(self.fwd)],
            lambda lid: switchalloc.queue_len(self.fwd[lid], self.now),
        )
        self._tick_index += 1
        nxt = self._tick_index * self.scenario.run.control_interval
        if nxt <= self.scenario.run.duration + _TIME_EPS:
            self._schedule(nxt, _EV_TICK, None)

    def _source_samples(self):
        out = []
        for key in sorted(self.sources):
            rt = self.sources[key]
            rate = 0.0 if rt.silenced else effective_rate(rt.state, rt.params)
            out.append((key, rt.state.acr, rate, rt.cells_sent, rt.state.frm_sent, rt.state.brm_received))
        return out

    def _on_scenario_event(self, ev: ScenarioEvent) -> None:
        if ev.kind == EventKind.CAPACITY:
            switchalloc.set_capacity(self.fwd[ev.link], self.now, ev.value)
        elif ev.kind == EventKind.DEMAND:
            rt = self.sources[(ev.vc, ev.source)]
            rt.params = replace(rt.params, demand=ev.value)
            if not rt.silenced and rt.pending_timers == 0:
                rate = effective_rate(rt.state, rt.params)
                if rate > 0:
                    last = rt.state.last_send_time
                    due = self.now if last is None else max(self.now, last + 1.0 / rate)
                    rt.state.next_send_time = due
                    self._schedule(due, _EV_SOURCE, rt.key)
                    rt.pending_timers += 1
        elif ev.kind == EventKind.SILENCE:
            if ev.source is not None:
                self.sources[(ev.vc, ev.source)].silenced = True
            else:
                self.dests[(ev.vc, ev.node)].silenced = True

    def _on_source_timer(self, key: tuple[VcId, SourceId]) -> None:
        rt = self.sources[key]
        rt.pending_timers -= 1
        if rt.silenced:
            return
        cell, nxt = source_next_cell(rt.state, rt.params, self.now, vc=key[0], origin=key[1])
        if cell is not None:
            rt.cells_sent += 1
            self._forward_cell(rt.attach, key[0], (PORT_SOURCE, key[1]), cell, rt.lineage)
        if math.isfinite(nxt) and rt.pending_timers == 0:
            self._schedule(nxt, _EV_SOURCE, key)
            rt.pending_timers += 1

    def _on_arrival(self, inf: _InFlight) -> None:
        if inf.backward:
            self._backward_cell(inf)
        else:
            self._forward_cell(inf.node, inf.vc, inf.port, inf.cell, inf.lineage)

    # ------------------------------------------------------------- forward

    def _forward_cell(self, node: NodeId, vc: VcId, port: tuple[str, int], cell, lineage: int) -> None:
        cvc = self.net.vcs[vc]
        plan = cvc.node_plans[node]
        if plan.is_merge and port in plan.merge_branches:
            ms = self.merges[(node, vc)]
            b = port[1]
            if isinstance(cell, DataCell):
                cell = mergepoint.merge_data(ms, b, cell, self.now)
            elif cell.direction is Direction.FORWARD:
                cell, served = mergepoint.on_upstream_frm(ms, b, cell, self.now)
                for bl, brm in served:
                    self._send_backward(bl, self._q_brm(brm), ms.branch_lineage[bl])
            lineage = plan.merged_lineage
        if plan.deliver:
            self._deliver(node, vc, port, cell, lineage)
            return
        if plan.is_branch:
            bst = self.branchstates[(node, vc)]
            emission = branchpoint.on_downstream_cell(bst, cell, self.now)
            if emission is not None:
                self._emit_consolidated(node, vc, plan, bst, emission)
        for out in plan.out_links:
            self._send_forward(out, vc, cell, lineage)

    def _send_forward(self, link_id: int, vc: VcId, cell, lineage: int) -> None:
        state = self.fwd[link_id]
        flow = FlowKey(vc, lineage)
        switchalloc.measure_on_cell(state, flow, self.now)
        departure = switchalloc.enqueue(state, flow, self.now)
        if departure is None:
            return
        self._trace(link_id, False, cell)
        link = self.net.links[link_id]
        self._schedule(
            departure + link.delay,
            _EV_ARRIVAL,
            _InFlight(cell, vc, lineage, link.dst, (PORT_LINK, link_id)),
        )

    def _deliver(self, node: NodeId, vc: VcId, port: tuple[str, int], cell, lineage: int) -> None:
        dst = self.dests[(vc, node)]
        if isinstance(cell, DataCell):
            self.delivered[(vc, node)] += 1
            return
        if cell.direction is not Direction.FORWARD:
            return
        brm = destination_on_frm(dst, cell)
        if brm is not None and port[0] == PORT_LINK:
            self._send_backward(port[1], brm, lineage)

    # ------------------------------------------------------------- backward

    def _send_backward(self, link_id: int, brm: RMCellFields, lineage: int) -> None:
        link = self.net.links[link_id]
        capacity = self.fwd[link_id].capacity
        departure = max(self.now, self._rev_busy[link_id]) + 1.0 / capacity
        self._rev_busy[link_id] = departure
        self._trace(link_id, True, brm)
        self.recorder.on_backward_enqueue()
        self._schedule(
            departure + link.delay,
            _EV_ARRIVAL,
            _InFlight(brm, brm.vc, lineage, link.src, (PORT_LINK, link_id), backward=True),
        )

    def _backward_cell(self, inf: _InFlight) -> None:
        node, vc, link_id = inf.node, inf.vc, inf.port[1]
        plan = self.net.vcs[vc].node_plans[node]
        # every backward RM cell is rate-stamped by its arrival link exactly
        # once, before any consolidation or fan-out sees it; the overload
        # detector must see the local queue's CI, not the raw leaf cell
        brm = self._q_brm(
            switchalloc.process_brm(self.fwd[link_id], inf.cell, FlowKey(vc, inf.lineage), self.now)
        )
        if plan.is_branch:
            bst = self.branchstates[(node, vc)]
            result = branchpoint.on_branch_brm(bst, link_id, brm, self.now)
            if result is None:
                return
            if bst.variant is Variant.NAIVE_PASSTHROUGH:
                self._route_up(node, vc, result, inf.lineage)
            else:
                self._emit_consolidated(node, vc, plan, bst, result)
            return
        self._route_up(node, vc, brm, inf.lineage)

    def _emit_consolidated(self, node: NodeId, vc: VcId, plan, bst: ConsolidationState, emission: RMCellFields) -> None:
        out = self._q_brm(emission)
        lineages = self.net.vcs[vc].lineages
        for lin in dict.fromkeys(plan.out_lineages):
            if plan.is_merge and lin == plan.merged_lineage:
                self._route_up(node, vc, out, lin)
            else:
                rec = lineages[lin]
                addressed = out if rec.wire_origin == out.origin else replace(out, origin=rec.wire_origin)
                self._route_up(node, vc, addressed, lin)

    def _route_up(self, node: NodeId, vc: VcId, brm: RMCellFields, lineage: int) -> None:
        plan = self.net.vcs[vc].node_plans[node]
        if plan.is_merge and lineage == plan.merged_lineage:
            ms = self.merges[(node, vc)]
            for bl, copy in mergepoint.on_downstream_brm(ms, brm, self.now):
                self._send_backward(bl, self._q_brm(copy), ms.branch_lineage[bl])
            return
        port = plan.up_port[lineage]
        if port[0] == PORT_SOURCE:
            self._deliver_to_source(vc, port[1], brm)
        else:
            self._send_backward(port[1], brm, lineage)

    def _deliver_to_source(self, vc: VcId, sid: SourceId, brm: RMCellFields) -> None:
        rt = self.sources[(vc, sid)]
        if brm.origin != sid:
            self.misrouted_feedback += 1
            return
        source_on_brm(rt.state, rt.params, brm)

    # ------------------------------------------------------------- results

    def _finalize(self) -> RunResult:
        r = self.recorder.result
        r.digest = self._sha.hexdigest()
        r.trace_records = self.trace_records
        r.misrouted_feedback = self.misrouted_feedback
        r.delivered = dict(self.delivered)
        for link_id in sorted(self.fwd):
            state = self.fwd[link_id]
            r.drops[link_id] = state.dropped
            switchalloc.audit_flow_table(state, len(self.net.flows_on_link(link_id)))
            r.allocations[link_id] = {
                flow: stats.recorded_allocation for flow, stats in sorted(state.flows.items())
            }
        for (node, vc_id), bst in sorted(self.branchstates.items()):
            r.branch_stats[(node, vc_id)] = {
                "emissions": bst.emissions,
                "noise_events": bst.noise_events,
                "fast_overload_emissions": bst.fast_overload_emissions,
                "nonresponsive_transitions": bst.nonresponsive_transitions,
                "liveness_alarms": bst.liveness_alarms,
                "unknown_branch_faults": bst.unknown_branch_faults,
            }
        for (node, vc_id), ms in sorted(self.merges.items()):
            r.merge_stats[(node, vc_id)] = {
                "frms_forwarded": ms.frms_forwarded,
                "copies_sent": sum(ms.copies_sent.values()),
                "pending_replacements": ms.pending_replacements,
                "pending_served": ms.pending_served,
            }
        for key in sorted(self.sources):
            r.final_acr[key] = self.sources[key].state.acr
        return r


def run_scenario(scenario: Scenario, trace_sink: BinaryIO | None = None) -> RunResult:
    return Engine(scenario, trace_sink=trace_sink).run()
