"""Run measurement: tick-sampled series, steady-state stats, summaries.

The engine calls :class:`Recorder` hooks while it runs; everything analytic
(window means, feedback ratios, convergence detection) operates on the
finished :class:`RunResult` so tests and the CLI share one code path.
"""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field

from .model import FlowKey
from .scenario import SCENARIO_MARKER, Scenario, format_scenario

SourceKey = tuple[int, int]  # (vc, source)


@dataclass
class RunResult:
    scenario: Scenario
    digest: str = ""
    trace_records: int = 0

    times: list[float] = field(default_factory=list)
    source_keys: list[SourceKey] = field(default_factory=list)
    acr: dict[SourceKey, list[float]] = field(default_factory=dict)
    rate: dict[SourceKey, list[float]] = field(default_factory=dict)
    sent: dict[SourceKey, list[int]] = field(default_factory=dict)
    frms: dict[SourceKey, list[int]] = field(default_factory=dict)
    brms: dict[SourceKey, list[int]] = field(default_factory=dict)
    queues: dict[int, list[int]] = field(default_factory=dict)
    advertised: dict[int, list[float]] = field(default_factory=dict)
    #: cumulative backward RM-cell link enqueues, sampled with `times`
    brm_transits: list[int] = field(default_factory=list)
    #: forward path length per source, for normalizing the network ratio
    hops: dict[SourceKey, int] = field(default_factory=dict)

    drops: dict[int, int] = field(default_factory=dict)
    misrouted_feedback: int = 0
    delivered: dict[tuple[int, int], int] = field(default_factory=dict)
    branch_stats: dict[tuple[int, int], dict[str, int]] = field(default_factory=dict)
    merge_stats: dict[tuple[int, int], dict[str, int]] = field(default_factory=dict)
    #: per link, per flow: the allocation recorded at the final control tick
    allocations: dict[int, dict[FlowKey, float]] = field(default_factory=dict)
    final_acr: dict[SourceKey, float] = field(default_factory=dict)


class Recorder:
    """Collects series during a run; the engine owns the sampling cadence."""

    def __init__(self, scenario: Scenario):
        self.result = RunResult(scenario=scenario)
        self._transits = 0

    def register_source(self, key: SourceKey, hops: int) -> None:
        r = self.result
        r.source_keys.append(key)
        r.hops[key] = hops
        for table in (r.acr, r.rate, r.sent, r.frms, r.brms):
            table[key] = []

    def register_link(self, link_id: int) -> None:
        self.result.queues[link_id] = []
        self.result.advertised[link_id] = []

    def on_backward_enqueue(self) -> None:
        self._transits += 1

    def sample(self, now: float, sources, links, queue_of) -> None:
        """One tick: `sources` yields (key, acr, rate, sent, frms, brms);
        `links` yields (link_id, advertised); `queue_of(link_id)` is live."""
        r = self.result
        r.times.append(now)
        for key, acr, rate, sent, frms, brms in sources:
            r.acr[key].append(acr)
            r.rate[key].append(rate)
            r.sent[key].append(sent)
            r.frms[key].append(frms)
            r.brms[key].append(brms)
        for link_id, adv in links:
            r.queues[link_id].append(queue_of(link_id))
            r.advertised[link_id].append(adv)
        r.brm_transits.append(self._transits)


# ---------------------------------------------------------------- analysis


def _at(times: list[float], series: list, t: float) -> float:
    """Series value at time t: linear interpolation between ticks."""
    if not times:
        raise ValueError("empty series")
    i = bisect.bisect_right(times, t) - 1
    if i < 0:
        return float(series[0])
    if i >= len(times) - 1:
        return float(series[-1])
    t0, t1 = times[i], times[i + 1]
    v0, v1 = float(series[i]), float(series[i + 1])
    if t1 <= t0:
        return v1
    return v0 + (v1 - v0) * (t - t0) / (t1 - t0)


def window_mean_rate(times: list[float], cum_count: list[int], start: float, end: float) -> float:
    """Mean rate over [start, end] from a cumulative count series."""
    if end <= start:
        raise ValueError("window must have positive length")
    return (_at(times, cum_count, end) - _at(times, cum_count, start)) / (end - start)


def throughput(result: RunResult, key: SourceKey, start: float | None = None, end: float | None = None) -> float:
    start = result.scenario.run.window_start if start is None else start
    end = result.scenario.run.window_end if end is None else end
    return window_mean_rate(result.times, result.sent[key], start, end)


def feedback_ratio(result: RunResult, key: SourceKey, at: float | None = None) -> float | None:
    """Cumulative backward/forward RM-cell ratio for one source; None before
    the first forward RM cell."""
    at = result.scenario.run.window_end if at is None else at
    f = _at(result.times, result.frms[key], at)
    if f <= 0:
        return None
    return _at(result.times, result.brms[key], at) / f


def network_feedback_ratio(result: RunResult, at: float | None = None) -> float | None:
    """Total backward RM-cell link transits, normalized by forward RM cells
    times each source's path depth.  A feedback-thrifty tree scores lower."""
    at = result.scenario.run.window_end if at is None else at
    denom = 0.0
    for key in result.source_keys:
        denom += _at(result.times, result.frms[key], at) * result.hops[key]
    if denom <= 0:
        return None
    return _at(result.times, result.brm_transits, at) / denom


def convergence_time(
    times: list[float],
    values: list[float],
    target: float,
    epsilon: float,
    start: float = 0.0,
) -> float | None:
    """Earliest sample time >= start after which every sample stays within
    epsilon*target of target; None if the series ends outside the band."""
    if target <= 0:
        raise ValueError("target must be positive")
    band = epsilon * target
    last_bad = None
    for i in range(len(times) - 1, -1, -1):
        if times[i] < start:
            break
        if abs(values[i] - target) > band:
            last_bad = i
            break
    if last_bad is None:
        for i, t in enumerate(times):
            if t >= start:
                return t
        return None
    if last_bad == len(times) - 1:
        return None
    return times[last_bad + 1]


def source_convergence(
    result: RunResult, targets: dict[SourceKey, float], epsilon: float | None = None, start: float = 0.0
) -> float | None:
    """Latest per-source convergence time against `targets`; None if any
    source never settles."""
    epsilon = result.scenario.run.epsilon if epsilon is None else epsilon
    worst = start
    for key, target in targets.items():
        t = convergence_time(result.times, result.rate[key], target, epsilon, start)
        if t is None:
            return None
        worst = max(worst, t)
    return worst


# ---------------------------------------------------------------- output


def metrics_csv(result: RunResult) -> str:
    """Wide CSV: one row per control tick."""
    cols: list[tuple[str, list]] = [("time", result.times)]
    for key in result.source_keys:
        vc, src = key
        cols.append((f"acr.{vc}.{src}", result.acr[key]))
        cols.append((f"rate.{vc}.{src}", result.rate[key]))
        cols.append((f"sent.{vc}.{src}", result.sent[key]))
        cols.append((f"frm.{vc}.{src}", result.frms[key]))
        cols.append((f"brm.{vc}.{src}", result.brms[key]))
    for link_id in sorted(result.queues):
        cols.append((f"queue.{link_id}", result.queues[link_id]))
        cols.append((f"adv.{link_id}", result.advertised[link_id]))
    cols.append(("brm_transits", result.brm_transits))
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow([name for name, _ in cols])
    for i in range(len(result.times)):
        writer.writerow([series[i] for _, series in cols])
    return buf.getvalue()


def allocation_dump(result: RunResult) -> str:
    """Stable text form of the final per-link, per-flow allocations."""
    lines = []
    for link_id in sorted(result.allocations):
        for flow in sorted(result.allocations[link_id]):
            value = result.allocations[link_id][flow]
            lines.append(f"link {link_id} flow vc={flow.vc} lineage={flow.lineage} alloc={value:.6f}")
    return "\n".join(lines) + "\n"


def summary_text(result: RunResult) -> str:
    """`key: value` block followed by the embedded canonical scenario."""
    r = result
    run = r.scenario.run
    lines = [
        f"duration: {run.duration}",
        f"seed: {run.seed}",
        f"trace_records: {r.trace_records}",
        f"trace_digest: {r.digest}",
        f"misrouted_feedback: {r.misrouted_feedback}",
        f"dropped_cells: {sum(r.drops.values())}",
    ]
    net = network_feedback_ratio(r)
    if net is not None:
        lines.append(f"network_feedback_ratio: {net:.4f}")
    for key in r.source_keys:
        vc, src = key
        parts = [f"source {vc}.{src}:"]
        if r.times:
            parts.append(f"throughput={throughput(r, key):.3f}")
            ratio = feedback_ratio(r, key)
            if ratio is not None:
                parts.append(f"feedback_ratio={ratio:.4f}")
        if key in r.final_acr:
            parts.append(f"acr={r.final_acr[key]:.3f}")
        lines.append(" ".join(parts))
    for (node, vc), stats in sorted(r.branch_stats.items()):
        pairs = " ".join(f"{k}={v}" for k, v in sorted(stats.items()))
        lines.append(f"branch {node}.{vc}: {pairs}")
    for (node, vc), stats in sorted(r.merge_stats.items()):
        pairs = " ".join(f"{k}={v}" for k, v in sorted(stats.items()))
        lines.append(f"merge {node}.{vc}: {pairs}")
    lines.append(SCENARIO_MARKER)
    return "\n".join(lines) + "\n" + format_scenario(r.scenario)
