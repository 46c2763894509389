"""Per-output-link queueing and explicit-rate computation.

Each output link owns one :class:`LinkAllocState`: an analytic FIFO (a
busy-until horizon instead of a cell list) plus a per-flow table of measured
input rates.  Rates are measured from actual cell arrivals with an
exponential average; the self-reported rate field inside RM cells is never
examined, so allocation stays correct even where feedback consolidation
mixes cells of many sources.

Two advertised-rate algorithms are selectable.  EQUAL_SHARE divides the
budget by the number of active flows.  CONSISTENT_MARKING converges to the
max-min share: flows measured well below the advertised level are marked as
bottlenecked elsewhere, their measured rate is subtracted from the budget,
and the remainder is split over the unmarked flows; marks are recomputed to
a fixed point every control interval.

The flow table is keyed by :class:`~abrsim.model.FlowKey` and the key type
is enforced at runtime: accounting at source granularity is structurally
impossible here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

from .codec import RMCellFields
from .model import FlowKey

#: a flow counts as bottlenecked elsewhere below this fraction of the
#: advertised level.  1.0 is the exact rule and recovers max-min precisely
#: when measured rates are exact; the operational default leaves slack for
#: the exponential average, which approaches a steady rate from below.
MARK_FRACTION = 0.9

#: floor for inter-arrival gaps, so simultaneous arrivals stay finite
MIN_GAP = 1e-9

#: flows idle longer than this many seconds leave the table
DEFAULT_ACTIVITY_TIMEOUT = 0.5

#: congestion threshold, in cells, when the buffer is unbounded
DEFAULT_CI_THRESHOLD = 1000


class Algorithm(Enum):
    EQUAL_SHARE = "equal-share"
    CONSISTENT_MARKING = "consistent-marking"


@dataclass
class FlowStats:
    measured_rate: float = 0.0
    recorded_allocation: float = 0.0
    marked_bottlenecked_elsewhere: bool = False
    last_activity: float = 0.0
    last_cell_time: float | None = None
    cells_seen: int = 0
    dropped: int = 0


@dataclass
class LinkAllocState:
    capacity: float
    target_utilization: float = 0.95
    averaging_interval: float = 0.010
    buffer_limit: int | None = None
    ci_threshold: int | None = None
    activity_timeout: float = DEFAULT_ACTIVITY_TIMEOUT
    algorithm: Algorithm = Algorithm.CONSISTENT_MARKING
    mark_fraction: float = MARK_FRACTION
    flows: dict[FlowKey, FlowStats] = field(default_factory=dict)
    #: work horizon of the FIFO: the instant the last queued cell finishes
    busy_until: float = 0.0
    advertised: float = 0.0
    dropped: int = 0

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if self.ci_threshold is None:
            self.ci_threshold = self.buffer_limit // 2 if self.buffer_limit else DEFAULT_CI_THRESHOLD
        if not self.advertised:
            self.advertised = self.budget

    @property
    def budget(self) -> float:
        return self.capacity * self.target_utilization


def _check_flow_key(flow: FlowKey) -> None:
    if not isinstance(flow, FlowKey):
        raise TypeError(f"flow table keys must be FlowKey, got {type(flow).__name__}")


def queue_len(state: LinkAllocState, now: float) -> int:
    backlog = (state.busy_until - now) * state.capacity
    return max(0, math.ceil(backlog - 1e-9))


def enqueue(state: LinkAllocState, flow: FlowKey, now: float) -> float | None:
    """Admit one cell to the FIFO; returns its departure time, None if dropped."""
    _check_flow_key(flow)
    if state.buffer_limit is not None and queue_len(state, now) >= state.buffer_limit:
        state.dropped += 1
        stats = state.flows.get(flow)
        if stats is not None:
            stats.dropped += 1
        return None
    departure = max(now, state.busy_until) + 1.0 / state.capacity
    state.busy_until = departure
    return departure


def set_capacity(state: LinkAllocState, now: float, capacity: float) -> None:
    """Change the service rate, preserving the queued backlog in cells."""
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    backlog = max(state.busy_until - now, 0.0) * state.capacity
    state.capacity = capacity
    state.busy_until = now + backlog / capacity


def measure_on_cell(state: LinkAllocState, flow: FlowKey, now: float) -> None:
    """Fold one arrival into the flow's exponential input-rate average.

    With inter-arrival gap d and time constant T the update is
    ``rate <- rate * exp(-d/T) + (1 - exp(-d/T)) / d``, whose fixed point for
    a periodic train is exactly its rate.  The first cell only opens the
    table entry at rate 0.
    """
    _check_flow_key(flow)
    stats = state.flows.get(flow)
    if stats is None:
        stats = state.flows[flow] = FlowStats(last_activity=now)
    if stats.last_cell_time is not None:
        gap = max(now - stats.last_cell_time, MIN_GAP)
        decay = math.exp(-gap / state.averaging_interval)
        stats.measured_rate = stats.measured_rate * decay + (1.0 - decay) / gap
    stats.last_cell_time = now
    stats.last_activity = now
    stats.cells_seen += 1


def _marking_fixed_point(
    measured: dict[FlowKey, float], budget: float, mark_fraction: float = MARK_FRACTION
) -> tuple[float, frozenset[FlowKey]]:
    """Advertised level and effective marked set for CONSISTENT_MARKING.

    Iterates marks against the level they imply until stable.  If every flow
    ends up marked (all measured rates trail the level, as during a ramp),
    the largest flow is treated as unmarked so the level stays anchored to
    the budget.

    At mark_fraction 1.0 with exact inputs the result is the max-min level:
    whenever some flow below the true level is still unmarked, the current
    level is a strict mixture of such rates and the (higher) true level, so
    it sits strictly above the smallest of them and the loop makes progress.
    """
    active = sorted(measured)
    if not active:
        return budget, frozenset()
    marked: frozenset[FlowKey] = frozenset()
    seen: set[frozenset[FlowKey]] = set()
    while True:
        effective = set(marked)
        if len(effective) == len(active):
            largest = max(active, key=lambda f: (measured[f], repr(f)))
            effective.discard(largest)
        level = (budget - sum(measured[f] for f in effective)) / (len(active) - len(effective))
        new = frozenset(f for f in active if measured[f] < mark_fraction * level)
        if new == marked or new in seen:
            return level, frozenset(effective)
        seen.add(marked)
        marked = new


def control_tick(state: LinkAllocState, now: float) -> None:
    """Periodic re-marking: purge idle flows, refresh the advertised level."""
    idle = [f for f, s in state.flows.items() if now - s.last_activity > state.activity_timeout]
    for f in idle:
        del state.flows[f]
    if state.algorithm is Algorithm.CONSISTENT_MARKING:
        measured = {f: s.measured_rate for f, s in state.flows.items()}
        level, marked = _marking_fixed_point(measured, state.budget, state.mark_fraction)
        state.advertised = level
        for f, s in state.flows.items():
            s.marked_bottlenecked_elsewhere = f in marked
            s.recorded_allocation = s.measured_rate if f in marked else level
    else:
        state.advertised = state.budget / max(len(state.flows), 1)
        for s in state.flows.values():
            s.marked_bottlenecked_elsewhere = False
            s.recorded_allocation = state.advertised


def advertised_rate(state: LinkAllocState, flow: FlowKey | None = None) -> float:
    if state.algorithm is Algorithm.EQUAL_SHARE:
        return state.budget / max(len(state.flows), 1)
    return state.advertised


def process_brm(state: LinkAllocState, brm: RMCellFields, flow: FlowKey | None, now: float) -> RMCellFields:
    """Stamp a backward RM cell: explicit rate capped, congestion bit sticky."""
    er = min(brm.er, advertised_rate(state, flow))
    ci = brm.ci | (1 if queue_len(state, now) > state.ci_threshold else 0)
    return replace(brm, er=er, ci=ci)


def audit_flow_table(state: LinkAllocState, flow_count: int) -> None:
    """Structural guard: the table may never outgrow the static flow census."""
    for key in state.flows:
        _check_flow_key(key)
    if len(state.flows) > flow_count:
        raise AssertionError(
            f"flow table holds {len(state.flows)} entries but only {flow_count} flows cross this link"
        )
