"""Feedback consolidation at downstream replication points.

A replication node copies data and forward RM cells onto every downstream
branch and absorbs the backward RM cells the branches return, folding them
into one accumulated round: minimum explicit rate, OR of the congestion and
no-increase bits.  What it sends upstream, and when, is the consolidation
variant:

``V1_NOWAIT``
    emits on every upstream FRM arrival that finds any accumulated feedback,
    complete or not.  Cheap, but an incomplete round is consolidation noise.
``V2_WAITALL``
    emits only once every responsive branch has answered, at the first FRM
    arrival at or after completion.  Noise-free by construction.
``V3_WAITALL_FASTOVERLOAD``
    V2, plus an immediate emission when a branch reports congestion or an
    explicit rate below ``overload_fraction`` of the current upstream rate
    estimate.  The fast emission is a snapshot of the partial round, at most
    one per upstream FRM; it consumes nothing, so the round still closes
    normally with its full accumulated state.
``NAIVE_PASSTHROUGH``
    forwards every branch BRM upstream unmodified.  Exists purely as the
    feedback-implosion negative control.

A branch silent longer than the nonresponsive timeout is excluded from
completion and from the minimum, and reinstated the instant it speaks again.
The timeout adapts to the upstream FRM cadence unless pinned by config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .codec import Direction, RMCellFields

#: adaptive nonresponsive timeout = multiplier x smoothed FRM gap, floored
NR_MULTIPLIER = 8.0
NR_FLOOR = 0.010
GAP_SMOOTHING = 0.125


class Variant(Enum):
    V1_NOWAIT = "v1-nowait"
    V2_WAITALL = "v2-waitall"
    V3_WAITALL_FASTOVERLOAD = "v3-waitall-fastoverload"
    NAIVE_PASSTHROUGH = "naive-passthrough"


@dataclass
class ConsolidationState:
    """Per (node, connection) accumulation registers and branch bookkeeping."""

    branches: tuple[int, ...]
    variant: Variant
    #: reset value for the accumulated minimum; the connection's peak rate,
    #: so a round with one high-rate branch cannot advertise above it
    mer_sentinel: float
    overload_fraction: float = 0.5
    #: None adapts to the FRM cadence; math.inf disables exclusion
    nr_timeout: float | None = None
    created_at: float = 0.0

    mer: float = field(init=False)
    acc_ci: int = 0
    acc_ni: int = 0
    responded: set[int] = field(default_factory=set)
    any_feedback: bool = False
    last_response_time: dict[int, float] = field(default_factory=dict)
    nonresponsive: set[int] = field(default_factory=set)
    frm_gap_ewma: float | None = None
    last_frm_time: float | None = None
    last_frm: RMCellFields | None = None
    fast_fired: bool = False

    emissions: int = 0
    noise_events: int = 0
    fast_overload_emissions: int = 0
    nonresponsive_transitions: int = 0
    liveness_alarms: int = 0
    unknown_branch_faults: int = 0
    _all_silent: bool = False

    def __post_init__(self):
        if not self.branches:
            raise ValueError("a replication point needs at least one branch")
        self.mer = self.mer_sentinel
        for b in self.branches:
            self.last_response_time[b] = self.created_at


def effective_nr_timeout(state: ConsolidationState) -> float:
    if state.nr_timeout is not None:
        return state.nr_timeout
    if state.frm_gap_ewma is None:
        # no cadence measured yet; do not exclude anyone on startup
        return math.inf
    return max(NR_MULTIPLIER * state.frm_gap_ewma, NR_FLOOR)


def responsive_branches(state: ConsolidationState) -> tuple[int, ...]:
    return tuple(b for b in state.branches if b not in state.nonresponsive)


def check_nonresponsive(state: ConsolidationState, now: float) -> frozenset[int]:
    """Mark branches silent beyond the timeout; returns the excluded set."""
    timeout = effective_nr_timeout(state)
    for b in state.branches:
        if b in state.nonresponsive:
            continue
        if now - state.last_response_time[b] > timeout:
            state.nonresponsive.add(b)
            state.nonresponsive_transitions += 1
    all_silent = len(state.nonresponsive) == len(state.branches)
    if all_silent and not state._all_silent:
        state.liveness_alarms += 1
    state._all_silent = all_silent
    return frozenset(state.nonresponsive)


def _reset_round(state: ConsolidationState) -> None:
    state.mer = state.mer_sentinel
    state.acc_ci = 0
    state.acc_ni = 0
    state.any_feedback = False
    state.responded.clear()


def _emit(state: ConsolidationState, *, fast: bool) -> RMCellFields:
    template = state.last_frm
    assert template is not None, "feedback cannot precede the first forward RM cell"
    missing = set(responsive_branches(state)) - state.responded
    if missing:
        state.noise_events += 1
    cell = RMCellFields(
        direction=Direction.BACKWARD,
        bn=0,
        ci=state.acc_ci,
        ni=state.acc_ni,
        er=min(state.mer, state.mer_sentinel),
        ccr=template.ccr,
        mcr=template.mcr,
        vc=template.vc,
        origin=template.origin,
        seq=template.seq,
    )
    state.emissions += 1
    if fast:
        # snapshot only; the pending round keeps everything it has gathered
        state.fast_overload_emissions += 1
        state.fast_fired = True
    else:
        _reset_round(state)
    return cell


def on_downstream_cell(state: ConsolidationState, cell, now: float) -> RMCellFields | None:
    """Bookkeeping for a root-side cell; caller replicates it to all branches.

    Returns a consolidated upstream BRM when the cell is an FRM and the
    variant's emission condition holds.
    """
    if not (isinstance(cell, RMCellFields) and cell.direction is Direction.FORWARD):
        return None
    if state.last_frm_time is not None:
        gap = max(now - state.last_frm_time, 0.0)
        if state.frm_gap_ewma is None:
            state.frm_gap_ewma = gap
        else:
            state.frm_gap_ewma += GAP_SMOOTHING * (gap - state.frm_gap_ewma)
    state.last_frm_time = now
    state.last_frm = cell
    state.fast_fired = False

    if state.variant is Variant.NAIVE_PASSTHROUGH:
        return None
    check_nonresponsive(state, now)
    responsive = responsive_branches(state)
    if state.variant is Variant.V1_NOWAIT:
        if state.any_feedback:
            return _emit(state, fast=False)
        return None
    if not responsive:
        return None
    if state.responded >= set(responsive):
        return _emit(state, fast=False)
    return None


def on_branch_brm(state: ConsolidationState, branch: int, brm: RMCellFields, now: float) -> RMCellFields | None:
    """Absorb one branch's backward RM cell; may return an immediate upstream BRM.

    Immediate returns happen for the passthrough control (always) and for the
    V3 fast-overload path.
    """
    if branch not in state.branches:
        state.unknown_branch_faults += 1
        return None
    if state.variant is Variant.NAIVE_PASSTHROUGH:
        state.last_response_time[branch] = now
        state.emissions += 1
        return brm

    if branch in state.nonresponsive:
        state.nonresponsive.discard(branch)
        state._all_silent = False
    state.last_response_time[branch] = now
    state.mer = min(state.mer, brm.er)
    state.acc_ci |= brm.ci
    state.acc_ni |= brm.ni
    state.responded.add(branch)
    state.any_feedback = True

    if state.variant is Variant.V3_WAITALL_FASTOVERLOAD and not state.fast_fired:
        estimate = state.last_frm.ccr if state.last_frm is not None else None
        overloaded = bool(brm.ci) or (estimate is not None and brm.er < state.overload_fraction * estimate)
        if overloaded:
            return _emit(state, fast=True)
    return None
