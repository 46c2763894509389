"""Source and destination state machines for the explicit-rate loop.

A source interleaves one forward RM cell into every ``nrm`` in-rate cells and
paces sends at ``1/min(acr, demand)``.  Its allowed cell rate moves only when
a backward RM cell arrives: multiplicative decrease on a congestion bit,
additive increase of ``rif * pcr`` otherwise (unless the no-increase bit is
set), then a clamp to ``min(er, pcr)`` and a floor at ``mcr``.  Destinations
turn forward RM cells straight around.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .codec import Direction, RMCellFields
from .model import DataCell, SourceId, VcId

#: slack for comparing scheduled times (seconds)
TIME_EPS = 1e-12


@dataclass(frozen=True)
class SourceParams:
    """Static per-source configuration; rates in cells/s.

    ``demand`` caps the offered load; None means greedy (always ready to
    send at acr).
    """

    pcr: float
    mcr: float = 0.0
    icr: float | None = None
    rif: float = 1.0 / 16
    rdf: float = 1.0 / 16
    nrm: int = 32
    demand: float | None = None

    def __post_init__(self):
        if self.pcr <= 0:
            raise ValueError("pcr must be positive")
        if self.mcr < 0:
            raise ValueError("mcr must be non-negative")
        icr = self.pcr / 30 if self.icr is None else self.icr
        object.__setattr__(self, "icr", icr)
        if not self.mcr <= icr <= self.pcr:
            raise ValueError(f"need mcr <= icr <= pcr, got {self.mcr} / {icr} / {self.pcr}")
        for name in ("rif", "rdf"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.nrm < 2:
            raise ValueError("nrm must be at least 2")
        if self.demand is not None and self.demand < 0:
            raise ValueError("demand must be non-negative or None")


@dataclass
class SourceState:
    acr: float
    cells_since_frm: int
    next_send_time: float
    frm_sent: int = 0
    brm_received: int = 0
    last_brm: RMCellFields | None = None
    # spacing re-check after a rate drop needs the previous send instant
    last_send_time: float | None = None
    data_seq: int = 0


def new_source_state(params: SourceParams, now: float = 0.0) -> SourceState:
    # cells_since_frm starts one short of nrm so the very first send is an FRM
    return SourceState(acr=params.icr, cells_since_frm=params.nrm - 1, next_send_time=now)


def effective_rate(state: SourceState, params: SourceParams) -> float:
    if params.demand is None:
        return state.acr
    return min(state.acr, params.demand)


def source_next_cell(
    state: SourceState,
    params: SourceParams,
    now: float,
    *,
    vc: VcId,
    origin: SourceId,
) -> tuple[DataCell | RMCellFields | None, float]:
    """Emit the next in-rate cell if one is due at ``now``.

    Returns the cell (or None) and the corrected next send time.  The send
    gap is re-checked against the current rate, so a rate drop between
    scheduling and firing delays the send instead of violating spacing.
    """
    rate = effective_rate(state, params)
    if rate <= 0:
        state.next_send_time = math.inf
        return None, state.next_send_time
    gap = 1.0 / rate
    if now + TIME_EPS < state.next_send_time:
        return None, state.next_send_time
    if state.last_send_time is not None and now + TIME_EPS < state.last_send_time + gap:
        state.next_send_time = state.last_send_time + gap
        return None, state.next_send_time

    cell: DataCell | RMCellFields
    if state.cells_since_frm >= params.nrm - 1:
        cell = RMCellFields(
            direction=Direction.FORWARD,
            bn=0,
            ci=0,
            ni=0,
            er=params.pcr,
            ccr=state.acr,
            mcr=params.mcr,
            vc=vc,
            origin=origin,
            seq=state.frm_sent,
        )
        state.frm_sent += 1
        state.cells_since_frm = 0
    else:
        cell = DataCell(vc=vc, origin=origin, seq=state.data_seq)
        state.data_seq += 1
        state.cells_since_frm += 1
    state.last_send_time = now
    state.next_send_time = now + gap
    return cell, state.next_send_time


def source_on_brm(state: SourceState, params: SourceParams, brm: RMCellFields) -> SourceState:
    """Apply one backward RM cell to the allowed cell rate.

    Decrease before increase, explicit-rate clamp last:
    ci=1 takes acr down by acr*rdf; otherwise ni=0 adds rif*pcr; the result
    is capped at min(er, pcr) and floored at mcr.
    """
    if brm.direction is not Direction.BACKWARD:
        raise ValueError("source fed a forward RM cell")
    acr = state.acr
    if brm.ci:
        acr -= acr * params.rdf
    elif not brm.ni:
        acr += params.rif * params.pcr
    acr = min(acr, brm.er, params.pcr)
    acr = max(acr, params.mcr)
    state.acr = acr
    state.brm_received += 1
    state.last_brm = brm
    return state


@dataclass
class DestinationState:
    frm_received: int = 0
    brm_returned: int = 0
    #: local congestion hook; off in every stock scenario
    congested: bool = False
    #: a silenced destination swallows FRMs without turning them around
    silenced: bool = False


def destination_turnaround(frm: RMCellFields, *, congested: bool = False) -> RMCellFields:
    """Reflect a forward RM cell: direction flips, everything else is kept."""
    if frm.direction is not Direction.FORWARD:
        raise ValueError("turnaround needs a forward RM cell")
    return RMCellFields(
        direction=Direction.BACKWARD,
        bn=0,
        ci=1 if congested else frm.ci,
        ni=frm.ni,
        er=frm.er,
        ccr=frm.ccr,
        mcr=frm.mcr,
        vc=frm.vc,
        origin=frm.origin,
        seq=frm.seq,
    )


def destination_on_frm(state: DestinationState, frm: RMCellFields) -> RMCellFields | None:
    state.frm_received += 1
    if state.silenced:
        return None
    state.brm_returned += 1
    return destination_turnaround(frm, congested=state.congested)
