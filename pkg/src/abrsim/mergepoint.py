"""Upstream merging and credit-regulated feedback distribution.

Where several input branches of one connection join, data and forward RM
cells stream downstream merged; backward RM cells returning from the
destination side must fan back out.  Each forwarded FRM earns its input
branch one credit; a returning BRM is copied to every branch holding credit
(spending one each), so no source can receive more feedback than it asked
for.  A BRM that finds no credit anywhere is parked -- one slot, newest wins
-- and served to the next branch that presents an FRM.

Each copy is re-addressed to its branch: the origin byte becomes the wire
origin of the branch's lineage and the explicit rate becomes the branch's
share of the connection's rate.  EQUAL splits it evenly; WATERFILL grants
every branch an equal-share floor plus whatever the other branches are
measured not to be using, so unused share drains to the hungry branches.
WATERFILL grants deliberately overlap -- a branch that stays below its
grant leaves the surplus visible to the rest, and simultaneous claims are
arbitrated by queue feedback downstream.  Shares must never reach zero:
a source told rate zero stops scheduling and can never ask again.

State here is strictly per input branch, never per source: a branch may
itself hide an earlier merge, and its single lineage is all this node knows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .codec import MERGED_ORIGIN, Direction, RMCellFields
from .model import DataCell
from .switchalloc import MIN_GAP

DEFAULT_HEADROOM = 1.2
ACTIVITY_TIMEOUT = 0.5


class SubdivisionMode(Enum):
    EQUAL = "equal"
    WATERFILL = "waterfill"


@dataclass
class RateMeter:
    """Exponential input-rate average, same form as the link flow tables."""

    tau: float
    rate: float = 0.0
    last: float | None = None

    def on_cell(self, now: float) -> None:
        if self.last is not None:
            gap = max(now - self.last, MIN_GAP)
            decay = math.exp(-gap / self.tau)
            self.rate = self.rate * decay + (1.0 - decay) / gap
        self.last = now


@dataclass
class MergeState:
    """Per (node, connection) credit ledger and branch addressing."""

    branches: tuple[int, ...]
    #: wire origin stamped on BRM copies for each branch (a branch whose
    #: lineage spans several sources gets the merged-origin sentinel)
    branch_origin: dict[int, int]
    #: internal lineage tag per branch, for backward routing
    branch_lineage: dict[int, int]
    subdivision: SubdivisionMode = SubdivisionMode.EQUAL
    headroom: float = DEFAULT_HEADROOM
    erase_origin: bool = False
    averaging_interval: float = 0.010

    frm_credit: dict[int, int] = field(init=False)
    meters: dict[int, RateMeter] = field(init=False)
    pending_brm: RMCellFields | None = None

    frms_forwarded: int = 0
    copies_sent: dict[int, int] = field(init=False)
    pending_replacements: int = 0
    pending_served: int = 0

    def __post_init__(self):
        if not self.branches:
            raise ValueError("a merge needs at least one input branch")
        missing = [b for b in self.branches if b not in self.branch_origin or b not in self.branch_lineage]
        if missing:
            raise ValueError(f"branches without addressing: {missing}")
        self.frm_credit = {b: 0 for b in self.branches}
        self.meters = {b: RateMeter(tau=self.averaging_interval) for b in self.branches}
        self.copies_sent = {b: 0 for b in self.branches}


def active_branches(state: MergeState, now: float) -> tuple[int, ...]:
    out = []
    for b in state.branches:
        meter = state.meters[b]
        if meter.last is not None and now - meter.last <= ACTIVITY_TIMEOUT:
            out.append(b)
    return tuple(out)


def subdivide_er(state: MergeState, er_vc: float, branches: tuple[int, ...], now: float) -> dict[int, float]:
    """Split the connection's explicit rate among ``branches``.

    WATERFILL: grant(b) = max(headroom * er/n, er - sum of the other
    branches' measured rates).  The floor keeps an idle branch able to ramp
    back up; the reclaim term hands a demand-limited branch's leftover to
    the branches that can use it, without anyone ever seeing zero.
    """
    if not branches:
        return {}
    if state.subdivision is SubdivisionMode.EQUAL:
        share = er_vc / len(branches)
        return {b: share for b in branches}
    floor = min(er_vc, state.headroom * er_vc / len(branches))
    total_rate = sum(state.meters[b].rate for b in branches)
    out: dict[int, float] = {}
    for b in branches:
        leftover = er_vc - (total_rate - state.meters[b].rate)
        out[b] = max(floor, leftover)
    return out


def merge_data(state: MergeState, branch: int, cell: DataCell, now: float) -> DataCell:
    """Forward one data cell downstream, optionally blanking its origin."""
    state.meters[branch].on_cell(now)
    if state.erase_origin and cell.origin != MERGED_ORIGIN:
        return DataCell(vc=cell.vc, origin=MERGED_ORIGIN, seq=cell.seq)
    return cell


def _copy_for(state: MergeState, brm: RMCellFields, branch: int, share: float) -> RMCellFields:
    return RMCellFields(
        direction=Direction.BACKWARD,
        bn=brm.bn,
        ci=brm.ci,
        ni=brm.ni,
        er=min(brm.er, share),
        ccr=brm.ccr,
        mcr=brm.mcr,
        vc=brm.vc,
        origin=state.branch_origin[branch],
        seq=brm.seq,
    )


def on_upstream_frm(
    state: MergeState, branch: int, frm: RMCellFields, now: float
) -> tuple[RMCellFields, list[tuple[int, RMCellFields]]]:
    """Count one credit and forward the FRM unmodified; a parked BRM, if any,
    is served to this branch."""
    if frm.direction is not Direction.FORWARD:
        raise ValueError("merge input expects forward RM cells")
    state.meters[branch].on_cell(now)
    state.frm_credit[branch] += 1
    state.frms_forwarded += 1
    served: list[tuple[int, RMCellFields]] = []
    if state.pending_brm is not None:
        shares = subdivide_er(state, state.pending_brm.er, active_branches(state, now) or (branch,), now)
        share = shares.get(branch, state.pending_brm.er / max(len(state.branches), 1))
        served.append((branch, _copy_for(state, state.pending_brm, branch, share)))
        state.frm_credit[branch] -= 1
        state.copies_sent[branch] += 1
        state.pending_brm = None
        state.pending_served += 1
    return frm, served


def on_downstream_brm(state: MergeState, brm: RMCellFields, now: float) -> list[tuple[int, RMCellFields]]:
    """Distribute one returning BRM to every credited branch, or park it."""
    if brm.direction is not Direction.BACKWARD:
        raise ValueError("distribution expects backward RM cells")
    credited = [b for b in state.branches if state.frm_credit[b] > 0]
    if not credited:
        if state.pending_brm is not None:
            state.pending_replacements += 1
        state.pending_brm = brm
        return []
    share_set = tuple(dict.fromkeys(list(active_branches(state, now)) + credited))
    shares = subdivide_er(state, brm.er, share_set, now)
    out: list[tuple[int, RMCellFields]] = []
    for b in credited:
        out.append((b, _copy_for(state, brm, b, shares[b])))
        state.frm_credit[b] -= 1
        state.copies_sent[b] += 1
    return out
