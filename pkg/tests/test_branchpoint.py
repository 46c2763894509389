"""Consolidation variants: accumulation, emission timing, nonresponsive branches."""

from __future__ import annotations

import math
import random

import pytest

from abrsim.branchpoint import (
    ConsolidationState,
    Variant,
    check_nonresponsive,
    effective_nr_timeout,
    on_branch_brm,
    on_downstream_cell,
    responsive_branches,
)
from abrsim.codec import Direction, RMCellFields

PCR = 1000.0


def frm(ccr=500.0, seq=0, origin=1, vc=1):
    return RMCellFields(
        direction=Direction.FORWARD, bn=0, ci=0, ni=0, er=PCR, ccr=ccr, mcr=0.0, vc=vc, origin=origin, seq=seq
    )


def brm(er, ci=0, ni=0, seq=0):
    return RMCellFields(
        direction=Direction.BACKWARD, bn=0, ci=ci, ni=ni, er=er, ccr=500.0, mcr=0.0, vc=1, origin=1, seq=seq
    )


def fresh(variant, branches=(11, 12, 13), **kw):
    return ConsolidationState(branches=tuple(branches), variant=variant, mer_sentinel=PCR, **kw)


class TestAccumulation:
    def test_min_of_branch_rates(self):
        state = fresh(Variant.V2_WAITALL)
        on_downstream_cell(state, frm(), 0.0)
        for branch, er in zip(state.branches, (10.0, 5.0, 8.0)):
            on_branch_brm(state, branch, brm(er), 0.001)
        assert state.mer == pytest.approx(5.0)

    def test_bits_or_together(self):
        state = fresh(Variant.V2_WAITALL)
        on_downstream_cell(state, frm(), 0.0)
        for branch, ci in zip(state.branches, (0, 1, 0)):
            on_branch_brm(state, branch, brm(100.0, ci=ci), 0.001)
        assert state.acc_ci == 1
        assert state.acc_ni == 0

    def test_unknown_branch_counted_not_accumulated(self):
        state = fresh(Variant.V2_WAITALL)
        on_downstream_cell(state, frm(), 0.0)
        out = on_branch_brm(state, 99, brm(1.0), 0.001)
        assert out is None
        assert state.unknown_branch_faults == 1
        assert state.mer == PCR

    def test_sentinel_caps_emitted_rate(self):
        state = fresh(Variant.V1_NOWAIT, branches=(11,))
        on_downstream_cell(state, frm(), 0.0)
        on_branch_brm(state, 11, brm(4000.0), 0.001)
        out = on_downstream_cell(state, frm(seq=1), 0.01)
        assert out.er == pytest.approx(PCR)


class TestV1:
    def test_emits_on_frm_with_any_feedback(self):
        state = fresh(Variant.V1_NOWAIT)
        on_downstream_cell(state, frm(), 0.0)
        assert on_downstream_cell(state, frm(seq=1), 0.01) is None
        on_branch_brm(state, 11, brm(7.0), 0.02)
        out = on_downstream_cell(state, frm(seq=2), 0.03)
        assert out is not None
        assert out.er == pytest.approx(7.0)
        # one response with two responsive branches silent: a noise event
        assert state.noise_events == 1
        assert state.mer == PCR
        assert not state.any_feedback

    def test_complete_round_is_not_noise(self):
        state = fresh(Variant.V1_NOWAIT)
        on_downstream_cell(state, frm(), 0.0)
        for branch in state.branches:
            on_branch_brm(state, branch, brm(50.0), 0.001)
        on_downstream_cell(state, frm(seq=1), 0.01)
        assert state.emissions == 1
        assert state.noise_events == 0


class TestV2:
    def test_waits_for_all_branches(self):
        state = fresh(Variant.V2_WAITALL)
        on_downstream_cell(state, frm(), 0.0)
        on_branch_brm(state, 11, brm(10.0), 0.001)
        on_branch_brm(state, 12, brm(20.0), 0.002)
        assert on_downstream_cell(state, frm(seq=1), 0.01) is None
        on_branch_brm(state, 13, brm(30.0), 0.011)
        out = on_downstream_cell(state, frm(seq=2), 0.02)
        assert out is not None
        assert out.er == pytest.approx(10.0)
        assert state.responded == set()
        assert state.noise_events == 0

    def test_emission_template_tracks_latest_frm(self):
        state = fresh(Variant.V2_WAITALL, branches=(11,))
        on_downstream_cell(state, frm(ccr=100.0, seq=5, origin=4, vc=9), 0.0)
        on_branch_brm(state, 11, brm(33.0), 0.001)
        out = on_downstream_cell(state, frm(ccr=150.0, seq=6, origin=4, vc=9), 0.01)
        assert (out.vc, out.origin, out.seq) == (9, 4, 6)
        assert out.ccr == pytest.approx(150.0)

    def test_one_emission_per_frm_at_most(self):
        rng = random.Random(3)
        state = fresh(Variant.V2_WAITALL)
        frms = 0
        emitted = 0
        now = 0.0
        for step in range(5000):
            now += 0.001
            if rng.random() < 0.3:
                if on_downstream_cell(state, frm(seq=frms), now) is not None:
                    emitted += 1
                frms += 1
            else:
                branch = rng.choice(state.branches)
                assert on_branch_brm(state, branch, brm(rng.uniform(1, 900)), now) is None
        assert emitted <= frms
        assert state.noise_events == 0


class TestV3:
    def test_congestion_bit_triggers_fast_emission(self):
        state = fresh(Variant.V3_WAITALL_FASTOVERLOAD)
        on_downstream_cell(state, frm(ccr=100.0), 0.0)
        out = on_branch_brm(state, 11, brm(80.0, ci=1), 0.001)
        assert out is not None
        assert out.ci == 1
        assert state.fast_overload_emissions == 1

    def test_deep_rate_cut_triggers_fast_emission(self):
        state = fresh(Variant.V3_WAITALL_FASTOVERLOAD, overload_fraction=0.5)
        on_downstream_cell(state, frm(ccr=100.0), 0.0)
        out = on_branch_brm(state, 11, brm(20.0), 0.001)
        assert out is not None
        assert out.er == pytest.approx(20.0)

    def test_shallow_cut_waits(self):
        state = fresh(Variant.V3_WAITALL_FASTOVERLOAD, overload_fraction=0.5)
        on_downstream_cell(state, frm(ccr=100.0), 0.0)
        assert on_branch_brm(state, 11, brm(60.0), 0.001) is None

    def test_fast_emission_preserves_round_closure(self):
        state = fresh(Variant.V3_WAITALL_FASTOVERLOAD)
        on_downstream_cell(state, frm(ccr=100.0), 0.0)
        on_branch_brm(state, 11, brm(90.0), 0.001)
        on_branch_brm(state, 12, brm(30.0), 0.002)  # fast path fires here
        assert state.fast_overload_emissions == 1
        assert state.responded == {11, 12}
        on_branch_brm(state, 13, brm(70.0), 0.003)
        out = on_downstream_cell(state, frm(seq=1), 0.01)
        assert out is not None
        assert state.responded == set()

    def test_no_estimate_means_no_rate_trigger(self):
        state = fresh(Variant.V3_WAITALL_FASTOVERLOAD)
        state.last_frm = None
        assert on_branch_brm(state, 11, brm(1.0), 0.001) is None

    def test_fast_snapshot_keeps_accumulated_minimum(self):
        # the round close after a fast emission must carry the full round's
        # minimum; a consumed register would leak the sentinel upstream and
        # tell the source to surge straight into the bottleneck
        state = fresh(Variant.V3_WAITALL_FASTOVERLOAD)
        on_downstream_cell(state, frm(ccr=100.0), 0.0)
        assert on_branch_brm(state, 11, brm(30.0), 0.001) is not None
        on_branch_brm(state, 12, brm(90.0), 0.002)
        on_branch_brm(state, 13, brm(70.0), 0.003)
        out = on_downstream_cell(state, frm(seq=1), 0.01)
        assert out is not None
        assert out.er == pytest.approx(30.0)

    def test_one_fast_emission_per_frm_interval(self):
        state = fresh(Variant.V3_WAITALL_FASTOVERLOAD)
        on_downstream_cell(state, frm(ccr=100.0), 0.0)
        assert on_branch_brm(state, 11, brm(10.0), 0.001) is not None
        assert on_branch_brm(state, 12, brm(5.0), 0.002) is None
        on_downstream_cell(state, frm(seq=1), 0.01)
        assert on_branch_brm(state, 13, brm(5.0), 0.011) is not None
        assert state.fast_overload_emissions == 2


class TestNaive:
    def test_forwards_verbatim(self):
        state = fresh(Variant.NAIVE_PASSTHROUGH)
        on_downstream_cell(state, frm(), 0.0)
        cell = brm(42.0, ci=1, seq=9)
        out = on_branch_brm(state, 11, cell, 0.001)
        assert out is cell
        assert state.emissions == 1

    def test_every_branch_brm_goes_up(self):
        state = fresh(Variant.NAIVE_PASSTHROUGH)
        on_downstream_cell(state, frm(), 0.0)
        for i, branch in enumerate(state.branches * 3):
            assert on_branch_brm(state, branch, brm(10.0 + i), 0.01 * i) is not None
        assert state.emissions == 9


class TestNonresponsive:
    def run_frms(self, state, n, gap, start=0.0):
        t = start
        outs = []
        for i in range(n):
            outs.append(on_downstream_cell(state, frm(seq=i), t))
            t += gap
        return t, outs

    def test_timeout_adapts_to_frm_cadence(self):
        state = fresh(Variant.V2_WAITALL)
        assert math.isinf(effective_nr_timeout(state))
        self.run_frms(state, 20, gap=0.032)
        assert effective_nr_timeout(state) == pytest.approx(8 * 0.032, rel=0.05)

    def test_floor_applies_at_high_rate(self):
        state = fresh(Variant.V2_WAITALL)
        self.run_frms(state, 50, gap=0.0005)
        assert effective_nr_timeout(state) == pytest.approx(0.010)

    def test_silent_branch_excluded_and_completion_shrinks(self):
        state = fresh(Variant.V2_WAITALL, nr_timeout=0.1)
        on_downstream_cell(state, frm(), 0.0)
        on_branch_brm(state, 11, brm(10.0), 0.15)
        on_branch_brm(state, 12, brm(20.0), 0.15)
        # branch 13 has stayed silent past the timeout by the next FRM
        out = on_downstream_cell(state, frm(seq=1), 0.2)
        assert out is not None
        assert 13 in state.nonresponsive
        assert state.nonresponsive_transitions == 1
        assert state.noise_events == 0

    def test_reinstated_on_next_response(self):
        state = fresh(Variant.V2_WAITALL, nr_timeout=0.1)
        on_downstream_cell(state, frm(), 0.0)
        check_nonresponsive(state, 0.5)
        assert set(responsive_branches(state)) == set()
        on_branch_brm(state, 12, brm(3.0), 0.6)
        assert 12 not in state.nonresponsive
        assert state.mer == pytest.approx(3.0)

    def test_all_silent_alarms_once_and_blocks_emission(self):
        state = fresh(Variant.V2_WAITALL, nr_timeout=0.05)
        on_downstream_cell(state, frm(), 0.0)
        assert on_downstream_cell(state, frm(seq=1), 0.2) is None
        assert state.liveness_alarms == 1
        assert on_downstream_cell(state, frm(seq=2), 0.3) is None
        assert state.liveness_alarms == 1
        assert state.emissions == 0

    def test_infinite_timeout_never_excludes(self):
        state = fresh(Variant.V2_WAITALL, nr_timeout=math.inf)
        on_downstream_cell(state, frm(), 0.0)
        on_branch_brm(state, 11, brm(10.0), 0.01)
        on_branch_brm(state, 12, brm(20.0), 0.01)
        assert on_downstream_cell(state, frm(seq=1), 1e6) is None
        assert state.nonresponsive == set()


class TestRatioInvariant:
    @pytest.mark.parametrize("variant", [Variant.V1_NOWAIT, Variant.V2_WAITALL, Variant.V3_WAITALL_FASTOVERLOAD])
    def test_emissions_bounded_by_frms_plus_fast(self, variant):
        rng = random.Random(17)
        state = fresh(variant, nr_timeout=0.5)
        frms = 0
        now = 0.0
        for _ in range(8000):
            now += 0.0007
            if rng.random() < 0.25:
                on_downstream_cell(state, frm(ccr=rng.uniform(10, 900), seq=frms), now)
                frms += 1
            else:
                on_branch_brm(state, rng.choice(state.branches), brm(rng.uniform(1, 999), ci=rng.random() < 0.1), now)
        assert state.emissions <= frms + state.fast_overload_emissions
        if variant is Variant.V2_WAITALL:
            assert state.fast_overload_emissions == 0
            assert state.noise_events == 0
