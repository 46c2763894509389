"""Scenario file parsing, validation, and canonical round-tripping."""

import math
import random

import pytest

from abrsim.branchpoint import Variant
from abrsim.mergepoint import SubdivisionMode
from abrsim.scenario import (
    EventKind,
    ScenarioError,
    extract_scenario_text,
    format_scenario,
    parse_scenario,
    parse_duration,
    parse_fraction,
    parse_rate,
)
from abrsim.switchalloc import Algorithm

MINIMAL_P2P = """
[run]
duration = 2 s
seed = 7

[node]
id = 0
[node]
id = 1

[link]
id = 1
from = 0
to = 1
capacity = 1000 cells/s
delay = 1 ms
buffer = 2000

[vc]
id = 1
kind = p2p
destination = 1
link = 1

[source]
vc = 1
id = 1
attach = 0
pcr = 1000 cells/s
"""

RICH = """
# two-source merge into a shared trunk, with every section exercised
[run]
duration = 10 s
seed = 3
window_start = 4 s
window_end = 10 s
epsilon = 0.05
quantize = on
control_interval = 10 ms

[node]
id = 0
[node]
id = 1
[node]
id = 2
[node]
id = 3

[link]
id = 1
from = 0
to = 2
capacity = 5000 cells/s
delay = 1 ms
buffer = 2000
[link]
id = 2
from = 1
to = 2
capacity = 5000 cells/s
delay = 1 ms
[link]
id = 3
from = 2
to = 3
capacity = 150 Mb/s
delay = 2 ms
buffer = none

[vc]
id = 1
kind = mp2p
destination = 3
link = 1
link = 2
link = 3

[source]
vc = 1
id = 1
attach = 0
pcr = 1000 cells/s
mcr = 10 cells/s
rif = 1/16
rdf = 1/16
nrm = 32
demand = 400 cells/s
[source]
vc = 1
id = 2
attach = 1
pcr = 1000 cells/s
icr = 50 cells/s

[node_config]
node = *
variant = v2-waitall
subdivision = waterfill
utilization = 1.0

[node_config]
node = 2
variant = v1-nowait
nr_timeout = 200 ms
ci_threshold = 50

[event]
time = 5 s
kind = capacity
link = 3
value = 2000 cells/s
[event]
time = 6 s
kind = demand
vc = 1
source = 1
value = none
[event]
time = 3 s
kind = silence
vc = 1
source = 2
"""


class TestValueParsers:
    def test_rate_units(self):
        assert parse_rate("1000 cells/s") == 1000.0
        assert parse_rate("250") == 250.0
        # 150e6 bits/s at 53-byte cells
        assert parse_rate("150 Mb/s") == pytest.approx(353773.58490566036, rel=0, abs=1e-6)

    def test_duration_units(self):
        assert parse_duration("10 ms") == 0.010
        assert parse_duration("2 s") == 2.0
        assert parse_duration("0.25") == 0.25

    def test_fractions(self):
        assert parse_fraction("1/16") == 0.0625
        assert parse_fraction("0.03125") == 0.03125
        with pytest.raises(ValueError):
            parse_fraction("1/0")

    def test_rejects_junk_units(self):
        with pytest.raises(ValueError):
            parse_rate("10 furlongs")
        with pytest.raises(ValueError):
            parse_duration("fast")


class TestParsing:
    def test_minimal_p2p_parses_and_compiles(self):
        s = parse_scenario(MINIMAL_P2P)
        assert s.run.duration == 2.0 and s.run.seed == 7
        assert [l.id for l in s.links] == [1]
        net = s.compile()
        assert net.vcs[1].paths[(1, 1)] == (1,)

    def test_rich_scenario_fields(self):
        s = parse_scenario(RICH)
        assert s.run.quantize is True
        assert s.run.window_start == 4.0 and s.run.window_end == 10.0
        trunk = next(l for l in s.links if l.id == 3)
        assert trunk.capacity == pytest.approx(150e6 / 424)
        assert trunk.buffer_limit is None
        p1 = s.source_params[(1, 1)]
        assert p1.demand == 400.0 and p1.mcr == 10.0
        # icr default resolves to pcr/30
        assert p1.icr == pytest.approx(1000.0 / 30)
        assert s.source_params[(1, 2)].icr == 50.0
        assert s.node_defaults.subdivision is SubdivisionMode.WATERFILL
        assert s.node_defaults.variant is Variant.V2_WAITALL
        cfg2 = s.node_config(2)
        assert cfg2.variant is Variant.V1_NOWAIT
        assert cfg2.nr_timeout == pytest.approx(0.2)
        assert cfg2.ci_threshold == 50
        # override inherits the '*' defaults it does not name
        assert cfg2.subdivision is SubdivisionMode.WATERFILL
        assert cfg2.utilization == 1.0
        assert s.node_config(0).algorithm is Algorithm.CONSISTENT_MARKING

    def test_events_sorted_by_time(self):
        s = parse_scenario(RICH)
        assert [e.kind for e in s.events] == [EventKind.SILENCE, EventKind.CAPACITY, EventKind.DEMAND]
        assert s.events[2].value is None  # demand back to greedy

    def test_empty_scenario_allowed(self):
        s = parse_scenario("[run]\nduration = 0 s\n")
        assert s.nodes == () and s.run.duration == 0.0

    def test_comments_and_blank_lines_ignored(self):
        s = parse_scenario(MINIMAL_P2P + "\n# trailing comment\n")
        assert len(s.vcs) == 1


def errors_of(text):
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(text)
    return exc.value.errors


class TestErrors:
    def test_misspelled_key_names_line(self):
        bad = MINIMAL_P2P.replace("seed = 7", "sede = 7")
        errs = errors_of(bad)
        line = MINIMAL_P2P.splitlines().index("seed = 7") + 1
        assert any(f"line {line}" in e and "sede" in e for e in errs)

    def test_unknown_section(self):
        errs = errors_of("[wires]\nid = 1\n")
        assert any("unknown section" in e for e in errs)

    def test_duplicate_node_id(self):
        errs = errors_of(MINIMAL_P2P + "\n[node]\nid = 0\n")
        assert any("duplicate node 0" in e for e in errs)

    def test_duplicate_scalar_key(self):
        errs = errors_of(MINIMAL_P2P.replace("seed = 7", "seed = 7\nseed = 8"))
        assert any("duplicate key 'seed'" in e for e in errs)

    def test_bad_unit_reports_line(self):
        bad = MINIMAL_P2P.replace("capacity = 1000 cells/s", "capacity = 1000 bogons")
        errs = errors_of(bad)
        assert any("capacity" in e for e in errs)

    def test_missing_required_key(self):
        bad = MINIMAL_P2P.replace("capacity = 1000 cells/s\n", "")
        errs = errors_of(bad)
        assert any("missing required key 'capacity'" in e for e in errs)

    def test_source_on_undeclared_vc(self):
        bad = MINIMAL_P2P.replace("vc = 1", "vc = 9")
        errs = errors_of(bad)
        assert any("undeclared vc 9" in e for e in errs)

    def test_kv_outside_section(self):
        errs = errors_of("duration = 1 s\n")
        assert any("outside any section" in e for e in errs)

    def test_window_outside_run(self):
        bad = MINIMAL_P2P.replace("seed = 7", "seed = 7\nwindow_start = 3 s")
        errs = errors_of(bad)
        assert any("metrics window" in e for e in errs)

    def test_source_param_violation_reports_line(self):
        bad = MINIMAL_P2P.replace("pcr = 1000 cells/s", "pcr = 1000 cells/s\nmcr = 2000 cells/s")
        errs = errors_of(bad)
        assert any("source 1 on vc 1" in e for e in errs)

    def test_topology_errors_surface(self):
        bad = MINIMAL_P2P.replace("to = 1", "to = 9")
        errs = errors_of(bad)
        assert any(e.startswith("topology:") for e in errs)

    def test_event_validation(self):
        errs = errors_of(MINIMAL_P2P + "\n[event]\ntime = 1 s\nkind = capacity\nlink = 77\nvalue = 10\n")
        assert any("unknown link 77" in e for e in errs)
        errs = errors_of(MINIMAL_P2P + "\n[event]\ntime = 1 s\nkind = silence\nvc = 1\n")
        assert any("exactly one of 'source' or 'node'" in e for e in errs)
        errs = errors_of(MINIMAL_P2P + "\n[event]\ntime = 1 s\nkind = shutdown\n")
        assert any("unknown kind" in e for e in errs)

    def test_nr_timeout_words(self):
        ok = MINIMAL_P2P + "\n[node_config]\nnode = *\nnr_timeout = inf\n"
        assert math.isinf(parse_scenario(ok).node_defaults.nr_timeout)
        errs = errors_of(MINIMAL_P2P + "\n[node_config]\nnode = *\nnr_timeout = -1 s\n")
        assert any("timeout" in e for e in errs)


class TestCanonicalForm:
    def test_roundtrip_fixed_point(self):
        s1 = parse_scenario(RICH)
        text = format_scenario(s1)
        s2 = parse_scenario(text)
        assert s1 == s2
        # canonical text is itself a fixed point
        assert format_scenario(s2) == text

    def test_all_defaults_echoed(self):
        text = format_scenario(parse_scenario(MINIMAL_P2P))
        for needle in (
            "epsilon = 0.05",
            "quantize = off",
            "control_interval = 0.01 s",
            "rif = 0.0625",
            "nrm = 32",
            "demand = none",
            "icr = 33.333333333333336 cells/s",
            "variant = v2-waitall",
            "mark_fraction = 0.9",
            "ci_threshold = auto",
            "nr_timeout = auto",
        ):
            assert needle in text, needle

    def test_summary_extraction(self):
        s = parse_scenario(MINIMAL_P2P)
        summary = "digest: abc\nnotes: x\n--- scenario ---\n" + format_scenario(s)
        assert parse_scenario(extract_scenario_text(summary)) == s
        with pytest.raises(ValueError):
            extract_scenario_text("no marker here")

    def test_key_name_mutation_fuzz(self):
        """Any single key-name edit in a canonical file must be rejected."""
        text = format_scenario(parse_scenario(RICH))
        lines = text.splitlines()
        rng = random.Random(11)
        kv_lines = [i for i, l in enumerate(lines) if "=" in l]
        for _ in range(60):
            i = rng.choice(kv_lines)
            key, _, rest = lines[i].partition("=")
            mutated = key.strip() + rng.choice("qzx")
            broken = list(lines)
            broken[i] = f"{mutated} ={rest}"
            with pytest.raises(ScenarioError) as exc:
                parse_scenario("\n".join(broken) + "\n")
            assert any(f"line {i + 1}" in e for e in exc.value.errors)
