"""Max-min allocation oracle and its certificate checker.

The core is :func:`progressive_fill`: classic water-filling over abstract
links.  All unfrozen entities rise together from zero; whenever a link
saturates, its users freeze there (simultaneous saturations are processed in
ascending link order), and an entity with a finite demand freezes at the
demand.  On top of it, four allocation definitions translate a compiled
network into entity sets:

``source``
    every source is an entity loading each link of its paths.
``vc-source``
    stage 1 fills whole connections (a connection loads each of its edges at
    its aggregate rate), stage 2 splits each connection's rate among its
    sources under a virtual capacity.
``flow``
    stage 1 fills flow groups -- sources whose lineages ever collapse at a
    merge point form one group; separate lineages stay separate entities --
    and stage 2 splits each group among its members.
``vc-flow``
    stage 1 fills connections, stage 2 splits into the connection's flow
    groups, stage 3 splits groups among sources.

The aggregate-rate reading is normative: a multi-source entity loads every
link it uses at its whole rate, coefficient 1.  The alternative reading that
weights a link by the number of distinct unmerged lineages crossing it is
available behind ``weighted_vc_load=True``.

:func:`verify_maxmin` checks the defining property independently of how an
allocation was produced: feasibility, plus for every entity either its demand
is met or some saturated link it uses carries no other entity with a larger
rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Mapping

from .model import CompiledNetwork, SourceId, VcId

LinkKey = Hashable
EntityKey = Hashable

TOL_SCALE = 1e-9


class FairnessDefinition(Enum):
    SOURCE = "source"
    VC_SOURCE = "vc-source"
    FLOW = "flow"
    VC_FLOW = "vc-flow"


@dataclass(frozen=True)
class Entity:
    """One participant in a fill: the links it loads and an optional demand.

    ``links`` maps link key to load coefficient (1 for plain entities).
    ``demand`` None means greedy.
    """

    key: EntityKey
    links: Mapping[LinkKey, float]
    demand: float | None = None


@dataclass
class FillResult:
    rates: dict[EntityKey, float]
    bottleneck: dict[EntityKey, LinkKey | str]
    residual: dict[LinkKey, float]


@dataclass
class Violation:
    entity: EntityKey
    reason: str
    #: feasible rate increase that would improve the entity, when one exists
    headroom: float = 0.0


@dataclass
class Certificate:
    ok: bool
    violations: list[Violation] = field(default_factory=list)


def progressive_fill(entities: list[Entity], capacities: Mapping[LinkKey, float]) -> FillResult:
    """Water-fill ``entities`` over ``capacities``; deterministic and exact.

    Every entity must either use at least one link or carry a finite demand,
    otherwise its fair rate is unbounded and a ValueError is raised.
    """
    for entity in entities:
        if not entity.links and entity.demand is None:
            raise ValueError(f"entity {entity.key!r} has no links and no demand: rate unbounded")
        for link, coeff in entity.links.items():
            if link not in capacities:
                raise ValueError(f"entity {entity.key!r} uses unknown link {link!r}")
            if coeff <= 0:
                raise ValueError(f"entity {entity.key!r} has non-positive coefficient on {link!r}")

    rates: dict[EntityKey, float] = {e.key: 0.0 for e in entities}
    bottleneck: dict[EntityKey, LinkKey | str] = {}
    unfrozen = [e for e in entities]
    frozen_load: dict[LinkKey, float] = {link: 0.0 for link in capacities}
    level = 0.0

    while unfrozen:
        users: dict[LinkKey, list[Entity]] = {}
        coeff_sum: dict[LinkKey, float] = {}
        for entity in unfrozen:
            for link, coeff in entity.links.items():
                users.setdefault(link, []).append(entity)
                coeff_sum[link] = coeff_sum.get(link, 0.0) + coeff

        next_level = math.inf
        for link, total in coeff_sum.items():
            slack = capacities[link] - frozen_load[link] - total * level
            candidate = level + max(slack, 0.0) / total
            next_level = min(next_level, candidate)
        for entity in unfrozen:
            if entity.demand is not None:
                next_level = min(next_level, entity.demand)
        if math.isinf(next_level):
            names = sorted(repr(e.key) for e in unfrozen)
            raise ValueError(f"unbounded entities in fill: {', '.join(names)}")

        level = next_level
        froze: set[EntityKey] = set()
        saturated = []
        for link in coeff_sum:
            tol = TOL_SCALE * max(capacities[link], 1.0)
            if capacities[link] - frozen_load[link] - coeff_sum[link] * level <= tol:
                saturated.append(link)
        for link in sorted(saturated, key=repr):
            for entity in users[link]:
                if entity.key not in froze:
                    froze.add(entity.key)
                    bottleneck[entity.key] = link
        for entity in unfrozen:
            if entity.key not in froze and entity.demand is not None and level >= entity.demand:
                froze.add(entity.key)
                bottleneck[entity.key] = "demand"
        if not froze:
            # numerically possible when a slack rounds to just above tol
            entity = min(unfrozen, key=lambda e: repr(e.key))
            froze.add(entity.key)
            bottleneck[entity.key] = next(iter(entity.links), "demand")

        still = []
        for entity in unfrozen:
            if entity.key in froze:
                rates[entity.key] = level
                for link, coeff in entity.links.items():
                    frozen_load[link] += coeff * level
            else:
                still.append(entity)
        unfrozen = still

    residual = {link: capacities[link] - frozen_load[link] for link in capacities}
    return FillResult(rates=rates, bottleneck=bottleneck, residual=residual)


def verify_maxmin(entities: list[Entity], capacities: Mapping[LinkKey, float], rates: Mapping[EntityKey, float]) -> Certificate:
    """Certify ``rates`` as the max-min allocation for ``entities``.

    Checks feasibility and, for every entity, a bottleneck link: a saturated
    link it uses on which no other entity holds a larger rate.  Entities at
    their demand are certified by the demand.
    """
    violations: list[Violation] = []
    load: dict[LinkKey, float] = {link: 0.0 for link in capacities}
    users: dict[LinkKey, list[Entity]] = {}
    for entity in entities:
        for link, coeff in entity.links.items():
            load[link] += coeff * rates[entity.key]
            users.setdefault(link, []).append(entity)

    for link in sorted(capacities, key=repr):
        tol = TOL_SCALE * max(capacities[link], 1.0)
        if load[link] > capacities[link] + tol:
            violations.append(Violation(entity=link, reason=f"link {link!r} overloaded by {load[link] - capacities[link]:.3g}"))
            return Certificate(ok=False, violations=violations)

    for entity in entities:
        rate = rates[entity.key]
        if rate < -TOL_SCALE:
            violations.append(Violation(entity=entity.key, reason="negative rate"))
            continue
        if entity.demand is not None and rate >= entity.demand - TOL_SCALE * max(entity.demand, 1.0):
            continue
        certified = False
        best_headroom = math.inf
        for link in sorted(entity.links, key=repr):
            tol = TOL_SCALE * max(capacities[link], 1.0)
            slack = capacities[link] - load[link]
            best_headroom = min(best_headroom, slack / entity.links[link])
            if slack > tol:
                continue
            if all(rates[other.key] <= rate + tol for other in users[link] if other.key != entity.key):
                certified = True
                break
        if not certified:
            violations.append(
                Violation(
                    entity=entity.key,
                    reason="no bottleneck link: every saturated link it uses carries a larger entity",
                    headroom=max(best_headroom, 0.0) if math.isfinite(best_headroom) else 0.0,
                )
            )
    return Certificate(ok=not violations, violations=violations)


# ---------------------------------------------------------------------------
# entity construction from a compiled network

Demands = Mapping[tuple[VcId, SourceId], float | None]


@dataclass
class AllocationResult:
    definition: FairnessDefinition
    per_source: dict[tuple[VcId, SourceId], float]
    #: per-stage fill results, outermost first, for certificates and debugging
    stages: list[tuple[str, FillResult]] = field(default_factory=list)


def _demand(demands: Demands | None, vc: VcId, source: SourceId) -> float | None:
    if demands is None:
        return None
    return demands.get((vc, source), None)


def _active_sources(net: CompiledNetwork, demands: Demands | None) -> dict[VcId, list[SourceId]]:
    active: dict[VcId, list[SourceId]] = {}
    for vc_id in sorted(net.vcs):
        keep = []
        for source in sorted(net.vcs[vc_id].vc.sources):
            demand = _demand(demands, vc_id, source)
            if demand is None or demand > 0:
                keep.append(source)
        active[vc_id] = keep
    return active


def _physical_capacities(net: CompiledNetwork) -> dict[LinkKey, float]:
    return {("L", link_id): net.links[link_id].capacity for link_id in sorted(net.links)}


def _group_demand(demands: Demands | None, vc: VcId, members: list[SourceId]) -> float | None:
    total = 0.0
    for source in members:
        demand = _demand(demands, vc, source)
        if demand is None:
            return None
        total += demand
    return total


def _vc_link_coeffs(net: CompiledNetwork, vc_id: VcId, weighted: bool) -> dict[LinkKey, float]:
    compiled = net.vcs[vc_id]
    coeffs: dict[LinkKey, float] = {}
    for link_id in sorted(compiled.vc.edges):
        count = len(compiled.lineage_on_link.get(link_id, ()))
        coeffs[("L", link_id)] = float(count) if weighted and count else 1.0
    return coeffs


def _split_among_sources(
    net: CompiledNetwork,
    vc_id: VcId,
    members: list[SourceId],
    budget: float,
    budget_key: LinkKey,
    demands: Demands | None,
) -> FillResult:
    compiled = net.vcs[vc_id]
    capacities = _physical_capacities(net)
    capacities[budget_key] = budget
    entities = []
    for source in members:
        links: dict[LinkKey, float] = {("L", l): 1.0 for l in sorted(compiled.source_path_links(source))}
        links[budget_key] = 1.0
        entities.append(Entity(key=(vc_id, source), links=links, demand=_demand(demands, vc_id, source)))
    return progressive_fill(entities, capacities)


def stage1_entities(
    definition: FairnessDefinition,
    net: CompiledNetwork,
    demands: Demands | None = None,
    *,
    weighted_vc_load: bool = False,
) -> tuple[list[Entity], dict[LinkKey, float]]:
    """The outermost entity set a definition fills, with its capacities.

    Exposed so an allocation's first stage can be re-certified through
    :func:`verify_maxmin` without re-deriving the entity construction.
    """
    active = _active_sources(net, demands)
    entities: list[Entity] = []
    if definition is FairnessDefinition.SOURCE:
        for vc_id in sorted(net.vcs):
            compiled = net.vcs[vc_id]
            for source in active[vc_id]:
                links = {("L", l): 1.0 for l in sorted(compiled.source_path_links(source))}
                entities.append(Entity(key=(vc_id, source), links=links, demand=_demand(demands, vc_id, source)))
    elif definition in (FairnessDefinition.VC_SOURCE, FairnessDefinition.VC_FLOW):
        for vc_id in sorted(net.vcs):
            if not active[vc_id]:
                continue
            entities.append(
                Entity(
                    key=("vc", vc_id),
                    links=_vc_link_coeffs(net, vc_id, weighted_vc_load),
                    demand=_group_demand(demands, vc_id, active[vc_id]),
                )
            )
    else:
        entities = _flow_group_entities(net, demands, active)
    return entities, _physical_capacities(net)


def allocate_source_based(net: CompiledNetwork, demands: Demands | None = None) -> AllocationResult:
    entities, caps = stage1_entities(FairnessDefinition.SOURCE, net, demands)
    fill = progressive_fill(entities, caps)
    return AllocationResult(
        definition=FairnessDefinition.SOURCE,
        per_source=dict(fill.rates),
        stages=[("sources", fill)],
    )


def _fill_vcs(net: CompiledNetwork, demands: Demands | None, active: dict[VcId, list[SourceId]], weighted: bool) -> FillResult:
    entities, caps = stage1_entities(
        FairnessDefinition.VC_SOURCE, net, demands, weighted_vc_load=weighted
    )
    return progressive_fill(entities, caps)


def allocate_vc_then_source(net: CompiledNetwork, demands: Demands | None = None, *, weighted_vc_load: bool = False) -> AllocationResult:
    active = _active_sources(net, demands)
    vc_fill = _fill_vcs(net, demands, active, weighted_vc_load)
    result = AllocationResult(definition=FairnessDefinition.VC_SOURCE, per_source={}, stages=[("vcs", vc_fill)])
    for vc_id in sorted(net.vcs):
        members = active[vc_id]
        if not members:
            continue
        split = _split_among_sources(net, vc_id, members, vc_fill.rates[("vc", vc_id)], ("vc-budget", vc_id), demands)
        result.stages.append((f"vc{vc_id}-sources", split))
        result.per_source.update(split.rates)
    return result


def _flow_group_entities(net: CompiledNetwork, demands: Demands | None, active: dict[VcId, list[SourceId]]) -> list[Entity]:
    entities = []
    for vc_id in sorted(net.vcs):
        compiled = net.vcs[vc_id]
        for index, group in enumerate(compiled.flow_groups):
            members = [s for s in sorted(group) if s in active[vc_id]]
            if not members:
                continue
            links: set[LinkKey] = set()
            for source in members:
                links.update(("L", l) for l in compiled.source_path_links(source))
            entities.append(
                Entity(
                    key=("flow", vc_id, index),
                    links={l: 1.0 for l in sorted(links, key=repr)},
                    demand=_group_demand(demands, vc_id, members),
                )
            )
    return entities


def allocate_flow_based(net: CompiledNetwork, demands: Demands | None = None) -> AllocationResult:
    active = _active_sources(net, demands)
    flow_fill = progressive_fill(_flow_group_entities(net, demands, active), _physical_capacities(net))
    result = AllocationResult(definition=FairnessDefinition.FLOW, per_source={}, stages=[("flows", flow_fill)])
    for vc_id in sorted(net.vcs):
        compiled = net.vcs[vc_id]
        for index, group in enumerate(compiled.flow_groups):
            members = [s for s in sorted(group) if s in active[vc_id]]
            if not members:
                continue
            budget = flow_fill.rates[("flow", vc_id, index)]
            split = _split_among_sources(net, vc_id, members, budget, ("flow-budget", vc_id, index), demands)
            result.stages.append((f"vc{vc_id}-flow{index}-sources", split))
            result.per_source.update(split.rates)
    return result


def allocate_vc_then_flow(net: CompiledNetwork, demands: Demands | None = None, *, weighted_vc_load: bool = False) -> AllocationResult:
    active = _active_sources(net, demands)
    vc_fill = _fill_vcs(net, demands, active, weighted_vc_load)
    result = AllocationResult(definition=FairnessDefinition.VC_FLOW, per_source={}, stages=[("vcs", vc_fill)])
    for vc_id in sorted(net.vcs):
        compiled = net.vcs[vc_id]
        groups = []
        for index, group in enumerate(compiled.flow_groups):
            members = [s for s in sorted(group) if s in active[vc_id]]
            if members:
                groups.append((index, members))
        if not groups:
            continue
        capacities = _physical_capacities(net)
        capacities[("vc-budget", vc_id)] = vc_fill.rates[("vc", vc_id)]
        entities = []
        for index, members in groups:
            links: dict[LinkKey, float] = {("vc-budget", vc_id): 1.0}
            for source in members:
                for l in sorted(compiled.source_path_links(source)):
                    links[("L", l)] = 1.0
            entities.append(Entity(key=("flow", vc_id, index), links=links, demand=_group_demand(demands, vc_id, members)))
        flow_fill = progressive_fill(entities, capacities)
        result.stages.append((f"vc{vc_id}-flows", flow_fill))
        for index, members in groups:
            budget = flow_fill.rates[("flow", vc_id, index)]
            split = _split_among_sources(net, vc_id, members, budget, ("flow-budget", vc_id, index), demands)
            result.stages.append((f"vc{vc_id}-flow{index}-sources", split))
            result.per_source.update(split.rates)
    return result


_ALLOCATORS = {
    FairnessDefinition.SOURCE: allocate_source_based,
    FairnessDefinition.VC_SOURCE: allocate_vc_then_source,
    FairnessDefinition.FLOW: allocate_flow_based,
    FairnessDefinition.VC_FLOW: allocate_vc_then_flow,
}


def allocate(definition: FairnessDefinition, net: CompiledNetwork, demands: Demands | None = None, **kwargs) -> AllocationResult:
    return _ALLOCATORS[definition](net, demands, **kwargs)
