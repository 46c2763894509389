"""Topology model: links, virtual connections, flows and their lineages.

A scenario gives directed :class:`Link` records and :class:`VirtualConnection`
records; :func:`compile_network` validates the routing shape for each
connection kind and derives everything the simulator and the fairness oracle
need to agree on:

* per-node roles (branch point, merge point, source attach, destination,
  transit),
* per-source link paths,
* flow lineages.

A *lineage* names one distinguishable traffic stream of a connection.  Each
source starts its own lineage at its attach port.  Lineages of one connection
collapse into a single merged lineage exactly at a merge point, i.e. a node
with more than one upstream connection edge, and merging covers exactly the
streams arriving on those upstream links: sources attached locally -- whether
at a merge node or at a node with no upstream edges at all -- keep separate
lineages on the output link.  The flows crossing a link are its lineages,
keyed as :class:`FlowKey`: that is the only identity switches may account on.

:class:`FlowKey` deliberately has no source field.  Lineage ids live in their
own namespace and a merged lineage covers many sources; allocation state
keyed by FlowKey can never enumerate sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple

NodeId = int
LinkId = int
VcId = int
SourceId = int

#: in-port of a node: an upstream link or a locally attached source
PORT_LINK = "link"
PORT_SOURCE = "src"

MAX_SOURCE_ID = 254  # 255 is the merged-origin sentinel on the wire


class TopologyError(ValueError):
    """Raised when a network fails validation; carries all error strings."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


class VcKind(Enum):
    P2P = "p2p"
    P2MP = "p2mp"
    MP2P = "mp2p"
    MP2MP = "mp2mp"


@dataclass(frozen=True)
class Link:
    """One direction of a physical link; a duplex link is two records.

    capacity is in cells/s, propagation delay in seconds, buffer_limit in
    cells (None = unbounded).
    """

    id: LinkId
    src: NodeId
    dst: NodeId
    capacity: float
    delay: float = 0.0
    buffer_limit: int | None = None


@dataclass(frozen=True)
class VirtualConnection:
    """Routing membership of one connection.

    sources maps SourceId to its attach node.  For mp2mp connections,
    ``root`` designates the node where the source-side inverted tree meets
    the destination-side tree.
    """

    id: VcId
    kind: VcKind
    sources: Mapping[SourceId, NodeId]
    destinations: frozenset[NodeId]
    edges: frozenset[LinkId]
    root: NodeId | None = None


class FlowKey(NamedTuple):
    """Accounting identity of one traffic stream on a link: no source inside."""

    vc: VcId
    lineage: int


@dataclass(frozen=True)
class DataCell:
    vc: VcId
    origin: SourceId
    seq: int


@dataclass(frozen=True)
class Lineage:
    id: int
    vc: VcId
    members: frozenset[SourceId]
    links: frozenset[LinkId]
    #: merge node that created it, None for a per-source lineage
    created_at: NodeId | None
    #: origin value carried on the wire by backward cells of this lineage
    wire_origin: int


@dataclass
class NodeVcPlan:
    """Everything one node needs to know about one connection."""

    node: NodeId
    vc: VcId
    in_links: tuple[LinkId, ...]
    attached_sources: tuple[SourceId, ...]
    out_links: tuple[LinkId, ...]
    deliver: bool
    is_merge: bool = False
    is_branch: bool = False
    #: lineages leaving on each out link (identical across out links)
    out_lineages: tuple[int, ...] = ()
    #: merged lineage id if is_merge
    merged_lineage: int | None = None
    #: backward routing: lineage id -> in-port ("link", id) or ("src", id)
    up_port: dict[int, tuple[str, int]] = field(default_factory=dict)
    #: all in-ports in deterministic order (merge branches use this)
    in_ports: tuple[tuple[str, int], ...] = ()

    @property
    def merge_branches(self) -> tuple[tuple[str, int], ...]:
        """Upstream-link in-ports: the branches a merge distributes over."""
        return tuple(p for p in self.in_ports if p[0] == PORT_LINK)


@dataclass
class CompiledVc:
    vc: VirtualConnection
    paths: dict[tuple[SourceId, NodeId], tuple[LinkId, ...]]
    lineages: dict[int, Lineage]
    lineage_on_link: dict[LinkId, tuple[int, ...]]
    node_plans: dict[NodeId, NodeVcPlan]
    roles: dict[NodeId, frozenset[str]]
    #: source groups whose lineages eventually collapse together
    flow_groups: tuple[frozenset[SourceId], ...]

    def flows_on_link(self, link: LinkId) -> tuple[FlowKey, ...]:
        return tuple(FlowKey(self.vc.id, lin) for lin in self.lineage_on_link.get(link, ()))

    def source_path_links(self, source: SourceId) -> frozenset[LinkId]:
        links: set[LinkId] = set()
        for (src, _dst), path in self.paths.items():
            if src == source:
                links.update(path)
        return frozenset(links)

    def lineage_of_source_at(self, source: SourceId, link: LinkId) -> int | None:
        for lin in self.lineage_on_link.get(link, ()):
            if source in self.lineages[lin].members:
                return lin
        return None


@dataclass
class CompiledNetwork:
    nodes: frozenset[NodeId]
    links: dict[LinkId, Link]
    vcs: dict[VcId, CompiledVc]

    def flows_on_link(self, link: LinkId) -> tuple[FlowKey, ...]:
        flows: list[FlowKey] = []
        for vc_id in sorted(self.vcs):
            flows.extend(self.vcs[vc_id].flows_on_link(link))
        return tuple(flows)


def validate_topology(nodes: Iterable[NodeId], links: Iterable[Link], vcs: Iterable[VirtualConnection]) -> list[str]:
    """Collect validation errors; an empty list means the topology is sound."""
    errors: list[str] = []
    node_set = set(nodes)
    link_map: dict[LinkId, Link] = {}
    for link in links:
        if link.id in link_map:
            errors.append(f"duplicate link id {link.id}")
        link_map[link.id] = link
        if link.capacity <= 0:
            errors.append(f"link {link.id}: capacity must be positive")
        if link.delay < 0:
            errors.append(f"link {link.id}: negative propagation delay")
        if link.buffer_limit is not None and link.buffer_limit <= 0:
            errors.append(f"link {link.id}: buffer limit must be positive or unbounded")
        for endpoint in (link.src, link.dst):
            if endpoint not in node_set:
                errors.append(f"link {link.id}: unknown node {endpoint}")
    seen_vc: set[VcId] = set()
    for vc in vcs:
        if vc.id in seen_vc:
            errors.append(f"duplicate vc id {vc.id}")
        seen_vc.add(vc.id)
        errors.extend(_validate_vc(vc, node_set, link_map))
    return errors


def _validate_vc(vc: VirtualConnection, node_set: set[NodeId], link_map: dict[LinkId, Link]) -> list[str]:
    errors: list[str] = []
    tag = f"vc {vc.id}"
    for source, node in vc.sources.items():
        if not 0 <= source <= MAX_SOURCE_ID:
            errors.append(f"{tag}: source id {source} out of range 0..{MAX_SOURCE_ID}")
        if node not in node_set:
            errors.append(f"{tag}: source {source} attached at unknown node {node}")
    for dest in vc.destinations:
        if dest not in node_set:
            errors.append(f"{tag}: unknown destination node {dest}")
    edges: list[Link] = []
    for edge in sorted(vc.edges):
        if edge not in link_map:
            errors.append(f"{tag}: unknown link {edge}")
        else:
            edges.append(link_map[edge])
    if errors:
        return errors

    n_src, n_dst = len(vc.sources), len(vc.destinations)
    shape = {
        VcKind.P2P: (n_src == 1 and n_dst == 1, "exactly one source and one destination"),
        VcKind.P2MP: (n_src == 1 and n_dst >= 2, "one source and at least two destinations"),
        VcKind.MP2P: (n_src >= 2 and n_dst == 1, "at least two sources and one destination"),
        VcKind.MP2MP: (n_src >= 2 and n_dst >= 2, "at least two sources and destinations"),
    }[vc.kind]
    if not shape[0]:
        errors.append(f"{tag}: kind {vc.kind.value} requires {shape[1]}")
    if vc.kind is VcKind.MP2MP and vc.root is None:
        errors.append(f"{tag}: mp2mp requires a designated root node")
        return errors

    out_edges: dict[NodeId, list[Link]] = {}
    in_edges: dict[NodeId, list[Link]] = {}
    for edge in edges:
        out_edges.setdefault(edge.src, []).append(edge)
        in_edges.setdefault(edge.dst, []).append(edge)

    for dest in vc.destinations:
        if out_edges.get(dest):
            errors.append(f"{tag}: destination {dest} has outgoing edges")
    for source, node in vc.sources.items():
        if node in vc.destinations:
            errors.append(f"{tag}: source {source} attaches at destination node {node}")

    # reachability along edge directions
    def reachable(start: NodeId) -> set[NodeId]:
        seen = {start}
        stack = [start]
        while stack:
            here = stack.pop()
            for edge in out_edges.get(here, ()):
                if edge.dst not in seen:
                    seen.add(edge.dst)
                    stack.append(edge.dst)
        return seen

    if vc.kind in (VcKind.P2P, VcKind.P2MP):
        root = next(iter(vc.sources.values()))
        for node, incoming in in_edges.items():
            if len(incoming) > 1:
                errors.append(f"{tag}: node {node} has {len(incoming)} upstream edges in a tree rooted at the source")
        if in_edges.get(root):
            errors.append(f"{tag}: source node {root} has upstream edges")
        seen = reachable(root)
        for edge in edges:
            if edge.src not in seen:
                errors.append(f"{tag}: link {edge.id} unreachable from the source")
        sinks = {n for n in seen if not out_edges.get(n)}
        if seen == {root} and not edges:
            errors.append(f"{tag}: no edges")
        if sinks != set(vc.destinations):
            errors.append(f"{tag}: tree leaves {sorted(sinks)} do not match destinations {sorted(vc.destinations)}")
    elif vc.kind is VcKind.MP2P:
        dest = next(iter(vc.destinations))
        for node, outgoing in out_edges.items():
            if len(outgoing) > 1:
                errors.append(f"{tag}: node {node} has {len(outgoing)} downstream edges in a tree inverted toward the destination")
        for source, node in vc.sources.items():
            if node != dest and dest not in reachable(node):
                errors.append(f"{tag}: source {source} at node {node} cannot reach the destination")
        for edge in edges:
            if dest not in reachable(edge.src):
                errors.append(f"{tag}: link {edge.id} does not lead to the destination")
    elif vc.kind is VcKind.MP2MP:
        root = vc.root
        assert root is not None
        merge_side = [e for e in edges if root in reachable(e.src) and e not in out_edges.get(root, []) and _leads_to(e, root, out_edges)]
        branch_side = [e for e in edges if e not in merge_side]
        merge_out: dict[NodeId, int] = {}
        for edge in merge_side:
            merge_out[edge.src] = merge_out.get(edge.src, 0) + 1
            if merge_out[edge.src] > 1:
                errors.append(f"{tag}: node {edge.src} has multiple downstream edges on the source side")
        branch_in: dict[NodeId, int] = {}
        for edge in branch_side:
            branch_in[edge.dst] = branch_in.get(edge.dst, 0) + 1
            if branch_in[edge.dst] > 1:
                errors.append(f"{tag}: node {edge.dst} has multiple upstream edges on the destination side")
            if edge.dst == root:
                errors.append(f"{tag}: destination-side edge {edge.id} re-enters the root")
        for source, node in vc.sources.items():
            if node != root and root not in reachable(node):
                errors.append(f"{tag}: source {source} at node {node} cannot reach the root")
        reach_from_root = reachable(root)
        for dest in vc.destinations:
            if dest not in reach_from_root:
                errors.append(f"{tag}: destination {dest} unreachable from the root")
        sinks = {e.dst for e in branch_side if not out_edges.get(e.dst)}
        if branch_side and sinks != set(vc.destinations):
            errors.append(f"{tag}: destination-side leaves {sorted(sinks)} do not match destinations {sorted(vc.destinations)}")
        if not branch_side:
            errors.append(f"{tag}: no destination-side edges below the root")

    if not errors:
        # cycles cannot survive the tree checks above, but guard explicitly
        # against disconnected cyclic components that reachability missed
        indeg = {n: 0 for e in edges for n in (e.src, e.dst)}
        for edge in edges:
            indeg[edge.dst] += 1
        queue = [n for n, d in sorted(indeg.items()) if d == 0]
        visited = 0
        while queue:
            here = queue.pop()
            visited += 1
            for edge in out_edges.get(here, ()):
                indeg[edge.dst] -= 1
                if indeg[edge.dst] == 0:
                    queue.append(edge.dst)
        if visited != len(indeg):
            errors.append(f"{tag}: routing graph contains a cycle")
    return errors


def _leads_to(edge: Link, target: NodeId, out_edges: dict[NodeId, list[Link]]) -> bool:
    seen = set()
    stack = [edge.dst]
    while stack:
        here = stack.pop()
        if here == target:
            return True
        if here in seen:
            continue
        seen.add(here)
        for nxt in out_edges.get(here, ()):
            stack.append(nxt.dst)
    return False


def classify_node_roles(vc: VirtualConnection, links: Mapping[LinkId, Link]) -> dict[NodeId, frozenset[str]]:
    """Role set per node touched by the connection.

    A node with more than one downstream connection edge is a branch point;
    more than one upstream edge makes it a merge point; both can hold at
    once.
    """
    indeg: dict[NodeId, int] = {}
    outdeg: dict[NodeId, int] = {}
    touched: set[NodeId] = set(vc.sources.values()) | set(vc.destinations)
    for edge_id in vc.edges:
        edge = links[edge_id]
        touched.update((edge.src, edge.dst))
        outdeg[edge.src] = outdeg.get(edge.src, 0) + 1
        indeg[edge.dst] = indeg.get(edge.dst, 0) + 1
    source_nodes = set(vc.sources.values())
    roles: dict[NodeId, frozenset[str]] = {}
    for node in sorted(touched):
        tags: set[str] = set()
        if outdeg.get(node, 0) > 1:
            tags.add("branch")
        if indeg.get(node, 0) > 1:
            tags.add("merge")
        if node in source_nodes:
            tags.add("source")
        if node in vc.destinations:
            tags.add("destination")
        if not tags:
            tags.add("transit")
        roles[node] = frozenset(tags)
    return roles


def path_links(vc: VirtualConnection, links: Mapping[LinkId, Link], source: SourceId, dest: NodeId) -> tuple[LinkId, ...]:
    """Ordered links from ``source``'s attach node to ``dest``; unique in a valid topology."""
    start = vc.sources[source]
    out_edges: dict[NodeId, list[Link]] = {}
    for edge_id in sorted(vc.edges):
        edge = links[edge_id]
        out_edges.setdefault(edge.src, []).append(edge)

    best: tuple[LinkId, ...] | None = None
    stack: list[tuple[NodeId, tuple[LinkId, ...]]] = [(start, ())]
    while stack:
        here, path = stack.pop()
        if here == dest:
            if best is not None:
                raise TopologyError([f"vc {vc.id}: multiple paths from source {source} to {dest}"])
            best = path
            continue
        for edge in out_edges.get(here, ()):
            if edge.id in path:
                continue
            stack.append((edge.dst, path + (edge.id,)))
    if best is None:
        raise TopologyError([f"vc {vc.id}: no path from source {source} to {dest}"])
    return best


def _compile_vc(vc: VirtualConnection, links: Mapping[LinkId, Link], lineage_counter: list[int]) -> CompiledVc:
    roles = classify_node_roles(vc, links)
    paths = {
        (source, dest): path_links(vc, links, source, dest)
        for source in sorted(vc.sources)
        for dest in sorted(vc.destinations)
    }

    in_links_at: dict[NodeId, list[LinkId]] = {}
    out_links_at: dict[NodeId, list[LinkId]] = {}
    for edge_id in sorted(vc.edges):
        edge = links[edge_id]
        out_links_at.setdefault(edge.src, []).append(edge_id)
        in_links_at.setdefault(edge.dst, []).append(edge_id)
    attached_at: dict[NodeId, list[SourceId]] = {}
    for source in sorted(vc.sources):
        attached_at.setdefault(vc.sources[source], []).append(source)

    # walk nodes in topological order, propagating lineage sets
    indeg = {node: len(in_links_at.get(node, ())) for node in roles}
    order: list[NodeId] = [n for n in sorted(roles) if indeg[n] == 0]
    queue = list(order)
    while queue:
        here = queue.pop(0)
        for out in out_links_at.get(here, ()):
            nxt = links[out].dst
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                order.append(nxt)
                queue.append(nxt)

    lineages: dict[int, Lineage] = {}
    members_of: dict[int, set[SourceId]] = {}
    links_of: dict[int, set[LinkId]] = {}
    created_at: dict[int, NodeId | None] = {}
    source_lineage: dict[SourceId, int] = {}

    def new_lineage(members: set[SourceId], node: NodeId | None) -> int:
        lineage_counter[0] += 1
        lin = lineage_counter[0]
        members_of[lin] = set(members)
        links_of[lin] = set()
        created_at[lin] = node
        return lin

    for source in sorted(vc.sources):
        source_lineage[source] = new_lineage({source}, None)

    lineage_on_link: dict[LinkId, tuple[int, ...]] = {}
    node_plans: dict[NodeId, NodeVcPlan] = {}
    arriving: dict[NodeId, dict[tuple[str, int], list[int]]] = {}
    for source in sorted(vc.sources):
        node = vc.sources[source]
        arriving.setdefault(node, {})[(PORT_SOURCE, source)] = [source_lineage[source]]

    for node in order:
        ports = arriving.get(node, {})
        in_links = tuple(in_links_at.get(node, ()))
        out_links = tuple(out_links_at.get(node, ()))
        is_merge = len(in_links) > 1
        is_branch = len(out_links) > 1
        in_ports = tuple(sorted(ports.keys(), key=lambda p: (p[0], p[1])))
        plan = NodeVcPlan(
            node=node,
            vc=vc.id,
            in_links=in_links,
            attached_sources=tuple(attached_at.get(node, ())),
            out_links=out_links,
            deliver=node in vc.destinations,
            is_merge=is_merge,
            is_branch=is_branch,
            in_ports=in_ports,
        )
        if is_merge:
            # only streams arriving on upstream links merge; local
            # attachments at this node pass through under their own lineage
            members: set[SourceId] = set()
            passthrough: list[int] = []
            for port in in_ports:
                if port[0] == PORT_LINK:
                    # feedback regulation is per in-link: one returning copy
                    # per branch can only be addressed to one stream
                    if len(ports[port]) > 1:
                        involved = sorted(s for lin in ports[port] for s in members_of[lin])
                        raise TopologyError([
                            f"vc {vc.id}: link {port[1]} into the merge at node {node} "
                            f"carries {len(ports[port])} separate streams (sources {involved}); "
                            "feedback cannot be subdivided below the branch level, "
                            "give each stream its own link into the merge"
                        ])
                    for lin in ports[port]:
                        members.update(members_of[lin])
                else:
                    for lin in ports[port]:
                        plan.up_port[lin] = port
                        passthrough.append(lin)
            merged = new_lineage(members, node)
            plan.merged_lineage = merged
            outgoing = [merged] + sorted(set(passthrough))
        else:
            incoming: list[int] = []
            for port in in_ports:
                incoming.extend(ports[port])
            outgoing = sorted(set(incoming))
            for port in in_ports:
                for lin in ports[port]:
                    plan.up_port[lin] = port
        plan.out_lineages = tuple(outgoing)
        node_plans[node] = plan
        for out in out_links:
            lineage_on_link[out] = tuple(outgoing)
            for lin in outgoing:
                links_of[lin].add(out)
            dst = links[out].dst
            arriving.setdefault(dst, {})[(PORT_LINK, out)] = list(outgoing)

    # terminal grouping: sources whose lineages ever collapse together
    parent: dict[SourceId, SourceId] = {s: s for s in vc.sources}

    def find(s: SourceId) -> SourceId:
        while parent[s] != s:
            parent[s] = parent[parent[s]]
            s = parent[s]
        return s

    for lin, members in members_of.items():
        members_sorted = sorted(members)
        for other in members_sorted[1:]:
            parent[find(other)] = find(members_sorted[0])
    groups: dict[SourceId, set[SourceId]] = {}
    for s in sorted(vc.sources):
        groups.setdefault(find(s), set()).add(s)
    flow_groups = tuple(frozenset(groups[k]) for k in sorted(groups))

    for lin in members_of:
        members = frozenset(members_of[lin])
        wire_origin = next(iter(members)) if len(members) == 1 else 255
        lineages[lin] = Lineage(
            id=lin,
            vc=vc.id,
            members=members,
            links=frozenset(links_of[lin]),
            created_at=created_at[lin],
            wire_origin=wire_origin,
        )

    return CompiledVc(
        vc=vc,
        paths=paths,
        lineages=lineages,
        lineage_on_link=lineage_on_link,
        node_plans=node_plans,
        roles=roles,
        flow_groups=flow_groups,
    )


def compile_network(nodes: Iterable[NodeId], links: Iterable[Link], vcs: Iterable[VirtualConnection]) -> CompiledNetwork:
    """Validate and derive routing plans; raises :class:`TopologyError` on any defect."""
    node_set = frozenset(nodes)
    link_list = list(links)
    vc_list = list(vcs)
    errors = validate_topology(node_set, link_list, vc_list)
    if errors:
        raise TopologyError(errors)
    link_map = {link.id: link for link in link_list}
    counter = [0]
    compiled = {vc.id: _compile_vc(vc, link_map, counter) for vc in sorted(vc_list, key=lambda v: v.id)}
    return CompiledNetwork(nodes=node_set, links=link_map, vcs=compiled)
