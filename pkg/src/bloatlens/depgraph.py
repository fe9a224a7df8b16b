"""Package attribute graph: construction, reachability, and correlations.

Nodes are installed packages annotated with bloat degree, vulnerability
count, and depth. The graph grows by breadth-first search from the
directly-accessed packages (bloat degree < 1, depth 1), following declared
dependencies restricted to the installed set, so each node's depth is the
shortest dependency distance from a directly-accessed package. Packages
never reached are excluded from the graph and reported separately.
"""

from __future__ import annotations

import logging
import statistics
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .packages import APT, CONDA, PIP, PackageRecord, canonical_pip_name

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphNode:
    key: str
    manager: str
    name: str
    version: str
    d_p: float
    vuln_count: int
    depth: int


class PackageAttrGraph:
    """Directed dependency graph (dependent -> dependency) with attributes."""

    def __init__(self, nodes: Mapping[str, GraphNode],
                 edges: Iterable[tuple[str, str]],
                 excluded: Sequence[str] = (),
                 dangling_deps: int = 0):
        self.nodes = dict(nodes)
        self.edges = frozenset(edges)
        self.excluded = tuple(excluded)
        self.dangling_deps = dangling_deps
        self._succ: dict[str, set[str]] = {k: set() for k in self.nodes}
        self._pred: dict[str, set[str]] = {k: set() for k in self.nodes}
        for a, b in self.edges:
            self._succ[a].add(b)
            self._pred[b].add(a)

    def __contains__(self, key: str) -> bool:
        return key in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)


class _Resolver:
    """Resolves declared dependency names to installed packages."""

    def __init__(self, catalog: Sequence[PackageRecord]):
        self.by_manager: dict[str, dict[str, PackageRecord]] = {APT: {}, PIP: {}, CONDA: {}}
        self.apt_provides: dict[str, list[PackageRecord]] = {}
        for rec in catalog:
            names = self.by_manager.setdefault(rec.manager, {})
            if rec.name in names:
                log.warning("duplicate %s package name %s; keeping version %s",
                            rec.manager, rec.name, names[rec.name].version)
                continue
            names[rec.name] = rec
            if rec.manager == APT:
                for virtual in rec.provides:
                    self.apt_provides.setdefault(virtual, []).append(rec)

    def direct_deps(self, rec: PackageRecord) -> tuple[list[PackageRecord], int]:
        """Installed packages ``rec`` depends on, plus dangling-group count.

        APT alternative groups ('a | b') link every installed alternative;
        virtual names resolve through the Provides index. A group none of
        whose alternatives is installed counts as dangling.
        """
        deps: dict[str, PackageRecord] = {}
        dangling = 0
        names = self.by_manager.get(rec.manager, {})
        for group in rec.declared_deps:
            found = []
            for alt in group:
                if rec.manager == PIP:
                    alt = canonical_pip_name(alt)
                hit = names.get(alt)
                if hit is not None:
                    found.append(hit)
                elif rec.manager == APT:
                    found.extend(self.apt_provides.get(alt, ()))
            if not found:
                dangling += 1
            for dep in found:
                if dep.key != rec.key:
                    deps[dep.graph_key] = dep
        return [deps[k] for k in sorted(deps)], dangling


def build_graph(catalog: Sequence[PackageRecord],
                d_p: Mapping[str, float],
                vuln_counts: Mapping[str, int] | None = None) -> PackageAttrGraph:
    """Create the package attribute graph by BFS from the start set.

    ``d_p`` and ``vuln_counts`` are keyed by ``PackageRecord.graph_key``;
    a package missing from ``d_p`` counts as fully unused (1.0), a missing
    vulnerability count as zero. Ties are broken by sorted key so the
    build is deterministic under any catalog ordering, and each package is
    enqueued at most once so dependency cycles terminate.
    """
    vuln_counts = vuln_counts or {}
    ordered = sorted(catalog, key=lambda r: r.key)
    resolver = _Resolver(ordered)
    records = {rec.graph_key: rec
               for m in resolver.by_manager.values() for rec in m.values()}

    def dp_of(key: str) -> float:
        if key not in d_p:
            log.debug("no bloat degree for %s; assuming unused", key)
        return d_p.get(key, 1.0)

    depth: dict[str, int] = {}
    start = sorted(k for k in records if dp_of(k) < 1)
    for k in start:
        depth[k] = 1
    queue = deque(start)
    edges: set[tuple[str, str]] = set()
    dangling = 0
    while queue:
        cur = queue.popleft()
        deps, missing = resolver.direct_deps(records[cur])
        dangling += missing
        for dep in deps:
            edges.add((cur, dep.graph_key))
            if dep.graph_key not in depth:
                depth[dep.graph_key] = depth[cur] + 1
                queue.append(dep.graph_key)
    nodes = {}
    for key in sorted(depth):
        rec = records[key]
        nodes[key] = GraphNode(
            key=key, manager=rec.manager, name=rec.name, version=rec.version,
            d_p=dp_of(key), vuln_count=vuln_counts.get(key, 0), depth=depth[key],
        )
    excluded = sorted(k for k in records if k not in depth)
    return PackageAttrGraph(nodes, edges, excluded, dangling)


def _reach(adj: Mapping[str, set[str]], start: str) -> set[str]:
    seen: set[str] = set()
    queue = deque(adj[start])
    while queue:
        cur = queue.popleft()
        if cur in seen:
            continue
        seen.add(cur)
        queue.extend(adj[cur] - seen)
    seen.discard(start)
    return seen


def pd_set(g: PackageAttrGraph, key: str) -> set[str]:
    """Packages ``key`` depends on, directly or transitively."""
    if key not in g.nodes:
        raise KeyError(f"unknown package key {key!r}")
    return _reach(g._succ, key)


def pr_set(g: PackageAttrGraph, key: str) -> set[str]:
    """Packages that depend on ``key``, directly or transitively."""
    if key not in g.nodes:
        raise KeyError(f"unknown package key {key!r}")
    return _reach(g._pred, key)


def pd_aggregate(g: PackageAttrGraph, key: str) -> tuple[float | None, int]:
    """Average bloat degree and total vulnerabilities over PD(key).

    The average is None when the package depends on nothing.
    """
    pd = pd_set(g, key)
    if not pd:
        return None, 0
    return (statistics.fmean(g.nodes[k].d_p for k in pd),
            sum(g.nodes[k].vuln_count for k in pd))


def depth_correlations(g: PackageAttrGraph,
                       manager: str) -> tuple[float | None, float | None]:
    """Pearson correlation of depth with |PD| and with |PR| for one manager.

    Either correlation is None when fewer than two nodes exist or a series
    has zero variance.
    """
    keys = sorted(k for k, n in g.nodes.items() if n.manager == manager)
    if len(keys) < 2:
        return None, None
    depths = [float(g.nodes[k].depth) for k in keys]
    pd_sizes = [float(len(pd_set(g, k))) for k in keys]
    pr_sizes = [float(len(pr_set(g, k))) for k in keys]

    def cor(xs, ys):
        try:
            return statistics.correlation(xs, ys)
        except statistics.StatisticsError:
            return None

    return cor(depths, pd_sizes), cor(depths, pr_sizes)


def to_node_link(g: PackageAttrGraph) -> dict:
    """Node-link JSON document for plotting or external graph tools."""
    return {
        "nodes": [
            {
                "id": n.key,
                "manager": n.manager,
                "name": n.name,
                "version": n.version,
                "depth": n.depth,
                "d_p": round(n.d_p, 6),
                "vulns": n.vuln_count,
            }
            for n in (g.nodes[k] for k in sorted(g.nodes))
        ],
        "edges": [list(e) for e in sorted(g.edges)],
        "excluded": list(g.excluded),
        "dangling_dependencies": g.dangling_deps,
    }


def to_dot(g: PackageAttrGraph) -> str:
    """Graphviz dot rendering; node labels carry name, depth, d_p and |V|."""
    lines = ["digraph packages {", "  node [shape=box];"]
    for key in sorted(g.nodes):
        n = g.nodes[key]
        label = f"{n.name}\\nD={n.depth}\\nd_p={n.d_p:.2f}\\n|V|={n.vuln_count}"
        lines.append(f'  "{key}" [label="{label}"];')
    for a, b in sorted(g.edges):
        lines.append(f'  "{a}" -> "{b}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
