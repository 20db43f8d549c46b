"""Road network model, plain-text network format and shortest-path routing."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence


class NetworkError(ValueError):
    """Malformed or inconsistent network definition."""


class NoPathError(Exception):
    """The destination edge cannot be reached from the origin edge."""


@dataclass(frozen=True)
class Junction:
    id: str
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    id: str
    from_: str
    to: str
    length: float
    max_speed: float
    lanes: int = 1
    geometry: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True)
class Route:
    edges: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)


def free_flow_weight(edge: Edge) -> float:
    """Free-flow traversal time ``length / max_speed`` in seconds."""
    return edge.length / edge.max_speed


class RoadNetwork:
    """Directed road graph. Edges are indexed in lexicographic id order.

    The integer index of an edge is used by the simulator and the routing
    internals; ``edge_ids[i]`` maps back to the public id.
    """

    def __init__(self, junctions: Sequence[Junction], edges: Sequence[Edge]):
        self.junctions: dict[str, Junction] = {}
        for j in junctions:
            if j.id in self.junctions:
                raise NetworkError(f"duplicate junction id {j.id!r}")
            self.junctions[j.id] = j
        self.edges: dict[str, Edge] = {}
        for e in edges:
            if e.id in self.edges:
                raise NetworkError(f"duplicate edge id {e.id!r}")
            for end in (e.from_, e.to):
                if end not in self.junctions:
                    raise NetworkError(f"edge {e.id!r} references unknown junction {end!r}")
            if e.from_ == e.to:
                raise NetworkError(f"edge {e.id!r} is a self-loop")
            if not (e.length > 0 and math.isfinite(e.length)):
                raise NetworkError(f"edge {e.id!r} has non-positive length")
            if not (e.max_speed > 0 and math.isfinite(e.max_speed)):
                raise NetworkError(f"edge {e.id!r} has non-positive max speed")
            if e.lanes < 1:
                raise NetworkError(f"edge {e.id!r} has fewer than one lane")
            if not e.geometry:
                a, b = self.junctions[e.from_], self.junctions[e.to]
                e = Edge(e.id, e.from_, e.to, e.length, e.max_speed, e.lanes,
                         ((a.x, a.y), (b.x, b.y)))
            self.edges[e.id] = e

        self.edge_ids: list[str] = sorted(self.edges)
        self.index: dict[str, int] = {eid: i for i, eid in enumerate(self.edge_ids)}
        outgoing: dict[str, list[int]] = {jid: [] for jid in self.junctions}
        for i, eid in enumerate(self.edge_ids):
            outgoing[self.edges[eid].from_].append(i)
        # succ[i]: edges leaving the junction where edge i ends; the U-turn
        # back along the same street is kept only at dead ends
        self.succ: list[list[int]] = []
        for eid in self.edge_ids:
            e = self.edges[eid]
            out = outgoing[e.to]
            turns = [j for j in out if self.edges[self.edge_ids[j]].to != e.from_]
            self.succ.append(turns if turns else list(out))
        self.free_flow: list[float] = [free_flow_weight(self.edges[eid]) for eid in self.edge_ids]

    def __len__(self) -> int:
        return len(self.edges)

    def successors(self, edge_id: str) -> set[str]:
        return {self.edge_ids[j] for j in self.succ[self.index[edge_id]]}

    def edge(self, edge_id: str) -> Edge:
        return self.edges[edge_id]

    def bounding_box(self) -> tuple[float, float, float, float]:
        xs: list[float] = []
        ys: list[float] = []
        for e in self.edges.values():
            for x, y in e.geometry:
                xs.append(x)
                ys.append(y)
        for j in self.junctions.values():
            xs.append(j.x)
            ys.append(j.y)
        return min(xs), min(ys), max(xs), max(ys)

    def is_valid_route(self, edges: Sequence[str]) -> bool:
        if not edges:
            return False
        try:
            idx = [self.index[e] for e in edges]
        except KeyError:
            return False
        return all(b in self.succ[a] for a, b in zip(idx, idx[1:]))

    def route_cost(self, edges: Sequence[str], weight: Callable[[Edge], float]) -> float:
        return sum(weight(self.edges[e]) for e in edges)


def dijkstra_indices(succ: Sequence[Sequence[int]], weight: Callable[[int], float],
                     origin: int, destination: int) -> list[int]:
    """Index-level Dijkstra. Route cost counts every edge, endpoints included.

    The heap orders by ``(cost, index)`` and a label is only replaced by a
    strictly cheaper one, so equal-cost ties resolve towards lower indices.
    """
    if origin == destination:
        return [origin]
    cache: dict[int, float] = {}

    def w(i: int) -> float:
        val = cache.get(i)
        if val is None:
            val = cache[i] = weight(i)
        return val

    dist = {origin: w(origin)}
    prev: dict[int, int] = {}
    heap = [(dist[origin], origin)]
    done: set[int] = set()
    while heap:
        cost, u = heapq.heappop(heap)
        if u in done:
            continue
        if u == destination:
            break
        done.add(u)
        for s in succ[u]:
            if s in done:
                continue
            nc = cost + w(s)
            if nc < dist.get(s, math.inf):
                dist[s] = nc
                prev[s] = u
                heapq.heappush(heap, (nc, s))
    else:
        raise NoPathError(f"edge {destination} unreachable from {origin}")
    path = [destination]
    while path[-1] != origin:
        path.append(prev[path[-1]])
    path.reverse()
    return path


def shortest_tree(succ: Sequence[Sequence[int]], weights: Sequence[float],
                  origin: int) -> dict[int, int]:
    """Predecessor map of the full shortest-path tree rooted at ``origin``.

    Uses the same ordering as :func:`dijkstra_indices`, so paths read off the
    tree are identical to single-pair queries.
    """
    dist = {origin: weights[origin]}
    prev: dict[int, int] = {}
    heap = [(dist[origin], origin)]
    done: set[int] = set()
    while heap:
        cost, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for s in succ[u]:
            if s in done:
                continue
            nc = cost + weights[s]
            if nc < dist.get(s, math.inf):
                dist[s] = nc
                prev[s] = u
                heapq.heappush(heap, (nc, s))
    prev[origin] = origin
    return prev


class TreeRouter:
    """Caches one shortest-path tree per origin for a fixed weight vector."""

    def __init__(self, network: "RoadNetwork", weights: Sequence[float] | None = None):
        self.network = network
        self.weights = list(network.free_flow if weights is None else weights)
        self._trees: dict[int, dict[int, int]] = {}

    def path(self, origin: int, destination: int) -> list[int]:
        tree = self._trees.get(origin)
        if tree is None:
            tree = self._trees[origin] = shortest_tree(self.network.succ, self.weights, origin)
        if destination not in tree:
            raise NoPathError(f"edge {destination} unreachable from {origin}")
        path = [destination]
        while path[-1] != origin:
            path.append(tree[path[-1]])
        path.reverse()
        return path

    def route(self, origin: str, destination: str) -> tuple[str, ...]:
        ids = self.network.edge_ids
        idx = self.network.index
        return tuple(ids[i] for i in self.path(idx[origin], idx[destination]))

    def cost(self, path: Sequence[int]) -> float:
        return sum(self.weights[i] for i in path)


def shortest_route(network: RoadNetwork, origin: str, destination: str,
                   weight: Callable[[Edge], float] = free_flow_weight) -> Route:
    """Minimum-weight route from ``origin`` to ``destination`` (both included)."""
    for eid in (origin, destination):
        if eid not in network.index:
            raise KeyError(f"unknown edge {eid!r}")
    ids = network.edge_ids
    edges = network.edges
    try:
        path = dijkstra_indices(network.succ, lambda i: weight(edges[ids[i]]),
                                network.index[origin], network.index[destination])
    except NoPathError:
        raise NoPathError(f"no path from {origin!r} to {destination!r}") from None
    return Route(tuple(ids[i] for i in path))


def observed_weight(edge: Edge, interval: int, result) -> float:
    """Mean experienced travel time on ``edge`` during ``interval`` of ``result``.

    Falls back to free-flow time when no vehicle left the edge in the interval.
    """
    return result.mean_travel_time(edge.id, interval)


# -- file format -----------------------------------------------------------

def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_network(text: str) -> RoadNetwork:
    lines = [(n, _strip(raw)) for n, raw in enumerate(text.splitlines(), 1)]
    lines = [(n, s) for n, s in lines if s]
    if not lines or lines[0][1].split() != ["NETWORK", "v1"]:
        raise NetworkError("missing 'NETWORK v1' header")
    junctions: list[Junction] = []
    raw_edges: list[tuple] = []
    geometry: dict[str, tuple[tuple[float, float], ...]] = {}
    for n, line in lines[1:]:
        tok = line.split()
        try:
            if tok[0] == "J" and len(tok) == 4:
                junctions.append(Junction(tok[1], float(tok[2]), float(tok[3])))
            elif tok[0] == "E" and len(tok) == 7:
                raw_edges.append((tok[1], tok[2], tok[3], float(tok[4]), float(tok[5]), int(tok[6])))
            elif tok[0] == "G" and len(tok) >= 6 and len(tok) % 2 == 0:
                vals = [float(v) for v in tok[2:]]
                geometry[tok[1]] = tuple(zip(vals[0::2], vals[1::2]))
            else:
                raise NetworkError(f"line {n}: unrecognised record {line!r}")
        except ValueError as exc:
            if isinstance(exc, NetworkError):
                raise
            raise NetworkError(f"line {n}: {exc}") from None
    known = {r[0] for r in raw_edges}
    for eid in geometry:
        if eid not in known:
            raise NetworkError(f"geometry for unknown edge {eid!r}")
    edges = [Edge(*r, geometry=geometry.get(r[0], ())) for r in raw_edges]
    return RoadNetwork(junctions, edges)


def load_network(path: str | Path) -> RoadNetwork:
    return parse_network(Path(path).read_text(encoding="utf-8"))


def format_network(network: RoadNetwork) -> str:
    out = ["NETWORK v1"]
    for jid in sorted(network.junctions):
        j = network.junctions[jid]
        out.append(f"J {j.id} {j.x:g} {j.y:g}")
    for eid in network.edge_ids:
        e = network.edges[eid]
        out.append(f"E {e.id} {e.from_} {e.to} {e.length:g} {e.max_speed:g} {e.lanes}")
    for eid in network.edge_ids:
        e = network.edges[eid]
        a, b = network.junctions[e.from_], network.junctions[e.to]
        if e.geometry != ((a.x, a.y), (b.x, b.y)):
            coords = " ".join(f"{x:g} {y:g}" for x, y in e.geometry)
            out.append(f"G {e.id} {coords}")
    return "\n".join(out) + "\n"


def save_network(network: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(format_network(network), encoding="utf-8")


def grid_network(rows: int, cols: int, block: float = 200.0, speed: float = 13.89,
                 lanes: int = 1) -> RoadNetwork:
    """Manhattan grid of ``rows x cols`` blocks with two-way streets."""
    junctions = [
        Junction(f"j{r:02d}{c:02d}", c * block, r * block)
        for r in range(rows + 1) for c in range(cols + 1)
    ]
    edges = []

    def street(a: str, b: str) -> None:
        edges.append(Edge(f"{a}-{b}", a, b, block, speed, lanes))
        edges.append(Edge(f"{b}-{a}", b, a, block, speed, lanes))

    for r in range(rows + 1):
        for c in range(cols + 1):
            here = f"j{r:02d}{c:02d}"
            if c < cols:
                street(here, f"j{r:02d}{c + 1:02d}")
            if r < rows:
                street(here, f"j{r + 1:02d}{c:02d}")
    return RoadNetwork(junctions, edges)
