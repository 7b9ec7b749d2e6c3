"""Lane-graph construction, keypoints and the Urban Planning features."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np

from ..scene.geometry import points_to_polylines_distance, polyline_length
from ..scene.types import Scene

log = logging.getLogger(__name__)

NODE_MERGE_TOL = 0.5


@dataclass
class LaneGraph:
    """Directed multigraph: nodes are merged lane endpoints, edges are lanes."""

    n_nodes: int
    edges: list[tuple[int, int, float]]  # (start node, end node, polyline length), one per lane
    node_xy: np.ndarray

    @property
    def in_degree(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for _, v, _ in self.edges:
            d[v] += 1
        return d

    @property
    def out_degree(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for u, _, _ in self.edges:
            d[u] += 1
        return d

    @property
    def degree(self) -> np.ndarray:
        return self.in_degree + self.out_degree

    def adjacency_list(self) -> list[list[tuple[int, float]]]:
        adj: list[list[tuple[int, float]]] = [[] for _ in range(self.n_nodes)]
        for u, v, w in self.edges:
            adj[u].append((v, w))
        return adj


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_lane_graph(scene: Scene, tol: float = NODE_MERGE_TOL) -> LaneGraph:
    """Endpoints are joined by successor edges and by proximity below ``tol``."""
    n = scene.n_lanes
    if n == 0:
        return LaneGraph(0, [], np.zeros((0, 2)))
    # endpoint ids: 2*i is the start of lane i, 2*i + 1 its end
    pts = np.empty((2 * n, 2))
    pts[0::2] = scene.lanes[:, 0]
    pts[1::2] = scene.lanes[:, -1]
    ds = _DisjointSet(2 * n)
    for i, j in scene.successor_edges():
        ds.union(2 * i + 1, 2 * j)
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    for a, b in zip(*np.nonzero(np.triu(dist < tol, k=1))):
        ds.union(int(a), int(b))
    roots = sorted({ds.find(k) for k in range(2 * n)})
    node_of = {r: k for k, r in enumerate(roots)}
    node_xy = np.zeros((len(roots), 2))
    counts = np.zeros(len(roots))
    for k in range(2 * n):
        node = node_of[ds.find(k)]
        node_xy[node] += pts[k]
        counts[node] += 1
    node_xy /= counts[:, None]
    edges = [
        (node_of[ds.find(2 * i)], node_of[ds.find(2 * i + 1)], polyline_length(scene.lanes[i])) for i in range(n)
    ]
    return LaneGraph(len(roots), edges, node_xy)


def extract_keypoints(g: LaneGraph) -> list[tuple[int, int]]:
    """(node, degree) for every node whose in+out degree differs from 2."""
    deg = g.degree
    return [(int(k), int(deg[k])) for k in range(g.n_nodes) if deg[k] != 2]


def dijkstra(adj: list[list[tuple[int, float]]], source: int) -> np.ndarray:
    dist = np.full(len(adj), np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = np.zeros(len(adj), dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def _reachable(adj_nodes: list[list[int]], source: int) -> set[int]:
    seen = {source}
    stack = [source]
    while stack:
        u = stack.pop()
        for v in adj_nodes[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


@dataclass
class UrbanPlanningFeatures:
    connectivity: list[int]
    density: int
    reach: list[int]
    convenience: list[float]


def urban_planning_features(g: LaneGraph) -> UrbanPlanningFeatures:
    """Keypoint degree, keypoint count, reach and Dijkstra path lengths.

    Reach of a keypoint counts the other keypoints joined to it by a directed
    path in either direction. Convenience lists the shortest directed path
    length for every ordered keypoint pair (u, v), u != v, with v reachable.
    """
    kps = extract_keypoints(g)
    kp_nodes = [k for k, _ in kps]
    kp_set = set(kp_nodes)
    adj = g.adjacency_list()
    fwd = [[v for v, _ in nbrs] for nbrs in adj]
    bwd: list[list[int]] = [[] for _ in range(g.n_nodes)]
    for u, v, _ in g.edges:
        bwd[v].append(u)
    reach = []
    convenience: list[float] = []
    for k in kp_nodes:
        related = (_reachable(fwd, k) | _reachable(bwd, k)) & kp_set
        related.discard(k)
        reach.append(len(related))
        dist = dijkstra(adj, k)
        for v in kp_nodes:
            if v != k and np.isfinite(dist[v]):
                convenience.append(float(dist[v]))
    return UrbanPlanningFeatures([d for _, d in kps], len(kps), reach, convenience)


def nearest_lane_to_origin(scene: Scene) -> tuple[int, float]:
    dist, lane, _ = points_to_polylines_distance(np.zeros((1, 2)), scene.lanes)
    return int(lane[0]), float(dist[0])


def longest_successor_path(scene: Scene, start: int, max_expansions: int = 200_000) -> tuple[float, list[int]]:
    """Longest simple path (by summed lane length) following successor edges."""
    lengths = np.array([polyline_length(l) for l in scene.lanes])
    succ = [np.flatnonzero(scene.successor[i]).tolist() for i in range(scene.n_lanes)]
    best = (lengths[start], [start])
    budget = [max_expansions]
    path = [start]
    on_path = {start}

    def dfs(u: int, acc: float) -> None:
        nonlocal best
        if acc > best[0] + 1e-12:
            best = (acc, list(path))
        for v in succ[u]:
            if v in on_path or budget[0] <= 0:
                continue
            budget[0] -= 1
            path.append(v)
            on_path.add(v)
            dfs(v, acc + lengths[v])
            path.pop()
            on_path.discard(v)

    dfs(start, lengths[start])
    return float(best[0]), best[1]


def route_length(scene: Scene, max_origin_distance: float = 5.0) -> float:
    """Length of the longest successor path from the lane nearest the origin."""
    if scene.n_lanes == 0:
        log.warning("route_length: scene has no lanes")
        return 0.0
    lane, dist = nearest_lane_to_origin(scene)
    if dist > max_origin_distance:
        log.warning("route_length: no lane within %.1f m of the origin", max_origin_distance)
        return 0.0
    return longest_successor_path(scene, lane)[0]


def endpoint_distance(scene: Scene) -> float | None:
    """Mean gap between lane i's last point and lane j's first point over successor edges."""
    edges = scene.successor_edges()
    if not edges:
        return None
    gaps = [np.linalg.norm(scene.lanes[i, -1] - scene.lanes[j, 0]) for i, j in edges]
    return float(np.mean(gaps))
