"""Point-cloud geometry: sampling, descriptors, raw edge features,
proximity and overlap of axis-aligned boxes, harmonic centrality.

Everything here is a pure function over numpy arrays; frames can be
processed in parallel.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError
from .rng import stream_rng

SAMPLE_SIZE = 256
PROXIMITY_THRESHOLD = 0.5  # meters, strict less-than
LENGTH_EPS = 1e-6   # m, guards log ratios of box extents
VOLUME_EPS = 1e-9   # m^3, guards the volume log ratio


@dataclass(frozen=True)
class AxisAlignedBox:
    min_corner: np.ndarray  # (3,)
    max_corner: np.ndarray  # (3,)

    @classmethod
    def of_points(cls, points: np.ndarray) -> "AxisAlignedBox":
        pts = _as_points(points)
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def extents(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def volume(self) -> float:
        e = self.extents
        return float(e[0] * e[1] * e[2])

    @property
    def center(self) -> np.ndarray:
        return (self.min_corner + self.max_corner) / 2


@dataclass(frozen=True)
class Descriptor:
    """11-number geometric summary of a point sample.

    Serialized order: [centroid(3), std(3), l, w, h, L, V].
    """

    centroid: np.ndarray   # (3,)
    std: np.ndarray        # (3,) population standard deviation
    extents: np.ndarray    # (3,) box side lengths l, w, h
    max_extent: float      # L = max(l, w, h)
    volume: float          # V = l*w*h

    def to_array(self) -> np.ndarray:
        return np.concatenate([
            self.centroid, self.std, self.extents,
            np.array([self.max_extent, self.volume]),
        ]).astype(np.float32)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"expected an (n, 3) point array, got shape {pts.shape}")
    return pts


def sample_points(points, n: int = SAMPLE_SIZE, seed: int = 0, *labels) -> np.ndarray:
    """Uniform sample of exactly n points.

    Without replacement when enough points exist (a permutation if the
    counts match exactly), with replacement otherwise.
    """
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise DataError("cannot sample from an empty point cloud")
    rng = stream_rng(seed, "sample_points", *labels)
    replace = pts.shape[0] < n
    idx = rng.choice(pts.shape[0], size=n, replace=replace)
    return pts[idx]


def compute_descriptor(points) -> Descriptor:
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise DataError("cannot describe an empty point cloud")
    centroid = pts.mean(axis=0)
    std = pts.std(axis=0)  # population (biased) std
    extents = pts.max(axis=0) - pts.min(axis=0)
    return Descriptor(
        centroid=centroid,
        std=std,
        extents=extents,
        max_extent=float(extents.max()),
        volume=float(extents[0] * extents[1] * extents[2]),
    )


def edge_raw_feature(di: Descriptor, dj: Descriptor,
                     length_eps: float = LENGTH_EPS, volume_eps: float = VOLUME_EPS) -> np.ndarray:
    """11-number feature of a directed edge i -> j.

    [c_j - c_i, std_j - std_i, log ratios of l, w, h, L, V], with every
    ratio guarded by a floor on numerator and denominator so degenerate
    (flat) boxes stay finite.
    """
    def safe_log_ratio(a, b, eps):
        return np.log(np.maximum(a, eps) / np.maximum(b, eps))

    ext = safe_log_ratio(dj.extents, di.extents, length_eps)
    big = safe_log_ratio(np.array(dj.max_extent), np.array(di.max_extent), length_eps)
    vol = safe_log_ratio(np.array(dj.volume), np.array(di.volume), volume_eps)
    return np.concatenate([
        dj.centroid - di.centroid,
        dj.std - di.std,
        ext,
        np.array([big, vol]),
    ]).astype(np.float32)


def box_distance(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    """Minimum euclidean distance between two boxes; 0 when they overlap."""
    gaps = np.maximum(0.0, np.maximum(a.min_corner - b.max_corner, b.min_corner - a.max_corner))
    return float(np.sqrt(np.sum(gaps.astype(np.float64) ** 2)))


def proximity_edges(boxes, threshold: float = PROXIMITY_THRESHOLD):
    """Directed edge list: (i, j) and (j, i) iff box distance < threshold."""
    edges = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if box_distance(boxes[i], boxes[j]) < threshold:
                edges.append((i, j))
                edges.append((j, i))
    edges.sort()
    return edges


def overlap_volume(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    side = np.maximum(0.0, hi - lo)
    return float(side[0] * side[1] * side[2])


def harmonic_centrality(adjacency) -> np.ndarray:
    """H(v) = sum over u != v of 1/d(u, v), BFS distances, unreachable -> 0."""
    adj = [sorted(set(nbrs)) for nbrs in adjacency]
    n = len(adj)
    out = np.zeros(n, dtype=np.float32)
    for src in range(n):
        dist = {src: 0}
        frontier = [src]
        depth = 0
        total = 0.0
        while frontier:
            depth += 1
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = depth
                        total += 1.0 / depth
                        nxt.append(v)
            frontier = nxt
        out[src] = total
    return out
