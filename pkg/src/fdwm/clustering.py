"""Frequency sensitivity clustering: sensitivity map -> clustering map.

Each canonical sensitive position gets a feature ``(1 - t, radius)``; both
dimensions are min-max normalized and split by 2-means.  The cluster nearer
the spectrum center (by mean raw radius) becomes the clustering map.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .spectral import is_canonical, sym_index


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyFeature:
    position: tuple[int, int]
    d0: float  # 1 - test error
    d1: float  # distance to (h/2, w/2)


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    init_centroids: np.ndarray
    wcss_history: list[float]
    n_iter: int

    @property
    def clusters(self) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(self.labels == 0), np.flatnonzero(self.labels == 1)


@dataclass(frozen=True)
class ClusteringMap:
    mask: np.ndarray  # (h, w) uint8, 1 = used for trigger generation
    diagnostics: dict = field(default_factory=dict)

    @property
    def positions(self) -> list[tuple[int, int]]:
        """Canonical positions marked 1."""
        h, w = self.mask.shape
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.mask))
                if is_canonical(int(i), int(j), h, w)]


def extract_features(heatmap, smap) -> list[FrequencyFeature]:
    t = heatmap.t if hasattr(heatmap, "t") else np.asarray(heatmap)
    s = smap.s if hasattr(smap, "s") else np.asarray(smap)
    if t.shape != s.shape:
        raise ValueError("heat map and sensitivity map differ in shape")
    h, w = t.shape
    feats = []
    for i, j in zip(*np.nonzero(s)):
        i, j = int(i), int(j)
        if not is_canonical(i, j, h, w):
            continue
        feats.append(FrequencyFeature((i, j), float(1.0 - t[i, j]),
                                      float(np.hypot(i - h / 2, j - w / 2))))
    return feats


def minmax_normalize(features) -> np.ndarray:
    """``(n, 2)`` array; a constant dimension maps to 0."""
    if len(features) and isinstance(features[0], FrequencyFeature):
        features = [[f.d0, f.d1] for f in features]
    x = np.array(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise DegenerateInputError("need at least 2 features to normalize")
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    out = np.zeros_like(x)
    nz = span > 0
    out[:, nz] = (x[:, nz] - lo[nz]) / span[nz]
    return out


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    first = rng.integers(len(points))
    centroids = [points[first]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centroids)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total == 0:
            idx = rng.integers(len(points))
        else:
            idx = int(np.searchsorted(np.cumsum(d2) / total, rng.random(), side="right"))
            idx = min(idx, len(points) - 1)
        centroids.append(points[idx])
    return np.array(centroids, dtype=np.float64)


def _wcss(points, centroids, labels) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def kmeans2(points, seed: int = 0, max_iters: int = 100, tol: float = 1e-9,
            init: np.ndarray | None = None) -> KMeansResult:
    """Lloyd's algorithm with k = 2 and seeded k-means++ initialization.

    Ties in assignment go to cluster 0.  An emptied cluster is reseeded with
    the point farthest from its assigned centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if len(x) < 2:
        raise DegenerateInputError("need at least 2 points")
    if np.all(x == x[0]):
        raise DegenerateInputError("all feature points are identical")
    rng = np.random.default_rng(seed)
    c = kmeans_pp_init(x, 2, rng) if init is None else np.array(init, dtype=np.float64)
    c0 = c.copy()
    history = []
    labels = np.zeros(len(x), dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        labels = np.argmin(d, axis=1)
        for k in range(2):
            if not np.any(labels == k):
                far = int(np.argmax(d[np.arange(len(x)), labels]))
                labels[far] = k
        history.append(_wcss(x, c, labels))
        new = np.array([x[labels == k].mean(axis=0) for k in range(2)])
        history.append(_wcss(x, new, labels))
        shift = float(np.max(np.abs(new - c)))
        c = new
        if shift < tol:
            break
    return KMeansResult(labels, c, c0, history, it)


def select_cluster(result: KMeansResult, features, shape,
                   selection: str = "nearest") -> ClusteringMap:
    """Mark the members of the chosen cluster and their symmetric partners."""
    if selection not in {"nearest", "farthest"}:
        raise ValueError("selection must be 'nearest' or 'farthest'")
    h, w = shape
    radii = np.array([f.d1 for f in features])
    means = [radii[result.labels == k].mean() for k in range(2)]
    if means[0] == means[1]:
        near = int(result.labels[int(np.argmin(radii))])
    else:
        near = int(np.argmin(means))
    chosen = near if selection == "nearest" else 1 - near
    mask = np.zeros((h, w), dtype=np.uint8)
    for f, lab in zip(features, result.labels):
        if lab == chosen:
            mask[f.position] = 1
            mask[sym_index(*f.position, h, w)] = 1
    diag = {
        "selection": selection,
        "chosen_cluster": chosen,
        "centroids": result.centroids.tolist(),
        "member_counts": [int(np.sum(result.labels == k)) for k in range(2)],
        "mean_radius": [float(m) for m in means],
        "iterations": result.n_iter,
    }
    return ClusteringMap(mask, diag)


def clustering_map(heatmap, smap, seed: int = 0, selection: str = "nearest",
                   max_iters: int = 100, tol: float = 1e-9) -> ClusteringMap:
    """Full pipeline from heat map + sensitivity map to the clustering map.

    A single sensitive pair, or identical features, cannot be split in two;
    in that case every sensitive position is kept.
    """
    features = extract_features(heatmap, smap)
    if not features:
        raise DegenerateInputError("no sensitive frequencies")
    h, w = (heatmap.t if hasattr(heatmap, "t") else np.asarray(heatmap)).shape
    pts = np.array([[f.d0, f.d1] for f in features])
    if len(features) < 2 or np.all(pts == pts[0]):
        mask = np.zeros((h, w), dtype=np.uint8)
        for f in features:
            mask[f.position] = 1
            mask[sym_index(*f.position, h, w)] = 1
        return ClusteringMap(mask, {"selection": selection, "degenerate": True,
                                    "member_counts": [len(features), 0]})
    result = kmeans2(minmax_normalize(features), seed, max_iters, tol)
    return select_cluster(result, features, (h, w), selection)


def to_pbm_bytes(mask: np.ndarray) -> bytes:
    """Binary P4 bitmap; 1 = black per the PBM convention."""
    h, w = mask.shape
    packed = np.packbits(mask.astype(bool), axis=1)
    return f"P4\n{w} {h}\n".encode("ascii") + packed.tobytes()


def read_pbm(data: bytes) -> np.ndarray:
    m = re.match(rb"P4\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError("not a P4 bitmap")
    w, h = int(m.group(1)), int(m.group(2))
    row = (w + 7) // 8
    raw = np.frombuffer(data[m.end():m.end() + row * h], dtype=np.uint8)
    if raw.size != row * h:
        raise ValueError("truncated P4 bitmap")
    return np.unpackbits(raw.reshape(h, row), axis=1)[:, :w].astype(np.uint8)
