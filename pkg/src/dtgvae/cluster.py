"""K-Means, spectral and Ward agglomerative clustering, plus a Jacobi eigensolver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import pairwise_distances


class ClusteringError(ValueError):
    pass


class DegenerateInputError(ClusteringError):
    pass


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    algorithm: str
    inertia: float | None = None
    merge_heights: np.ndarray | None = None
    history: list[float] = field(default_factory=list)


def _check_k(n: int, k: int, min_k: int = 1) -> None:
    if k < min_k:
        raise ClusteringError(f"k must be at least {min_k}, got {k}")
    if k > n:
        raise ClusteringError(f"k={k} exceeds the number of points ({n})")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


# ------------------------------------------------------------------ k-means

def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.array(centers)


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest centroid (lowest index on ties), then refill any empty cluster
    with the point farthest from its centroid among non-singleton clusters."""
    n, k = len(x), len(centers)
    d = _sq_dists(x, centers)
    labels = d.argmin(axis=1)
    for j in range(k):
        if (labels == j).any():
            continue
        cost = d[np.arange(n), labels]
        counts = np.bincount(labels, minlength=k)
        cost[counts[labels] <= 1] = -1.0
        labels[int(cost.argmax())] = j
    return labels


def _means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    centers = np.zeros((k, x.shape[1]))
    np.add.at(centers, labels, x)
    return centers / np.bincount(labels, minlength=k)[:, None]


def _sse(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> float:
    return float(((x - centers[labels]) ** 2).sum())


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    k = len(centers)
    history = []
    for _ in range(max_iter):
        labels = _assign(x, centers)
        new = _means(x, labels, k)
        history.append(_sse(x, labels, new))
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    labels = _assign(x, centers)
    centers = _means(x, labels, k)
    inertia = _sse(x, labels, centers)
    history.append(inertia)
    return labels, centers, inertia, history


def kmeans(x, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
           restarts: int = 10) -> ClusterAssignment:
    """k-means++ seeded Lloyd iterations; best of ``restarts`` runs by inertia."""
    x = np.asarray(x, dtype=np.float64)
    _check_k(len(x), k)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, centers, inertia, history = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia, history)
    labels, centers, inertia, history = best
    return ClusterAssignment(labels.astype(np.int64), k, "km", inertia=inertia, history=history)


# -------------------------------------------------------------- eigensolver

def eigh(m, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eigh needs a square matrix, got {a.shape}")
    scale = np.linalg.norm(a)
    if np.abs(a - a.T).max(initial=0.0) > 1e-10 * max(scale, 1.0):
        raise ValueError("eigh input is not symmetric")
    a = (a + a.T) / 2.0
    n = a.shape[0]
    v = np.eye(n)
    target = tol * scale
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


# ----------------------------------------------------------------- spectral

def normalized_laplacian(x) -> np.ndarray:
    """I - D^-1/2 A D^-1/2 with a Gaussian affinity at the median pairwise distance."""
    x = np.asarray(x, dtype=np.float64)
    dist = pairwise_distances(x)
    upper = dist[np.triu_indices(len(x), 1)]
    nonzero = upper[upper > 0]
    if nonzero.size == 0:
        raise DegenerateInputError("all points identical; affinity bandwidth is zero")
    sigma = float(np.median(nonzero))
    aff = np.exp(-(dist ** 2) / (2.0 * sigma ** 2))
    np.fill_diagonal(aff, 0.0)
    deg = aff.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(len(x)) - inv_sqrt[:, None] * aff * inv_sqrt[None, :]
    return (lap + lap.T) / 2.0


def spectral(x, k: int, seed: int = 0, eigensolver=None) -> ClusterAssignment:
    """Normalised spectral clustering on row-normalised Laplacian eigenvectors.

    ``eigensolver`` defaults to LAPACK (``numpy.linalg.eigh``); :func:`eigh`
    is the pure Jacobi alternative for small inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_k(len(x), k, min_k=2)
    lap = normalized_laplacian(x)
    solver = eigensolver or np.linalg.eigh
    _, vecs = solver(lap)
    emb = vecs[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)
    result = kmeans(emb, k, seed=seed)
    return ClusterAssignment(result.labels, k, "sc", inertia=result.inertia)


# ------------------------------------------------------------- agglomerative

def ward_linkage(x) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Full Ward merge sequence via the Lance-Williams update.

    Clusters are identified by the lowest original index they contain.  Merge
    heights are Ward distances on squared-Euclidean base dissimilarities,
    i.e. twice the increase in within-cluster sum of squares.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    d = _sq_dists(x, x)
    d = (d + d.T) / 2.0  # the matmul route is not bit-symmetric
    np.fill_diagonal(d, np.inf)
    size = np.ones(n)
    alive = np.ones(n, dtype=bool)
    merges, heights = [], []
    for _ in range(n - 1):
        # d is symmetric and argmin scans row-major, so the first hit is the
        # lexicographically smallest (i, j) with i < j
        i, j = divmod(int(d.argmin()), n)
        h = d[i, j]
        merges.append((i, j))
        heights.append(h)
        si, sj = size[i], size[j]
        sk = size
        new = ((si + sk) * d[i] + (sj + sk) * d[j] - sk * h) / (si + sj + sk)
        d[i, :] = new
        d[:, i] = new
        d[j, :] = np.inf
        d[:, j] = np.inf
        d[i, i] = np.inf
        d[~alive, i] = np.inf
        d[i, ~alive] = np.inf
        size[i] = si + sj
        alive[j] = False
    return merges, np.array(heights)


def labels_from_merges(n: int, merges, k: int) -> np.ndarray:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in merges[: n - k]:
        parent[find(j)] = find(i)
    roots = [find(a) for a in range(n)]
    _, labels = np.unique(roots, return_inverse=True)
    return labels.astype(np.int64)


def agglomerative(x, k: int) -> ClusterAssignment:
    x = np.asarray(x, dtype=np.float64)
    _check_k(len(x), k)
    merges, heights = ward_linkage(x)
    labels = labels_from_merges(len(x), merges, k)
    return ClusterAssignment(labels, k, "ac", merge_heights=heights[: len(x) - k])


ALGORITHMS = {"km": kmeans, "sc": spectral, "ac": agglomerative}


def run(algo: str, x, k: int, seed: int = 0) -> ClusterAssignment:
    if algo not in ALGORITHMS:
        raise ClusteringError(f"unknown algorithm {algo!r}; choose from {sorted(ALGORITHMS)}")
    if algo == "ac":
        return agglomerative(x, k)
    return ALGORITHMS[algo](x, k, seed=seed)
