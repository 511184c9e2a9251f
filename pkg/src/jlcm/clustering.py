"""Clustering methods used for neuron reordering and codebook initialization.

All methods take an ``N x d`` sample matrix (a 1-D array is treated as N
scalars) and return a :class:`ClusterResult`. Seeded methods are
deterministic given the seed; ``hierarchical`` needs no seed.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist, pdist

from . import kernels

#: Scalar k-means uses the exact dynamic program up to this many samples.
EXACT_1D_MAX = 4096
#: Graph clustering works on at most this many representatives.
GRAPH_MAX_SAMPLES = 2048
GRAPH_KNN = 10
POWER_TOL = 1e-8
POWER_MAX_ITER = 10_000


class ClusteringError(ValueError):
    pass


class Method(str, enum.Enum):
    RANDOM = "random"
    KMEANS = "kmeans"
    BISECTING = "bisecting"
    GRAPH = "graph"
    HIERARCHICAL = "hierarchical"


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _as_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ClusteringError(f"samples must be N x d with N, d >= 1, got shape {x.shape}")
    return x


def _check_k(n: int, k: int) -> None:
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    if k > n:
        raise ClusteringError(f"k={k} exceeds the number of samples N={n}")


def inertia_of(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    x = _as_samples(x)
    diff = x - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _finish(x: np.ndarray, labels: np.ndarray, k: int) -> ClusterResult:
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    centroids = sums / np.maximum(counts, 1.0)[:, None]
    return ClusterResult(labels, centroids, inertia_of(x, labels, centroids))


def _relabel_by_first_appearance(owner: np.ndarray) -> np.ndarray:
    _, first, inverse = np.unique(owner, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse]


def _segments_to_labels(order: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    n = order.size
    seg = np.repeat(np.arange(bounds.size - 1), np.diff(bounds))
    labels = np.empty(n, dtype=np.int64)
    labels[order] = seg
    return labels


# --------------------------------------------------------------------------
# k-means


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[0])
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[chosen].copy()


def _assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[1] == 1:
        order = np.argsort(centroids[:, 0], kind="stable")
        idx = kernels.nearest_codeword(x[:, 0], centroids[order, 0])
        labels = order[idx]
        return labels, (x[:, 0] - centroids[labels, 0]) ** 2
    d = cdist(x, centroids, "sqeuclidean")
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(x.shape[0]), labels]


def _fill_empty(labels: np.ndarray, dist: np.ndarray, k: int) -> None:
    """An empty cluster takes the farthest sample of a cluster that can spare one."""
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        movable = counts[labels] > 1
        if not movable.any():
            break
        far = int(np.argmax(np.where(movable, dist, -1.0)))
        counts[labels[far]] -= 1
        counts[c] += 1
        labels[far] = c
        dist[far] = 0.0


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float) -> ClusterResult:
    centroids = _kmeans_pp(x, k, rng)
    labels, dist = _assign(x, centroids)
    prev = np.inf
    for _ in range(max_iter):
        _fill_empty(labels, dist, k)
        result = _finish(x, labels, k)
        cur = result.inertia
        assert cur <= prev * (1 + 1e-12) + 1e-300, "k-means inertia increased"
        new_labels, dist = _assign(x, result.centroids)
        converged = np.array_equal(new_labels, labels) or prev - cur <= tol * cur
        labels = new_labels
        prev = cur
        if converged:
            break
    _fill_empty(labels, dist, k)
    return _finish(x, labels, k)


def kmeans(samples, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-10) -> ClusterResult:
    """Lloyd's k-means from k-means++ seeding.

    Scalars with ``N <= EXACT_1D_MAX`` are solved exactly by dynamic
    programming over sorted contiguous partitions instead.
    """
    x = _as_samples(samples)
    n = x.shape[0]
    _check_k(n, k)
    if x.shape[1] == 1 and n <= EXACT_1D_MAX:
        order = np.argsort(x[:, 0], kind="stable")
        bounds = kernels.kmeans1d_dp(x[order, 0], k)
        return _finish(x, _segments_to_labels(order, bounds), k)
    return _lloyd(x, k, np.random.default_rng(seed), max_iter, tol)


def bisecting_kmeans(samples, k: int, seed: int = 0) -> ClusterResult:
    """Split the cluster with the largest inertia in two until k clusters exist."""
    x = _as_samples(samples)
    n = x.shape[0]
    _check_k(n, k)
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64)
    sse = [inertia_of(x, labels, x.mean(axis=0, keepdims=True))]
    for new in range(1, k):
        sizes = np.bincount(labels, minlength=new)
        cand = [c for c in range(new) if sizes[c] >= 2]
        target = max(cand, key=lambda c: (sse[c], -c))
        members = np.flatnonzero(labels == target)
        split = kmeans(x[members], 2, seed=int(rng.integers(2**31)))
        labels[members[split.labels == 1]] = new
        for c in (target, new):
            m = labels == c
            sse_c = float(np.sum((x[m] - x[m].mean(axis=0)) ** 2))
            if c < len(sse):
                sse[c] = sse_c
            else:
                sse.append(sse_c)
    return _finish(x, labels, k)


# --------------------------------------------------------------------------
# hierarchical


def hierarchical(samples, k: int) -> ClusterResult:
    """Agglomerative clustering with Ward linkage.

    Scalars go through an O(N log N) path that merges neighbours in sorted
    order (Ward's optimal merge for scalars is always between neighbours).
    """
    x = _as_samples(samples)
    n = x.shape[0]
    _check_k(n, k)
    if x.shape[1] == 1:
        order = np.argsort(x[:, 0], kind="stable")
        bounds = kernels.ward_1d(x[order, 0], k)
        return _finish(x, _segments_to_labels(order, bounds), k)
    cost = cdist(x, x, "sqeuclidean") * 0.5
    owner = kernels.ward_general(cost, k)
    return _finish(x, _relabel_by_first_appearance(owner), k)


# --------------------------------------------------------------------------
# graph (normalized cut)


def knn_graph(x: np.ndarray) -> np.ndarray:
    """Symmetric kNN affinity with a Gaussian kernel at the median pairwise distance."""
    n = x.shape[0]
    if n == 1:
        return np.zeros((1, 1))
    dist = cdist(x, x)
    bw = float(np.median(pdist(x)))
    if bw <= 0:
        bw = 1.0
    knn = min(GRAPH_KNN, n - 1)
    masked = dist + np.diag(np.full(n, np.inf))
    nbrs = np.argsort(masked, axis=1, kind="stable")[:, :knn]
    rows = np.repeat(np.arange(n), knn)
    aff = np.zeros((n, n))
    aff[rows, nbrs.ravel()] = np.exp(-(dist[rows, nbrs.ravel()] ** 2) / (2.0 * bw * bw))
    return np.maximum(aff, aff.T)


def fiedler_vector(aff: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Second eigenvector of the normalized Laplacian, mapped back by D^-1/2.

    Power iteration on (I + D^-1/2 A D^-1/2) / 2 with the trivial
    eigenvector projected out.
    """
    deg = aff.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    s = aff * inv_sqrt[:, None] * inv_sqrt[None, :]
    top = np.sqrt(deg)
    top /= np.linalg.norm(top)
    v = rng.standard_normal(aff.shape[0])
    v -= (top @ v) * top
    v /= np.linalg.norm(v)
    for _ in range(POWER_MAX_ITER):
        w = 0.5 * (v + s @ v)
        w -= (top @ w) * top
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        w /= norm
        if np.linalg.norm(w - v) < POWER_TOL:
            v = w
            break
        v = w
    return v * inv_sqrt


def ncut_value(aff: np.ndarray, mask: np.ndarray) -> float:
    deg = aff.sum(axis=1)
    cut = aff[mask][:, ~mask].sum()
    va, vb = deg[mask].sum(), deg[~mask].sum()
    if va == 0 or vb == 0:
        return np.inf
    return float(cut / va + cut / vb)


def _best_sweep_split(aff: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = y.size
    order = np.argsort(y, kind="stable")
    deg = aff.sum(axis=1)
    total = deg.sum()
    a = aff[np.ix_(order, order)]
    # moving node t into the left set changes cut by deg - 2 * (links to left)
    links_left = np.cumsum(a, axis=0)  # links_left[t, u]: sum over first t+1 rows
    inner = np.array([links_left[t - 1, t] if t > 0 else 0.0 for t in range(n)])
    dcut = deg[order] - 2.0 * inner
    cut = np.cumsum(dcut)[:-1]
    vol = np.cumsum(deg[order])[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        score = cut / vol + cut / (total - vol)
    score = np.where(np.isfinite(score), score, np.inf)
    t = int(np.argmin(score))
    mask = np.zeros(n, dtype=bool)
    mask[order[: t + 1]] = True
    return mask


def _bisect_graph(aff: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    ncomp, comp = connected_components(csr_matrix(aff), directed=False)
    if ncomp > 1:
        return comp == comp[0]
    return _best_sweep_split(aff, fiedler_vector(aff, rng))


def _graph_core(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    if k == 1:
        return labels
    aff = knn_graph(x)
    for new in range(1, k):
        sizes = np.bincount(labels, minlength=new)
        sse = [float(np.sum((x[labels == c] - x[labels == c].mean(axis=0)) ** 2)) if sizes[c] else -1.0
               for c in range(new)]
        cand = [c for c in range(new) if sizes[c] >= 2]
        target = max(cand, key=lambda c: (sse[c], -c))
        members = np.flatnonzero(labels == target)
        side = _bisect_graph(aff[np.ix_(members, members)], rng)
        labels[members[~side]] = new
    return labels


def _split_duplicates(x: np.ndarray, k: int) -> np.ndarray:
    """k clusters when fewer than k distinct samples exist: one per distinct
    value, then the largest group is halved (by sample order) until k."""
    _, labels = np.unique(x, axis=0, return_inverse=True)
    labels = labels.ravel().astype(np.int64)
    for new in range(labels.max() + 1, k):
        sizes = np.bincount(labels, minlength=new)
        members = np.flatnonzero(labels == int(np.argmax(sizes)))
        labels[members[members.size // 2 :]] = new
    return labels


def graph_spectral(samples, k: int, seed: int = 0) -> ClusterResult:
    """Recursive normalized-cut bisection on a kNN similarity graph.

    Disconnected components are split off before any spectral cut. With more
    than ``GRAPH_MAX_SAMPLES`` samples the graph is built on evenly spaced
    representatives (unique rows, then quantiles for scalars) and every
    sample inherits the label of its nearest representative.
    """
    x = _as_samples(samples)
    n = x.shape[0]
    _check_k(n, k)
    rng = np.random.default_rng(seed)
    reps = np.unique(x, axis=0)
    if reps.shape[0] > GRAPH_MAX_SAMPLES:
        pick = np.linspace(0, reps.shape[0] - 1, GRAPH_MAX_SAMPLES).round().astype(np.int64)
        reps = reps[np.unique(pick)]
    if reps.shape[0] < k:
        return _finish(x, _split_duplicates(x, k), k)
    if reps.shape[0] < n:
        rep_labels = _graph_core(reps, k, rng)
        if x.shape[1] == 1:
            nearest = kernels.nearest_codeword(x[:, 0], reps[:, 0])
        else:
            nearest = np.argmin(cdist(x, reps, "sqeuclidean"), axis=1)
        labels = rep_labels[nearest]
    else:
        labels = _graph_core(x, k, rng)
    return _finish(x, labels, k)


# --------------------------------------------------------------------------
# random


def random_clustering(samples, k: int, seed: int = 0) -> ClusterResult:
    """Uniformly random balanced partition; every label is used when N >= k."""
    x = _as_samples(samples)
    n = x.shape[0]
    _check_k(n, k)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    return _finish(x, labels, k)


def cluster(samples, k: int, method: Method | str = Method.HIERARCHICAL, seed: int = 0) -> ClusterResult:
    method = Method(method)
    if method is Method.KMEANS:
        return kmeans(samples, k, seed=seed)
    if method is Method.BISECTING:
        return bisecting_kmeans(samples, k, seed=seed)
    if method is Method.GRAPH:
        return graph_spectral(samples, k, seed=seed)
    if method is Method.HIERARCHICAL:
        return hierarchical(samples, k)
    return random_clustering(samples, k, seed=seed)
