"""Neuron reordering and codebook/scale initialization for one weight matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .clustering import Method, cluster
from .planner import CompressionPlan, Mode

SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class ReorderResult:
    sigma: np.ndarray  # sigma[old_row] = new_row
    group_of_row: np.ndarray  # cluster block of each row, in new order

    @property
    def order(self) -> np.ndarray:
        """order[new_row] = old_row."""
        return np.argsort(self.sigma)


@dataclass
class CodebookSet:
    """Codewords plus the row layout that says which rows use which entries.

    ``boundaries`` splits rows into contiguous groups: one group per codebook
    in multi-codebook mode, one group per scale in multi-scale mode (where a
    single codebook is shared).
    """

    mode: Mode
    codebooks: np.ndarray  # (k, codebook_size)
    boundaries: np.ndarray  # (num_groups + 1,)
    scales: np.ndarray | None = None  # (num_groups,) in multi-scale mode

    @property
    def n_o(self) -> int:
        return int(self.boundaries[-1])

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def num_groups(self) -> int:
        return self.boundaries.size - 1

    def row_group(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_groups), np.diff(self.boundaries))

    def row_codebook(self) -> np.ndarray:
        if self.mode is Mode.MULTI_SCALE:
            return np.zeros(self.n_o, dtype=np.int64)
        return self.row_group()

    def row_scale(self) -> np.ndarray:
        if self.scales is None:
            return np.ones(self.n_o)
        return self.scales[self.row_group()]

    def copy(self) -> "CodebookSet":
        return CodebookSet(self.mode, self.codebooks.copy(), self.boundaries.copy(),
                           None if self.scales is None else self.scales.copy())


@dataclass(frozen=True)
class HardMapping:
    indices: np.ndarray  # (n_o, n_i) integer codeword ids


def group_boundaries(n_o: int, groups: int) -> np.ndarray:
    """Row offsets of ``groups`` near-equal contiguous groups.

    Row i belongs to group floor(i * groups / n_o), so group g starts at
    ceil(g * n_o / groups).
    """
    g = np.arange(groups + 1, dtype=np.int64)
    return (g * n_o + groups - 1) // groups


def reorder(weights: np.ndarray, k: int, method: Method | str = Method.HIERARCHICAL,
            seed: int = 0) -> ReorderResult:
    """Cluster rows and lay the clusters out contiguously.

    Blocks are sorted by the mean of their centroid (ties: lowest original
    row first); rows keep their original relative order inside a block.
    """
    w = np.asarray(weights, dtype=np.float64)
    n_o = w.shape[0]
    if k == 1:
        return ReorderResult(np.arange(n_o), np.zeros(n_o, dtype=np.int64))
    res = cluster(w, k, method, seed)
    first_row = np.full(res.k, n_o)
    np.minimum.at(first_row, res.labels, np.arange(n_o))
    block_order = np.lexsort((first_row, res.centroids.mean(axis=1)))
    rank = np.empty(res.k, dtype=np.int64)
    rank[block_order] = np.arange(res.k)
    row_rank = rank[res.labels]
    order = np.lexsort((np.arange(n_o), row_rank))
    sigma = np.empty(n_o, dtype=np.int64)
    sigma[order] = np.arange(n_o)
    return ReorderResult(sigma, row_rank[order])


def _f16_fillers(top: float, count: int) -> list[float]:
    out = []
    v = np.float16(top) if np.isfinite(np.float16(top)) else np.float16(0)
    while len(out) < count:
        v = np.nextafter(v, np.float16(np.inf))
        if v > top:
            out.append(float(v))
    return out


def _fit_codebook(values: np.ndarray, size: int, method, seed: int) -> np.ndarray:
    """Sorted, distinct codebook of exactly ``size`` entries for ``values``."""
    distinct = np.unique(values)
    if distinct.size <= size:
        cents = distinct
    else:
        cents = np.unique(cluster(values, size, method, seed).centroids[:, 0])
    if cents.size < size:
        # unused fillers just above the top codeword keep the codebook full and distinct
        cents = np.concatenate([cents, _f16_fillers(float(cents[-1]), size - cents.size)])
    return cents


def init_multi_codebook(weights_reordered: np.ndarray, plan: CompressionPlan,
                        method: Method | str = Method.HIERARCHICAL,
                        seed: int = 0) -> tuple[CodebookSet, HardMapping]:
    if plan.mode is not Mode.MULTI_CODEBOOK:
        raise ValueError("plan is not in multi-codebook mode")
    w = np.asarray(weights_reordered, dtype=np.float64)
    bounds = group_boundaries(w.shape[0], plan.num_codebooks)
    books = np.empty((plan.num_codebooks, plan.codebook_size))
    idx = np.empty(w.shape, dtype=np.int64)
    for g in range(plan.num_codebooks):
        block = w[bounds[g] : bounds[g + 1]]
        books[g] = _fit_codebook(block.ravel(), plan.codebook_size, method, seed + g)
        idx[bounds[g] : bounds[g + 1]] = kernels.nearest_codeword(block, books[g]).reshape(block.shape)
    return CodebookSet(Mode.MULTI_CODEBOOK, books, bounds), HardMapping(idx)


def group_scales(weights: np.ndarray, bounds: np.ndarray, method: str = "std") -> np.ndarray:
    scales = np.empty(bounds.size - 1)
    for g in range(scales.size):
        block = weights[bounds[g] : bounds[g + 1]]
        s = float(np.std(block)) if method == "std" else float(np.max(np.abs(block)))
        if s < SCALE_FLOOR:
            # constant group: its magnitude normalizes it to +-1 (or 0 stays 0)
            s = max(float(np.max(np.abs(block))), SCALE_FLOOR)
        scales[g] = s
    return scales


def init_multi_scale(weights_reordered: np.ndarray, plan: CompressionPlan,
                     method: Method | str = Method.HIERARCHICAL, seed: int = 0,
                     scale_method: str = "std") -> tuple[CodebookSet, HardMapping]:
    if plan.mode is not Mode.MULTI_SCALE:
        raise ValueError("plan is not in multi-scale mode")
    w = np.asarray(weights_reordered, dtype=np.float64)
    bounds = group_boundaries(w.shape[0], plan.num_scales)
    scales = group_scales(w, bounds, scale_method)
    row_scale = np.repeat(scales, np.diff(bounds))
    normalized = w / row_scale[:, None]
    book = _fit_codebook(normalized.ravel(), plan.codebook_size, method, seed)
    idx = kernels.nearest_codeword(normalized, book).reshape(w.shape)
    return CodebookSet(Mode.MULTI_SCALE, book[None, :], bounds, scales), HardMapping(idx)


def initialize(weights_reordered: np.ndarray, plan: CompressionPlan,
               method: Method | str = Method.HIERARCHICAL, seed: int = 0,
               scale_method: str = "std") -> tuple[CodebookSet, HardMapping]:
    if plan.mode is Mode.MULTI_SCALE:
        return init_multi_scale(weights_reordered, plan, method, seed, scale_method)
    return init_multi_codebook(weights_reordered, plan, method, seed)


def reconstruct(cbs: CodebookSet, mapping: HardMapping) -> np.ndarray:
    idx = np.asarray(mapping.indices)
    values = np.take_along_axis(cbs.codebooks[cbs.row_codebook()], idx, axis=1)
    return values * cbs.row_scale()[:, None]
