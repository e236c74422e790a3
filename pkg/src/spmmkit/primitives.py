"""Parallel building blocks shared by the SpMM kernels.

The ``_nb_*`` functions are numba-compiled and called directly from the
kernel worker bodies; the public functions wrap them with argument checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .sparse import CsrMatrix

__all__ = [
    "ContractViolation",
    "ElementPartition",
    "SegmentSum",
    "tree_reduce",
    "conditional_reduce",
    "partition_elements",
    "row_index_of",
]


class ContractViolation(ValueError):
    pass


def _is_pow2(w: int) -> bool:
    return w >= 1 and (w & (w - 1)) == 0


# ---------------------------------------------------------------- numba cores

@numba.njit(cache=True, nogil=True)
def _nb_row_of(offs, idx):
    # largest m with offs[m] <= idx; equal offsets (empty rows) resolve to the last one
    lo = 0
    hi = offs.shape[0] - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if offs[mid] <= idx:
            lo = mid
        else:
            hi = mid
    return lo


@numba.njit(cache=True, nogil=True)
def _nb_tree_reduce_lanes(lanes, w, cb):
    """Pairwise merge tree over the first axis of ``lanes[:w, :cb]``.

    Level by level, lane i takes lanes 2i and 2i+1; the total ends in lane 0.
    """
    half = w >> 1
    while half >= 1:
        for i in range(half):
            for c in range(cb):
                lanes[i, c] = lanes[2 * i, c] + lanes[2 * i + 1, c]
        half >>= 1


@numba.njit(cache=True, nogil=True)
def _nb_segmented_network(lanes, ids, w, cb):
    """Gated prefix-sum network (suffix direction), in place.

    At step d lane i absorbs lane i+d only when both carry the same segment
    id. After log2(w) steps the first lane of every segment holds that
    segment's total. Ascending i keeps lane i+d at its pre-step value.
    """
    d = 1
    while d < w:
        for i in range(w - d):
            if ids[i + d] == ids[i]:
                for c in range(cb):
                    lanes[i, c] += lanes[i + d, c]
        d <<= 1


# ---------------------------------------------------------------- public API

def tree_reduce(values, width: int | None = None) -> float:
    """Sum ``values`` with a fixed-shape merge tree of log2(W) levels.

    ``[1, 2, 3, 4]`` reduces as ``[3, 7]`` then ``[10]``.
    """
    vals = np.asarray(values)
    w = vals.shape[0]
    if width is not None and w != width:
        raise ContractViolation(f"expected {width} values, got {w}")
    if vals.ndim != 1 or not _is_pow2(w) or w < 2:
        raise ContractViolation(f"group width must be a power of two >= 2, got {w}")
    dtype = vals.dtype if vals.dtype in (np.float32, np.float64) else np.float64
    lanes = vals.astype(dtype).reshape(w, 1).copy()
    _nb_tree_reduce_lanes(lanes, w, 1)
    return lanes[0, 0].item()


@dataclass(frozen=True)
class SegmentSum:
    row: int
    total: float
    carry: bool = False


def conditional_reduce(values, segment_ids, width: int | None = None) -> list[SegmentSum]:
    """Per-segment sums of one lane group, via the gated prefix-sum network.

    Returns one SegmentSum per distinct id in lane order. The last one is
    flagged ``carry``: its row may continue into the next group, so the caller
    must merge it rather than store it.

    >>> conditional_reduce([1, 2, 3, 4], [0, 0, 1, 1])
    [SegmentSum(row=0, total=3.0, carry=False), SegmentSum(row=1, total=7.0, carry=True)]
    """
    vals = np.asarray(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    w = vals.shape[0]
    if width is not None and w != width:
        raise ContractViolation(f"expected {width} values, got {w}")
    if not _is_pow2(w) or w < 2:
        raise ContractViolation(f"group width must be a power of two >= 2, got {w}")
    if ids.shape != (w,):
        raise ContractViolation(f"need {w} segment ids, got {ids.shape[0]}")
    if np.any(np.diff(ids) < 0):
        bad = int(np.flatnonzero(np.diff(ids) < 0)[0] + 1)
        raise ContractViolation(f"segment ids decrease at lane {bad}")
    dtype = vals.dtype if vals.dtype in (np.float32, np.float64) else np.float64
    lanes = vals.astype(dtype).reshape(w, 1).copy()
    _nb_segmented_network(lanes, ids, w, 1)
    heads = [0] + [i for i in range(1, w) if ids[i] != ids[i - 1]]
    return [SegmentSum(int(ids[h]), lanes[h, 0].item(), h == heads[-1]) for h in heads]


@dataclass(frozen=True)
class ElementPartition:
    """Static element-balanced split of [0, nnz) over P workers.

    ``chunk_bounds[p] = (start, stop)``. ``row_of_chunk_start[p]`` is the row
    owning element ``start``; for an empty trailing chunk (start == nnz) it is
    ``num_rows``.
    """

    chunk_bounds: np.ndarray
    row_of_chunk_start: np.ndarray

    @property
    def num_workers(self) -> int:
        return self.chunk_bounds.shape[0]

    def sizes(self) -> np.ndarray:
        return self.chunk_bounds[:, 1] - self.chunk_bounds[:, 0]


def partition_elements(a: CsrMatrix, p: int) -> ElementPartition:
    if p < 1:
        raise ValueError(f"need at least one worker, got {p}")
    nnz = a.nnz
    base, extra = divmod(nnz, p)
    sizes = np.full(p, base, dtype=np.int64)
    sizes[:extra] += 1
    stops = np.cumsum(sizes)
    starts = stops - sizes
    rows = np.empty(p, dtype=np.int64)
    for i, s in enumerate(starts.tolist()):
        rows[i] = _nb_row_of(a.row_offsets, s) if s < nnz else a.num_rows
    return ElementPartition(np.stack([starts, stops], axis=1), rows)


def row_index_of(a: CsrMatrix, element_index: int) -> int:
    if not 0 <= element_index < a.nnz:
        raise IndexError(f"element index {element_index} outside [0, {a.nnz})")
    return int(_nb_row_of(a.row_offsets, element_index))
