"""The 2x2x2 SpMM design space over CPU workers.

Each kernel is a point (M-loop, N-loop, K-loop):

* M-loop  RB: contiguous row blocks per worker.
          EB: equal element chunks per worker; rows cut by a chunk boundary
              are merged into the output under a lock.
* N-loop  RM: X row-major; C consecutive output columns per cached row
              segment are loaded together.
          CM: X column-major; columns are loaded one at a time, the cached
              segment is still reused across the column block.
* K-loop  SR: each output accumulates its products left to right.
          PR: products are laid over W lanes and summed by a merge tree;
              longer rows loop over W-wide tiles with a carried accumulator.
              Under EB a lane group may span rows and is reduced by the
              gated prefix-sum network instead.

Worker bodies are numba functions compiled with ``nogil`` and run on a shared
thread pool, one task per worker.
"""

from __future__ import annotations

import enum
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .primitives import (
    _nb_row_of,
    _nb_segmented_network,
    _nb_tree_reduce_lanes,
    _is_pow2,
    partition_elements,
)
from .sparse import CsrMatrix, DenseMatrix, Layout

__all__ = [
    "MChoice",
    "NChoice",
    "KChoice",
    "KernelId",
    "ALL_KERNELS",
    "WorkerConfig",
    "KernelError",
    "Dimension",
    "TOLERANCES",
    "Mismatch",
    "worst_mismatch",
    "spmm",
    "spmm_reference",
]


class KernelError(ValueError):
    pass


class MChoice(enum.IntEnum):
    RB = 0
    EB = 1


class NChoice(enum.IntEnum):
    RM = 0
    CM = 1


class KChoice(enum.IntEnum):
    SR = 0
    PR = 1


@dataclass(frozen=True, order=True)
class KernelId:
    m_choice: MChoice
    n_choice: NChoice
    k_choice: KChoice

    @property
    def index(self) -> int:
        """Canonical label 0..7, lexicographic with RB<EB, RM<CM, SR<PR."""
        return 4 * int(self.m_choice) + 2 * int(self.n_choice) + int(self.k_choice)

    @classmethod
    def from_index(cls, i: int) -> "KernelId":
        if not 0 <= i < 8:
            raise ValueError(f"kernel index must be in [0, 8), got {i}")
        return cls(MChoice(i >> 2), NChoice((i >> 1) & 1), KChoice(i & 1))

    @classmethod
    def parse(cls, label: str) -> "KernelId":
        """Parse ``"EB+RM+PR"`` (case-insensitive; ``+``, ``-``, ``_`` or ``,``)."""
        parts = label.upper().replace("-", "+").replace("_", "+").replace(",", "+").split("+")
        try:
            m, n, k = parts
            return cls(MChoice[m], NChoice[n], KChoice[k])
        except (ValueError, KeyError):
            raise ValueError(f"bad kernel label {label!r}") from None

    @property
    def layout(self) -> Layout:
        return Layout.ROW_MAJOR if self.n_choice is NChoice.RM else Layout.COL_MAJOR

    def replace(self, **kw) -> "KernelId":
        fields = dict(m_choice=self.m_choice, n_choice=self.n_choice, k_choice=self.k_choice)
        fields.update(kw)
        return KernelId(**fields)

    def __str__(self):
        return f"{self.m_choice.name}+{self.n_choice.name}+{self.k_choice.name}"


ALL_KERNELS: tuple[KernelId, ...] = tuple(KernelId.from_index(i) for i in range(8))


class Dimension(enum.Enum):
    """One axis of the design space, named by its two competing choices."""

    RB_EB = "rb-eb"
    RM_CM = "rm-cm"
    SR_PR = "sr-pr"

    def choice_of(self, kernel: KernelId) -> int:
        """0 for the first-named choice (RB, RM, SR), 1 for the second."""
        if self is Dimension.RB_EB:
            return int(kernel.m_choice)
        if self is Dimension.RM_CM:
            return int(kernel.n_choice)
        return int(kernel.k_choice)

    def pair(self, base: KernelId) -> tuple[KernelId, KernelId]:
        """The two kernels that differ from ``base`` only along this axis."""
        field, enum_cls = {
            Dimension.RB_EB: ("m_choice", MChoice),
            Dimension.RM_CM: ("n_choice", NChoice),
            Dimension.SR_PR: ("k_choice", KChoice),
        }[self]
        return base.replace(**{field: enum_cls(0)}), base.replace(**{field: enum_cls(1)})


# (rtol, atol) per scalar width for kernel-vs-reference agreement
TOLERANCES = {
    np.dtype(np.float64): (1e-10, 1e-12),
    np.dtype(np.float32): (1e-3, 1e-6),
}


@dataclass(frozen=True)
class Mismatch:
    row: int
    col: int
    got: float
    expected: float
    rel_error: float


def worst_mismatch(y: np.ndarray, ref: np.ndarray, dtype=None) -> Optional[Mismatch]:
    """Worst element outside ``atol + rtol * |ref|``, or None if all agree."""
    y = np.asarray(y)
    ref = np.asarray(ref)
    if y.shape != ref.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {ref.shape}")
    rtol, atol = TOLERANCES[np.dtype(dtype or ref.dtype)]
    err = np.abs(y.astype(np.float64) - ref.astype(np.float64))
    bound = atol + rtol * np.abs(ref.astype(np.float64))
    excess = np.where(np.isnan(err), np.inf, err - bound)
    if excess.size == 0 or excess.max() <= 0:
        return None
    r, c = np.unravel_index(int(np.argmax(excess)), excess.shape)
    rel = err[r, c] / abs(ref[r, c]) if ref[r, c] else np.inf
    return Mismatch(int(r), int(c), float(y[r, c]), float(ref[r, c]), float(rel))


@dataclass(frozen=True)
class WorkerConfig:
    """P workers, W lanes per reduction group, C columns per cached segment.

    ``col_block=None`` picks min(N, 4) for PR kernels and min(N, 8) for SR.
    """

    num_workers: int = 4
    group_width: int = 8
    col_block: Optional[int] = None

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError(f"num_workers must be >= 1, got {self.num_workers}")
        if self.group_width < 2 or not _is_pow2(self.group_width):
            raise ValueError(f"group_width must be a power of two >= 2, got {self.group_width}")
        if self.col_block is not None and self.col_block < 1:
            raise ValueError(f"col_block must be >= 1, got {self.col_block}")

    def col_block_for(self, kernel: KernelId, n: int) -> int:
        if self.col_block is not None:
            return max(1, min(self.col_block, n))
        cap = 4 if kernel.k_choice is KChoice.PR else 8
        return max(1, min(n, cap))


# ---------------------------------------------------------------- reference

@numba.njit(cache=True, nogil=True)
def _nb_reference(offs, cols, vals, x2, y):
    m_rows, n_cols = y.shape
    for m in range(m_rows):
        for n in range(n_cols):
            s = y[m, n]  # pre-zeroed; gives the accumulator the output dtype
            for j in range(offs[m], offs[m + 1]):
                s += vals[j] * x2[cols[j], n]
            y[m, n] = s


def spmm_reference(a: CsrMatrix, x: DenseMatrix) -> DenseMatrix:
    """Sequential three-loop SpMM (M, then N, then K in row order).

    Every kernel variant is checked against this.
    """
    if a.num_cols != x.num_rows:
        raise KernelError(f"dimension mismatch: A is {a.shape}, X is {x.shape}")
    x2 = np.asarray(x.to_array(), dtype=a.dtype)
    y = np.zeros((a.num_rows, x.num_cols), dtype=a.dtype)
    _nb_reference(a.row_offsets, a.col_indices, a.values, x2, y)
    return DenseMatrix.from_array(y, Layout.ROW_MAJOR)


# ---------------------------------------------------------------- RB bodies

@numba.njit(cache=True, nogil=True)
def _max_row_len(offs, lo, hi):
    best = 0
    for m in range(lo, hi):
        if offs[m + 1] - offs[m] > best:
            best = offs[m + 1] - offs[m]
    return best


@numba.njit(cache=True, nogil=True)
def _rb_rm_sr(lo, hi, offs, cols, vals, x, n_rows_x, n, cb_max, y):
    maxlen = _max_row_len(offs, lo, hi)
    seg_c = np.empty(maxlen, np.int64)
    seg_v = np.empty(maxlen, vals.dtype)
    acc = np.empty(cb_max, y.dtype)
    for m in range(lo, hi):
        s = offs[m]
        length = offs[m + 1] - s
        for j in range(length):
            seg_c[j] = cols[s + j]
            seg_v[j] = vals[s + j]
        for n0 in range(0, n, cb_max):
            cb = min(cb_max, n - n0)
            for c in range(cb):
                acc[c] = 0
            for j in range(length):
                a = seg_v[j]
                base = seg_c[j] * n + n0
                for c in range(cb):
                    acc[c] += a * x[base + c]
            out = m * n + n0
            for c in range(cb):
                y[out + c] = acc[c]


@numba.njit(cache=True, nogil=True)
def _rb_cm_sr(lo, hi, offs, cols, vals, x, n_rows_x, n, cb_max, y):
    maxlen = _max_row_len(offs, lo, hi)
    seg_c = np.empty(maxlen, np.int64)
    seg_v = np.empty(maxlen, vals.dtype)
    acc = np.empty(cb_max, y.dtype)
    for m in range(lo, hi):
        s = offs[m]
        length = offs[m + 1] - s
        for j in range(length):
            seg_c[j] = cols[s + j]
            seg_v[j] = vals[s + j]
        for n0 in range(0, n, cb_max):
            cb = min(cb_max, n - n0)
            for c in range(cb):
                col_base = (n0 + c) * n_rows_x
                acc[c] = 0
                for j in range(length):
                    acc[c] += seg_v[j] * x[col_base + seg_c[j]]
            out = m * n + n0
            for c in range(cb):
                y[out + c] = acc[c]


@numba.njit(cache=True, nogil=True)
def _rb_rm_pr(lo, hi, offs, cols, vals, x, n_rows_x, n, cb_max, w, y):
    maxlen = _max_row_len(offs, lo, hi)
    seg_c = np.empty(maxlen, np.int64)
    seg_v = np.empty(maxlen, vals.dtype)
    lanes = np.empty((w, cb_max), y.dtype)
    acc = np.empty(cb_max, y.dtype)
    for m in range(lo, hi):
        s = offs[m]
        length = offs[m + 1] - s
        for j in range(length):
            seg_c[j] = cols[s + j]
            seg_v[j] = vals[s + j]
        for n0 in range(0, n, cb_max):
            cb = min(cb_max, n - n0)
            for c in range(cb):
                acc[c] = 0
            for t0 in range(0, length, w):
                tl = min(w, length - t0)
                for lane in range(tl):
                    a = seg_v[t0 + lane]
                    base = seg_c[t0 + lane] * n + n0
                    for c in range(cb):
                        lanes[lane, c] = a * x[base + c]
                for lane in range(tl, w):
                    for c in range(cb):
                        lanes[lane, c] = 0
                _nb_tree_reduce_lanes(lanes, w, cb)
                for c in range(cb):
                    acc[c] += lanes[0, c]
            out = m * n + n0
            for c in range(cb):
                y[out + c] = acc[c]


@numba.njit(cache=True, nogil=True)
def _rb_cm_pr(lo, hi, offs, cols, vals, x, n_rows_x, n, cb_max, w, y):
    maxlen = _max_row_len(offs, lo, hi)
    seg_c = np.empty(maxlen, np.int64)
    seg_v = np.empty(maxlen, vals.dtype)
    lanes = np.empty((w, cb_max), y.dtype)
    acc = np.empty(cb_max, y.dtype)
    for m in range(lo, hi):
        s = offs[m]
        length = offs[m + 1] - s
        for j in range(length):
            seg_c[j] = cols[s + j]
            seg_v[j] = vals[s + j]
        for n0 in range(0, n, cb_max):
            cb = min(cb_max, n - n0)
            for c in range(cb):
                acc[c] = 0
            for t0 in range(0, length, w):
                tl = min(w, length - t0)
                for c in range(cb):
                    col_base = (n0 + c) * n_rows_x
                    for lane in range(tl):
                        lanes[lane, c] = seg_v[t0 + lane] * x[col_base + seg_c[t0 + lane]]
                    for lane in range(tl, w):
                        lanes[lane, c] = 0
                _nb_tree_reduce_lanes(lanes, w, cb)
                for c in range(cb):
                    acc[c] += lanes[0, c]
            out = m * n + n0
            for c in range(cb):
                y[out + c] = acc[c]


# ---------------------------------------------------------------- EB bodies
#
# A chunk [lo, hi) owns a row outright when the whole row lies inside it;
# those rows are written straight to y. The (at most two) rows cut by the
# chunk edges go to the ``head``/``tail`` buffers and are merged by the
# caller under the output lock. Segment buffers are allocated locally in
# each body: arrays handed back from a helper lose their no-alias status and
# the accumulators then stop living in registers (about 1.3-1.8x slower).

@numba.njit(cache=True, nogil=True, inline="always")
def _eb_target(m, lo, hi, offs, n, y, head, tail):
    if offs[m] < lo:
        return head, 0
    if offs[m + 1] > hi:
        return tail, 0
    return y, m * n


@numba.njit(cache=True, nogil=True)
def _eb_rm_sr(lo, hi, r0, offs, cols, vals, x, n_rows_x, n, cb_max, y, head, tail):
    length = hi - lo
    seg_c = np.empty(length, np.int64)
    seg_v = np.empty(length, vals.dtype)
    for j in range(length):
        seg_c[j] = cols[lo + j]
        seg_v[j] = vals[lo + j]
    acc = np.empty(cb_max, y.dtype)
    r1 = _nb_row_of(offs, hi - 1)
    for m in range(r0, r1 + 1):
        s = max(offs[m], lo) - lo
        e = min(offs[m + 1], hi) - lo
        if e <= s:
            continue
        dst, off = _eb_target(m, lo, hi, offs, n, y, head, tail)
        for n0 in range(0, n, cb_max):
            cb = min(cb_max, n - n0)
            for c in range(cb):
                acc[c] = 0
            for j in range(s, e):
                a = seg_v[j]
                base = seg_c[j] * n + n0
                for c in range(cb):
                    acc[c] += a * x[base + c]
            for c in range(cb):
                dst[off + n0 + c] = acc[c]


@numba.njit(cache=True, nogil=True)
def _eb_cm_sr(lo, hi, r0, offs, cols, vals, x, n_rows_x, n, cb_max, y, head, tail):
    length = hi - lo
    seg_c = np.empty(length, np.int64)
    seg_v = np.empty(length, vals.dtype)
    for j in range(length):
        seg_c[j] = cols[lo + j]
        seg_v[j] = vals[lo + j]
    acc = np.empty(cb_max, y.dtype)
    r1 = _nb_row_of(offs, hi - 1)
    for m in range(r0, r1 + 1):
        s = max(offs[m], lo) - lo
        e = min(offs[m + 1], hi) - lo
        if e <= s:
            continue
        dst, off = _eb_target(m, lo, hi, offs, n, y, head, tail)
        for n0 in range(0, n, cb_max):
            cb = min(cb_max, n - n0)
            for c in range(cb):
                col_base = (n0 + c) * n_rows_x
                acc[c] = 0
                for j in range(s, e):
                    acc[c] += seg_v[j] * x[col_base + seg_c[j]]
            for c in range(cb):
                dst[off + n0 + c] = acc[c]


@numba.njit(cache=True, nogil=True)
def _eb_pr_body(lo, hi, r0, offs, cols, vals, x, n_rows_x, n, cb_max, w, col_major,
                y, head, tail):
    length = hi - lo
    seg_c = np.empty(length, np.int64)
    seg_v = np.empty(length, vals.dtype)
    seg_r = np.empty(length, np.int64)
    m = r0
    for j in range(length):
        # row index of each element: walk forward from the searched start row
        while offs[m + 1] <= lo + j:
            m += 1
        seg_c[j] = cols[lo + j]
        seg_v[j] = vals[lo + j]
        seg_r[j] = m
    lanes = np.empty((w, cb_max), y.dtype)
    ids = np.empty(w, np.int64)
    acc = np.empty(cb_max, y.dtype)
    for n0 in range(0, n, cb_max):
        cb = min(cb_max, n - n0)
        cur = -1
        for g0 in range(0, length, w):
            gl = min(w, length - g0)
            for lane in range(gl):
                ids[lane] = seg_r[g0 + lane]
            for lane in range(gl, w):
                ids[lane] = ids[gl - 1]
            if col_major:
                for c in range(cb):
                    col_base = (n0 + c) * n_rows_x
                    for lane in range(gl):
                        lanes[lane, c] = seg_v[g0 + lane] * x[col_base + seg_c[g0 + lane]]
                    for lane in range(gl, w):
                        lanes[lane, c] = 0
            else:
                for lane in range(gl):
                    a = seg_v[g0 + lane]
                    base = seg_c[g0 + lane] * n + n0
                    for c in range(cb):
                        lanes[lane, c] = a * x[base + c]
                for lane in range(gl, w):
                    for c in range(cb):
                        lanes[lane, c] = 0
            _nb_segmented_network(lanes, ids, w, cb)
            # segment heads hold the totals; the last segment is the carry
            for lane in range(w):
                if lane > 0 and ids[lane] == ids[lane - 1]:
                    continue
                r = ids[lane]
                if r == cur:
                    for c in range(cb):
                        acc[c] += lanes[lane, c]
                else:
                    if cur >= 0:
                        dst, off = _eb_target(cur, lo, hi, offs, n, y, head, tail)
                        for c in range(cb):
                            dst[off + n0 + c] = acc[c]
                    cur = r
                    for c in range(cb):
                        acc[c] = lanes[lane, c]
        if cur >= 0:
            dst, off = _eb_target(cur, lo, hi, offs, n, y, head, tail)
            for c in range(cb):
                dst[off + n0 + c] = acc[c]


@numba.njit(cache=True, nogil=True)
def _eb_rm_pr(lo, hi, r0, offs, cols, vals, x, n_rows_x, n, cb_max, w, y, head, tail):
    _eb_pr_body(lo, hi, r0, offs, cols, vals, x, n_rows_x, n, cb_max, w, False, y, head, tail)


@numba.njit(cache=True, nogil=True)
def _eb_cm_pr(lo, hi, r0, offs, cols, vals, x, n_rows_x, n, cb_max, w, y, head, tail):
    _eb_pr_body(lo, hi, r0, offs, cols, vals, x, n_rows_x, n, cb_max, w, True, y, head, tail)


_RB_BODIES = {
    (NChoice.RM, KChoice.SR): _rb_rm_sr,
    (NChoice.CM, KChoice.SR): _rb_cm_sr,
    (NChoice.RM, KChoice.PR): _rb_rm_pr,
    (NChoice.CM, KChoice.PR): _rb_cm_pr,
}
_EB_BODIES = {
    (NChoice.RM, KChoice.SR): _eb_rm_sr,
    (NChoice.CM, KChoice.SR): _eb_cm_sr,
    (NChoice.RM, KChoice.PR): _eb_rm_pr,
    (NChoice.CM, KChoice.PR): _eb_cm_pr,
}


# ---------------------------------------------------------------- dispatch

_pool: Optional[ThreadPoolExecutor] = None
_pool_size = 0
_pool_lock = threading.Lock()


def _executor(p: int) -> ThreadPoolExecutor:
    global _pool, _pool_size
    with _pool_lock:
        if _pool is None or _pool_size < p:
            old = _pool
            _pool_size = max(p, 8)
            _pool = ThreadPoolExecutor(max_workers=_pool_size, thread_name_prefix="spmm-worker")
            if old is not None:
                old.shutdown(wait=False)
        return _pool


def _run_workers(tasks):
    if len(tasks) == 1:
        tasks[0]()
        return
    futures = [_executor(len(tasks)).submit(t) for t in tasks]
    for f in futures:
        f.result()


def spmm(kernel: KernelId, a: CsrMatrix, x: DenseMatrix,
         cfg: Optional[WorkerConfig] = None) -> DenseMatrix:
    """Y = A @ X with the given design-space variant. Y is always row-major.

    X must already be stored in the kernel's layout (RM kernels take
    row-major, CM kernels column-major).
    """
    cfg = cfg or WorkerConfig()
    if a.num_cols != x.num_rows:
        raise KernelError(f"dimension mismatch: A is {a.shape}, X is {x.shape}")
    if x.layout is not kernel.layout:
        raise KernelError(f"{kernel} needs a {kernel.layout.value} dense operand, "
                          f"got {x.layout.value}")
    m_rows, n = a.num_rows, x.num_cols
    dtype = a.dtype
    y = np.zeros(m_rows * n, dtype=dtype)
    if m_rows == 0 or n == 0 or a.nnz == 0:
        return DenseMatrix(m_rows, n, Layout.ROW_MAJOR, y)

    xd = np.asarray(x.data, dtype=dtype)
    offs, cols, vals = a.row_offsets, a.col_indices, a.values
    k_rows = x.num_rows
    cb = cfg.col_block_for(kernel, n)
    w = cfg.group_width
    p = cfg.num_workers
    pr = kernel.k_choice is KChoice.PR
    key = (kernel.n_choice, kernel.k_choice)

    if kernel.m_choice is MChoice.RB:
        body = _RB_BODIES[key]
        bounds = [i * m_rows // p for i in range(p + 1)]
        extra = (w,) if pr else ()
        tasks = [
            (lambda lo=lo, hi=hi: body(lo, hi, offs, cols, vals, xd, k_rows, n, cb, *extra, y))
            for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
        ]
        _run_workers(tasks)
    else:
        body = _EB_BODIES[key]
        part = partition_elements(a, p)
        extra = (w,) if pr else ()
        y2 = y.reshape(m_rows, n)
        merge_lock = threading.Lock()

        def worker(lo, hi, r0):
            head = np.zeros(n, dtype=dtype)
            tail = np.zeros(n, dtype=dtype)
            body(lo, hi, r0, offs, cols, vals, xd, k_rows, n, cb, *extra, y, head, tail)
            head_row = r0 if offs[r0] < lo else -1
            last = int(_nb_row_of(offs, hi - 1))
            tail_row = last if offs[last + 1] > hi and last != head_row else -1
            with merge_lock:
                if head_row >= 0:
                    y2[head_row] += head
                if tail_row >= 0:
                    y2[tail_row] += tail

        tasks = [
            (lambda lo=lo, hi=hi, r0=r0: worker(lo, hi, r0))
            for (lo, hi), r0 in zip(part.chunk_bounds.tolist(), part.row_of_chunk_start.tolist())
            if hi > lo
        ]
        _run_workers(tasks)
    return DenseMatrix(m_rows, n, Layout.ROW_MAJOR, y)
