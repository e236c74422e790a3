"""Timing harness, resumable corpus runner and controlled experiments."""

from __future__ import annotations

import csv
import logging
import os
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .kernels import (
    ALL_KERNELS,
    Dimension,
    KChoice,
    KernelId,
    MChoice,
    NChoice,
    WorkerConfig,
    spmm,
    spmm_reference,
    worst_mismatch,
)
from .selector import TrainingSample
from .sparse import (
    CsrMatrix,
    DenseMatrix,
    FeatureVector,
    Layout,
    RmatParams,
    convert_layout,
    extract_features,
    generate_rmat,
)

log = logging.getLogger(__name__)

STORE_HEADER = ["matrix_id", "N", "kernel", "reps", "warmup", "median_s", "min_s",
                "checksum", "nnz", "mat_size", "std_row"]
DATASET_HEADER = (["matrix_id", "N", "nnz", "mat_size", "std_row", "hardware_id"]
                  + [str(k) for k in ALL_KERNELS] + ["label"])


class VerificationError(AssertionError):
    pass


class ClockError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchRecord:
    matrix_id: str
    features: FeatureVector
    kernel: KernelId
    n_cols: int
    reps: int
    warmup: int
    median_time: float
    min_time: float
    checksum: float

    def __post_init__(self):
        if self.reps < 3:
            raise ValueError("reps must be >= 3")
        if not 0 < self.min_time <= self.median_time:
            raise ValueError(f"need 0 < min_time <= median_time, got "
                             f"{self.min_time}, {self.median_time}")

    def store_row(self) -> list:
        f = self.features
        return [self.matrix_id, self.n_cols, str(self.kernel), self.reps, self.warmup,
                repr(self.median_time), repr(self.min_time), repr(self.checksum),
                f.nnz, f.mat_size, repr(f.std_row)]

    @classmethod
    def from_store_row(cls, row: dict, hardware_id: Optional[int] = None) -> "BenchRecord":
        n = int(row["N"])
        feats = FeatureVector(int(row["nnz"]), int(row["mat_size"]), float(row["std_row"]),
                              n, hardware_id)
        return cls(row["matrix_id"], feats, KernelId.parse(row["kernel"]), n, int(row["reps"]),
                   int(row["warmup"]), float(row["median_s"]), float(row["min_s"]),
                   float(row["checksum"]))


def dense_operand(matrix_id: str, k_rows: int, n: int, seed: int = 0, dtype=np.float64) -> DenseMatrix:
    """Reproducible X in [0, 1) for a (matrix, N) pair."""
    rng = np.random.default_rng([seed, n, zlib.crc32(matrix_id.encode())])
    return DenseMatrix.from_array(rng.random((k_rows, n)).astype(dtype), Layout.ROW_MAJOR)


def time_kernel(kernel: KernelId, a: CsrMatrix, x: DenseMatrix,
                cfg: Optional[WorkerConfig] = None, reps: int = 7, warmup: int = 2,
                verify: bool = True, matrix_id: str = "",
                hardware_id: Optional[int] = None,
                spmm_fn: Callable = spmm,
                reference: Optional[np.ndarray] = None) -> BenchRecord:
    """Median/min wall time of ``reps`` runs after ``warmup`` untimed runs.

    Layout conversion of X happens before timing starts. With ``verify`` the
    last output is checked against the sequential reference.
    """
    return time_interleaved([kernel], a, x, cfg, reps, warmup, verify, matrix_id,
                            hardware_id, spmm_fn, reference)[0]


def time_interleaved(kernels: Sequence[KernelId], a: CsrMatrix, x: DenseMatrix,
                     cfg: Optional[WorkerConfig] = None, reps: int = 7, warmup: int = 2,
                     verify: bool = True, matrix_id: str = "",
                     hardware_id: Optional[int] = None,
                     spmm_fn: Callable = spmm,
                     reference: Optional[np.ndarray] = None) -> list[BenchRecord]:
    """Like :func:`time_kernel` for several kernels, alternating between them
    on every repetition so slow machine drift hits all of them alike.

    Runs are still strictly one at a time.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    cfg = cfg or WorkerConfig()
    xs = [convert_layout(x, k.layout) for k in kernels]
    for _ in range(warmup):
        for k, xk in zip(kernels, xs):
            spmm_fn(k, a, xk, cfg)
    times = [[] for _ in kernels]
    last = [None] * len(kernels)
    for _ in range(reps):
        for i, (k, xk) in enumerate(zip(kernels, xs)):
            t0 = time.perf_counter_ns()
            last[i] = spmm_fn(k, a, xk, cfg)
            t1 = time.perf_counter_ns()
            if t1 < t0:
                raise ClockError("monotonic clock went backwards")
            times[i].append(max(t1 - t0, 1) * 1e-9)
    feats = extract_features(a, x.num_cols, hardware_id)
    ref = reference
    out = []
    for k, y, ts in zip(kernels, last, times):
        arr = y.to_array()
        if verify:
            if ref is None:
                ref = spmm_reference(a, x).to_array()
            bad = worst_mismatch(arr, ref)
            if bad is not None:
                raise VerificationError(
                    f"{k} on {matrix_id or a!r}: Y[{bad.row},{bad.col}] = {bad.got!r}, "
                    f"expected {bad.expected!r} (rel. error {bad.rel_error:.3g})")
        out.append(BenchRecord(matrix_id, feats, k, x.num_cols, reps, warmup,
                               float(np.median(ts)), float(min(ts)), float(arr.sum())))
    return out


# ---------------------------------------------------------------- record store

def read_store(path) -> list[dict]:
    if path is None or not os.path.exists(path) or os.path.getsize(path) == 0:
        return []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != STORE_HEADER:
            raise ValueError(f"{path}: unexpected store header {reader.fieldnames}")
        return list(reader)


def _append_store(path, record: BenchRecord) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(STORE_HEADER)
        w.writerow(record.store_row())


@dataclass
class CorpusResult:
    samples: list[TrainingSample]
    records: list[BenchRecord]
    new_measurements: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)


def run_corpus(matrices: Iterable[tuple[str, CsrMatrix]], n_values: Sequence[int],
               cfg: Optional[WorkerConfig] = None, reps: int = 7, warmup: int = 2,
               store=None, verify: bool = True, seed: int = 0,
               hardware_id: Optional[int] = None,
               kernels: Sequence[KernelId] = ALL_KERNELS,
               spmm_fn: Callable = spmm) -> CorpusResult:
    """Time every kernel on every (matrix, N) pair and label each pair.

    Measurements already in ``store`` (a CSV path) are reused, new ones are
    appended after each (matrix, N) pair, so an interrupted run resumes where
    it stopped. The kernels of one pair are timed interleaved. A matrix whose kernels fail is logged and skipped.
    """
    n_values = list(n_values)
    if not n_values:
        raise ValueError("no N values")
    cfg = cfg or WorkerConfig()
    existing: dict[tuple[str, int, str], BenchRecord] = {}
    for row in read_store(store):
        rec = BenchRecord.from_store_row(row, hardware_id)
        existing[(rec.matrix_id, rec.n_cols, str(rec.kernel))] = rec

    result = CorpusResult([], [])
    seen_any = False
    for matrix_id, a in matrices:
        seen_any = True
        try:
            pair_records = []
            for n in n_values:
                missing = [k for k in kernels if (matrix_id, n, str(k)) not in existing]
                if missing:
                    x = dense_operand(matrix_id, a.num_cols, n, seed, a.dtype)
                    ref = spmm_reference(a, x).to_array() if verify else None
                    for rec in time_interleaved(missing, a, x, cfg, reps, warmup, verify,
                                                matrix_id, hardware_id, spmm_fn, ref):
                        if store is not None:
                            _append_store(store, rec)
                        existing[(matrix_id, n, str(rec.kernel))] = rec
                        result.new_measurements += 1
                per_kernel = {k.index: existing[(matrix_id, n, str(k))] for k in kernels}
                pair_records.append((n, per_kernel))
        except Exception as exc:  # noqa: BLE001 - per-matrix failures are recorded, not fatal
            log.warning("matrix %s failed: %s", matrix_id, exc)
            result.failures.append((matrix_id, f"{type(exc).__name__}: {exc}"))
            continue
        for n, per_kernel in pair_records:
            result.records.extend(per_kernel[i] for i in sorted(per_kernel))
            if len(per_kernel) == len(ALL_KERNELS):
                feats = extract_features(a, n, hardware_id)
                timings = np.array([per_kernel[i].median_time for i in range(len(ALL_KERNELS))])
                result.samples.append(TrainingSample(feats, timings, matrix_id))
    if not seen_any:
        raise ValueError("empty corpus")
    return result


# ---------------------------------------------------------------- dataset CSV

def write_dataset(samples: Sequence[TrainingSample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for s in samples:
            f = s.features
            hw = "" if f.hardware_id is None else f.hardware_id
            w.writerow([s.matrix_id, f.n_cols, f.nnz, f.mat_size, repr(f.std_row), hw]
                       + [repr(float(t)) for t in s.timings] + [s.label])


def read_dataset(path, hardware_id: Optional[int] = None) -> list[TrainingSample]:
    """Load a dataset CSV; ``hardware_id`` fills rows whose tag is blank."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DATASET_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: dataset is missing columns {sorted(missing)}")
        for row in reader:
            hw = int(row["hardware_id"]) if row["hardware_id"] != "" else hardware_id
            n = int(row["N"])
            feats = FeatureVector(int(row["nnz"]), int(row["mat_size"]),
                                  float(row["std_row"]), n, hw)
            timings = np.array([float(row[str(k)]) for k in ALL_KERNELS])
            out.append(TrainingSample(feats, timings, row["matrix_id"]))
    return out


# ---------------------------------------------------------------- controlled

VERDICTS = ("rising", "falling", "flat", "mixed")


@dataclass(frozen=True)
class ControlledSpec:
    """One controlled experiment along a design axis.

    RB_EB: matrices of equal size and nnz that differ in skew, one N.
    RM_CM: a single matrix with three or more N values.
    SR_PR: matrices of equal size and skew with growing nnz, one N.
    """

    dimension: Dimension
    series: tuple[RmatParams, ...]
    n_values: tuple[int, ...] = (32,)
    config: WorkerConfig = field(default_factory=WorkerConfig)

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        object.__setattr__(self, "n_values", tuple(self.n_values))
        if self.dimension is Dimension.RM_CM:
            if len(self.series) != 1:
                raise ValueError("RM_CM uses exactly one matrix")
            if len(self.n_values) < 3:
                raise ValueError("a controlled series needs at least 3 points")
            return
        if len(self.series) < 3:
            raise ValueError("a controlled series needs at least 3 points")
        if len(self.n_values) != 1:
            raise ValueError(f"{self.dimension.name} uses a single N")
        first = self.series[0]
        if self.dimension is Dimension.RB_EB:
            if any(p.scale != first.scale or p.target_nnz != first.target_nnz for p in self.series):
                raise ValueError("RB_EB series must share scale and nnz")
        else:
            if any(p.scale != first.scale or (p.a, p.b, p.c, p.d) != (first.a, first.b, first.c, first.d)
                   for p in self.series):
                raise ValueError("SR_PR series must share scale and skew")

    @property
    def num_points(self) -> int:
        return len(self.n_values) if self.dimension is Dimension.RM_CM else len(self.series)


# kernel held fixed on the other two axes
_BASE = KernelId(MChoice.RB, NChoice.RM, KChoice.SR)
_PARAM_NAME = {Dimension.RB_EB: "std_row", Dimension.RM_CM: "N", Dimension.SR_PR: "nnz"}


@dataclass
class TrendTable:
    """``ratio`` = time of the first-named choice over the second for RB_EB
    (RB/EB), and second over first for RM_CM (CM/RM) and SR_PR (PR/SR); in
    every case the published trend is a rising ratio."""

    dimension: Dimension
    param_name: str
    params: list[float]
    time_a: list[float]
    time_b: list[float]
    ratios: list[float]
    kernel_a: KernelId
    kernel_b: KernelId
    tau: float = 0.10

    @property
    def steps(self) -> list[str]:
        out = []
        for r0, r1 in zip(self.ratios[:-1], self.ratios[1:]):
            if r1 > r0 * (1 + self.tau):
                out.append("up")
            elif r1 < r0 * (1 - self.tau):
                out.append("down")
            else:
                out.append("flat")
        return out

    @property
    def verdict(self) -> str:
        steps = set(self.steps)
        if steps <= {"flat"}:
            return "flat"
        if "down" not in steps:
            return "rising"
        if "up" not in steps:
            return "falling"
        return "mixed"

    def nondecreasing(self) -> bool:
        """Every step is at worst a ``tau`` relative drop."""
        return "down" not in self.steps

    def to_csv(self, dest=None) -> str:
        lines = [f"{self.param_name},time_{self.kernel_a},time_{self.kernel_b},ratio,verdict"]
        for p, ta, tb, r in zip(self.params, self.time_a, self.time_b, self.ratios):
            lines.append(f"{p!r},{ta!r},{tb!r},{r!r},{self.verdict}")
        text = "\n".join(lines) + "\n"
        if dest is not None:
            with open(dest, "w") as fh:
                fh.write(text)
        return text


def run_controlled(spec: ControlledSpec, cfg: Optional[WorkerConfig] = None,
                   reps: int = 7, warmup: int = 2, verify: bool = True,
                   trend_check: bool = False, seed: int = 0) -> TrendTable:
    """Measure the two competing kernels at each series point.

    The trend verdict is only reported; ``trend_check=True`` additionally
    raises AssertionError when an RB_EB series is not nondecreasing within
    the 10% per-step slack.
    """
    cfg = cfg or spec.config
    dim = spec.dimension
    k_first, k_second = dim.pair(_BASE)
    if dim is Dimension.RB_EB:
        slow, fast = k_first, k_second
    else:
        slow, fast = k_second, k_first

    if dim is Dimension.RM_CM:
        points = [(spec.series[0], n) for n in spec.n_values]
    else:
        points = [(p, spec.n_values[0]) for p in spec.series]

    params, ta, tb, ratios = [], [], [], []
    cache: dict[RmatParams, CsrMatrix] = {}
    for p, n in points:
        a = cache.get(p)
        if a is None:
            a = cache[p] = generate_rmat(p)
        mid = f"rmat-{p.scale}-{p.target_nnz}-{p.a}-{p.b}-{p.c}-{p.d}-{p.seed}"
        x = dense_operand(mid, a.num_cols, n, seed, a.dtype)
        ref = spmm_reference(a, x).to_array() if verify else None
        r_slow, r_fast = time_interleaved([slow, fast], a, x, cfg, reps, warmup, verify, mid,
                                          reference=ref)
        feats = r_slow.features
        params.append({Dimension.RB_EB: feats.std_row, Dimension.RM_CM: float(n),
                       Dimension.SR_PR: float(feats.nnz)}[dim])
        ta.append(r_slow.median_time)
        tb.append(r_fast.median_time)
        ratios.append(r_slow.median_time / r_fast.median_time)
    table = TrendTable(dim, _PARAM_NAME[dim], params, ta, tb, ratios, slow, fast)
    if trend_check and dim is Dimension.RB_EB and not table.nondecreasing():
        raise AssertionError(f"RB/EB ratio not nondecreasing within 10%: {ratios}")
    return table
