"""Sparse and dense operands, validation, MatrixMarket I/O, R-MAT synthesis
and selector feature extraction.

A CSR matrix is three flat arrays::

    row_offsets  (M + 1,)  start of each row in the element arrays
    col_indices  (nnz,)    column of each stored element
    values       (nnz,)    value of each stored element

Row ``m`` owns elements ``row_offsets[m]:row_offsets[m + 1]``.
"""

from __future__ import annotations

import enum
import io
import os
from dataclasses import dataclass
from typing import BinaryIO, Optional, Union

import numpy as np

__all__ = [
    "CsrMatrix",
    "DenseMatrix",
    "Layout",
    "Violation",
    "FeatureVector",
    "RmatParams",
    "MatrixMarketError",
    "GenerationError",
    "FeatureError",
    "validate",
    "load_matrix_market",
    "write_matrix_market",
    "generate_rmat",
    "extract_features",
    "convert_layout",
]


class MatrixMarketError(ValueError):
    """Malformed MatrixMarket input. ``line`` is 1-based, or None."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GenerationError(RuntimeError):
    pass


class FeatureError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    num_rows: int
    num_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", _frozen(np.asarray(self.row_offsets, dtype=np.int64)))
        object.__setattr__(self, "col_indices", _frozen(np.asarray(self.col_indices, dtype=np.int64)))
        vals = np.asarray(self.values)
        if vals.dtype not in (np.float32, np.float64):
            vals = vals.astype(np.float64)
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def nnz(self) -> int:
        return int(self.col_indices.shape[0])

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def astype(self, dtype) -> "CsrMatrix":
        return CsrMatrix(self.num_rows, self.num_cols, self.row_offsets,
                         self.col_indices, self.values.astype(dtype))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        rows = np.repeat(np.arange(self.num_rows), self.row_lengths())
        out[rows, self.col_indices] = self.values
        return out

    @classmethod
    def from_dense(cls, a) -> "CsrMatrix":
        a = np.asarray(a)
        if a.ndim != 2:
            raise ValueError("expected a 2-D array")
        rows, cols = np.nonzero(a)
        offsets = np.zeros(a.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=a.shape[0]), out=offsets[1:])
        return cls(a.shape[0], a.shape[1], offsets, cols, a[rows, cols])

    @classmethod
    def from_coo(cls, num_rows: int, num_cols: int, rows, cols, vals,
                 sum_duplicates: bool = True) -> "CsrMatrix":
        """Build a CSR matrix from coordinate triplets (0-based)."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if sum_duplicates and rows.size:
            key = rows * max(num_cols, 1) + cols
            first = np.ones(key.size, dtype=bool)
            first[1:] = key[1:] != key[:-1]
            starts = np.flatnonzero(first)
            vals = np.add.reduceat(vals, starts) if vals.size else vals
            rows, cols = rows[starts], cols[starts]
        offsets = np.zeros(num_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=num_rows), out=offsets[1:])
        return cls(num_rows, num_cols, offsets, cols, vals)

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n, dtype=dtype))

    def equals(self, other: "CsrMatrix") -> bool:
        return (self.shape == other.shape
                and np.array_equal(self.row_offsets, other.row_offsets)
                and np.array_equal(self.col_indices, other.col_indices)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return (f"CsrMatrix({self.num_rows}x{self.num_cols}, nnz={self.nnz}, "
                f"dtype={self.values.dtype})")


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class Violation:
    invariant: str
    index: int
    detail: str = ""

    def __str__(self):
        return f"{self.invariant} violated at index {self.index}: {self.detail}"


def validate(matrix: CsrMatrix) -> list[Violation]:
    """Check every CSR invariant. An empty list means the matrix is valid.

    Each violation names the invariant and the first offending index.
    """
    out = []
    offs = matrix.row_offsets
    cols = matrix.col_indices
    nnz = cols.shape[0]
    if offs.shape[0] != matrix.num_rows + 1:
        out.append(Violation("row_offsets length", int(offs.shape[0]),
                             f"expected {matrix.num_rows + 1}"))
    if matrix.values.shape[0] != nnz:
        out.append(Violation("nnz length", int(min(nnz, matrix.values.shape[0])),
                             f"{nnz} column indices but {matrix.values.shape[0]} values"))
    if offs.shape[0] == 0:
        return out
    if offs[0] != 0:
        out.append(Violation("row_offsets start", 0, f"row_offsets[0] = {offs[0]}"))
    if offs[-1] != nnz:
        out.append(Violation("row_offsets end", int(offs.shape[0] - 1),
                             f"row_offsets[-1] = {offs[-1]}, nnz = {nnz}"))
    dec = np.flatnonzero(np.diff(offs) < 0)
    if dec.size:
        out.append(Violation("nondecreasing", int(dec[0] + 1),
                             f"{offs[dec[0] + 1]} < {offs[dec[0]]}"))
    bad = np.flatnonzero((cols < 0) | (cols >= matrix.num_cols))
    if bad.size:
        out.append(Violation("col index bound", int(bad[0]),
                             f"column {cols[bad[0]]} outside [0, {matrix.num_cols})"))
    if nnz > 1 and not dec.size and offs[0] == 0 and offs[-1] == nnz:
        # positions where a new row starts are exempt from the ordering check
        same_row = np.ones(nnz - 1, dtype=bool)
        starts = offs[1:-1]
        starts = starts[(starts > 0) & (starts < nnz)]
        same_row[starts - 1] = False
        unsorted = np.flatnonzero(same_row & (np.diff(cols) <= 0))
        if unsorted.size:
            j = int(unsorted[0] + 1)
            out.append(Violation("strictly increasing columns", j,
                                 f"column {cols[j]} follows {cols[j - 1]}"))
    return out


def check(matrix: CsrMatrix) -> CsrMatrix:
    """Raise ValueError listing violations; return the matrix otherwise."""
    problems = validate(matrix)
    if problems:
        raise ValueError("invalid CSR matrix: " + "; ".join(map(str, problems)))
    return matrix


# ---------------------------------------------------------------- dense

class Layout(enum.Enum):
    ROW_MAJOR = "RowMajor"
    COL_MAJOR = "ColMajor"


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    """Dense operand with an explicit storage order over a flat buffer."""

    num_rows: int
    num_cols: int
    layout: Layout
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data).reshape(-1)
        if data.shape[0] != self.num_rows * self.num_cols:
            raise ValueError(f"data has {data.shape[0]} elements, expected "
                             f"{self.num_rows}x{self.num_cols}")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, a, layout: Layout = Layout.ROW_MAJOR) -> "DenseMatrix":
        a = np.asarray(a)
        if a.ndim != 2:
            raise ValueError("expected a 2-D array")
        order = "C" if layout is Layout.ROW_MAJOR else "F"
        return cls(a.shape[0], a.shape[1], layout, a.ravel(order=order))

    def to_array(self) -> np.ndarray:
        """Logical (num_rows, num_cols) view of the data."""
        if self.layout is Layout.ROW_MAJOR:
            return self.data.reshape(self.num_rows, self.num_cols)
        return self.data.reshape(self.num_cols, self.num_rows).T

    def __getitem__(self, rc):
        r, c = rc
        if self.layout is Layout.ROW_MAJOR:
            return self.data[r * self.num_cols + c]
        return self.data[c * self.num_rows + r]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype


def convert_layout(matrix: DenseMatrix, target: Layout) -> DenseMatrix:
    if matrix.layout is target:
        return matrix
    return DenseMatrix.from_array(matrix.to_array(), target)


# ---------------------------------------------------------------- MatrixMarket

_MM_BANNER = "%%matrixmarket"


def _parse_number(tok: str, lineno: int, kind: str):
    try:
        return int(tok) if kind == "int" else float(tok)
    except ValueError:
        raise MatrixMarketError(f"non-numeric {kind} {tok!r}", lineno) from None


def load_matrix_market(source: Union[str, os.PathLike, BinaryIO, bytes],
                       dtype=np.float64) -> CsrMatrix:
    """Read a MatrixMarket coordinate file into a validated CSR matrix.

    Supports the ``real``/``integer``/``pattern`` fields and the ``general``
    and ``symmetric`` symmetries. Symmetric off-diagonal entries are mirrored,
    pattern entries get value 1.0, duplicate coordinates are summed.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return load_matrix_market(fh, dtype)

    text = io.TextIOWrapper(source, encoding="ascii", errors="strict")
    try:
        lines = text.read().splitlines()
    except UnicodeDecodeError as exc:
        raise MatrixMarketError(f"non-ASCII content ({exc.reason})") from None
    finally:
        text.detach()

    if not lines:
        raise MatrixMarketError("empty input", 1)
    header = lines[0].split()
    if len(header) != 5 or header[0].lower() != _MM_BANNER:
        raise MatrixMarketError("missing %%MatrixMarket banner", 1)
    obj, fmt, fld, sym = (h.lower() for h in header[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(f"unsupported object/format {obj} {fmt}", 1)
    if fld not in ("real", "integer", "pattern", "double"):
        raise MatrixMarketError(f"unsupported field {fld!r}", 1)
    if sym not in ("general", "symmetric"):
        raise MatrixMarketError(f"unsupported symmetry {sym!r}", 1)
    pattern = fld == "pattern"

    i = 1
    while i < len(lines) and (not lines[i].strip() or lines[i].lstrip().startswith("%")):
        i += 1
    if i == len(lines):
        raise MatrixMarketError("missing size line", i)
    size = lines[i].split()
    if len(size) != 3:
        raise MatrixMarketError("size line must hold 'rows cols entries'", i + 1)
    nrows, ncols, nent = (_parse_number(t, i + 1, "int") for t in size)
    if min(nrows, ncols, nent) < 0:
        raise MatrixMarketError("negative size", i + 1)
    if sym == "symmetric" and nrows != ncols:
        raise MatrixMarketError("symmetric matrix must be square", i + 1)

    rows = np.empty(nent, dtype=np.int64)
    cols = np.empty(nent, dtype=np.int64)
    vals = np.ones(nent, dtype=np.float64)
    want = 2 if pattern else 3
    k = 0
    for lineno in range(i + 2, len(lines) + 1):
        line = lines[lineno - 1]
        parts = line.split()
        if not parts or parts[0].startswith("%"):
            continue
        if k == nent:
            raise MatrixMarketError(f"more entries than the declared {nent}", lineno)
        if len(parts) != want:
            raise MatrixMarketError(f"expected {want} fields, got {len(parts)}", lineno)
        r = _parse_number(parts[0], lineno, "int")
        c = _parse_number(parts[1], lineno, "int")
        if not (1 <= r <= nrows and 1 <= c <= ncols):
            raise MatrixMarketError(f"index ({r}, {c}) outside {nrows}x{ncols}", lineno)
        rows[k], cols[k] = r - 1, c - 1
        if not pattern:
            vals[k] = _parse_number(parts[2], lineno, "float")
        k += 1
    if k != nent:
        raise MatrixMarketError(f"declared {nent} entries but found {k}", len(lines))

    if sym == "symmetric":
        off = rows != cols
        rows, cols = np.concatenate([rows, cols[off]]), np.concatenate([cols, rows[off]])
        vals = np.concatenate([vals, vals[off]])
    return check(CsrMatrix.from_coo(nrows, ncols, rows, cols, vals.astype(dtype)))


def write_matrix_market(matrix: CsrMatrix, dest: Union[str, os.PathLike, BinaryIO],
                        comment: Optional[str] = None) -> None:
    """Write ``matrix`` as a general real coordinate file.

    Values are written with ``repr`` of the float64 value, which reads back
    bit-exactly (float32 values widen losslessly).
    """
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as fh:
            write_matrix_market(matrix, fh, comment)
        return
    out = ["%%MatrixMarket matrix coordinate real general"]
    if comment:
        out.extend("% " + c for c in comment.splitlines())
    out.append(f"{matrix.num_rows} {matrix.num_cols} {matrix.nnz}")
    rows = np.repeat(np.arange(matrix.num_rows), matrix.row_lengths())
    for r, c, v in zip(rows.tolist(), matrix.col_indices.tolist(),
                       matrix.values.astype(np.float64).tolist()):
        out.append(f"{r + 1} {c + 1} {v!r}")
    dest.write(("\n".join(out) + "\n").encode("ascii"))


# ---------------------------------------------------------------- R-MAT

@dataclass(frozen=True)
class RmatParams:
    scale: int
    target_nnz: int
    a: float = 0.57
    b: float = 0.19
    c: float = 0.19
    d: float = 0.05
    seed: int = 0

    def __post_init__(self):
        probs = (self.a, self.b, self.c, self.d)
        if self.scale < 0 or self.scale > 31:
            raise ValueError(f"scale must be in [0, 31], got {self.scale}")
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"quadrant probabilities must lie in [0, 1], got {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"quadrant probabilities must sum to 1, got {sum(probs)!r}")
        if self.target_nnz < 0 or self.target_nnz > 4 ** self.scale:
            raise ValueError(f"target_nnz must be in [0, 2^(2*scale)], got {self.target_nnz}")

    @property
    def dim(self) -> int:
        return 1 << self.scale


RMAT_RETRY_FACTOR = 10


def generate_rmat(params: RmatParams, dtype=np.float64) -> CsrMatrix:
    """Draw a 2^scale square R-MAT matrix with ``target_nnz`` distinct entries.

    Coordinates are drawn by recursive quadrant descent; duplicates are
    dropped and redrawn. At most ``10 * target_nnz`` coordinates are drawn;
    falling short of 99% of the target raises GenerationError. A shortfall
    above that threshold is reported through ``rmat_shortfall``.
    """
    rng = np.random.default_rng(params.seed)
    dim, target = params.dim, params.target_nnz
    cum = np.cumsum([params.a, params.b, params.c])
    seen: dict[int, None] = {}
    budget = RMAT_RETRY_FACTOR * target
    drawn = 0
    while len(seen) < target and drawn < budget:
        batch = min(budget - drawn, max(64, int((target - len(seen)) * 1.1)))
        rows = np.zeros(batch, dtype=np.int64)
        cols = np.zeros(batch, dtype=np.int64)
        for _ in range(params.scale):
            u = rng.random(batch)
            q = np.searchsorted(cum, u, side="right")  # 0=a 1=b 2=c 3=d
            rows = (rows << 1) | (q >= 2)
            cols = (cols << 1) | (q & 1)
        drawn += batch
        for key in (rows * dim + cols).tolist():
            if len(seen) == target:
                break
            seen.setdefault(key)
    if len(seen) < 0.99 * target:
        raise GenerationError(f"R-MAT produced {len(seen)} distinct entries after "
                              f"{drawn} draws; target was {target}")
    keys = np.fromiter(seen, dtype=np.int64, count=len(seen))
    # value draws follow coordinate draws so values depend only on the seed
    vals = 1.0 - rng.random(keys.size)  # (0, 1]
    m = CsrMatrix.from_coo(dim, dim, keys // dim, keys % dim, vals.astype(dtype),
                           sum_duplicates=False)
    return m


def rmat_shortfall(matrix: CsrMatrix, params: RmatParams) -> int:
    return params.target_nnz - matrix.nnz


# ---------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureVector:
    nnz: int
    mat_size: int
    std_row: float
    n_cols: int
    hardware_id: Optional[int] = None

    def __post_init__(self):
        if self.nnz < 0 or self.mat_size < 0 or self.std_row < 0 or self.n_cols < 0:
            raise FeatureError(f"features must be nonnegative: {self}")
        if self.hardware_id is not None and self.hardware_id < 0:
            raise FeatureError(f"hardware_id must be nonnegative: {self.hardware_id}")

    @property
    def normalized_std_row(self) -> float:
        """std_row divided by the mean row length (0 for an empty matrix)."""
        mean = self.nnz / self.mat_size if self.mat_size else 0.0
        return self.std_row / mean if mean else 0.0


def extract_features(matrix: CsrMatrix, n_cols: int,
                     hardware_id: Optional[int] = None) -> FeatureVector:
    if matrix.num_rows == 0:
        raise FeatureError("matrix has no rows")
    lengths = matrix.row_lengths().astype(np.float64)
    return FeatureVector(
        nnz=matrix.nnz,
        mat_size=matrix.num_rows,
        std_row=float(np.std(lengths)),
        n_cols=int(n_cols),
        hardware_id=hardware_id,
    )
