import csv

import numpy as np
import pytest

from spmmkit.bench import (
    DATASET_HEADER,
    STORE_HEADER,
    VERDICTS,
    BenchRecord,
    ControlledSpec,
    TrendTable,
    VerificationError,
    dense_operand,
    read_dataset,
    read_store,
    run_controlled,
    run_corpus,
    time_interleaved,
    time_kernel,
    write_dataset,
)
from spmmkit.kernels import ALL_KERNELS, Dimension, KernelId, WorkerConfig, spmm
from spmmkit.sparse import CsrMatrix, DenseMatrix, FeatureVector, Layout, RmatParams, generate_rmat

from conftest import skew_params

RBRMSR = KernelId.parse("RB+RM+SR")
FAST = dict(reps=3, warmup=0)


def small_corpus():
    return [("m1", generate_rmat(RmatParams(6, 200, seed=1))),
            ("m2", generate_rmat(RmatParams(6, 250, 0.6, 0.15, 0.15, 0.1, seed=2)))]


def zeros_stub(kernel, a, x, cfg):
    return DenseMatrix(a.num_rows, x.num_cols, Layout.ROW_MAJOR,
                       np.zeros(a.num_rows * x.num_cols))


# ---------------------------------------------------------------- time_kernel

def test_time_kernel_record():
    a = generate_rmat(RmatParams(7, 600, seed=0))
    x = dense_operand("m", a.num_cols, 8)
    rec = time_kernel(RBRMSR, a, x, **FAST)
    assert 0 < rec.min_time <= rec.median_time
    assert rec.reps == 3 and rec.n_cols == 8 and rec.features.nnz == 600
    again = time_kernel(RBRMSR, a, x, **FAST)
    assert rec.checksum == again.checksum == pytest.approx((a.to_dense() @ x.to_array()).sum())


def test_time_kernel_converts_layout_for_cm():
    a = CsrMatrix.identity(5)
    x = dense_operand("id", 5, 3)
    rec = time_kernel(KernelId.parse("EB+CM+PR"), a, x, **FAST)
    assert rec.checksum == pytest.approx(x.to_array().sum())


def test_time_kernel_detects_corrupt_kernel():
    a = generate_rmat(RmatParams(6, 100, seed=0))
    x = dense_operand("m", a.num_cols, 4)
    with pytest.raises(VerificationError, match=r"Y\[\d+,\d+\]"):
        time_kernel(RBRMSR, a, x, spmm_fn=zeros_stub, **FAST)
    # skipping verification lets the stub through
    assert time_kernel(RBRMSR, a, x, spmm_fn=zeros_stub, verify=False, **FAST).checksum == 0


def test_time_kernel_rejects_few_reps():
    a = CsrMatrix.identity(2)
    with pytest.raises(ValueError):
        time_kernel(RBRMSR, a, dense_operand("i", 2, 1), reps=2)


def test_bench_record_invariants():
    f = FeatureVector(1, 1, 0.0, 1)
    with pytest.raises(ValueError):
        BenchRecord("m", f, RBRMSR, 1, 3, 0, 1.0, 2.0, 0.0)
    with pytest.raises(ValueError):
        BenchRecord("m", f, RBRMSR, 1, 2, 0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        BenchRecord("m", f, RBRMSR, 1, 3, 0, 1.0, 0.0, 0.0)


def test_dense_operand_reproducible():
    a = dense_operand("abc", 4, 3, seed=1).data
    assert np.array_equal(a, dense_operand("abc", 4, 3, seed=1).data)
    assert not np.array_equal(a, dense_operand("abd", 4, 3, seed=1).data)
    assert np.all((a >= 0) & (a < 1))


# ---------------------------------------------------------------- corpus

def test_run_corpus_counts_and_resume(tmp_path):
    store = tmp_path / "store.csv"
    res = run_corpus(small_corpus(), [2, 8], store=store, **FAST)
    assert len(res.samples) == 4 and len(res.records) == 32
    assert res.new_measurements == 32 and not res.failures
    for s in res.samples:
        assert s.label == int(np.argmin(s.timings))
    rows = read_store(store)
    assert len(rows) == 32
    with open(store) as fh:
        assert next(csv.reader(fh)) == STORE_HEADER
    before = store.read_bytes()

    again = run_corpus(small_corpus(), [2, 8], store=store, **FAST)
    assert again.new_measurements == 0
    assert store.read_bytes() == before
    assert [s.timings.tolist() for s in again.samples] == [s.timings.tolist() for s in res.samples]


def test_run_corpus_partial_resume(tmp_path):
    store = tmp_path / "store.csv"
    run_corpus(small_corpus()[:1], [2], store=store, **FAST)
    res = run_corpus(small_corpus(), [2], store=store, **FAST)
    assert res.new_measurements == 8
    assert len(read_store(store)) == 16


def test_run_corpus_records_failures():
    def flaky(kernel, a, x, cfg):
        if a.num_rows == 3:
            raise RuntimeError("boom")
        return spmm(kernel, a, x, cfg)

    corpus = small_corpus() + [("bad", CsrMatrix.identity(3))]
    res = run_corpus(corpus, [2], spmm_fn=flaky, **FAST)
    assert [m for m, _ in res.failures] == ["bad"]
    assert len(res.samples) == 2
    with pytest.raises(ValueError):
        run_corpus([], [2])
    with pytest.raises(ValueError):
        run_corpus(small_corpus(), [])


def test_labels_invariant_under_store_rescaling(tmp_path):
    store = tmp_path / "s.csv"
    res = run_corpus(small_corpus(), [4], store=store, **FAST)
    rows = read_store(store)
    scaled = tmp_path / "scaled.csv"
    with open(scaled, "w", newline="") as fh:
        w = csv.DictWriter(fh, STORE_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            r = dict(r)
            r["median_s"] = repr(float(r["median_s"]) * 3.0)
            r["min_s"] = repr(float(r["min_s"]) * 3.0)
            w.writerow(r)
    res2 = run_corpus(small_corpus(), [4], store=scaled, **FAST)
    assert res2.new_measurements == 0
    assert [s.label for s in res2.samples] == [s.label for s in res.samples]


def test_dataset_roundtrip(tmp_path):
    res = run_corpus(small_corpus(), [2, 3], hardware_id=1, **FAST)
    path = tmp_path / "d.csv"
    write_dataset(res.samples, path)
    with open(path) as fh:
        assert next(csv.reader(fh)) == DATASET_HEADER
    back = read_dataset(path)
    assert len(back) == 4
    for a, b in zip(res.samples, back):
        assert a.timings.tolist() == b.timings.tolist()
        assert a.features == b.features and a.matrix_id == b.matrix_id
    assert DATASET_HEADER[6:14] == [str(k) for k in ALL_KERNELS]


def test_read_dataset_missing_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("matrix_id,N\nx,1\n")
    with pytest.raises(ValueError):
        read_dataset(p)


# ---------------------------------------------------------------- controlled

def test_controlled_spec_validation():
    s = [skew_params(7, 500, a, 0) for a in (0.25, 0.45, 0.65)]
    ControlledSpec(Dimension.RB_EB, s)
    with pytest.raises(ValueError):
        ControlledSpec(Dimension.RB_EB, s[:2])
    with pytest.raises(ValueError):
        ControlledSpec(Dimension.RB_EB, s[:2] + [skew_params(7, 600, 0.7, 0)])
    with pytest.raises(ValueError):
        ControlledSpec(Dimension.RM_CM, s[:1], (2, 8))
    with pytest.raises(ValueError):
        ControlledSpec(Dimension.SR_PR, s)
    with pytest.raises(ValueError):
        ControlledSpec(Dimension.RB_EB, s, (2, 8))


@pytest.mark.parametrize("dimension", list(Dimension))
def test_controlled_tables_well_formed(dimension):
    if dimension is Dimension.RB_EB:
        spec = ControlledSpec(dimension, [skew_params(7, 500, a, 0) for a in (0.25, 0.45, 0.65)],
                              (8,))
    elif dimension is Dimension.RM_CM:
        spec = ControlledSpec(dimension, [RmatParams(7, 500)], (2, 8, 32))
    else:
        spec = ControlledSpec(dimension, [RmatParams(7, n, seed=1) for n in (200, 500, 1000)],
                              (8,))
    t = run_controlled(spec, WorkerConfig(2), **FAST)
    assert len(t.params) == len(t.ratios) == 3
    assert t.verdict in VERDICTS
    assert all(r > 0 for r in t.ratios)
    lines = t.to_csv().splitlines()
    assert len(lines) == 4 and lines[0].startswith(t.param_name + ",")
    assert lines[0].endswith(",ratio,verdict")
    if dimension is Dimension.RB_EB:
        assert t.params == sorted(t.params)


def test_trend_verdicts():
    def table(ratios):
        return TrendTable(Dimension.RB_EB, "std_row", [1, 2, 3], [1] * 3, [1] * 3, ratios,
                          RBRMSR, RBRMSR)

    assert table([1.0, 1.05, 0.96]).verdict == "flat"
    assert table([1.0, 1.2, 1.5]).verdict == "rising"
    assert table([1.0, 0.8, 0.6]).verdict == "falling"
    assert table([1.0, 1.3, 1.0]).verdict == "mixed"
    assert table([1.0, 0.95, 1.4]).nondecreasing()
    assert not table([1.0, 0.85, 1.4]).nondecreasing()


def test_time_interleaved_matches_single():
    a = generate_rmat(RmatParams(7, 500, 0.6, 0.15, 0.15, 0.1, seed=3))
    x = dense_operand("m", a.num_cols, 5)
    recs = time_interleaved(ALL_KERNELS, a, x, **FAST)
    assert [r.kernel for r in recs] == list(ALL_KERNELS)
    single = time_kernel(RBRMSR, a, x, **FAST)
    assert recs[0].checksum == single.checksum
    calls = []

    def spy(kernel, a, x, cfg):
        calls.append(str(kernel))
        return spmm(kernel, a, x, cfg)

    pair = [RBRMSR, KernelId.parse("EB+CM+PR")]
    time_interleaved(pair, a, x, reps=3, warmup=1, spmm_fn=spy)
    assert calls == ["RB+RM+SR", "EB+CM+PR"] * 4
