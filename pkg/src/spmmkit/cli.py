"""Command-line entry point: ``spmmkit <subcommand> ...``.

Exit status: 0 success, 1 runtime or measurement failure, 2 usage or
validation error. Relative output paths resolve against ``--out-dir``, which
defaults to ``$SPMMKIT_OUTPUT_DIR`` or the current directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench, selector
from .kernels import (
    ALL_KERNELS,
    Dimension,
    KernelId,
    WorkerConfig,
    spmm,
    spmm_reference,
    worst_mismatch,
)
from .sparse import (
    CsrMatrix,
    DenseMatrix,
    GenerationError,
    MatrixMarketError,
    RmatParams,
    convert_layout,
    extract_features,
    generate_rmat,
    load_matrix_market,
    write_matrix_market,
)

OUTPUT_DIR_ENV = "SPMMKIT_OUTPUT_DIR"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("spmmkit")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _resolve(args, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(args.out_dir) / p


def _worker_config(args) -> WorkerConfig:
    try:
        return WorkerConfig(args.workers, args.group_width, args.col_block)
    except ValueError as exc:
        raise UsageError(str(exc))


def _dtype(args):
    return np.float32 if args.precision == 32 else np.float64


def _matrix_files(specs: Sequence[str]) -> list[Path]:
    files = []
    for spec in specs:
        p = Path(spec)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix == ".mtx"))
        else:
            files.append(p)
    return files


def _load_matrices(specs, dtype):
    """Yield (id, matrix) for readable files; report the rest."""
    for f in _matrix_files(specs or []):
        try:
            yield f.stem, load_matrix_market(f, dtype)
        except (OSError, MatrixMarketError, ValueError) as exc:
            print(f"error: cannot read {f}: {exc}", file=sys.stderr)


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    try:
        params = RmatParams(args.scale, args.nnz, args.a, args.b, args.c, args.d, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    try:
        a = generate_rmat(params, _dtype(args))
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matrix_market(a, out, comment=f"R-MAT {params}")
    f = extract_features(a, 1)
    short = params.target_nnz - a.nnz
    print(f"wrote {out}: M={a.num_rows} nnz={a.nnz} std_row={f.std_row:.6g}"
          + (f" (short of target by {short})" if short else ""))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _worker_config(args)
    store = _resolve(args, args.store)
    dataset = _resolve(args, args.dataset)
    store.parent.mkdir(parents=True, exist_ok=True)
    mats = list(_load_matrices(args.matrices, _dtype(args)))
    if not mats:
        print("error: no readable matrices", file=sys.stderr)
        return EXIT_RUNTIME
    res = bench.run_corpus(mats, args.n, cfg, reps=args.reps, warmup=args.warmup, store=store,
                           verify=not args.no_verify, seed=args.seed,
                           hardware_id=args.hardware_id)
    for mid, why in res.failures:
        print(f"error: {mid}: {why}", file=sys.stderr)
    if len(res.failures) == len(mats):
        return EXIT_RUNTIME
    bench.write_dataset(res.samples, dataset)
    print(f"{res.new_measurements} new measurements; {len(res.records)} records, "
          f"{len(res.samples)} samples -> {dataset}")
    return EXIT_OK


def _read_datasets(args, paths) -> list[selector.TrainingSample]:
    samples = []
    for p in paths:
        try:
            samples.extend(bench.read_dataset(_resolve(args, p)))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read dataset {p}: {exc}")
    if not samples:
        raise UsageError("dataset is empty")
    return samples


def _load_model(args):
    try:
        return selector.load_model(_resolve(args, args.model))
    except (OSError, selector.ModelFormatError) as exc:
        raise UsageError(f"cannot load model {args.model}: {exc}")


def cmd_train(args) -> int:
    samples = _read_datasets(args, args.dataset)
    try:
        cfg = selector.BoostConfig(args.rounds, args.max_depth, args.min_leaf, args.lr,
                                   args.patience, seed=args.seed)
        train_set, valid_set, test_set = selector.split_dataset(samples, args.split, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.unified and any(s.features.hardware_id is None for s in samples):
        raise UsageError("--unified needs a hardware_id on every dataset row")
    model = selector.train(train_set, valid_set, cfg, unified=args.unified)
    model.metadata.update({"split": list(args.split), "split_seed": args.seed})
    out = _resolve(args, args.model)
    out.parent.mkdir(parents=True, exist_ok=True)
    selector.save_model(model, out)
    stem = out.with_suffix("")
    for name, part in (("train", train_set), ("valid", valid_set), ("test", test_set)):
        bench.write_dataset(part, f"{stem}.{name}.csv")
    report_set = valid_set or train_set
    rep = selector.evaluate(model, report_set)
    rep.to_csv(f"{stem}.validation.csv")
    print(f"model -> {out} ({model.num_rounds} rounds); split "
          f"{len(train_set)}/{len(valid_set)}/{len(test_set)}; validation "
          f"average_normalized={rep.average_normalized:.4f} accuracy={rep.accuracy:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    samples = _read_datasets(args, args.dataset)
    model = None if args.oracle or args.static else _load_model(args)
    if args.static:
        try:
            fixed = KernelId.parse(args.static).index
        except ValueError as exc:
            raise UsageError(str(exc))

    def report(subset):
        if args.oracle:
            return selector.evaluate_choices(subset, [s.label for s in subset])
        if args.static:
            return selector.evaluate_choices(subset, [fixed] * len(subset))
        return selector.evaluate(model, subset)

    out = _resolve(args, args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    groups = [(None, samples)]
    if args.per_tag:
        tags = sorted({s.features.hardware_id for s in samples}, key=lambda t: (t is None, t))
        groups = [(t, [s for s in samples if s.features.hardware_id == t]) for t in tags]
    for tag, subset in groups:
        rep = report(subset)
        dest = out if tag is None else out.with_name(f"{out.stem}.hw{tag}{out.suffix}")
        rep.to_csv(dest)
        if args.samples:
            sp = _resolve(args, args.samples)
            rep.samples_to_csv(subset, sp if tag is None else sp.with_name(
                f"{sp.stem}.hw{tag}{sp.suffix}"))
        label = "" if tag is None else f"hardware {tag}: "
        print(f"{label}average_normalized={rep.average_normalized:.4f} "
              f"accuracy={rep.accuracy:.3f} n={len(subset)} -> {dest}")
    return EXIT_OK


def _read_dense(path, dtype) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2, dtype=dtype)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read dense matrix {path}: {exc}")


def cmd_predict(args) -> int:
    model = _load_model(args)
    try:
        a = load_matrix_market(args.matrix, _dtype(args))
    except (OSError, MatrixMarketError, ValueError) as exc:
        raise UsageError(f"cannot read {args.matrix}: {exc}")
    feats = extract_features(a, args.n, args.hardware_id)
    try:
        kernel = selector.predict(model, feats)
    except ValueError as exc:
        raise UsageError(str(exc))
    print(kernel)
    if args.execute:
        if args.x:
            x2 = _read_dense(args.x, _dtype(args))
            if x2.shape != (a.num_cols, args.n):
                raise UsageError(f"X is {x2.shape}, expected ({a.num_cols}, {args.n})")
            x = DenseMatrix.from_array(x2)
        else:
            x = bench.dense_operand(Path(args.matrix).stem, a.num_cols, args.n, args.seed,
                                    _dtype(args))
        y = spmm(kernel, a, convert_layout(x, kernel.layout), _worker_config(args))
        if args.y:
            out = _resolve(args, args.y)
            out.parent.mkdir(parents=True, exist_ok=True)
            np.savetxt(out, y.to_array(), delimiter=",", fmt="%.17g")
        print(f"executed {kernel}: Y is {y.num_rows}x{y.num_cols}, "
              f"checksum={float(y.data.sum())!r}")
    return EXIT_OK


def _controlled_spec(args) -> bench.ControlledSpec:
    dim = Dimension(args.dimension)
    pts = args.points
    if len(pts) < 3:
        raise UsageError("a controlled series needs at least 3 points")

    def skewed(a, nnz, seed):
        rest = (1.0 - a) / 3.0
        return RmatParams(args.scale, nnz, a, rest, rest, 1.0 - a - 2 * rest, seed)

    try:
        if dim is Dimension.RB_EB:
            series = [skewed(a, args.nnz, args.seed) for a in pts]
            return bench.ControlledSpec(dim, series, (args.n,))
        if dim is Dimension.RM_CM:
            return bench.ControlledSpec(dim, [skewed(args.a, args.nnz, args.seed)],
                                        tuple(int(p) for p in pts))
        return bench.ControlledSpec(dim, [skewed(args.a, int(p), args.seed) for p in pts],
                                    (args.n,))
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_controlled(args) -> int:
    spec = _controlled_spec(args)
    try:
        table = bench.run_controlled(spec, _worker_config(args), reps=args.reps,
                                     warmup=args.warmup, trend_check=args.trend_check,
                                     seed=args.seed)
    except AssertionError as exc:
        print(f"trend check failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = _resolve(args, args.out or f"controlled_{spec.dimension.value}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    text = table.to_csv(out)
    sys.stdout.write(text)
    print(f"verdict: {table.verdict} -> {out}")
    return EXIT_OK


def builtin_suite(exhaustive: bool = False, dtype=np.float64) -> list[tuple[str, CsrMatrix]]:
    """Small instances every build must get right."""
    rng = np.random.default_rng(20240607)
    suite = [("identity8", CsrMatrix.identity(8, dtype))]
    # five rows holding 6/2/0/3/1 nonzeros
    pattern = [6, 2, 0, 3, 1]
    dense = np.zeros((5, 8), dtype=dtype)
    for r, cnt in enumerate(pattern):
        cols = rng.choice(8, size=cnt, replace=False)
        dense[r, cols] = rng.integers(1, 10, size=cnt)
    suite.append(("rows_6_2_0_3_1", CsrMatrix.from_dense(dense)))
    suite.append(("empty_rows", CsrMatrix.from_dense(np.diag([0, 2, 0, 3]).astype(dtype))))
    suite.append(("long_row", CsrMatrix.from_dense(rng.random((3, 100)).astype(dtype))))
    count = 60 if exhaustive else 8
    for i in range(count):
        m, k = rng.integers(1, 12, size=2)
        density = rng.random()
        d = (rng.random((m, k)) < density) * rng.integers(-5, 6, size=(m, k))
        suite.append((f"random{i}", CsrMatrix.from_dense(d.astype(dtype))))
    if exhaustive:
        for i in range(6):
            skew = [0.25, 0.45, 0.7][i % 3]
            rest = (1 - skew) / 3
            p = RmatParams(6 + i % 3, 4 << (6 + i % 3), skew, rest, rest, 1 - skew - 2 * rest, i)
            suite.append((f"rmat{i}", generate_rmat(p, dtype)))
    return suite


def cmd_validate(args) -> int:
    dtype = _dtype(args)
    corpus = list(_load_matrices(args.matrices, dtype)) if args.matrices else []
    corpus += builtin_suite(args.exhaustive_small, dtype)
    faulty = KernelId.parse(args.inject_fault) if args.inject_fault else None
    configs = [_worker_config(args)]
    if args.exhaustive_small:
        configs += [WorkerConfig(p, w) for p in (1, 3, 8) for w in (2, 4, 8)]
    worst = None
    checked = 0
    for mid, a in corpus:
        rng = np.random.default_rng(len(mid))
        for n in args.n:
            x = DenseMatrix.from_array(rng.integers(-4, 5, size=(a.num_cols, n)).astype(dtype))
            ref = spmm_reference(a, x).to_array()
            for k in ALL_KERNELS:
                for cfg in configs:
                    y = spmm(k, a, convert_layout(x, k.layout), cfg).to_array()
                    if k == faulty and y.size:
                        y = y.copy()
                        y.flat[y.size // 2] += 1.0
                    checked += 1
                    bad = worst_mismatch(y, ref, dtype)
                    if bad is not None and (worst is None or bad.rel_error > worst[0].rel_error):
                        worst = (bad, k, mid, cfg)
    if worst is not None:
        bad, k, mid, cfg = worst
        print(f"FAIL: worst relative error {bad.rel_error:.3g} in kernel {k} on {mid} "
              f"at Y[{bad.row},{bad.col}]: got {bad.got!r}, expected {bad.expected!r} "
              f"(P={cfg.num_workers}, W={cfg.group_width})")
        return EXIT_RUNTIME
    print(f"PASS: {checked} kernel runs over {len(corpus)} matrices agree with the reference")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spmmkit", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", "-P", type=int, default=4, help="parallel workers P")
    p.add_argument("--group-width", "-W", type=int, default=8, help="reduction lanes W")
    p.add_argument("--col-block", "-C", type=int, default=None,
                   help="columns per cached segment (default: per kernel)")
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--out-dir", default=os.environ.get(OUTPUT_DIR_ENV, "."))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an R-MAT matrix")
    g.add_argument("--scale", type=int, required=True)
    g.add_argument("--nnz", type=int, required=True)
    g.add_argument("--a", type=float, default=0.57)
    g.add_argument("--b", type=float, default=0.19)
    g.add_argument("--c", type=float, default=0.19)
    g.add_argument("--d", type=float, default=0.05)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("bench", help="time all kernels over a corpus")
    b.add_argument("--matrices", nargs="+", required=True, help="directories or .mtx files")
    b.add_argument("--n", type=_int_list, default=[2, 8, 32, 128])
    b.add_argument("--reps", type=int, default=7)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--store", default="records.csv")
    b.add_argument("--dataset", default="dataset.csv")
    b.add_argument("--hardware-id", type=int, default=None)
    b.add_argument("--no-verify", action="store_true")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train the kernel selector")
    t.add_argument("--dataset", nargs="+", required=True)
    t.add_argument("--model", default="model.json")
    t.add_argument("--unified", action="store_true", help="add hardware_id as a feature")
    t.add_argument("--split", type=_float_list, default=[0.4, 0.1, 0.5])
    t.add_argument("--rounds", type=int, default=100)
    t.add_argument("--max-depth", type=int, default=4)
    t.add_argument("--min-leaf", type=int, default=5)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--patience", type=int, default=10)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a selector on a dataset")
    e.add_argument("--dataset", nargs="+", required=True)
    e.add_argument("--model", default="model.json")
    e.add_argument("--report", default="eval_report.csv")
    e.add_argument("--samples", default=None, help="also write per-sample CSV")
    e.add_argument("--per-tag", action="store_true", help="one report per hardware_id")
    e.add_argument("--oracle", action="store_true", help="score the always-best predictor")
    e.add_argument("--static", default=None, metavar="KERNEL",
                   help="score one fixed kernel, e.g. RB+RM+SR")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="pick a kernel for a matrix")
    r.add_argument("--model", default="model.json")
    r.add_argument("--matrix", required=True)
    r.add_argument("--n", type=int, required=True)
    r.add_argument("--hardware-id", type=int, default=None)
    r.add_argument("--execute", action="store_true")
    r.add_argument("--x", default=None, help="dense X as CSV (default: random)")
    r.add_argument("--y", default=None, help="write Y as CSV")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("controlled", help="controlled experiment along one design axis")
    c.add_argument("--dimension", choices=[d.value for d in Dimension], required=True)
    c.add_argument("--points", type=_float_list, required=True,
                   help="rb-eb: skew a values; rm-cm: N values; sr-pr: nnz values")
    c.add_argument("--scale", type=int, default=12)
    c.add_argument("--nnz", type=int, default=1 << 16)
    c.add_argument("--n", type=int, default=32)
    c.add_argument("--a", type=float, default=0.45, help="skew for rm-cm and sr-pr")
    c.add_argument("--reps", type=int, default=7)
    c.add_argument("--warmup", type=int, default=2)
    c.add_argument("--trend-check", action="store_true")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_controlled)

    v = sub.add_parser("validate", help="check every kernel against the reference")
    v.add_argument("--matrices", nargs="*", default=None)
    v.add_argument("--exhaustive-small", action="store_true")
    v.add_argument("--n", type=_int_list, default=[1, 2, 3, 8, 33])
    v.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
