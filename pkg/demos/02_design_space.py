"""
Eight ways to multiply the same matrix
======================================

"""

# Every variant picks one option on each axis: rows or nonzeros per worker,
# row- or column-major X, sequential or tree reduction.
import numpy as np
from spmmkit import ALL_KERNELS, RmatParams, WorkerConfig, generate_rmat
from spmmkit.bench import dense_operand, time_kernel
from spmmkit.sparse import extract_features

uniform = generate_rmat(RmatParams(12, 1 << 15, 0.25, 0.25, 0.25, 0.25, seed=1))
skewed = generate_rmat(RmatParams(12, 1 << 15, 0.7, 0.1, 0.1, 0.1, seed=1))
cfg = WorkerConfig(num_workers=4, group_width=8)

for name, a in (("uniform", uniform), ("skewed", skewed)):
    for n in (2, 64):
        f = extract_features(a, n)
        print(f"\n{name}: M={f.mat_size} nnz={f.nnz} std_row={f.std_row:.2f} N={n}")
        x = dense_operand(name, a.num_cols, n)
        recs = [time_kernel(k, a, x, cfg, reps=5, warmup=1) for k in ALL_KERNELS]
        best = min(r.median_time for r in recs)
        for r in recs:
            bar = "#" * int(round(20 * best / r.median_time))
            print(f"  {str(r.kernel):10s} {r.median_time * 1e3:8.3f} ms  {bar}")

# outputs agree with the reference, so checksums differ only by rounding
print("\nchecksum spread:", np.ptp([r.checksum for r in recs]))
