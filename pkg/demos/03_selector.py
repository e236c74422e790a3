"""
Learning which kernel to run
============================

"""

# Time all eight kernels over a small generated corpus, then fit the
# boosted-tree selector on 40% of the samples and score it on the held-out half.
import time

from spmmkit import ALL_KERNELS, RmatParams, generate_rmat
from spmmkit.bench import run_corpus
from spmmkit.selector import best_static, evaluate, split_dataset, train

corpus = []
for i in range(40):
    scale = 7 + i % 5
    a = 0.25 + 0.45 * ((i * 11) % 40) / 39
    rest = (1 - a) / 3
    p = RmatParams(scale, (4 << scale), a, rest, rest, 1 - a - 2 * rest, seed=i)
    corpus.append((f"rmat{i}", generate_rmat(p)))

t0 = time.perf_counter()
res = run_corpus(corpus, [1, 8, 64], reps=5, warmup=1)
print(f"{len(res.samples)} samples, {len(res.records)} timings in {time.perf_counter() - t0:.1f}s")

train_set, valid_set, test_set = split_dataset(res.samples, (0.4, 0.1, 0.5), seed=0)
model = train(train_set, valid_set)
report = evaluate(model, test_set)
k, static = best_static(test_set)

print(f"selector:    {report.average_normalized:.3f} of best, exact hits {report.accuracy:.0%}")
print(f"best static: {static:.3f} ({ALL_KERNELS[k]})")
for name, v in sorted(report.feature_importance.items(), key=lambda kv: -kv[1]):
    print(f"  importance {name:14s} {v:.3f}")
