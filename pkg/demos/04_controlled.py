"""
Controlled experiments along each axis
======================================

"""

# Hold two axes at RB+RM+SR and sweep one input property. Ratios above 1
# mean the second-named variant is faster.
from spmmkit import Dimension, RmatParams, WorkerConfig
from spmmkit.bench import ControlledSpec, run_controlled


def skewed(a, nnz, scale=12):
    rest = (1 - a) / 3
    return RmatParams(scale, nnz, a, rest, rest, 1 - a - 2 * rest, seed=0)


specs = [
    ControlledSpec(Dimension.RB_EB, [skewed(a, 1 << 16) for a in (0.25, 0.45, 0.7)], (32,)),
    ControlledSpec(Dimension.RM_CM, [skewed(0.45, 1 << 16)], (2, 8, 32, 128)),
    ControlledSpec(Dimension.SR_PR, [skewed(0.45, n) for n in (1 << 14, 1 << 15, 1 << 16)], (32,)),
]
for spec in specs:
    table = run_controlled(spec, WorkerConfig(), reps=15)
    print(f"\n{spec.dimension.value}: time {table.kernel_a} / time {table.kernel_b}")
    print(table.to_csv(), end="")

# On a single core, spreading nonzeros evenly cannot shorten the critical
# path, so the RB/EB ratio stays flat; the N sweep still shows row-major X
# pulling ahead as rows of X get wider.
