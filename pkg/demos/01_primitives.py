"""
Reduction primitives on a staggered row pattern
===============================================

"""

# A matrix whose rows hold 6, 2, 0, 3 and 1 nonzeros. Groups of W=4 lanes
# will straddle row boundaries, which is exactly what the gated network handles.
import numpy as np
from spmmkit import CsrMatrix, conditional_reduce, partition_elements, row_index_of, tree_reduce

lengths = [6, 2, 0, 3, 1]
offs = np.concatenate([[0], np.cumsum(lengths)])
cols = np.concatenate([np.arange(n) for n in lengths])
vals = np.arange(1, offs[-1] + 1, dtype=float)
a = CsrMatrix(len(lengths), 8, offs, cols, vals)
print(a.to_dense())

# plain merge tree over one group
print("tree_reduce([1,2,3,4]) =", tree_reduce([1, 2, 3, 4]))

# walk the nonzeros four at a time; each lane knows the row it belongs to
rows = np.array([row_index_of(a, i) for i in range(a.nnz)])
for start in range(0, a.nnz, 4):
    lane_vals, lane_rows = vals[start:start + 4], rows[start:start + 4]
    for s in conditional_reduce(lane_vals, lane_rows):
        tag = "carry into next group" if s.carry else "final"
        print(f"  lanes {start}-{start + 3}: row {s.row} += {s.total:g} ({tag})")

# the same nonzeros split evenly over three workers
part = partition_elements(a, 3)
for w, ((s, e), r) in enumerate(zip(part.chunk_bounds, part.row_of_chunk_start)):
    print(f"worker {w}: elements [{s}, {e}) starting in row {r}")
