"""CPU SpMM over the full RB/EB x RM/CM x SR/PR design space, with a learned
selector that picks the fastest variant for a given input."""

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
)
from .primitives import conditional_reduce, partition_elements, row_index_of, tree_reduce
from .sparse import (
    CsrMatrix,
    DenseMatrix,
    FeatureVector,
    Layout,
    RmatParams,
    convert_layout,
    extract_features,
    generate_rmat,
    load_matrix_market,
    validate,
    write_matrix_market,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_KERNELS", "Dimension", "KChoice", "KernelId", "MChoice", "NChoice",
    "WorkerConfig", "spmm", "spmm_reference",
    "conditional_reduce", "partition_elements", "row_index_of", "tree_reduce",
    "CsrMatrix", "DenseMatrix", "FeatureVector", "Layout", "RmatParams",
    "convert_layout", "extract_features", "generate_rmat", "load_matrix_market",
    "validate", "write_matrix_market",
]
