import numpy as np
import pytest
from hypothesis import settings

from spmmkit.sparse import CsrMatrix, RmatParams

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_csr(rng, m, k, density=0.3, int_values=False, dtype=np.float64):
    mask = rng.random((m, k)) < density
    if int_values:
        vals = rng.integers(-5, 6, size=(m, k))
        vals[vals == 0] = 1
    else:
        vals = rng.random((m, k)) + 0.1
    return CsrMatrix.from_dense((mask * vals).astype(dtype))


def skew_params(scale, nnz, a, seed):
    """R-MAT params with the remaining mass split evenly over b, c, d."""
    rest = (1.0 - a) / 3.0
    return RmatParams(scale, nnz, a, rest, rest, 1.0 - a - 2 * rest, seed)


def staggered_matrix(rng=None, k=8, dtype=np.float64):
    """Five rows holding 6/2/0/3/1 nonzeros, small integer values."""
    rng = rng or np.random.default_rng(6)
    dense = np.zeros((5, k), dtype=dtype)
    for r, cnt in enumerate([6, 2, 0, 3, 1]):
        cols = rng.choice(k, size=cnt, replace=False)
        dense[r, cols] = rng.integers(1, 10, size=cnt)
    return CsrMatrix.from_dense(dense)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, title, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
