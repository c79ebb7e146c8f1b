import numpy as np
import pytest

from l2oquad.linalg import SeededRng
from l2oquad.problem import QuadraticBatch, make_batch


def single_problem_batch(M, y):
    """Batch with one hand-written problem (M is b x d, y length b)."""
    M = np.asarray(M, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return QuadraticBatch.from_arrays(M[None, :, :], y[None, :])


@pytest.fixture
def small_batch():
    return make_batch(SeededRng(2), 2, 6, 4)
