import numpy as np
from threadpoolctl import threadpool_limits

from biasedamp.blas import matmul


def test_matches_numpy_product():
    rng = np.random.default_rng(0)
    X, W = rng.normal(size=(700, 300)), rng.normal(size=(300, 7))
    np.testing.assert_allclose(matmul(X, W), X @ W, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(matmul(X.T, X[:, :5]), X.T @ X[:, :5], rtol=1e-12, atol=1e-12)


def test_thread_count_independent():
    rng = np.random.default_rng(1)
    X, W = rng.normal(size=(900, 750)), rng.normal(size=(750, 10))
    with threadpool_limits(1):
        a = matmul(X, W)
    for threads in (2, 4):
        with threadpool_limits(threads):
            assert np.array_equal(matmul(X, W), a)
