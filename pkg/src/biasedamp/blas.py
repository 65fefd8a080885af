"""Matrix products whose bits do not depend on the BLAS thread count.

OpenBLAS partitions a product differently for each thread count, which moves
the last bits of tall-skinny products such as Y~ B. Here the rows are cut into
fixed blocks, each block is a single-threaded product, and the blocks run on a
thread pool sized to the current BLAS thread budget.
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from threadpoolctl import ThreadpoolController

BLOCK = 256
_controller = None


def _ctl():
    global _controller
    if _controller is None:
        _controller = ThreadpoolController()
    return _controller


def blas_threads():
    info = _ctl().select(user_api="blas").info()
    return max((lib["num_threads"] for lib in info), default=1)


def matmul(X, W, block=BLOCK):
    """X @ W for 2-d arrays, computed in fixed row blocks of X."""
    m = X.shape[0]
    out = np.empty((m, W.shape[1]), dtype=np.result_type(X, W))
    starts = range(0, m, block)
    workers = min(blas_threads(), len(starts))

    def run(s):
        np.matmul(X[s:s + block], W, out=out[s:s + block])

    with _ctl().limit(limits=1, user_api="blas"):
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                list(ex.map(run, starts))
        else:
            for s in starts:
                run(s)
    return out
