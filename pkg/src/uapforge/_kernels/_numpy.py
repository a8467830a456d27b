"""Pure NumPy implementation of the temporal-convolution hot kernels.

Semantics are identical to the compiled backend in ``_native.pyx``; results
may differ in the last few ulps because BLAS reductions group sums
differently than sequential loops.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def temporal_conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid cross-correlation along time, one output map per filter.

    x: (n, C, T), w: (K, L), b: (K,)  ->  (n, K, C, T-L+1)
    """
    win = sliding_window_view(x, w.shape[1], axis=2)  # (n, C, T1, L)
    u = np.einsum("nctl,kl->nkct", win, w, optimize=True)
    u += b[None, :, None, None]
    return u


def temporal_conv_backward_input(w: np.ndarray, du: np.ndarray, t: int) -> np.ndarray:
    """Adjoint of the forward correlation with respect to the input.

    w: (K, L), du: (n, K, C, T1)  ->  (n, C, t) with t = T1 + L - 1
    """
    n, k, c, t1 = du.shape
    length = w.shape[1]
    padded = np.zeros((n, k, c, t1 + 2 * (length - 1)), dtype=du.dtype)
    padded[:, :, :, length - 1 : length - 1 + t1] = du
    win = sliding_window_view(padded, length, axis=3)  # (n, K, C, t, L)
    return np.einsum("nkctl,kl->nct", win, w[:, ::-1], optimize=True)


def temporal_conv_backward_weights(x: np.ndarray, du: np.ndarray):
    """Gradients of the filter weights and biases.

    x: (n, C, T), du: (n, K, C, T1)  ->  (dw (K, L), db (K,))
    """
    length = x.shape[2] - du.shape[3] + 1
    win = sliding_window_view(x, length, axis=2)  # (n, C, T1, L)
    dw = np.einsum("nctl,nkct->kl", win, du, optimize=True)
    db = du.sum(axis=(0, 2, 3))
    return dw, db
