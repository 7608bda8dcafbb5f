"""Numpy implementations of the hot kernels (fallback and reference)."""
import numpy as np


def nearest_sqdist(A, B):
    """Squared distance from each row of A to its nearest row of B, and that
    row's index (lowest index on ties)."""
    dx = A[:, None, 0] - B[None, :, 0]
    dy = A[:, None, 1] - B[None, :, 1]
    dz = A[:, None, 2] - B[None, :, 2]
    d = dx * dx + dy * dy
    d = d + dz * dz
    idx = np.argmin(d, axis=1)
    return d[np.arange(A.shape[0]), idx], idx.astype(np.int64)


def aggregate(K, idx, S):
    """out[t, q, f] = sum_k K[t, k, q] * S[idx[t, k], f]."""
    return np.matmul(np.swapaxes(K, 1, 2), S[idx])


def scatter(K, idx, G, n_src):
    """Adjoint of :func:`aggregate` with respect to S."""
    W = np.matmul(K, G)
    out = np.zeros((n_src, G.shape[2]))
    np.add.at(out, idx.reshape(-1), W.reshape(-1, G.shape[2]))
    return out
