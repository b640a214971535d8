"""Pure-numpy kernel backend.

Every reduction here runs in a fixed left-to-right order (per output cell),
so results are bit-identical run to run and match the compiled backend's
loops exactly for the arithmetic-only kernels. BLAS is deliberately not
used: ``a @ b`` reorders and fuses sums, which breaks that contract.
"""

import numpy as np


def _seq_sum_rows(x):
    """Left-to-right sum along the last axis (cumsum is sequential)."""
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1])
    return np.cumsum(x, axis=-1)[..., -1]


def _seq_sum_cols(x):
    """Top-to-bottom sum along the first axis."""
    if x.shape[0] == 0:
        return np.zeros(x.shape[1:])
    return np.cumsum(x, axis=0)[-1]


def matmul(a, b):
    """Matrix product with left-to-right accumulation over the inner index."""
    p, r = a.shape
    q = b.shape[1]
    out = np.zeros((p, q))
    for k in range(r):
        out += a[:, k, None] * b[None, k, :]
    return out


def row_softmax_fwd(x):
    shifted = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = _seq_sum_rows(e)
    return e * (1.0 / denom)[:, None]


def row_softmax_bwd(s, ds):
    t = _seq_sum_rows(ds * s)
    return s * (ds - t[:, None])


def layer_norm_fwd(x, gain, bias, eps):
    h = x.shape[1]
    mu = _seq_sum_rows(x) / h
    d = x - mu[:, None]
    var = _seq_sum_rows(d * d) / h
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = d * inv_std[:, None]
    y = xhat * gain[None, :] + bias[None, :]
    return y, xhat, inv_std


def layer_norm_bwd(dy, xhat, inv_std, gain):
    h = dy.shape[1]
    dgain = _seq_sum_cols(dy * xhat)
    dbias = _seq_sum_cols(dy)
    dxhat = dy * gain[None, :]
    a = _seq_sum_rows(dxhat)
    b = _seq_sum_rows(dxhat * xhat)
    inv_h = 1.0 / h
    dx = (dxhat - (a[:, None] + xhat * b[:, None]) * inv_h) * inv_std[:, None]
    return dx, dgain, dbias


def l2norm_rows_fwd(x, eps):
    sq = _seq_sum_rows(x * x)
    norms = np.sqrt(sq)
    denom = np.where(norms > eps, norms, eps)
    y = x * (1.0 / denom)[:, None]
    return y, norms


def l2norm_rows_bwd(dy, x, norms, eps):
    guarded = norms > eps
    inv = 1.0 / np.where(guarded, norms, eps)
    s = _seq_sum_rows(x * dy)
    c = np.where(guarded, ((s * inv) * inv) * inv, 0.0)
    return dy * inv[:, None] - x * c[:, None]


def sq_dist_matrix(a, b):
    """Squared euclidean distances between all row pairs, accumulated over
    the feature axis in index order."""
    p, h = a.shape
    q = b.shape[0]
    out = np.zeros((p, q))
    for k in range(h):
        d = a[:, k, None] - b[None, :, k]
        out += d * d
    return out
