"""Dense double-precision matrix primitives with hand-derived gradients.

Every operation comes in a forward / VJP (vector-Jacobian product) pair so
the encoder and loss modules can backpropagate without an autodiff graph.
All reductions run in a deterministic order (see ``_kernels``), so repeated
runs are bit-identical on one platform.

Distance convention: ``cosine_distance(a, b) = 1 - cos(a, b)``, i.e. smaller
means closer, range [0, 2].
"""

import math

import numpy as np

from . import _kernels
from .errors import DomainError, NonFiniteError, ShapeError

EPS_NORM = 1e-12
EPS_LAYER_NORM = 1e-5


def as_matrix(x, name="matrix"):
    """Coerce to a C-contiguous float64 2-D array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def as_vector(x, name="vector"):
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    return a


def check_finite(x, name="array"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return x


# ---------------------------------------------------------------------------
# matrix product

def matmul(a, b):
    """Matrix product; sums run left-to-right over the inner index."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape} x {b.shape})"
        )
    return _kernels.matmul(a, b)


def matmul_vjp(a, b, dc):
    """Gradients of ``matmul(a, b)`` contracted with upstream ``dc``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    dc = as_matrix(dc, "dc")
    da = _kernels.matmul(dc, np.ascontiguousarray(b.T))
    db = _kernels.matmul(np.ascontiguousarray(a.T), dc)
    return da, db


# ---------------------------------------------------------------------------
# elementwise nonlinearities (shared between backends: pure ufunc work)

def tanh_elem(m):
    return np.tanh(as_matrix(m, "m"))


def tanh_vjp(y, dy):
    """VJP given the forward output ``y = tanh(x)``."""
    return dy * (1.0 - y * y)


def sigmoid_elem(m):
    """Logistic sigmoid, computed on the overflow-safe branch per sign."""
    m = as_matrix(m, "m")
    out = np.empty_like(m)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    e = np.exp(m[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_vjp(y, dy):
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------------------
# row softmax

def row_softmax(m):
    """Row-wise softmax with per-row max subtraction."""
    m = as_matrix(m, "m")
    if m.shape[1] == 0:
        raise ShapeError("row_softmax: rows must have at least one entry")
    return _kernels.row_softmax_fwd(m)


def row_softmax_vjp(s, ds):
    """VJP given the forward output ``s``."""
    return _kernels.row_softmax_bwd(as_matrix(s, "s"), as_matrix(ds, "ds"))


# ---------------------------------------------------------------------------
# layer normalization

def layer_norm_rows(m, gain, bias, eps=EPS_LAYER_NORM):
    """Per row: subtract mean, divide by sqrt(variance + eps), affine."""
    y, _, _ = layer_norm_rows_fwd(m, gain, bias, eps)
    return y


def layer_norm_rows_fwd(m, gain, bias, eps=EPS_LAYER_NORM):
    """Forward pass returning ``(y, xhat, inv_std)``; the latter two feed
    the VJP."""
    m = as_matrix(m, "m")
    gain = as_vector(gain, "gain")
    bias = as_vector(bias, "bias")
    if gain.shape[0] != m.shape[1] or bias.shape[0] != m.shape[1]:
        raise ShapeError(
            f"layer_norm_rows: gain/bias length {gain.shape[0]}/{bias.shape[0]}"
            f" does not match {m.shape[1]} columns"
        )
    if eps <= 0:
        raise DomainError("layer_norm_rows: eps must be positive")
    return _kernels.layer_norm_fwd(m, gain, bias, eps)


def layer_norm_rows_vjp(dy, xhat, inv_std, gain):
    """Returns ``(dm, dgain, dbias)``."""
    return _kernels.layer_norm_bwd(
        as_matrix(dy, "dy"), as_matrix(xhat, "xhat"),
        as_vector(inv_std, "inv_std"), as_vector(gain, "gain"),
    )


# ---------------------------------------------------------------------------
# row normalization and cosine distances

def l2_normalize_rows(m, eps=EPS_NORM):
    """Divide each row by max(row norm, eps)."""
    y, _ = l2_normalize_rows_fwd(m, eps)
    return y


def l2_normalize_rows_fwd(m, eps=EPS_NORM):
    m = as_matrix(m, "m")
    if eps <= 0:
        raise DomainError("l2_normalize_rows: eps must be positive")
    return _kernels.l2norm_rows_fwd(m, eps)


def l2_normalize_rows_vjp(dy, m, norms, eps=EPS_NORM):
    return _kernels.l2norm_rows_bwd(
        as_matrix(dy, "dy"), as_matrix(m, "m"), as_vector(norms, "norms"), eps
    )


def cosine_distance(a, b):
    """1 - cosine similarity; raises on (near-)zero-norm input."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"cosine_distance: lengths differ ({a.shape[0]} vs {b.shape[0]})")
    an, a_norm = _kernels.l2norm_rows_fwd(a[None, :], EPS_NORM)
    bn, b_norm = _kernels.l2norm_rows_fwd(b[None, :], EPS_NORM)
    if a_norm[0] < EPS_NORM or b_norm[0] < EPS_NORM:
        raise DomainError("cosine_distance: input vector has near-zero norm")
    sim = _kernels.matmul(an, np.ascontiguousarray(bn.T))[0, 0]
    return 1.0 - sim


def cosine_distance_vjp(a, b, dd=1.0):
    """Gradients of ``cosine_distance(a, b)`` scaled by upstream ``dd``."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na < EPS_NORM or nb < EPS_NORM:
        raise DomainError("cosine_distance_vjp: input vector has near-zero norm")
    ah = a / na
    bh = b / nb
    sim = float(np.dot(ah, bh))
    da = dd * (sim * ah - bh) / na
    db = dd * (sim * bh - ah) / nb
    return da, db


def cosine_distance_matrix(a, b, eps=EPS_NORM):
    """All-pairs cosine distances between rows of ``a`` (P x H) and ``b``
    (Q x H). Raises if any row norm falls below ``eps``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"cosine_distance_matrix: feature dims differ ({a.shape[1]} vs {b.shape[1]})"
        )
    an, a_norms = _kernels.l2norm_rows_fwd(a, eps)
    bn, b_norms = _kernels.l2norm_rows_fwd(b, eps)
    if np.any(a_norms < eps) or np.any(b_norms < eps):
        raise DomainError("cosine_distance_matrix: a row has near-zero norm")
    return 1.0 - _kernels.matmul(an, np.ascontiguousarray(bn.T))


def squared_distance_matrix(a, b):
    """All-pairs squared euclidean distances between rows."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"squared_distance_matrix: feature dims differ ({a.shape[1]} vs {b.shape[1]})"
        )
    return _kernels.sq_dist_matrix(a, b)


# ---------------------------------------------------------------------------
# exact column means (permutation-invariant bit for bit)

def mean_rows_exact(m):
    """Mean over rows computed with exact (correctly rounded) summation,
    so the result is invariant under row permutations bit for bit."""
    m = as_matrix(m, "m")
    if m.shape[0] == 0:
        raise ShapeError("mean_rows_exact: need at least one row")
    cols = [math.fsum(m[:, j]) / m.shape[0] for j in range(m.shape[1])]
    return np.array(cols)


def mean_rows_vjp(dmean, num_rows):
    """Spread the mean gradient evenly back over the rows."""
    dmean = as_vector(dmean, "dmean")
    return np.tile(dmean / num_rows, (num_rows, 1))


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, theta, analytic_grad, h=1e-5):
    """Compare ``analytic_grad`` against central differences of ``f``.

    Returns the worst componentwise relative error
    ``|num - ana| / max(1e-8, |num| + |ana|)``. Raises if ``f`` produces a
    non-finite value anywhere on the stencil.
    """
    theta = as_vector(theta, "theta").copy()
    analytic_grad = as_vector(analytic_grad, "analytic_grad")
    if theta.shape != analytic_grad.shape:
        raise ShapeError("finite_diff_check: gradient shape mismatch")
    worst = 0.0
    for i in range(theta.shape[0]):
        orig = theta[i]
        theta[i] = orig + h
        f_plus = float(f(theta))
        theta[i] = orig - h
        f_minus = float(f(theta))
        theta[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(
                f"finite_diff_check: non-finite objective at component {i}"
            )
        num = (f_plus - f_minus) / (2.0 * h)
        ana = analytic_grad[i]
        err = abs(num - ana) / max(1e-8, abs(num) + abs(ana))
        if err > worst:
            worst = err
    return worst
