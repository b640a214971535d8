"""Ranking, diversity and distribution-matching losses with analytic
gradients.

All distances are cosine distances (1 - similarity, smaller is closer).
The main ranking objective is a min-over-pairs triplet hinge: a pair of
instances counts as matched if at least one of the K x K embedding pairs
matches, and the most-violating negative pair acts as a hard negative.
Hinge terms at exactly zero contribute no gradient; argmin ties resolve to
the lexicographically smallest (p, q), so training is deterministic.

Baseline losses: a conventional averaged triplet hinge and a variant that
keeps only statistically extreme violations (|z-score| >= 3), falling back
to the hardest negative per anchor when nothing qualifies.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import numerics as nm
from .errors import DomainError, ShapeError

_EPS_RELATIVE = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights and knobs of the combined objective.

    With ``relative_weights`` the lambdas scale the regularizers relative
    to the current ranking-loss value (the ratio is treated as a constant,
    no gradient flows through it). ``rbf_gamma`` of None selects the
    median-heuristic bandwidth per batch. ``symmetric`` averages each
    ranking loss with its x<->y mirror; switching it off keeps the literal
    one-directional form.
    """

    margin: float = 0.2
    lambda_div: float = 0.1
    lambda_mmd: float = 0.1
    rbf_gamma: float | None = None
    relative_weights: bool = True
    symmetric: bool = True

    def __post_init__(self):
        if self.margin < 0:
            raise DomainError("margin must be >= 0")
        if self.lambda_div < 0 or self.lambda_mmd < 0:
            raise DomainError("loss weights must be >= 0")
        if self.rbf_gamma is not None and self.rbf_gamma <= 0:
            raise DomainError("rbf_gamma must be positive when set")

    def to_dict(self):
        return {
            "margin": self.margin,
            "lambda_div": self.lambda_div,
            "lambda_mmd": self.lambda_mmd,
            "rbf_gamma": self.rbf_gamma,
            "relative_weights": self.relative_weights,
            "symmetric": self.symmetric,
        }


@dataclass
class BatchEmbeddings:
    """One batch of paired outputs: embeddings and locally-guided features
    for both sides, each (N, K, H)."""

    zx: np.ndarray
    zy: np.ndarray
    ux: np.ndarray
    uy: np.ndarray

    def __post_init__(self):
        shape = self.zx.shape
        for name in ("zx", "zy", "ux", "uy"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 3 or arr.shape != shape:
                raise ShapeError(
                    f"{name} must have shape {shape}, got {arr.shape}"
                )
            setattr(self, name, arr)


@dataclass
class LossBundle:
    """Loss values plus gradients with respect to the batch arrays.

    ``total == mil + eff_lambda_div * div + eff_lambda_mmd * mmd`` where the
    effective lambdas are the configured ones, possibly rescaled by the
    relative-weighting rule.
    """

    total: float
    mil: float
    div: float
    mmd: float
    d_zx: np.ndarray
    d_zy: np.ndarray
    d_ux: np.ndarray
    d_uy: np.ndarray


def _normalized_with_norms(flat, what):
    normalized, norms = nm.l2_normalize_rows_fwd(flat)
    if np.any(norms < nm.EPS_NORM):
        raise DomainError(f"{what}: a vector has near-zero norm")
    return normalized, norms


def _distance_matrix(xn, yn):
    return 1.0 - _kernels.matmul(xn, np.ascontiguousarray(yn.T))


def _add_pair_grads(d_left, d_right, left, right, ln, rn, left_norms,
                    right_norms, li, ri, coeff, dist):
    """Accumulate ``coeff * d cosine_distance(left[li], right[ri])`` into the
    gradient buffers. ``dist`` holds the distances of the selected pairs."""
    if li.size == 0:
        return
    sim = (1.0 - dist)[:, None]
    uh = ln[li]
    vh = rn[ri]
    du = coeff[:, None] * (sim * uh - vh) / left_norms[li][:, None]
    dv = coeff[:, None] * (sim * vh - uh) / right_norms[ri][:, None]
    np.add.at(d_left, li, du)
    np.add.at(d_right, ri, dv)


# ---------------------------------------------------------------------------
# min-over-pairs ranking loss

def _min_over_pairs(d4, k):
    """Per (i, j): min over the K x K pair block, with the argmin flattened
    row-major so ties resolve to the smallest (p, q)."""
    n = d4.shape[0]
    flat = np.ascontiguousarray(d4).reshape(n, n, k * k)
    idx = flat.argmin(axis=2)
    dmin = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    return dmin, idx


def _hinge_terms(dmin, margin):
    pos = np.diag(dmin).copy()
    terms = margin + pos[:, None] - dmin
    np.fill_diagonal(terms, 0.0)
    return np.maximum(terms, 0.0), pos


def _directional_mil_grads(terms, dmin, idx, k, scale, d_anchor, d_other,
                           anchor_flat, other_flat, an, on, a_norms, o_norms):
    """Gradient of one direction's hinge sum, scaled by ``scale``."""
    act_i, act_j = np.nonzero(terms > 0.0)
    if act_i.size == 0:
        return
    # positive pair of each anchor i: argmin of the (i, i) block
    pos_idx = idx[act_i, act_i]
    pos_a = act_i * k + pos_idx // k
    pos_o = act_i * k + pos_idx % k
    neg_idx = idx[act_i, act_j]
    neg_a = act_i * k + neg_idx // k
    neg_o = act_j * k + neg_idx % k
    plus = np.full(act_i.shape, scale)
    _add_pair_grads(d_anchor, d_other, anchor_flat, other_flat, an, on,
                    a_norms, o_norms, pos_a, pos_o, plus,
                    dmin[act_i, act_i])
    _add_pair_grads(d_anchor, d_other, anchor_flat, other_flat, an, on,
                    a_norms, o_norms, neg_a, neg_o, -plus,
                    dmin[act_i, act_j])


def mil_triplet_loss(zx, zy, margin, symmetric=True):
    """Min-over-pairs triplet hinge over all ordered pairs i != j,
    normalized by N^2; optionally averaged with its x<->y mirror.

    Returns ``(value, d_zx, d_zy)``.
    """
    if zx.shape != zy.shape or zx.ndim != 3:
        raise ShapeError("zx and zy must both be (N, K, H)")
    n, k, h = zx.shape
    if n < 2:
        raise DomainError("mil_triplet_loss needs at least 2 pairs for negatives")
    flat_x = np.ascontiguousarray(zx.reshape(n * k, h), dtype=np.float64)
    flat_y = np.ascontiguousarray(zy.reshape(n * k, h), dtype=np.float64)
    xn, x_norms = _normalized_with_norms(flat_x, "zx")
    yn, y_norms = _normalized_with_norms(flat_y, "zy")
    dmat = _distance_matrix(xn, yn)
    blocks = dmat.reshape(n, k, n, k)

    d_flat_x = np.zeros_like(flat_x)
    d_flat_y = np.zeros_like(flat_y)
    scale = 1.0 / (2.0 * n * n) if symmetric else 1.0 / (n * n)

    # x-anchored direction: d(zx[i, p], zy[j, q])
    dmin_x, idx_x = _min_over_pairs(blocks.transpose(0, 2, 1, 3), k)
    terms_x, _ = _hinge_terms(dmin_x, margin)
    value = float(np.sum(terms_x)) * scale
    _directional_mil_grads(terms_x, dmin_x, idx_x, k, scale,
                           d_flat_x, d_flat_y, flat_x, flat_y,
                           xn, yn, x_norms, y_norms)
    if symmetric:
        # y-anchored direction: d(zy[i, p], zx[j, q])
        dmin_y, idx_y = _min_over_pairs(np.transpose(blocks, (2, 0, 3, 1)), k)
        terms_y, _ = _hinge_terms(dmin_y, margin)
        value += float(np.sum(terms_y)) * scale
        _directional_mil_grads(terms_y, dmin_y, idx_y, k, scale,
                               d_flat_y, d_flat_x, flat_y, flat_x,
                               yn, xn, y_norms, x_norms)
    return value, d_flat_x.reshape(n, k, h), d_flat_y.reshape(n, k, h)


# ---------------------------------------------------------------------------
# baseline triplet losses on single-vector embeddings

def _triplet_families(phi_x, phi_y, margin):
    """Hinge terms of both triplet families sharing positive pair (i, i):
    family A mismatches the right side (x_i vs y_k), family B the left
    (x_j vs y_i). Diagonals are zeroed."""
    n = phi_x.shape[0]
    xn, x_norms = _normalized_with_norms(phi_x, "phi_x")
    yn, y_norms = _normalized_with_norms(phi_y, "phi_y")
    dmat = _distance_matrix(xn, yn)
    pos = np.diag(dmat).copy()
    terms_a = margin + pos[:, None] - dmat
    terms_b = margin + pos[:, None] - dmat.T
    np.fill_diagonal(terms_a, 0.0)
    np.fill_diagonal(terms_b, 0.0)
    ctx = (dmat, pos, xn, yn, x_norms, y_norms)
    return np.maximum(terms_a, 0.0), np.maximum(terms_b, 0.0), ctx


def _triplet_term_grads(d_px, d_py, phi_x, phi_y, ctx, family, pairs, coeff):
    """Gradients for selected triplet terms: +coeff through the positive
    pair (i, i), -coeff through the negative pair of the family."""
    dmat, pos, xn, yn, x_norms, y_norms = ctx
    i = pairs[:, 0]
    other = pairs[:, 1]
    _add_pair_grads(d_px, d_py, phi_x, phi_y, xn, yn, x_norms, y_norms,
                    i, i, coeff, pos[i])
    if family == "a":
        _add_pair_grads(d_px, d_py, phi_x, phi_y, xn, yn, x_norms, y_norms,
                        i, other, -coeff, dmat[i, other])
    else:
        _add_pair_grads(d_px, d_py, phi_x, phi_y, xn, yn, x_norms, y_norms,
                        other, i, -coeff, dmat[other, i])


def triplet_loss(phi_x, phi_y, margin, symmetric=True):
    """Conventional triplet hinge averaged over all mismatched pairs,
    with the same N^2 normalization and mirroring as the min-over-pairs
    loss (so the two coincide at K=1).

    Returns ``(value, d_phi_x, d_phi_y)``.
    """
    phi_x = nm.as_matrix(phi_x, "phi_x")
    phi_y = nm.as_matrix(phi_y, "phi_y")
    if phi_x.shape != phi_y.shape:
        raise ShapeError("phi_x and phi_y must have equal shapes")
    n = phi_x.shape[0]
    if n < 2:
        raise DomainError("triplet_loss needs at least 2 pairs for negatives")
    terms_a, terms_b, ctx = _triplet_families(phi_x, phi_y, margin)
    scale = 1.0 / (2.0 * n * n) if symmetric else 1.0 / (n * n)
    d_px = np.zeros_like(phi_x)
    d_py = np.zeros_like(phi_y)
    value = float(np.sum(terms_a)) * scale
    ai, ak = np.nonzero(terms_a > 0.0)
    _triplet_term_grads(d_px, d_py, phi_x, phi_y, ctx, "a",
                        np.stack([ai, ak], 1) if ai.size else np.empty((0, 2), int),
                        np.full(ai.shape, scale))
    if symmetric:
        value += float(np.sum(terms_b)) * scale
        bi, bj = np.nonzero(terms_b > 0.0)
        _triplet_term_grads(d_px, d_py, phi_x, phi_y, ctx, "b",
                            np.stack([bi, bj], 1) if bi.size else np.empty((0, 2), int),
                            np.full(bi.shape, scale))
    return value, d_px, d_py


def mined_triplet_loss(phi_x, phi_y, margin):
    """Triplet hinge keeping only statistically extreme terms.

    All hinge terms of both families are z-scored; only terms with
    |z| >= 3 are averaged. With zero spread or no qualifying term, the
    loss falls back to the hardest single negative per anchor.

    Returns ``(value, d_phi_x, d_phi_y)``.
    """
    phi_x = nm.as_matrix(phi_x, "phi_x")
    phi_y = nm.as_matrix(phi_y, "phi_y")
    if phi_x.shape != phi_y.shape:
        raise ShapeError("phi_x and phi_y must have equal shapes")
    n = phi_x.shape[0]
    if n < 4:
        raise DomainError("mined_triplet_loss needs at least 4 pairs for z-scores")
    terms_a, terms_b, ctx = _triplet_families(phi_x, phi_y, margin)
    off = ~np.eye(n, dtype=bool)
    # fixed flattening order: family A row-major, then family B row-major
    flat_terms = np.concatenate([terms_a[off], terms_b[off]])
    pairs_a = np.argwhere(off)
    pairs = np.concatenate([pairs_a, pairs_a])
    families = np.array(["a"] * pairs_a.shape[0] + ["b"] * pairs_a.shape[0])

    d_px = np.zeros_like(phi_x)
    d_py = np.zeros_like(phi_y)
    sd = float(np.std(flat_terms))
    keep = np.zeros(flat_terms.shape, dtype=bool)
    if sd > 0.0:
        z = (flat_terms - float(np.mean(flat_terms))) / sd
        keep = np.abs(z) >= 3.0
    if keep.any():
        kept = np.nonzero(keep)[0]
        value = float(np.mean(flat_terms[kept]))
        coeff_val = 1.0 / kept.size
        grad_sel = kept[flat_terms[kept] > 0.0]
    else:
        # hardest negative per anchor: scan family A then family B terms
        per_anchor = np.concatenate(
            [terms_a[off].reshape(n, n - 1), terms_b[off].reshape(n, n - 1)],
            axis=1,
        )
        hardest = per_anchor.argmax(axis=1)
        value = float(np.mean(per_anchor[np.arange(n), hardest]))
        coeff_val = 1.0 / n
        # map per-anchor column back into the flat term order
        fam_b = hardest >= (n - 1)
        col = np.where(fam_b, hardest - (n - 1), hardest)
        flat_pos = np.arange(n) * (n - 1) + col + np.where(fam_b, n * (n - 1), 0)
        grad_sel = flat_pos[per_anchor[np.arange(n), hardest] > 0.0]
    for family in ("a", "b"):
        sel = grad_sel[families[grad_sel] == family]
        if sel.size:
            _triplet_term_grads(
                d_px, d_py, phi_x, phi_y, ctx, family, pairs[sel],
                np.full(sel.shape, coeff_val),
            )
    return value, d_px, d_py


# ---------------------------------------------------------------------------
# diversity penalty on locally-guided features

def diversity_loss(ux, uy):
    """Redundancy penalty: Frobenius distance between the Gram matrix of
    the row-normalized guided features and the identity, summed over both
    sides, averaged over the batch, scaled by 1/K^2.

    Returns ``(value, d_ux, d_uy)``.
    """
    if ux.shape != uy.shape or ux.ndim != 3:
        raise ShapeError("ux and uy must both be (N, K, H)")
    n, k, _ = ux.shape
    eye = np.eye(k)
    scale = 1.0 / (n * k * k)
    value = 0.0
    grads = (np.zeros_like(ux), np.zeros_like(uy))
    for side, d_side in zip((ux, uy), grads):
        for i in range(n):
            u = np.ascontiguousarray(side[i], dtype=np.float64)
            un, norms = nm.l2_normalize_rows_fwd(u)
            gram = _kernels.matmul(un, np.ascontiguousarray(un.T))
            resid = gram - eye
            fro = float(np.sqrt(np.sum(resid * resid)))
            value += fro
            if fro > 0.0:
                # d||G - I||_F / dG = (G - I)/||G - I||_F and G is symmetric
                d_un = 2.0 * (scale / fro) * _kernels.matmul(resid, un)
                d_side[i] = nm.l2_normalize_rows_vjp(d_un, u, norms)
    return value * scale, grads[0], grads[1]


# ---------------------------------------------------------------------------
# distribution discrepancy between the two embedding clouds

def median_bandwidth(zx, zy):
    """Median heuristic: gamma = 1 / (2 * median^2) over pairwise distances
    of the pooled embeddings."""
    h = zx.shape[-1]
    pooled = np.ascontiguousarray(
        np.concatenate([zx.reshape(-1, h), zy.reshape(-1, h)]), dtype=np.float64
    )
    sq = nm.squared_distance_matrix(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    med_sq = float(np.median(sq[iu]))
    if med_sq <= _EPS_RELATIVE:
        return 1.0
    return 1.0 / (2.0 * med_sq)


def mmd_loss(zx, zy, gamma):
    """Squared maximum mean discrepancy (V-statistic over all pairs) with
    an RBF kernel exp(-gamma ||a - b||^2).

    Returns ``(value, d_zx, d_zy)``; the value is exactly 0 for identical
    inputs and never negative.
    """
    if zx.shape != zy.shape:
        raise ShapeError("zx and zy must have equal shapes")
    if gamma <= 0:
        raise DomainError("gamma must be positive")
    shape = zx.shape
    h = shape[-1]
    x = np.ascontiguousarray(zx.reshape(-1, h), dtype=np.float64)
    y = np.ascontiguousarray(zy.reshape(-1, h), dtype=np.float64)
    m = x.shape[0]
    kxx = np.exp(-gamma * _kernels.sq_dist_matrix(x, x))
    kxy = np.exp(-gamma * _kernels.sq_dist_matrix(x, y))
    kyy = np.exp(-gamma * _kernels.sq_dist_matrix(y, y))
    denom = float(m) * float(m)
    raw = float(np.sum(kxx)) - 2.0 * float(np.sum(kxy)) + float(np.sum(kyy))
    value = max(0.0, raw / denom)

    coef = 4.0 * gamma / denom
    rx = np.sum(kxx, axis=1)
    ry = np.sum(kyy, axis=1)
    rxy = np.sum(kxy, axis=1)
    ryx = np.sum(kxy, axis=0)
    dx = coef * (
        (rxy[:, None] * x - _kernels.matmul(kxy, y))
        - (rx[:, None] * x - _kernels.matmul(kxx, x))
    )
    dy = coef * (
        (ryx[:, None] * y - _kernels.matmul(np.ascontiguousarray(kxy.T), x))
        - (ry[:, None] * y - _kernels.matmul(kyy, y))
    )
    return value, dx.reshape(shape), dy.reshape(shape)


# ---------------------------------------------------------------------------
# combined objective

def combined_loss(batch, weights, objective="mil"):
    """Ranking term plus weighted diversity and discrepancy regularizers.

    ``objective`` selects the ranking term: ``"mil"`` (min-over-pairs) or
    ``"concat_triplet"`` (conventional triplet on the K embeddings
    concatenated per instance — the no-MIL ablation). Under relative
    weighting each lambda is multiplied by ranking/regularizer value ratio,
    held constant for the gradient.
    """
    n, k, h = batch.zx.shape
    if objective == "mil":
        base, d_zx, d_zy = mil_triplet_loss(
            batch.zx, batch.zy, weights.margin, weights.symmetric
        )
    elif objective == "concat_triplet":
        base, d_fx, d_fy = triplet_loss(
            batch.zx.reshape(n, k * h), batch.zy.reshape(n, k * h),
            weights.margin, weights.symmetric,
        )
        d_zx = d_fx.reshape(n, k, h)
        d_zy = d_fy.reshape(n, k, h)
    else:
        raise DomainError(f"unknown objective {objective!r}")

    div, d_ux, d_uy = diversity_loss(batch.ux, batch.uy)
    gamma = weights.rbf_gamma
    if gamma is None:
        gamma = median_bandwidth(batch.zx, batch.zy)
    mmd, d_zx_m, d_zy_m = mmd_loss(batch.zx, batch.zy, gamma)

    if weights.relative_weights:
        lam_div = weights.lambda_div * base / max(div, _EPS_RELATIVE)
        lam_mmd = weights.lambda_mmd * base / max(mmd, _EPS_RELATIVE)
    else:
        lam_div = weights.lambda_div
        lam_mmd = weights.lambda_mmd

    total = base + lam_div * div + lam_mmd * mmd
    return LossBundle(
        total=total, mil=base, div=div, mmd=mmd,
        d_zx=d_zx + lam_mmd * d_zx_m,
        d_zy=d_zy + lam_mmd * d_zy_m,
        d_ux=lam_div * d_ux,
        d_uy=lam_div * d_uy,
    )
