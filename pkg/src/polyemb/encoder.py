"""One-to-many instance encoder.

Turns a variable-length set of local feature rows (B x D) into K embedding
vectors (K x H): a K-head attention block picks K weighted combinations of
the local rows, a sigmoid projection turns each into a locally-guided
feature, and each of those is fused with a mean-pooled global feature using
a residual add followed by layer normalization. A ``concat`` fusion variant
(projecting [global, local] instead of adding) is kept for ablations.

Forward and backward passes are hand-derived; ``backward`` accepts two
upstream gradient streams so penalties on the locally-guided features can
bypass the global branch entirely.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, EmptyInstanceError, ShapeError

FUSION_MODES = ("residual", "concat")


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of one encoder.

    ``attn_dim`` defaults to ``feat_dim // 2``; ``max_parts`` of None means
    no cap on the number of local rows per instance.
    """

    num_heads: int
    feat_dim: int
    embed_dim: int
    attn_dim: int | None = None
    max_parts: int | None = None
    fusion: str = "residual"

    def __post_init__(self):
        if self.attn_dim is None:
            object.__setattr__(self, "attn_dim", max(1, self.feat_dim // 2))
        if self.num_heads < 1:
            raise ConfigError("num_heads must be >= 1")
        if self.feat_dim < 1 or self.embed_dim < 1 or self.attn_dim < 1:
            raise ConfigError("feat_dim, embed_dim and attn_dim must be >= 1")
        if self.max_parts is not None and self.max_parts < 1:
            raise ConfigError("max_parts must be >= 1 when set")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}")

    def to_dict(self):
        return {
            "num_heads": self.num_heads,
            "feat_dim": self.feat_dim,
            "embed_dim": self.embed_dim,
            "attn_dim": self.attn_dim,
            "max_parts": self.max_parts,
            "fusion": self.fusion,
        }


@dataclass
class EncoderParams:
    """All trainable tensors of one encoder.

    ``concat_w``/``concat_b`` exist only under ``concat`` fusion.
    """

    attn_hidden_w: np.ndarray  # (A, D)
    attn_head_w: np.ndarray    # (K, A)
    local_w: np.ndarray        # (D, H)
    local_b: np.ndarray        # (H,)
    ln_gain: np.ndarray        # (H,)
    ln_bias: np.ndarray        # (H,)
    global_w: np.ndarray       # (D, H)
    global_b: np.ndarray       # (H,)
    concat_w: np.ndarray | None = None  # (2H, H)
    concat_b: np.ndarray | None = None  # (H,)

    def items(self):
        """(name, array) pairs in a fixed order; skips absent tensors."""
        for name in ("attn_hidden_w", "attn_head_w", "local_w", "local_b",
                     "ln_gain", "ln_bias", "global_w", "global_b",
                     "concat_w", "concat_b"):
            value = getattr(self, name)
            if value is not None:
                yield name, value

    def to_dict(self, prefix=""):
        return {prefix + name: arr for name, arr in self.items()}

    @classmethod
    def from_dict(cls, tensors, prefix=""):
        kwargs = {}
        for name in ("attn_hidden_w", "attn_head_w", "local_w", "local_b",
                     "ln_gain", "ln_bias", "global_w", "global_b",
                     "concat_w", "concat_b"):
            kwargs[name] = tensors.get(prefix + name)
        return cls(**kwargs)


def _glorot(rng, rows, cols, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(rows, cols))


def init_params(config, rng):
    """Symmetric uniform init (+-sqrt(6/(fan_in+fan_out))); biases zero,
    layer-norm gain one."""
    k, d, h, a = (config.num_heads, config.feat_dim, config.embed_dim,
                  config.attn_dim)
    params = EncoderParams(
        attn_hidden_w=_glorot(rng, a, d, d, a),
        attn_head_w=_glorot(rng, k, a, a, k),
        local_w=_glorot(rng, d, h, d, h),
        local_b=np.zeros(h),
        ln_gain=np.ones(h),
        ln_bias=np.zeros(h),
        global_w=_glorot(rng, d, h, d, h),
        global_b=np.zeros(h),
    )
    if config.fusion == "concat":
        params.concat_w = _glorot(rng, 2 * h, h, 2 * h, h)
        params.concat_b = np.zeros(h)
    return params


def zero_grads(config):
    """Gradient container with the same layout as the parameters."""
    k, d, h, a = (config.num_heads, config.feat_dim, config.embed_dim,
                  config.attn_dim)
    grads = EncoderParams(
        attn_hidden_w=np.zeros((a, d)),
        attn_head_w=np.zeros((k, a)),
        local_w=np.zeros((d, h)),
        local_b=np.zeros(h),
        ln_gain=np.zeros(h),
        ln_bias=np.zeros(h),
        global_w=np.zeros((d, h)),
        global_b=np.zeros(h),
    )
    if config.fusion == "concat":
        grads.concat_w = np.zeros((2 * h, h))
        grads.concat_b = np.zeros(h)
    return grads


@dataclass
class EncoderOutput:
    embeddings: np.ndarray   # (K, H) final embeddings
    guided: np.ndarray       # (K, H) locally-guided features, pre-fusion
    attention: np.ndarray    # (K, B) attention maps, rows sum to 1
    global_feat: np.ndarray  # (H,)
    cache: dict = field(repr=False, default_factory=dict)


def _check_instance(feats, config):
    feats = nm.as_matrix(feats, "local features")
    if feats.shape[0] == 0:
        raise EmptyInstanceError("instance has no local feature rows")
    if feats.shape[1] != config.feat_dim:
        raise ShapeError(
            f"instance feature dim {feats.shape[1]} != configured "
            f"{config.feat_dim}"
        )
    if config.max_parts is not None and feats.shape[0] > config.max_parts:
        raise ShapeError(
            f"instance has {feats.shape[0]} rows, max_parts is {config.max_parts}"
        )
    return feats


def global_encode(feats, params, config):
    """Mean local feature row, affinely projected to the embedding space.

    The mean uses exact summation, so row order cannot perturb the result
    even in the last bit.
    """
    feats = _check_instance(feats, config)
    mean = nm.mean_rows_exact(feats)
    return nm.matmul(mean[None, :], params.global_w)[0] + params.global_b


def attention_maps(feats, params, config):
    """K attention rows over the B local features (each row sums to 1)."""
    feats = _check_instance(feats, config)
    pre = nm.matmul(params.attn_hidden_w, np.ascontiguousarray(feats.T))
    return nm.row_softmax(nm.matmul(params.attn_head_w, nm.tanh_elem(pre)))


def guided_features(attn, feats, params):
    """Sigmoid projection of the attention-weighted local features."""
    attended = nm.matmul(attn, feats)
    return nm.sigmoid_elem(
        nm.matmul(attended, params.local_w) + params.local_b[None, :]
    )


def fuse(global_feat, guided, params):
    """Residual fusion: add the global feature to every guided row, then
    layer-normalize. With guided == 0 all K rows collapse to one point."""
    fused_in = global_feat[None, :] + guided
    return nm.layer_norm_rows(fused_in, params.ln_gain, params.ln_bias)


def forward(feats, params, config):
    """Full forward pass; caches every intermediate needed by backward."""
    feats = _check_instance(feats, config)
    mean = nm.mean_rows_exact(feats)
    global_feat = nm.matmul(mean[None, :], params.global_w)[0] + params.global_b

    pre_attn = nm.matmul(params.attn_hidden_w, np.ascontiguousarray(feats.T))
    tanh_out = nm.tanh_elem(pre_attn)
    attn = nm.row_softmax(nm.matmul(params.attn_head_w, tanh_out))
    attended = nm.matmul(attn, feats)
    guided = nm.sigmoid_elem(
        nm.matmul(attended, params.local_w) + params.local_b[None, :]
    )

    cache = {
        "feats": feats,
        "mean": mean,
        "tanh_out": tanh_out,
        "attn": attn,
        "attended": attended,
        "guided": guided,
    }
    if config.fusion == "residual":
        fused_in = global_feat[None, :] + guided
        z, xhat, inv_std = nm.layer_norm_rows_fwd(
            fused_in, params.ln_gain, params.ln_bias
        )
    else:
        tiled = np.tile(global_feat, (config.num_heads, 1))
        concat = np.concatenate([tiled, guided], axis=1)
        pre_ln = nm.matmul(concat, params.concat_w) + params.concat_b[None, :]
        z, xhat, inv_std = nm.layer_norm_rows_fwd(
            pre_ln, params.ln_gain, params.ln_bias
        )
        cache["concat"] = concat
    cache["xhat"] = xhat
    cache["inv_std"] = inv_std
    return EncoderOutput(
        embeddings=z, guided=guided, attention=attn,
        global_feat=global_feat, cache=cache,
    )


def backward(output, d_embeddings, d_guided, params, config):
    """Backward pass through ``forward``.

    ``d_embeddings`` flows through the whole network; ``d_guided`` (the
    gradient of penalties applied directly to the locally-guided features)
    joins below the fusion block and therefore never reaches the global
    projection. Returns ``(param_grads, d_feats)``.
    """
    cache = output.cache
    if "xhat" not in cache:
        raise ShapeError("backward needs the cache from a forward call")
    feats = cache["feats"]
    h = config.embed_dim
    k = config.num_heads
    dz = np.zeros((k, h)) if d_embeddings is None else nm.as_matrix(d_embeddings, "d_embeddings")
    d_up = np.zeros((k, h)) if d_guided is None else nm.as_matrix(d_guided, "d_guided")
    if dz.shape != (k, h) or d_up.shape != (k, h):
        raise ShapeError("upstream gradient shapes do not match the output")

    grads = zero_grads(config)
    dfused, grads.ln_gain, grads.ln_bias = nm.layer_norm_rows_vjp(
        dz, cache["xhat"], cache["inv_std"], params.ln_gain
    )
    if config.fusion == "residual":
        d_global = np.sum(dfused, axis=0)
        d_guided_total = dfused + d_up
    else:
        concat = cache["concat"]
        grads.concat_w = nm.matmul(np.ascontiguousarray(concat.T), dfused)
        grads.concat_b = np.sum(dfused, axis=0)
        dconcat = nm.matmul(dfused, np.ascontiguousarray(params.concat_w.T))
        d_global = np.sum(dconcat[:, :h], axis=0)
        d_guided_total = dconcat[:, h:] + d_up

    # local branch: sigmoid projection of attended features
    dpre_act = nm.sigmoid_vjp(cache["guided"], d_guided_total)
    grads.local_w = nm.matmul(np.ascontiguousarray(cache["attended"].T), dpre_act)
    grads.local_b = np.sum(dpre_act, axis=0)
    dattended = nm.matmul(dpre_act, np.ascontiguousarray(params.local_w.T))

    # attention block
    dattn = nm.matmul(dattended, np.ascontiguousarray(feats.T))
    d_feats = nm.matmul(np.ascontiguousarray(cache["attn"].T), dattended)
    dlogits = nm.row_softmax_vjp(cache["attn"], dattn)
    grads.attn_head_w = nm.matmul(dlogits, np.ascontiguousarray(cache["tanh_out"].T))
    dtanh = nm.matmul(np.ascontiguousarray(params.attn_head_w.T), dlogits)
    dpre_attn = nm.tanh_vjp(cache["tanh_out"], dtanh)
    grads.attn_hidden_w = nm.matmul(dpre_attn, feats)
    d_feats = d_feats + nm.matmul(
        np.ascontiguousarray(dpre_attn.T), params.attn_hidden_w
    )

    # global branch (only the d_embeddings stream reaches it)
    grads.global_w = nm.matmul(
        np.ascontiguousarray(cache["mean"][None, :].T), d_global[None, :]
    )
    grads.global_b = d_global
    dmean = nm.matmul(d_global[None, :], np.ascontiguousarray(params.global_w.T))[0]
    d_feats = d_feats + nm.mean_rows_vjp(dmean, feats.shape[0])
    return grads, d_feats
