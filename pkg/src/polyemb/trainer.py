"""Mini-batch training: AMSGrad updates, learning-rate halving on
stagnation, model selection by validation rsum, and ablation switches.

Everything is a pure function of (dataset, config): shuffling, parameter
init and batching all draw from one seeded generator, so two runs with the
same seed produce byte-identical logs and checkpoints.
"""

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataio, encoder, losses, retrieval
from .errors import ConfigError, NonFiniteGradientError, TrainingError

ABLATIONS = ("full", "no_residual", "no_mil")


class AmsGrad:
    """AMSGrad: Adam with a running elementwise max of the second moment
    (no bias correction)."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.vhat = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        """Apply exactly one update in place. Aborts on non-finite
        gradients, naming the offending parameter and step."""
        self.step_count += 1
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name, self.step_count)
            m, v, vhat = self.m[name], self.v[name], self.vhat[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            np.maximum(vhat, v, out=vhat)
            p -= self.lr * m / (np.sqrt(vhat) + self.eps)

    def state_tensors(self, prefix="opt."):
        out = {}
        for kind, store in (("m", self.m), ("v", self.v), ("vhat", self.vhat)):
            for name, arr in store.items():
                out[f"{prefix}{kind}.{name}"] = arr
        return out

    def snapshot(self):
        return {
            "step_count": self.step_count, "lr": self.lr,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "vhat": {k: v.copy() for k, v in self.vhat.items()},
        }

    def restore(self, snap):
        self.step_count = snap["step_count"]
        self.lr = snap["lr"]
        self.m = {k: v.copy() for k, v in snap["m"].items()}
        self.v = {k: v.copy() for k, v in snap["v"].items()}
        self.vhat = {k: v.copy() for k, v in snap["vhat"].items()}


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass(frozen=True)
class TrainConfig:
    encoder_x: encoder.EncoderConfig
    encoder_y: encoder.EncoderConfig
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-4
    lr_patience: int = 5
    seed: int = 0
    ablation: str = "full"
    grad_clip: float = 10.0
    min_rel_improvement: float = 1e-4
    max_lr_halvings: int = 4

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (negatives needed)")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_patience < 1:
            raise ConfigError("lr_patience must be >= 1")

    def effective_encoder(self, side):
        """Encoder config with fusion mode implied by the ablation."""
        cfg = self.encoder_x if side == "x" else self.encoder_y
        fusion = "concat" if self.ablation == "no_residual" else "residual"
        return replace(cfg, fusion=fusion)

    def to_dict(self):
        return {
            "encoder_x": self.encoder_x.to_dict(),
            "encoder_y": self.encoder_y.to_dict(),
            "weights": self.weights.to_dict(),
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": self.lr, "lr_patience": self.lr_patience,
            "seed": self.seed, "ablation": self.ablation,
            "grad_clip": self.grad_clip,
            "min_rel_improvement": self.min_rel_improvement,
            "max_lr_halvings": self.max_lr_halvings,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder_x"] = encoder.EncoderConfig(**d["encoder_x"])
        d["encoder_y"] = encoder.EncoderConfig(**d["encoder_y"])
        d["weights"] = losses.LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class Model:
    """Trained (or freshly initialized) parameter set for both encoders."""

    config: TrainConfig
    params: dict

    def encoder_config(self, side):
        return self.config.effective_encoder(side)

    def encoder_params(self, side):
        return encoder.EncoderParams.from_dict(self.params, prefix=f"{side}.")

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}


def init_model(config, rng):
    params = {}
    for side in ("x", "y"):
        side_params = encoder.init_params(config.effective_encoder(side), rng)
        params.update(side_params.to_dict(prefix=f"{side}."))
    return Model(config=config, params=params)


def embed_instances(model, side, feature_list):
    """Embeddings (M, K, H) for a list of feature matrices."""
    cfg = model.encoder_config(side)
    params = model.encoder_params(side)
    out = np.empty((len(feature_list), cfg.num_heads, cfg.embed_dim))
    for i, feats in enumerate(feature_list):
        out[i] = encoder.forward(feats, params, cfg).embeddings
    return out


def _forward_batch(model, feats_x, feats_y, indices):
    cfg_x, cfg_y = model.encoder_config("x"), model.encoder_config("y")
    par_x, par_y = model.encoder_params("x"), model.encoder_params("y")
    outs_x = [encoder.forward(feats_x[i], par_x, cfg_x) for i in indices]
    outs_y = [encoder.forward(feats_y[i], par_y, cfg_y) for i in indices]
    batch = losses.BatchEmbeddings(
        zx=np.stack([o.embeddings for o in outs_x]),
        zy=np.stack([o.embeddings for o in outs_y]),
        ux=np.stack([o.guided for o in outs_x]),
        uy=np.stack([o.guided for o in outs_y]),
    )
    return batch, outs_x, outs_y


def _batch_loss(batch, config):
    objective = "concat_triplet" if config.ablation == "no_mil" else "mil"
    return losses.combined_loss(batch, config.weights, objective=objective)


def _batches(indices, batch_size):
    """Contiguous chunks; a trailing chunk of one is dropped (no negatives)."""
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _validation_loss(model, feats_x, feats_y, val_idx, config):
    total = 0.0
    count = 0
    for chunk in _batches(val_idx, config.batch_size):
        batch, _, _ = _forward_batch(model, feats_x, feats_y, chunk)
        total += _batch_loss(batch, config).total
        count += 1
    if count == 0:
        raise TrainingError("validation split has no usable batch")
    return total / count


def _validation_rsum(model, dataset, feats_x, feats_y, val_idx):
    zx = embed_instances(model, "x", [feats_x[i] for i in val_idx])
    zy = embed_instances(model, "y", [feats_y[i] for i in val_idx])
    ids = [dataset.x[i][0] for i in val_idx]
    return retrieval.evaluate_bidirectional(ids, zx, zy)


@dataclass
class TrainResult:
    model: Model                 # parameters of the best-rsum epoch
    log: list
    best_epoch: int
    best_rsum: float
    optimizer: AmsGrad           # state captured at the best epoch
    diverged: bool = False


def train(dataset, config):
    """Train both encoders jointly; returns the checkpoint with the best
    validation rsum plus one structured log record per epoch."""
    if dataset.split is None:
        raise TrainingError("dataset has no split labels")
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if not train_idx:
        raise TrainingError("train split is empty")
    if not val_idx:
        raise TrainingError("val split is empty")
    feats_x = [arr for _, arr in dataset.x]
    feats_y = [arr for _, arr in dataset.y]

    rng = np.random.default_rng(config.seed)
    model = init_model(config, rng)
    opt = AmsGrad(model.params, lr=config.lr)

    best_params = model.copy_params()
    best_opt = opt.snapshot()
    best_rsum = -np.inf
    best_epoch = -1
    best_val_loss = np.inf
    stale_epochs = 0
    halvings = 0
    log = []
    diverged = False

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_idx))
        sums = {"total": 0.0, "mil": 0.0, "div": 0.0, "mmd": 0.0}
        num_batches = 0
        for chunk_ids in _batches(order, config.batch_size):
            chunk = [train_idx[i] for i in chunk_ids]
            batch, outs_x, outs_y = _forward_batch(model, feats_x, feats_y, chunk)
            bundle = _batch_loss(batch, config)
            if not np.isfinite(bundle.total):
                diverged = True
                log.append({"event": "diverged", "epoch": epoch,
                            "step": opt.step_count + 1})
                break
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            for side, outs, dz, du in (
                ("x", outs_x, bundle.d_zx, bundle.d_ux),
                ("y", outs_y, bundle.d_zy, bundle.d_uy),
            ):
                cfg = model.encoder_config(side)
                par = model.encoder_params(side)
                for b, out in enumerate(outs):
                    g, _ = encoder.backward(out, dz[b], du[b], par, cfg)
                    for name, arr in g.items():
                        grads[f"{side}.{name}"] += arr
            clip_global_norm(grads, config.grad_clip)
            opt.step(model.params, grads)
            for key in sums:
                sums[key] += getattr(bundle, key)
            num_batches += 1
        if diverged:
            break
        if num_batches == 0:
            raise TrainingError("train split has no usable batch")

        val_loss = _validation_loss(model, feats_x, feats_y, val_idx, config)
        report = _validation_rsum(model, dataset, feats_x, feats_y, val_idx)
        record = {
            "epoch": epoch,
            "train_loss": sums["total"] / num_batches,
            "train_mil": sums["mil"] / num_batches,
            "train_div": sums["div"] / num_batches,
            "train_mmd": sums["mmd"] / num_batches,
            "lr": opt.lr,
            "val_loss": val_loss,
            "val_rsum": report.rsum,
            "val_r1_x2y": report.x_to_y.r_at[1],
            "val_r1_y2x": report.y_to_x.r_at[1],
        }
        log.append(record)

        if report.rsum > best_rsum:
            best_rsum = report.rsum
            best_epoch = epoch
            best_params = model.copy_params()
            best_opt = opt.snapshot()

        improvement = (best_val_loss - val_loss) / max(abs(best_val_loss), 1e-30)
        if not np.isfinite(best_val_loss) or improvement >= config.min_rel_improvement:
            best_val_loss = val_loss
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.lr_patience and halvings < config.max_lr_halvings:
                opt.lr *= 0.5
                halvings += 1
                stale_epochs = 0
                log.append({"event": "lr_halved", "epoch": epoch, "lr": opt.lr})

    best_model = Model(config=config, params=best_params)
    final_opt = AmsGrad(best_params, lr=config.lr)
    final_opt.restore(best_opt)
    return TrainResult(
        model=best_model, log=log, best_epoch=best_epoch,
        best_rsum=best_rsum, optimizer=final_opt, diverged=diverged,
    )


# ---------------------------------------------------------------------------
# hyperparameter grid search

_GRID_AXES = ("num_heads", "embed_dim", "attn_dim", "margin", "lambda_div",
              "lambda_mmd", "lr", "epochs", "batch_size", "seed", "ablation")


def _apply_axis(config, axis, value):
    if axis in ("num_heads", "embed_dim", "attn_dim"):
        return replace(
            config,
            encoder_x=replace(config.encoder_x, **{axis: value}),
            encoder_y=replace(config.encoder_y, **{axis: value}),
        )
    if axis in ("margin", "lambda_div", "lambda_mmd"):
        return replace(config, weights=replace(config.weights, **{axis: value}))
    return replace(config, **{axis: value})


def grid_search(dataset, base_config, grid):
    """Train every combination in ``grid`` (a dict of axis name -> values)
    and pick the best validation rsum. Returns (best_config, best_result,
    table); the table has one row per combination, in product order."""
    for axis in grid:
        if axis not in _GRID_AXES:
            raise ConfigError(f"unknown grid axis {axis!r} "
                              f"(supported: {', '.join(_GRID_AXES)})")
    axes = list(grid.keys())
    table = []
    best = None
    for combo in itertools.product(*(grid[a] for a in axes)):
        config = base_config
        for axis, value in zip(axes, combo):
            config = _apply_axis(config, axis, value)
        result = train(dataset, config)
        row = dict(zip(axes, combo))
        row["val_rsum"] = result.best_rsum
        row["best_epoch"] = result.best_epoch
        table.append(row)
        if best is None or result.best_rsum > best[1].best_rsum:
            best = (config, result)
    if best is None:
        raise ConfigError("grid is empty")
    return best[0], best[1], table


# ---------------------------------------------------------------------------
# checkpoints (reuses the feature container for tensors)

def save_checkpoint(directory, result):
    """Write checkpoint.pvsf (parameters + optimizer tensors) and
    checkpoint.json (config, optimizer scalars, selection metadata)."""
    from pathlib import Path
    import json

    directory = Path(directory)
    model, opt = result.model, result.optimizer
    tensors = dict(model.params)
    tensors.update(opt.state_tensors())
    records = []
    shapes = {}
    for name in sorted(tensors):
        arr = tensors[name]
        shapes[name] = list(arr.shape)
        records.append((name, arr if arr.ndim == 2 else arr[None, :]))
    dataio.write_features(directory / "checkpoint.pvsf", records)
    manifest = {
        "kind": "polyemb-checkpoint",
        "version": 1,
        "train_config": model.config.to_dict(),
        "optimizer": {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "step_count": opt.step_count,
        },
        "best_epoch": result.best_epoch,
        "best_rsum": result.best_rsum,
        "diverged": result.diverged,
        "tensor_shapes": shapes,
    }
    (directory / "checkpoint.json").write_text(
        json.dumps(manifest, indent=2) + "\n"
    )


def load_checkpoint(directory):
    """Read back a checkpoint; returns (Model, AmsGrad, manifest)."""
    from pathlib import Path
    import json

    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text())
    if manifest.get("kind") != "polyemb-checkpoint":
        raise ConfigError(f"{directory}/checkpoint.json is not a checkpoint")
    config = TrainConfig.from_dict(manifest["train_config"])
    shapes = manifest["tensor_shapes"]
    tensors = {}
    for name, arr in dataio.read_features(directory / "checkpoint.pvsf"):
        shape = shapes.get(name)
        if shape is None:
            raise ConfigError(f"checkpoint tensor {name!r} missing from manifest")
        tensors[name] = arr.reshape(shape)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model = Model(config=config, params=params)
    opt_info = manifest["optimizer"]
    opt = AmsGrad(params, lr=opt_info["lr"], beta1=opt_info["beta1"],
                  beta2=opt_info["beta2"], eps=opt_info["eps"])
    opt.step_count = opt_info["step_count"]
    for kind, store in (("m", opt.m), ("v", opt.v), ("vhat", opt.vhat)):
        for name in params:
            store[name] = tensors[f"opt.{kind}.{name}"]
    return model, opt, manifest
