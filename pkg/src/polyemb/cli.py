"""Command-line surface: gen-synth | train | embed | eval.

Configuration is a JSON document with per-command sections; every field
can also be overridden by a flag. Each command writes its fully resolved
configuration next to its outputs, refuses to reuse a non-empty output
directory, and removes partial outputs on failure, so a run directory is
always either complete or absent.
"""

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import dataio, retrieval, trainer
from .encoder import EncoderConfig
from .errors import ConfigError, PolyembError
from .losses import LossWeights

_SYNTH_DEFAULTS = dataio.SynthConfig().to_dict()
_SPLIT_DEFAULTS = {"fractions": [0.8, 0.1, 0.1], "seed": 0}
_ENCODER_DEFAULTS = {"num_heads": 4, "embed_dim": 16,
                     "attn_dim": None, "max_parts": None}
_WEIGHTS_DEFAULTS = LossWeights().to_dict()
_TRAIN_DEFAULTS = {"epochs": 10, "batch_size": 32, "lr": 2e-4,
                   "lr_patience": 5, "seed": 0, "ablation": "full",
                   "grad_clip": 10.0}

_SECTION_DEFAULTS = {
    "synth": _SYNTH_DEFAULTS,
    "split": _SPLIT_DEFAULTS,
    "encoder": _ENCODER_DEFAULTS,
    "weights": _WEIGHTS_DEFAULTS,
    "train": _TRAIN_DEFAULTS,
}


def _parse_bool(text):
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_opt_int(text):
    return None if str(text).lower() in ("none", "null") else int(text)


def _parse_opt_float(text):
    return None if str(text).lower() in ("none", "null") else float(text)


_FLAG_PARSERS = {
    "synth": {name: int for name in _SYNTH_DEFAULTS} | {"noise": float},
    "split": {"fractions": float, "seed": int},
    "encoder": {"num_heads": int, "embed_dim": int,
                "attn_dim": _parse_opt_int, "max_parts": _parse_opt_int},
    "weights": {"margin": float, "lambda_div": float, "lambda_mmd": float,
                "rbf_gamma": _parse_opt_float, "relative_weights": _parse_bool,
                "symmetric": _parse_bool},
    "train": {"epochs": int, "batch_size": int, "lr": float,
              "lr_patience": int, "seed": int, "ablation": str,
              "grad_clip": float},
}


def _add_section_flags(parser, section, prefix=""):
    for field, parse in _FLAG_PARSERS[section].items():
        flag = "--" + (prefix + field).replace("_", "-")
        if field == "fractions":
            parser.add_argument(flag, dest=f"{section}__{field}", type=parse,
                                nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                                default=None, help=f"{section}.{field}")
        else:
            parser.add_argument(flag, dest=f"{section}__{field}", type=parse,
                                default=None, help=f"{section}.{field}")


def _load_config_document(path, allowed_sections):
    if path is None:
        return {}
    try:
        document = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})")
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    for section in document:
        if section not in allowed_sections:
            raise ConfigError(f"config file {path}: unknown section {section!r}")
        if not isinstance(document[section], dict):
            raise ConfigError(f"config file {path}: section {section!r} "
                              "must be an object")
        for key in document[section]:
            if key not in _SECTION_DEFAULTS[section]:
                raise ConfigError(
                    f"config file {path}: unknown key {section}.{key}"
                )
    return document


def _resolve(args, document, sections):
    """defaults <- config file <- command-line flags."""
    resolved = {}
    for section in sections:
        merged = dict(_SECTION_DEFAULTS[section])
        merged.update(document.get(section, {}))
        for field in merged:
            override = getattr(args, f"{section}__{field}", None)
            if override is not None:
                merged[field] = override
        resolved[section] = merged
    return resolved


class _OutputDir:
    """Create the run directory; wipe whatever this run wrote on failure."""

    def __init__(self, path):
        self.path = Path(path)
        self.created = False

    def __enter__(self):
        if self.path.exists():
            if any(self.path.iterdir()):
                raise ConfigError(
                    f"output directory {self.path} exists and is not empty"
                )
        else:
            self.path.mkdir(parents=True)
            self.created = True
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            if self.created:
                shutil.rmtree(self.path, ignore_errors=True)
            else:
                for child in list(self.path.iterdir()):
                    if child.is_dir():
                        shutil.rmtree(child, ignore_errors=True)
                    else:
                        child.unlink(missing_ok=True)
        return False


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands

def _cmd_gen_synth(args):
    document = _load_config_document(args.config, ("synth", "split"))
    resolved = _resolve(args, document, ("synth", "split"))
    cfg = dataio.SynthConfig(**resolved["synth"])
    dataset = dataio.generate_synthetic(cfg)
    dataset = dataio.split(dataset, resolved["split"]["fractions"],
                           resolved["split"]["seed"])
    with _OutputDir(args.out) as out:
        dataio.save_dataset(out, dataset)
        _write_json(out / "resolved_config.json", resolved)
    counts = {label: len(dataset.indices(label)) for label in dataio.SPLIT_LABELS}
    print(f"wrote {dataset.size} pairs to {args.out} (splits: {counts})")
    return 0


def _uniform_feat_dim(side_instances, side):
    dims = {arr.shape[1] for _, arr in side_instances}
    if len(dims) != 1:
        raise ConfigError(f"{side} side has mixed feature dims: {sorted(dims)}")
    return dims.pop()


def _train_config_from(resolved, dataset):
    enc = resolved["encoder"]
    base = dict(enc)
    base_x = EncoderConfig(feat_dim=_uniform_feat_dim(dataset.x, "x"), **base)
    base_y = EncoderConfig(feat_dim=_uniform_feat_dim(dataset.y, "y"), **base)
    weights = LossWeights(**resolved["weights"])
    return trainer.TrainConfig(
        encoder_x=base_x, encoder_y=base_y, weights=weights,
        **resolved["train"],
    )


def _cmd_train(args):
    document = _load_config_document(args.config, ("encoder", "weights", "train"))
    resolved = _resolve(args, document, ("encoder", "weights", "train"))
    dataset = dataio.load_dataset(args.data)
    config = _train_config_from(resolved, dataset)
    result = trainer.train(dataset, config)
    with _OutputDir(args.out) as out:
        trainer.save_checkpoint(out, result)
        with open(out / "train_log.jsonl", "w") as fh:
            for record in result.log:
                fh.write(json.dumps(record) + "\n")
        _write_json(out / "resolved_config.json", resolved)
    status = "diverged" if result.diverged else "done"
    print(f"training {status}: best epoch {result.best_epoch} "
          f"val rsum {result.best_rsum:.2f} -> {args.out}")
    return 0


def _selected_pairs(dataset, label):
    indices = dataset.indices(label)
    if not indices:
        raise ConfigError(f"split {label!r} selects no pairs")
    return indices


def _cmd_embed(args):
    model, _, _ = trainer.load_checkpoint(args.model)
    dataset = dataio.load_dataset(args.data)
    indices = _selected_pairs(dataset, args.split)
    zx = trainer.embed_instances(model, "x", [dataset.x[i][1] for i in indices])
    zy = trainer.embed_instances(model, "y", [dataset.y[i][1] for i in indices])
    with _OutputDir(args.out) as out:
        dataio.write_features(
            out / "embeddings_x.pvsf",
            [(dataset.x[i][0], zx[j]) for j, i in enumerate(indices)],
        )
        dataio.write_features(
            out / "embeddings_y.pvsf",
            [(dataset.y[i][0], zy[j]) for j, i in enumerate(indices)],
        )
        _write_json(out / "embed_config.json", {
            "model": str(args.model), "split": args.split,
            "num_heads": int(zx.shape[1]), "embed_dim": int(zx.shape[2]),
        })
    print(f"embedded {len(indices)} pairs ({args.split}) -> {args.out}")
    return 0


def _stacked(instances, what):
    shapes = {arr.shape for _, arr in instances}
    if len(shapes) != 1:
        raise ConfigError(f"{what}: mixed embedding shapes {sorted(shapes)}")
    return np.stack([arr for _, arr in instances])


def _cmd_eval(args):
    if (args.model is None) == (args.embeddings is None):
        raise ConfigError("eval needs exactly one of --model or --embeddings")
    if args.model and not args.data:
        raise ConfigError("eval with --model also needs --data")
    if args.embeddings:
        emb_dir = Path(args.embeddings)
        x_records = dataio.read_features(emb_dir / "embeddings_x.pvsf")
        y_records = dataio.read_features(emb_dir / "embeddings_y.pvsf")
        if len(x_records) != len(y_records):
            raise ConfigError("embedding files pair different instance counts")
        ids = [id_ for id_, _ in x_records]
        zx = _stacked(x_records, "embeddings_x.pvsf")
        zy = _stacked(y_records, "embeddings_y.pvsf")
    else:
        model, _, _ = trainer.load_checkpoint(args.model)
        dataset = dataio.load_dataset(args.data)
        indices = _selected_pairs(dataset, args.split)
        ids = [dataset.x[i][0] for i in indices]
        zx = trainer.embed_instances(model, "x", [dataset.x[i][1] for i in indices])
        zy = trainer.embed_instances(model, "y", [dataset.y[i][1] for i in indices])
    report = retrieval.evaluate_bidirectional(ids, zx, zy)
    print(retrieval.format_table(report))
    if args.report:
        _write_json(args.report, report.to_dict())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="polyemb",
        description="one-to-many embeddings for cross-modal retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic paired dataset")
    p.add_argument("--config", help="JSON config (sections: synth, split)")
    p.add_argument("--out", required=True, help="output directory")
    _add_section_flags(p, "synth")
    _add_section_flags(p, "split", prefix="split_")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("train", help="train the paired encoders")
    p.add_argument("--config", help="JSON config (sections: encoder, weights, train)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    _add_section_flags(p, "encoder")
    _add_section_flags(p, "weights")
    _add_section_flags(p, "train")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="embed a dataset split with a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test", "all"))
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("eval", help="evaluate retrieval in both directions")
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--embeddings", help="directory written by embed")
    p.add_argument("--data", help="dataset directory (with --model)")
    p.add_argument("--report", help="write the metrics report to this JSON file")
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test", "all"))
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PolyembError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
