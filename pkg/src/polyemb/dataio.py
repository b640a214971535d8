"""Feature container, dataset handling and the synthetic pair generator.

The PVSF container is a small little-endian binary format for per-instance
feature matrices:

    magic "PVSF" | version u32 | count u32
    per record: id_len u32 | id (utf-8) | B u32 | D u32 | B*D float64

Round trips are bit-exact. Every declared size is validated against the
remaining payload before anything is allocated, and parse failures carry
the byte offset and record index.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FeatureFileError, ShapeError

MAGIC = b"PVSF"
VERSION = 1
SPLIT_LABELS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# container

def write_features(path, instances):
    """Write (id, B x D float64 array) records to ``path``."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(instances))]
    for id_, arr in instances:
        a = np.ascontiguousarray(arr, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError(f"instance {id_!r}: features must be 2-D")
        encoded = str(id_).encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", a.shape[0], a.shape[1]))
        chunks.append(a.astype("<f8", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_features(path):
    """Read records back; returns a list of (id, array) pairs."""
    data = Path(path).read_bytes()
    offset = 0

    def take(n, what, record=None):
        nonlocal offset
        if offset + n > len(data):
            raise FeatureFileError(f"truncated while reading {what}", offset, record)
        piece = data[offset:offset + n]
        offset += n
        return piece

    if take(4, "magic") != MAGIC:
        raise FeatureFileError("bad magic (not a PVSF file)", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FeatureFileError(f"unsupported version {version}", 4)
    (count,) = struct.unpack("<I", take(4, "instance count"))

    instances = []
    for rec in range(count):
        (id_len,) = struct.unpack("<I", take(4, "id length", rec))
        if id_len > len(data) - offset:
            raise FeatureFileError(
                f"declared id length {id_len} exceeds remaining payload",
                offset, rec,
            )
        try:
            id_ = take(id_len, "id", rec).decode("utf-8")
        except UnicodeDecodeError:
            raise FeatureFileError("id is not valid utf-8", offset - id_len, rec)
        rows, cols = struct.unpack("<II", take(8, "shape", rec))
        payload = rows * cols * 8
        if payload > len(data) - offset:
            raise FeatureFileError(
                f"declared payload {rows}x{cols} exceeds remaining bytes",
                offset, rec,
            )
        arr = np.frombuffer(
            data, dtype="<f8", count=rows * cols, offset=offset
        ).reshape(rows, cols).copy()
        offset += payload
        instances.append((id_, arr))
    if offset != len(data):
        raise FeatureFileError(
            f"{len(data) - offset} trailing bytes after last record",
            offset, count - 1 if count else None,
        )
    return instances


# ---------------------------------------------------------------------------
# paired datasets

@dataclass
class PairedDataset:
    """Two aligned instance lists (the i-th x pairs with the i-th y),
    optional split labels and generator annotations."""

    x: list
    y: list
    split: list | None = None
    annotations: list | None = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ShapeError("x and y sides must have equal instance counts")
        if self.split is not None:
            if len(self.split) != len(self.x):
                raise ShapeError("one split label per pair required")
            bad = sorted({s for s in self.split} - set(SPLIT_LABELS))
            if bad:
                raise ConfigError(f"unknown split labels: {bad}")
        if self.annotations is not None and len(self.annotations) != len(self.x):
            raise ShapeError("one annotation per pair required")

    @property
    def size(self):
        return len(self.x)

    def indices(self, label):
        """Pair indices in a split ('all' selects every pair)."""
        if label == "all":
            return list(range(self.size))
        if label not in SPLIT_LABELS:
            raise ConfigError(f"unknown split label {label!r}")
        if self.split is None:
            raise ConfigError("dataset has no split labels")
        return [i for i, s in enumerate(self.split) if s == label]


def save_dataset(directory, dataset):
    """Write x.pvsf, y.pvsf and manifest.json into ``directory``."""
    directory = Path(directory)
    write_features(directory / "x.pvsf", dataset.x)
    write_features(directory / "y.pvsf", dataset.y)
    pairs = []
    for i in range(dataset.size):
        entry = {"x": dataset.x[i][0], "y": dataset.y[i][0]}
        if dataset.split is not None:
            entry["split"] = dataset.split[i]
        if dataset.annotations is not None:
            entry.update(dataset.annotations[i])
        pairs.append(entry)
    manifest = {"kind": "polyemb-dataset", "version": 1, "pairs": pairs}
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n"
    )


def load_dataset(directory):
    directory = Path(directory)
    x = read_features(directory / "x.pvsf")
    y = read_features(directory / "y.pvsf")
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("kind") != "polyemb-dataset":
        raise ConfigError(f"{directory}/manifest.json is not a dataset manifest")
    pairs = manifest["pairs"]
    if len(pairs) != len(x) or [p["x"] for p in pairs] != [i for i, _ in x]:
        raise ConfigError("manifest does not match x.pvsf contents")
    if [p["y"] for p in pairs] != [i for i, _ in y]:
        raise ConfigError("manifest does not match y.pvsf contents")
    split = [p["split"] for p in pairs] if pairs and "split" in pairs[0] else None
    annotations = None
    if pairs and "x_senses" in pairs[0]:
        annotations = [
            {k: p[k] for k in ("x_senses", "y_senses", "shared")} for p in pairs
        ]
    return PairedDataset(x=x, y=y, split=split, annotations=annotations)


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SynthConfig:
    """Synthetic paired data with planted multi-sense structure.

    Each pair draws a sense set per side with a controlled overlap; the
    shared senses use one noise draw for both sides (that shared token is
    what makes the specific partner identifiable), while non-shared senses
    and distractor rows get independent noise from concepts unused by the
    pair.
    """

    concepts: int = 10
    feat_dim: int = 16
    senses_min: int = 2
    senses_max: int = 3
    shared_min: int = 1
    shared_max: int = 1
    distractors: int = 2
    noise: float = 0.1
    pairs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.concepts < 1 or self.feat_dim < 1:
            raise ConfigError("concepts and feat_dim must be >= 1")
        if not (1 <= self.senses_min <= self.senses_max <= self.concepts):
            raise ConfigError(
                "need 1 <= senses_min <= senses_max <= concepts, got "
                f"senses_min={self.senses_min}, senses_max={self.senses_max}, "
                f"concepts={self.concepts}"
            )
        if not (1 <= self.shared_min <= self.shared_max):
            raise ConfigError(
                f"need 1 <= shared_min <= shared_max, got shared_min="
                f"{self.shared_min}, shared_max={self.shared_max}"
            )
        if self.shared_max > self.senses_min:
            raise ConfigError(
                f"infeasible overlap: shared_max={self.shared_max} exceeds "
                f"senses_min={self.senses_min}"
            )
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.distractors < 0 or self.pairs < 0:
            raise ConfigError("distractors and pairs must be >= 0")
        worst_used = 2 * self.senses_max - self.shared_min
        if self.concepts - worst_used < self.distractors:
            raise ConfigError(
                f"distractors={self.distractors} cannot be drawn from unused "
                f"concepts: up to {worst_used} of {self.concepts} concepts "
                "may be senses of a pair"
            )

    def to_dict(self):
        return {
            "concepts": self.concepts, "feat_dim": self.feat_dim,
            "senses_min": self.senses_min, "senses_max": self.senses_max,
            "shared_min": self.shared_min, "shared_max": self.shared_max,
            "distractors": self.distractors, "noise": self.noise,
            "pairs": self.pairs, "seed": self.seed,
        }


def generate_synthetic(cfg):
    """Generate a paired dataset; a pure function of the config."""
    rng = np.random.default_rng(cfg.seed)
    protos = rng.standard_normal((cfg.concepts, cfg.feat_dim))
    protos /= np.sqrt(np.sum(protos * protos, axis=1))[:, None]

    x_side, y_side, annotations = [], [], []
    all_concepts = np.arange(cfg.concepts)
    for i in range(cfg.pairs):
        nx = int(rng.integers(cfg.senses_min, cfg.senses_max + 1))
        ny = int(rng.integers(cfg.senses_min, cfg.senses_max + 1))
        nshared = int(rng.integers(cfg.shared_min, cfg.shared_max + 1))
        shared = rng.choice(all_concepts, size=nshared, replace=False)
        pool = np.setdiff1d(all_concepts, shared)
        extra_x = rng.choice(pool, size=nx - nshared, replace=False)
        pool = np.setdiff1d(pool, extra_x)
        extra_y = rng.choice(pool, size=ny - nshared, replace=False)
        unused = np.setdiff1d(pool, extra_y)
        dis_x = rng.choice(unused, size=cfg.distractors, replace=False)
        dis_y = rng.choice(unused, size=cfg.distractors, replace=False)

        shared_tokens = protos[shared] + cfg.noise * rng.standard_normal(
            (nshared, cfg.feat_dim)
        )
        rows_x = np.concatenate([
            shared_tokens,
            protos[extra_x] + cfg.noise * rng.standard_normal(
                (len(extra_x), cfg.feat_dim)),
            protos[dis_x] + cfg.noise * rng.standard_normal(
                (len(dis_x), cfg.feat_dim)),
        ])
        rows_y = np.concatenate([
            shared_tokens,
            protos[extra_y] + cfg.noise * rng.standard_normal(
                (len(extra_y), cfg.feat_dim)),
            protos[dis_y] + cfg.noise * rng.standard_normal(
                (len(dis_y), cfg.feat_dim)),
        ])
        x_side.append((f"x{i:06d}", rows_x))
        y_side.append((f"y{i:06d}", rows_y))
        annotations.append({
            "x_senses": sorted(int(c) for c in np.concatenate([shared, extra_x])),
            "y_senses": sorted(int(c) for c in np.concatenate([shared, extra_y])),
            "shared": sorted(int(c) for c in shared),
        })
    return PairedDataset(x=x_side, y=y_side, annotations=annotations)


def split(dataset, fractions, seed):
    """Assign train/val/test labels by a seeded permutation followed by
    contiguous slicing. A nonzero fraction must produce a nonempty split."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != len(SPLIT_LABELS):
        raise ConfigError(f"need {len(SPLIT_LABELS)} fractions (train/val/test)")
    if any(f < 0 for f in fractions):
        raise ConfigError("fractions must be >= 0")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    n = dataset.size
    perm = np.random.default_rng(seed).permutation(n)
    bounds = [int(round(n * c)) for c in np.cumsum(fractions)]
    bounds[-1] = n
    for j in range(1, len(bounds)):
        bounds[j] = max(bounds[j], bounds[j - 1])
    labels = [None] * n
    start = 0
    for label, stop, frac in zip(SPLIT_LABELS, bounds, fractions):
        size = stop - start
        if frac > 0 and size == 0:
            raise ConfigError(
                f"fraction {frac} for split {label!r} produced an empty split"
            )
        for idx in perm[start:stop]:
            labels[idx] = label
        start = stop
    return PairedDataset(
        x=dataset.x, y=dataset.y, split=labels, annotations=dataset.annotations
    )
