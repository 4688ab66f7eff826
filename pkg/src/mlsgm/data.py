"""Deterministic ingestion and persistence.

Three on-disk formats, all bit-exact:

  * tensor files: little-endian, magic "MLSG", u32 version (=1), u32 ndim,
    ndim x u64 extents, then row-major float32 payload;
  * manifests: JSON lines; line 1 is a head object {"categories": [...],
    "embeddings": <path or "synthetic">}, every following line one record
    {"id": str, "features": relative path, "labels": [+1|-1|0, ...]};
  * embeddings: text, one "name v1 ... vE" line per category, constant E.

Label protocols (partial-label dropping, few-shot splits) and the synthetic
dataset generator consume a seeded SplitMix64 stream in the documented
order, so identical seeds give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import SplitMix64

TENSOR_MAGIC = b"MLSG"
TENSOR_VERSION = 1
_MAX_NDIM = 8
_MAX_ELEMENTS = 1 << 32


class TensorFormatError(ValueError):
    """Malformed tensor file: bad magic, truncated payload, or dim overflow."""


class ManifestError(ValueError):
    """Malformed or inconsistent manifest."""


class FewShotSplitError(ValueError):
    """A novel class lacks the positives required by the split."""


# ------------------------------------------------------------- tensor files

def save_tensor(t: np.ndarray, path) -> None:
    """Write `t` as float32 in the MLSG container."""
    t = np.ascontiguousarray(t, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", TENSOR_VERSION, t.ndim))
        f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        f.write(t.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read an MLSG tensor; returns float64 in memory (storage is float32)."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if ndim > _MAX_NDIM:
        raise TensorFormatError(f"{path}: dim overflow ({ndim} dims)")
    header_end = 12 + 8 * ndim
    if len(blob) < header_end:
        raise TensorFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 12)
    if any(s < 1 for s in shape):
        raise TensorFormatError(f"{path}: non-positive extent in {shape}")
    count = 1
    for s in shape:
        count *= s
        if count > _MAX_ELEMENTS:
            raise TensorFormatError(f"{path}: dim overflow ({shape})")
    expected = header_end + 4 * count
    if len(blob) < expected:
        raise TensorFormatError(f"{path}: truncated payload "
                                f"({len(blob) - header_end} of {4 * count} bytes)")
    if len(blob) > expected:
        raise TensorFormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=header_end)
    return data.astype(np.float64).reshape(shape)


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestRecord:
    id: str
    feature_path: str
    labels: np.ndarray  # (C,) int, values in {+1, -1, 0}


@dataclass
class Manifest:
    categories: list[str]
    embedding_source: str  # path relative to root, or "synthetic"
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def labels_matrix(self) -> np.ndarray:
        return np.array([r.labels for r in self.records], dtype=int)

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        head = {"categories": manifest.categories,
                "embeddings": manifest.embedding_source}
        f.write(json.dumps(head, sort_keys=True) + "\n")
        for r in manifest.records:
            line = {"id": r.id, "features": r.feature_path,
                    "labels": [int(v) for v in r.labels]}
            f.write(json.dumps(line, sort_keys=True) + "\n")


def load_manifest(path, check_features: bool = True) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:1: bad head object: {e}") from e
    if not isinstance(head.get("categories"), list) or "embeddings" not in head:
        raise ManifestError(f"{path}:1: head needs 'categories' and 'embeddings'")
    c = len(head["categories"])
    records, seen = [], set()
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{ln}: bad record: {e}") from e
        rid = obj.get("id")
        labels = np.asarray(obj.get("labels", []), dtype=int)
        if rid is None or "features" not in obj:
            raise ManifestError(f"{path}:{ln}: record needs 'id' and 'features'")
        if rid in seen:
            raise ManifestError(f"{path}:{ln}: duplicate id {rid!r}")
        seen.add(rid)
        if labels.shape != (c,):
            raise ManifestError(f"{path}:{ln}: labels must have length {c}")
        if not np.isin(labels, (-1, 0, 1)).all():
            raise ManifestError(f"{path}:{ln}: labels must be +1, -1 or 0")
        records.append(ManifestRecord(id=rid, feature_path=obj["features"], labels=labels))
    manifest = Manifest(categories=list(head["categories"]),
                        embedding_source=head["embeddings"],
                        records=records, root=path.parent)
    if check_features:
        for r in manifest.records:
            if not manifest.resolve(r.feature_path).exists():
                raise ManifestError(f"{path}: feature file missing for {r.id!r}: {r.feature_path}")
    return manifest


# --------------------------------------------------------------- embeddings

def save_embeddings(names: list[str], vectors: np.ndarray, path) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as f:
        for name, row in zip(names, vectors):
            f.write(name + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path, categories: list[str]) -> np.ndarray:
    """Vectors for `categories`, in that order, from a GloVe-style text file."""
    table: dict[str, np.ndarray] = {}
    width = None
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split()
        name, vals = parts[0], parts[1:]
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ManifestError(f"{path}:{ln}: inconsistent embedding width")
        try:
            table[name] = np.array([float(v) for v in vals])
        except ValueError as e:
            raise ManifestError(f"{path}:{ln}: bad number: {e}") from e
    missing = [c for c in categories if c not in table]
    if missing:
        raise ManifestError(f"{path}: no embedding for categories {missing}")
    return np.stack([table[c] for c in categories])


def synthesize_embeddings(num_classes: int, embed_dim: int, seed: int) -> np.ndarray:
    """Seeded unit vectors; per class: embed_dim uniform(-1,1) draws, normalized."""
    gen = SplitMix64(seed)
    rows = []
    for _ in range(num_classes):
        v = gen.fill_uniform((embed_dim,), -1.0, 1.0)
        n = np.linalg.norm(v)
        rows.append(v / n if n > 0 else v)
    return np.stack(rows)


# ----------------------------------------------------------- label dropping

def drop_labels(manifest: Manifest, known_fraction: float, seed: int) -> Manifest:
    """Independently keep each (record, class) cell with probability
    `known_fraction`; dropped cells become 0 (unknown).

    Draw order is one uniform per cell, records in manifest order, classes
    ascending, so a seed pins the exact output. Requires a fully labelled
    manifest.
    """
    if not 0.0 < known_fraction <= 1.0:
        raise ValueError(f"known_fraction must lie in (0, 1], got {known_fraction}")
    gen = SplitMix64(seed)
    out = []
    for r in manifest.records:
        if np.any(r.labels == 0):
            raise ManifestError(f"drop_labels needs full labels; record {r.id!r} has unknowns")
        kept = r.labels.copy()
        for c in range(len(kept)):
            if gen.next_float() >= known_fraction:
                kept[c] = 0
        out.append(replace(r, labels=kept))
    return replace(manifest, records=out)


# ------------------------------------------------------------ few-shot split

def fewshot_split(manifest: Manifest, base_classes, novel_classes, k: int,
                  seed: int) -> tuple[Manifest, Manifest, Manifest]:
    """(base_set, novel_support, novel_test).

    base_set: every record, label columns restricted to the base classes.
    novel_support: per novel class (in the given order), a seeded shuffle of
    its positive records and the first k; supports are deduplicated across
    classes. K=1 picks a prefix of the K=5 choice for the same seed.
    novel_test: the remaining records with at least one novel positive,
    restricted to the novel columns.
    """
    base_classes = [int(c) for c in base_classes]
    novel_classes = [int(c) for c in novel_classes]
    if set(base_classes) & set(novel_classes):
        raise ValueError("base and novel classes overlap")
    c_total = manifest.num_classes
    for c in base_classes + novel_classes:
        if not 0 <= c < c_total:
            raise ValueError(f"class id {c} outside 0..{c_total - 1}")
    if k < 1:
        raise ValueError("k must be positive")

    gen = SplitMix64(seed)
    support_idx: list[int] = []
    support_seen: set[int] = set()
    for c in novel_classes:
        positives = [i for i, r in enumerate(manifest.records) if r.labels[c] == 1]
        if len(positives) < k:
            raise FewShotSplitError(
                f"class {manifest.categories[c]!r} has {len(positives)} positives, needs {k}")
        gen.shuffle(positives)
        for i in positives[:k]:
            if i not in support_seen:
                support_seen.add(i)
                support_idx.append(i)

    def restrict(records, cols):
        return [replace(r, labels=r.labels[cols]) for r in records]

    base_set = replace(manifest,
                       categories=[manifest.categories[c] for c in base_classes],
                       records=restrict(manifest.records, base_classes))
    novel_cats = [manifest.categories[c] for c in novel_classes]
    support = replace(manifest, categories=novel_cats,
                      records=restrict([manifest.records[i] for i in support_idx],
                                       novel_classes))
    test_records = [r for i, r in enumerate(manifest.records)
                    if i not in support_seen
                    and any(r.labels[c] == 1 for c in novel_classes)]
    novel_test = replace(manifest, categories=novel_cats,
                         records=restrict(test_records, novel_classes))
    return base_set, support, novel_test


# -------------------------------------------------------- synthetic dataset

def synth_dataset(out_dir, n: int = 16, c: int = 4, d: int = 8, h: int = 4,
                  w: int = 4, seed: int = 0, embed_dim: int = 8) -> Manifest:
    """Write a learnable synthetic dataset and return its manifest.

    Every class gets a planted channel pattern (unit vector over channels)
    and a rectangular spatial blob; each image superimposes the blobs of 1-3
    seeded classes onto uniform noise of amplitude 0.1 (signal amplitude is
    1.0, so the labels are recoverable). Draw order: per-class patterns,
    per-class blobs, then per image its class count, class choice and noise;
    embeddings use an independent stream at seed+1.
    """
    if min(n, c, d, h, w, embed_dim) < 1:
        raise ValueError("all extents must be positive")
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    gen = SplitMix64(seed)

    patterns = []
    for _ in range(c):
        v = gen.fill_uniform((d,), -1.0, 1.0)
        nv = np.linalg.norm(v)
        patterns.append(v / nv if nv > 0 else v)
    blobs = []
    for _ in range(c):
        bh = 1 + min(1, h - 1)
        bw = 1 + min(1, w - 1)
        r0 = gen.next_below(h - bh + 1)
        c0 = gen.next_below(w - bw + 1)
        blobs.append((r0, c0, bh, bw))

    categories = [f"class_{i}" for i in range(c)]
    records = []
    for i in range(n):
        count = 1 + gen.next_below(min(3, c))
        order = list(range(c))
        gen.shuffle(order)
        chosen = sorted(order[:count])
        feat = gen.fill_uniform((d, h, w), -0.1, 0.1)
        for cls in chosen:
            r0, c0, bh, bw = blobs[cls]
            feat[:, r0:r0 + bh, c0:c0 + bw] += patterns[cls][:, None, None]
        rel = f"features/img_{i:04d}.mlsg"
        save_tensor(feat, out_dir / rel)
        labels = np.full(c, -1, dtype=int)
        labels[chosen] = 1
        records.append(ManifestRecord(id=f"img_{i:04d}", feature_path=rel, labels=labels))

    emb = synthesize_embeddings(c, embed_dim, seed + 1)
    save_embeddings(categories, emb, out_dir / "embeddings.txt")
    manifest = Manifest(categories=categories, embedding_source="embeddings.txt",
                        records=records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
