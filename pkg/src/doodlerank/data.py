"""Corpus manifests, zero-shot splits, class word vectors, image loading,
and semantic hard-negative triplet sampling.

File formats (all UTF-8 text):
  manifest   TSV with header ``modality<TAB>id<TAB>path<TAB>class``,
             modality in {photo, sketch}; paths relative to the manifest.
  split      TSV with header ``class<TAB>partition``, partition in
             {seen, unseen}.
  vectors    word2vec text format: ``token v1 ... vD`` space-separated,
             optional leading ``count dim`` header line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SEMANTIC_DIM = 300


class ManifestError(ValueError):
    """Manifest file is malformed."""


class UnknownModalityError(ManifestError):
    """A record's modality tag is neither 'photo' nor 'sketch'."""


class DuplicateIdError(ManifestError):
    """Two records of the same modality share an id."""


class MissingSemanticsError(KeyError):
    """A class has no resolvable word vector."""


class SplitError(ValueError):
    """Split construction or validation failed."""


@dataclass(frozen=True)
class Record:
    id: str
    path: Path
    cls: str


@dataclass(frozen=True)
class Corpus:
    photos: tuple[Record, ...]
    sketches: tuple[Record, ...]
    classes: tuple[str, ...]  # ordered by first appearance

    @staticmethod
    def from_records(photos, sketches) -> "Corpus":
        classes: list[str] = []
        seen = set()
        for rec in list(photos) + list(sketches):
            if rec.cls not in seen:
                seen.add(rec.cls)
                classes.append(rec.cls)
        return Corpus(tuple(photos), tuple(sketches), tuple(classes))

    def by_class(self, modality: str) -> dict[str, list[Record]]:
        records = self.photos if modality == "photo" else self.sketches
        out: dict[str, list[Record]] = {}
        for rec in records:
            out.setdefault(rec.cls, []).append(rec)
        return out


MANIFEST_HEADER = "modality\tid\tpath\tclass"


def load_manifest(path) -> Corpus:
    """Parse a manifest TSV; record order follows file order."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].rstrip("\n") != MANIFEST_HEADER:
        raise ManifestError(f"{path}: first line must be {MANIFEST_HEADER!r}")
    photos: list[Record] = []
    sketches: list[Record] = []
    ids_seen: dict[str, set[str]] = {"photo": set(), "sketch": set()}
    root = path.parent
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        modality, rec_id, rel_path, cls = fields
        if modality not in ("photo", "sketch"):
            raise UnknownModalityError(f"{path}:{lineno}: unknown modality {modality!r}")
        if rec_id in ids_seen[modality]:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate {modality} id {rec_id!r}")
        ids_seen[modality].add(rec_id)
        rec = Record(rec_id, root / rel_path, cls)
        (photos if modality == "photo" else sketches).append(rec)
    return Corpus.from_records(photos, sketches)


def write_manifest(path, corpus: Corpus) -> None:
    path = Path(path)
    root = path.parent
    lines = [MANIFEST_HEADER]
    for modality, records in (("photo", corpus.photos), ("sketch", corpus.sketches)):
        for rec in records:
            try:
                rel = rec.path.relative_to(root)
            except ValueError:
                rel = rec.path
            lines.append(f"{modality}\t{rec.id}\t{rel.as_posix()}\t{rec.cls}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Zero-shot splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroShotSplit:
    seen: tuple[str, ...]
    unseen: tuple[str, ...]
    photos_seen: tuple[Record, ...] = field(repr=False, default=())
    photos_unseen: tuple[Record, ...] = field(repr=False, default=())
    sketches_seen: tuple[Record, ...] = field(repr=False, default=())
    sketches_unseen: tuple[Record, ...] = field(repr=False, default=())

    @staticmethod
    def from_classes(corpus: Corpus, seen, unseen) -> "ZeroShotSplit":
        seen_t, unseen_t = tuple(seen), tuple(unseen)
        seen_set, unseen_set = set(seen_t), set(unseen_t)
        if seen_set & unseen_set:
            raise SplitError(f"classes in both partitions: {sorted(seen_set & unseen_set)}")
        if seen_set | unseen_set != set(corpus.classes):
            missing = set(corpus.classes) - (seen_set | unseen_set)
            extra = (seen_set | unseen_set) - set(corpus.classes)
            raise SplitError(f"partition does not cover corpus classes (missing {sorted(missing)}, extra {sorted(extra)})")
        return ZeroShotSplit(
            seen=seen_t,
            unseen=unseen_t,
            photos_seen=tuple(r for r in corpus.photos if r.cls in seen_set),
            photos_unseen=tuple(r for r in corpus.photos if r.cls in unseen_set),
            sketches_seen=tuple(r for r in corpus.sketches if r.cls in seen_set),
            sketches_unseen=tuple(r for r in corpus.sketches if r.cls in unseen_set),
        )


def make_split(corpus: Corpus, n_unseen: int, seed: int,
               force_seen=(), force_unseen=()) -> ZeroShotSplit:
    """Seed-deterministic uniform choice of the unseen classes.

    ``force_seen`` classes are excluded from the unseen draw;
    ``force_unseen`` classes are placed there unconditionally.
    """
    classes = list(corpus.classes)
    if not 0 < n_unseen < len(classes):
        raise SplitError(f"n_unseen must be in (0, {len(classes)}), got {n_unseen}")
    force_seen = set(force_seen)
    force_unseen = set(force_unseen)
    for name, group in (("force_seen", force_seen), ("force_unseen", force_unseen)):
        unknown = group - set(classes)
        if unknown:
            raise SplitError(f"{name} names unknown classes: {sorted(unknown)}")
    overlap = force_seen & force_unseen
    if overlap:
        raise SplitError(f"classes forced both seen and unseen: {sorted(overlap)}")
    if len(force_unseen) > n_unseen:
        raise SplitError(f"force_unseen has {len(force_unseen)} classes but n_unseen={n_unseen}")
    pool = [c for c in classes if c not in force_seen and c not in force_unseen]
    need = n_unseen - len(force_unseen)
    if need > len(pool):
        raise SplitError(f"cannot draw {need} unseen classes from a pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    drawn = set(rng.choice(len(pool), size=need, replace=False).tolist()) if need else set()
    unseen_set = force_unseen | {pool[i] for i in drawn}
    seen = [c for c in classes if c not in unseen_set]
    unseen = [c for c in classes if c in unseen_set]
    return ZeroShotSplit.from_classes(corpus, seen, unseen)


SPLIT_HEADER = "class\tpartition"


def write_split(path, split: ZeroShotSplit) -> None:
    order = {c: i for i, c in enumerate(split.seen + split.unseen)}
    rows = [(c, "seen") for c in split.seen] + [(c, "unseen") for c in split.unseen]
    rows.sort(key=lambda r: order[r[0]])
    Path(path).write_text(
        "\n".join([SPLIT_HEADER] + [f"{c}\t{p}" for c, p in rows]) + "\n", encoding="utf-8"
    )


def load_split(path, corpus: Corpus) -> ZeroShotSplit:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SPLIT_HEADER:
        raise SplitError(f"{path}: first line must be {SPLIT_HEADER!r}")
    seen: list[str] = []
    unseen: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or fields[1] not in ("seen", "unseen"):
            raise SplitError(f"{path}:{lineno}: expected 'class<TAB>seen|unseen'")
        (seen if fields[1] == "seen" else unseen).append(fields[0])
    return ZeroShotSplit.from_classes(corpus, seen, unseen)


def validate_split_for_training(split: ZeroShotSplit) -> None:
    """Every seen class needs at least one sketch and one photo, and the
    negative pool needs at least two distinct photo classes."""
    photo_classes = {r.cls for r in split.photos_seen}
    sketch_classes = {r.cls for r in split.sketches_seen}
    for cls in split.seen:
        if cls not in sketch_classes:
            raise SplitError(f"seen class {cls!r} has no sketches")
        if cls not in photo_classes:
            raise SplitError(f"seen class {cls!r} has no photos")
    if len(photo_classes) < 2:
        raise SplitError("need photos from at least two seen classes to form triplets")


# ---------------------------------------------------------------------------
# Class word vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SemanticTable:
    vectors: dict[str, np.ndarray]
    dim: int
    source: str

    def __getitem__(self, cls: str) -> np.ndarray:
        try:
            return self.vectors[cls]
        except KeyError:
            raise MissingSemanticsError(f"no word vector for class {cls!r} (source {self.source})") from None

    def __contains__(self, cls: str) -> bool:
        return cls in self.vectors

    def require(self, classes) -> None:
        missing = [c for c in classes if c not in self.vectors]
        if missing:
            raise MissingSemanticsError(
                f"classes without word vectors in {self.source}: {missing}"
            )

    def matrix(self, classes) -> np.ndarray:
        return np.stack([self[c] for c in classes])


def _name_variants(cls: str) -> list[str]:
    """Exact name plus separator-normalised forms, in lookup order."""
    variants = [cls]
    for sep in ("_", "-", " "):
        for rep in ("_", "-", " "):
            if sep != rep:
                v = cls.replace(sep, rep)
                if v not in variants:
                    variants.append(v)
    lowered = [v.lower() for v in variants if v.lower() not in variants]
    return variants + lowered


def _name_tokens(cls: str) -> list[str]:
    out = cls
    for sep in ("-", "_"):
        out = out.replace(sep, " ")
    return [t for t in out.split() if t]


def load_word_vectors(path, classes, dim: int = SEMANTIC_DIM) -> SemanticTable:
    """Resolve every class to a vector from a word2vec-format text file.

    Lookup chain per class: exact token, separator-normalised variants,
    then the mean of the per-token vectors for multi-word names. A class
    that survives none of these raises MissingSemanticsError naming it.
    """
    path = Path(path)
    classes = list(classes)
    wanted: set[str] = set()
    for cls in classes:
        wanted.update(_name_variants(cls))
        wanted.update(_name_tokens(cls))

    found: dict[str, np.ndarray] = {}
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        parts = first.split()
        is_header = len(parts) == 2 and all(p.isdigit() for p in parts)
        if is_header and int(parts[1]) != dim:
            raise ValueError(f"{path}: header declares dim {parts[1]}, expected {dim}")
        lines = [] if is_header else [first]
        for lineno, line in enumerate(lines + list(fh), start=1):
            if not line.strip():
                continue
            token, _, rest = line.partition(" ")
            if token not in wanted or token in found:
                continue
            values = rest.split()
            if len(values) != dim:
                raise ValueError(f"{path}:{lineno}: token {token!r} has {len(values)} floats, expected {dim}")
            vec = np.asarray([float(v) for v in values], dtype=np.float32)
            if not np.all(np.isfinite(vec)) or float(np.linalg.norm(vec)) == 0.0:
                raise ValueError(f"{path}:{lineno}: token {token!r} has a non-finite or zero vector")
            found[token] = vec

    vectors: dict[str, np.ndarray] = {}
    for cls in classes:
        vec = None
        for variant in _name_variants(cls):
            if variant in found:
                vec = found[variant]
                break
        if vec is None:
            tokens = _name_tokens(cls)
            if len(tokens) > 1 and all(t in found for t in tokens):
                vec = np.mean([found[t] for t in tokens], axis=0)
        if vec is None:
            raise MissingSemanticsError(f"no word vector for class {cls!r} in {path}")
        vectors[cls] = vec.astype(np.float32)
    return SemanticTable(vectors, dim, str(path))


def write_word_vectors(path, vectors: dict[str, np.ndarray], header: bool = True) -> None:
    """Serialise vectors in word2vec text format (6-decimal fixed point)."""
    items = list(vectors.items())
    lines = []
    if header:
        lines.append(f"{len(items)} {len(next(iter(vectors.values())))}")
    for token, vec in items:
        lines.append(token + " " + " ".join(f"{v:.6f}" for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Image loading
# ---------------------------------------------------------------------------


class ImageLoader:
    """Loads manifest images to f32 arrays in [0, 1], with an in-memory cache.

    Sketches load as single-channel (1, H, W); photos as RGB (3, H, W).
    Images must already be the configured size; no resizing happens here.
    """

    def __init__(self, image_size: int, cache: bool = True):
        self.image_size = image_size
        self._cache: dict[tuple[str, str], np.ndarray] | None = {} if cache else None

    def load(self, record: Record, modality: str) -> np.ndarray:
        key = (str(record.path), modality)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        if not record.path.is_file():
            raise FileNotFoundError(f"record {record.id!r}: image not found at {record.path}")
        with Image.open(record.path) as img:
            img = img.convert("L" if modality == "sketch" else "RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
        if arr.shape[:2] != (self.image_size, self.image_size):
            raise ValueError(
                f"record {record.id!r}: image is {arr.shape[1]}x{arr.shape[0]}, expected {self.image_size}"
            )
        arr = arr[None, :, :] if modality == "sketch" else np.ascontiguousarray(arr.transpose(2, 0, 1))
        if self._cache is not None:
            self._cache[key] = arr
        return arr

    def load_batch(self, records, modality: str) -> np.ndarray:
        return np.stack([self.load(r, modality) for r in records])


# ---------------------------------------------------------------------------
# Triplet sampling with semantic hard negatives
# ---------------------------------------------------------------------------


@dataclass
class TripletBatch:
    anchors: np.ndarray  # (N, 1, H, W) sketches
    positives: np.ndarray  # (N, 3, H, W) photos, same class as anchor
    negatives: np.ndarray  # (N, 3, H, W) photos, different class
    semantics: np.ndarray  # (N, dim) anchor-class word vectors
    anchor_classes: tuple[str, ...]
    negative_classes: tuple[str, ...]

    def __post_init__(self):
        n = self.anchors.shape[0]
        if not (self.positives.shape[0] == self.negatives.shape[0] == self.semantics.shape[0] == n):
            raise ValueError("triplet batch arrays disagree on N")
        for a, nc in zip(self.anchor_classes, self.negative_classes):
            if a == nc:
                raise ValueError(f"negative class equals anchor class {a!r}")


def cosine_similarity_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = vectors / np.maximum(norms, 1e-12)
    return unit @ unit.T


class TripletSampler:
    """Draws triplets from the seen partition.

    Anchor classes are uniform over the seen classes; the negative class is
    drawn from a softmax over semantic cosine similarity to the anchor class
    divided by ``temperature``, so semantically closer classes are mined
    more often. Low temperature approaches hardest-class sampling, high
    temperature approaches uniform.
    """

    def __init__(self, split: ZeroShotSplit, semantics: SemanticTable,
                 temperature: float = 0.1, rng: np.random.Generator | None = None,
                 anchor_pool=None):
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        validate_split_for_training(split)
        semantics.require(split.seen)
        self.split = split
        self.temperature = temperature
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.classes = tuple(split.seen)
        self._class_index = {c: i for i, c in enumerate(self.classes)}

        sketches = anchor_pool if anchor_pool is not None else split.sketches_seen
        self._sketches_by_class: dict[str, list[Record]] = {}
        for rec in sketches:
            self._sketches_by_class.setdefault(rec.cls, []).append(rec)
        self._photos_by_class: dict[str, list[Record]] = {}
        for rec in split.photos_seen:
            self._photos_by_class.setdefault(rec.cls, []).append(rec)
        empty = [c for c in self.classes if not self._sketches_by_class.get(c)]
        if empty:
            raise SplitError(f"anchor pool has no sketches for classes {empty}")

        sims = cosine_similarity_matrix(semantics.matrix(self.classes))
        self._neg_probs = np.zeros_like(sims)
        for i in range(len(self.classes)):
            logits = sims[i] / temperature
            logits[i] = -np.inf
            logits -= logits.max()
            p = np.exp(logits)
            p[i] = 0.0
            self._neg_probs[i] = p / p.sum()
        self._semantics = semantics

    def sample_class_pairs(self, n: int) -> tuple[list[str], list[str]]:
        """(anchor classes, negative classes) without touching any images."""
        k = len(self.classes)
        anchor_idx = self.rng.integers(0, k, size=n)
        negatives = [
            self.classes[self.rng.choice(k, p=self._neg_probs[i])] for i in anchor_idx
        ]
        return [self.classes[i] for i in anchor_idx], negatives

    def sample_records(self, n: int) -> list[tuple[Record, Record, Record]]:
        anchors, negatives = self.sample_class_pairs(n)
        out = []
        for a_cls, n_cls in zip(anchors, negatives):
            sk = self._sketches_by_class[a_cls]
            pp = self._photos_by_class[a_cls]
            np_ = self._photos_by_class[n_cls]
            out.append(
                (
                    sk[self.rng.integers(0, len(sk))],
                    pp[self.rng.integers(0, len(pp))],
                    np_[self.rng.integers(0, len(np_))],
                )
            )
        return out

    def sample_batch(self, n: int, loader: ImageLoader) -> TripletBatch:
        triples = self.sample_records(n)
        anchors = np.stack([loader.load(a, "sketch") for a, _, _ in triples])
        positives = np.stack([loader.load(p, "photo") for _, p, _ in triples])
        negatives = np.stack([loader.load(m, "photo") for _, _, m in triples])
        sem = np.stack([self._semantics[a.cls] for a, _, _ in triples])
        return TripletBatch(
            anchors=anchors,
            positives=positives,
            negatives=negatives,
            semantics=sem,
            anchor_classes=tuple(a.cls for a, _, _ in triples),
            negative_classes=tuple(m.cls for _, _, m in triples),
        )
