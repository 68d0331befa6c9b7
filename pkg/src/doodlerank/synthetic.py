"""Synthetic desk-scale photo/sketch corpus built from parametric shape
families.

Each class is a shape family (k-gons, stars, circle) under an affine
variant (wide, tall, small, tilt). Photos render the filled shape in a
random colour over smooth background noise; sketches render a jittered
outline with random stroke width and edge dropout, giving a controlled
domain gap. Class word vectors cluster by family, so classes sharing a
family sit closer in cosine similarity than classes across families.

Generation is fully determined by the seed: per-image RNG streams are
derived from (seed, class index, modality, image index), so the same call
produces byte-identical PNGs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Corpus, Record, load_word_vectors, write_manifest, write_word_vectors

_POLYGON_NAMES = {
    3: "triangle", 4: "square", 5: "pentagon", 6: "hexagon", 7: "heptagon",
    8: "octagon", 9: "nonagon", 10: "decagon", 11: "hendecagon", 12: "dodecagon",
}
_STAR_POINTS = range(5, 13)
_CIRCLE_SEGMENTS = 48

# (suffix, aspect x, aspect y, scale, base rotation)
_VARIANTS = (
    ("", 1.0, 1.0, 1.0, 0.0),
    ("wide", 1.45, 0.65, 1.0, 0.0),
    ("tall", 0.65, 1.45, 1.0, 0.0),
    ("small", 1.0, 1.0, 0.55, 0.0),
    ("tilt", 1.0, 1.0, 1.0, 0.45),
    ("wide-tilt", 1.45, 0.65, 1.0, 0.45),
)

_SPECIAL_NAMES = {("square", "wide"): "rectangle", ("circle", "wide"): "oval"}

FAMILY_NOISE = 0.35  # class vectors: unit family centre + this much Gaussian


@dataclass(frozen=True)
class ShapeClass:
    name: str
    family: str
    vertices: np.ndarray  # canonical outline, unit radius, (V, 2)
    aspect: tuple[float, float]
    scale: float
    rotation: float


def _polygon(k: int) -> np.ndarray:
    angles = -np.pi / 2 + 2 * np.pi * np.arange(k) / k
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _star(k: int, inner: float = 0.45) -> np.ndarray:
    angles = -np.pi / 2 + np.pi * np.arange(2 * k) / k
    radii = np.where(np.arange(2 * k) % 2 == 0, 1.0, inner)
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def _families() -> list[tuple[str, np.ndarray]]:
    fams = [(_POLYGON_NAMES[k], _polygon(k)) for k in sorted(_POLYGON_NAMES)]
    fams += [(f"star{k}", _star(k)) for k in _STAR_POINTS]
    fams.append(("circle", _polygon(_CIRCLE_SEGMENTS)))
    return fams


def shape_catalog(n_classes: int) -> list[ShapeClass]:
    """First ``n_classes`` entries of the deterministic catalog.

    Ordering is variant-major (all base shapes first, then all wide, ...)
    so small corpora still span many families.
    """
    fams = _families()
    capacity = len(fams) * len(_VARIANTS)
    if not 2 <= n_classes <= capacity:
        raise ValueError(f"n_classes must be in [2, {capacity}], got {n_classes}")
    catalog: list[ShapeClass] = []
    for suffix, ax, ay, scale, rot in _VARIANTS:
        for fam_name, verts in fams:
            name = _SPECIAL_NAMES.get((fam_name, suffix), f"{fam_name}-{suffix}" if suffix else fam_name)
            catalog.append(ShapeClass(name, fam_name, verts, (ax, ay), scale, rot))
    return catalog[:n_classes]


# ---------------------------------------------------------------------------
# Rasterisation
# ---------------------------------------------------------------------------


def _place(spec: ShapeClass, rng: np.random.Generator, size: int) -> np.ndarray:
    """Canonical outline -> pixel coordinates with per-sample jitter."""
    verts = spec.vertices.copy()
    verts[:, 0] *= spec.aspect[0]
    verts[:, 1] *= spec.aspect[1]
    rot = spec.rotation + rng.uniform(-0.3, 0.3)
    c, s = np.cos(rot), np.sin(rot)
    verts = verts @ np.array([[c, -s], [s, c]])
    radius = 0.36 * size * spec.scale * rng.uniform(0.8, 1.05)
    centre = size / 2 + rng.uniform(-0.07, 0.07, size=2) * size
    return verts * radius + centre


def _fill_mask(verts: np.ndarray, size: int, supersample: int = 2) -> np.ndarray:
    """Even-odd polygon fill, supersampled then box-averaged to [0, 1]."""
    ss = size * supersample
    coords = (np.arange(ss) + 0.5) / supersample
    px = np.broadcast_to(coords[None, :], (ss, ss))
    py = np.broadcast_to(coords[:, None], (ss, ss))
    x1, y1 = verts[:, 0], verts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    inside = np.zeros((ss, ss), dtype=bool)
    for i in range(len(verts)):
        crosses = (y1[i] > py) != (y2[i] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1[i] + (py - y1[i]) * (x2[i] - x1[i]) / (y2[i] - y1[i])
        inside ^= crosses & (px < xint)
    mask = inside.astype(np.float32).reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return mask


def _smooth_noise(rng: np.random.Generator, size: int, channels: int,
                  lo: float, hi: float, cells: int = 5) -> np.ndarray:
    grid = rng.uniform(lo, hi, size=(cells + 1, cells + 1, channels)).astype(np.float32)
    t = np.linspace(0, cells, size, dtype=np.float32)
    i0 = np.minimum(t.astype(np.int64), cells - 1)
    frac = t - i0
    top = grid[i0] * (1 - frac)[:, None, None] + grid[i0 + 1] * frac[:, None, None]
    out = top[:, i0] * (1 - frac)[None, :, None] + top[:, i0 + 1] * frac[None, :, None]
    return out


def render_photo(spec: ShapeClass, rng: np.random.Generator, size: int) -> np.ndarray:
    """Filled shape over textured background; RGB uint8 (H, W, 3)."""
    verts = _place(spec, rng, size)
    alpha = _fill_mask(verts, size)[:, :, None]
    background = _smooth_noise(rng, size, 3, 0.35, 0.75)
    background += rng.normal(0.0, 0.02, size=background.shape).astype(np.float32)
    if rng.random() < 0.5:
        colour = rng.uniform(0.02, 0.28, size=3)
    else:
        colour = rng.uniform(0.78, 0.98, size=3)
    fill = colour[None, None, :] + rng.normal(0.0, 0.03, size=(size, size, 3))
    img = np.clip(background * (1 - alpha) + fill * alpha, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Min distance from each point to any segment; points (M,2), a/b (E,2)."""
    ab = b - a  # (E, 2)
    denom = np.maximum((ab * ab).sum(axis=1), 1e-9)  # (E,)
    ap = points[:, None, :] - a[None, :, :]  # (M, E, 2)
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.sqrt(((points[:, None, :] - closest) ** 2).sum(axis=2))
    return d.min(axis=1)


def render_sketch(spec: ShapeClass, rng: np.random.Generator, size: int) -> np.ndarray:
    """Jittered outline with edge dropout; grayscale uint8 (H, W)."""
    verts = _place(spec, rng, size)
    verts = verts + rng.normal(0.0, 0.02 * size, size=verts.shape)
    n = len(verts)
    a = verts
    b = np.roll(verts, -1, axis=0)
    max_drop = int(0.3 * n)
    n_drop = min(int(rng.binomial(n, 0.12)), max_drop)
    if n_drop:
        dropped = rng.choice(n, size=n_drop, replace=False)
        keep = np.setdiff1d(np.arange(n), dropped)
        a, b = a[keep], b[keep]
    coords = np.arange(size, dtype=np.float32) + 0.5
    px, py = np.meshgrid(coords, coords)
    points = np.stack([px.ravel(), py.ravel()], axis=1)
    dist = _segment_distances(points, a, b).reshape(size, size)
    width = rng.uniform(0.6, 1.1)
    ink = np.clip(width + 0.5 - dist, 0.0, 1.0)
    paper = 1.0 - rng.uniform(0.0, 0.04, size=(size, size))
    stroke_dark = rng.uniform(0.75, 0.95)
    img = np.clip(paper - stroke_dark * ink, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Semantics and corpus assembly
# ---------------------------------------------------------------------------


def make_semantics(catalog: list[ShapeClass], seed: int, dim: int = 300) -> dict[str, np.ndarray]:
    """Family-clustered unit vectors: same-family classes have higher cosine."""
    families = []
    for spec in catalog:
        if spec.family not in families:
            families.append(spec.family)
    rng = np.random.default_rng([seed, 101])
    centres = {}
    for fam in families:
        v = rng.standard_normal(dim)
        centres[fam] = v / np.linalg.norm(v)
    vectors = {}
    for spec in catalog:
        noise = rng.standard_normal(dim)
        v = centres[spec.family] + FAMILY_NOISE * noise / np.linalg.norm(noise)
        vectors[spec.name] = (v / np.linalg.norm(v)).astype(np.float32)
    return vectors


def gen_synthetic(out_dir, n_classes: int, per_class_sketches: int, per_class_photos: int,
                  image_size: int = 64, seed: int = 0) -> tuple[Corpus, SemanticTable]:
    """Write images, manifest.tsv and semantics.txt under ``out_dir``.

    Same arguments produce byte-identical files.
    """
    if per_class_sketches < 1 or per_class_photos < 1:
        raise ValueError("need at least one sketch and one photo per class")
    out_dir = Path(out_dir)
    catalog = shape_catalog(n_classes)
    vectors = make_semantics(catalog, seed)

    photos: list[Record] = []
    sketches: list[Record] = []
    for cls_idx, spec in enumerate(catalog):
        cls_dir = out_dir / "images" / spec.name
        cls_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class_photos):
            rng = np.random.default_rng([seed, cls_idx, 0, i])
            path = cls_dir / f"photo_{i:04d}.png"
            Image.fromarray(render_photo(spec, rng, image_size), mode="RGB").save(path)
            photos.append(Record(f"{spec.name}-ph{i:04d}", path, spec.name))
        for i in range(per_class_sketches):
            rng = np.random.default_rng([seed, cls_idx, 1, i])
            path = cls_dir / f"sketch_{i:04d}.png"
            Image.fromarray(render_sketch(spec, rng, image_size), mode="L").save(path)
            sketches.append(Record(f"{spec.name}-sk{i:04d}", path, spec.name))

    corpus = Corpus.from_records(photos, sketches)
    write_manifest(out_dir / "manifest.tsv", corpus)
    write_word_vectors(out_dir / "semantics.txt", vectors)
    # parse the file back so callers see exactly what later loads will see
    table = load_word_vectors(out_dir / "semantics.txt", [s.name for s in catalog])
    return corpus, table
