"""Synthetic shape scenes with captions and exact masks, plus two-view augmentation.

Each scene holds one or two flat-colored shapes on a textured background. The
caption names the color and class of the first shape. Views are produced by a
square crop resized to the output size, an optional horizontal flip and a
rotation by a multiple of 90 degrees; the :class:`Geometry` record maps view
coordinates to source coordinates and back, so masks can be warped between
the two views of a pair.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AugmentationError, ConfigError, DatasetNotFound, FormatError
from .pnm import read_image, read_mask, to_uint8, write_image, write_mask

DEFAULT_CLASSES = ("circle", "square", "triangle")

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 215, 40),
    "purple": (150, 50, 190),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "pink": (240, 120, 180),
    "brown": (120, 70, 30),
    "black": (20, 20, 20),
}

# each class owns two colors when colors are class-correlated
CLASS_PALETTES = {
    "circle": ("red", "orange"),
    "square": ("blue", "purple"),
    "triangle": ("green", "yellow"),
    "diamond": ("cyan", "pink"),
    "cross": ("brown", "black"),
}

BACKGROUNDS = {
    "gray": (128, 128, 128),
    "sand": (194, 178, 128),
    "slate": (90, 100, 115),
    "white": (225, 225, 220),
}


def _rasterize(cls: str, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = ys - cy, xs - cx
    if cls == "circle":
        return dy * dy + dx * dx <= r * r
    if cls == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.85 * r
    if cls == "triangle":
        return (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if cls == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if cls == "cross":
        arm = r / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ConfigError(f"unknown shape class {cls!r}")


SHAPE_CLASSES = ("circle", "square", "triangle", "diamond", "cross")


@dataclass
class Shape:
    cls: str
    center: tuple[float, float]
    size: float
    color: str


@dataclass
class SyntheticScene:
    canvas: np.ndarray  # (H, W, 3) float64 in [0, 1], multiples of 1/255
    shapes: list[Shape]
    gt_mask: np.ndarray  # (H, W) uint8 class ids, 0 = background
    caption: str
    classes: tuple[str, ...]
    background: str = "gray"

    @property
    def class_id(self) -> int:
        return self.classes.index(self.shapes[0].cls) + 1


def gen_scene(rng_seed: int, class_set: Sequence[str] = DEFAULT_CLASSES, canvas_size: int = 32,
              correlated_colors: bool = True) -> SyntheticScene:
    """Random scene fully determined by ``rng_seed``.

    With ``correlated_colors`` every shape takes one of its class's two
    palette colors, otherwise any color.
    """
    class_set = tuple(class_set)
    if not class_set:
        raise ConfigError("class_set is empty")
    for c in class_set:
        if c not in SHAPE_CLASSES:
            raise ConfigError(f"unknown shape class {c!r}")
    if canvas_size < 16:
        raise ConfigError(f"canvas of {canvas_size} px is too small for a shape")
    rng = np.random.default_rng(rng_seed)
    H = W = canvas_size
    bg_word = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    base = np.array(BACKGROUNDS[bg_word], dtype=np.float64) / 255.0
    ys, xs = np.mgrid[0:H, 0:W] / canvas_size
    fy, fx, phase = rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(0, 2 * np.pi)
    texture = 0.05 * np.sin(2 * np.pi * (fy * ys + fx * xs) + phase)
    canvas = base + texture[..., None] + rng.normal(0.0, 0.02, size=(H, W, 3))

    n_shapes = int(rng.integers(1, 3))
    shapes: list[Shape] = []
    for _ in range(n_shapes):
        for _attempt in range(100):
            r = rng.uniform(0.22, 0.34) * canvas_size
            cy, cx = rng.uniform(r, canvas_size - r, size=2)
            if all(math.hypot(cy - s.center[0], cx - s.center[1]) > r + s.size + 1 for s in shapes):
                break
        else:
            continue
        cls = class_set[rng.integers(len(class_set))]
        palette = CLASS_PALETTES[cls] if correlated_colors else tuple(COLORS)
        color = palette[rng.integers(len(palette))]
        shapes.append(Shape(cls, (float(cy), float(cx)), float(r), color))

    mask = np.zeros((H, W), dtype=np.uint8)
    for s in shapes:
        inside = _rasterize(s.cls, s.center[0], s.center[1], s.size, H, W)
        mask[inside] = class_set.index(s.cls) + 1
        shade = rng.uniform(-0.04, 0.04)
        canvas[inside] = np.array(COLORS[s.color]) / 255.0 + shade
    canvas = to_uint8(canvas).astype(np.float64) / 255.0
    caption = f"a {shapes[0].color} {shapes[0].cls} on {bg_word}"
    return SyntheticScene(canvas, shapes, mask, caption, class_set, bg_word)


# -- geometry ---------------------------------------------------------------


@dataclass(frozen=True)
class Geometry:
    """Square crop ``[top, top+size) x [left, left+size)`` of the source, resized
    to ``out_size``, then flipped horizontally if ``flip``, then rotated
    counter-clockwise by ``rotation`` degrees (as ``np.rot90``)."""

    top: int
    left: int
    size: int
    flip: bool
    rotation: int
    out_size: int

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ConfigError("rotation must be a multiple of 90 degrees")

    @property
    def box(self) -> tuple[int, int, int, int]:
        return self.top, self.left, self.top + self.size, self.left + self.size

    def view_to_source(self, y, x):
        """Continuous view coordinates to continuous source coordinates."""
        S = self.out_size
        y, x = _unrotate(np.asarray(y, dtype=np.float64), np.asarray(x, dtype=np.float64), self.rotation, S)
        if self.flip:
            x = S - x
        scale = self.size / S
        return self.top + y * scale, self.left + x * scale

    def source_to_view(self, Y, X):
        S = self.out_size
        scale = S / self.size
        y = (np.asarray(Y, dtype=np.float64) - self.top) * scale
        x = (np.asarray(X, dtype=np.float64) - self.left) * scale
        if self.flip:
            x = S - x
        return _rotate(y, x, self.rotation, S)


def _unrotate(y, x, rotation, S):
    # inverse of np.rot90(k) applied to pixel-center coordinates
    if rotation == 0:
        return y, x
    if rotation == 90:
        return x, S - y
    if rotation == 180:
        return S - y, S - x
    return S - x, y


def _rotate(y, x, rotation, S):
    if rotation == 0:
        return y, x
    if rotation == 90:
        return S - x, y
    if rotation == 180:
        return S - y, S - x
    return x, S - y


def flip_coords(y, x, S):
    """Horizontal flip of continuous coordinates; an involution."""
    return y, S - np.asarray(x, dtype=np.float64)


def identity_geometry(source_size: int, out_size: int | None = None) -> Geometry:
    return Geometry(0, 0, source_size, False, 0, out_size or source_size)


def _pixel_centers(S: int):
    ys, xs = np.mgrid[0:S, 0:S] + 0.5
    return ys, xs


def render(array: np.ndarray, geom: Geometry) -> np.ndarray:
    """Sample an image or mask into view space (nearest neighbor)."""
    Y, X = geom.view_to_source(*_pixel_centers(geom.out_size))
    h, w = array.shape[:2]
    r = np.clip(np.floor(Y).astype(np.int64), 0, h - 1)
    c = np.clip(np.floor(X).astype(np.int64), 0, w - 1)
    return array[r, c]


def warp_mask(mask_a: np.ndarray, geom_a: Geometry, geom_b: Geometry):
    """Resample a view-A mask into view B through source coordinates.

    Each view-B pixel center is mapped to the source pixel it was sampled
    from; that pixel's center is mapped into view A and the nearest view-A
    pixel is read. Returns ``(mask_b, valid)``; ``valid`` marks view-B pixels
    whose source pixel also lies inside crop A. Invalid pixels hold 0.
    """
    Y, X = geom_b.view_to_source(*_pixel_centers(geom_b.out_size))
    y, x = geom_a.source_to_view(np.floor(Y) + 0.5, np.floor(X) + 0.5)
    S = geom_a.out_size
    valid = (y >= 0) & (y < S) & (x >= 0) & (x < S)
    r = np.clip(np.floor(y).astype(np.int64), 0, S - 1)
    c = np.clip(np.floor(x).astype(np.int64), 0, S - 1)
    out = np.where(valid, mask_a[r, c], 0).astype(mask_a.dtype)
    return out, valid


def overlap_fraction(a: Geometry, b: Geometry) -> float:
    """Intersection area of the two crop boxes over the smaller box's area."""
    t = max(a.top, b.top)
    l = max(a.left, b.left)
    bot = min(a.top + a.size, b.top + b.size)
    r = min(a.left + a.size, b.left + b.size)
    inter = max(0, bot - t) * max(0, r - l)
    return inter / min(a.size, b.size) ** 2


@dataclass(frozen=True)
class AugConfig:
    enabled: bool = True
    crop_scale: tuple[float, float] = (0.5, 1.0)  # area fraction of the source
    flip_prob: float = 0.5
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    out_size: int = 0  # 0: same as the source
    min_overlap: float = 0.4
    max_tries: int = 100


@dataclass
class ViewPair:
    view_u: np.ndarray
    view_v: np.ndarray
    geom_u: Geometry
    geom_v: Geometry


def _sample_geometry(rng, src: int, out: int, cfg: AugConfig) -> Geometry:
    area = rng.uniform(*cfg.crop_scale)
    size = int(min(src, max(1, round(math.sqrt(area) * src))))
    top = int(rng.integers(0, src - size + 1))
    left = int(rng.integers(0, src - size + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    rot = int(cfg.rotations[rng.integers(len(cfg.rotations))]) if cfg.rotations else 0
    return Geometry(top, left, size, flip, rot, out)


def augment_two_views(scene, rng_seed: int, aug_config: AugConfig = AugConfig()) -> ViewPair:
    image = scene.canvas if hasattr(scene, "canvas") else np.asarray(scene)
    H, W = image.shape[:2]
    if H != W:
        raise ConfigError("augmentation expects square source images")
    out = aug_config.out_size or H
    if not aug_config.enabled:
        g = identity_geometry(H, out)
        view = render(image, g)
        return ViewPair(view, view.copy(), g, g)
    rng = np.random.default_rng(rng_seed)
    for _ in range(aug_config.max_tries):
        gu = _sample_geometry(rng, H, out, aug_config)
        gv = _sample_geometry(rng, H, out, aug_config)
        if overlap_fraction(gu, gv) >= aug_config.min_overlap:
            return ViewPair(render(image, gu), render(image, gv), gu, gv)
    raise AugmentationError(f"no view pair with overlap >= {aug_config.min_overlap} "
                            f"after {aug_config.max_tries} tries")


# -- dataset on disk ----------------------------------------------------------


@dataclass
class DatasetItem:
    id: str
    seed: int
    cls: str
    image: np.ndarray  # float64 (H, W, 3)
    mask: np.ndarray  # uint8 (H, W)
    caption: str


@dataclass
class Dataset:
    root: Path | None
    classes: tuple[str, ...]
    items: list[DatasetItem] = field(default_factory=list)

    def __len__(self):
        return len(self.items)


def item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_dataset(size: int, seed: int, classes: Sequence[str] = DEFAULT_CLASSES, canvas_size: int = 32,
                 correlated_colors: bool = True) -> Dataset:
    """The corpus :func:`write_dataset` would write, built in memory.

    Loading the written corpus back yields identical items: canvases are
    already quantized to 8 bits.
    """
    classes = tuple(classes)
    items = []
    for i in range(size):
        s = item_seed(seed, i)
        scene = gen_scene(s, classes, canvas_size, correlated_colors)
        items.append(DatasetItem(f"{i:06d}", s, scene.shapes[0].cls, scene.canvas, scene.gt_mask, scene.caption))
    return Dataset(None, classes, items)


def write_dataset(root, size: int, seed: int, classes: Sequence[str] = DEFAULT_CLASSES,
                  canvas_size: int = 32, correlated_colors: bool = True) -> Path:
    """Write ``pairs/<id>/{image.ppm, mask.pgm, caption.txt}``, ``manifest.tsv``
    (``id, scene seed, class`` per row) and ``classes.txt``."""
    root = Path(root)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(f"{c}\n" for c in classes), encoding="utf-8")
    rows = []
    for i in range(size):
        s = item_seed(seed, i)
        scene = gen_scene(s, classes, canvas_size, correlated_colors)
        pid = f"{i:06d}"
        d = root / "pairs" / pid
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / "image.ppm", to_uint8(scene.canvas))
        write_mask(d / "mask.pgm", scene.gt_mask)
        (d / "caption.txt").write_text(scene.caption + "\n", encoding="utf-8")
        rows.append(f"{pid}\t{s}\t{scene.shapes[0].cls}\n")
    (root / "manifest.tsv").write_text("".join(rows), encoding="utf-8")
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise DatasetNotFound(f"no manifest.tsv under {root}")
    classes_file = root / "classes.txt"
    classes = tuple(classes_file.read_text(encoding="utf-8").split()) if classes_file.is_file() else DEFAULT_CLASSES
    items = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            pid, seed, cls = line.split("\t")
        except ValueError as exc:
            raise FormatError(f"bad manifest row {line!r}") from exc
        d = root / "pairs" / pid
        image = read_image(d / "image.ppm").astype(np.float64) / 255.0
        mask = read_mask(d / "mask.pgm")
        caption = (d / "caption.txt").read_text(encoding="utf-8").strip()
        items.append(DatasetItem(pid, int(seed), cls, image, mask, caption))
    return Dataset(root, classes, items)


def dataset_digest(root) -> str:
    """SHA-256 over the manifest and every file under ``pairs/`` in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in [root / "manifest.tsv", *sorted((root / "pairs").rglob("*"))]:
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
