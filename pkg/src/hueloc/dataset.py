"""Forgery synthesis: convex masks, local hue edits, test-set recipes, training pairs,
and patch grids."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import colorops
from .colorops import GBRG, CfaPattern, DimensionError, ParameterError

RECIPES = ("png", "b-jpg", "a-jpg")
DEFAULT_ANGLES = tuple(range(30, 331, 30))
DEFAULT_QFS = tuple(range(55, 101, 5))
TRAIN_ANGLES = tuple(range(30, 331, 30))
SECOND_JPEG_QF = 75
TEST_CROP = (768, 1024)
MASK_BOX = 256


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# --------------------------------------------------------------------------- sources

def _smooth_field(rng, height, width, cell):
    gh, gw = height // cell + 3, width // cell + 3
    coarse = rng.random((gh, gw))
    up = ndimage.zoom(coarse, cell, order=3, mode="nearest")[cell: cell + height, cell: cell + width]
    lo, hi = up.min(), up.max()
    return (up - lo) / (hi - lo + 1e-12)


def synthetic_scene(height: int, width: int, seed: int, noise: float = 2.0) -> np.ndarray:
    """A colourful textured scene (before any camera simulation)."""
    rng = np.random.default_rng(seed)
    hue = (rng.uniform(0, 360) + rng.uniform(90, 240) * _smooth_field(rng, height, width, 160)) % 360
    sat = 0.3 + 0.6 * _smooth_field(rng, height, width, 120)
    val = 0.3 + 0.6 * _smooth_field(rng, height, width, 100)

    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(rng.integers(6, 14)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry = rng.uniform(min(20, height / 8), height / 4)
        rx = rng.uniform(min(20, width / 8), width / 4)
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        hue[inside] = rng.uniform(0, 360)
        sat[inside] = rng.uniform(0.3, 0.95)
        val[inside] = rng.uniform(0.25, 0.9)

    grain = ndimage.gaussian_filter(rng.standard_normal((height, width)), 1.0)
    grain /= grain.std() + 1e-12
    val = np.clip(val * (1.0 + 0.06 * grain), 0.0, 1.0)

    rgb = colorops.hsv_to_rgb(hue, sat, val) + rng.normal(0.0, noise, (height, width, 3))
    return colorops.quantize(rgb)


def synthetic_source(height: int = TEST_CROP[0], width: int = TEST_CROP[1], seed: int = 0,
                     pattern: CfaPattern = GBRG) -> np.ndarray:
    """Synthetic 'camera' image: textured scene passed through mosaic + bilinear demosaic."""
    return colorops.simulate_camera(synthetic_scene(height, width, seed), pattern)


def load_sources(directory) -> list[np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"source directory {directory} does not exist")
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"})
    if not paths:
        raise FileNotFoundError(f"no images found in {directory}")
    return [colorops.read_image(p) for p in paths]


# --------------------------------------------------------------------------- masks

def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone chain on integer points; returns CCW vertices without repeats."""
    pts = sorted(set(map(tuple, points.tolist())))
    if len(pts) < 3:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def rasterize_convex(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixels whose (row, col) lattice point lies in the closed CCW polygon.

    Exact integer half-plane tests, so every lattice point on a segment between
    two inside pixels is inside as well.
    """
    rows, cols = np.mgrid[0:height, 0:width]
    inside = np.ones((height, width), dtype=bool)
    n = len(vertices)
    for k in range(n):
        (r0, c0), (r1, c1) = vertices[k], vertices[(k + 1) % n]
        inside &= (r1 - r0) * (cols - c0) - (c1 - c0) * (rows - r0) >= 0
    return inside


def random_convex_mask(height: int, width: int, box: int = MASK_BOX, rng_seed: int = 0) -> np.ndarray:
    if height < box or width < box:
        raise ParameterError(f"image {height}x{width} is smaller than the {box}x{box} mask box")
    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, height - box + 1))
    left = int(rng.integers(0, width - box + 1))
    while True:
        pts = rng.integers(0, box, size=(int(rng.integers(8, 17)), 2))
        hull = _convex_hull(pts)
        if len(hull) < 3:
            continue
        local = rasterize_convex(hull, box, box)
        # Reject slivers: they can rasterize into disconnected lattice points.
        if local.sum() >= 0.1 * box * box and ndimage.label(local)[1] == 1:
            break
    mask = np.zeros((height, width), dtype=bool)
    mask[top: top + box, left: left + box] = local
    return mask


def apply_local_hue_mod(img, mask: np.ndarray, angle: int) -> np.ndarray:
    img = colorops.as_raster(img)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    if int(angle) % 360 == 0 or not mask.any():
        return out
    out[mask] = colorops.hue_rotate(img[mask][None], angle)[0]
    return out


# --------------------------------------------------------------------------- test sets

@dataclass
class ForgeryCase:
    case_id: str
    image: np.ndarray
    mask: np.ndarray
    angle: int
    recipe: str
    qf_history: list[int]
    source: int
    mask_seed: int | None
    encoded: bytes | None = None  # final JPEG stream, for JPEG recipes

    def record(self) -> dict:
        return {
            "case_id": self.case_id,
            "recipe": self.recipe,
            "angle": self.angle,
            "qf_history": list(self.qf_history),
            "source": self.source,
            "seed": self.mask_seed,
        }


@dataclass
class TestSetParams:
    angles: Sequence[int] = DEFAULT_ANGLES
    qfs: Sequence[int] = DEFAULT_QFS
    per_angle: int = 10
    n_pristine: int = 10
    crop: tuple[int, int] = TEST_CROP
    box: int = MASK_BOX


def crop_source(img, crop: tuple[int, int] = TEST_CROP) -> np.ndarray:
    img = colorops.as_raster(img)
    H, W = crop
    if img.shape[0] < H or img.shape[1] < W:
        raise ParameterError(f"source image {img.shape[0]}x{img.shape[1]} is smaller than {H}x{W}")
    return img[:H, :W].copy()


def case_plan(n_sources: int, params: TestSetParams, recipe: str) -> list[tuple[int, int]]:
    """(source index, angle) pairs. PNG pairs every source with every angle;
    the JPEG recipes give each angle its own block of sources plus pristine controls."""
    if recipe == "png":
        return [(s, int(a)) for a in params.angles for s in range(n_sources)]
    need = params.per_angle * len(params.angles) + params.n_pristine
    if n_sources < need:
        raise ParameterError(f"recipe {recipe} needs {need} source images, got {n_sources}")
    out = []
    for k, a in enumerate(params.angles):
        out += [(k * params.per_angle + i, int(a)) for i in range(params.per_angle)]
    base = params.per_angle * len(params.angles)
    out += [(base + i, 0) for i in range(params.n_pristine)]
    return out


def make_case(source_img: np.ndarray, src: int, angle: int, recipe: str, qf: int | None,
              seed: int, params: TestSetParams) -> ForgeryCase:
    H, W = source_img.shape[:2]
    if angle % 360:
        mask_seed = derive_seed(seed, src, angle)
        mask = random_convex_mask(H, W, params.box, mask_seed)
    else:
        mask_seed = None
        mask = np.zeros((H, W), dtype=bool)

    encoded = None
    if recipe == "png":
        image, history = apply_local_hue_mod(source_img, mask, angle), []
    elif recipe == "b-jpg":
        encoded = colorops.jpeg_encode(apply_local_hue_mod(source_img, mask, angle), qf)
        image, history = colorops.jpeg_decode(encoded), [qf]
    elif recipe == "a-jpg":
        first = colorops.jpeg_roundtrip(source_img, qf)
        encoded = colorops.jpeg_encode(apply_local_hue_mod(first, mask, angle), SECOND_JPEG_QF)
        image, history = colorops.jpeg_decode(encoded), [qf, SECOND_JPEG_QF]
    else:
        raise ParameterError(f"unknown recipe {recipe!r}")

    qf_tag = f"_q{qf:03d}" if qf is not None else ""
    case_id = f"{recipe}{qf_tag}_a{angle:03d}_s{src:04d}"
    return ForgeryCase(case_id, image, mask, angle, recipe, history, src, mask_seed, encoded)


def make_test_set(recipe: str, source_images: Sequence[np.ndarray], params: TestSetParams | None = None,
                  rng_seed: int = 0) -> list[ForgeryCase]:
    """Build every case of one recipe. Cases for JPEG recipes are repeated per QF
    with the same mask and angle per source, so QF is the only varying factor."""
    if recipe not in RECIPES:
        raise ParameterError(f"unknown recipe {recipe!r}; choose from {RECIPES}")
    params = params or TestSetParams()
    sources = [crop_source(s, params.crop) for s in source_images]
    plan = case_plan(len(sources), params, recipe)
    qfs = [None] if recipe == "png" else [int(q) for q in params.qfs]
    return [make_case(sources[src], src, angle, recipe, qf, rng_seed, params)
            for qf in qfs for src, angle in plan]


def write_test_set(cases: Sequence[ForgeryCase], out_dir, extra: dict | None = None) -> Path:
    """Write images, masks and ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for case in cases:
        if case.encoded is not None:
            img_rel = f"images/{case.case_id}.jpg"
            (out_dir / img_rel).write_bytes(case.encoded)
        else:
            img_rel = f"images/{case.case_id}.png"
            colorops.write_png(out_dir / img_rel, case.image)
        mask_rel = f"masks/{case.case_id}.png"
        colorops.write_mask(out_dir / mask_rel, case.mask)
        rec = {"image": img_rel, "mask": mask_rel, **case.record(), **(extra or {})}
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    for rec in records:
        rec["_root"] = str(path.parent)
    return records


def load_case(record: dict) -> tuple[np.ndarray, np.ndarray]:
    root = Path(record.get("_root", "."))
    return colorops.read_image(root / record["image"]), colorops.read_mask(root / record["mask"])


# --------------------------------------------------------------------------- training pairs

@dataclass
class TrainingPair:
    patch_a: np.ndarray
    patch_b: np.ndarray
    label: int  # 0 consistent, 1 inconsistent
    angle: int = 0  # rotation applied to patch_b; 0 for consistent pairs
    qf: int | None = None
    jpeg_first: bool | None = None  # JPEG before (True) or after the hue edit
    same_image: bool = True
    sources: tuple[int, int] = (0, 0)
    offsets: tuple[tuple[int, int], tuple[int, int]] = ((0, 0), (0, 0))


def _random_patch(img, size, rng, align=1):
    H, W = img.shape[:2]
    if H < size or W < size:
        raise DimensionError(f"image {H}x{W} smaller than patch {size}")
    r = align * int(rng.integers(0, (H - size) // align + 1))
    c = align * int(rng.integers(0, (W - size) // align + 1))
    return img[r: r + size, c: c + size], (r, c)


def sample_training_pair(image_pool: Sequence[np.ndarray], mode: str, rng: np.random.Generator,
                         label: int | None = None, same_image: bool = True,
                         patch_size: int = 64, align: int = 2,
                         angles: Sequence[int] = TRAIN_ANGLES) -> TrainingPair:
    """Draw one labelled pair. ``label=None`` flips a fair coin.

    Patch corners are uniform over positions that are multiples of ``align``;
    the default of 2 keeps every patch in the same CFA phase, as grid patches
    at inference are.
    """
    if len(image_pool) == 0:
        raise ParameterError("empty image pool")
    if mode not in ("clean", "jpeg"):
        raise ParameterError(f"unknown mode {mode!r}")
    if label is None:
        label = int(rng.random() < 0.5)
    ia = int(rng.integers(len(image_pool)))
    ib = ia if same_image else int(rng.integers(len(image_pool)))
    pa, oa = _random_patch(image_pool[ia], patch_size, rng, align)
    pb, ob = _random_patch(image_pool[ib], patch_size, rng, align)
    angle = int(rng.choice(angles)) if label == 1 else 0

    qf, jpeg_first = None, None
    if mode == "jpeg":
        qf = int(rng.integers(55, 101))
        jpeg_first = bool(rng.random() < 0.5)
        pa = colorops.jpeg_roundtrip(pa, qf)
        if jpeg_first:
            pb = colorops.hue_rotate(colorops.jpeg_roundtrip(pb, qf), angle)
        else:
            pb = colorops.jpeg_roundtrip(colorops.hue_rotate(pb, angle), qf)
    else:
        pa, pb = pa.copy(), colorops.hue_rotate(pb, angle)
    return TrainingPair(pa, pb, label, angle, qf, jpeg_first, same_image, (ia, ib), (oa, ob))


# --------------------------------------------------------------------------- patch grid

@dataclass
class PatchGrid:
    patches: np.ndarray  # N x h x w x 3
    offsets: np.ndarray  # N x 2, (row, col), row-major grid order
    n_rows: int
    n_cols: int
    h: int
    w: int
    stride: int
    image_shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def centers(self) -> np.ndarray:
        return self.offsets + np.array([(self.h - 1) / 2.0, (self.w - 1) / 2.0])


def grid_shape(H: int, W: int, h: int = 64, w: int = 64, s: int = 32) -> tuple[int, int]:
    if s < 1:
        raise ParameterError("stride must be >= 1")
    if h > H or w > W:
        raise DimensionError(f"patch {h}x{w} larger than image {H}x{W}")
    return (H - h) // s + 1, (W - w) // s + 1


def extract_patch_grid(img, h: int = 64, w: int = 64, s: int = 32) -> PatchGrid:
    img = colorops.as_raster(img)
    H, W = img.shape[:2]
    n_rows, n_cols = grid_shape(H, W, h, w, s)
    rr, cc = np.meshgrid(np.arange(n_rows) * s, np.arange(n_cols) * s, indexing="ij")
    offsets = np.stack([rr.ravel(), cc.ravel()], axis=1)
    patches = np.stack([img[r: r + h, c: c + w] for r, c in offsets])
    return PatchGrid(patches, offsets, n_rows, n_cols, h, w, s, (H, W))
