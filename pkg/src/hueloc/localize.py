"""From pairwise patch scores to a full-resolution heatmap and binary mask.

Every grid patch is embedded once; each patch k then yields a map of its
inconsistency against all other patches. Mean shift over those maps picks
the map shared by the (assumed) pristine majority, which is upsampled and
thresholded.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np
from PIL import Image

from . import dataset
from .dataset import PatchGrid
from .model import SiameseModel, feature_extract, head_probabilities

FIXED_THRESHOLD = 0.8
TAIL = 0.05
FLOOR = 0.5
DEFAULT_STRIDE = 32
PAIR_CHUNK = 8192


@dataclass
class InconsistencyMap:
    values: np.ndarray  # n_rows x n_cols in [0, 1]
    anchor: int | None = None  # grid index of the reference patch; None when fused

    @property
    def valid(self) -> np.ndarray:
        """False at the anchor's own cell, which holds the self-pair constant."""
        ok = np.ones(self.values.size, dtype=bool)
        if self.anchor is not None:
            ok[self.anchor] = False
        return ok.reshape(self.values.shape)


# --------------------------------------------------------------------------- scores

def precompute_features(model: SiameseModel, grid: PatchGrid) -> np.ndarray:
    """One backbone call per patch; row k is the feature of grid patch k."""
    return np.stack([feature_extract(model, p) for p in grid.patches])


def inconsistency_map(k: int, features: np.ndarray, model: SiameseModel,
                      grid_shape: tuple[int, int]) -> InconsistencyMap:
    n = len(features)
    if not 0 <= k < n:
        raise IndexError(f"anchor {k} outside grid of {n} patches")
    p = head_probabilities(model, features[k][None], features)
    return InconsistencyMap(p.reshape(grid_shape), anchor=k)


def pairwise_scores(model: SiameseModel, features: np.ndarray) -> np.ndarray:
    """N x N matrix of p(k, m). Only k < m is evaluated; the head is symmetric
    in its inputs, so mirroring is exact. The diagonal is the self-pair constant."""
    n = len(features)
    scores = np.empty((n, n), dtype=np.float32)
    scores[np.diag_indices(n)] = head_probabilities(model, features[:1], features[:1])[0]
    iu, ju = np.triu_indices(n, 1)
    for s in range(0, len(iu), PAIR_CHUNK):
        a, b = iu[s: s + PAIR_CHUNK], ju[s: s + PAIR_CHUNK]
        p = head_probabilities(model, features[a], features[b])
        scores[a, b] = p
        scores[b, a] = p
    return scores


def all_maps(scores: np.ndarray, grid_shape: tuple[int, int]) -> list[InconsistencyMap]:
    return [InconsistencyMap(scores[k].reshape(grid_shape), anchor=k) for k in range(len(scores))]


# --------------------------------------------------------------------------- fusion

@dataclass
class FusionResult:
    fused: InconsistencyMap
    iterations: int
    bandwidth: float
    converged: bool


def _masked_sq_dists(X: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Squared distances over jointly valid coordinates, rescaled to full dimension."""
    Vf = V.astype(np.float64)
    Xv = X * Vf
    X2 = Xv * X
    d2 = X2 @ Vf.T + Vf @ X2.T - 2.0 * Xv @ Xv.T
    both = Vf @ Vf.T
    return np.maximum(d2, 0.0) * X.shape[1] / np.maximum(both, 1.0)


def default_bandwidth(X: np.ndarray, V: np.ndarray | None = None) -> float:
    """Half the median pairwise distance (positive distances if the median is 0)."""
    if V is None:
        V = np.ones_like(X, dtype=bool)
    if len(X) < 2:
        return 1.0
    d = np.sqrt(_masked_sq_dists(X, V)[np.triu_indices(len(X), 1)])
    med = float(np.median(d))
    if med <= 0.0:
        pos = d[d > 0]
        med = float(np.median(pos)) if len(pos) else 2.0
    return med / 2.0


def fuse_mean_shift(maps: Sequence[InconsistencyMap], bandwidth: float | None = None,
                    tol: float = 1e-4, max_iter: int = 100,
                    exclude_self: bool = True) -> FusionResult:
    """Gaussian-kernel mean shift over maps seen as points in R^(n_rows*n_cols),
    started at their coordinate-wise mean.

    With ``exclude_self`` the anchor cell of each map is left out of both the
    distances and the averages. Updates are taken relative to the first map so
    that a set of identical maps is an exact fixed point.
    """
    if len(maps) == 0:
        raise ValueError("no inconsistency maps to fuse")
    shape = maps[0].values.shape
    if any(m.values.shape != shape for m in maps):
        raise ValueError("inconsistency maps differ in shape")
    X = np.stack([m.values.ravel() for m in maps]).astype(np.float64)
    if exclude_self:
        V = np.stack([m.valid.ravel() for m in maps])
    else:
        V = np.ones_like(X, dtype=bool)
    # Cells nobody may use (single map, or all anchors on one cell) fall back to all maps.
    V = V | ~V.any(axis=0)
    Vf = V.astype(np.float64)
    D = X.shape[1]
    ref = X[0]
    R = (X - ref) * Vf

    h = float(bandwidth) if bandwidth is not None else default_bandwidth(X, V)
    if h <= 0:
        raise ValueError("bandwidth must be positive")

    def weighted_mean(w):
        return ref + (w @ R) / (w @ Vf)

    y = weighted_mean(np.ones(len(X)))
    iterations, converged = 0, False
    counts = Vf.sum(axis=1)
    for _ in range(max_iter):
        d2 = (((X - y) ** 2) * Vf).sum(axis=1) * D / counts
        w = np.exp(-(d2 - d2.min()) / (2.0 * h * h))
        y_new = weighted_mean(w)
        step = np.linalg.norm(y_new - y)
        y = y_new
        if step <= tol * max(np.linalg.norm(y), 1e-12):
            converged = True
            break
        iterations += 1
    fused = np.clip(y, 0.0, 1.0).reshape(shape)
    return FusionResult(InconsistencyMap(fused), iterations, h, converged)


# --------------------------------------------------------------------------- heatmap

def _axis_weights(length: int, n: int, size: int, stride: int) -> np.ndarray:
    """length x n linear-interpolation weights, cell i anchored at the centre of
    patch i and clamped beyond the outermost centres."""
    centres = np.arange(n) * stride + (size - 1) / 2.0
    pos = np.clip(np.arange(length, dtype=np.float64), centres[0], centres[-1])
    u = (pos - centres[0]) / stride if n > 1 else np.zeros(length)
    i0 = np.minimum(np.floor(u).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = u - i0
    W = np.zeros((length, n))
    W[np.arange(length), i0] += 1.0 - frac
    W[np.arange(length), i1] += frac
    return W


def upsample_heatmap(fused: np.ndarray, H: int, W: int, patch: tuple[int, int],
                     stride: int) -> np.ndarray:
    fused = np.asarray(fused, dtype=np.float64)
    n_rows, n_cols = fused.shape
    Wr = _axis_weights(H, n_rows, patch[0], stride)
    Wc = _axis_weights(W, n_cols, patch[1], stride)
    heat = Wr @ fused @ Wc.T
    return np.clip(heat, fused.min(), fused.max())


@dataclass
class Threshold:
    tau: float
    mu: float
    sigma: float
    t: float


def gaussian_tail_threshold(heatmap: np.ndarray, tail: float = TAIL, floor: float = FLOOR) -> Threshold:
    """Fit N(mu, sigma^2) to the heatmap and cut off its right ``tail`` mass,
    never going below ``floor``."""
    values = np.asarray(heatmap, dtype=np.float64).ravel()
    mu, sigma = float(values.mean()), float(values.std())
    if not np.isfinite(sigma) or sigma <= 0.0:
        return Threshold(floor, mu, 0.0, mu)
    t = mu + NormalDist().inv_cdf(1.0 - tail) * sigma
    return Threshold(max(floor, t), mu, sigma, t)


def binarize(heatmap: np.ndarray, tau: float) -> np.ndarray:
    return np.asarray(heatmap) > tau


# --------------------------------------------------------------------------- pipeline

@dataclass
class LocalizationResult:
    heatmap: np.ndarray
    mask: np.ndarray
    tau: float
    mu: float
    sigma: float
    iterations: int
    bandwidth: float
    fused: np.ndarray
    grid_shape: tuple[int, int]
    self_value: float
    backbone_calls: int
    extras: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {"tau": self.tau, "mu": self.mu, "sigma": self.sigma,
                "iterations": self.iterations, "bandwidth": self.bandwidth,
                "grid": list(self.grid_shape), "backbone_calls": self.backbone_calls,
                "forged_fraction": float(self.mask.mean())}


def localize_pipeline(image, model: SiameseModel, stride: int = DEFAULT_STRIDE,
                      mode: str = "adaptive", fixed_threshold: float = FIXED_THRESHOLD,
                      invert: bool = False, patch: int = 64, bandwidth: float | None = None,
                      keep_intermediates: bool = False) -> LocalizationResult:
    if mode not in ("adaptive", "fixed"):
        raise ValueError(f"unknown threshold mode {mode!r}")
    grid = dataset.extract_patch_grid(image, patch, patch, stride)
    shape = (grid.n_rows, grid.n_cols)
    calls_before = model.backbone_calls
    features = precompute_features(model, grid)
    calls = model.backbone_calls - calls_before
    scores = pairwise_scores(model, features)
    maps = all_maps(scores, shape)
    fusion = fuse_mean_shift(maps, bandwidth=bandwidth)
    fused = fusion.fused.values
    if invert:
        fused = 1.0 - fused
    H, W = grid.image_shape
    heat = upsample_heatmap(fused, H, W, (patch, patch), stride)
    if mode == "adaptive":
        th = gaussian_tail_threshold(heat)
    else:
        th = Threshold(fixed_threshold, float(heat.mean()), float(heat.std()), fixed_threshold)
    extras = {"features": features, "scores": scores} if keep_intermediates else {}
    return LocalizationResult(heat, binarize(heat, th.tau), th.tau, th.mu, th.sigma,
                              fusion.iterations, fusion.bandwidth, fused, shape,
                              float(scores[0, 0]), calls, extras)


# --------------------------------------------------------------------------- files

_HEATMAP_MAGIC = b"HLHM"
_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, height, width


def write_heatmap_raw(path, heatmap: np.ndarray) -> None:
    heat = np.asarray(heatmap, dtype="<f4")
    H, W = heat.shape
    Path(path).write_bytes(_HEADER.pack(_HEATMAP_MAGIC, 1, 0, H, W) + heat.tobytes())


def read_heatmap_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated heatmap header")
    magic, version, _, H, W = _HEADER.unpack_from(data)
    if magic != _HEATMAP_MAGIC or version != 1:
        raise ValueError(f"{path}: not a raw heatmap file")
    body = data[_HEADER.size:]
    if len(body) != 4 * H * W:
        raise ValueError(f"{path}: expected {H}x{W} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).copy()


def write_heatmap_png(path, heatmap: np.ndarray) -> None:
    gray = np.floor(np.clip(heatmap, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(gray, "L").save(Path(path), format="PNG")
