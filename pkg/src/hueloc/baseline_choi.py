"""CFA baseline after Choi et al.: per-window hue estimation from green-channel
intermediate-value counting, turned into a sliding-window localizer.

A demosaiced green sample at an interpolated site is the mean of its recorded
neighbours and therefore lies strictly between their min and max. Recorded
samples carry no such constraint. Rotating the hue breaks the relation, so the
ratio (violating recorded sites) / (violating interpolated sites) is large only
when the window is examined at its original hue.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import colorops
from .colorops import GBRG, CfaPattern, DimensionError

WINDOW = 35
STRIDE = 17
ANGLE_STEP = 8


@dataclass(frozen=True)
class ChoiConfig:
    window: int = WINDOW
    stride: int = STRIDE
    angle_step: int = ANGLE_STEP
    cfa: CfaPattern = GBRG
    pristine_angles: tuple[int, ...] = (0, 352)

    @property
    def angle_grid(self) -> np.ndarray:
        return np.arange(0, 360, self.angle_step)


def _neighbour_stats(green: np.ndarray, green_mask: np.ndarray) -> np.ndarray:
    """Violation flags for the interior of ``green`` (one-pixel border dropped).

    Interpolated sites are compared with their 4-connected neighbours, recorded
    sites with their 4 diagonal neighbours; in a Bayer layout both are the
    nearest recorded greens.
    """
    g = np.asarray(green, dtype=np.float64)
    c = g[1:-1, 1:-1]
    cross = np.stack([g[:-2, 1:-1], g[2:, 1:-1], g[1:-1, :-2], g[1:-1, 2:]])
    diag = np.stack([g[:-2, :-2], g[:-2, 2:], g[2:, :-2], g[2:, 2:]])
    recorded = green_mask[1:-1, 1:-1]
    nb = np.where(recorded[None], diag, cross)
    between = (nb.min(axis=0) < c) & (c < nb.max(axis=0))
    return ~between


def violation_ratio(green_window: np.ndarray, green_positions: np.ndarray) -> float:
    """Recorded-site violators over interpolated-site violators, interior pixels only.

    A zero denominator gives ``numerator + 1``.
    """
    green_window = np.asarray(green_window)
    green_positions = np.asarray(green_positions, dtype=bool)
    if green_window.ndim != 2 or min(green_window.shape) < 3:
        raise DimensionError(f"window must be at least 3x3, got {green_window.shape}")
    if green_positions.shape != green_window.shape:
        raise DimensionError("green position mask does not match window")
    viol = _neighbour_stats(green_window, green_positions)
    recorded = green_positions[1:-1, 1:-1]
    num = int(np.count_nonzero(viol & recorded))
    den = int(np.count_nonzero(viol & ~recorded))
    return _ratio(num, den)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), num + 1.0)
    return float(out) if out.ndim == 0 else out


def estimate_angle(window_rgb, config: ChoiConfig = ChoiConfig(),
                   offset: tuple[int, int] = (0, 0)) -> int:
    """Grid-searched modification angle of one window.

    ``offset`` is the window's top-left position in the image, which fixes
    where the recorded greens are. Ties go to the smaller angle.
    """
    window_rgb = colorops.as_raster(window_rgb)
    h, w = window_rgb.shape[:2]
    if h < config.window or w < config.window:
        raise DimensionError(f"window {h}x{w} smaller than {config.window}")
    green_mask = config.cfa.green_mask(h, w, offset)
    ratios = [violation_ratio(colorops.hue_rotate(window_rgb, -int(b))[..., 1], green_mask)
              for b in config.angle_grid]
    return int(config.angle_grid[int(np.argmax(ratios))])


def window_offsets(length: int, window: int, stride: int) -> np.ndarray:
    """Start positions; a final window flush with the border is added if needed."""
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return np.array(starts)


def _box_sums(flags: np.ndarray, rows: np.ndarray, cols: np.ndarray, size: int) -> np.ndarray:
    """Sum of ``flags`` over size x size boxes at every (row, col) start."""
    sat = np.zeros((flags.shape[0] + 1, flags.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(flags, axis=0), axis=1)
    r0, c0 = rows[:, None], cols[None, :]
    r1, c1 = r0 + size, c0 + size
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


def window_angles(image, config: ChoiConfig = ChoiConfig()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Estimated angle for every sliding window.

    Equivalent to calling :func:`estimate_angle` per window, but each candidate
    rotation is applied once to the whole image and the counts per window come
    from summed-area tables.
    """
    image = colorops.as_raster(image)
    H, W = image.shape[:2]
    win = config.window
    if H < win or W < win:
        raise DimensionError(f"image {H}x{W} smaller than window {win}")
    rows = window_offsets(H, win, config.stride)
    cols = window_offsets(W, win, config.stride)
    green_mask = config.cfa.green_mask(H, W)
    recorded = green_mask[1:-1, 1:-1]

    hsv = (*colorops.rgb_to_hsv(image), image)
    best = np.full((len(rows), len(cols)), -np.inf)
    angles = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for beta in config.angle_grid:
        green = colorops.hue_rotated_channel(hsv, -int(beta), 1)
        viol = _neighbour_stats(green, green_mask)
        # Interior of a window starting at r is image rows r+1 .. r+win-2,
        # i.e. rows r .. r+win-3 of the border-trimmed flag map.
        num = _box_sums(viol & recorded, rows, cols, win - 2)
        den = _box_sums(viol & ~recorded, rows, cols, win - 2)
        ratio = _ratio(num, den)
        better = ratio > best
        best[better] = ratio[better]
        angles[better] = beta
    return angles, rows, cols


def choi_localize(image, config: ChoiConfig = ChoiConfig()) -> np.ndarray:
    """Binary forgery mask: a window votes forged unless its angle is pristine;
    each pixel takes the strict majority of the windows covering it."""
    image = colorops.as_raster(image)
    H, W = image.shape[:2]
    angles, rows, cols = window_angles(image, config)
    forged = ~np.isin(angles, config.pristine_angles)
    votes = np.zeros((H, W), dtype=np.int64)
    cover = np.zeros((H, W), dtype=np.int64)
    win = config.window
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            cover[r: r + win, c: c + win] += 1
            if forged[i, j]:
                votes[r: r + win, c: c + win] += 1
    return 2 * votes > cover
