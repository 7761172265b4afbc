"""Block-matching point tracker for generated video.

Generated rollouts carry no ground-truth tracks, so the evaluator needs a
tracker that works from pixels alone.  This one is deliberately simple and
fully deterministic: for each tracked point it slides an odd-sized block
from the current frame over a bounded search window in the next frame and
takes the integer displacement with the smallest sum of squared
differences on grayscale intensities.  Ties break toward the smallest
displacement magnitude, then lexicographically on (dv, du).

The fractional part of the starting location is carried along unchanged;
only integer displacements are estimated.  Frames are edge-padded so
blocks near the border stay well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class TrackerConfig:
    block: int = 7
    radius: int = 6
    # Mean squared intensity error above which a match is flagged unreliable.
    score_threshold: float = 0.01

    def __post_init__(self):
        if self.block < 1 or self.block % 2 == 0:
            raise ValueError("block size must be odd and positive")
        if self.radius < 1:
            raise ValueError("search radius must be positive")


@dataclass(frozen=True)
class TrackResult:
    """uv is (points, frames, 2); score is mean squared error per match."""

    uv: np.ndarray
    score: np.ndarray
    reliable: np.ndarray


def _to_gray(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 4 and rgb.shape[-1] == 3:
        return rgb @ _LUMA
    if rgb.ndim == 3:
        return rgb
    raise ValueError(f"expected (N,H,W,3) or (N,H,W) frames, got {rgb.shape}")


def _best_displacement(ssd: np.ndarray, radius: int):
    """Index of the minimal SSD cell with the documented tie-breaking."""
    lo = ssd.min()
    ties = np.argwhere(ssd <= lo)
    if len(ties) > 1:
        disp = ties - radius  # rows are (dv, du)
        order = np.lexsort((disp[:, 1], disp[:, 0], np.abs(disp).sum(axis=1)))
        ties = ties[order]
    dv, du = ties[0]
    return int(du) - radius, int(dv) - radius, float(lo)


def track_points(frames: np.ndarray, start_uv: np.ndarray, cfg: TrackerConfig = TrackerConfig()) -> TrackResult:
    """Track points from frame 0 through all frames.

    frames: (N, H, W, 3) RGB in [0, 1] or (N, H, W) grayscale.
    start_uv: (P, 2) pixel locations (u along width, v along height).
    """
    gray = _to_gray(frames)
    n, h, w = gray.shape
    start_uv = np.asarray(start_uv, dtype=np.float64)
    if start_uv.ndim != 2 or start_uv.shape[1] != 2:
        raise ValueError(f"start_uv must be (P, 2), got {start_uv.shape}")

    b, r = cfg.block, cfg.radius
    hb = b // 2
    pad = hb + r
    padded = np.pad(gray, ((0, 0), (pad, pad), (pad, pad)), mode="edge")

    p = len(start_uv)
    uv = np.zeros((p, n, 2))
    score = np.zeros((p, n))
    uv[:, 0] = start_uv

    try:
        from numpy.lib.stride_tricks import sliding_window_view
    except ImportError:  # pragma: no cover
        sliding_window_view = None

    for t in range(n - 1):
        cur, nxt = padded[t], padded[t + 1]
        for i in range(p):
            u, v = uv[i, t]
            bu = int(np.clip(np.round(u), 0, w - 1))
            bv = int(np.clip(np.round(v), 0, h - 1))
            # Padded coordinates of the block's top-left corner.
            y0, x0 = bv + pad - hb, bu + pad - hb
            block = cur[y0 : y0 + b, x0 : x0 + b]
            region = nxt[y0 - r : y0 + b + r, x0 - r : x0 + b + r]
            wins = sliding_window_view(region, (b, b))
            diff = wins - block
            ssd = np.einsum("ijkl,ijkl->ij", diff, diff)
            du, dv, best = _best_displacement(ssd, r)
            uv[i, t + 1] = (u + du, v + dv)
            score[i, t + 1] = best / (b * b)

    reliable = score <= cfg.score_threshold
    return TrackResult(uv=uv, score=score, reliable=reliable)
