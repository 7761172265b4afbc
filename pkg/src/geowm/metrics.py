"""Evaluation metrics for generated rollouts.

Appearance: PSNR (capped at 99 dB for exact matches) and single-scale SSIM
with a uniform 8x8 window, constants c1 = 0.01^2 and c2 = 0.03^2 on unit
range, computed on grayscale.

Depth: AbsRel and threshold accuracies delta_k (strict ratio < 1.25^k) on
jointly valid pixels.  Median scale alignment is applied first by default,
matching the usual monocular protocol for scale-ambiguous estimators; pass
``align=False`` when depths are metric, as with the synthetic scenes here.
Validity of predicted depth means finite and strictly positive.

Geometry: L1 Chamfer distance between back-projected point clouds, using
the convention sum of the two directed mean nearest-neighbor L1 terms, so
A = {origin}, B = {(1,0,0)} scores 2.0.

Tracking: fraction of visible ground-truth points tracked within
{1, 2, 4, 8, 16} pixels Euclidean error, averaged over the five
thresholds.  Predicted rollouts carry no tracks, so the evaluator runs the
block-matching tracker from the ground-truth frame-0 locations.

Data-dependent degeneracies (no jointly valid pixels, empty point clouds,
no visible pairs) raise NumericalError; structural misuse (shape
mismatches) raises ValueError; a frame-count mismatch between prediction
and ground truth raises FormatError so the command layer reports it as a
bad input.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .errors import FormatError, NumericalError
from .geometry import CameraIntrinsics, DepthMap
from .scenes import PredictedRollout, Rollout
from .tracking import TrackerConfig, track_points

PSNR_CAP = 99.0
SSIM_WINDOW = 8
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
TRACK_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
_LUMA = np.array([0.299, 0.587, 0.114])

CSV_COLUMNS = ("rollout", "psnr", "ssim", "absrel", "delta1", "delta2", "chamfer_l1", "track_delta_avg")


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    absrel: float
    delta1: float
    delta2: float
    chamfer_l1: float
    track_delta_avg: float

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse <= 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ _LUMA
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H,W,3) or (H,W) image, got {img.shape}")


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    x = _gray(pred)
    y = _gray(gt)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    w = SSIM_WINDOW
    if x.shape[0] < w or x.shape[1] < w:
        raise ValueError(f"image {x.shape} smaller than the {w}x{w} window")
    xs = sliding_window_view(x, (w, w))
    ys = sliding_window_view(y, (w, w))
    mx = xs.mean(axis=(-1, -2))
    my = ys.mean(axis=(-1, -2))
    vx = (xs * xs).mean(axis=(-1, -2)) - mx * mx
    vy = (ys * ys).mean(axis=(-1, -2)) - my * my
    cov = (xs * ys).mean(axis=(-1, -2)) - mx * my
    num = (2 * mx * my + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mx * mx + my * my + _SSIM_C1) * (vx + vy + _SSIM_C2)
    return float(np.mean(num / den))


def _joint_depth(pred: DepthMap, gt: DepthMap, align):
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"depth shape mismatch {pred.values.shape} vs {gt.values.shape}")
    joint = pred.valid & gt.valid & (gt.values > 0) & (pred.values > 0)
    if not np.any(joint):
        raise NumericalError("no jointly valid depth pixels")
    p = pred.values[joint]
    g = gt.values[joint]
    if align:
        scale = np.median(g) / np.median(p)
        p = p * scale
    return p, g


def absrel(pred: DepthMap, gt: DepthMap, align: bool = True) -> float:
    p, g = _joint_depth(pred, gt, align)
    return float(np.mean(np.abs(p - g) / g))


def delta_acc(pred: DepthMap, gt: DepthMap, threshold: float, align: bool = True) -> float:
    p, g = _joint_depth(pred, gt, align)
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < threshold))


def chamfer_l1(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[-1] != 3 or b.ndim != 2 or b.shape[-1] != 3:
        raise ValueError("point sets must be (n, 3)")
    if len(a) == 0 or len(b) == 0:
        raise NumericalError("empty point cloud")
    d_ab = cKDTree(b).query(a, p=1)[0].mean()
    d_ba = cKDTree(a).query(b, p=1)[0].mean()
    return float(d_ab + d_ba)


def track_delta_avg(pred_uv: np.ndarray, gt_uv: np.ndarray, visible: np.ndarray) -> float:
    pred_uv = np.asarray(pred_uv, dtype=np.float64)
    gt_uv = np.asarray(gt_uv, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    if pred_uv.shape != gt_uv.shape or pred_uv.shape[:-1] != visible.shape or pred_uv.shape[-1] != 2:
        raise ValueError(f"track shapes disagree: {pred_uv.shape}, {gt_uv.shape}, {visible.shape}")
    if not np.any(visible):
        raise NumericalError("no visible track pairs")
    err = np.linalg.norm(pred_uv[visible] - gt_uv[visible], axis=-1)
    return float(np.mean([np.mean(err < t) for t in TRACK_THRESHOLDS]))


def _pred_tensors(pred):
    if isinstance(pred, Rollout):
        depth = pred.depth_tensor()
        return pred.rgb_tensor().astype(np.float64), depth, pred.valid_tensor(), pred
    if isinstance(pred, PredictedRollout):
        depth = np.asarray(pred.depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        return np.asarray(pred.rgb, dtype=np.float64), depth, valid, None
    raise ValueError(f"unsupported prediction type {type(pred).__name__}")


def _backproject_cloud(depth, valid, k: CameraIntrinsics):
    v, u = np.nonzero(valid)
    z = depth[v, u]
    x = (u - k.cx) / k.fx * z
    y = (v - k.cy) / k.fy * z
    return np.stack([x, y, z], axis=-1)


def _subsample(points, budget, seed_key):
    if len(points) <= budget:
        return points
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    idx = rng.choice(len(points), size=budget, replace=False)
    return points[np.sort(idx)]


def evaluate_rollout(
    pred,
    gt: Rollout,
    intrinsics: CameraIntrinsics | None = None,
    *,
    align_depth: bool = True,
    cloud_budget: int = 2048,
    seed: int = 0,
    tracker: TrackerConfig = TrackerConfig(),
) -> MetricReport:
    """All metrics for one predicted rollout against its ground truth.

    Per-frame metrics are averaged over frames.  Point clouds are
    back-projected from valid depth and subsampled to ``cloud_budget``
    points with a seeded generator (the same index draw on both sides, so
    ground truth against itself scores zero Chamfer).  Tracking uses the
    prediction's own tracks when it is a ground-truth rollout, otherwise
    the block tracker seeded at ground-truth frame-0 points.
    """
    pred_rgb, pred_depth, pred_valid, pred_as_rollout = _pred_tensors(pred)
    gt_rgb = gt.rgb_tensor().astype(np.float64)
    gt_depth = gt.depth_tensor()
    gt_valid = gt.valid_tensor()
    if pred_rgb.shape[0] != gt_rgb.shape[0]:
        raise FormatError(f"frame count mismatch: prediction has {pred_rgb.shape[0]}, ground truth has {gt_rgb.shape[0]}")
    if pred_rgb.shape != gt_rgb.shape:
        raise ValueError(f"frame shape mismatch {pred_rgb.shape} vs {gt_rgb.shape}")
    k = intrinsics if intrinsics is not None else gt.config.intrinsics
    n = gt_rgb.shape[0]

    psnrs, ssims, absrels, d1s, d2s, chamfers = [], [], [], [], [], []
    for t in range(n):
        psnrs.append(psnr(pred_rgb[t], gt_rgb[t]))
        ssims.append(ssim(pred_rgb[t], gt_rgb[t]))
        dp = DepthMap(pred_depth[t], pred_valid[t])
        dg = DepthMap(gt_depth[t], gt_valid[t])
        absrels.append(absrel(dp, dg, align_depth))
        d1s.append(delta_acc(dp, dg, 1.25, align_depth))
        d2s.append(delta_acc(dp, dg, 1.25**2, align_depth))
        cloud_p = _subsample(_backproject_cloud(pred_depth[t], pred_valid[t], k), cloud_budget, [seed, t])
        cloud_g = _subsample(_backproject_cloud(gt_depth[t], gt_valid[t], k), cloud_budget, [seed, t])
        chamfers.append(chamfer_l1(cloud_p, cloud_g))

    gt_uv = np.stack([tr.uv for tr in gt.tracks])
    gt_vis = np.stack([tr.visible for tr in gt.tracks])
    start_vis = gt_vis[:, 0]
    gt_uv = gt_uv[start_vis]
    gt_vis = gt_vis[start_vis]
    if pred_as_rollout is not None:
        pred_uv = np.stack([tr.uv for tr in pred_as_rollout.tracks])[start_vis]
    else:
        pred_uv = track_points(pred_rgb, gt_uv[:, 0], tracker).uv
    track = track_delta_avg(pred_uv, gt_uv, gt_vis)

    return MetricReport(
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        absrel=float(np.mean(absrels)),
        delta1=float(np.mean(d1s)),
        delta2=float(np.mean(d2s)),
        chamfer_l1=float(np.mean(chamfers)),
        track_delta_avg=track,
    )


def aggregate(reports: list) -> MetricReport:
    """Mean over rollouts, field by field."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return MetricReport(**{f.name: float(np.mean([getattr(r, f.name) for r in reports])) for f in fields(MetricReport)})


def metrics_csv(named_reports: list) -> str:
    """CSV with one row per rollout and a final mean row."""
    if not named_reports:
        raise ValueError("no reports")
    lines = [",".join(CSV_COLUMNS)]
    for name, rep in named_reports:
        d = rep.to_dict()
        lines.append(",".join([str(name)] + [f"{d[c]:.6f}" for c in CSV_COLUMNS[1:]]))
    mean = aggregate([rep for _, rep in named_reports]).to_dict()
    lines.append(",".join(["mean"] + [f"{mean[c]:.6f}" for c in CSV_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"
