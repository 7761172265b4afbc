"""End-effector waypoint extraction from rollouts.

Converts a rollout (frames + depth + instruction) into gripper waypoints
in four stages: ground the target object and the end-effector in the
first frame, follow the end-effector with a retention-gated point
tracker, estimate a per-frame pose with a confidence-gated temporal
consistency check (depth-centroid translation and slerp rotation fill
for rejected frames), then insert the best-scoring grasp candidate and
smooth the result.

Perception is pluggable: the pipeline only talks to the four backend
roles bundled in :class:`PerceptionSuite`, so the same code runs against
simulator ground truth (oracle backends, optionally with injected
failures) and against pixels alone (palette matching, block matching,
point-cloud fitting).  Backends are stateless between calls and
deterministic for a fixed seed, and each reports its failure-injection
knobs for the diagnostics log.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, FormatError, GeowmError, GroundingError, MissingInputError
from .geometry import (
    MIN_CAMERA_DEPTH,
    CameraIntrinsics,
    DepthMap,
    RigidTransform,
    geodesic_distance,
    invert,
    rotation_mean,
    slerp,
    so3_exp,
)
from .scenes import MISS_ID, PredictedRollout, Rollout, SceneConfig, render_frame, solids_at
from .tracking import TrackerConfig, track_points

# Occlusion tolerance when checking a reprojected point against the
# z-buffer; matches the renderer's ground-truth track visibility rule.
_VIS_REL_TOL = 0.05
_VIS_ABS_TOL = 0.02

KEEP = "keep"
RE_ANCHOR = "re_anchor"
RE_GROUND = "re_ground"

ACCEPTED = "accepted"
FILLED = "centroid+slerp"


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class GateConfig:
    """Thresholds for the tracker intervention gate.

    ``retention_floor`` is the fraction of anchors that must stay
    reliable before the tracker re-anchors; ``collapse_drop`` is the
    single-frame retention drop that triggers re-grounding instead.
    Both comparisons are strict.
    """

    retention_floor: float = 0.5
    collapse_drop: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.retention_floor < 1.0:
            raise ConfigError(f"retention_floor must lie in (0,1), got {self.retention_floor}")
        if self.collapse_drop <= 0.0:
            raise ConfigError(f"collapse_drop must be positive, got {self.collapse_drop}")


@dataclass(frozen=True)
class FallbackConfig:
    """Pose acceptance thresholds.

    Estimates with confidence >= ``min_confidence`` are accepted
    outright; below it, a pose is rejected when it jumps more than
    ``max_translation_jump`` metres or ``max_rotation_jump`` radians
    from the last accepted pose.
    """

    min_confidence: float = 0.6
    max_translation_jump: float = 0.05
    max_rotation_jump: float = math.radians(15.0)

    def __post_init__(self):
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ConfigError(f"min_confidence must lie in [0,1], got {self.min_confidence}")
        if self.max_translation_jump <= 0 or self.max_rotation_jump <= 0:
            raise ConfigError("jump thresholds must be positive")


@dataclass(frozen=True)
class ExtractionConfig:
    """Everything the end-to-end extraction pipeline needs beyond a suite."""

    gate: GateConfig = field(default_factory=GateConfig)
    fallback: FallbackConfig = field(default_factory=FallbackConfig)
    grasp_weight_t: float = 1.0
    grasp_weight_r: float = 0.3
    smoothing_window: int = 3
    n_anchors: int = 100
    # Pixel radius of the disk stamped around each reliable track point
    # when rebuilding the mask estimate.  0 keeps exactly the tracked
    # pixels, which keeps the depth-centroid fallback on the surface.
    mask_radius: int = 0

    def __post_init__(self):
        if self.grasp_weight_t < 0 or self.grasp_weight_r < 0:
            raise ConfigError("grasp weights must be nonnegative")
        if self.grasp_weight_t == 0 and self.grasp_weight_r == 0:
            raise ConfigError("at least one grasp weight must be positive")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ConfigError(f"smoothing window must be odd and positive, got {self.smoothing_window}")
        if self.n_anchors < 1:
            raise ConfigError("need at least one anchor point")
        if self.mask_radius < 0:
            raise ConfigError("mask radius must be nonnegative")


# ---------------------------------------------------------------------------
# Tracker gate state machine


@dataclass(frozen=True)
class TrackerState:
    """Retention bookkeeping for one frame.

    ``retention`` is the value carried into the next frame's comparison:
    the observed ratio after a ``keep``, reset to 1.0 after an
    intervention (the anchor set was just replaced).  ``drop`` is the
    observed frame-to-frame change before any intervention.
    """

    frame: int
    anchor_count: int
    n_reliable: int
    retention: float
    drop: float
    decision: str

    def __post_init__(self):
        if self.anchor_count < 1:
            raise ValueError(f"anchor_count must be positive, got {self.anchor_count}")
        if not 0 <= self.n_reliable <= self.anchor_count:
            raise ValueError(
                f"n_reliable {self.n_reliable} outside 0..{self.anchor_count}"
            )

    @classmethod
    def seeded(cls, frame: int, anchor_count: int) -> "TrackerState":
        return cls(frame, anchor_count, anchor_count, 1.0, 0.0, "seed")


def gate_step(state: TrackerState, n_reliable: int, cfg: GateConfig) -> TrackerState:
    """Advance the gate by one frame and decide on an intervention.

    A single-frame collapse (drop below ``-collapse_drop``) outranks the
    gradual-drift branch: a collapsed frame invalidates the mask that
    re-anchoring would sample from, so it goes back to the grounder.
    Exactly one decision is produced for any valid input.
    """
    ratio = n_reliable / state.anchor_count
    drop = ratio - state.retention
    if drop < -cfg.collapse_drop:
        decision = RE_GROUND
    elif ratio < cfg.retention_floor:
        decision = RE_ANCHOR
    else:
        decision = KEEP
    retention = 1.0 if decision != KEEP else ratio
    return TrackerState(state.frame + 1, state.anchor_count, n_reliable, retention, drop, decision)


# ---------------------------------------------------------------------------
# Keypoint and mask helpers


def sample_keypoints(mask: np.ndarray, n: int) -> np.ndarray:
    """Up to n pixel centers spread evenly over the mask, row-major.

    Deterministic: strided selection over the flattened support, no RNG.
    """
    vs, us = np.nonzero(mask)
    if len(vs) == 0:
        raise GroundingError("cannot sample keypoints from an empty mask")
    k = min(n, len(vs))
    pick = np.unique(np.round(np.linspace(0, len(vs) - 1, k)).astype(int))
    return np.stack([us[pick], vs[pick]], axis=1).astype(np.float64)


def mask_from_points(uv: np.ndarray, shape: tuple, radius: int = 0) -> np.ndarray:
    """Bool mask with a (2*radius+1)-square stamped at each rounded point."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    for u, v in np.asarray(uv, dtype=np.float64).reshape(-1, 2):
        if not (np.isfinite(u) and np.isfinite(v)):
            continue
        iu, iv = int(round(u)), int(round(v))
        lo_v, hi_v = max(iv - radius, 0), min(iv + radius + 1, h)
        lo_u, hi_u = max(iu - radius, 0), min(iu + radius + 1, w)
        if lo_v < hi_v and lo_u < hi_u:
            mask[lo_v:hi_v, lo_u:hi_u] = True
    return mask


def _backproject_mask(depth: DepthMap, mask: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for every valid masked pixel; (M, 3), maybe empty."""
    ok = mask & depth.valid & (depth.values > 0)
    vs, us = np.nonzero(ok)
    z = depth.values[vs, us]
    x = (us - intrinsics.cx) / intrinsics.fx * z
    y = (vs - intrinsics.cy) / intrinsics.fy * z
    return np.stack([x, y, z], axis=1)


# ---------------------------------------------------------------------------
# Perception backends.  Duck-typed roles:
#   grounder.ground(rgb, depth, instruction, frame_index) -> (object_mask, ee_mask)
#   grounder.reground(rgb, depth, instruction, frame_index) -> ee_mask
#   tracker.track(rgb_clip, start_uv, t_start) -> TrackSegment
#   pose_estimator.estimate(rgb, depth, ee_mask, camera, frame_index)
#       -> (world RigidTransform, confidence in [0,1])
#   grasp_proposer.propose(points_world) -> list[RigidTransform]
# plus knobs() -> dict on each.


class TrackSegment(NamedTuple):
    """Per-frame positions/reliability from t_start on; row 0 = seeding frame."""

    uv: np.ndarray  # (frames, points, 2)
    reliable: np.ndarray  # (frames, points) bool


class OracleGrounder:
    """Reads masks straight from the simulator's ID buffer.

    ``drop_rate`` randomly deletes that fraction of mask pixels, which
    mimics an under-segmenting grounder; deterministic per frame index.
    """

    def __init__(self, config: SceneConfig, drop_rate: float = 0.0, seed: int = 0):
        if not 0.0 <= drop_rate < 1.0:
            raise ConfigError(f"drop_rate must lie in [0,1), got {drop_rate}")
        self.config = config
        self.drop_rate = drop_rate
        self.seed = seed

    def knobs(self) -> dict:
        return {"backend": "oracle_grounder", "drop_rate": self.drop_rate}

    def _thin(self, mask: np.ndarray, frame_index: int) -> np.ndarray:
        if self.drop_rate == 0.0:
            return mask
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x92D0, frame_index]))
        keep = rng.uniform(size=mask.shape) >= self.drop_rate
        return mask & keep

    def ground(self, rgb, depth, instruction, frame_index: int = 0):
        frame = render_frame(self.config, frame_index)
        object_mask = frame.object_ids == instruction.target_object_id
        return self._thin(object_mask, frame_index), self._thin(frame.ee_mask, frame_index)

    def reground(self, rgb, depth, instruction, frame_index: int) -> np.ndarray:
        return self._thin(render_frame(self.config, frame_index).ee_mask, frame_index)


class ColorGrounder:
    """Segments by nearest flat-shade color; works on generated pixels.

    Needs the scene config only for the palette (object and end-effector
    colors), not for geometry.
    """

    def __init__(self, config: SceneConfig, tol: float = 0.12):
        if config.ee is None:
            raise ConfigError("scene has no end-effector to ground")
        if tol <= 0:
            raise ConfigError(f"color tolerance must be positive, got {tol}")
        self.config = config
        self.tol = tol

    def knobs(self) -> dict:
        return {"backend": "color_grounder", "tol": self.tol}

    def _match(self, rgb: np.ndarray, color) -> np.ndarray:
        d = np.linalg.norm(np.asarray(rgb, dtype=np.float64) - np.asarray(color), axis=-1)
        return d < self.tol

    def ground(self, rgb, depth, instruction, frame_index: int = 0):
        by_id = {p.object_id: p.color for p in self.config.primitives}
        target = by_id.get(instruction.target_object_id)
        if target is None:
            raise GroundingError(
                f"instruction target {instruction.target_object_id} is not a scene object"
            )
        return self._match(rgb, target), self._match(rgb, self.config.ee.color)

    def reground(self, rgb, depth, instruction, frame_index: int) -> np.ndarray:
        return self._match(rgb, self.config.ee.color)


class OracleTracker:
    """Traces seeded pixels through the scripted scene exactly.

    Reliability is ground-truth visibility (in front, in bounds, owning
    object on top).  Injection knobs: ``drop_schedule`` maps absolute
    frame -> fraction of the anchor set to kill at that frame (kills are
    persistent), ``drop_rate`` kills each live point per frame with that
    probability, ``drift`` adds Gaussian pixel noise.
    """

    def __init__(
        self,
        rollout: Rollout,
        drop_schedule: dict | None = None,
        drop_rate: float = 0.0,
        drift: float = 0.0,
        seed: int = 0,
    ):
        if not 0.0 <= drop_rate < 1.0:
            raise ConfigError(f"drop_rate must lie in [0,1), got {drop_rate}")
        if drift < 0:
            raise ConfigError(f"drift must be nonnegative, got {drift}")
        self.rollout = rollout
        self.drop_schedule = dict(drop_schedule or {})
        self.drop_rate = drop_rate
        self.drift = drift
        self.seed = seed

    def knobs(self) -> dict:
        return {
            "backend": "oracle_tracker",
            "drop_schedule": {str(k): v for k, v in sorted(self.drop_schedule.items())},
            "drop_rate": self.drop_rate,
            "drift": self.drift,
        }

    def _owning_part(self, oid: int, world_point: np.ndarray, t: int):
        """(part_key, local point) for the solid surface under the pixel."""
        best = None
        best_slack = np.inf
        for s in solids_at(self.rollout.config, t):
            if s.object_id != oid:
                continue
            local = invert(s.pose).apply(world_point)
            if s.kind == "sphere":
                slack = abs(float(np.linalg.norm(local)) - s.size[0])
            elif s.kind == "box":
                slack = float(np.max(np.abs(local) - np.asarray(s.size)))
            else:  # plane
                slack = abs(float(local[2]) - s.size[0])
            if slack < best_slack:
                best_slack, best = slack, (s.part_key, local)
        if best is None or best_slack > 1e-5:
            return None
        return best

    def track(self, rgb: np.ndarray, start_uv: np.ndarray, t_start: int) -> TrackSegment:
        cfg = self.rollout.config
        frames = self.rollout.frames
        K = cfg.intrinsics
        n_frames = len(frames) - t_start
        start_uv = np.asarray(start_uv, dtype=np.float64).reshape(-1, 2)
        n = len(start_uv)
        uv = np.full((n_frames, n, 2), np.nan)
        reliable = np.zeros((n_frames, n), dtype=bool)

        seeds = []
        f0 = frames[t_start]
        cam0_inv = invert(f0.camera)
        for i, (u, v) in enumerate(start_uv):
            iu, iv = int(round(u)), int(round(v))
            if not (0 <= iu < cfg.width and 0 <= iv < cfg.height):
                seeds.append(None)
                continue
            oid = int(f0.object_ids[iv, iu])
            if oid == MISS_ID or not f0.depth.valid[iv, iu]:
                seeds.append(None)
                continue
            z = f0.depth.values[iv, iu]
            x_cam = np.array([(iu - K.cx) / K.fx * z, (iv - K.cy) / K.fy * z, z])
            owner = self._owning_part(oid, cam0_inv.apply(x_cam), t_start)
            seeds.append(None if owner is None else (oid, owner[0], owner[1]))

        part_poses = [
            {s.part_key: s.pose for s in solids_at(cfg, t_start + r)} for r in range(n_frames)
        ]
        for i, seed_info in enumerate(seeds):
            if seed_info is None:
                continue
            oid, part, local = seed_info
            for r in range(n_frames):
                t = t_start + r
                x_w = part_poses[r][part].apply(local)
                x_c = frames[t].camera.apply(x_w)
                if x_c[2] <= MIN_CAMERA_DEPTH:
                    continue
                u = K.fx * x_c[0] / x_c[2] + K.cx
                v = K.fy * x_c[1] / x_c[2] + K.cy
                uv[r, i] = (u, v)
                iu, iv = int(round(u)), int(round(v))
                if 0 <= iu < cfg.width and 0 <= iv < cfg.height:
                    dm = frames[t].depth
                    tol = max(_VIS_ABS_TOL, _VIS_REL_TOL * x_c[2])
                    reliable[r, i] = (
                        bool(dm.valid[iv, iu])
                        and int(frames[t].object_ids[iv, iu]) == oid
                        and x_c[2] <= dm.values[iv, iu] + tol
                    )
        uv[0] = start_uv
        return self._inject(TrackSegment(uv, reliable), t_start)

    def _inject(self, seg: TrackSegment, t_start: int) -> TrackSegment:
        uv, reliable = seg.uv.copy(), seg.reliable.copy()
        n_frames, n = reliable.shape
        dead = np.zeros(n, dtype=bool)
        rng_drop = np.random.default_rng(np.random.SeedSequence([self.seed, 0xD20B, t_start]))
        rng_drift = np.random.default_rng(np.random.SeedSequence([self.seed, 0xD21F, t_start]))
        for r in range(1, n_frames):
            frac = self.drop_schedule.get(t_start + r, 0.0)
            if frac > 0:
                want = int(round(frac * n))
                alive = np.flatnonzero(~dead)
                dead[alive[:want]] = True
            if self.drop_rate > 0:
                dead |= rng_drop.uniform(size=n) < self.drop_rate
            if self.drift > 0:
                uv[r] += rng_drift.normal(scale=self.drift, size=(n, 2))
            reliable[r] &= ~dead
        return TrackSegment(uv, reliable)


class BlockMatchTracker:
    """Pixel-only tracking via block matching; see :mod:`geowm.tracking`."""

    def __init__(self, config: TrackerConfig = TrackerConfig()):
        self.config = config

    def knobs(self) -> dict:
        return {
            "backend": "block_match_tracker",
            "block": self.config.block,
            "radius": self.config.radius,
            "score_threshold": self.config.score_threshold,
        }

    def track(self, rgb: np.ndarray, start_uv: np.ndarray, t_start: int) -> TrackSegment:
        result = track_points(rgb[t_start:], start_uv, self.config)
        return TrackSegment(
            uv=np.transpose(result.uv, (1, 0, 2)),
            reliable=np.ascontiguousarray(result.reliable.T),
        )


class OraclePoseEstimator:
    """Returns the scripted end-effector pose, optionally corrupted.

    ``outlier_frames`` get their translation shifted by
    ``outlier_offset`` and their confidence set to
    ``outlier_confidence``; ``noise_t``/``noise_r`` add Gaussian
    translation/axis-angle noise everywhere; ``confidence_schedule``
    overrides the reported confidence per frame.
    """

    def __init__(
        self,
        config: SceneConfig,
        confidence: float = 1.0,
        confidence_schedule: dict | None = None,
        outlier_frames: tuple = (),
        outlier_offset: tuple = (0.5, 0.0, 0.0),
        outlier_confidence: float = 0.1,
        noise_t: float = 0.0,
        noise_r: float = 0.0,
        seed: int = 0,
    ):
        if config.ee is None:
            raise ConfigError("scene has no end-effector to estimate")
        self.config = config
        self.confidence = confidence
        self.confidence_schedule = dict(confidence_schedule or {})
        self.outlier_frames = frozenset(int(f) for f in outlier_frames)
        self.outlier_offset = np.asarray(outlier_offset, dtype=np.float64)
        self.outlier_confidence = outlier_confidence
        self.noise_t = noise_t
        self.noise_r = noise_r
        self.seed = seed

    def knobs(self) -> dict:
        return {
            "backend": "oracle_pose",
            "outlier_frames": sorted(self.outlier_frames),
            "outlier_offset": self.outlier_offset.tolist(),
            "outlier_confidence": self.outlier_confidence,
            "noise_t": self.noise_t,
            "noise_r": self.noise_r,
        }

    def estimate(self, rgb, depth, ee_mask, camera, frame_index: int):
        pose = self.config.ee.script.pose_at(frame_index)
        R, t = pose.R, pose.t.copy()
        conf = self.confidence_schedule.get(frame_index, self.confidence)
        if frame_index in self.outlier_frames:
            t = t + self.outlier_offset
            conf = self.outlier_confidence
        if self.noise_t > 0 or self.noise_r > 0:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x905E, frame_index]))
            t = t + rng.normal(scale=self.noise_t, size=3)
            if self.noise_r > 0:
                R = so3_exp(rng.normal(scale=self.noise_r, size=3)) @ R
        return RigidTransform(R, t), float(conf)


class ModelFitPoseEstimator:
    """Aligns the end-effector's analytic box layout to the masked cloud.

    Rotation comes from matching principal axes of the observed cloud to
    the model cloud's axes (signs fixed toward the dominant component),
    translation from the centroid difference.  Confidence decays with
    the mean nearest-neighbor residual in the model frame.  Coarse, but
    honest: it never reads simulator state.
    """

    def __init__(self, ee, intrinsics: CameraIntrinsics | None = None, residual_scale: float = 0.05):
        if ee is None:
            raise ConfigError("pose fitting needs an end-effector description")
        if residual_scale <= 0:
            raise ConfigError("residual_scale must be positive")
        self.ee = ee
        self.intrinsics = intrinsics
        self.residual_scale = residual_scale
        self._model = self._model_cloud()
        self._model_tree = cKDTree(self._model)

    def knobs(self) -> dict:
        return {"backend": "model_fit_pose", "residual_scale": self.residual_scale}

    def _model_cloud(self) -> np.ndarray:
        """Corner + face-center samples of each part box, open gripper."""
        pts = []
        halves = [self.ee.palm_half, self.ee.finger_half, self.ee.finger_half]
        for half, off in zip(halves, self.ee.part_offsets(gripper_open=True)):
            h = np.asarray(half)
            for sx in (-1, 1):
                for sy in (-1, 1):
                    for sz in (-1, 1):
                        pts.append(off.t + h * [sx, sy, sz])
            for axis in range(3):
                for sign in (-1, 1):
                    face = np.zeros(3)
                    face[axis] = sign * h[axis]
                    pts.append(off.t + face)
        return np.asarray(pts)

    @staticmethod
    def _axes(points: np.ndarray) -> np.ndarray:
        """Right-handed principal axes (columns), deterministic signs."""
        centered = points - points.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        axes = vt.T
        for j in range(3):
            k = int(np.argmax(np.abs(axes[:, j])))
            if axes[k, j] < 0:
                axes[:, j] = -axes[:, j]
        if np.linalg.det(axes) < 0:
            axes[:, 2] = -axes[:, 2]
        return axes

    def estimate(self, rgb, depth, ee_mask, camera, frame_index: int):
        K = self.intrinsics if self.intrinsics is not None else _default_intrinsics(depth)
        pts_cam = _backproject_mask(depth, ee_mask, K)
        if len(pts_cam) < 4:
            return RigidTransform.identity(), 0.0
        pts_w = invert(camera).apply(pts_cam)
        R = self._axes(pts_w) @ self._axes(self._model).T
        if np.linalg.det(R) < 0:  # pragma: no cover - sign fixing keeps det +1
            R[:, 2] = -R[:, 2]
        t = pts_w.mean(axis=0) - R @ self._model.mean(axis=0)
        local = (pts_w - t) @ R
        residual = float(self._model_tree.query(local)[0].mean())
        conf = float(np.exp(-residual / self.residual_scale))
        return RigidTransform(R, t), conf


def _default_intrinsics(depth: DepthMap) -> CameraIntrinsics:
    """Fallback pinhole matching the renderer's default when none is given."""
    h, w = depth.values.shape
    return CameraIntrinsics(fx=float(w), fy=float(w), cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


class ProceduralGraspProposer:
    """Candidate grasps around the cloud centroid; no learned model.

    Orientations sample rotations about random axes, positions jitter
    around the centroid.  Deterministic per seed and call-order free.
    """

    def __init__(self, n_candidates: int = 8, jitter: float = 0.02, seed: int = 0):
        if n_candidates < 1:
            raise ConfigError("need at least one grasp candidate")
        self.n_candidates = n_candidates
        self.jitter = jitter
        self.seed = seed

    def knobs(self) -> dict:
        return {
            "backend": "procedural_grasps",
            "n_candidates": self.n_candidates,
            "jitter": self.jitter,
        }

    def propose(self, points: np.ndarray) -> list:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise GroundingError("cannot propose grasps on an empty point cloud")
        centroid = points.mean(axis=0)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x6A57]))
        out = []
        for _ in range(self.n_candidates):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0.0, np.pi)
            offset = rng.normal(scale=self.jitter, size=3)
            out.append(RigidTransform(so3_exp(axis * angle), centroid + offset))
        return out


@dataclass
class PerceptionSuite:
    """The four pluggable perception roles the pipeline composes."""

    grounder: object
    tracker: object
    pose_estimator: object
    grasp_proposer: object

    def knobs(self) -> dict:
        return {
            "grounder": self.grounder.knobs(),
            "tracker": self.tracker.knobs(),
            "pose_estimator": self.pose_estimator.knobs(),
            "grasp_proposer": self.grasp_proposer.knobs(),
        }


def oracle_suite(rollout: Rollout, **overrides) -> PerceptionSuite:
    """All-oracle suite for a ground-truth rollout; kwargs replace roles."""
    suite = PerceptionSuite(
        grounder=OracleGrounder(rollout.config),
        tracker=OracleTracker(rollout),
        pose_estimator=OraclePoseEstimator(rollout.config),
        grasp_proposer=ProceduralGraspProposer(),
    )
    for name, backend in overrides.items():
        if not hasattr(suite, name):
            raise ConfigError(f"unknown suite role {name!r}")
        setattr(suite, name, backend)
    return suite


def perceptual_suite(config: SceneConfig, tracker_config: TrackerConfig | None = None) -> PerceptionSuite:
    """Pixels-only suite; needs the scene config for palette and gripper shape."""
    return PerceptionSuite(
        grounder=ColorGrounder(config),
        tracker=BlockMatchTracker(tracker_config or TrackerConfig()),
        pose_estimator=ModelFitPoseEstimator(config.ee, intrinsics=config.intrinsics),
        grasp_proposer=ProceduralGraspProposer(),
    )


# ---------------------------------------------------------------------------
# Pipeline stages


class Grounding(NamedTuple):
    object_mask: np.ndarray
    ee_mask: np.ndarray
    pose: RigidTransform
    confidence: float


def ground_scene(rgb0, depth0, instruction, suite: PerceptionSuite, camera=None) -> Grounding:
    """Locate target object and end-effector in frame 0, with initial pose."""
    if instruction is None:
        raise GroundingError("rollout carries no instruction to ground")
    camera = camera if camera is not None else RigidTransform.identity()
    object_mask, ee_mask = suite.grounder.ground(rgb0, depth0, instruction, 0)
    if not object_mask.any():
        raise GroundingError(
            f"grounder found no pixels for target object {instruction.target_object_id}"
        )
    if not ee_mask.any():
        raise GroundingError("grounder found no end-effector pixels")
    pose, conf = suite.pose_estimator.estimate(rgb0, depth0, ee_mask, camera, 0)
    return Grounding(object_mask, ee_mask, pose, conf)


@dataclass
class TrackHistory:
    """Per-frame mask estimates plus the gate's full decision log."""

    masks: list
    states: list

    @property
    def decisions(self) -> list:
        return [s.decision for s in self.states]


def track_rollout(
    rgb: np.ndarray,
    ee_mask0: np.ndarray,
    suite: PerceptionSuite,
    cfg: GateConfig = GateConfig(),
    *,
    instruction=None,
    depths: list | None = None,
    n_anchors: int = 100,
    mask_radius: int = 0,
) -> TrackHistory:
    """Follow the end-effector mask through the clip under the gate.

    Re-anchoring resamples anchors from the newest point-built mask;
    re-grounding asks the grounder for a fresh mask first.  Either way
    tracking restarts at the triggering frame and retention resets.
    """
    n_frames = rgb.shape[0]
    anchors = sample_keypoints(ee_mask0, n_anchors)
    segment = suite.tracker.track(rgb, anchors, 0)
    seg_start = 0
    state = TrackerState.seeded(0, len(anchors))
    masks = [ee_mask0]
    states = [state]
    shape = ee_mask0.shape

    for t in range(1, n_frames):
        row = t - seg_start
        reliable_row = segment.reliable[row]
        observed = gate_step(state, int(reliable_row.sum()), cfg)
        point_mask = mask_from_points(segment.uv[row][reliable_row], shape, mask_radius)

        if observed.decision == RE_GROUND:
            mask = suite.grounder.reground(rgb[t], depths[t] if depths else None, instruction, t)
            if not mask.any():
                raise GroundingError(f"re-grounding produced an empty mask at frame {t}")
        elif observed.decision == RE_ANCHOR:
            mask = point_mask
            if not mask.any():
                raise GroundingError(f"no reliable points left to re-anchor at frame {t}")
        else:
            mask = point_mask if point_mask.any() else masks[-1]

        if observed.decision == KEEP:
            state = observed
        else:
            anchors = sample_keypoints(mask, n_anchors)
            segment = suite.tracker.track(rgb, anchors, t)
            seg_start = t
            # Carry corrected anchor counts forward; the stored state keeps
            # the observed ratio that triggered the intervention.
            state = replace(observed, anchor_count=len(anchors), n_reliable=len(anchors))

        masks.append(mask)
        states.append(observed)
    return TrackHistory(masks, states)


def consistency_check(pose: RigidTransform, prev: RigidTransform, cfg: FallbackConfig) -> bool:
    """True when the pose stayed within both jump thresholds."""
    jump_t = float(np.linalg.norm(pose.t - prev.t))
    jump_r = geodesic_distance(pose.R, prev.R)
    return not (jump_t > cfg.max_translation_jump or jump_r > cfg.max_rotation_jump)


def recover_translation(depth: DepthMap, ee_mask: np.ndarray, intrinsics: CameraIntrinsics):
    """Centroid of the backprojected valid mask pixels, camera frame.

    Returns None when no masked pixel has valid depth; the caller treats
    such frames as unrecoverable and interpolates them instead.
    """
    pts = _backproject_mask(depth, ee_mask, intrinsics)
    if len(pts) == 0:
        return None
    return pts.mean(axis=0)


@dataclass
class EETrajectory:
    """Per-frame end-effector pose with provenance and confidence."""

    poses: list
    provenance: list
    confidence: np.ndarray

    def __post_init__(self):
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if not (len(self.poses) == len(self.provenance) == len(self.confidence)):
            raise ValueError("trajectory field lengths differ")
        if ACCEPTED not in self.provenance:
            raise GroundingError("trajectory has no accepted pose frames")

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def translations(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses])

    def to_jsonable(self) -> list:
        return [
            {
                "R": p.R.tolist(),
                "t": p.t.tolist(),
                "provenance": prov,
                "confidence": float(c),
            }
            for p, prov, c in zip(self.poses, self.provenance, self.confidence)
        ]


def fill_rejected(
    poses: list,
    accepted: list,
    fallback_translations: list | None = None,
    confidence: np.ndarray | None = None,
) -> EETrajectory:
    """Complete a partially accepted pose sequence.

    Rejected frames get their rotation from slerp between the nearest
    accepted neighbors (copied at the ends) and their translation from
    the supplied per-frame fallback, falling back to linear
    interpolation between accepted neighbors when that is None too.
    Accepted frames pass through untouched.
    """
    n = len(poses)
    if len(accepted) != n:
        raise ValueError(f"got {n} poses but {len(accepted)} accepted flags")
    idx = [i for i, a in enumerate(accepted) if a]
    if not idx:
        raise GroundingError("cannot fill a trajectory with zero accepted frames")
    fallback_translations = fallback_translations or [None] * n
    confidence = np.ones(n) if confidence is None else np.asarray(confidence, dtype=np.float64)

    out_poses = []
    provenance = []
    for t in range(n):
        if accepted[t]:
            out_poses.append(poses[t])
            provenance.append(ACCEPTED)
            continue
        left = max((i for i in idx if i < t), default=None)
        right = min((i for i in idx if i > t), default=None)
        if left is None:
            R = poses[right].R
        elif right is None:
            R = poses[left].R
        else:
            R = slerp(poses[left].R, poses[right].R, (t - left) / (right - left))
        trans = fallback_translations[t]
        if trans is None:
            if left is None:
                trans = poses[right].t
            elif right is None:
                trans = poses[left].t
            else:
                u = (t - left) / (right - left)
                trans = (1.0 - u) * poses[left].t + u * poses[right].t
        out_poses.append(RigidTransform(R, np.asarray(trans, dtype=np.float64)))
        provenance.append(FILLED)
    return EETrajectory(out_poses, provenance, confidence)


class GraspChoice(NamedTuple):
    index: int
    pose: RigidTransform
    score: float


def select_grasp(
    candidates: list,
    reference: RigidTransform,
    weight_t: float = 1.0,
    weight_r: float = 0.3,
) -> GraspChoice:
    """Candidate minimizing weighted translation + rotation deviation.

    Ties break to the lowest candidate index.  Scores scale linearly in
    the weights, so the winner is invariant to scaling both by the same
    positive constant.
    """
    if len(candidates) == 0:
        raise ValueError("empty grasp candidate set")
    if weight_t < 0 or weight_r < 0 or (weight_t == 0 and weight_r == 0):
        raise ValueError("weights must be nonnegative and not both zero")
    scores = [
        weight_t * float(np.linalg.norm(c.t - reference.t))
        + weight_r * geodesic_distance(c.R, reference.R)
        for c in candidates
    ]
    best = int(np.argmin(scores))
    return GraspChoice(best, candidates[best], scores[best])


@dataclass(frozen=True)
class Waypoint:
    pose: RigidTransform
    gripper_open: bool
    provenance: str
    confidence: float


@dataclass
class ActionSequence:
    """Ordered end-effector waypoints; one per frame after the first."""

    waypoints: list

    def __len__(self) -> int:
        return len(self.waypoints)

    def __iter__(self):
        return iter(self.waypoints)

    def __getitem__(self, i) -> Waypoint:
        return self.waypoints[i]

    def translations(self) -> np.ndarray:
        return np.stack([w.pose.t for w in self.waypoints])

    def to_jsonable(self) -> list:
        return [
            {
                "R": w.pose.R.tolist(),
                "t": w.pose.t.tolist(),
                "gripper_open": bool(w.gripper_open),
                "provenance": w.provenance,
                "confidence": float(w.confidence),
            }
            for w in self.waypoints
        ]


def _smooth_translations(ts: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    out = np.empty_like(ts)
    for t in range(len(ts)):
        lo, hi = max(0, t - half), min(len(ts), t + half + 1)
        out[t] = ts[lo:hi].mean(axis=0)
    return out


def _smooth_rotations(Rs: list, window: int) -> list:
    if window == 1:
        return list(Rs)
    half = window // 2
    out = []
    for t in range(len(Rs)):
        lo, hi = max(0, t - half), min(len(Rs), t + half + 1)
        out.append(rotation_mean(Rs[lo:hi]))
    return out


def synthesize_actions(
    traj: EETrajectory,
    grasp: RigidTransform,
    ref_index: int,
    window: int = 3,
) -> ActionSequence:
    """Insert the grasp at the reference frame, smooth, emit waypoints.

    Translations take a centered moving average (window clipped at the
    ends), rotations the geodesic mean over the same window; both leave
    a straight-line trajectory on its line and never widen the largest
    frame-to-frame step.  Waypoint t targets frame t+1, so the sequence
    has one entry fewer than the trajectory; the gripper closes at the
    grasp waypoint and stays closed.
    """
    n = traj.n_frames
    if not 0 <= ref_index < n:
        raise ValueError(f"reference index {ref_index} outside 0..{n - 1}")
    if window % 2 == 0 or window < 1:
        raise ConfigError(f"smoothing window must be odd and positive, got {window}")
    if window > n:
        raise ConfigError(f"smoothing window {window} exceeds trajectory length {n}")

    poses = list(traj.poses)
    provenance = list(traj.provenance)
    poses[ref_index] = grasp
    provenance[ref_index] = "grasp"

    raw_t = np.stack([p.t for p in poses])
    smooth_t = _smooth_translations(raw_t, window)
    smooth_R = _smooth_rotations([p.R for p in poses], window)

    waypoints = [
        Waypoint(
            pose=RigidTransform(smooth_R[t], smooth_t[t]),
            gripper_open=t < ref_index,
            provenance=provenance[t],
            confidence=float(traj.confidence[t]),
        )
        for t in range(1, n)
    ]
    return ActionSequence(waypoints)


# ---------------------------------------------------------------------------
# End-to-end extraction


@dataclass
class Diagnostics:
    """Event log (every gate decision, pose verdict, fallback, grasp pick)."""

    events: list
    knobs: dict

    def to_jsonable(self) -> dict:
        return {"events": self.events, "knobs": self.knobs}


@dataclass
class ExtractionResult:
    actions: ActionSequence
    trajectory: EETrajectory
    diagnostics: Diagnostics


def _unpack_rollout(rollout):
    """(rgb, depths, cameras, intrinsics, instruction) for either rollout kind."""
    if isinstance(rollout, Rollout):
        rgb = rollout.rgb_tensor()
        depths = [f.depth for f in rollout.frames]
        cameras = [f.camera for f in rollout.frames]
        return rgb, depths, cameras, rollout.config.intrinsics, rollout.instruction
    if isinstance(rollout, PredictedRollout):
        if rollout.source_config is None:
            raise ConfigError("generated rollout carries no source scene (camera unknown)")
        depths = [
            DepthMap(d, np.isfinite(d) & (d > 0)) for d in np.asarray(rollout.depth, dtype=np.float64)
        ]
        cameras = [rollout.source_config.camera.pose_at(t) for t in range(rollout.n_frames)]
        return rollout.rgb, depths, cameras, rollout.intrinsics, rollout.instruction
    raise TypeError(f"expected a rollout, got {type(rollout).__name__}")


def _stage(name: str, exc: GeowmError):
    raise type(exc)(f"{name}: {exc}") from exc


def extract(rollout, suite: PerceptionSuite, cfg: ExtractionConfig = ExtractionConfig()) -> ExtractionResult:
    """Run the full pipeline on one rollout.

    Composes grounding, gated tracking, pose estimation with fallback,
    grasp selection, and smoothing; every stage decision lands in the
    diagnostics event log and stage failures carry the stage name.
    """
    rgb, depths, cameras, intrinsics, instruction = _unpack_rollout(rollout)
    n_frames = rgb.shape[0]
    events = []

    try:
        grounding = ground_scene(rgb[0], depths[0], instruction, suite, cameras[0])
    except GeowmError as e:
        _stage("grounding", e)
    events.append(
        {
            "frame": 0,
            "stage": "grounding",
            "decision": "grounded",
            "object_pixels": int(grounding.object_mask.sum()),
            "ee_pixels": int(grounding.ee_mask.sum()),
            "confidence": grounding.confidence,
        }
    )

    try:
        history = track_rollout(
            rgb,
            grounding.ee_mask,
            suite,
            cfg.gate,
            instruction=instruction,
            depths=depths,
            n_anchors=cfg.n_anchors,
            mask_radius=cfg.mask_radius,
        )
    except GeowmError as e:
        _stage("tracking", e)
    for s in history.states[1:]:
        events.append(
            {
                "frame": s.frame,
                "stage": "gate",
                "decision": s.decision,
                "retention": s.n_reliable / s.anchor_count,
                "drop": s.drop,
            }
        )

    # Pose per frame: high confidence accepts outright; low confidence
    # must stay consistent with the last accepted pose.  Frame 0 is the
    # grounding pose and is always accepted so the fill has a base.
    poses = [grounding.pose]
    accepted = [True]
    confidence = [grounding.confidence]
    last_accepted = grounding.pose
    fb = cfg.fallback
    try:
        for t in range(1, n_frames):
            pose, conf = suite.pose_estimator.estimate(
                rgb[t], depths[t], history.masks[t], cameras[t], t
            )
            jump_t = float(np.linalg.norm(pose.t - last_accepted.t))
            jump_r = geodesic_distance(pose.R, last_accepted.R)
            if conf >= fb.min_confidence:
                ok = True
                verdict = "accepted"
            else:
                ok = consistency_check(pose, last_accepted, fb)
                verdict = "low_confidence_accept" if ok else "rejected"
            poses.append(pose)
            accepted.append(ok)
            confidence.append(conf)
            if ok:
                last_accepted = pose
            events.append(
                {
                    "frame": t,
                    "stage": "pose",
                    "decision": verdict,
                    "confidence": conf,
                    "translation_jump": jump_t,
                    "rotation_jump": jump_r,
                }
            )

        fallback_translations = [None] * n_frames
        for t in range(n_frames):
            if accepted[t]:
                continue
            centroid = recover_translation(depths[t], history.masks[t], intrinsics)
            if centroid is not None:
                fallback_translations[t] = invert(cameras[t]).apply(centroid)
            events.append(
                {
                    "frame": t,
                    "stage": "fallback",
                    "decision": FILLED,
                    "centroid_recovered": centroid is not None,
                }
            )
        trajectory = fill_rejected(poses, accepted, fallback_translations, confidence)
    except GeowmError as e:
        _stage("pose", e)

    try:
        cloud_cam = _backproject_mask(depths[0], grounding.object_mask, intrinsics)
        if len(cloud_cam) == 0:
            raise GroundingError("target object has no valid depth pixels")
        cloud_world = invert(cameras[0]).apply(cloud_cam)
        target = cloud_world.mean(axis=0)
        ref_index = int(np.argmin(np.linalg.norm(trajectory.translations() - target, axis=1)))
        candidates = suite.grasp_proposer.propose(cloud_world)
        choice = select_grasp(candidates, trajectory.poses[ref_index], cfg.grasp_weight_t, cfg.grasp_weight_r)
    except GeowmError as e:
        _stage("grasp", e)
    events.append(
        {
            "frame": ref_index,
            "stage": "grasp",
            "decision": "selected",
            "candidate": choice.index,
            "score": choice.score,
        }
    )

    try:
        actions = synthesize_actions(trajectory, choice.pose, ref_index, cfg.smoothing_window)
    except GeowmError as e:
        _stage("synthesis", e)

    diagnostics = Diagnostics(events=events, knobs=suite.knobs())
    return ExtractionResult(actions=actions, trajectory=trajectory, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Disk format


def save_actions(actions: ActionSequence, path: str | Path) -> Path:
    path = Path(path)
    payload = {"format": "geowm-actions", "version": 1, "waypoints": actions.to_jsonable()}
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path


def load_actions(path: str | Path) -> ActionSequence:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"{path}: no such actions file")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    if payload.get("format") != "geowm-actions":
        raise FormatError(f"{path}: format {payload.get('format')!r} is not geowm-actions")
    waypoints = []
    for i, w in enumerate(payload.get("waypoints", [])):
        try:
            waypoints.append(
                Waypoint(
                    pose=RigidTransform(np.array(w["R"], dtype=np.float64), np.array(w["t"], dtype=np.float64)),
                    gripper_open=bool(w["gripper_open"]),
                    provenance=str(w["provenance"]),
                    confidence=float(w["confidence"]),
                )
            )
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: waypoint {i} malformed ({e})") from e
    return ActionSequence(waypoints)


def save_diagnostics(diag: Diagnostics, trajectory: EETrajectory | None, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "format": "geowm-extraction-log",
        "version": 1,
        "events": diag.events,
        "knobs": diag.knobs,
        "trajectory": trajectory.to_jsonable() if trajectory is not None else None,
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path
