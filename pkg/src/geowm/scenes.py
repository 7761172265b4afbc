"""Deterministic synthetic rigid-body scenes with exact ground truth.

A scene is a background plane plus a handful of rigid primitives (spheres,
boxes) and an optional two-finger end-effector assembly, each following a
script that defines its pose at every frame.  Frames are rendered by
analytic ray casting: per pixel, the nearest primitive intersection wins
the z-buffer, giving exact z-depth, flat per-object color, and a per-pixel
object-ID map.  Ground-truth point tracks are seeded on visible surfaces at
frame 0 and followed through the scripts, storing per frame the continuous
pixel, camera-frame point, visibility, and the scene-flow residual that
makes the pinhole correspondence map exact.

WORLD FRAME
===========
Matches an untransformed camera: +x right, +y down, +z into the scene.
The background plane is the locus z = bg_depth.  Cameras are parameterized
by eye/target points and stored as world-to-camera transforms.

All randomness flows through the config seed; rollouts are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensorio
from .errors import ConfigError, FormatError, MissingInputError
from .geometry import (
    MIN_CAMERA_DEPTH,
    CameraIntrinsics,
    DepthMap,
    RigidTransform,
    backproject,
    compose,
    invert,
    relative,
    slerp,
    so3_exp,
)

# Rays must travel at least this far before a hit counts; rules out the
# camera's own surface when it sits exactly on a primitive.
_RAY_EPS = 1e-9

# A track is visible when its depth matches the z-buffer within this
# relative margin (plus a small absolute floor for near-zero depths).
_VIS_REL_TOL = 0.05
_VIS_ABS_TOL = 0.02

BACKGROUND_ID = 0
MISS_ID = -1

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Scripts


@dataclass(frozen=True)
class MotionScript:
    """Rigid motion: pose(t) = (exp(t*rate*axis) @ R0, t0 + t*velocity).

    Covers static (zero rate and velocity), constant translation, and
    constant spin about a world axis through the body origin.
    """

    pose0: RigidTransform
    velocity: tuple = (0.0, 0.0, 0.0)
    spin_axis: tuple = (0.0, 1.0, 0.0)
    spin_rate: float = 0.0

    def pose_at(self, t: int) -> RigidTransform:
        v = np.asarray(self.velocity, dtype=np.float64)
        R = self.pose0.R
        if self.spin_rate != 0.0:
            axis = np.asarray(self.spin_axis, dtype=np.float64)
            n = np.linalg.norm(axis)
            if n < 1e-12:
                raise ConfigError("spin axis must be non-zero")
            R = so3_exp(axis / n * (self.spin_rate * t)) @ R
        return RigidTransform(R, self.pose0.t + v * t, _skip_check=True)

    def to_dict(self) -> dict:
        return {
            "pose0": self.pose0.to_dict(),
            "velocity": list(self.velocity),
            "spin_axis": list(self.spin_axis),
            "spin_rate": self.spin_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionScript":
        return cls(
            pose0=RigidTransform.from_dict(d["pose0"]),
            velocity=tuple(d["velocity"]),
            spin_axis=tuple(d["spin_axis"]),
            spin_rate=float(d["spin_rate"]),
        )


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera pose with +z toward ``target`` and +y along ``down``.

    Raises ConfigError when eye and target coincide or the view axis is
    parallel to the down hint (the basis degenerates).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-9:
        raise ConfigError("camera eye and target coincide")
    z = fwd / norm
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise ConfigError("camera view axis parallel to the down hint")
    x = x / xn
    y = np.cross(z, x)
    R_c2w = np.column_stack([x, y, z])
    return RigidTransform(R_c2w.T, -R_c2w.T @ eye)


@dataclass(frozen=True)
class CameraScript:
    """Camera trajectory: static, linear drift, or orbit around a point.

    kind "static"/"linear": eye(t) = eye + velocity*t, looking at ``target``.
    kind "orbit": eye(t) on a circle of ``radius`` in the x-z plane around
    ``target`` at height offset ``height``, angle = angle0 + rate*t.
    """

    kind: str = "static"
    eye: tuple = (0.0, 0.0, 0.0)
    target: tuple = (0.0, 0.0, 3.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    radius: float = 3.0
    height: float = 0.0
    angle0: float = -np.pi / 2
    rate: float = 0.0

    def pose_at(self, t: int) -> RigidTransform:
        if self.kind in ("static", "linear"):
            eye = np.asarray(self.eye, dtype=np.float64)
            if self.kind == "linear":
                eye = eye + np.asarray(self.velocity, dtype=np.float64) * t
            return look_at(eye, self.target)
        if self.kind == "orbit":
            a = self.angle0 + self.rate * t
            c = np.asarray(self.target, dtype=np.float64)
            eye = c + np.array(
                [self.radius * np.cos(a), self.height, self.radius * np.sin(a)]
            )
            return look_at(eye, self.target)
        raise ConfigError(f"unknown camera script kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "eye": list(self.eye),
            "target": list(self.target),
            "velocity": list(self.velocity),
            "radius": self.radius,
            "height": self.height,
            "angle0": self.angle0,
            "rate": self.rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraScript":
        return cls(
            kind=d["kind"],
            eye=tuple(d["eye"]),
            target=tuple(d["target"]),
            velocity=tuple(d["velocity"]),
            radius=float(d["radius"]),
            height=float(d["height"]),
            angle0=float(d["angle0"]),
            rate=float(d["rate"]),
        )


@dataclass(frozen=True)
class EEScript:
    """End-effector 6-DoF path: pose interpolated start->end, then held.

    Translation is linear and rotation geodesic in t/arrive_frame; the
    gripper is open strictly before ``close_frame``.
    """

    pose_start: RigidTransform
    pose_end: RigidTransform
    arrive_frame: int
    close_frame: int

    def pose_at(self, t: int) -> RigidTransform:
        u = min(t / max(self.arrive_frame, 1), 1.0)
        R = slerp(self.pose_start.R, self.pose_end.R, u)
        pos = (1.0 - u) * self.pose_start.t + u * self.pose_end.t
        return RigidTransform(R, pos, _skip_check=True)

    def gripper_open_at(self, t: int) -> bool:
        return t < self.close_frame

    def to_dict(self) -> dict:
        return {
            "pose_start": self.pose_start.to_dict(),
            "pose_end": self.pose_end.to_dict(),
            "arrive_frame": self.arrive_frame,
            "close_frame": self.close_frame,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EEScript":
        return cls(
            pose_start=RigidTransform.from_dict(d["pose_start"]),
            pose_end=RigidTransform.from_dict(d["pose_end"]),
            arrive_frame=int(d["arrive_frame"]),
            close_frame=int(d["close_frame"]),
        )


# ---------------------------------------------------------------------------
# Scene description


@dataclass(frozen=True)
class PrimitiveSpec:
    """One rigid primitive.  ``size`` is a radius for spheres and the three
    half-extents for boxes; ``motion.pose0`` places its local frame in the
    world."""

    kind: str  # "sphere" | "box"
    size: tuple
    color: tuple
    object_id: int
    motion: MotionScript

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "size": list(self.size),
            "color": list(self.color),
            "object_id": self.object_id,
            "motion": self.motion.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrimitiveSpec":
        return cls(
            kind=d["kind"],
            size=tuple(d["size"]),
            color=tuple(d["color"]),
            object_id=int(d["object_id"]),
            motion=MotionScript.from_dict(d["motion"]),
        )


@dataclass(frozen=True)
class EESpec:
    """Two-finger end-effector assembly.

    The assembly frame sits at the palm centre with fingers extending along
    local +z; finger separation depends on the gripper flag.  The analytic
    box layout doubles as the 'CAD model' for pose-fitting backends.
    """

    object_id: int
    color: tuple
    script: EEScript
    palm_half: tuple = (0.055, 0.02, 0.02)
    finger_half: tuple = (0.012, 0.02, 0.05)
    gap_open: float = 0.07
    gap_closed: float = 0.018

    def part_offsets(self, gripper_open: bool) -> list:
        """Local poses of (palm, left finger, right finger)."""
        gap = self.gap_open if gripper_open else self.gap_closed
        fx = gap / 2.0 + self.finger_half[0]
        fz = self.palm_half[2] + self.finger_half[2]
        ident = np.eye(3)
        return [
            RigidTransform(ident, np.zeros(3), _skip_check=True),
            RigidTransform(ident, np.array([-fx, 0.0, fz]), _skip_check=True),
            RigidTransform(ident, np.array([fx, 0.0, fz]), _skip_check=True),
        ]

    def bounding_radius(self) -> float:
        """Radius of the assembly-frame sphere containing every part corner."""
        corners = []
        for half, off in zip(
            [self.palm_half, self.finger_half, self.finger_half],
            self.part_offsets(gripper_open=True),
        ):
            h = np.asarray(half)
            for sx in (-1, 1):
                for sy in (-1, 1):
                    for sz in (-1, 1):
                        corners.append(off.t + h * np.array([sx, sy, sz]))
        return float(np.max(np.linalg.norm(np.asarray(corners), axis=1)))

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "color": list(self.color),
            "script": self.script.to_dict(),
            "palm_half": list(self.palm_half),
            "finger_half": list(self.finger_half),
            "gap_open": self.gap_open,
            "gap_closed": self.gap_closed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EESpec":
        return cls(
            object_id=int(d["object_id"]),
            color=tuple(d["color"]),
            script=EEScript.from_dict(d["script"]),
            palm_half=tuple(d["palm_half"]),
            finger_half=tuple(d["finger_half"]),
            gap_open=float(d["gap_open"]),
            gap_closed=float(d["gap_closed"]),
        )


@dataclass(frozen=True)
class InstructionId:
    """Discrete task conditioning: which object the end-effector serves."""

    task_id: int
    target_object_id: int

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "target_object_id": self.target_object_id}

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionId":
        return cls(task_id=int(d["task_id"]), target_object_id=int(d["target_object_id"]))


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_frames: int = 16
    patch_size: int = 8
    intrinsics: CameraIntrinsics = None
    bg_depth: float = 5.0
    bg_color: tuple = (0.82, 0.82, 0.78)
    primitives: tuple = ()
    ee: EESpec | None = None
    camera: CameraScript = field(default_factory=CameraScript)
    instruction: InstructionId | None = None
    tracks_per_object: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.intrinsics is None:
            object.__setattr__(
                self,
                "intrinsics",
                CameraIntrinsics(
                    fx=float(self.width),
                    fy=float(self.width),
                    cx=(self.width - 1) / 2.0,
                    cy=(self.height - 1) / 2.0,
                ),
            )

    def validate(self) -> None:
        if self.n_frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.n_frames}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"image size {self.height}x{self.width} not a multiple of patch "
                f"size {self.patch_size}"
            )
        if self.bg_depth <= 0:
            raise ConfigError(f"background depth must be positive, got {self.bg_depth}")
        ids = [p.object_id for p in self.primitives]
        if self.ee is not None:
            ids.append(self.ee.object_id)
        if len(set(ids)) != len(ids) or any(i <= BACKGROUND_ID for i in ids):
            raise ConfigError(f"object ids must be unique and positive, got {ids}")
        if self.instruction is not None and self.instruction.target_object_id not in ids:
            raise ConfigError(
                f"instruction target {self.instruction.target_object_id} not in scene ids {ids}"
            )
        for p in self.primitives:
            if p.kind not in ("sphere", "box"):
                raise ConfigError(f"unknown primitive kind {p.kind!r}")
            if any(s <= 0 for s in p.size):
                raise ConfigError(f"primitive sizes must be positive, got {p.size}")
        for t in range(self.n_frames):
            pose = self.camera.pose_at(t)
            if abs(np.linalg.det(pose.R) - 1.0) > 1e-9:
                raise ConfigError(f"degenerate camera pose at frame {t}")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "n_frames": self.n_frames,
            "patch_size": self.patch_size,
            "intrinsics": self.intrinsics.to_dict(),
            "bg_depth": self.bg_depth,
            "bg_color": list(self.bg_color),
            "primitives": [p.to_dict() for p in self.primitives],
            "ee": self.ee.to_dict() if self.ee is not None else None,
            "camera": self.camera.to_dict(),
            "instruction": self.instruction.to_dict() if self.instruction else None,
            "tracks_per_object": self.tracks_per_object,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(
            height=int(d["height"]),
            width=int(d["width"]),
            n_frames=int(d["n_frames"]),
            patch_size=int(d["patch_size"]),
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            bg_depth=float(d["bg_depth"]),
            bg_color=tuple(d["bg_color"]),
            primitives=tuple(PrimitiveSpec.from_dict(p) for p in d["primitives"]),
            ee=EESpec.from_dict(d["ee"]) if d.get("ee") else None,
            camera=CameraScript.from_dict(d["camera"]),
            instruction=InstructionId.from_dict(d["instruction"]) if d.get("instruction") else None,
            tracks_per_object=int(d["tracks_per_object"]),
            seed=int(d["seed"]),
        )


# ---------------------------------------------------------------------------
# Solids: the flat list of renderable rigid parts at one frame


class Solid(NamedTuple):
    object_id: int
    part_key: str
    kind: str  # "sphere" | "box" | "plane"
    size: tuple
    pose: RigidTransform  # local -> world
    color: tuple


def solids_at(cfg: SceneConfig, t: int) -> list:
    """All renderable parts at frame t, background plane last (loses ties)."""
    out = []
    for i, prim in enumerate(cfg.primitives):
        out.append(
            Solid(prim.object_id, f"prim{i}", prim.kind, prim.size, prim.motion.pose_at(t), prim.color)
        )
    if cfg.ee is not None:
        ee_pose = cfg.ee.script.pose_at(t)
        grip = cfg.ee.script.gripper_open_at(t)
        halves = [cfg.ee.palm_half, cfg.ee.finger_half, cfg.ee.finger_half]
        keys = ["ee_palm", "ee_left", "ee_right"]
        for half, key, off in zip(halves, keys, cfg.ee.part_offsets(grip)):
            out.append(
                Solid(cfg.ee.object_id, key, "box", tuple(half), compose(ee_pose, off), cfg.ee.color)
            )
    out.append(
        Solid(
            BACKGROUND_ID,
            "bg",
            "plane",
            (cfg.bg_depth,),
            RigidTransform.identity(),
            cfg.bg_color,
        )
    )
    return out


def _ray_sphere(origin, dirs, center, radius):
    """Smallest positive ray parameter per pixel, +inf on miss."""
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    t = np.full(dirs.shape[0], np.inf)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    # Nearest intersection in front of the camera; t1 covers origin-inside.
    tt = np.where(t0 > _RAY_EPS, t0, t1)
    t[hit & (tt > _RAY_EPS)] = tt[hit & (tt > _RAY_EPS)]
    return t


def _ray_box(origin, dirs, half, pose):
    """Slab test in the box local frame; +inf on miss."""
    inv = invert(pose)
    o = inv.apply(origin)
    d = dirs @ inv.R.T
    half = np.asarray(half, dtype=np.float64)
    lo = np.full(d.shape[0], -np.inf)
    hi = np.full(d.shape[0], np.inf)
    for ax in range(3):
        da = d[:, ax]
        parallel = np.abs(da) < 1e-14
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[ax] - o[ax]) / da
            t2 = (half[ax] - o[ax]) / da
        a_lo = np.minimum(t1, t2)
        a_hi = np.maximum(t1, t2)
        inside = np.abs(o[ax]) <= half[ax]
        a_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), a_lo)
        a_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), a_hi)
        lo = np.maximum(lo, a_lo)
        hi = np.minimum(hi, a_hi)
    t = np.where((lo <= hi) & (lo > _RAY_EPS), lo, np.inf)
    return t


def _ray_plane_z(origin, dirs, z_plane):
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z_plane - origin[2]) / dz
    return np.where((np.abs(dz) > 1e-14) & (t > _RAY_EPS), t, np.inf)


@dataclass
class Frame:
    """One rendered frame with complete ground truth."""

    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: DepthMap  # float64 z-depth; valid where any surface is hit
    camera: RigidTransform  # world-to-camera
    object_ids: np.ndarray  # (H, W) int32, MISS_ID where nothing is hit
    ee_mask: np.ndarray  # (H, W) bool
    ee_pose: RigidTransform | None
    gripper_open: bool


def render_frame(cfg: SceneConfig, t: int) -> Frame:
    """Ray-cast frame t of the scripted scene.

    The ray through pixel (u, v) is parameterized so that the ray parameter
    equals camera-frame z-depth; the per-solid minimum is therefore the
    exact z-buffer.
    """
    H, W, K = cfg.height, cfg.width, cfg.intrinsics
    cam = cfg.camera.pose_at(t)
    solids = solids_at(cfg, t)

    u = np.arange(W, dtype=np.float64)
    v = np.arange(H, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack(
        [(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    c2w = invert(cam)
    dirs = d_cam @ c2w.R.T  # rows: R_c2w @ d_cam
    origin = c2w.t

    depths = np.full((len(solids), H * W), np.inf)
    for i, s in enumerate(solids):
        if s.kind == "sphere":
            depths[i] = _ray_sphere(origin, dirs, s.pose.t, s.size[0])
        elif s.kind == "box":
            depths[i] = _ray_box(origin, dirs, s.size, s.pose)
        elif s.kind == "plane":
            depths[i] = _ray_plane_z(origin, dirs, s.size[0])
        else:
            raise ConfigError(f"unknown solid kind {s.kind!r}")

    winner = np.argmin(depths, axis=0)
    zbuf = depths[winner, np.arange(H * W)]
    valid = np.isfinite(zbuf)

    ids = np.array([s.object_id for s in solids], dtype=np.int32)
    colors = np.array([s.color for s in solids], dtype=np.float32)
    id_map = np.where(valid, ids[winner], MISS_ID).astype(np.int32).reshape(H, W)
    rgb = np.where(valid[:, None], colors[winner], 0.0).astype(np.float32).reshape(H, W, 3)
    depth = DepthMap(np.where(valid, zbuf, 0.0).reshape(H, W), valid.reshape(H, W))

    ee_pose = None
    gripper = True
    if cfg.ee is not None:
        ee_pose = cfg.ee.script.pose_at(t)
        gripper = cfg.ee.script.gripper_open_at(t)
    ee_mask = (
        id_map == cfg.ee.object_id if cfg.ee is not None else np.zeros((H, W), dtype=bool)
    )
    return Frame(rgb, depth, cam, id_map, ee_mask, ee_pose, gripper)


# ---------------------------------------------------------------------------
# Tracks


@dataclass
class Track:
    """One surface point followed through the rollout.

    ``flow[t]`` is the displacement, in frame-(t+1) camera coordinates, that
    the point's own motion adds on top of the camera motion between t and
    t+1; the final row is zero by convention.
    """

    object_id: int
    part_key: str
    local_point: np.ndarray  # (3,) in the part frame
    uv: np.ndarray  # (N, 2) continuous pixels, NaN when behind the camera
    visible: np.ndarray  # (N,) bool
    xyz_cam: np.ndarray  # (N, 3) camera-frame point
    flow: np.ndarray  # (N, 3)


@dataclass
class Rollout:
    config: SceneConfig
    frames: list
    tracks: list
    instruction: InstructionId | None

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def rgb_tensor(self) -> np.ndarray:
        return np.stack([f.rgb for f in self.frames])

    def depth_tensor(self) -> np.ndarray:
        return np.stack([f.depth.values for f in self.frames])

    def valid_tensor(self) -> np.ndarray:
        return np.stack([f.depth.valid for f in self.frames])


class Correspondence(NamedTuple):
    pixel: np.ndarray
    visible: bool


def _part_poses_by_key(cfg: SceneConfig, t: int) -> dict:
    return {s.part_key: s.pose for s in solids_at(cfg, t)}


def _assign_part(cfg: SceneConfig, object_id: int, world_point: np.ndarray, t: int) -> str:
    """Which rigid part of ``object_id`` owns a surface point (containment)."""
    candidates = [s for s in solids_at(cfg, t) if s.object_id == object_id]
    best_key, best_slack = None, np.inf
    for s in candidates:
        local = invert(s.pose).apply(world_point)
        if s.kind == "sphere":
            slack = abs(np.linalg.norm(local) - s.size[0])
        elif s.kind == "box":
            half = np.asarray(s.size)
            slack = float(np.max(np.abs(local) - half))
        else:  # plane
            slack = abs(local[2] - s.size[0])
        if slack < best_slack:
            best_slack, best_key = slack, s.part_key
    if best_key is None or best_slack > 1e-5:
        raise ValueError(
            f"point {world_point} not on any part of object {object_id} (slack {best_slack:.2e})"
        )
    return best_key


def _seed_tracks(cfg: SceneConfig, frame0: Frame) -> list:
    """Pick up to tracks_per_object pixels per object (background included)
    from frame 0 and attach each back-projected point to its rigid part."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261]))
    cam0_inv = invert(frame0.camera)
    ids = [p.object_id for p in cfg.primitives]
    if cfg.ee is not None:
        ids.append(cfg.ee.object_id)
    ids.append(BACKGROUND_ID)

    seeds = []
    id_map = frame0.object_ids
    for oid in ids:
        vs, us = np.nonzero(id_map == oid)
        if len(vs) == 0:
            continue
        k = min(cfg.tracks_per_object, len(vs))
        pick = rng.choice(len(vs), size=k, replace=False)
        pick.sort()
        for idx in pick:
            u, v = float(us[idx]), float(vs[idx])
            d = frame0.depth.values[int(v), int(u)]
            x_cam = backproject((u, v), d, cfg.intrinsics)
            x_world = cam0_inv.apply(x_cam)
            part = _assign_part(cfg, oid, x_world, 0)
            seeds.append((oid, part, x_world))
    return seeds


def _trace_track(cfg: SceneConfig, frames: list, oid: int, part: str, x_world0: np.ndarray) -> Track:
    N = cfg.n_frames
    K = cfg.intrinsics
    local = invert(_part_poses_by_key(cfg, 0)[part]).apply(x_world0)

    uv = np.full((N, 2), np.nan)
    vis = np.zeros(N, dtype=bool)
    xyz = np.zeros((N, 3))
    flow = np.zeros((N, 3))

    for t in range(N):
        pose_t = _part_poses_by_key(cfg, t)[part]
        x_w = pose_t.apply(local)
        x_c = frames[t].camera.apply(x_w)
        xyz[t] = x_c
        if x_c[2] > MIN_CAMERA_DEPTH:
            u = K.fx * x_c[0] / x_c[2] + K.cx
            v = K.fy * x_c[1] / x_c[2] + K.cy
            uv[t] = (u, v)
            iu, iv = int(round(u)), int(round(v))
            if 0 <= iu < cfg.width and 0 <= iv < cfg.height:
                dm = frames[t].depth
                tol = max(_VIS_ABS_TOL, _VIS_REL_TOL * x_c[2])
                vis[t] = (
                    bool(dm.valid[iv, iu])
                    and frames[t].object_ids[iv, iu] == oid
                    and x_c[2] <= dm.values[iv, iu] + tol
                )
    for t in range(N - 1):
        rel = relative(frames[t + 1].camera, frames[t].camera)
        flow[t] = xyz[t + 1] - rel.apply(xyz[t])
    return Track(oid, part, local, uv, vis, xyz, flow)


def generate_rollout(cfg: SceneConfig) -> Rollout:
    """Render all frames and populate ground-truth tracks.

    Deterministic for a fixed config (the seed drives track seeding; the
    renderer itself has no randomness).
    """
    cfg.validate()
    frames = [render_frame(cfg, t) for t in range(cfg.n_frames)]
    tracks = [
        _trace_track(cfg, frames, oid, part, xw) for oid, part, xw in _seed_tracks(cfg, frames[0])
    ]
    return Rollout(cfg, frames, tracks, cfg.instruction)


def ground_truth_correspondence(rollout: Rollout, point_id: int, t: int) -> Correspondence:
    """Frame-(t+1) pixel of track ``point_id``, from stored ground truth.

    A point occluded (or behind the camera) at t yields a not-visible
    result rather than an error; visibility of the result reflects frame
    t+1.
    """
    if not 0 <= t < rollout.n_frames - 1:
        raise ValueError(f"frame index {t} out of range for correspondence")
    tr = rollout.tracks[point_id]
    if not tr.visible[t]:
        return Correspondence(np.array([np.nan, np.nan]), False)
    return Correspondence(tr.uv[t + 1].copy(), bool(tr.visible[t + 1]))


def dense_correspondence(cfg: SceneConfig, frames: list, t: int):
    """Exact per-pixel displacement field from frame t to t+1.

    Returns (disp, ok): disp is (H, W, 2) with u/v displacement of each
    valid pixel's surface point, ok marks pixels where the displaced point
    stays in front of both cameras.  Used by the geometry teacher.
    """
    H, W, K = cfg.height, cfg.width, cfg.intrinsics
    f_t, f_n = frames[t], frames[t + 1]
    disp = np.zeros((H, W, 2))
    ok = np.zeros((H, W), dtype=bool)

    u = np.arange(W, dtype=np.float64)
    v = np.arange(H, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    z = f_t.depth.values
    x_cam = np.stack([(uu - K.cx) / K.fx * z, (vv - K.cy) / K.fy * z, z], axis=-1)
    c2w_t = invert(f_t.camera)

    solid_map = {}
    for s in solids_at(cfg, t):
        solid_map.setdefault(s.object_id, []).append(s)
    poses_next = _part_poses_by_key(cfg, t + 1)

    for oid, parts in solid_map.items():
        sel = (f_t.object_ids == oid) & f_t.depth.valid
        if not np.any(sel):
            continue
        pts_cam = x_cam[sel]
        pts_world = c2w_t.apply(pts_cam)
        # Assign pixels to parts by smallest containment slack.
        slacks = np.full((len(parts), len(pts_world)), np.inf)
        for i, s in enumerate(parts):
            local = invert(s.pose).apply(pts_world)
            if s.kind == "sphere":
                slacks[i] = np.abs(np.linalg.norm(local, axis=1) - s.size[0])
            elif s.kind == "box":
                slacks[i] = np.max(np.abs(local) - np.asarray(s.size), axis=1)
            else:
                slacks[i] = np.abs(local[:, 2] - s.size[0])
        owner = np.argmin(slacks, axis=0)
        x_next = np.empty_like(pts_world)
        for i, s in enumerate(parts):
            mine = owner == i
            if not np.any(mine):
                continue
            local = invert(s.pose).apply(pts_world[mine])
            x_next[mine] = poses_next[s.part_key].apply(local)
        x_cam_next = f_n.camera.apply(x_next)
        in_front = x_cam_next[:, 2] > MIN_CAMERA_DEPTH
        uv_next = np.zeros((len(pts_world), 2))
        zz = np.where(in_front, x_cam_next[:, 2], 1.0)
        uv_next[:, 0] = K.fx * x_cam_next[:, 0] / zz + K.cx
        uv_next[:, 1] = K.fy * x_cam_next[:, 1] / zz + K.cy
        duv = uv_next - np.column_stack([uu[sel], vv[sel]])
        disp[sel] = duv
        ok[sel] = in_front
    return disp, ok


# ---------------------------------------------------------------------------
# Disk format


def _manifest_bytes(manifest: dict) -> bytes:
    # sort_keys + fixed separators keep serialization byte-stable; NaN pixel
    # entries (behind-camera) use the python json NaN literal, which our
    # loader round-trips.
    return json.dumps(manifest, sort_keys=True, indent=1).encode("ascii")


def save_rollout(rollout: Rollout, out_dir: str | Path) -> Path:
    """Write a rollout directory: manifest.json + raw tensors.

    RGB and depth go to little-endian float32 tensor files, object IDs to
    int32; poses and the track table live in the manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(out / "rgb.gwt", rollout.rgb_tensor().astype("<f4"))
    tensorio.write_tensor(out / "depth.gwt", rollout.depth_tensor().astype("<f4"))
    ids = np.stack([f.object_ids for f in rollout.frames]).astype("<i4")
    tensorio.write_tensor(out / "object_ids.gwt", ids)

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "ground_truth",
        "config": rollout.config.to_dict(),
        "intrinsics": rollout.config.intrinsics.to_dict(),
        "instruction": rollout.instruction.to_dict() if rollout.instruction else None,
        "frames": [
            {
                "camera": f.camera.to_dict(),
                "ee_pose": f.ee_pose.to_dict() if f.ee_pose is not None else None,
                "gripper_open": bool(f.gripper_open),
            }
            for f in rollout.frames
        ],
        "tracks": [
            {
                "object_id": tr.object_id,
                "part_key": tr.part_key,
                "local_point": tr.local_point.tolist(),
                "uv": tr.uv.tolist(),
                "visible": tr.visible.astype(int).tolist(),
                "xyz_cam": tr.xyz_cam.tolist(),
                "flow": tr.flow.tolist(),
            }
            for tr in rollout.tracks
        ],
        "tensors": {"rgb": "rgb.gwt", "depth": "depth.gwt", "object_ids": "object_ids.gwt"},
    }
    (out / MANIFEST_NAME).write_bytes(_manifest_bytes(manifest))
    return out


def load_rollout(in_dir: str | Path) -> Rollout:
    """Load a ground-truth rollout directory.

    Depth comes back float64 upcast from the float32 file; everything in
    the manifest (poses, tracks) round-trips exactly.
    """
    src = Path(in_dir)
    mpath = src / MANIFEST_NAME
    if not mpath.is_file():
        raise MissingInputError(f"{src}: no {MANIFEST_NAME}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("kind") != "ground_truth":
        raise FormatError(f"{src}: manifest kind {manifest.get('kind')!r} is not ground_truth")
    cfg = SceneConfig.from_dict(manifest["config"])
    rgb = tensorio.read_tensor(src / manifest["tensors"]["rgb"]).astype(np.float32)
    depth = tensorio.read_tensor(src / manifest["tensors"]["depth"]).astype(np.float64)
    ids = tensorio.read_tensor(src / manifest["tensors"]["object_ids"]).astype(np.int32)
    if rgb.shape != (cfg.n_frames, cfg.height, cfg.width, 3):
        raise FormatError(f"{src}: rgb tensor shape {rgb.shape} disagrees with config")
    if depth.shape != (cfg.n_frames, cfg.height, cfg.width):
        raise FormatError(f"{src}: depth tensor shape {depth.shape} disagrees with config")

    frames = []
    for t, fd in enumerate(manifest["frames"]):
        valid = ids[t] != MISS_ID
        ee_pose = RigidTransform.from_dict(fd["ee_pose"]) if fd["ee_pose"] else None
        ee_mask = ids[t] == cfg.ee.object_id if cfg.ee is not None else np.zeros_like(valid)
        frames.append(
            Frame(
                rgb=rgb[t],
                depth=DepthMap(depth[t], valid),
                camera=RigidTransform.from_dict(fd["camera"]),
                object_ids=ids[t],
                ee_mask=ee_mask,
                ee_pose=ee_pose,
                gripper_open=bool(fd["gripper_open"]),
            )
        )
    tracks = [
        Track(
            object_id=int(td["object_id"]),
            part_key=td["part_key"],
            local_point=np.array(td["local_point"]),
            uv=np.array(td["uv"]),
            visible=np.array(td["visible"], dtype=bool),
            xyz_cam=np.array(td["xyz_cam"]),
            flow=np.array(td["flow"]),
        )
        for td in manifest["tracks"]
    ]
    instruction = (
        InstructionId.from_dict(manifest["instruction"]) if manifest.get("instruction") else None
    )
    return Rollout(cfg, frames, tracks, instruction)


# ---------------------------------------------------------------------------
# Generated (model-output) rollouts share the directory layout


@dataclass
class PredictedRollout:
    """RGBD sequence produced by the world model; no ground truth attached."""

    rgb: np.ndarray  # (N, H, W, 3) float32
    depth: np.ndarray  # (N, H, W) float64, nonpositive entries are invalid
    intrinsics: CameraIntrinsics
    instruction: InstructionId | None
    source_config: SceneConfig | None
    provenance: dict

    @property
    def n_frames(self) -> int:
        return self.rgb.shape[0]


def save_predicted(pred: PredictedRollout, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(out / "rgb.gwt", pred.rgb.astype("<f4"))
    tensorio.write_tensor(out / "depth.gwt", pred.depth.astype("<f4"))
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "generated",
        "intrinsics": pred.intrinsics.to_dict(),
        "instruction": pred.instruction.to_dict() if pred.instruction else None,
        "source_config": pred.source_config.to_dict() if pred.source_config else None,
        "provenance": pred.provenance,
        "tensors": {"rgb": "rgb.gwt", "depth": "depth.gwt"},
    }
    (out / MANIFEST_NAME).write_bytes(_manifest_bytes(manifest))
    return out


def load_predicted(in_dir: str | Path) -> PredictedRollout:
    src = Path(in_dir)
    mpath = src / MANIFEST_NAME
    if not mpath.is_file():
        raise MissingInputError(f"{src}: no {MANIFEST_NAME}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("kind") != "generated":
        raise FormatError(f"{src}: manifest kind {manifest.get('kind')!r} is not generated")
    rgb = tensorio.read_tensor(src / manifest["tensors"]["rgb"]).astype(np.float32)
    depth = tensorio.read_tensor(src / manifest["tensors"]["depth"]).astype(np.float64)
    return PredictedRollout(
        rgb=rgb,
        depth=depth,
        intrinsics=CameraIntrinsics.from_dict(manifest["intrinsics"]),
        instruction=(
            InstructionId.from_dict(manifest["instruction"]) if manifest.get("instruction") else None
        ),
        source_config=(
            SceneConfig.from_dict(manifest["source_config"])
            if manifest.get("source_config")
            else None
        ),
        provenance=manifest.get("provenance", {}),
    )


def rollout_kind(in_dir: str | Path) -> str:
    mpath = Path(in_dir) / MANIFEST_NAME
    if not mpath.is_file():
        raise MissingInputError(f"{in_dir}: no {MANIFEST_NAME}")
    return json.loads(mpath.read_text()).get("kind", "")


# ---------------------------------------------------------------------------
# Randomized scene family


# Saturated, well-separated palette for flat shading; grounding backends
# classify pixels by nearest palette color.
PALETTE = (
    (0.85, 0.12, 0.12),
    (0.10, 0.65, 0.15),
    (0.12, 0.25, 0.85),
    (0.90, 0.75, 0.10),
    (0.75, 0.15, 0.75),
    (0.10, 0.70, 0.70),
)
EE_COLOR = (0.12, 0.12, 0.16)


@dataclass(frozen=True)
class SceneFamily:
    """Sampling ranges for the randomized desk-scale scene family."""

    height: int = 64
    width: int = 64
    n_frames: int = 16
    patch_size: int = 8
    min_objects: int = 1
    max_objects: int = 3
    tracks_per_object: int = 12
    camera_motion: bool = True
    object_motion: bool = True

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "n_frames": self.n_frames,
            "patch_size": self.patch_size,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "tracks_per_object": self.tracks_per_object,
            "camera_motion": self.camera_motion,
            "object_motion": self.object_motion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneFamily":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


def build_random_scene(seed: int, family: SceneFamily | None = None) -> SceneConfig:
    """Sample a scene config: objects on the workspace, camera script, and
    an end-effector approaching a randomly chosen target object."""
    fam = family or SceneFamily()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CEE]))
    n_obj = int(rng.integers(fam.min_objects, fam.max_objects + 1))
    color_order = rng.permutation(len(PALETTE))

    centers = []
    prims = []
    for i in range(n_obj):
        for _ in range(64):
            center = np.array(
                [rng.uniform(-0.85, 0.85), rng.uniform(-0.45, 0.55), rng.uniform(2.7, 4.1)]
            )
            if all(np.linalg.norm(center - c) > 0.8 for c in centers):
                break
        centers.append(center)
        kind = "sphere" if rng.uniform() < 0.5 else "box"
        if kind == "sphere":
            size = (float(rng.uniform(0.18, 0.32)),)
        else:
            size = tuple(rng.uniform(0.13, 0.28, size=3))
        vel = (0.0, 0.0, 0.0)
        rate = 0.0
        axis = (0.0, 1.0, 0.0)
        if fam.object_motion:
            style = rng.uniform()
            if style < 0.45:
                vel = tuple(rng.uniform(-0.018, 0.018, size=3))
            elif style < 0.70 and kind == "box":
                rate = float(rng.uniform(-0.13, 0.13))
                axis = tuple(rng.normal(size=3))
        R0 = so3_exp(rng.normal(scale=0.4, size=3))
        prims.append(
            PrimitiveSpec(
                kind=kind,
                size=size,
                color=tuple(float(c) for c in np.asarray(PALETTE[color_order[i]])),
                object_id=i + 1,
                motion=MotionScript(
                    pose0=RigidTransform(R0, center),
                    velocity=vel,
                    spin_axis=axis,
                    spin_rate=rate,
                ),
            )
        )

    target_slot = int(rng.integers(0, n_obj))
    target = prims[target_slot]
    instruction = InstructionId(task_id=target_slot, target_object_id=target.object_id)

    # End-effector: start off to the side, approach the target along the
    # line of sight, close the gripper on arrival.
    arrive = fam.n_frames - max(3, fam.n_frames // 5)
    target_at_arrive = target.motion.pose_at(arrive).t
    start_pos = target_at_arrive + np.array(
        [rng.uniform(0.5, 0.9) * rng.choice([-1.0, 1.0]), rng.uniform(-0.9, -0.5), rng.uniform(-0.7, -0.3)]
    )
    approach = target_at_arrive - start_pos
    approach = approach / np.linalg.norm(approach)
    standoff = (max(target.size) if target.kind == "sphere" else float(np.linalg.norm(target.size))) + 0.16
    end_pos = target_at_arrive - approach * standoff
    R_ee = look_at(start_pos, target_at_arrive).R.T  # assembly +z toward target
    ee = EESpec(
        object_id=n_obj + 1,
        color=EE_COLOR,
        script=EEScript(
            pose_start=RigidTransform(R_ee, start_pos),
            pose_end=RigidTransform(R_ee, end_pos),
            arrive_frame=arrive,
            close_frame=arrive,
        ),
    )

    scene_center = (0.0, 0.0, 3.4)
    cam_style = rng.uniform() if fam.camera_motion else 1.0
    if cam_style < 0.40:
        camera = CameraScript(
            kind="linear",
            eye=tuple(rng.uniform(-0.25, 0.25, size=3) * np.array([1.0, 1.0, 0.4])),
            target=scene_center,
            velocity=tuple(rng.uniform(-0.012, 0.012, size=3)),
        )
    elif cam_style < 0.65:
        camera = CameraScript(
            kind="orbit",
            target=scene_center,
            radius=float(rng.uniform(3.2, 3.6)),
            height=float(rng.uniform(-0.4, 0.1)),
            angle0=float(-np.pi / 2 + rng.uniform(-0.25, 0.25)),
            rate=float(rng.uniform(-0.010, 0.010)),
        )
    else:
        camera = CameraScript(
            kind="static",
            eye=tuple(rng.uniform(-0.2, 0.2, size=3) * np.array([1.0, 1.0, 0.3])),
            target=scene_center,
        )

    return SceneConfig(
        height=fam.height,
        width=fam.width,
        n_frames=fam.n_frames,
        patch_size=fam.patch_size,
        primitives=tuple(prims),
        ee=ee,
        camera=camera,
        instruction=instruction,
        tracks_per_object=fam.tracks_per_object,
        seed=seed,
    )
