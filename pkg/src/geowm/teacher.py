"""Frozen geometry-feature source for distillation targets.

The oracle variant reduces a ground-truth rollout to a patch grid of
geometric quantities: mean depth, mean pixel displacement to the next
frame, the camera pose delta (rotation log + translation, broadcast to
every patch), and the fraction of pixels covered by objects.  The file
variant loads precomputed features with the same layout, so an external
geometry network's output can be dropped in without touching callers.

Features are plain float64 arrays, never autodiff nodes: this module is
deliberately outside every gradient path, and the model treats its output
as a fixed regression target.

Boundary convention: the last frame has no successor, so its displacement
and pose-delta channels are zero.

Feature file layout: little-endian uint32 header length, UTF-8 JSON header
(shape, channel legend, normalization statistics, value space), then the
raw C-order float32 tensor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, MissingInputError
from .geometry import relative, so3_log
from .scenes import Rollout, dense_correspondence

ORACLE_LEGEND = (
    "depth",
    "flow_u",
    "flow_v",
    "cam_rot_0",
    "cam_rot_1",
    "cam_rot_2",
    "cam_trans_0",
    "cam_trans_1",
    "cam_trans_2",
    "occupancy",
)

# Channels with no spread on a degenerate split would explode under a std
# floor near zero; unit scale leaves them untouched instead.
_SCALE_FLOOR = 1e-8

_FORMAT_NAME = "geowm-geometry-features"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TeacherSpec:
    """Which feature source to use and how its channels are scaled."""

    variant: str = "oracle"
    patch_size: int = 8
    channels: int = len(ORACLE_LEGEND)
    mean: np.ndarray = None
    scale: np.ndarray = None
    legend: tuple = ORACLE_LEGEND

    def __post_init__(self):
        if self.variant not in ("oracle", "file"):
            raise ValueError(f"unknown teacher variant {self.variant!r}")
        if self.patch_size < 1:
            raise ValueError("patch size must be positive")
        if self.channels < 4:
            raise ValueError("need at least 4 feature channels")
        if self.variant == "oracle" and self.channels != len(ORACLE_LEGEND):
            raise ValueError(f"oracle teacher has exactly {len(ORACLE_LEGEND)} channels")
        if len(self.legend) != self.channels:
            raise ValueError("channel legend length must equal channel count")
        mean = np.zeros(self.channels) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        scale = np.ones(self.channels) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if mean.shape != (self.channels,) or scale.shape != (self.channels,):
            raise ValueError("normalization statistics must be per-channel vectors")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(scale))):
            raise ValueError("normalization statistics must be finite")
        if np.any(scale <= 0):
            raise ValueError("normalization scale must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "legend", tuple(self.legend))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "patch_size": self.patch_size,
            "channels": self.channels,
            "mean": [float(m) for m in self.mean],
            "scale": [float(s) for s in self.scale],
            "legend": list(self.legend),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherSpec":
        return cls(
            variant=d["variant"],
            patch_size=int(d["patch_size"]),
            channels=int(d["channels"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            scale=np.asarray(d["scale"], dtype=np.float64),
            legend=tuple(d["legend"]),
        )


@dataclass(frozen=True)
class GeometryRepr:
    """Patch-grid feature tensor (frames, H/P, W/P, channels)."""

    values: np.ndarray
    legend: tuple = ORACLE_LEGEND

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"expected a 4-d feature grid, got shape {v.shape}")
        if v.shape[-1] != len(self.legend):
            raise ValueError("channel count does not match legend")
        if not np.all(np.isfinite(v)):
            raise ValueError("geometry features must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "legend", tuple(self.legend))

    @property
    def shape(self):
        return self.values.shape

    def tokens(self) -> np.ndarray:
        """Flatten the patch grid to (frames, patches, channels)."""
        n, hp, wp, c = self.values.shape
        return self.values.reshape(n, hp * wp, c)


def _patch_mean(values: np.ndarray, mask: np.ndarray, p: int) -> np.ndarray:
    """Mean of values over mask within each p x p block; 0 where mask empty."""
    h, w = mask.shape
    hp, wp = h // p, w // p
    m = mask.reshape(hp, p, wp, p).astype(np.float64)
    cnt = m.sum(axis=(1, 3))
    if values.ndim == 2:
        tot = (values * mask).reshape(hp, p, wp, p).sum(axis=(1, 3))
        return np.divide(tot, cnt, out=np.zeros_like(tot), where=cnt > 0)
    out = np.zeros((hp, wp, values.shape[-1]))
    for c in range(values.shape[-1]):
        tot = (values[..., c] * mask).reshape(hp, p, wp, p).sum(axis=(1, 3))
        out[..., c] = np.divide(tot, cnt, out=np.zeros_like(tot), where=cnt > 0)
    return out


def extract(rollout: Rollout, spec: TeacherSpec, path=None) -> GeometryRepr:
    """Raw (unnormalized) geometry features for a ground-truth rollout.

    The file variant reads ``path`` instead of computing anything and
    checks the stored shape against the rollout and spec.
    """
    if spec.variant == "file":
        if path is None:
            raise ValueError("file-variant teacher needs a feature file path")
        repr_, _ = load_features(path)
        cfg = rollout.config
        want = (
            cfg.n_frames,
            cfg.height // spec.patch_size,
            cfg.width // spec.patch_size,
            spec.channels,
        )
        if repr_.values.shape != want:
            raise FormatError(f"feature file shape {repr_.values.shape} != expected {want}")
        return repr_

    cfg = rollout.config
    p = spec.patch_size
    if cfg.height % p or cfg.width % p:
        raise ValueError("patch size must divide the frame size")
    n = cfg.n_frames
    hp, wp = cfg.height // p, cfg.width // p
    out = np.zeros((n, hp, wp, spec.channels))

    for t, frame in enumerate(rollout.frames):
        out[t, :, :, 0] = _patch_mean(frame.depth.values, frame.depth.valid, p)
        out[t, :, :, 9] = (frame.object_ids > 0).reshape(hp, p, wp, p).mean(axis=(1, 3))
        if t + 1 < n:
            disp, ok = dense_correspondence(cfg, rollout.frames, t)
            out[t, :, :, 1:3] = _patch_mean(disp, ok, p)
            rel = relative(rollout.frames[t + 1].camera, frame.camera)
            out[t, :, :, 3:6] = so3_log(rel.R)
            out[t, :, :, 6:9] = rel.t
    return GeometryRepr(out, spec.legend)


def fit_normalization(reprs: list, spec: TeacherSpec) -> TeacherSpec:
    """Per-channel mean/std over a training split, baked into a new spec."""
    if not reprs:
        raise ValueError("need at least one feature tensor to fit statistics")
    flat = np.concatenate([r.values.reshape(-1, spec.channels) for r in reprs], axis=0)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    scale = np.where(std > _SCALE_FLOOR, std, 1.0)
    return replace(spec, mean=mean, scale=scale)


def normalize(repr_: GeometryRepr, spec: TeacherSpec) -> GeometryRepr:
    return GeometryRepr((repr_.values - spec.mean) / spec.scale, repr_.legend)


def denormalize(repr_: GeometryRepr, spec: TeacherSpec) -> GeometryRepr:
    return GeometryRepr(repr_.values * spec.scale + spec.mean, repr_.legend)


def save_features(path, repr_: GeometryRepr, spec: TeacherSpec, space: str = "raw") -> None:
    """Write a feature file (JSON header + raw float32 tensor)."""
    if space not in ("raw", "normalized"):
        raise ValueError(f"unknown value space {space!r}")
    header = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "shape": list(repr_.values.shape),
        "legend": list(repr_.legend),
        "normalization": {
            "mean": [float(m) for m in spec.mean],
            "scale": [float(s) for s in spec.scale],
        },
        "space": space,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(repr_.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def load_features(path):
    """Read a feature file; returns (GeometryRepr, TeacherSpec)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise MissingInputError(f"cannot read feature file {path}: {e}") from e
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated feature file")
    (hlen,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + hlen:
        raise FormatError(f"{path}: header overruns file")
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad feature header: {e}") from e
    if header.get("format") != _FORMAT_NAME:
        raise FormatError(f"{path}: not a geometry feature file")
    if header.get("version") != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported feature version {header.get('version')}")
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != 4:
        raise FormatError(f"{path}: feature shape must be 4-d, got {shape}")
    count = int(np.prod(shape))
    payload = raw[4 + hlen :]
    if len(payload) != count * 4:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {count * 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    legend = tuple(header["legend"])
    norm = header["normalization"]
    spec = TeacherSpec(
        variant="file",
        patch_size=1,
        channels=shape[-1],
        mean=np.asarray(norm["mean"], dtype=np.float64),
        scale=np.asarray(norm["scale"], dtype=np.float64),
        legend=legend,
    )
    return GeometryRepr(values, legend), spec
