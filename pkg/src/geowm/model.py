"""Dual-branch flow-matching world model.

The video branch is a small transformer over patch latents of RGBD frames,
conditioned on the clean first-frame tokens (as a prefix), a timestep
vector, and the instruction embedding.  Adaptive layer modulation (shift,
scale, gate per sublayer, produced from the conditioning vector by a
zero-initialized linear map) keeps every block an identity at
initialization, and the zero-initialized output head makes the initial
velocity field exactly zero.

The geometry branch is a second transformer over geometry-feature tokens.
Its only scene input is the video branch's mid-layer activations, read
through cross-attention; time conditioning is its own.  It is trained
jointly (total loss = video term + alpha * geometry term), contributes to
the backbone only through that feature pathway, and is never evaluated at
sampling time.

Frames enter as 4-channel RGBD (depth divided by ``depth_scale``), and the
latent codec is a whitened principal-component projection of patches,
fitted once in closed form on the training frames and stored as frozen
``codec.*`` parameter slices.

All arithmetic is float64.  Forward functions run on plain arrays when
given plain parameters and build a differentiation graph when given
leaves, so training and inference execute identical code.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ConfigError, FormatError, MissingInputError, NumericalError
from .flow import euler_sample
from .scenes import InstructionId, PredictedRollout
from .teacher import TeacherSpec, extract, fit_normalization, normalize

_CKPT_NAME = "geowm-checkpoint"
_CKPT_VERSION = 1

# Distinct substreams per random role so that runs differing only in the
# geometry weight draw identical batches, times, and video noise.
_STREAM_INIT = 0x1A17
_STREAM_BATCH = 0xBA7C
_STREAM_TIME = 0x7153
_STREAM_ZNOISE = 0x201E
_STREAM_GNOISE = 0x6E01
_STREAM_SAMPLE = 0x9E4E
_STREAM_CODEC = 0xC0DE


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and knobs for both branches.

    ``channels`` is the transformer width; ``mid_layer`` is 1-indexed and
    selects whose block output feeds the geometry branch.
    """

    n_frames: int = 16
    height: int = 64
    width: int = 64
    patch_size: int = 8
    frame_channels: int = 4
    latent_dim: int = 128
    channels: int = 64
    backbone_depth: int = 4
    geometry_depth: int = 2
    n_heads: int = 4
    mid_layer: int = 2
    alpha: float = 0.5
    task_vocab: int = 8
    target_vocab: int = 8
    geo_channels: int = 10
    depth_scale: float = 8.0
    min_depth: float = 0.05

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError("patch size must divide frame height and width")
        if not 1 <= self.mid_layer <= self.backbone_depth:
            raise ConfigError(f"mid_layer {self.mid_layer} outside 1..{self.backbone_depth}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.channels % self.n_heads:
            raise ConfigError("channels must be divisible by n_heads")
        if self.channels % 2:
            raise ConfigError("channels must be even")
        patch_dim = self.patch_size**2 * self.frame_channels
        if not 1 <= self.latent_dim <= patch_dim:
            raise ConfigError(f"latent_dim must lie in 1..{patch_dim}")

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def video_tokens(self) -> int:
        return self.n_frames * self.tokens_per_frame

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.frame_channels

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "height": self.height,
            "width": self.width,
            "patch_size": self.patch_size,
            "frame_channels": self.frame_channels,
            "latent_dim": self.latent_dim,
            "channels": self.channels,
            "backbone_depth": self.backbone_depth,
            "geometry_depth": self.geometry_depth,
            "n_heads": self.n_heads,
            "mid_layer": self.mid_layer,
            "alpha": self.alpha,
            "task_vocab": self.task_vocab,
            "target_vocab": self.target_vocab,
            "geo_channels": self.geo_channels,
            "depth_scale": self.depth_scale,
            "min_depth": self.min_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Parameters:
    """Named float64 slices for both branches plus the frozen codec.

    Every read goes through :meth:`get` and is recorded in ``accessed``;
    inference-independence tests rely on that record.  Insertion order is
    fixed at creation and used for checkpoint layout.
    """

    def __init__(self, arrays: dict, config: ModelConfig):
        self._arrays = {}
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name} is non-finite")
            self._arrays[name] = a
        self.config = config
        self.accessed = set()

    def get(self, name: str) -> np.ndarray:
        self.accessed.add(name)
        return self._arrays[name]

    def set_(self, name: str, value: np.ndarray) -> None:
        cur = self._arrays[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {cur.shape}")
        self._arrays[name] = value

    def names(self) -> list:
        return list(self._arrays)

    def shape(self, name: str) -> tuple:
        return self._arrays[name].shape

    def reset_access(self) -> None:
        self.accessed = set()

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self._arrays.items()}, self.config)

    def zeroed(self, prefix: str) -> "Parameters":
        # Unmatched slices are shared, not copied: reallocating them can
        # shift buffer alignment and perturb BLAS sums by ULPs, which
        # would break bit-identity checks against the original.
        return Parameters(
            {k: (np.zeros_like(v) if k.startswith(prefix) else v) for k, v in self._arrays.items()},
            self.config,
        )

    def slice_bytes(self, prefix: str) -> bytes:
        return b"".join(self._arrays[k].tobytes() for k in self._arrays if k.startswith(prefix))

    def trainable_names(self) -> list:
        return [k for k in self._arrays if k.startswith(("vid.", "geo."))]


class _Store:
    """Name lookup that serves graph leaves when present, else parameters."""

    def __init__(self, params: Parameters, leaves=None):
        self._params = params
        self._leaves = leaves or {}

    def __getitem__(self, name: str):
        if name in self._leaves:
            self._params.accessed.add(name)
            return self._leaves[name]
        return self._params.get(name)


def _default_codec(cfg: ModelConfig) -> dict:
    basis = np.zeros((cfg.patch_dim, cfg.latent_dim))
    basis[: cfg.latent_dim, : cfg.latent_dim] = np.eye(cfg.latent_dim)
    return {
        "codec.mean": np.zeros(cfg.patch_dim),
        "codec.basis": basis,
        "codec.scale": np.ones(cfg.latent_dim),
    }


def init_parameters(cfg: ModelConfig, seed: int, codec: dict | None = None) -> Parameters:
    """Fresh parameters; deterministic in (config, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_INIT]))
    c, d, cg = cfg.channels, cfg.latent_dim, cfg.geo_channels
    arrays = {}

    def w(name, fan_in, shape):
        arrays[name] = rng.standard_normal(shape) / np.sqrt(fan_in)

    def z(name, shape):
        arrays[name] = np.zeros(shape)

    def emb(name, shape):
        arrays[name] = 0.02 * rng.standard_normal(shape)

    arrays.update(codec if codec is not None else _default_codec(cfg))

    w("vid.in.w", d, (d, c))
    z("vid.in.b", (c,))
    w("vid.prefix.w", d, (d, c))
    z("vid.prefix.b", (c,))
    emb("vid.pos", (cfg.tokens_per_frame + cfg.video_tokens, c))
    w("vid.time.w1", c, (c, c))
    z("vid.time.b1", (c,))
    w("vid.time.w2", c, (c, c))
    z("vid.time.b2", (c,))
    emb("vid.task_emb", (cfg.task_vocab, c))
    emb("vid.tgt_emb", (cfg.target_vocab, c))
    for i in range(cfg.backbone_depth):
        z(f"vid.blk{i}.ada.w", (c, 6 * c))
        z(f"vid.blk{i}.ada.b", (6 * c,))
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"vid.blk{i}.attn.{nm}", c, (c, c))
        w(f"vid.blk{i}.mlp.w1", c, (c, 4 * c))
        z(f"vid.blk{i}.mlp.b1", (4 * c,))
        w(f"vid.blk{i}.mlp.w2", 4 * c, (4 * c, c))
        z(f"vid.blk{i}.mlp.b2", (c,))
    z("vid.head.w", (c, d))
    z("vid.head.b", (d,))

    w("geo.in.w", cg, (cg, c))
    z("geo.in.b", (c,))
    emb("geo.pos", (cfg.video_tokens, c))
    w("geo.time.w1", c, (c, c))
    z("geo.time.b1", (c,))
    w("geo.time.w2", c, (c, c))
    z("geo.time.b2", (c,))
    for i in range(cfg.geometry_depth):
        z(f"geo.blk{i}.ada.w", (c, 9 * c))
        z(f"geo.blk{i}.ada.b", (9 * c,))
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"geo.blk{i}.self.{nm}", c, (c, c))
            w(f"geo.blk{i}.cross.{nm}", c, (c, c))
        w(f"geo.blk{i}.mlp.w1", c, (c, 4 * c))
        z(f"geo.blk{i}.mlp.b1", (4 * c,))
        w(f"geo.blk{i}.mlp.w2", 4 * c, (4 * c, c))
        z(f"geo.blk{i}.mlp.b2", (c,))
    z("geo.head.w", (c, cg))
    z("geo.head.b", (cg,))

    return Parameters(arrays, cfg)


# ---------------------------------------------------------------------------
# Frame codec


def pack_frames(rgb: np.ndarray, depth: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Stack RGB and scaled depth into (N, H, W, 4)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if rgb.shape[:-1] != depth.shape or rgb.shape[-1] != 3:
        raise ValueError(f"rgb {rgb.shape} and depth {depth.shape} disagree")
    return np.concatenate([rgb, depth[..., None] / cfg.depth_scale], axis=-1)


def unpack_frames(frames: np.ndarray, cfg: ModelConfig):
    """Split (N, H, W, 4) back into clipped RGB and metric depth."""
    rgb = np.clip(frames[..., :3], 0.0, 1.0)
    depth = np.maximum(frames[..., 3] * cfg.depth_scale, 0.0)
    return rgb, depth


def _patchify(frames: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    n = frames.shape[0]
    p = cfg.patch_size
    hp, wp = cfg.height // p, cfg.width // p
    x = frames.reshape(n, hp, p, wp, p, cfg.frame_channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, hp * wp, cfg.patch_dim)


def _unpatchify(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    n = patches.shape[0]
    p = cfg.patch_size
    hp, wp = cfg.height // p, cfg.width // p
    x = patches.reshape(n, hp, wp, p, p, cfg.frame_channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, cfg.height, cfg.width, cfg.frame_channels)


def fit_codec(frames: np.ndarray, cfg: ModelConfig, max_patches: int = 20000, seed: int = 0) -> dict:
    """Whitened principal-component patch codec, fitted in closed form.

    Component signs are fixed so the largest-magnitude entry of each basis
    vector is positive, which keeps the fit deterministic across SVD
    implementations.
    """
    flat = _patchify(np.asarray(frames, dtype=np.float64), cfg).reshape(-1, cfg.patch_dim)
    if len(flat) > max_patches:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_CODEC]))
        idx = np.sort(rng.choice(len(flat), size=max_patches, replace=False))
        flat = flat[idx]
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[: cfg.latent_dim].T
    if basis.shape[1] < cfg.latent_dim:
        raise NumericalError(f"only {basis.shape[1]} principal components available, need {cfg.latent_dim}")
    flips = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(basis.shape[1])])
    flips[flips == 0] = 1.0
    basis = basis * flips
    scale = svals[: cfg.latent_dim] / np.sqrt(max(len(flat) - 1, 1))
    scale = np.where(scale > 1e-6, scale, 1.0)
    return {"codec.mean": mean, "codec.basis": basis, "codec.scale": scale}


def encode_frames(frames: np.ndarray, params: Parameters) -> np.ndarray:
    """Packed frames (N, H, W, 4) to latent tokens (N, patches, latent)."""
    cfg = params.config
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[1:] != (cfg.height, cfg.width, cfg.frame_channels):
        raise ValueError(f"frame shape {frames.shape[1:]} does not match config")
    flat = _patchify(frames, cfg)
    return (flat - params.get("codec.mean")) @ params.get("codec.basis") / params.get("codec.scale")


def decode_frames(latents: np.ndarray, params: Parameters) -> np.ndarray:
    """Latent tokens back to packed frames (N, H, W, 4)."""
    cfg = params.config
    latents = np.asarray(latents, dtype=np.float64)
    flat = (latents * params.get("codec.scale")) @ params.get("codec.basis").T + params.get("codec.mean")
    return _unpatchify(flat, cfg)


# ---------------------------------------------------------------------------
# Transformer forward


def _time_features(t: np.ndarray, channels: int) -> np.ndarray:
    """Sinusoidal embedding of flow time; plain array, no gradient."""
    half = channels // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _linear(store, x, prefix):
    return tape.add(tape.matmul(x, store[f"{prefix}.w"]), store[f"{prefix}.b"])


def _cond_mlp(store, t, prefix, channels):
    tb = _time_features(t, channels)
    h = tape.gelu(tape.add(tape.matmul(tb, store[f"{prefix}.w1"]), store[f"{prefix}.b1"]))
    return tape.add(tape.matmul(h, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


def _heads_split(x, n_heads):
    b, s, c = tape.value(x).shape
    x = tape.reshape(x, (b, s, n_heads, c // n_heads))
    return tape.swapaxes(x, 1, 2)


def _heads_join(x):
    b, h, s, dh = tape.value(x).shape
    x = tape.swapaxes(x, 1, 2)
    return tape.reshape(x, (b, s, h * dh))


def _attention(store, prefix, x_q, x_kv, n_heads):
    q = _heads_split(tape.matmul(x_q, store[f"{prefix}.wq"]), n_heads)
    k = _heads_split(tape.matmul(x_kv, store[f"{prefix}.wk"]), n_heads)
    v = _heads_split(tape.matmul(x_kv, store[f"{prefix}.wv"]), n_heads)
    dh = tape.value(q).shape[-1]
    scores = tape.mul(tape.matmul(q, tape.swapaxes(k, -1, -2)), dh**-0.5)
    out = tape.matmul(tape.softmax(scores), v)
    return tape.matmul(_heads_join(out), store[f"{prefix}.wo"])


def _mlp(store, prefix, x):
    h = tape.gelu(tape.add(tape.matmul(x, store[f"{prefix}.w1"]), store[f"{prefix}.b1"]))
    return tape.add(tape.matmul(h, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


def _modulation(store, prefix, c, parts):
    b = tape.value(c).shape[0]
    ada = tape.add(tape.matmul(c, store[f"{prefix}.w"]), store[f"{prefix}.b"])
    width = tape.value(ada).shape[-1] // parts
    ada = tape.reshape(ada, (b, 1, parts, width))
    return [ada[:, :, i] for i in range(parts)]


def _modulate(x, shift, scale):
    return tape.add(tape.mul(x, tape.add(scale, 1.0)), shift)


def _video_block(store, i, x, c, n_heads):
    sh1, sc1, g1, sh2, sc2, g2 = _modulation(store, f"vid.blk{i}.ada", c, 6)
    h = _modulate(tape.layer_norm(x), sh1, sc1)
    x = tape.add(x, tape.mul(g1, _attention(store, f"vid.blk{i}.attn", h, h, n_heads)))
    h = _modulate(tape.layer_norm(x), sh2, sc2)
    return tape.add(x, tape.mul(g2, _mlp(store, f"vid.blk{i}.mlp", h)))


def backbone_forward(store, cfg: ModelConfig, z_t, t, task_ids, target_ids, prefix):
    """Video branch: returns (mid-layer features, predicted velocity).

    z_t: (B, S, latent) noised video tokens; prefix: (B, tokens_per_frame,
    latent) clean first-frame tokens; t: (B,) flow times.  Features are the
    configured block's post-residual output restricted to the noised token
    positions.
    """
    tp = cfg.tokens_per_frame
    xp = _linear(store, prefix, "vid.prefix")
    xz = _linear(store, z_t, "vid.in")
    x = tape.add(tape.concat([xp, xz], axis=1), store["vid.pos"])
    c = _cond_mlp(store, t, "vid.time", cfg.channels)
    c = tape.add(c, tape.add(tape.embedding(store["vid.task_emb"], task_ids), tape.embedding(store["vid.tgt_emb"], target_ids)))
    m = None
    for i in range(cfg.backbone_depth):
        x = _video_block(store, i, x, c, cfg.n_heads)
        if i == cfg.mid_layer - 1:
            m = x[:, tp:]
    v = _linear(store, tape.layer_norm(x[:, tp:]), "vid.head")
    return m, v


def geometry_forward(store, cfg: ModelConfig, g_t, t, m):
    """Geometry branch: velocity over geometry tokens.

    The signature is the module's structural claim: besides its own noised
    tokens and the time, the branch sees nothing but the video features m.
    """
    y = tape.add(_linear(store, g_t, "geo.in"), store["geo.pos"])
    c = _cond_mlp(store, t, "geo.time", cfg.channels)
    kv = tape.layer_norm(m)
    for i in range(cfg.geometry_depth):
        sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = _modulation(store, f"geo.blk{i}.ada", c, 9)
        h = _modulate(tape.layer_norm(y), sh1, sc1)
        y = tape.add(y, tape.mul(g1, _attention(store, f"geo.blk{i}.self", h, h, cfg.n_heads)))
        h = _modulate(tape.layer_norm(y), sh2, sc2)
        y = tape.add(y, tape.mul(g2, _attention(store, f"geo.blk{i}.cross", h, kv, cfg.n_heads)))
        h = _modulate(tape.layer_norm(y), sh3, sc3)
        y = tape.add(y, tape.mul(g3, _mlp(store, f"geo.blk{i}.mlp", h)))
    return _linear(store, tape.layer_norm(y), "geo.head")


# ---------------------------------------------------------------------------
# Loss and gradients


@dataclass(frozen=True)
class Batch:
    """One training step's inputs: clean and noise endpoints plus times."""

    z1: np.ndarray  # (B, S, latent)
    g1: np.ndarray  # (B, S, geo_channels), teacher-normalized
    z0: np.ndarray
    g0: np.ndarray
    t: np.ndarray  # (B,)
    task_ids: np.ndarray
    target_ids: np.ndarray
    prefix: np.ndarray  # (B, tokens_per_frame, latent)


def _losses(store, cfg: ModelConfig, batch: Batch, alpha: float, stop_gradient_at_m: bool):
    t3 = batch.t[:, None, None]
    z_t = (1.0 - t3) * batch.z0 + t3 * batch.z1
    v_star = batch.z1 - batch.z0
    m, v_vid = backbone_forward(store, cfg, z_t, batch.t, batch.task_ids, batch.target_ids, batch.prefix)
    l_vid = tape.mse(v_vid, v_star)

    g_t = (1.0 - t3) * batch.g0 + t3 * batch.g1
    w_star = batch.g1 - batch.g0
    m_in = tape.stop_gradient(m) if stop_gradient_at_m else m
    v_geo = geometry_forward(store, cfg, g_t, batch.t, m_in)
    l_geo = tape.mse(v_geo, w_star)

    total = tape.add(l_vid, tape.mul(alpha, l_geo))
    return total, l_vid, l_geo


def joint_loss(batch: Batch, params: Parameters, alpha: float | None = None):
    """(total, video, geometry) loss values on plain arrays."""
    cfg = params.config
    a = cfg.alpha if alpha is None else alpha
    total, l_vid, l_geo = _losses(_Store(params), cfg, batch, a, False)
    out = (float(tape.value(total)), float(tape.value(l_vid)), float(tape.value(l_geo)))
    if not all(np.isfinite(out)):
        raise NumericalError(f"non-finite loss {out}")
    return out


def grad(batch: Batch, params: Parameters, alpha: float | None = None, stop_gradient_at_m: bool = False):
    """Reverse-mode gradients of the joint loss.

    Returns (grads, (total, video, geometry)).  ``grads`` has an entry for
    every parameter slice; frozen codec slices and unreached branches get
    zeros.  With ``stop_gradient_at_m`` the geometry loss cannot influence
    any vid.* slice.  With alpha = 0 the geometry branch is evaluated
    outside the graph, so every geo.* gradient is exactly zero.
    """
    cfg = params.config
    a = cfg.alpha if alpha is None else alpha
    leaves = {name: tape.leaf(params.get(name)) for name in params.trainable_names()}
    store = _Store(params, leaves)

    if a == 0.0:
        t3 = batch.t[:, None, None]
        z_t = (1.0 - t3) * batch.z0 + t3 * batch.z1
        m, v_vid = backbone_forward(store, cfg, z_t, batch.t, batch.task_ids, batch.target_ids, batch.prefix)
        total = tape.mse(v_vid, batch.z1 - batch.z0)
        l_vid = total
        # Reported for the curve only; plain arrays, no graph, no updates.
        plain = _Store(params)
        g_t = (1.0 - t3) * batch.g0 + t3 * batch.g1
        v_geo = geometry_forward(plain, cfg, g_t, batch.t, tape.value(m))
        l_geo_val = float(np.mean((v_geo - (batch.g1 - batch.g0)) ** 2))
    else:
        total, l_vid, l_geo = _losses(store, cfg, batch, a, stop_gradient_at_m)
        l_geo_val = float(tape.value(l_geo))

    tape.backward(total)
    grads = {}
    for name in params.names():
        leaf = leaves.get(name)
        if leaf is not None and leaf.grad is not None:
            grads[name] = leaf.grad
        else:
            grads[name] = np.zeros(params.shape(name))
    losses = (float(tape.value(total)), float(tape.value(l_vid)), l_geo_val)
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    return grads, losses


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class OptimizerConfig:
    steps: int = 400
    batch_size: int = 4
    lr: float = 2e-3
    rho: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.rho < 1 or self.eps <= 0 or self.clip_norm <= 0:
            raise ConfigError("bad optimizer settings")


@dataclass(frozen=True)
class TrainingSet:
    """Pre-encoded dataset: latents, normalized geometry tokens, conditioning."""

    z1: np.ndarray  # (M, S, latent)
    g1: np.ndarray  # (M, S, geo_channels)
    task_ids: np.ndarray
    target_ids: np.ndarray
    codec: dict
    teacher_spec: TeacherSpec

    @property
    def size(self) -> int:
        return len(self.z1)

    def prefix(self, idx, tokens_per_frame: int) -> np.ndarray:
        return self.z1[idx][:, :tokens_per_frame]


def build_training_set(rollouts: list, cfg: ModelConfig, teacher_spec: TeacherSpec | None = None, seed: int = 0) -> TrainingSet:
    """Encode rollouts into a TrainingSet; fits codec and teacher statistics.

    Pass a teacher_spec with statistics already fitted to reuse them (the
    held-out evaluation path); otherwise statistics are fitted here.
    """
    if not rollouts:
        raise ValueError("empty rollout list")
    spec = teacher_spec if teacher_spec is not None else TeacherSpec(patch_size=cfg.patch_size)
    if spec.patch_size != cfg.patch_size:
        raise ConfigError("teacher and model patch sizes differ")
    if spec.channels != cfg.geo_channels:
        raise ConfigError(f"teacher has {spec.channels} channels, model expects {cfg.geo_channels}")

    packed = [pack_frames(r.rgb_tensor(), r.depth_tensor(), cfg) for r in rollouts]
    codec = fit_codec(np.concatenate(packed, axis=0), cfg, seed=seed)
    params_probe = Parameters({**codec}, cfg)

    reprs = [extract(r, spec) for r in rollouts]
    if teacher_spec is None:
        spec = fit_normalization(reprs, spec)

    z1, g1, tasks, targets = [], [], [], []
    for r, frames, rep in zip(rollouts, packed, reprs):
        lat = encode_frames(frames, params_probe)
        z1.append(lat.reshape(cfg.video_tokens, cfg.latent_dim))
        g1.append(normalize(rep, spec).tokens().reshape(cfg.video_tokens, cfg.geo_channels))
        inst = r.instruction
        task = inst.task_id if inst is not None else 0
        target = inst.target_object_id if inst is not None else 0
        if not (0 <= task < cfg.task_vocab and 0 <= target < cfg.target_vocab):
            raise ConfigError(f"instruction ids ({task}, {target}) outside vocabulary")
        tasks.append(task)
        targets.append(target)
    return TrainingSet(
        z1=np.stack(z1),
        g1=np.stack(g1),
        task_ids=np.asarray(tasks, dtype=np.int64),
        target_ids=np.asarray(targets, dtype=np.int64),
        codec=codec,
        teacher_spec=spec,
    )


def train(dataset: TrainingSet, cfg: ModelConfig, opt: OptimizerConfig, seed: int):
    """RMSProp training loop; returns (Parameters, curve).

    curve rows are (step, total, video, geometry).  Deterministic in
    (dataset, configs, seed).  Aborts with the step index on divergence.
    """
    if dataset.size == 0:
        raise ValueError("empty dataset")
    if dataset.z1.shape[1:] != (cfg.video_tokens, cfg.latent_dim):
        raise ConfigError(f"dataset latents {dataset.z1.shape[1:]} do not match config")
    params = init_parameters(cfg, seed, codec=dataset.codec)
    rng_batch = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_BATCH]))
    rng_t = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_TIME]))
    rng_z = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_ZNOISE]))
    rng_g = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_GNOISE]))

    second_moment = {name: np.zeros(params.shape(name)) for name in params.trainable_names()}
    curve = []
    b = opt.batch_size
    for step in range(opt.steps):
        idx = rng_batch.choice(dataset.size, size=b, replace=dataset.size < b)
        batch = Batch(
            z1=dataset.z1[idx],
            g1=dataset.g1[idx],
            z0=rng_z.standard_normal((b, cfg.video_tokens, cfg.latent_dim)),
            g0=rng_g.standard_normal((b, cfg.video_tokens, cfg.geo_channels)),
            t=rng_t.uniform(0.0, 1.0, b),
            task_ids=dataset.task_ids[idx],
            target_ids=dataset.target_ids[idx],
            prefix=dataset.prefix(idx, cfg.tokens_per_frame),
        )
        try:
            grads, losses = grad(batch, params)
        except NumericalError as e:
            raise NumericalError(f"diverged at step {step}: {e}") from e
        if not all(np.isfinite(losses)):
            raise NumericalError(f"diverged at step {step}: loss {losses}")

        norm = np.sqrt(sum(float(np.sum(g * g)) for n, g in grads.items() if n in second_moment))
        if not np.isfinite(norm):
            raise NumericalError(f"diverged at step {step}: gradient norm is non-finite")
        factor = min(1.0, opt.clip_norm / (norm + 1e-12))
        for name in second_moment:
            g = grads[name] * factor
            second_moment[name] = opt.rho * second_moment[name] + (1.0 - opt.rho) * g * g
            params.set_(name, params.get(name) - opt.lr * g / (np.sqrt(second_moment[name]) + opt.eps))
        curve.append((step, losses[0], losses[1], losses[2]))
    return params, curve


def loss_csv(curve: list) -> str:
    lines = ["step,loss,loss_vid,loss_geo"]
    for step, total, vid, geo in curve:
        lines.append(f"{step},{total!r},{vid!r},{geo!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sampling


def generate(
    rgb0: np.ndarray,
    depth0: np.ndarray,
    instruction: InstructionId | None,
    params: Parameters,
    steps: int = 20,
    seed: int = 0,
    intrinsics=None,
    source_config=None,
) -> PredictedRollout:
    """Sample a rollout from the first frame and instruction.

    Only vid.* and codec.* slices are read; the access record proves it.
    """
    cfg = params.config
    frame0 = pack_frames(rgb0[None], depth0[None], cfg)
    prefix = encode_frames(frame0, params)
    task = instruction.task_id if instruction is not None else 0
    target = instruction.target_object_id if instruction is not None else 0
    task_ids = np.asarray([task], dtype=np.int64)
    target_ids = np.asarray([target], dtype=np.int64)
    store = _Store(params)

    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SAMPLE]))
    z1 = rng.standard_normal((1, cfg.video_tokens, cfg.latent_dim))

    def velocity(z, t):
        _, v = backbone_forward(store, cfg, z, np.full(1, t), task_ids, target_ids, prefix)
        return v

    z = euler_sample(velocity, z1, steps)
    frames = decode_frames(z[0].reshape(cfg.n_frames, cfg.tokens_per_frame, cfg.latent_dim), params)
    rgb, depth = unpack_frames(frames, cfg)
    return PredictedRollout(
        rgb=rgb.astype(np.float32),
        depth=depth,
        intrinsics=intrinsics,
        instruction=instruction,
        source_config=source_config,
        provenance={"steps": steps, "seed": seed},
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: Parameters, step: int = 0, extra: dict | None = None) -> None:
    """JSON header (config, step, slice table) + concatenated raw float64."""
    names = params.names()
    header = {
        "format": _CKPT_NAME,
        "version": _CKPT_VERSION,
        "config": params.config.to_dict(),
        "step": int(step),
        "extra": extra or {},
        "slices": [{"name": n, "shape": list(params.shape(n))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params.get(n), dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (Parameters, step, extra)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise MissingInputError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + hlen:
        raise FormatError(f"{path}: header overruns file")
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad checkpoint header: {e}") from e
    if header.get("format") != _CKPT_NAME or header.get("version") != _CKPT_VERSION:
        raise FormatError(f"{path}: not a supported checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    arrays = {}
    offset = 4 + hlen
    for entry in header["slices"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(raw):
            raise FormatError(f"{path}: slice {entry['name']} overruns file")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return Parameters(arrays, cfg), int(header["step"]), header.get("extra", {})
