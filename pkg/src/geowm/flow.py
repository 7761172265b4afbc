"""Flow-matching path, loss, and Euler sampler.

Convention (shared by both model branches): the probability path is the
straight line z_t = (1-t)*z0 + t*z1 between a data latent z0 and noise z1,
so the regression target is the constant velocity v* = z1 - z0.  Sampling
transports noise back to data by integrating dz/dt = v from t=1 down to
t=0; all sign bookkeeping lives in :func:`euler_sample`.

Everything here runs in 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


@dataclass(frozen=True)
class FlowSample:
    """Point on the interpolation path with its regression target."""

    z_t: np.ndarray
    t: float
    v_target: np.ndarray


def interpolate(z0: np.ndarray, z1: np.ndarray, t: float) -> FlowSample:
    """Linear path sample: z_t = (1-t)*z0 + t*z1, v_target = z1 - z0.

    Raises ValueError on shape mismatch or t outside [0, 1].
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ValueError(f"latent shapes differ: {z0.shape} vs {z1.shape}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"path parameter must lie in [0, 1], got {t}")
    return FlowSample(z_t=(1.0 - t) * z0 + t * z1, t=t, v_target=z1 - z0)


def fm_loss(v_pred: np.ndarray, v_target: np.ndarray) -> float:
    """Mean over all elements of the squared velocity error."""
    v_pred = np.asarray(v_pred, dtype=np.float64)
    v_target = np.asarray(v_target, dtype=np.float64)
    if v_pred.shape != v_target.shape:
        raise ValueError(f"velocity shapes differ: {v_pred.shape} vs {v_target.shape}")
    diff = v_pred - v_target
    return float(np.mean(diff * diff))


def euler_sample(velocity_fn, z1: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dz/dt = velocity_fn(z, t) from t=1 to t=0 in uniform steps.

    ``velocity_fn(z, t)`` must return an array of z's shape.  With the
    constant target velocity z1 - z0 this recovers z0 for any step count.

    Raises NumericalError if the velocity field returns non-finite values,
    ValueError for steps < 1.
    """
    steps = int(steps)
    if steps < 1:
        raise ValueError(f"need at least one integration step, got {steps}")
    z = np.array(z1, dtype=np.float64, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        v = np.asarray(velocity_fn(z, t), dtype=np.float64)
        if v.shape != z.shape:
            raise ValueError(f"velocity shape {v.shape} does not match state {z.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"velocity field returned non-finite values at t={t:.6f}")
        z -= dt * v
    return z
