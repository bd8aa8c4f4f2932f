"""Noise schedule, forward noising, denoising loss and the deterministic reverse step.

Timesteps are 1-based: ``t`` in ``1..T`` indexes the schedule tables and
``t = 0`` is the noise-free level (``alpha_bar = 1``), usable as the target of
a reverse step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .errors import InvalidRangeError, ShapeMismatchError, TimestepError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at 1-based timestep ``t``; ``t = 0`` returns 1.0."""
        t = int(t)
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise TimestepError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict[str, Any]:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": self.kind}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if not (isinstance(T, (int, np.integer)) and T >= 2):
        raise InvalidRangeError(f"T must be an integer >= 2, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRangeError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        # beta_end doubles as the clip ceiling; beta_start as the floor
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_start, beta_end)
    else:
        raise InvalidRangeError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars, kind, float(beta_start), float(beta_end))


def schedule_from_dict(d: dict[str, Any]) -> NoiseSchedule:
    return make_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]), d.get("kind", "linear"))


def _coef(sched: NoiseSchedule, t, ndim: int, like, allow_zero: bool = False):
    """sqrt(alpha_bar) and sqrt(1 - alpha_bar), broadcastable against a batch."""
    ts = np.atleast_1d(np.asarray(t))
    lo = 0 if allow_zero else 1
    if ts.size == 0 or ts.min() < lo or ts.max() > sched.T:
        raise TimestepError(f"timestep {t} outside [{lo}, {sched.T}]")
    ab = np.array([sched.alpha_bar(int(v)) for v in ts], dtype=np.float64)
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if np.ndim(t) == 0:
        return float(a[0]), float(b[0])
    shape = (-1,) + (1,) * (ndim - 1)
    if _is_torch(like):
        import torch
        return (torch.as_tensor(a, dtype=like.dtype).reshape(shape),
                torch.as_tensor(b, dtype=like.dtype).reshape(shape))
    return a.reshape(shape), b.reshape(shape)


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def _check_same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """Sample ``z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is a scalar or one timestep per leading-batch entry. Works on numpy
    arrays and torch tensors alike.
    """
    _check_same_shape(z0, eps)
    a, b = _coef(sched, t, len(z0.shape), z0)
    return a * z0 + b * eps


def denoising_loss(eps_pred, eps):
    """Mean squared error between predicted and true noise."""
    _check_same_shape(eps_pred, eps)
    d = eps_pred - eps
    return (d * d).mean()


def predict_z0(z_t, eps_pred, t, sched: NoiseSchedule):
    a, b = _coef(sched, t, len(z_t.shape), z_t)
    return (z_t - b * eps_pred) / a


def reverse_step(z_t, eps_pred, t, t_prev, sched: NoiseSchedule, clip: Optional[float] = None):
    """Deterministic (eta = 0) DDIM update from level ``t`` to ``t_prev``.

    With ``clip`` set, the clean estimate is clamped to ``[-clip, clip]`` and the
    noise is re-derived from the clamped estimate before stepping. Near the
    terminal level the estimate divides by sqrt(alpha_bar) ~ 0.006, so small
    noise errors otherwise push the trajectory far outside the data range.
    """
    _check_same_shape(z_t, eps_pred)
    if np.any(np.asarray(t_prev) >= np.asarray(t)):
        raise TimestepError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    z0_hat = predict_z0(z_t, eps_pred, t, sched)
    if clip is not None:
        z0_hat = z0_hat.clamp(-clip, clip) if _is_torch(z0_hat) else np.clip(z0_hat, -clip, clip)
        a_t, b_t = _coef(sched, t, len(z_t.shape), z_t)
        eps_pred = (z_t - a_t * z0_hat) / b_t
    a, b = _coef(sched, t_prev, len(z_t.shape), z_t, allow_zero=True)
    return a * z0_hat + b * eps_pred


def sampling_timesteps(T_sample: int, T: int) -> list[int]:
    """Training timestep for sampling steps ``0..T_sample`` (index 0 is the clean level)."""
    if not 1 <= T_sample <= T:
        raise InvalidRangeError(f"need 1 <= T_sample <= T, got {T_sample}, {T}")
    ts = [int(round(s * T / T_sample)) for s in range(T_sample + 1)]
    return ts
