"""Stochastic-interpolant schedules and the conversions between velocity,
score and denoised estimate, plus Euler ODE / Euler-Maruyama SDE steps.

Time runs over [0, 1] with t=0 clean data and t=1 pure noise:
``x_t = alpha(t) * x0 + sigma(t) * eps``.  Samplers integrate from t=1 down
to t=0, so an Euler step subtracts ``dt * v``.

The conversion helpers accept either numpy arrays or diffcore Vars.  For
numpy inputs ``t`` may be a scalar or a per-sample array of shape (B,).
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .diffcore import Var

T_CLAMP = 1e-3


class InterpolantSchedule:
    """Base class: subclasses supply alpha, sigma and their derivatives."""

    name = "base"

    def alpha(self, t):
        raise NotImplementedError

    def sigma(self, t):
        raise NotImplementedError

    def dalpha(self, t):
        raise NotImplementedError

    def dsigma(self, t):
        raise NotImplementedError

    def g(self, t):
        """Diffusion coefficient of the stochastic sampler (default sigma)."""
        return self.sigma(t)

    def __repr__(self):
        return f"{type(self).__name__}()"


class LinearSchedule(InterpolantSchedule):
    name = "linear"

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def sigma(self, t):
        return np.asarray(t, dtype=np.float64) * 1.0

    def dalpha(self, t):
        return -np.ones_like(np.asarray(t, dtype=np.float64))

    def dsigma(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))


class CosineSchedule(InterpolantSchedule):
    name = "cosine"

    def alpha(self, t):
        return np.cos(0.5 * math.pi * np.asarray(t, dtype=np.float64))

    def sigma(self, t):
        return np.sin(0.5 * math.pi * np.asarray(t, dtype=np.float64))

    def dalpha(self, t):
        return -0.5 * math.pi * np.sin(0.5 * math.pi * np.asarray(t, dtype=np.float64))

    def dsigma(self, t):
        return 0.5 * math.pi * np.cos(0.5 * math.pi * np.asarray(t, dtype=np.float64))


SCHEDULES = {"linear": LinearSchedule, "cosine": CosineSchedule}


def get_schedule(name: str) -> InterpolantSchedule:
    try:
        return SCHEDULES[name]()
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}") from None


def _coef(c, x):
    """Shape a scalar or per-sample coefficient to multiply ``x``."""
    c = np.asarray(c, dtype=np.float64)
    if isinstance(x, Var):
        if c.ndim != 0:
            raise ValueError("Var inputs need a scalar t")
        return float(c)
    if c.ndim == 0:
        return float(c)
    return c.reshape(c.shape + (1,) * (np.ndim(x) - c.ndim))


def _check_t(t, lo=0.0, hi=1.0, closed=(True, True)):
    ta = np.asarray(t, dtype=np.float64)
    low_ok = np.all(ta >= lo) if closed[0] else np.all(ta > lo)
    high_ok = np.all(ta <= hi) if closed[1] else np.all(ta < hi)
    if not (low_ok and high_ok):
        raise ValueError(f"t={t} outside the admissible range")


def corrupt(schedule: InterpolantSchedule, x0, eps, t):
    """alpha(t) * x0 + sigma(t) * eps."""
    _check_t(t)
    if np.shape(x0) != np.shape(eps):
        raise ValueError("x0 and eps shapes differ")
    return _coef(schedule.alpha(t), x0) * x0 + _coef(schedule.sigma(t), eps) * eps


def velocity_target(schedule: InterpolantSchedule, x0, eps, t):
    """Conditional flow-matching regression target dalpha * x0 + dsigma * eps."""
    _check_t(t)
    if np.shape(x0) != np.shape(eps):
        raise ValueError("x0 and eps shapes differ")
    return _coef(schedule.dalpha(t), x0) * x0 + _coef(schedule.dsigma(t), eps) * eps


def score_from_velocity(schedule: InterpolantSchedule, x_t, v, t):
    """Score of the time-t marginal recovered from the velocity field.

    s = (alpha * v - dalpha * x) / (sigma * (dalpha * sigma - alpha * dsigma))
    """
    _check_t(t, closed=(False, False))
    a, s = schedule.alpha(t), schedule.sigma(t)
    da, ds = schedule.dalpha(t), schedule.dsigma(t)
    denom = s * (da * s - a * ds)
    if np.any(np.abs(denom) < 1e-15):
        raise ValueError("degenerate score conversion")
    return _coef(a / denom, v) * v - _coef(da / denom, x_t) * x_t


def denoised_estimate(schedule: InterpolantSchedule, x_t, v, t):
    """E[x0 | x_t] from the velocity: (dsigma * x - sigma * v) / (dsigma*alpha - sigma*dalpha)."""
    _check_t(t, closed=(True, False))
    a, s = schedule.alpha(t), schedule.sigma(t)
    da, ds = schedule.dalpha(t), schedule.dsigma(t)
    denom = ds * a - s * da
    if np.any(np.abs(denom) < 1e-15):
        raise ValueError("degenerate denoiser denominator")
    return _coef(ds / denom, x_t) * x_t - _coef(s / denom, v) * v


def clamp_t(t: float) -> float:
    return min(max(float(t), T_CLAMP), 1.0 - T_CLAMP)


VelocityField = Callable[[np.ndarray, float], np.ndarray]


def euler_update(x, v, dt: float):
    """One Euler step toward the data end (t decreases by dt)."""
    return x - dt * v


def ode_step(field: VelocityField, x_t: np.ndarray, t: float, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = np.asarray(field(x_t, t))
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite velocity at t={t}")
    return euler_update(x_t, v, dt)


def sde_step(
    field: VelocityField,
    x_t: np.ndarray,
    t: float,
    dt: float,
    g: Callable[[float], float] | float | None,
    rng: np.random.Generator,
    schedule: InterpolantSchedule | None = None,
) -> np.ndarray:
    """Euler-Maruyama step of the reverse SDE sharing the ODE's marginals.

    Integrating from t to t - dt:
        x <- x - dt * (v - g^2/2 * s) + g * sqrt(dt) * xi
    With g == 0 this is exactly :func:`ode_step` and draws no noise.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    schedule = schedule or LinearSchedule()
    if g is None:
        gt = float(schedule.g(t))
    elif callable(g):
        gt = float(g(t))
    else:
        gt = float(g)
    if gt < 0:
        raise ValueError("diffusion coefficient must be non-negative")
    v = np.asarray(field(x_t, t))
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite velocity at t={t}")
    if gt == 0.0:
        return euler_update(x_t, v, dt)
    score = score_from_velocity(schedule, x_t, v, clamp_t(t))
    noise = rng.standard_normal(np.shape(x_t))
    return x_t - dt * (v - 0.5 * gt * gt * score) + gt * math.sqrt(dt) * noise


def time_grid(steps: int) -> np.ndarray:
    """Descending grid t_k = k / T for k = T..1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.arange(steps, 0, -1, dtype=np.float64) / steps
