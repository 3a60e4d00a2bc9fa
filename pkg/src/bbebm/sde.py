"""Variance-exploding diffusion schedule and its exact Gaussian transition law."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: score-matching times are drawn from [T_EPS, T] to dodge the 1/var singularity
T_EPS = 1e-3


@dataclass(frozen=True)
class VESchedule:
    sigma_min: float = 0.01
    sigma_max: float = 0.1
    horizon: float = 1.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


def _check_t(sched, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > sched.horizon):
        raise ValueError(f"t outside [0, {sched.horizon}]")
    return t


def g(sched, t):
    """Diffusion coefficient sigma_min (sigma_max/sigma_min)^t sqrt(2 log sigma_max/sigma_min)."""
    t = _check_t(sched, t)
    ratio = sched.sigma_max / sched.sigma_min
    return sched.sigma_min * ratio ** t * np.sqrt(2.0 * np.log(ratio))


def sigma(sched, t):
    """Noise scale sigma_min (sigma_max/sigma_min)^t; divides the energy for time conditioning."""
    t = _check_t(sched, t)
    return sched.sigma_min * (sched.sigma_max / sched.sigma_min) ** t


def transition_var(sched, t):
    """Variance of the Gaussian transition law from time 0 to t.

    Closed form of the accumulated squared diffusion coefficient,
    sigma_min^2 ((sigma_max/sigma_min)^{2t} - 1); the transition mean is the
    start point itself.
    """
    t = _check_t(sched, t)
    ratio = sched.sigma_max / sched.sigma_min
    return sched.sigma_min ** 2 * (ratio ** (2.0 * t) - 1.0)


def perturb(sched, x, t, rng):
    """Draw x' from the transition law at time t: x + sqrt(var(t)) n, n ~ N(0, I).

    Scalar t applies to the whole batch; an array t must give one time per row.
    """
    x = np.asarray(x, dtype=np.float64)
    var = np.asarray(transition_var(sched, t))
    std = np.sqrt(var)
    if std.ndim == 1:
        std = std[:, None]
    return x + std * rng.standard_normal(size=x.shape)


def transition_score(sched, x_prime, x, t):
    """Gradient of the transition log-density at x': -(x' - x) / var(t)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("transition score is singular at t = 0")
    var = np.asarray(transition_var(sched, t))
    if var.ndim == 1:
        var = var[:, None]
    return -(np.asarray(x_prime) - np.asarray(x)) / var


def sample_times(sched, n, rng, t_eps=T_EPS):
    """Uniform score-matching times on [t_eps, T]."""
    return rng.uniform(t_eps, sched.horizon, size=n)
