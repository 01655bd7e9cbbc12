"""Measurement noise and a model-free state estimator.

Only position, heading and time are measured. Velocities are recovered by
finite differences of the (optionally smoothed) poses and then low-passed.
No dynamics model is used here so nothing about the terrain leaks to the
learner through the estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NonMonotoneTime
from .vehicle import wrap_angle


class Measurement(NamedTuple):
    t: float
    x: float
    y: float
    psi: float


@dataclass(frozen=True)
class NoiseModel:
    sigma_pos: float = 1.3e-4
    sigma_rot: float = 0.83e-4

    def corrupt(self, t: float, true_pose, rng: np.random.Generator) -> Measurement:
        """Add independent zero-mean gaussian noise to ``(x, y, psi)``.

        Always draws three normals so the stream position does not depend on
        the noise levels.
        """
        n = rng.standard_normal(3)
        x, y, psi = (float(v) for v in true_pose[:3])
        return Measurement(float(t),
                           x + self.sigma_pos * n[0],
                           y + self.sigma_pos * n[1],
                           float(wrap_angle(psi + self.sigma_rot * n[2])))


def corrupt(true_pose, rng: np.random.Generator, sigma_pos: float = 1.3e-4,
            sigma_rot: float = 0.83e-4, t: float = 0.0) -> Measurement:
    return NoiseModel(sigma_pos, sigma_rot).corrupt(t, true_pose, rng)


class StateEstimator:
    """Filtered finite-difference estimator of ``[x, y, vx, vy, psi, psi_dot]``.

    ``pose_alpha`` is the low-pass factor on the measured pose (1 passes it
    through), ``beta`` the factor on the finite-difference velocities. The
    first difference seeds the velocity filter directly.
    """

    def __init__(self, beta: float = 0.5, pose_alpha: float = 1.0):
        if not (0 < beta <= 1 and 0 < pose_alpha <= 1):
            raise ValueError("filter factors must lie in (0, 1]")
        self.beta = beta
        self.pose_alpha = pose_alpha
        self.t: float | None = None
        self.pose = np.zeros(3)
        self.vel = np.zeros(3)
        self._seeded = False

    def update(self, meas: Measurement) -> np.ndarray:
        if self.t is None:
            self.t = meas.t
            self.pose = np.array([meas.x, meas.y, meas.psi], dtype=float)
            self.vel = np.zeros(3)
            return self.state
        dt = meas.t - self.t
        if not dt > 0:
            raise NonMonotoneTime(f"measurement time {meas.t} does not follow {self.t}")
        a = self.pose_alpha
        prev = self.pose
        dpsi = float(wrap_angle(meas.psi - prev[2]))
        pose = np.array([prev[0] + a * (meas.x - prev[0]),
                         prev[1] + a * (meas.y - prev[1]),
                         float(wrap_angle(prev[2] + a * dpsi))])
        raw = np.array([(pose[0] - prev[0]) / dt,
                        (pose[1] - prev[1]) / dt,
                        float(wrap_angle(pose[2] - prev[2])) / dt])
        if self._seeded:
            self.vel = self.beta * raw + (1.0 - self.beta) * self.vel
        else:
            self.vel = raw
            self._seeded = True
        self.pose, self.t = pose, meas.t
        return self.state

    @property
    def state(self) -> np.ndarray:
        return np.array([self.pose[0], self.pose[1], self.vel[0], self.vel[1],
                         self.pose[2], self.vel[2]])


def slope_estimate(true_slope: float, rng: np.random.Generator | None = None,
                   sigma: float = 0.0) -> float:
    """Slope value handed to the controllers (optionally noise-corrupted)."""
    if sigma > 0 and rng is not None:
        return true_slope + sigma * float(rng.standard_normal())
    return true_slope

