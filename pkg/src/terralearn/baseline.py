"""Coarse tracker used until the learner takes over.

Proportional wheel-speed control on the forward velocity error plus
pure-pursuit steering toward a look-ahead point on the track.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .track import Track, intersection_angle, lookahead
from .vehicle import PSI, VX, VY, X, Y, Action, VehicleParams


@dataclass(frozen=True)
class BaselineConfig:
    k_p: float = 5.0
    look_distance: float = 0.5
    wheelbase: float = 0.32

    def __post_init__(self):
        if not (self.k_p > 0 and self.look_distance > 0 and self.wheelbase > 0):
            raise ValueError("k_p, look_distance and wheelbase must all be positive")


def velocity_command(v_desired: float, v_body: float, cfg: BaselineConfig,
                     limit: float = math.inf) -> float:
    """Wheel-speed command ``K_p * (V_d - v_body)`` [rad/s], clamped to ``limit``."""
    cmd = cfg.k_p * (v_desired - v_body)
    return min(max(cmd, -limit), limit)


def pure_pursuit(alpha: float, cfg: BaselineConfig, limit: float = math.inf) -> float:
    """Steering angle ``atan(2 L sin(alpha) / L_d)``, clamped to ``limit``."""
    phi = math.atan(2.0 * cfg.wheelbase * math.sin(alpha) / cfg.look_distance)
    return min(max(phi, -limit), limit)


def forward_speed(state) -> float:
    """Velocity component along the body's forward axis."""
    return float(state[VX] * math.cos(state[PSI]) + state[VY] * math.sin(state[PSI]))


def baseline_action(state, track: Track, cfg: BaselineConfig, params: VehicleParams) -> Action:
    pose = np.array([state[X], state[Y], state[PSI]])
    alpha = intersection_angle(pose, lookahead(track, pose, cfg.look_distance))
    phi = pure_pursuit(alpha, cfg, params.steering_limit)
    omega = velocity_command(track.desired_speed, forward_speed(state), cfg, params.wheel_speed_limit)
    return Action(phi, omega)
