"""Planar rigid-body model of a two-wheel Ackerman car on an inclined plane.

The state vector is ``[x, y, vx, vy, psi, psi_dot]`` expressed in the
slope-aligned inertial frame, with ``x`` pointing straight down the slope.
Wheel/ground interaction is a coulomb-plus-viscous friction law applied at
the rear contact point ``p`` and the front (steered) contact point ``c``.

The same compiled kernels drive the ground-truth simulation and every
candidate model the learner evaluates, so a candidate carrying the true
friction coefficients reproduces the truth bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import NonFinite

X, Y, VX, VY, PSI, PSI_DOT = range(6)
STATE_SIZE = 6

#: Default RK4 substep [s]. Stable for friction coefficients up to ~20 at the
#: default smoothing width; see ``stable_substep``.
DT_SIM = 2.5e-4


def wrap_angle(angle):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return math.pi - np.mod(math.pi - angle, 2.0 * math.pi)


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1.0
    wheel_radius: float = 0.10
    rear_offset: float = 0.16
    front_offset: float = 0.16
    yaw_inertia: float = 0.01
    steering_limit: float = math.radians(30.0)
    wheel_speed_limit: float = 50.0

    def __post_init__(self):
        for name in ("mass", "wheel_radius", "rear_offset", "front_offset",
                     "yaw_inertia", "steering_limit", "wheel_speed_limit"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")

    @property
    def wheelbase(self) -> float:
        return self.rear_offset + self.front_offset


@dataclass(frozen=True)
class TerrainParams:
    """Friction coefficients, slope and gravity.

    ``sign_eps`` is the width of the smoothed sign ``tanh(v / eps)`` used in
    the coulomb term; ``sign_eps = 0`` selects the exact (discontinuous) sign.
    """

    mu_s: float = 5.0
    mu_w: float = 1.0
    slope: float = math.radians(30.0)
    gravity: float = 9.81
    sign_eps: float = 0.05

    def __post_init__(self):
        if not (self.mu_s >= 0 and self.mu_w >= 0):
            raise ValueError("friction coefficients must be non-negative")
        if not 0 <= self.slope < math.pi / 2:
            raise ValueError(f"slope must lie in [0, pi/2), got {self.slope!r}")
        if not self.gravity > 0:
            raise ValueError("gravity must be positive")
        if not self.sign_eps >= 0:
            raise ValueError("sign_eps must be non-negative")

    def with_friction(self, mu_s: float, mu_w: float) -> "TerrainParams":
        return replace(self, mu_s=float(mu_s), mu_w=float(mu_w))


class Action(NamedTuple):
    phi: float
    omega_w: float

    @classmethod
    def clamped(cls, phi: float, omega_w: float, params: VehicleParams) -> "Action":
        lim_phi, lim_w = params.steering_limit, params.wheel_speed_limit
        return cls(min(max(float(phi), -lim_phi), lim_phi),
                   min(max(float(omega_w), -lim_w), lim_w))


class ContactForces(NamedTuple):
    f_p_n: float
    f_c_n: float
    f_p_b1: float
    f_p_b2: float
    f_c_w1: float
    f_c_w2: float


def make_state(x=0.0, y=0.0, vx=0.0, vy=0.0, psi=0.0, psi_dot=0.0) -> np.ndarray:
    return np.array([x, y, vx, vy, psi, psi_dot], dtype=float)


def normal_forces(params: VehicleParams, terrain: TerrainParams) -> tuple[float, float]:
    """Quasi-static normal loads at the rear and front contact points."""
    total = params.mass * terrain.gravity * math.cos(terrain.slope)
    rear = total * params.front_offset / params.wheelbase
    return rear, total - rear


def _pack(params: VehicleParams, terrain: TerrainParams) -> np.ndarray:
    f_p, f_c = normal_forces(params, terrain)
    return np.array([
        params.mass,
        params.wheel_radius,
        params.rear_offset,
        params.front_offset,
        params.yaw_inertia,
        params.mass * terrain.gravity * math.sin(terrain.slope),
        f_p,
        f_c,
        terrain.sign_eps,
    ])


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _sgn(v, eps):
    if eps > 0.0:
        return math.tanh(v / eps)
    if v > 0.0:
        return 1.0
    if v < 0.0:
        return -1.0
    return 0.0


@njit(cache=True)
def _friction(slip, normal, mu, eps):
    return mu * (slip + normal * _sgn(slip, eps))


@njit(cache=True)
def _slips_trig(vx, vy, psi_dot, c, s, cw, sw, rw, omega_w, dr, df):
    # contact point velocities: v_cm + psi_dot k x r
    vpx, vpy = vx + dr * psi_dot * s, vy - dr * psi_dot * c
    vcx, vcy = vx - df * psi_dot * s, vy + df * psi_dot * c
    dv_p1 = rw * omega_w - (vpx * c + vpy * s)
    dv_p2 = -vpx * s + vpy * c
    dv_c1 = rw * omega_w - (vcx * cw + vcy * sw)
    dv_c2 = -vcx * sw + vcy * cw
    return dv_p1, dv_p2, dv_c1, dv_c2


@njit(cache=True)
def _slips(vx, vy, psi, psi_dot, phi, omega_w, rw, dr, df):
    c, s = math.cos(psi), math.sin(psi)
    cw, sw = math.cos(psi + phi), math.sin(psi + phi)
    return _slips_trig(vx, vy, psi_dot, c, s, cw, sw, rw, omega_w, dr, df)


@njit(cache=True)
def _force_moment_trig(vx, vy, psi_dot, c, s, cphi, sphi, omega_w, mu_s, mu_w, k):
    rw, dr, df, grav_x, n_p, n_c, eps = k[1], k[2], k[3], k[5], k[6], k[7], k[8]
    cw = c * cphi - s * sphi
    sw = s * cphi + c * sphi
    dv_p1, dv_p2, dv_c1, dv_c2 = _slips_trig(vx, vy, psi_dot, c, s, cw, sw, rw, omega_w, dr, df)
    f_p1 = _friction(dv_p1, n_p, mu_w, eps)
    f_p2 = -_friction(dv_p2, n_p, mu_s, eps)
    f_c1 = _friction(dv_c1, n_c, mu_w, eps)
    f_c2 = -_friction(dv_c2, n_c, mu_s, eps)
    fx = f_p1 * c - f_p2 * s + f_c1 * cw - f_c2 * sw + grav_x
    fy = f_p1 * s + f_p2 * c + f_c1 * sw + f_c2 * cw
    # r_p = -dr b1, r_c = +df b1; moment about the plane normal
    moment = -dr * f_p2 + df * (f_c1 * sphi + f_c2 * cphi)
    return fx, fy, moment


@njit(cache=True)
def _force_moment(vx, vy, psi, psi_dot, phi, omega_w, mu_s, mu_w, k):
    return _force_moment_trig(vx, vy, psi_dot, math.cos(psi), math.sin(psi),
                              math.cos(phi), math.sin(phi), omega_w, mu_s, mu_w, k)


@njit(cache=True)
def _deriv_trig(vx, vy, psi, psi_dot, cphi, sphi, omega_w, mu_s, mu_w, k):
    fx, fy, mz = _force_moment_trig(vx, vy, psi_dot, math.cos(psi), math.sin(psi),
                                    cphi, sphi, omega_w, mu_s, mu_w, k)
    return vx, vy, fx / k[0], fy / k[0], psi_dot, mz / k[4]


@njit(cache=True)
def _deriv(x, y, vx, vy, psi, psi_dot, phi, omega_w, mu_s, mu_w, k):
    return _deriv_trig(vx, vy, psi, psi_dot, math.cos(phi), math.sin(phi), omega_w, mu_s, mu_w, k)


@njit(cache=True)
def _rk4(s, phi, omega_w, mu_s, mu_w, k, h, n_sub):
    x0, x1, x2, x3, x4, x5 = s[0], s[1], s[2], s[3], s[4], s[5]
    cp, sp = math.cos(phi), math.sin(phi)
    hh = 0.5 * h
    w = h / 6.0
    for _ in range(n_sub):
        _, _, a2, a3, _, a5 = _deriv_trig(x2, x3, x4, x5, cp, sp, omega_w, mu_s, mu_w, k)
        b0, b1, b4 = x2 + hh * a2, x3 + hh * a3, x5 + hh * a5
        _, _, b2, b3, _, b5 = _deriv_trig(b0, b1, x4 + hh * x5, b4, cp, sp, omega_w, mu_s, mu_w, k)
        c0, c1, c4 = x2 + hh * b2, x3 + hh * b3, x5 + hh * b5
        _, _, c2, c3, _, c5 = _deriv_trig(c0, c1, x4 + hh * b4, c4, cp, sp, omega_w, mu_s, mu_w, k)
        d0, d1, d4 = x2 + h * c2, x3 + h * c3, x5 + h * c5
        _, _, d2, d3, _, d5 = _deriv_trig(d0, d1, x4 + h * c4, d4, cp, sp, omega_w, mu_s, mu_w, k)
        # position/yaw slopes at the four stages are the stage velocities
        x0 += w * (x2 + 2.0 * b0 + 2.0 * c0 + d0)
        x1 += w * (x3 + 2.0 * b1 + 2.0 * c1 + d1)
        x4 += w * (x5 + 2.0 * b4 + 2.0 * c4 + d4)
        x2 += w * (a2 + 2.0 * b2 + 2.0 * c2 + d2)
        x3 += w * (a3 + 2.0 * b3 + 2.0 * c3 + d3)
        x5 += w * (a5 + 2.0 * b5 + 2.0 * c5 + d5)
        if not (math.isfinite(x2) and math.isfinite(x3) and math.isfinite(x5)):
            break
    out = np.empty(6)
    out[0], out[1], out[2], out[3], out[5] = x0, x1, x2, x3, x5
    out[4] = math.pi - (math.pi - x4) % (2.0 * math.pi)
    return out


@njit(cache=True)
def _rk4_batch(states, actions, mus, k, h, n_sub):
    out = np.empty_like(states)
    for i in range(states.shape[0]):
        out[i] = _rk4(states[i], actions[i, 0], actions[i, 1], mus[i, 0], mus[i, 1], k, h, n_sub)
    return out


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def slip_velocities(state, action, params: VehicleParams) -> tuple[float, float, float, float]:
    """Contact slips ``(dV_p_b1, dV_p_b2, dV_c_w1, dV_c_w2)``.

    Rear slips are resolved in body axes, front slips in the steered wheel
    axes. Longitudinal slips are wheel surface speed minus ground speed.
    """
    s = np.asarray(state, dtype=float)
    return _slips(s[VX], s[VY], s[PSI], s[PSI_DOT], float(action[0]), float(action[1]),
                  params.wheel_radius, params.rear_offset, params.front_offset)


def friction_force(slip: float, normal: float, mu: float, eps: float = 0.05) -> float:
    """Coulomb-plus-viscous friction ``mu * (slip + normal * sgn(slip))``.

    The caller applies the direction convention: propulsive (longitudinal)
    forces take the result as is, lateral forces negate it.
    """
    return _friction(float(slip), float(normal), float(mu), float(eps))


def contact_forces(state, action, params: VehicleParams, terrain: TerrainParams) -> ContactForces:
    f_p, f_c = normal_forces(params, terrain)
    dv_p1, dv_p2, dv_c1, dv_c2 = slip_velocities(state, action, params)
    eps = terrain.sign_eps
    return ContactForces(
        f_p, f_c,
        friction_force(dv_p1, f_p, terrain.mu_w, eps),
        -friction_force(dv_p2, f_p, terrain.mu_s, eps),
        friction_force(dv_c1, f_c, terrain.mu_w, eps),
        -friction_force(dv_c2, f_c, terrain.mu_s, eps),
    )


def net_force_moment(state, action, params: VehicleParams, terrain: TerrainParams):
    """In-plane net force (2-vector) and yaw moment about the centre of mass."""
    s = np.asarray(state, dtype=float)
    fx, fy, mz = _force_moment(s[VX], s[VY], s[PSI], s[PSI_DOT], float(action[0]), float(action[1]),
                               terrain.mu_s, terrain.mu_w, _pack(params, terrain))
    return np.array([fx, fy]), mz


def state_derivative(state, action, params: VehicleParams, terrain: TerrainParams) -> np.ndarray:
    s = np.asarray(state, dtype=float)
    return np.array(_deriv(s[X], s[Y], s[VX], s[VY], s[PSI], s[PSI_DOT],
                           float(action[0]), float(action[1]),
                           terrain.mu_s, terrain.mu_w, _pack(params, terrain)))


def substeps(dt: float, dt_sim: float) -> tuple[int, float]:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    n = max(1, math.ceil(dt / dt_sim - 1e-9))
    return n, dt / n


def step(state, action, dt: float, params: VehicleParams, terrain: TerrainParams,
         dt_sim: float = DT_SIM) -> np.ndarray:
    """Advance one control period holding ``action`` constant (fixed-step RK4).

    Raises NonFinite if the result leaves the finite reals.
    """
    n, h = substeps(dt, dt_sim)
    out = _rk4(np.asarray(state, dtype=float), float(action[0]), float(action[1]),
               terrain.mu_s, terrain.mu_w, _pack(params, terrain), h, n)
    if not np.all(np.isfinite(out)):
        raise NonFinite("simulated state is not finite")
    return out


def step_batch(states, actions, mus, dt: float, params: VehicleParams, terrain: TerrainParams,
               dt_sim: float = DT_SIM) -> tuple[np.ndarray, np.ndarray]:
    """Advance many independent cars one control period.

    ``mus`` holds one ``(mu_s, mu_w)`` row per car and overrides the terrain
    friction. Returns ``(next_states, finite_mask)``; rows that blew up are
    flagged instead of raising.
    """
    states = np.ascontiguousarray(states, dtype=float).reshape(-1, STATE_SIZE)
    actions = np.ascontiguousarray(actions, dtype=float).reshape(-1, 2)
    mus = np.ascontiguousarray(mus, dtype=float).reshape(-1, 2)
    n, h = substeps(dt, dt_sim)
    out = _rk4_batch(states, actions, mus, _pack(params, terrain), h, n)
    return out, np.isfinite(out).all(axis=1)


def warmup() -> None:
    """Force compilation (or cache load) of the kernels before timing anything."""
    p, t = VehicleParams(), TerrainParams()
    step(make_state(), (0.0, 0.0), 1e-3, p, t, 1e-3)
    step_batch(np.zeros((1, STATE_SIZE)), np.zeros((1, 2)), np.ones((1, 2)), 1e-3, p, t, 1e-3)


def stable_substep(params: VehicleParams, terrain: TerrainParams, mu_max: float,
                   margin: float = 0.8) -> float:
    """Largest RK4 substep that keeps the linearised friction dynamics stable.

    The steepest point of the smoothed friction law is at zero slip, where
    its slope is ``mu * (1 + F_N / eps)``. RK4 is stable on the negative real
    axis up to ``h * lambda ~= 2.785``.
    """
    if terrain.sign_eps <= 0:
        return 0.0
    n_max = max(normal_forces(params, terrain))
    slope = 2.0 * mu_max * (1.0 + n_max / terrain.sign_eps)
    lam = slope * max(1.0 / params.mass,
                      (params.rear_offset ** 2 + params.front_offset ** 2) / (2.0 * params.yaw_inertia))
    return margin * 2.785 / lam
