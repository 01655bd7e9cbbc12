import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terralearn.errors import NonFinite
from terralearn.vehicle import (PSI, PSI_DOT, VX, VY, X, Y, Action, TerrainParams, VehicleParams,
                                contact_forces, friction_force, make_state, net_force_moment,
                                normal_forces, slip_velocities, stable_substep, state_derivative,
                                step, step_batch, wrap_angle)

FLAT = TerrainParams(slope=0.0)
SLOPE = TerrainParams()
FRICTIONLESS_SLOPE = TerrainParams(mu_s=0.0, mu_w=0.0)
P = VehicleParams()


def kinetic_energy(s, params=P):
    return 0.5 * params.mass * (s[VX] ** 2 + s[VY] ** 2) + 0.5 * params.yaw_inertia * s[PSI_DOT] ** 2


# -- parameters ----------------------------------------------------------------

def test_params_reject_nonpositive():
    with pytest.raises(ValueError):
        VehicleParams(mass=0.0)
    with pytest.raises(ValueError):
        TerrainParams(mu_s=-1.0)
    with pytest.raises(ValueError):
        TerrainParams(slope=math.pi / 2)


def test_action_clamps_to_limits():
    a = Action.clamped(1.0, -80.0, P)
    assert a.phi == pytest.approx(math.radians(30))
    assert a.omega_w == -50.0


@pytest.mark.parametrize("angle, wrapped", [(math.pi, math.pi), (-math.pi, math.pi),
                                            (3 * math.pi / 2, -math.pi / 2), (0.1, 0.1)])
def test_wrap_angle(angle, wrapped):
    assert wrap_angle(angle) == pytest.approx(wrapped)


# -- normal forces ---------------------------------------------------------------

@pytest.mark.parametrize("slope, d_r, d_f, expected", [
    (0.0, 0.16, 0.16, (4.905, 4.905)),
    (math.radians(30), 0.16, 0.16, (4.2479, 4.2479)),
    (0.0, 0.1, 0.3, (7.3575, 2.4525)),
])
def test_normal_forces_examples(slope, d_r, d_f, expected):
    params = VehicleParams(rear_offset=d_r, front_offset=d_f)
    f_p, f_c = normal_forces(params, TerrainParams(slope=slope))
    assert (f_p, f_c) == pytest.approx(expected, abs=1e-4)
    # lever-arm balance about the centre of mass
    assert f_p * d_r == pytest.approx(f_c * d_f, rel=1e-12)


@given(mass=st.floats(0.1, 100), slope=st.floats(0, 1.5), d_r=st.floats(0.01, 2), d_f=st.floats(0.01, 2))
def test_normal_force_sum_is_weight_component(mass, slope, d_r, d_f):
    params = VehicleParams(mass=mass, rear_offset=d_r, front_offset=d_f)
    terrain = TerrainParams(slope=slope)
    f_p, f_c = normal_forces(params, terrain)
    expected = mass * terrain.gravity * math.cos(slope)
    assert abs(f_p + f_c - expected) <= 1e-12 * expected
    assert f_p >= 0 and f_c >= 0


# -- slips and friction -------------------------------------------------------------

def test_slips_at_rest_without_command():
    assert slip_velocities(make_state(), (0.0, 0.0), P) == (0.0, 0.0, 0.0, 0.0)


def test_slips_at_rest_with_wheel_speed():
    assert slip_velocities(make_state(), (0.0, 2.0), P) == pytest.approx((0.2, 0.0, 0.2, 0.0))


def test_slips_with_front_wheel_turned_ninety_degrees():
    s = make_state(vx=0.2)
    assert slip_velocities(s, (math.pi / 2, 2.0), P) == pytest.approx((0.0, 0.0, 0.2, -0.2), abs=1e-15)


def test_slips_from_yaw_rate():
    # pure spin: rear contact moves along -b2, front along +b2
    s = make_state(psi_dot=1.0)
    _, dv_p2, _, dv_c2 = slip_velocities(s, (0.0, 0.0), P)
    assert dv_p2 == pytest.approx(-P.rear_offset)
    assert dv_c2 == pytest.approx(P.front_offset)


@pytest.mark.parametrize("slip, normal, mu, expected", [
    (0.0, 5.0, 1.0, 0.0),
    (1.0, 2.0, 1.0, 3.0),
    (-1.0, 2.0, 1.0, -3.0),
])
def test_friction_force_examples(slip, normal, mu, expected):
    assert friction_force(slip, normal, mu, eps=1e-3) == pytest.approx(expected, abs=1e-12)
    assert friction_force(slip, normal, mu, eps=0.0) == expected


@given(v=st.floats(-5, 5), normal=st.floats(0, 20), mu=st.floats(0, 20))
def test_friction_is_odd_and_monotone(v, normal, mu):
    f = friction_force(v, normal, mu)
    assert f == -friction_force(-v, normal, mu)
    assert abs(friction_force(abs(v) + 0.01, normal, mu)) >= abs(f)


def test_contact_force_directions():
    cf = contact_forces(make_state(), (0.0, 2.0), P, FLAT)
    assert cf.f_p_b1 > 0 and cf.f_c_w1 > 0  # propulsive
    cf = contact_forces(make_state(vy=0.1), (0.0, 0.0), P, FLAT)
    assert cf.f_p_b2 < 0 and cf.f_c_w2 < 0  # lateral slip resisted


# -- net force and derivative ------------------------------------------------------------

def test_net_force_at_rest_on_flat_ground():
    f, m = net_force_moment(make_state(), (0.0, 0.0), P, FLAT)
    assert np.all(f == 0) and m == 0


def test_net_force_frictionless_slope_is_gravity_only():
    f, m = net_force_moment(make_state(), (0.0, 0.0), P, FRICTIONLESS_SLOPE)
    assert f == pytest.approx([9.81 * 0.5, 0.0], abs=1e-12)
    assert m == 0


def test_net_force_driving_both_wheels():
    terrain = TerrainParams(mu_w=1.0, slope=0.0, sign_eps=1e-3)
    f, m = net_force_moment(make_state(), (0.0, 2.0), P, terrain)
    expected = 2 * 1.0 * (0.2 + 4.905 * math.tanh(0.2 / 1e-3))
    assert f == pytest.approx([expected, 0.0], abs=1e-12)
    assert expected == pytest.approx(10.21, abs=1e-9)
    assert m == pytest.approx(0.0, abs=1e-12)


def test_state_derivative_examples():
    assert np.all(state_derivative(make_state(), (0, 0), P, FLAT) == 0)
    d = state_derivative(make_state(), (0, 0), P, FRICTIONLESS_SLOPE)
    assert d == pytest.approx([0, 0, 4.905, 0, 0, 0], abs=1e-12)


@given(vx=st.floats(-1, 1), vy=st.floats(-1, 1), psi=st.floats(-3, 3), psi_dot=st.floats(-2, 2),
       phi=st.floats(-0.5, 0.5), omega=st.floats(-5, 5))
def test_derivative_mirror_symmetry(vx, vy, psi, psi_dot, phi, omega):
    s = make_state(0.3, 0.2, vx, vy, psi, psi_dot)
    mirrored = make_state(0.3, -0.2, vx, -vy, -psi, -psi_dot)
    d = state_derivative(s, (phi, omega), P, SLOPE)
    dm = state_derivative(mirrored, (-phi, omega), P, SLOPE)
    sign = np.array([1, -1, 1, -1, -1, -1])
    assert dm == pytest.approx(sign * d, abs=1e-9)


# -- integration ---------------------------------------------------------------------------

def test_step_rest_stays_at_rest_on_flat_ground():
    s = make_state(1.0, -2.0, psi=0.7)
    for _ in range(50):
        nxt = step(s, (0.0, 0.0), 0.2, P, FLAT)
        assert np.max(np.abs(nxt - s)) < 1e-9
        s = nxt


def test_frictionless_slide_matches_analytic():
    s = step(make_state(), (0.0, 0.0), 0.2, P, FRICTIONLESS_SLOPE)
    assert s[VX] == pytest.approx(0.981, abs=1e-6)
    assert s[X] == pytest.approx(0.0981, abs=1e-6)


def test_inertial_coasting():
    terrain = TerrainParams(mu_s=0.0, mu_w=0.0, slope=0.0)
    s = step(make_state(vx=1.0), (0.0, 0.0), 0.2, P, terrain)
    assert s == pytest.approx(make_state(0.2, vx=1.0), abs=1e-12)


def test_step_requires_positive_dt():
    with pytest.raises(ValueError):
        step(make_state(), (0, 0), 0.0, P, SLOPE)


def test_step_raises_nonfinite_on_blow_up():
    terrain = TerrainParams(mu_s=1e6, mu_w=1e6)
    with pytest.raises(NonFinite):
        step(make_state(vy=1.0), (0.0, 0.0), 2.0, P, terrain, dt_sim=0.05)


@settings(max_examples=30, deadline=None)
@given(vx=st.floats(-0.5, 0.5), vy=st.floats(-0.5, 0.5), psi=st.floats(-3, 3),
       psi_dot=st.floats(-3, 3), phi=st.floats(-0.5, 0.5))
def test_kinetic_energy_never_increases_without_actuation(vx, vy, psi, psi_dot, phi):
    s = make_state(0.0, 0.0, vx, vy, psi, psi_dot)
    e = kinetic_energy(s)
    for _ in range(5):
        s = step(s, (phi, 0.0), 0.2, P, FLAT)
        e_next = kinetic_energy(s)
        assert e_next <= e + 1e-15
        e = e_next


def test_batch_equals_single_step_bitwise():
    s = make_state(0.1, 0.2, 0.15, 0.01, 0.4, 0.1)
    a = (0.2, 1.7)
    single = step(s, a, 0.2, P, SLOPE)
    batch, ok = step_batch(np.array([s, s]), np.array([a, a]),
                           np.array([[SLOPE.mu_s, SLOPE.mu_w], [1.0, 1.0]]), 0.2, P, SLOPE)
    assert ok.all()
    assert np.array_equal(batch[0], single)
    assert not np.array_equal(batch[1], single)


def test_se2_equivariance_on_flat_ground():
    psi0 = 0.9
    rot = np.array([[math.cos(psi0), -math.sin(psi0)], [math.sin(psi0), math.cos(psi0)]])
    v = np.array([0.15, 0.03])
    a = make_state(vx=v[0], vy=v[1], psi_dot=0.2)
    vr = rot @ v
    b = make_state(vx=vr[0], vy=vr[1], psi=psi0, psi_dot=0.2)
    for k in range(10):
        action = (0.25 * math.sin(k), 1.5)
        a = step(a, action, 0.2, P, FLAT)
        b = step(b, action, 0.2, P, FLAT)
        assert rot @ a[[X, Y]] == pytest.approx(b[[X, Y]], abs=1e-6)
        assert rot @ a[[VX, VY]] == pytest.approx(b[[VX, VY]], abs=1e-6)
        assert wrap_angle(a[PSI] + psi0 - b[PSI]) == pytest.approx(0.0, abs=1e-6)
        assert a[PSI_DOT] == pytest.approx(b[PSI_DOT], abs=1e-6)


def rk4_order_ratio(dt_sim=2.5e-4):
    """Error ratio when halving the substep, against a dt_sim/8 reference."""
    s0 = make_state(0.0, 0.0, 0.3, -0.05, 0.4, 0.5)
    actions = [(0.3, 2.5), (-0.2, 1.0)]

    def simulate(h):
        s = s0
        for a in actions:
            s = step(s, a, 0.2, P, SLOPE, dt_sim=h)
        return s

    ref = simulate(dt_sim / 8)
    coarse = np.max(np.abs(simulate(dt_sim) - ref))
    fine = np.max(np.abs(simulate(dt_sim / 2) - ref))
    return coarse / fine


def test_rk4_convergence_order():
    assert rk4_order_ratio() >= 8.0


def test_default_substep_is_stable_across_search_bounds():
    assert stable_substep(P, SLOPE, mu_max=20.0) >= 2.5e-4
    s = make_state(vx=0.3, vy=0.1, psi_dot=1.0)
    out, ok = step_batch(np.array([s]), np.array([[0.3, 3.0]]), np.array([[20.0, 20.0]]), 0.2, P, SLOPE)
    assert ok.all() and np.all(np.abs(out[0, [VX, VY]]) < 1.0)
