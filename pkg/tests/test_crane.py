import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cranerl.crane import (ActuatorSpec, CraneGeometry, CraneModel, CraneState, JointRangeError,
                           SimulationFault, clamp_target_rate, default_actuators,
                           pendulum_offset, work_increment)

CRANE = CraneModel()


# -- independent oracles -------------------------------------------------------------

def hom(R=np.eye(3), p=(0.0, 0.0, 0.0)):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def tip_by_transforms(q, g=CraneGeometry()):
    """Chain of 4x4 transforms; elevation is a rotation by -angle about y."""
    T = (hom(rot_z(q[0])) @ hom(p=(0, 0, g.pillar_height)) @ hom(rot_y(-q[1]))
         @ hom(p=(g.L2, 0, 0)) @ hom(rot_y(-q[2])) @ hom(p=(g.L3 + q[3], 0, 0)))
    return T[:3, 3], T[:3, :3]


def random_q(rng, crane=CRANE):
    return rng.uniform(crane.range_min, crane.range_max)


# -- kinematics ------------------------------------------------------------------

def test_forward_kinematics_matches_transform_chain_on_1000_configurations():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        q = random_q(rng)
        ref_tip, ref_R = tip_by_transforms(q)
        fk = CRANE.forward_kinematics(q)
        worst = max(worst, np.max(np.abs(fk.tip - ref_tip)),
                    np.max(np.abs(CRANE.tip_position(q) - ref_tip)),
                    np.max(np.abs(fk.R_outer - ref_R)))
    assert worst <= 1e-9


def test_zero_pose_tip_is_straight_ahead_at_pillar_height():
    tip = CRANE.tip_position([0, 0, 0, 0, 0, 0.5])
    np.testing.assert_allclose(tip, [5.0, 0.0, 1.5], atol=1e-12)


def test_full_extension_reaches_seven_metres():
    tip = CRANE.tip_position([0.3, 0, 0, 2.0, 0, 0.5])
    assert math.hypot(tip[0], tip[1]) == pytest.approx(7.0, abs=1e-12)


def test_out_of_range_joint_is_rejected():
    with pytest.raises(JointRangeError):
        CRANE.forward_kinematics([0, 2.0, 0, 0, 0, 0.5])


def test_grapple_hangs_below_tip():
    s = CraneState(q=np.array([0.4, 0.5, -0.8, 0.5, 0.2, 0.6]))
    pose = CRANE.grapple_pose(s)
    tip = CRANE.tip_position(s.q)
    np.testing.assert_allclose(pose.center, tip - [0, 0, 0.8], atol=1e-12)
    assert pose.yaw == pytest.approx(0.6)


@given(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2))
def test_pendulum_offset_has_pendulum_length(a, b):
    assert np.linalg.norm(pendulum_offset((a, b), 0.8)) == pytest.approx(0.8, rel=1e-12)


# -- gravity -----------------------------------------------------------------------

def fd_gravity(crane, q, pend, gvec, pm=0.0, po=(0, 0, 0), h=1e-6):
    out = np.zeros(6)
    for i in range(6):
        qp, qm = q.copy(), q.copy()
        qp[i] += h
        qm[i] -= h
        out[i] = -(crane.potential_energy(qp, pend, gvec, pm, po)
                   - crane.potential_energy(qm, pend, gvec, pm, po)) / (2 * h)
    return out


@pytest.mark.parametrize("payload", [0.0, 50.0])
def test_gravity_forces_match_finite_difference_of_potential(payload):
    rng = np.random.default_rng(5)
    lo = CRANE.range_min + 1e-3
    hi = CRANE.range_max - 1e-3
    for _ in range(200):
        q = rng.uniform(lo, hi)
        pend = rng.uniform(-0.3, 0.3, 2)
        g = rng.normal(size=3)
        g = 9.81 * g / np.linalg.norm(g)
        po = rng.uniform(-0.2, 0.2, 3)
        G = CRANE.gravity_forces(q, pend, g, payload, po)
        ref = fd_gravity(CRANE, q, pend, g, payload, po)
        scale = np.maximum(np.abs(ref), 1.0)
        assert np.all(np.abs(G - ref) / scale <= 1e-4)


def test_gravity_does_not_load_rotator_or_claws():
    G = CRANE.gravity_forces([0.3, 0.5, -0.5, 1.0, 0.7, 0.6])
    assert G[4] == 0.0 and G[5] == 0.0


def test_mass_scale_scales_gravity_linearly():
    q = [0.3, 0.5, -0.5, 1.0, 0.7, 0.6]
    heavy = CRANE.with_mass_scale(1.05)
    np.testing.assert_allclose(heavy.gravity_forces(q), 1.05 * CRANE.gravity_forces(q), rtol=1e-12)
    np.testing.assert_allclose(heavy.inertia, 1.05 * CRANE.inertia, rtol=1e-12)


# -- servo dynamics ------------------------------------------------------------------

def test_zero_target_holds_pose_against_gravity():
    q0 = np.array([1.0, 0.6, -1.0, 0.5, 0.0, 0.5])
    s = CraneState(q=q0.copy())
    for _ in range(500):
        s = CRANE.step(s, np.zeros(6))
    np.testing.assert_allclose(s.q, q0, atol=1e-9)
    np.testing.assert_allclose(s.tau[:4], -CRANE.gravity_forces(q0)[:4], rtol=1e-9)


def test_velocity_servo_reaches_target_speed_with_capped_acceleration():
    s = CraneState(q=np.array([1.0, 0.6, -1.0, 0.5, 0.0, 0.5]))
    target = np.array([0.3, 0.0, 0.0, 0.0, 0.0, 0.0])
    speeds = []
    for _ in range(100):
        s = CRANE.step(s, target)
        speeds.append(s.qdot[0])
        assert abs(s.tau[0]) <= CRANE.effort_max[0] + 1e-9
    # inertia 1.5e4 and 60 kNm: at most 0.08 rad/s gained per 20 ms step
    assert np.all(np.diff(np.r_[0.0, speeds]) <= 60e3 / 1.5e4 * 0.02 + 1e-12)
    assert speeds[-1] == pytest.approx(0.3, abs=1e-12)


def test_speed_never_exceeds_v_max():
    s = CraneState(q=np.array([1.0, 0.6, -1.0, 0.5, 0.0, 0.5]))
    for _ in range(50):
        s = CRANE.step(s, 5.0 * CRANE.v_max)
        assert np.all(np.abs(s.qdot) <= CRANE.v_max + 1e-12)


def test_range_stop_is_inelastic():
    s = CraneState(q=np.array([3.89, 0.6, -1.0, 0.5, 0.0, 0.5]))
    for _ in range(20):
        s = CRANE.step(s, np.array([0.6, 0, 0, 0, 0, 0]))
    assert s.q[0] == CRANE.range_max[0]
    assert s.qdot[0] == 0.0
    assert s.tau[0] == CRANE.effort_max[0]


def test_non_finite_input_raises_simulation_fault():
    s = CraneState(q=np.array([1.0, 0.6, -1.0, 0.5, 0.0, 0.5]))
    with pytest.raises(SimulationFault):
        CRANE.step(s, np.array([np.nan, 0, 0, 0, 0, 0]))


def test_pendulum_small_oscillation_period_within_two_percent():
    crane = CraneModel(pendulum_damping=0.0)
    s = CraneState(q=np.array([1.0, 0.6, -1.0, 0.5, 0.0, 0.5]), pend=np.array([0.05, 0.0]))
    dt = 0.002
    alphas = []
    for _ in range(20000):
        s = crane.step(s, np.zeros(6), dt=dt)
        alphas.append(s.pend[0])
    a = np.array(alphas)
    ups = np.flatnonzero((a[:-1] < 0) & (a[1:] >= 0))
    period = np.mean(np.diff(ups)) * dt
    assert period == pytest.approx(2 * math.pi * math.sqrt(0.8 / 9.81), rel=0.02)


# -- rate limit and energy --------------------------------------------------------------

@settings(max_examples=200)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6),
       st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_target_rate_clamp_moves_at_most_v_max_over_30(prev, cmd):
    out = clamp_target_rate(prev, cmd, CRANE.v_max, CRANE.rate_fraction)
    assert np.all(np.abs(out - np.array(prev)) <= CRANE.v_max / 30 + 1e-12)
    # never overshoots the command
    assert np.all((out - np.array(prev)) * (np.array(cmd) - out) >= -1e-12)


def test_rate_clamp_example_one_step():
    out = clamp_target_rate([0.0], [1.0], [0.6], 1.0 / 30.0)
    assert out[0] == pytest.approx(0.02)


@given(st.lists(st.floats(-1e5, 1e5), min_size=6, max_size=6),
       st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_work_increment_is_nonnegative_and_ignores_q5_q6(tau, qdot):
    w = work_increment(tau, qdot, 0.02)
    assert w >= 0.0
    tau2 = list(tau)
    tau2[4] = tau2[5] = 1e9
    assert work_increment(tau2, qdot, 0.02) == w


def test_work_increment_example():
    # 1000 Nm at 0.5 rad/s for 20 ms on q2 plus braking on q1
    assert work_increment([-500, 1000, 0, 0, 0, 0], [0.5, 0.5, 0, 0, 0, 0], 0.02) == pytest.approx(10.0)


# -- specs ------------------------------------------------------------------------

def test_actuator_spec_validation():
    with pytest.raises(ValueError):
        ActuatorSpec("q", "revolute", 1.0, 0.0, 1, 1, 1)
    with pytest.raises(ValueError):
        ActuatorSpec("q", "helical", 0.0, 1.0, 1, 1, 1)
    with pytest.raises(ValueError):
        ActuatorSpec("q", "revolute", 0.0, 1.0, 0.0, 1, 1)


def test_default_actuators_rate_fraction():
    assert all(a.rate_fraction == pytest.approx(1 / 30) for a in default_actuators())
