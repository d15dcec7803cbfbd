import math

import numpy as np
import pytest

from spinenav.errors import JointLimitError
from spinenav.kinematics import HOME_EE_POSITION, ArmModel, JogResult, jog
from spinenav.transforms import Frame, RigidTransform


@pytest.fixture(scope="module")
def model():
    return ArmModel()


def test_home_pose_matches_table(model):
    home = model.fk(np.zeros(7))
    assert np.allclose(home.t, HOME_EE_POSITION, atol=1e-9)
    assert home.rotation_angle_rad() <= 1e-12


def test_joint_one_rotates_about_base_axis(model):
    home = model.fk(np.zeros(7))
    for theta in (-1.2, 0.4, 2.0):
        q = np.zeros(7)
        q[0] = theta
        moved = model.fk(q).t
        expected = RigidTransform.from_axis_angle((0, 0, 1), theta).apply(home.t)
        assert np.allclose(moved, expected, atol=1e-9)


def test_state_end_effector_equals_fk(model):
    rng = np.random.default_rng(0)
    q = rng.uniform(-1.2, 1.2, 7)
    state = model.state(q, timestamp=5)
    rot, trans = (
        model.fk(q).rotation_angle_rad() - state.end_effector.rotation_angle_rad(),
        np.linalg.norm(model.fk(q).t - state.end_effector.t),
    )
    assert abs(rot) <= 1e-9 and trans <= 1e-9
    assert state.timestamp == 5


def test_joint_limits_enforced(model):
    q = np.zeros(7)
    q[1] = math.radians(170.0)  # joint 2 limit is 120 deg
    with pytest.raises(JointLimitError):
        model.fk(q)


def test_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    eps = 1e-6
    for _ in range(5):
        q = rng.uniform(-1.2, 1.2, 7)
        jac = model.jacobian(q)
        fd = np.zeros((6, 7))
        for i in range(7):
            qp = q.copy()
            qm = q.copy()
            qp[i] += eps
            qm[i] -= eps
            fp, fm = model.fk(qp), model.fk(qm)
            fd[:3, i] = (fp.t - fm.t) / (2 * eps)
            rel = fp @ fm.inverse()
            vec = np.array(rel.q[1:])
            norm = np.linalg.norm(vec)
            if norm > 0:
                angle = 2 * math.atan2(norm, abs(float(rel.q[0])))
                sign = 1.0 if rel.q[0] >= 0 else -1.0
                fd[3:, i] = sign * angle * vec / norm / (2 * eps)
        assert np.abs(jac - fd).max() <= 1e-5


# ---------------------------------------------------------------------------
# jog
# ---------------------------------------------------------------------------

def start_state(model):
    return model.state(np.array([0.3, 0.5, -0.2, 0.9, 0.1, 0.6, 0.0]))


def test_jog_zero_delta_is_identity(model):
    state = start_state(model)
    out = jog(model, state, "tx", 0.0)
    assert out.state is state
    assert not out.rejected


def test_jog_round_trip(model):
    state = start_state(model)
    # tolerance frozen from measurement: observed residual ~9e-4 mm with
    # the default IK settings
    out = jog(model, jog(model, state, "tx", 1.0).state, "tx", -1.0)
    assert not out.rejected
    assert np.linalg.norm(out.state.end_effector.t - state.end_effector.t) <= 1e-3


def test_jog_translation_direction(model):
    state = start_state(model)
    out = jog(model, state, "ty", 3.0)
    assert not out.rejected
    delta = out.state.end_effector.t - state.end_effector.t
    assert abs(delta[1] - 3.0) <= 1e-3
    assert abs(delta[0]) <= 1e-3 and abs(delta[2]) <= 1e-3


def test_jog_rotation_pivots_at_flange(model):
    state = start_state(model)
    out = jog(model, state, "rz", 1.5)
    assert not out.rejected
    assert np.linalg.norm(out.state.end_effector.t - state.end_effector.t) <= 1e-3
    rel = out.state.end_effector @ state.end_effector.inverse()
    assert abs(math.degrees(rel.rotation_angle_rad()) - 1.5) <= 0.01


def test_jog_over_cap_rejected(model):
    state = start_state(model)
    out = jog(model, state, "tx", 10.0)
    assert out.rejected and out.reason == "delta_cap"
    assert out.state is state
    out = jog(model, state, "rx", 5.0)
    assert out.rejected and out.reason == "delta_cap"


def test_jog_unreachable_rejected(model):
    # flange near full extension: an outward jog cannot be tracked
    q = np.zeros(7)
    q[1] = 0.02
    state = model.state(q)
    for _ in range(3):
        out = jog(model, state, "tz", 5.0)
        if out.rejected:
            break
        state = out.state
    assert out.rejected
    assert out.reason == "ik_residual"
    assert out.state is state


def test_surface_mesh_covers_reach(model):
    mesh = model.surface_mesh(np.zeros(7))
    assert len(mesh) > 100
    lo, hi = mesh.bounds()
    assert hi[2] > 1300  # reaches past the flange at home
    assert mesh.frame is Frame.BASE
