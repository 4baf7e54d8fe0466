import math

import numpy as np
import pytest

from orientlab import quatpose as qp
from orientlab.errors import CameraInsideScene, DegenerateQuaternion, InvalidConfig


def random_canonical(rng):
    return qp.canonicalize(rng.standard_normal(4))


class TestCanonicalize:
    def test_sign_flip(self):
        q = qp.canonicalize((-1, 0, 0, 0))
        assert (q.w, q.x, q.y, q.z) == (1, 0, 0, 0)

    def test_normalization(self):
        q = qp.canonicalize((2, 0, 0, 0))
        assert (q.w, q.x, q.y, q.z) == (1, 0, 0, 0)

    def test_already_canonical(self):
        q = qp.canonicalize((0.5, 0.5, 0.5, 0.5))
        assert (q.w, q.x, q.y, q.z) == (0.5, 0.5, 0.5, 0.5)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateQuaternion):
            qp.canonicalize((0.0, 0.0, 0.0, 0.0))

    def test_nan_rejected(self):
        with pytest.raises(DegenerateQuaternion):
            qp.canonicalize((np.nan, 0, 0, 0))

    def test_w_zero_tiebreak(self):
        q = qp.canonicalize((0.0, -1.0, 0.0, 0.0))
        assert q.x == 1.0

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            q = random_canonical(rng)
            q2 = qp.canonicalize(q.as_array())
            assert (q2.w, q2.x, q2.y, q2.z) == (q.w, q.x, q.y, q.z)

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            q = random_canonical(rng)
            assert abs(q.dot(q) - 1.0) <= 1e-9
            assert q.w >= 0.0


class TestAngle:
    def test_identical(self):
        # arccos near 1 amplifies the last-ulp dot error to ~sqrt(eps)
        rng = np.random.default_rng(5)
        for _ in range(20):
            q = random_canonical(rng)
            assert qp.quat_angle(q, q) <= 5e-8

    def test_orthogonal(self):
        q1 = qp.canonicalize((1, 0, 0, 0))
        q2 = qp.canonicalize((0, 1, 0, 0))
        assert qp.quat_angle(q1, q2) == pytest.approx(math.pi / 2, abs=1e-15)

    def test_clamp_absorbs_roundoff(self):
        # dot marginally above 1 must clamp to angle 0, not NaN
        q = qp.Quaternion(0.6, 0.8, 0.0, 0.0)
        q2 = qp.Quaternion(0.6 + 5e-13, 0.8, 0.0, 0.0)
        assert qp.quat_angle(q, q2) >= 0.0


class TestSlerp:
    def test_endpoints(self):
        rng = np.random.default_rng(6)
        q1, q2 = random_canonical(rng), random_canonical(rng)
        s0 = qp.slerp(q1, q2, 0.0)
        s1 = qp.slerp(q1, q2, 1.0)
        np.testing.assert_allclose(s0.as_array(), q1.as_array(), atol=1e-15)
        np.testing.assert_allclose(s1.as_array(), q2.as_array(), atol=1e-15)

    def test_halfway_orthogonal(self):
        # independent evaluation of the interpolation formula at omega = pi/2
        q1 = qp.canonicalize((1, 0, 0, 0))
        q2 = qp.canonicalize((0, 1, 0, 0))
        omega = math.pi / 2
        expected = (math.sin(0.5 * omega) / math.sin(omega)) * q1.as_array() + (
            math.sin(0.5 * omega) / math.sin(omega)
        ) * q2.as_array()
        got = qp.slerp(q1, q2, 0.5).as_array()
        np.testing.assert_allclose(got, expected, atol=1e-15)
        assert got[0] == pytest.approx(math.sqrt(2) / 2, abs=1e-15)

    def test_unit_norm_along_path(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            q1, q2 = random_canonical(rng), random_canonical(rng)
            t = rng.random()
            s = qp.slerp(q1, q2, t)
            assert abs(s.norm() - 1.0) <= 1e-9

    def test_constant_angular_velocity(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            q1, q2 = random_canonical(rng), random_canonical(rng)
            omega = qp.quat_angle(q1, q2)
            t = rng.random()
            assert abs(qp.quat_angle(q1, qp.slerp(q1, q2, t)) - t * omega) <= 1e-7

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            q1, q2 = random_canonical(rng), random_canonical(rng)
            t = rng.random()
            a = qp.slerp(q1, q2, t).as_array()
            b = qp.slerp(q2, q1, 1.0 - t).as_array()
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_degenerate_near_parallel(self):
        q1 = qp.canonicalize((1, 1e-9, 0, 0))
        q2 = qp.canonicalize((1, 0, 1e-9, 0))
        s = qp.slerp(q1, q2, 0.3)
        assert abs(s.norm() - 1.0) <= 1e-12


class TestSineEncode:
    def test_identity_first_entry(self):
        enc = qp.sine_encode(qp.Quaternion(1, 0, 0, 0))
        assert enc[0] == pytest.approx(math.sin(1.0), abs=1e-12)

    def test_zero_components_vanish(self):
        enc = qp.sine_encode(qp.Quaternion(1, 0, 0, 0))
        assert np.all(enc[7:] == 0.0)

    def test_default_length(self):
        assert qp.sine_encode(qp.Quaternion(1, 0, 0, 0)).shape == (28,)

    def test_entries_in_unit_interval(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            enc = qp.sine_encode(random_canonical(rng))
            assert np.all(enc >= -1.0) and np.all(enc <= 1.0)

    def test_zero_frequencies_rejected(self):
        with pytest.raises(InvalidConfig):
            qp.sine_encode(qp.Quaternion(1, 0, 0, 0), num_frequencies=0)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(11)
        quats = [random_canonical(rng) for _ in range(5)]
        batch = qp.sine_encode_batch(quats)
        for i, q in enumerate(quats):
            np.testing.assert_array_equal(batch[i], qp.sine_encode(q))

    def test_injective_on_coarse_grid(self):
        # 10-degree sanity grid; the exhaustive 1-degree sweep runs in the
        # acceptance suite
        encs = []
        for az_deg in range(0, 360, 10):
            for el_deg in range(0, 90, 10):
                pose = qp.pose_from_spherical(math.radians(az_deg), math.radians(el_deg), 2.0)
                encs.append(qp.sine_encode(pose.orientation))
        encs = np.stack(encs)
        d2 = np.sum((encs[:, None, :] - encs[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        assert math.sqrt(d2.min()) > 1e-6


class TestPoses:
    def test_axis_placements(self):
        p = qp.pose_from_spherical(0.0, 0.0, 2.0)
        np.testing.assert_allclose(p.position, [2, 0, 0], atol=1e-15)
        p = qp.pose_from_spherical(math.pi / 2, 0.0, 2.0)
        np.testing.assert_allclose(p.position, [0, 2, 0], atol=1e-15)

    def test_orientation_unit(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            pose = qp.pose_from_spherical(rng.uniform(0, 2 * math.pi), rng.uniform(-1.2, 1.2), 1.5)
            assert abs(pose.orientation.norm() - 1.0) <= 1e-9

    def test_orientation_consistent_with_lookat(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            pose = qp.pose_from_spherical(rng.uniform(0, 2 * math.pi), rng.uniform(-1.0, 1.0), 2.0)
            rot = qp.quat_to_matrix(pose.orientation)
            forward_world = rot @ np.array([0.0, 0.0, -1.0])
            expected = (pose.look_at - pose.position) / np.linalg.norm(pose.look_at - pose.position)
            np.testing.assert_allclose(forward_world, expected, atol=1e-6)

    def test_camera_inside_scene_rejected(self):
        with pytest.raises(CameraInsideScene):
            qp.pose_from_spherical(0.0, 0.0, 0.9)

    def test_position_outside_unit_sphere(self):
        pose = qp.pose_from_spherical(1.0, 0.5, 1.2)
        assert np.linalg.norm(pose.position) > 1.0

    def test_hemisphere_four_views(self):
        poses = qp.uniform_hemisphere_poses(4, math.radians(20), 2.0)
        azimuths = [math.degrees(qp.pose_azimuth(p)) for p in poses]
        np.testing.assert_allclose(azimuths, [0, 90, 180, 270], atol=1e-9)

    def test_hemisphere_single(self):
        poses = qp.uniform_hemisphere_poses(1, 0.0, 2.0)
        assert len(poses) == 1
        assert qp.pose_azimuth(poses[0]) == 0.0

    def test_hemisphere_uniform_gap(self):
        poses = qp.uniform_hemisphere_poses(7, 0.3, 2.0)
        az = [qp.pose_azimuth(p) for p in poses]
        gaps = np.diff(az)
        np.testing.assert_allclose(gaps, 2 * math.pi / 7, atol=1e-12)

    def test_hemisphere_zero_k_rejected(self):
        with pytest.raises(InvalidConfig):
            qp.uniform_hemisphere_poses(0, 0.3, 2.0)


class TestPoseJson:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            pose = qp.pose_from_spherical(rng.uniform(0, 2 * math.pi), rng.uniform(-1.0, 1.0), 2.0)
            rt = qp.pose_from_json(qp.pose_to_json(pose))
            assert rt.orientation.as_array().tobytes() == pose.orientation.as_array().tobytes()
            assert rt.position.tobytes() == pose.position.tobytes()

    def test_schema_shape(self):
        import json

        pose = qp.pose_from_spherical(0.3, 0.2, 2.0)
        obj = json.loads(qp.pose_to_json(pose))
        assert set(obj) == {"quat", "position"}
        assert len(obj["quat"]) == 4 and len(obj["position"]) == 3
