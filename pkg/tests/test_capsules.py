import numpy as np
import pytest

from avatarsdf.body import BodyParams, forward_kinematics, generate_test_body
from avatarsdf.capsules import (BodySpec, albedo, map_to_canonical, rest_capsules,
                                rest_joints, segment_distances, sphere_trace,
                                union_sdf, union_sdf_argmin)
from avatarsdf.errors import ParameterError


class TestLayout:
    def test_sixteen_joints(self):
        assert rest_joints(BodySpec()).shape == (16, 3)

    def test_scale_scales_positions(self):
        base = rest_joints(BodySpec())
        tall = rest_joints(BodySpec(scale=1.1))
        assert np.allclose(tall, base * 1.1)

    def test_rejects_bad_spec(self):
        with pytest.raises(ParameterError):
            BodySpec(scale=0.0).validate()
        with pytest.raises(ParameterError):
            BodySpec(girth=-1.0).validate()


class TestSegmentDistance:
    def test_point_on_segment(self):
        d = segment_distances(np.array([[0.5, 0.0, 0.0]]),
                              np.array([[0.0, 0.0, 0.0]]),
                              np.array([[1.0, 0.0, 0.0]]))
        assert d[0, 0] == pytest.approx(0.0)

    def test_perpendicular_offset(self):
        d = segment_distances(np.array([[0.5, 2.0, 0.0]]),
                              np.array([[0.0, 0.0, 0.0]]),
                              np.array([[1.0, 0.0, 0.0]]))
        assert d[0, 0] == pytest.approx(2.0)

    def test_beyond_endpoint(self):
        d = segment_distances(np.array([[2.0, 0.0, 0.0]]),
                              np.array([[0.0, 0.0, 0.0]]),
                              np.array([[1.0, 0.0, 0.0]]))
        assert d[0, 0] == pytest.approx(1.0)


class TestUnionSdf:
    def test_girth_thickens_uniformly(self):
        spec = BodySpec()
        caps = rest_capsules(spec)
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 2, size=(100, 3))
        d0 = union_sdf(pts, caps, girth_beta=0.0, spec=spec)
        d1 = union_sdf(pts, caps, girth_beta=1.0, spec=spec)
        assert np.allclose(d0 - d1, spec.girth_gain)

    def test_zero_level_set_inside_mesh_band(self, body):
        # the template mesh is the marching-cubes surface of this field;
        # linear edge interpolation errs most across the union's creases
        spec = BodySpec()
        caps = rest_capsules(spec)
        d = union_sdf(body.vertices, caps, spec=spec)
        assert np.percentile(np.abs(d), 95) < 2e-3
        assert np.abs(d).max() < 1.5e-2

    def test_posed_by_identity_matches_rest(self):
        spec = BodySpec()
        caps = rest_capsules(spec)
        posed = caps.posed(np.tile(np.eye(3), (16, 1, 1)), np.zeros((16, 3)))
        pts = np.random.default_rng(1).uniform(-1, 2, size=(50, 3))
        assert np.array_equal(union_sdf(pts, caps), union_sdf(pts, posed))


class TestSphereTrace:
    def test_frontal_depth_hits_torso(self):
        # camera ray straight at the torso axis: depth = distance - surface offset
        spec = BodySpec()
        caps = rest_capsules(spec)
        origin = np.array([[0.0, 1.07, 3.0]])  # torso segment spans y in [1.0, 1.14]
        direction = np.array([[0.0, 0.0, -1.0]])
        hit, t, points, idx = sphere_trace(caps, origin, direction, spec=spec)
        assert hit[0]
        # analytic: capsule axis at z=0, radius 0.11 -> hit at z=0.11
        assert t[0] == pytest.approx(3.0 - 0.11, abs=1e-3)

    def test_miss_reports_no_hit(self):
        spec = BodySpec()
        caps = rest_capsules(spec)
        hit, _, _, _ = sphere_trace(caps, np.array([[5.0, 5.0, 5.0]]),
                                    np.array([[0.0, 1.0, 0.0]]), spec=spec)
        assert not hit[0]

    def test_deterministic(self):
        spec = BodySpec()
        caps = rest_capsules(spec)
        rng = np.random.default_rng(2)
        origins = np.tile(np.array([0.0, 1.0, 3.0]), (32, 1))
        dirs = rng.normal(size=(32, 3)) * 0.1 + np.array([0, 0, -1.0])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        a = sphere_trace(caps, origins, dirs, spec=spec)
        b = sphere_trace(caps, origins, dirs, spec=spec)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestCanonicalColoring:
    def test_albedo_in_unit_range(self):
        rng = np.random.default_rng(3)
        c = albedo(rng.uniform(-1, 2, size=(1000, 3)))
        assert c.min() >= 0.0 and c.max() <= 1.0

    def test_map_to_canonical_undoes_rigid_motion(self, body):
        spec = BodySpec()
        caps = rest_capsules(spec)
        rng = np.random.default_rng(4)
        params = BodyParams(rng.normal(0, 0.3, (16, 3)), np.zeros(1))
        tf = forward_kinematics(body.skeleton, params)
        posed = caps.posed(tf.rotations, tf.translations)
        # take rest points on capsule axes, pose them with their owner joints
        rest_pts = 0.5 * (caps.p0 + caps.p1)
        moved = np.einsum("cij,cj->ci", tf.rotations[caps.owner], rest_pts) \
            + tf.translations[caps.owner]
        back = map_to_canonical(moved, np.arange(len(rest_pts)), tf.rotations,
                                tf.translations, caps.owner)
        assert np.abs(back - rest_pts).max() < 1e-12

    def test_same_canonical_point_same_color_across_poses(self, body):
        spec = BodySpec()
        caps = rest_capsules(spec)
        rng = np.random.default_rng(5)
        params = BodyParams(rng.normal(0, 0.2, (16, 3)), np.zeros(1))
        tf = forward_kinematics(body.skeleton, params)
        rest_surface = caps.p0 + np.array([0, 0, 1.0]) * caps.radius[:, None]
        moved = np.einsum("cij,cj->ci", tf.rotations[caps.owner], rest_surface) \
            + tf.translations[caps.owner]
        back = map_to_canonical(moved, np.arange(len(caps.owner)), tf.rotations,
                                tf.translations, caps.owner)
        assert np.allclose(albedo(back), albedo(rest_surface), atol=1e-9)
