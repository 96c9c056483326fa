import numpy as np
import pytest

from avatarsdf.body import (BodyParams, Joint, Skeleton, apply_shape,
                            forward_kinematics, generate_test_body, lbs_pose,
                            load_body_asset, rodrigues, save_body_asset)
from avatarsdf.capsules import BodySpec
from avatarsdf.errors import (InvariantError, MalformedFileError, ParameterError,
                              VersionMismatchError)


def two_joint_chain():
    return Skeleton((
        Joint("root", -1, np.zeros(3)),
        Joint("child", 0, np.array([0.0, 1.0, 0.0])),
    ))


class TestRodrigues:
    def test_zero_angle_is_identity(self):
        assert np.allclose(rodrigues(np.zeros(3)), np.eye(3))

    def test_tiny_angle_series_stays_finite(self):
        r = rodrigues(np.array([1e-12, 0.0, 0.0]))
        assert np.all(np.isfinite(r))
        assert np.abs(r - np.eye(3)).max() < 1e-11

    def test_quarter_turn_about_z(self):
        r = rodrigues(np.array([0.0, 0.0, np.pi / 2]))
        assert np.allclose(r @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_orthonormal_for_random_axes(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(100, 3))
        r = rodrigues(v)
        eye = np.eye(3)
        assert np.abs(np.einsum("nij,nkj->nik", r, r) - eye).max() < 1e-12
        assert np.abs(np.linalg.det(r) - 1).max() < 1e-12


class TestForwardKinematics:
    def test_rest_pose_is_identity(self, body):
        tf = forward_kinematics(body.skeleton, body.rest_params())
        assert np.abs(tf.rotations - np.eye(3)).max() < 1e-15
        assert np.abs(tf.translations).max() < 1e-15

    def test_two_link_quarter_turn(self):
        # root rotated 90 degrees about z sends the child joint to (-1, 0, 0)
        sk = two_joint_chain()
        params = BodyParams(np.array([[0, 0, np.pi / 2], [0, 0, 0]]), np.zeros(0))
        tf = forward_kinematics(sk, params)
        child_rest = sk.rest_positions()[1]
        posed = tf.rotations[1] @ child_rest + tf.translations[1]
        assert np.allclose(posed, [-1.0, 0.0, 0.0], atol=1e-12)

    def test_pure_root_translation(self, body):
        params = BodyParams(np.zeros((body.n_joints, 3)), np.zeros(1),
                            np.array([0.3, 0.0, 0.0]))
        tf = forward_kinematics(body.skeleton, params)
        assert np.abs(tf.rotations - np.eye(3)).max() < 1e-15
        assert np.allclose(tf.translations, [0.3, 0.0, 0.0])

    def test_rejects_wrong_joint_count(self, body):
        params = BodyParams(np.zeros((3, 3)), np.zeros(1))
        with pytest.raises(ParameterError):
            forward_kinematics(body.skeleton, params)

    def test_rejects_non_finite_rotation(self):
        with pytest.raises(ParameterError):
            BodyParams(np.array([[np.nan, 0, 0], [0, 0, 0]]), np.zeros(0))


class TestApplyShape:
    def test_zero_beta_is_identity(self, body):
        assert np.array_equal(apply_shape(body, np.zeros(1)), body.vertices)

    def test_unit_coefficient_adds_direction(self, body):
        shaped = apply_shape(body, np.ones(1))
        assert np.allclose(shaped, body.vertices + body.shape_dirs[0])

    def test_linearity(self, body):
        one = apply_shape(body, np.array([1.0])) - body.vertices
        two = apply_shape(body, np.array([2.0])) - body.vertices
        assert np.allclose(two, 2.0 * one)

    def test_superposition_on_random_betas(self, body):
        rng = np.random.default_rng(1)
        for _ in range(10):
            b1, b2 = rng.normal(size=2)
            d1 = apply_shape(body, [b1]) - body.vertices
            d2 = apply_shape(body, [b2]) - body.vertices
            d12 = apply_shape(body, [b1 + b2]) - body.vertices
            assert np.allclose(d12, d1 + d2, atol=1e-12)

    def test_rejects_length_mismatch(self, body):
        with pytest.raises(ParameterError):
            apply_shape(body, np.zeros(3))


class TestLbsPose:
    def test_rest_pose_reproduces_template(self, body):
        posed = lbs_pose(body, body.rest_params())
        assert np.abs(posed.vertices - body.vertices).max() < 1e-12

    def test_one_hot_weight_follows_joint(self):
        sk = two_joint_chain()
        verts = np.array([[0.0, 1.5, 0.0], [0.1, 0.2, 0.0], [0.0, 1.4, 0.2]])
        weights = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        from avatarsdf.body import TemplateBody
        tb = TemplateBody(verts, np.array([[0, 1, 2]]), weights,
                          np.zeros((0, 3, 3)), sk)
        params = BodyParams(np.array([[0.0, 0, 0], [0.7, 0.2, -0.3]]), np.zeros(0))
        tf = forward_kinematics(sk, params)
        posed = lbs_pose(tb, params)
        expect = tf.rotations[1] @ verts[0] + tf.translations[1]
        assert np.allclose(posed.vertices[0], expect, atol=1e-12)

    def test_half_weights_blend_translations(self):
        # two translation-only joints moving (1,0,0) and (0,1,0)
        sk = Skeleton((
            Joint("root", -1, np.zeros(3)),
            Joint("a", 0, np.array([1.0, 0.0, 0.0])),
        ))
        from avatarsdf.body import TemplateBody, JointTransforms, blend_transforms
        verts = np.array([[0.3, 0.3, 0.0]])
        weights = np.array([[0.5, 0.5]])
        tb = TemplateBody(verts, np.zeros((0, 3), dtype=np.int64), weights,
                          np.zeros((0, 1, 3)), sk)
        tf = JointTransforms(np.stack([np.eye(3)] * 2),
                             np.array([[1.0, 0, 0], [0.0, 1.0, 0]]))
        rv, tv = blend_transforms(tb, tf)
        posed = np.einsum("vab,vb->va", rv, verts) + tv
        assert np.allclose(posed[0], verts[0] + [0.5, 0.5, 0.0])

    def test_commutes_with_rigid_root_motion(self, body):
        rng = np.random.default_rng(3)
        axis_angle = rng.normal(size=3)
        theta = np.zeros((body.n_joints, 3))
        theta[0] = axis_angle
        shift = rng.normal(size=3)
        posed = lbs_pose(body, BodyParams(theta, np.zeros(1), shift))
        r = rodrigues(axis_angle)
        root = body.skeleton.rest_positions()[0]
        rigid = (body.vertices - root) @ r.T + root + shift
        assert np.abs(posed.vertices - rigid).max() < 1e-10


class TestGenerateTestBody:
    def test_weight_rows_stochastic(self, body):
        w = body.skin_weights
        assert w.min() >= 0.0
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-6

    def test_sphere_topology(self, body):
        mesh = body.rest_mesh()
        assert mesh.is_watertight()
        assert mesh.euler_characteristic() == 2

    def test_higher_resolution_more_vertices(self, mini_body):
        finer = generate_test_body(BodySpec(resolution=24))
        assert finer.n_vertices > mini_body.n_vertices
        assert np.abs(finer.skin_weights.sum(axis=1) - 1.0).max() < 1e-6

    def test_rejects_degenerate_proportions(self):
        with pytest.raises(ParameterError):
            generate_test_body(BodySpec(scale=-1.0))
        with pytest.raises(ParameterError):
            generate_test_body(BodySpec(resolution=2))

    def test_sixteen_joints_one_shape(self, body):
        assert body.n_joints == 16
        assert body.n_shapes == 1


class TestAssetRoundTrip:
    def test_bitwise_round_trip(self, mini_body, tmp_path):
        path = tmp_path / "body.json"
        save_body_asset(mini_body, path)
        loaded = load_body_asset(path)
        assert np.array_equal(loaded.vertices, mini_body.vertices)
        assert np.array_equal(loaded.triangles, mini_body.triangles)
        assert np.array_equal(loaded.skin_weights, mini_body.skin_weights)
        assert np.array_equal(loaded.shape_dirs, mini_body.shape_dirs)
        assert [j.name for j in loaded.skeleton.joints] == \
            [j.name for j in mini_body.skeleton.joints]

    def test_rejects_bad_weight_rows(self, mini_body, tmp_path):
        import json
        path = tmp_path / "body.json"
        save_body_asset(mini_body, path)
        doc = json.loads(path.read_text())
        doc["skin_weights"][0] = [0.5 / mini_body.n_joints] * mini_body.n_joints
        path.write_text(json.dumps(doc))
        with pytest.raises(InvariantError):
            load_body_asset(path)

    def test_rejects_truncated_file(self, mini_body, tmp_path):
        path = tmp_path / "body.json"
        save_body_asset(mini_body, path)
        data = path.read_text()
        path.write_text(data[: len(data) // 2])
        with pytest.raises(MalformedFileError):
            load_body_asset(path)

    def test_rejects_version_mismatch(self, mini_body, tmp_path):
        import json
        path = tmp_path / "body.json"
        save_body_asset(mini_body, path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(VersionMismatchError):
            load_body_asset(path)

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"hello": 1}')
        with pytest.raises(MalformedFileError):
            load_body_asset(path)


class TestBodyParams:
    def test_beta_clamp(self):
        with pytest.raises(ParameterError):
            BodyParams(np.zeros((2, 3)), np.array([7.0]))
        BodyParams(np.zeros((2, 3)), np.array([7.0]), beta_clamp=10.0)

    def test_flat_layout(self):
        p = BodyParams(np.arange(6, dtype=float).reshape(2, 3), np.array([3.0]))
        assert np.allclose(p.flat(), [0, 1, 2, 3, 4, 5, 3])


class TestSkeleton:
    def test_rejects_unordered_parents(self):
        with pytest.raises(InvariantError):
            Skeleton((Joint("a", -1, np.zeros(3)), Joint("b", 5, np.zeros(3))))

    def test_rejects_two_roots(self):
        with pytest.raises(InvariantError):
            Skeleton((Joint("a", -1, np.zeros(3)), Joint("b", -1, np.zeros(3))))

    def test_rest_positions_chain(self):
        sk = two_joint_chain()
        assert np.allclose(sk.rest_positions(), [[0, 0, 0], [0, 1, 0]])
