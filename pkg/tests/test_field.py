import numpy as np
import pytest

from avatarsdf.errors import MalformedFileError, ParameterError, VersionMismatchError
from avatarsdf.field import (Mlp, Scene, TriPlane, field_eval, field_gradient,
                             load_checkpoint, make_scene, positional_encode,
                             sample_triplane, save_checkpoint,
                             triplane_backward_position, triplane_backward_values,
                             triplane_jacobian)


class TestPositionalEncode:
    def test_zero_input(self):
        enc = positional_encode(np.zeros((1, 3)), 4)
        assert enc.shape == (1, 24)
        sin_part = enc.reshape(4, 2, 3)[:, 0]
        cos_part = enc.reshape(4, 2, 3)[:, 1]
        assert np.all(sin_part == 0.0)
        assert np.all(cos_part == 1.0)

    def test_zero_freqs_returns_raw(self):
        x = np.array([[0.3, -0.2, 0.9]])
        assert np.array_equal(positional_encode(x, 0), x)

    def test_exact_trig_at_one(self):
        enc = positional_encode(np.array([[1.0, 0.0, 0.0]]), 1)
        # layout: sin(pi x), cos(pi x) per axis
        assert abs(enc[0, 0] - np.sin(np.pi)) < 1e-15
        assert abs(enc[0, 3] - np.cos(np.pi)) < 1e-15
        assert enc[0, 3] == pytest.approx(-1.0)

    def test_include_input_prepends(self):
        x = np.array([[0.5, 0.25, -0.75]])
        enc = positional_encode(x, 2, include_input=True)
        assert enc.shape == (1, 15)
        assert np.array_equal(enc[:, :3], x)

    def test_rejects_negative_freqs(self):
        with pytest.raises(ParameterError):
            positional_encode(np.zeros((1, 3)), -1)


class TestMlpGradients:
    def make_net(self, seed=0, widths=(5, 8, 8, 2), hidden="softplus"):
        return Mlp.create(list(widths), hidden=hidden,
                          rng=np.random.default_rng(seed))

    def test_linear_layer_formulas(self):
        net = Mlp([np.array([[1.0, 2.0], [3.0, 4.0]])], [np.zeros(2)], ["linear"])
        x = np.array([[1.0, -1.0]])
        y, cache = net.forward(x)
        g = np.array([[0.5, 2.0]])
        dws, dbs, dx = net.backward(cache, g)
        assert np.allclose(dx, g @ net.weights[0])        # W^T g (row form)
        assert np.allclose(dws[0], g.T @ x)               # g x^T
        assert np.allclose(dbs[0], g[0])

    def test_zero_upstream_zero_grads(self):
        net = self.make_net()
        x = np.random.default_rng(1).normal(size=(4, 5))
        _, cache = net.forward(x)
        dws, dbs, dx = net.backward(cache, np.zeros((4, 2)))
        assert all(np.all(d == 0) for d in dws)
        assert np.all(dx == 0)

    @pytest.mark.parametrize("hidden", ["softplus", "tanh", "sigmoid"])
    def test_param_grads_match_fd(self, hidden):
        net = self.make_net(seed=2, hidden=hidden)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 5))
        gy = rng.normal(size=(6, 2))

        def loss():
            y, _ = net.forward(x)
            return float((y * gy).sum())

        y, cache = net.forward(x)
        dws, dbs, dx = net.backward(cache, gy)
        h = 1e-5
        worst = 0.0
        for l, w in enumerate(net.weights):
            for idx in ((0, 0), (w.shape[0] - 1, w.shape[1] - 1)):
                old = w[idx]
                w[idx] = old + h
                lp = loss()
                w[idx] = old - h
                lm = loss()
                w[idx] = old
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(dws[l][idx]), 1e-8)
                worst = max(worst, abs(fd - dws[l][idx]) / denom)
        assert worst < 1e-4

    def test_input_grads_match_fd(self):
        net = self.make_net(seed=4)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 5))
        gy = rng.normal(size=(3, 2))
        _, cache = net.forward(x)
        _, _, dx = net.backward(cache, gy)
        h = 1e-5
        fd = np.zeros_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                old = x[i, j]
                x[i, j] = old + h
                lp = float((net.forward(x)[0] * gy).sum())
                x[i, j] = old - h
                lm = float((net.forward(x)[0] * gy).sum())
                x[i, j] = old
                fd[i, j] = (lp - lm) / (2 * h)
        assert np.abs(fd - dx).max() < 1e-6

    def test_double_backward_matches_fd(self):
        net = self.make_net(seed=6)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 5))
        seed_vec = rng.normal(size=(5, 2))
        ghat = rng.normal(size=(5, 5))

        def gloss():
            _, cache = net.forward(x)
            g, _ = net.input_gradient(cache, seed_vec)
            return float((g * ghat).sum())

        _, cache = net.forward(x)
        _, gcache = net.input_gradient(cache, seed_vec)
        dws, dbs, dx = net.double_backward(cache, gcache, ghat)
        h = 1e-5
        worst = 0.0
        for l, w in enumerate(net.weights):
            for idx in ((0, 0), (w.shape[0] // 2, w.shape[1] // 2),
                        (w.shape[0] - 1, w.shape[1] - 1)):
                old = w[idx]
                w[idx] = old + h
                lp = gloss()
                w[idx] = old - h
                lm = gloss()
                w[idx] = old
                fd = (lp - lm) / (2 * h)
                worst = max(worst, abs(fd - dws[l][idx]) / max(abs(fd), 1e-8))
        for l, b in enumerate(net.biases):
            for bi in (0, b.shape[0] - 1):
                old = b[bi]
                b[bi] = old + h
                lp = gloss()
                b[bi] = old - h
                lm = gloss()
                b[bi] = old
                fd = (lp - lm) / (2 * h)
                worst = max(worst, abs(fd - dbs[l][bi]) / max(abs(fd), 1e-8))
        assert worst < 1e-5

    def test_purity(self):
        net = self.make_net()
        x = np.random.default_rng(8).normal(size=(4, 5))
        y1, _ = net.forward(x)
        y2, _ = net.forward(x)
        assert np.array_equal(y1, y2)

    def test_rejects_width_mismatch(self):
        net = self.make_net()
        with pytest.raises(ParameterError):
            net.forward(np.zeros((2, 7)))


class TestTriPlane:
    def make(self, seed=0, r=6, c=4):
        rng = np.random.default_rng(seed)
        return TriPlane([rng.normal(size=(r, r, c)) for _ in range(3)],
                        np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))

    def test_node_exactness(self):
        tp = self.make()
        r = tp.resolution
        # world position of node (i, j, k)
        i, j, k = 2, 4, 1
        x = tp.box_min + np.array([i, j, k]) / (r - 1) * (tp.box_max - tp.box_min)
        feats, _ = sample_triplane(tp, x[None])
        expect = tp.planes[0][i, j] + tp.planes[1][i, k] + tp.planes[2][j, k]
        assert np.allclose(feats[0], expect, atol=1e-12)

    def test_cell_center_averages(self):
        tp = TriPlane([np.zeros((4, 4, 2)) for _ in range(3)],
                      np.zeros(3), np.ones(3))
        tp.planes[0][1, 1] = [1.0, 0.0]
        tp.planes[0][2, 1] = [2.0, 0.0]
        tp.planes[0][1, 2] = [3.0, 0.0]
        tp.planes[0][2, 2] = [4.0, 0.0]
        x = np.array([[1.5 / 3, 1.5 / 3, 1.5 / 3]])
        feats, _ = sample_triplane(tp, x)
        assert feats[0, 0] == pytest.approx(2.5)

    def test_out_of_box_clamps(self):
        tp = self.make(seed=1)
        far = np.array([[9.0, -4.0, 2.0]])
        edge = np.array([[1.0, -1.0, 1.0]])
        f1, _ = sample_triplane(tp, far)
        f2, _ = sample_triplane(tp, edge)
        assert np.allclose(f1, f2)

    def test_continuity_across_cell_boundary(self):
        tp = self.make(seed=2)
        r = tp.resolution
        boundary = tp.box_min[0] + 2 / (r - 1) * (tp.box_max[0] - tp.box_min[0])
        left = np.array([[boundary - 1e-9, 0.1, 0.2]])
        right = np.array([[boundary + 1e-9, 0.1, 0.2]])
        fl, _ = sample_triplane(tp, left)
        fr, _ = sample_triplane(tp, right)
        assert np.abs(fl - fr).max() < 1e-6

    def test_sum_aggregation_plane_ablation(self):
        tp = self.make(seed=3)
        x = np.random.default_rng(4).uniform(-0.9, 0.9, size=(10, 3))
        full, _ = sample_triplane(tp, x)
        saved = tp.planes[1].copy()
        tp.planes[1][:] = 0.0
        partial, _ = sample_triplane(tp, x)
        tp.planes[1][:] = saved
        only, _ = sample_triplane(
            TriPlane([np.zeros_like(tp.planes[0]), saved, np.zeros_like(tp.planes[2])],
                     tp.box_min, tp.box_max), x)
        assert np.allclose(full - partial, only, atol=1e-12)

    def test_value_gradients_match_fd(self):
        tp = self.make(seed=5)
        rng = np.random.default_rng(6)
        x = rng.uniform(-0.9, 0.9, size=(7, 3))
        gf = rng.normal(size=(7, 4))
        _, cache = sample_triplane(tp, x)
        grads = triplane_backward_values(tp, cache, gf)
        h = 1e-6
        for pi in range(3):
            p = tp.planes[pi]
            for idx in ((0, 0, 0), (3, 2, 1), (5, 5, 3)):
                old = p[idx]
                p[idx] = old + h
                lp = float((sample_triplane(tp, x)[0] * gf).sum())
                p[idx] = old - h
                lm = float((sample_triplane(tp, x)[0] * gf).sum())
                p[idx] = old
                assert abs((lp - lm) / (2 * h) - grads[pi][idx]) < 1e-7

    def test_position_gradients_match_fd(self):
        tp = self.make(seed=7)
        rng = np.random.default_rng(8)
        x = rng.uniform(-0.9, 0.9, size=(5, 3))
        gf = rng.normal(size=(5, 4))
        _, cache = sample_triplane(tp, x)
        gx = triplane_backward_position(tp, cache, gf)
        h = 1e-7
        for i in range(5):
            for k in range(3):
                xp = x.copy()
                xp[i, k] += h
                xm = x.copy()
                xm[i, k] -= h
                fd = ((sample_triplane(tp, xp)[0] * gf).sum()
                      - (sample_triplane(tp, xm)[0] * gf).sum()) / (2 * h)
                assert abs(fd - gx[i, k]) < 1e-5

    def test_rejects_tiny_resolution(self):
        with pytest.raises(ParameterError):
            TriPlane([np.zeros((1, 1, 2))] * 3, np.zeros(3), np.ones(3))


class TestFieldEval:
    def test_zero_init_field_equals_prior(self, mini_body):
        scene = make_scene(mini_body, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.5, 1.5, size=(50, 3))
        d_body = rng.normal(size=50)
        _, d = field_eval(scene, x, d_body)
        assert np.array_equal(d, d_body)

    def test_deterministic(self, mini_body):
        scene = make_scene(mini_body, seed=3)
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.5, 1.5, size=(10, 3)).astype(np.float32)
        d_body = rng.normal(size=10).astype(np.float32)
        f1, d1 = field_eval(scene, x, d_body)
        f2, d2 = field_eval(scene, x, d_body)
        assert np.array_equal(f1, f2) and np.array_equal(d1, d2)

    def test_colors_bounded(self, mini_body):
        scene = make_scene(mini_body, seed=4)
        rng = np.random.default_rng(2)
        f, _ = field_eval(scene, rng.uniform(-1, 2, size=(100, 3)),
                          rng.normal(size=100))
        assert f.min() >= 0.0 and f.max() <= 1.0

    def test_spatial_gradient_matches_fd(self, mini_body):
        scene = make_scene(mini_body, dtype=np.float64, seed=5)
        rng = np.random.default_rng(3)
        # exercise the residual head so the gradient is non-trivial
        scene.mlp_sdf.weights[-1][:] = rng.normal(0, 0.3, scene.mlp_sdf.weights[-1].shape)
        lo, hi = scene.triplane.box_min, scene.triplane.box_max
        x = rng.uniform(lo + 0.05, hi - 0.05, size=(20, 3))
        d_body = rng.normal(size=20)
        grad_d_body = rng.normal(size=(20, 3))
        grad_d_body /= np.linalg.norm(grad_d_body, axis=1, keepdims=True)
        g = field_gradient(scene, x, d_body, grad_d_body)
        h = 1e-6
        fd = np.zeros_like(g)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            # d_body varies linearly along its own gradient under the probe
            _, dp = field_eval(scene, x + e, d_body + grad_d_body[:, k] * h)
            _, dm = field_eval(scene, x - e, d_body - grad_d_body[:, k] * h)
            fd[:, k] = (dp - dm) / (2 * h)
        rel = np.abs(fd - g) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-3

    def test_zero_init_gradient_is_prior_gradient(self, mini_body):
        scene = make_scene(mini_body, dtype=np.float64)
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.5, 1.5, size=(30, 3))
        gdb = rng.normal(size=(30, 3))
        gdb /= np.linalg.norm(gdb, axis=1, keepdims=True)
        g = field_gradient(scene, x, rng.normal(size=30), gdb)
        assert np.allclose(g, gdb)
        assert np.abs(np.linalg.norm(g, axis=1) - 1.0).max() < 1e-12

    def test_constant_residual_head_contributes_nothing(self, mini_body):
        scene = make_scene(mini_body, dtype=np.float64)
        scene.mlp_sdf.weights[-1][:] = 0.0
        scene.mlp_sdf.biases[-1][:] = 3.21  # constant output, zero input-gradient
        rng = np.random.default_rng(5)
        x = rng.uniform(-0.5, 1.5, size=(10, 3))
        gdb = np.tile(np.array([1.0, 0.0, 0.0]), (10, 1))
        g = field_gradient(scene, x, rng.normal(size=10), gdb)
        assert np.allclose(g, gdb)


class TestCheckpoint:
    def test_bitwise_round_trip(self, mini_body, tmp_path):
        scene = make_scene(mini_body, seed=11)
        path = tmp_path / "scene.avgn"
        save_checkpoint(scene, path)
        loaded = load_checkpoint(path)
        for name, p in scene.parameters().items():
            assert np.array_equal(loaded.parameters()[name], p), name
        assert loaded.posenc_freqs == scene.posenc_freqs
        assert np.allclose(loaded.triplane.box_min, scene.triplane.box_min)

    def test_corrupt_magic(self, mini_body, tmp_path):
        scene = make_scene(mini_body)
        path = tmp_path / "scene.avgn"
        save_checkpoint(scene, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(MalformedFileError):
            load_checkpoint(path)

    def test_version_mismatch(self, mini_body, tmp_path):
        import struct
        scene = make_scene(mini_body)
        path = tmp_path / "scene.avgn"
        save_checkpoint(scene, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 999)
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncated_file(self, mini_body, tmp_path):
        scene = make_scene(mini_body)
        path = tmp_path / "scene.avgn"
        save_checkpoint(scene, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 3])
        with pytest.raises(MalformedFileError):
            load_checkpoint(path)

    def test_alpha_positive_for_any_log_alpha(self, mini_body):
        scene = make_scene(mini_body)
        for v in (-40.0, -1.0, 0.0, 5.0):
            scene.log_alpha[...] = v
            assert scene.alpha > 0
