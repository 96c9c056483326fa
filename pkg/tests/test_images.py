import numpy as np
import pytest

from avatarsdf.errors import MalformedFileError
from avatarsdf.images import load_pfm, load_ppm, save_pfm, save_ppm


class TestPpm:
    def test_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(11, 7, 3))
        path = tmp_path / "x.ppm"
        save_ppm(path, img)
        back = load_ppm(path)
        assert back.shape == (11, 7, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_uint8_exact(self, tmp_path):
        img = np.arange(4 * 3 * 3, dtype=np.uint8).reshape(4, 3, 3)
        path = tmp_path / "x.ppm"
        save_ppm(path, img)
        back = (load_ppm(path) * 255).round().astype(np.uint8)
        assert np.array_equal(back, img)

    def test_grayscale_broadcast(self, tmp_path):
        mask = np.eye(5)
        path = tmp_path / "m.ppm"
        save_ppm(path, mask)
        back = load_ppm(path)
        assert np.array_equal(back[:, :, 0] > 0.5, mask > 0.5)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n2 2\n255\nnot binary")
        with pytest.raises(MalformedFileError):
            load_ppm(path)


class TestPfm:
    def test_round_trip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        depth = rng.uniform(0.5, 5.0, size=(9, 13)).astype(np.float32)
        path = tmp_path / "d.pfm"
        save_pfm(path, depth)
        back = load_pfm(path)
        assert np.array_equal(back.astype(np.float32), depth)

    def test_preserves_infinity(self, tmp_path):
        depth = np.full((4, 4), np.inf, dtype=np.float32)
        depth[1, 2] = 3.25
        path = tmp_path / "d.pfm"
        save_pfm(path, depth)
        back = load_pfm(path)
        assert np.isinf(back[0, 0])
        assert back[1, 2] == pytest.approx(3.25)

    def test_rejects_color_pfm_magic(self, tmp_path):
        path = tmp_path / "c.pfm"
        path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
        with pytest.raises(MalformedFileError):
            load_pfm(path)

    def test_rejects_multichannel_input(self, tmp_path):
        with pytest.raises(MalformedFileError):
            save_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 3)))
