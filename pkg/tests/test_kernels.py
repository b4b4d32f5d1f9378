import colorsys

import numpy as np
import pytest

from wsmoco import _kernels as k


@pytest.fixture
def image():
    return np.random.default_rng(0).random((24, 20, 3), dtype=np.float32)


def both(monkeypatch, fn, *args):
    monkeypatch.setenv("WSMOCO_NUMBA", "1")
    fast = fn(*args)
    monkeypatch.setenv("WSMOCO_NUMBA", "0")
    slow = fn(*args)
    return fast, slow


def test_flag_selects_path(monkeypatch):
    monkeypatch.setenv("WSMOCO_NUMBA", "0")
    assert not k.numba_enabled()
    monkeypatch.setenv("WSMOCO_NUMBA", "1")
    assert k.numba_enabled()


def test_ellipse_paths_agree(monkeypatch):
    rng = np.random.default_rng(1)
    for _ in range(10):
        args = (*rng.uniform(0, 30, 2), *rng.uniform(1, 12, 2), rng.uniform(-3, 3), tuple(rng.random(3)))
        a = np.zeros((32, 32, 3), np.float32)
        b = np.zeros((32, 32, 3), np.float32)
        monkeypatch.setenv("WSMOCO_NUMBA", "1")
        k.paint_ellipse(a, *args)
        monkeypatch.setenv("WSMOCO_NUMBA", "0")
        k.paint_ellipse(b, *args)
        assert np.allclose(a, b, atol=1e-5)
        assert a.max() > 0


def test_hue_paths_agree(monkeypatch, image):
    for delta in (-0.1, 0.0, 0.03, 0.25):
        fast, slow = both(monkeypatch, k.shift_hue, image, delta)
        assert np.allclose(fast, slow, atol=1e-5)


def test_hue_matches_colorsys(monkeypatch, image):
    monkeypatch.setenv("WSMOCO_NUMBA", "0")
    out = k.shift_hue(image, 0.1)
    for y, x in [(0, 0), (5, 7), (23, 19)]:
        h, s, v = colorsys.rgb_to_hsv(*image[y, x].astype(float))
        want = colorsys.hsv_to_rgb((h + 0.1) % 1.0, s, v)
        assert np.allclose(out[y, x], want, atol=1e-5)


def test_warp_paths_agree(monkeypatch, image):
    inv = np.array([[0.9, 0.1, 1.5], [-0.1, 1.1, -0.5]])
    fast, slow = both(monkeypatch, k.warp_bilinear, image, inv, 16, 18)
    assert fast.shape == (16, 18, 3)
    assert np.allclose(fast, slow, atol=1e-5)


def test_identity_warp(monkeypatch, image):
    # output pixel centres map onto input pixel centres under the identity
    for flag in ("0", "1"):
        monkeypatch.setenv("WSMOCO_NUMBA", flag)
        out = k.warp_bilinear(image, np.array([[1.0, 0, 0], [0, 1.0, 0]]), 24, 20)
        assert np.allclose(out, image, atol=1e-6)


def test_ellipse_rejects_degenerate():
    with pytest.raises(ValueError):
        k.paint_ellipse(np.zeros((4, 4, 3), np.float32), 1, 1, 0, 1, 0, (1, 1, 1))
