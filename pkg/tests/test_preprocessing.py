import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsmoco.preprocessing import (
    ROLES,
    CropConfig,
    LandmarkError,
    LandmarkSet,
    align_and_crop,
    crop_transform,
    denormalize_channels,
    frame_filter,
    load_landmarks,
    normalize_channels,
    rotation_about,
    save_landmarks,
)
from wsmoco.synthetic import PatientLook, render_face


def _face(roll=0.0, **kw):
    look = PatientLook.draw(np.random.default_rng(0))
    return render_face(look, 0.2, 64, roll=roll, **kw)


def test_crop_shape_and_range():
    img, lm = _face()
    out = align_and_crop(img, lm, CropConfig(32))
    assert out.shape == (32, 32, 3) and out.dtype == np.float32
    assert 0.0 <= out.min() and out.max() <= 1.0


def test_crop_undoes_roll():
    img0, lm0 = _face(0.0)
    img1, lm1 = _face(np.radians(8))
    a = align_and_crop(img0, lm0, CropConfig(32))
    b = align_and_crop(img1, lm1, CropConfig(32))
    # aligned crops of the same face at different rolls look alike; raw frames do not
    assert np.abs(a - b).mean() < 0.5 * np.abs(img0 / 255.0 - img1 / 255.0).mean()


def test_crop_transform_maps_eyes_level():
    _, lm = _face(np.radians(10))
    inv = crop_transform(lm, 64)
    fwd = np.linalg.inv(np.vstack([inv, [0, 0, 1]]))[:2]
    le, re = (fwd[:, :2] @ lm[r] + fwd[:, 2] for r in ("left_eye", "right_eye"))
    assert abs(le[1] - re[1]) < 1e-9


def test_rotation_about_fixes_center():
    rot = rotation_about((3.0, 4.0), 0.7)
    assert np.allclose(rot[:, :2] @ [3.0, 4.0] + rot[:, 2], [3.0, 4.0])


def test_filter_thresholds():
    _, lm = _face()
    assert frame_filter(lm).keep
    _, turned = _face(turn=0.16)
    assert frame_filter(turned).reason == "yaw"
    _, opened = _face(mouth_open=True)
    assert frame_filter(opened).reason == "mouth"


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.2, 5.0), st.floats(-np.pi, np.pi))
def test_filter_similarity_invariant(dx, dy, scale, angle):
    _, lm = _face(turn=0.12)
    c, s = np.cos(angle), np.sin(angle)
    moved = lm.transformed(np.array([[scale * c, -scale * s, dx], [scale * s, scale * c, dy]]))
    a, b = frame_filter(lm), frame_filter(moved)
    assert a.keep == b.keep
    assert abs(a.yaw_proxy - b.yaw_proxy) < 1e-9 and abs(a.mouth_proxy - b.mouth_proxy) < 1e-9


def test_channel_round_trip():
    img = np.random.default_rng(0).random((5, 6, 3), dtype=np.float32)
    t = normalize_channels(img)
    assert t.shape == (3, 5, 6)
    assert np.allclose(denormalize_channels(t), img, atol=1e-6)


def test_landmark_errors(tmp_path):
    _, lm = _face()
    pts = dict(lm.points)
    pts.pop("nose_tip")
    with pytest.raises(LandmarkError, match="missing"):
        LandmarkSet(pts)
    with pytest.raises(LandmarkError):
        lm.check_bounds(10, 10)
    bad = dict(lm.points, right_eye=lm.points["left_eye"])
    with pytest.raises(LandmarkError):
        crop_transform(LandmarkSet(bad), 32)
    save_landmarks({"a.png": lm}, tmp_path / "lm.json")
    back = load_landmarks(tmp_path / "lm.json")["a.png"]
    assert set(back.points) == set(ROLES)
    assert np.allclose(back["left_eye"], lm["left_eye"], atol=1e-4)
