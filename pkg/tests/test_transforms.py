from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advdip import classifier as C
from advdip import transforms as TR

NATURAL = Path(__file__).parent / "data" / "natural64.ppm"


@pytest.fixture(scope="module")
def natural():
    return C.read_ppm(NATURAL)


def center(img, frac=0.25):
    h, w = img.shape[-2:]
    return img[..., int(h * frac) : h - int(h * frac), int(w * frac) : w - int(w * frac)]


def smooth_image(side=32):
    yy, xx = np.mgrid[0:side, 0:side] / side
    return np.stack([0.5 + 0.3 * np.sin(2 * np.pi * (xx + k * yy) / 2) for k in range(3)]).astype(np.float32)


# geometry ---------------------------------------------------------------------------

def test_zero_rotation_and_unit_scale_are_bitwise_identity(natural):
    assert TR.rotate(natural, 0).tobytes() == natural.tobytes()
    assert TR.scale(natural, 1.0).tobytes() == natural.tobytes()


def test_quarter_turn_matches_array_rotation(natural):
    np.testing.assert_allclose(TR.rotate(natural, 90), np.rot90(natural, axes=(1, 2)), atol=1e-6)


def test_rotation_round_trip_center(natural):
    back = TR.rotate(TR.rotate(natural, 90), -90)
    assert np.abs(center(back) - center(natural)).mean() < 2 / 255


def test_scale_round_trip_center_on_smooth_image():
    x = smooth_image()
    back = TR.scale(TR.scale(x, 2.0), 0.5)
    assert np.abs(center(back) - center(x)).mean() < 2 / 255


def test_scale_round_trip_exact_on_linear_ramp():
    # bilinear interpolation reproduces affine intensities exactly
    yy, xx = np.mgrid[0:32, 0:32]
    x = np.stack([0.2 + 0.01 * yy + 0.005 * xx] * 3).astype(np.float64)
    back = TR.scale(TR.scale(x, 2.0), 0.5)
    np.testing.assert_allclose(center(back), center(x), atol=1e-9)


def test_scale_round_trip_blur_oracle():
    # centred 2x then 0.5x samples at +-1/4 pixel: per axis 0.75*x[i] + 0.125*(x[i-1] + x[i+1])
    g = np.random.default_rng(0)
    x = g.uniform(size=(1, 32, 32))
    k = np.array([0.125, 0.75, 0.125])
    blur = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 1, x[0])
    blur = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 1, blur.T).T
    back = TR.scale(TR.scale(x, 2.0), 0.5)
    np.testing.assert_allclose(back[0, 8:24, 8:24], blur[8:24, 8:24], atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(deg=st.floats(-180, 180), factor=st.floats(0.5, 2.0), seed=st.integers(0, 100))
def test_warps_keep_shape_dtype_and_range(deg, factor, seed):
    x = np.random.default_rng(seed).uniform(size=(1, 3, 16, 16)).astype(np.float32)
    for out in (TR.rotate(x, deg), TR.scale(x, factor)):
        assert out.shape == x.shape and out.dtype == x.dtype
        assert out.min() >= 0 and out.max() <= 1


def test_warp_argument_errors():
    x = np.zeros((3, 8, 8))
    with pytest.raises(ValueError):
        TR.rotate(x, 181)
    with pytest.raises(ValueError):
        TR.scale(x, 0.4)
    with pytest.raises(ValueError):
        TR.scale(x, 2.5)


def test_resize_halving_is_box_average():
    # centred sampling lands exactly between each pixel pair when halving
    x = np.random.default_rng(5).uniform(size=(3, 16, 16))
    box = x.reshape(3, 8, 2, 8, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(TR.resize(x, 8, 8), box, atol=1e-12)


def test_resize_identity_and_constant():
    x = np.random.default_rng(6).uniform(size=(1, 3, 9, 9)).astype(np.float32)
    assert TR.resize(x, 9, 9).tobytes() == x.tobytes()
    flat = np.full((3, 5, 5), 0.3)
    np.testing.assert_allclose(TR.resize(flat, 13, 7), 0.3, atol=1e-12)
    with pytest.raises(ValueError):
        TR.resize(flat, 0, 4)


def test_bilinear_sample_midpoint_and_clamp():
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    assert TR.bilinear_sample(img, np.array([0.5]), np.array([0.5]))[0, 0] == pytest.approx(1.5)
    assert TR.bilinear_sample(img, np.array([-3.0]), np.array([9.0]))[0, 0] == 1.0


# JPEG ---------------------------------------------------------------------------------

def test_quality_tables():
    np.testing.assert_array_equal(TR.quality_table(TR.LUMA_Q, 50), TR.LUMA_Q)
    np.testing.assert_array_equal(TR.quality_table(TR.LUMA_Q, 100), np.ones((8, 8)))
    assert TR.quality_table(TR.LUMA_Q, 80)[0, 0] == 6  # floor((16 * 40 + 50) / 100)
    assert TR.quality_table(TR.LUMA_Q, 1).max() == 255
    for bad in (0, 101):
        with pytest.raises(ValueError):
            TR.quality_table(TR.LUMA_Q, bad)


def test_dct_is_orthonormal():
    D = TR.dct_matrix(8)
    np.testing.assert_allclose(D @ D.T, np.eye(8), atol=1e-12)


def test_ycbcr_round_trip():
    rgb = np.random.default_rng(1).uniform(0, 255, size=(3, 5, 5))
    np.testing.assert_allclose(TR.ycbcr_to_rgb(TR.rgb_to_ycbcr(rgb)), rgb, atol=1e-3)


@settings(max_examples=40, deadline=None)
@given(level=st.integers(0, 255), quality=st.integers(50, 100))
def test_jpeg_constant_gray_within_one_level(level, quality):
    x = np.full((3, 16, 16), level / 255, np.float32)
    out = TR.jpeg_roundtrip(x, quality)
    assert np.abs(out - x).max() <= 1 / 255 + 1e-6
    assert np.ptp(out) == 0


@settings(max_examples=30, deadline=None)
@given(level=st.integers(0, 255), quality=st.integers(1, 100))
def test_jpeg_constant_gray_error_bounded_by_dc_step(level, quality):
    # a flat block keeps only its DC term, so the error is at most half a DC step over 8, plus rounding
    x = np.full((3, 8, 8), level / 255, np.float64)
    step = TR.quality_table(TR.LUMA_Q, quality)[0, 0]
    err = np.abs(TR.jpeg_roundtrip(x, quality) - x).max() * 255
    assert err <= step / 16 + 0.5 + 1e-9


def test_jpeg_mid_gray_exact_at_any_quality():
    x = np.full((3, 8, 8), 128 / 255, np.float32)
    for q in (1, 10, 80, 100):
        np.testing.assert_array_equal(TR.jpeg_roundtrip(x, q), x)


def test_jpeg_quality_100_natural(natural):
    assert np.abs(TR.jpeg_roundtrip(natural, 100) - natural).mean() < 2 / 255


def test_jpeg_nearly_idempotent(natural):
    once = TR.jpeg_roundtrip(natural, 80)
    twice = TR.jpeg_roundtrip(once, 80)
    assert np.abs(twice - once).mean() <= 1 / 255


def test_jpeg_output_is_8bit_and_handles_odd_sizes():
    x = np.random.default_rng(2).uniform(size=(1, 3, 13, 10)).astype(np.float32)
    out = TR.jpeg_roundtrip(x, 80)
    assert out.shape == x.shape
    np.testing.assert_allclose(out * 255, np.round(out * 255), atol=1e-4)
    with pytest.raises(ValueError):
        TR.jpeg_roundtrip(np.zeros((1, 8, 8)), 80)


def test_quantize8_idempotent():
    x = np.random.default_rng(3).uniform(-0.2, 1.2, size=(3, 4, 4)).astype(np.float32)
    q = TR.quantize8(x)
    assert q.min() >= 0 and q.max() <= 1
    np.testing.assert_array_equal(TR.quantize8(q), q)


# transform specs ----------------------------------------------------------------------

def test_spec_names_and_validation():
    assert TR.TransformSpec("rotate", 2.0).name == "rotate2"
    assert TR.TransformSpec("none").name == "none"
    with pytest.raises(ValueError):
        TR.TransformSpec("blur")
    with pytest.raises(ValueError):
        TR.TransformSpec("jpeg", 0)
    with pytest.raises(ValueError):
        TR.TransformSpec("scale", 1.0)


@settings(max_examples=30, deadline=None)
@given(mag=st.floats(0, 5), seed=st.integers(0, 1000))
def test_uniform_sampling_within_range(mag, seed):
    g = np.random.default_rng(seed)
    r = TR.TransformSpec("rotate", mag).sample(g)
    assert -mag <= r <= mag
    s = TR.TransformSpec("scale", min(mag, 0.9) / 10).sample(g)
    assert abs(s - 1) <= min(mag, 0.9) / 10


def test_fixed_sampling_and_identity_apply():
    g = np.random.default_rng(0)
    assert TR.TransformSpec("rotate", 2, "fixed").sample(g) == 2
    assert TR.TransformSpec("scale", 0.02, "fixed").sample(g) == pytest.approx(1.02)
    assert TR.TransformSpec("jpeg", 80).sample(g) == 80
    x = np.random.default_rng(1).uniform(size=(3, 8, 8)).astype(np.float32)
    for spec, v in ((TR.TransformSpec("rotate", 2), 0.0), (TR.TransformSpec("scale", 0.02), 1.0),
                    (TR.TransformSpec("none"), 0.0)):
        assert spec.apply(x, v).tobytes() == x.tobytes()


def test_apply_requantizes():
    x = np.random.default_rng(4).uniform(size=(3, 16, 16)).astype(np.float32)
    out = TR.TransformSpec("rotate", 2).apply(x, 1.3)
    np.testing.assert_array_equal(TR.quantize8(out), out)


def test_parse_transform():
    assert TR.parse_transform("rot-L") == TR.TransformSpec("rotate", 2.0, name="rot-L")
    t = TR.parse_transform("scale:0.01:fixed")
    assert (t.kind, t.magnitude, t.sampling) == ("scale", 0.01, "fixed")
    assert TR.parse_transform("jpeg").magnitude == 80
    with pytest.raises(ValueError):
        TR.parse_transform("warp:3")


def test_standard_transform_names_unique():
    names = [t.name for t in TR.standard_transforms()]
    assert len(names) == len(set(names)) and names[0] == "none"
