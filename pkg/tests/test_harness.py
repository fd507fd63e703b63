import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advdip import attacks as A
from advdip import classifier as C
from advdip import harness as H
from advdip.transforms import TransformSpec, parse_transform

DATA = Path(__file__).parent / "data"


def fixture_report() -> H.RobustnessReport:
    """Fixed report behind the golden CSV/SVG files in tests/data."""
    return H.RobustnessReport(
        methods=["dip", "cw"],
        transforms=["none", "rot-L", "jpeg"],
        success={"dip": {"none": 1.0, "rot-L": 0.9, "jpeg": 0.75},
                 "cw": {"none": 1.0, "rot-L": 0.35, "jpeg": 0.1}},
        counts={m: {"none": 100, "rot-L": 100, "jpeg": 100} for m in ("dip", "cw")},
        perceptibility={"dip": {"l2_mean": 1.5, "linf_mean": 0.2, "psnr_mean": 29.5},
                        "cw": {"l2_mean": 0.4, "linf_mean": 0.1, "psnr_mean": float("inf")}},
        seeds=[0],
        magnitudes={"none": 0.0, "rot-L": 2.0, "jpeg": 80.0},
        timing={"dip": 40.0, "cw": 3.0},
    )


FIXTURE_CURVE = [{"area": 0.0, "success": 0.1, "control": 0.1},
                 {"area": 0.25, "success": 0.8, "control": 0.3},
                 {"area": 0.4, "success": 0.95, "control": 0.6}]


class ConstantClassifier:
    num_classes = 10

    def __init__(self, c=0):
        self.c = c

    def predict(self, images):
        return np.full(len(np.asarray(images).reshape(-1, 3, *np.shape(images)[-2:])), self.c)


class GreenDetector:
    """Predicts class 7 when any pixel is pure green, else class 0."""

    num_classes = 10

    def predict(self, images):
        images = np.asarray(images)
        hit = (images[:, 1] == 1) & (images[:, 0] == 0) & (images[:, 2] == 0)
        return np.where(hit.any(axis=(1, 2)), 7, 0)


# metrics -------------------------------------------------------------------------

def test_perceptibility_identity_and_single_pixel():
    x = np.full((3, 32, 32), 0.25)
    assert H.perceptibility_metrics(x, x) == (0.0, 0.0, math.inf)
    y = x.copy()
    y[1, 5, 7] += 0.5
    l2, linf, ps = H.perceptibility_metrics(x, y)
    assert l2 == pytest.approx(0.5) and linf == pytest.approx(0.5)
    assert ps == pytest.approx(10 * math.log10(3 * 32 * 32 / 0.25))


def test_psnr_40db_is_mse_1e4():
    x = np.zeros((3, 8, 8))
    assert H.perceptibility_metrics(x, x + 0.01)[2] == pytest.approx(40.0)
    with pytest.raises(ValueError):
        H.perceptibility_metrics(x, np.zeros((3, 8, 9)))


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 1000))
def test_power_spectrum_matches_fft(h, w, seed):
    r = np.random.default_rng(seed).normal(size=(3, h, w))
    expect = np.sum(np.abs(np.fft.fft2(r)) ** 2, axis=0)
    np.testing.assert_allclose(H.power_spectrum(r), expect, rtol=1e-9, atol=1e-9)


def test_parseval_energy():
    r = np.random.default_rng(0).normal(size=(1, 3, 16, 16))
    assert H.power_spectrum(r).sum() / 256 == pytest.approx(np.sum(r**2))


def test_high_frequency_fraction_extremes():
    assert H.high_frequency_fraction(np.ones((3, 16, 16))) == pytest.approx(0.0, abs=1e-12)
    assert H.high_frequency_fraction(np.zeros((3, 16, 16))) == 0.0
    checker = (np.indices((16, 16)).sum(axis=0) % 2) * 2.0 - 1
    assert H.high_frequency_fraction(np.stack([checker] * 3)) == pytest.approx(1.0)
    yy = np.arange(16)[:, None] * np.ones((1, 16))
    slow = np.cos(2 * np.pi * yy / 16)
    assert H.high_frequency_fraction(slow[None]) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), k=st.floats(0.01, 100))
def test_high_frequency_fraction_bounded_and_scale_invariant(seed, k):
    r = np.random.default_rng(seed).normal(size=(3, 8, 8))
    a = H.high_frequency_fraction(r)
    assert 0 <= a <= 1
    assert H.high_frequency_fraction(k * r) == pytest.approx(a, rel=1e-9)


# targets and dispatch ------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(labels=st.lists(st.integers(0, 9), min_size=1, max_size=50), seed=st.integers(0, 2**31))
def test_draw_targets_always_incorrect(labels, seed):
    t = H.draw_targets(np.array(labels), 10, seed)
    assert np.all(t != np.array(labels)) and t.min() >= 0 and t.max() < 10
    np.testing.assert_array_equal(t, H.draw_targets(np.array(labels), 10, seed))


def test_dip_seeds_distinct_across_images_and_seeds():
    seeds = {H.dip_seed(s, i) for s in range(3) for i in range(1000)}
    assert len(seeds) == 3000


def test_run_method_unknown():
    with pytest.raises(ValueError):
        H.run_method("pgd", None, None, 0, 0)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("ADVDIP_THREADS", "3")
    assert H.thread_cap() == 3
    monkeypatch.setenv("ADVDIP_THREADS", "zero")
    assert H.thread_cap() == 1
    monkeypatch.delenv("ADVDIP_THREADS")
    assert H.thread_cap() == 1


# robustness evaluation -------------------------------------------------------------

def _fake_set(n=4, seed=0):
    g = np.random.default_rng(seed)
    images = g.uniform(size=(n, 3, 8, 8)).astype(np.float32)
    labels = np.zeros(n, int)
    targets = np.full(n, 3)
    results = {"m": [A.AttackResult(images[i][None], np.zeros((1, 3, 8, 8)), False, 0, 0, 3, 1, 0.0, 0.0, 0.5)
                     for i in range(n)]}
    return H.AttackSet(images, labels, targets, results, seed)


def test_all_zero_success_method_gives_zero_row():
    transforms = [parse_transform(t) for t in ("none", "rot-L", "scale-L", "jpeg")]
    rep = H.score_transforms(ConstantClassifier(0), [_fake_set(), _fake_set(seed=1)], transforms, trials=2)
    assert all(v == 0 for v in rep.success["m"].values())
    assert rep.counts["m"] == {"none": 8, "rot-L": 16, "scale-L": 16, "jpeg": 16}
    assert rep.perceptibility["m"]["psnr_mean"] == math.inf
    assert rep.seeds == [0, 1]
    assert math.isnan(rep.retention("m", "jpeg"))


def test_evaluate_robustness_small(small_model, shapes_small):
    _, test = shapes_small
    transforms = [parse_transform("none"), TransformSpec("rotate", 0.0, name="rot0"),
                  TransformSpec("scale", 0.0, name="scale1"), parse_transform("jpeg")]
    rep = H.evaluate_robustness(small_model, ["fgsm", "deepfool"], test, transforms, n=6, seeds=[0, 1],
                                config={"fgsm": {"eps": 0.05}, "deepfool": {"use_logits": True}})
    for m in ("fgsm", "deepfool"):
        assert rep.counts[m]["none"] == 12
        # identity magnitudes leave the none column bitwise unchanged
        assert rep.success[m]["rot0"] == rep.success[m]["none"]
        assert rep.success[m]["scale1"] == rep.success[m]["none"]
        assert 0 <= rep.success[m]["jpeg"] <= 1
    assert rep.success["deepfool"]["none"] == 1.0
    again = H.RobustnessReport.from_json(rep.to_json())
    assert again == rep


def test_attack_images_shares_targets_and_is_deterministic(small_model, shapes_small):
    _, test = shapes_small
    a = H.attack_images(small_model, ["fgsm", "mifgsm"], test, seed=5, n=4)
    b = H.attack_images(small_model, ["fgsm", "mifgsm"], test, seed=5, n=4, threads=2)
    np.testing.assert_array_equal(a.targets, b.targets)
    assert all(r.target == t for r, t in zip(a.results["mifgsm"], a.targets))
    for m in a.results:
        for ra, rb in zip(a.results[m], b.results[m]):
            assert ra.x_adv.tobytes() == rb.x_adv.tobytes()


def test_correctly_classified_excludes(small_model, shapes_small):
    _, test = shapes_small
    clean, excluded = H.correctly_classified(small_model, test)
    assert len(clean) + excluded == len(test)
    np.testing.assert_array_equal(small_model.predict(clean.images), clean.labels)


# patches ------------------------------------------------------------------------------

def test_paste_places_patch():
    x = np.zeros((3, 8, 8), np.float32)
    p = np.ones((3, 2, 2), np.float32)
    out = H.paste(x, p, (3, 5))[0]
    assert out.sum() == 12 and np.all(out[:, 3:5, 5:7] == 1)


def test_scaled_patches_sizes():
    render = np.random.default_rng(0).uniform(size=(3, 16, 16)).astype(np.float32)
    out = H.scaled_patches(render, [0, 0.1, 0.25, 0.4], (32, 32))
    assert {a: p.shape for a, p in out.items()} == {0: (3, 0, 0), 0.1: (3, 10, 10), 0.25: (3, 16, 16),
                                                   0.4: (3, 20, 20)}
    # the trained size passes through unchanged apart from 8-bit quantization
    np.testing.assert_allclose(out[0.25], render, atol=0.5 / 255 + 1e-7)


def test_patch_success_curve_with_detector():
    test = C.synth_dataset(10, 3, seed=1)
    green = np.zeros((3, 6, 6), np.float32)
    green[1] = 1
    rows = H.patch_success_curve({0.0: np.zeros((3, 0, 0)), 0.035: green}, GreenDetector(), test, 7)
    assert rows[0] == {"area": 0.0, "success": 0.0, "control": 0.0}
    assert rows[1]["success"] == 1.0 and rows[1]["control"] == 0.0


# output -------------------------------------------------------------------------------

def test_csv_golden():
    assert H.report_csv(fixture_report()) == (DATA / "golden_report.csv").read_text(encoding="utf-8")


def test_svg_golden():
    assert H.report_svg(fixture_report()) == (DATA / "golden_report.svg").read_text(encoding="utf-8")


def test_curve_golden():
    assert H.curve_csv(FIXTURE_CURVE) == (DATA / "golden_curve.csv").read_text(encoding="utf-8")
    assert H.curve_svg(FIXTURE_CURVE) == (DATA / "golden_curve.svg").read_text(encoding="utf-8")


def test_empty_report_is_header_only():
    rep = H.RobustnessReport([], ["none"], {}, {})
    assert H.report_csv(rep) == H.CSV_HEADER + "\n"


def test_one_method_three_transforms_three_rows():
    rep = fixture_report()
    rep.methods = ["dip"]
    lines = H.report_csv(rep).splitlines()
    assert len(lines) == 4 and all(l.startswith("dip,") for l in lines[1:])
    assert lines[1] == "dip,none,1.000000,100,1.500000,0.200000,29.500000"


def test_emit_report_writes_and_errors(tmp_path):
    H.emit_report(fixture_report(), tmp_path / "r.csv", tmp_path / "r.svg")
    assert (tmp_path / "r.csv").read_bytes() == (DATA / "golden_report.csv").read_bytes()
    H.emit_report(FIXTURE_CURVE, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("area,success_rate,control_rate\n")
    with pytest.raises(OSError):
        H.emit_report(fixture_report(), tmp_path / "missing" / "r.csv")


def test_report_json_round_trip_with_infinity():
    rep = fixture_report()
    text = rep.to_json()
    assert json.loads(text)["perceptibility"]["cw"]["psnr_mean"] == math.inf
    assert H.RobustnessReport.from_json(text) == rep
    assert rep.retention("cw", "rot-L") == pytest.approx(0.35)
    assert "timing" not in json.loads(text)
    assert H.timing_csv(rep) == "method,seconds_mean\ndip,40.000000\ncw,3.000000\n"
