import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtnerf.metrics import EvalReport, FrameMetrics, frame_metrics, lmd, locate_landmarks, psnr, psnr_with_flag, \
    read_eval_csv


def test_identical_images_are_capped():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr_with_flag(img, img) == (99.0, True)


def test_uniform_difference():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)


def test_checkerboard_difference():
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[(np.indices((8, 8)).sum(0) % 2) == 1] = 0.2
    # half the pixels off by 0.2: MSE = 0.02
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / 0.02), abs=1e-12)
    assert psnr(a, b) == pytest.approx(16.99, abs=5e-3)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), np.zeros((2, 2), bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_psnr_symmetry_permutation_and_full_mask(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 6, 5, 3))
    assert psnr(a, b) == psnr(b, a)
    perm = rng.permutation(30)
    pa = a.reshape(30, 3)[perm].reshape(6, 5, 3)
    pb = b.reshape(30, 3)[perm].reshape(6, 5, 3)
    assert psnr(pa, pb) == pytest.approx(psnr(a, b), rel=1e-12)
    assert psnr(a, b, np.ones((6, 5), bool)) == psnr(a, b)


def test_lmd_closed_forms():
    gt = {f"p{i}": (float(i), 2.0 * i) for i in range(5)}
    assert lmd(gt, gt) == 0.0
    moved = dict(gt, p2=(2 + 3.0, 4 + 4.0))
    assert lmd(moved, gt) == pytest.approx(1.0)
    with pytest.raises(KeyError):
        lmd({"a": (0, 0)}, {"b": (0, 0)})


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 1000))
def test_lmd_translation(dx, dy, seed):
    rng = np.random.default_rng(seed)
    a = {str(i): tuple(rng.uniform(0, 64, 2)) for i in range(4)}
    b = {str(i): tuple(rng.uniform(0, 64, 2)) for i in range(4)}
    shift = lambda d: {k: (v[0] + dx, v[1] + dy) for k, v in d.items()}
    assert lmd(shift(a), shift(b)) == pytest.approx(lmd(a, b), abs=1e-9)


def _spot(x, y, size=32):
    img = np.zeros((size, size, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    img[..., 0] = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / 3.0)
    return img


def test_template_matching_finds_shift():
    gt = _spot(15, 15)
    pred = _spot(17, 14)
    found = locate_landmarks(pred, gt, {"m": (15.0, 15.0)})
    assert found["m"] == (17.0, 14.0)
    assert locate_landmarks(gt, gt, {"m": (15.0, 15.0)})["m"] == (15.0, 15.0)


def test_ground_truth_against_itself():
    gt = _spot(10, 12)
    fm = frame_metrics(0, gt, gt, np.ones((32, 32), bool), {"m": (10.0, 12.0)})
    assert fm.psnr == 99.0 and fm.psnr_capped and fm.lmd == 0.0


def test_report_means_match_csv(tmp_path):
    rep = EvalReport([FrameMetrics(0, 30.0, 25.0, 0.5), FrameMetrics(1, 32.0, 27.5, 1.0)], "abc")
    csv_path, json_path = rep.write(tmp_path)
    rows = read_eval_csv(csv_path)
    assert rep.mean_psnr == np.mean([r["psnr"] for r in rows]) == 31.0
    assert rep.mean_mouth_psnr == 26.25 and rep.mean_lmd == 0.75
    assert rep.summary()["lpips"] == "n/a" and rep.summary()["fid"] == "n/a"
    assert csv_path.read_text().splitlines()[0] == "frame,psnr,mouth_psnr,lmd"
