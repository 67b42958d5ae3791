import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from nexus.data import Primitive, Scene, caption, extract_edges, random_scene, render, sample_seed
from nexus.metrics import (EvalReport, FixedFeatures, classify_color, color_accuracy, edge_f1,
                           edge_f1_maps, frechet_fixed_features, frechet_from_features, sqrtm_psd)


def _map(mask):
    return np.where(mask, 1.0, -1.0)


def test_identical_maps_score_one():
    cond = extract_edges(render(random_scene(1), 32))
    assert edge_f1_maps(cond, cond) == 1.0


def test_disjoint_maps_score_zero():
    a = np.zeros((16, 16), bool)
    b = np.zeros((16, 16), bool)
    a[2, 2:6] = True
    b[12, 10:14] = True
    assert edge_f1_maps(_map(a), _map(b)) == 0.0


def test_half_overlap_hand_count():
    # prediction: 8 pixels on row 2; reference: the same 4 leftmost pixels plus 4 far away
    pred = np.zeros((20, 20), bool)
    ref = np.zeros((20, 20), bool)
    pred[2, 0:8] = True
    ref[2, 0:4] = True
    ref[15, 12:16] = True
    # dilation 1: predicted pixels 0..4 lie within 1 px of the reference, so p = 5/8; r = 4/8
    p, r = 5 / 8, 4 / 8
    assert abs(edge_f1_maps(_map(pred), _map(ref), dilation=1) - 2 * p * r / (p + r)) < 1e-12
    # exact matching: p = 4/8, r = 4/8
    assert abs(edge_f1_maps(_map(pred), _map(ref), dilation=0) - 0.5) < 1e-12


def test_f1_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.random((16, 16)) < 0.2, rng.random((16, 16)) < 0.2
    assert edge_f1_maps(_map(a), _map(b)) == pytest.approx(edge_f1_maps(_map(b), _map(a)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_f1_nonincreasing_under_deletion(seed):
    rng = np.random.default_rng(seed)
    ref = extract_edges(render(random_scene(seed), 32))[0] > 0
    pred = ref.copy()
    prev = edge_f1_maps(_map(pred), _map(ref))
    for _ in range(3):
        on = np.argwhere(pred)
        if len(on) == 0:
            break
        drop = on[rng.choice(len(on), max(1, len(on) // 4), replace=False)]
        pred[drop[:, 0], drop[:, 1]] = False
        cur = edge_f1_maps(_map(pred), _map(ref))
        assert cur <= prev + 1e-12
        prev = cur


def test_edge_f1_on_rendered_image():
    img = render(random_scene(4), 32)
    assert edge_f1(img, extract_edges(img)) == 1.0
    assert edge_f1(np.zeros_like(img), extract_edges(img)) == 0.0


def test_color_accuracy_ground_truth():
    for i in range(20):
        scene = random_scene(sample_seed(9, i))
        assert color_accuracy(render(scene, 32), scene, caption(scene)) == 1.0


def test_color_accuracy_wrong_prompt():
    scene = Scene([Primitive("circle", "red", 0.5, 0.5, 0.2)])
    assert color_accuracy(render(scene, 32), scene, "a blue circle") == 0.0


def test_gray_image_near_chance():
    scores = []
    for i in range(400):
        scene = random_scene(sample_seed(21, i))
        scores.append(color_accuracy(np.zeros((3, 32, 32)), scene, caption(scene)))
    assert abs(np.mean(scores) - 0.25) < 0.05


def test_empty_scene_vacuous():
    assert color_accuracy(np.zeros((3, 32, 32)), Scene(), "") == 1.0


def test_classify_color():
    assert classify_color([0.9, 0.8, -0.7]) == "yellow"
    assert classify_color([-0.2, -0.9, 0.4]) == "blue"


def test_frechet_identical_sets():
    imgs = np.stack([render(random_scene(i), 32) for i in range(40)])
    assert abs(frechet_fixed_features(imgs, imgs)) < 1e-6


def test_frechet_shifted_features():
    rng = np.random.default_rng(0)
    fa = rng.standard_normal((5000, 4))
    delta = np.array([0.5, -1.0, 0.0, 2.0])
    assert abs(frechet_from_features(fa, fa + delta) - delta @ delta) < 1e-6


def test_frechet_independent_gaussians():
    rng = np.random.default_rng(1)
    fa = rng.standard_normal((20000, 3))
    fb = rng.standard_normal((20000, 3)) + np.array([1.0, 0.0, 0.0])
    assert abs(frechet_from_features(fa, fb) - 1.0) < 0.05


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(2)
    fa = rng.standard_normal((300, 6)) @ rng.standard_normal((6, 6))
    fb = rng.standard_normal((300, 6)) @ rng.standard_normal((6, 6)) + 0.3
    ca, cb = np.cov(fa, rowvar=False), np.cov(fb, rowvar=False)
    ref = ((fa.mean(0) - fb.mean(0)) ** 2).sum() + np.trace(ca + cb - 2 * scipy.linalg.sqrtm(ca @ cb).real)
    assert abs(frechet_from_features(fa, fb) - ref) < 1e-6 * max(1.0, ref)


def test_frechet_order_invariant_and_symmetric():
    rng = np.random.default_rng(3)
    fa, fb = rng.standard_normal((200, 5)), rng.standard_normal((150, 5)) * 1.5
    d = frechet_from_features(fa, fb)
    assert d == pytest.approx(frechet_from_features(fa[::-1], fb[rng.permutation(150)]), abs=1e-9)
    assert d == pytest.approx(frechet_from_features(fb, fa), abs=1e-9)
    assert d >= 0


def test_sqrtm_psd_clamps_negative():
    a = np.diag([4.0, -1e-12, 9.0])
    np.testing.assert_allclose(sqrtm_psd(a), np.diag([2.0, 0.0, 3.0]), atol=1e-12)


def test_fixed_features_shape_and_seed():
    imgs = np.stack([render(random_scene(i), 32) for i in range(3)])
    f = FixedFeatures()(imgs)
    assert f.shape == (3, 64)
    assert np.array_equal(f, FixedFeatures(seed=1234)(imgs))
    assert not np.array_equal(f, FixedFeatures(seed=1)(imgs))


def test_report_rejects_nan():
    with pytest.raises(ValueError):
        EvalReport(np.nan, 1.0, 0.0, 1)
    assert EvalReport(0.5, 0.5, 1.0, 4).to_dict()["n"] == 4
