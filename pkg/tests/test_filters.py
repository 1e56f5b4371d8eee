import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mf_readout import (
    ConfigError,
    DataError,
    FilterModel,
    classify_stack,
    extract_array_features,
    extract_site_features,
    gaussian_score,
    gaussian_weight_map,
    neighbor_sites,
    square_score,
    unsupervised_threshold,
)
from mf_readout.filters import window_fits, window_origin, window_slice


# ------------------------------------------------------------ windows

def test_window_origin_rounds_half_up():
    assert window_origin((5.4, 7.6), 3) == (4, 7)
    assert window_origin((5.4, 7.6), 2) == (4, 7)
    # exact .5 centers round up before the window is laid out
    assert window_origin((5.5, 7.5), 2) == (5, 7)
    assert window_origin((5.5, 7.5), 3) == (5, 7)


def test_window_slice_and_fits():
    rs, cs = window_slice((5.0, 5.0), 4, (12, 12))
    assert (rs.start, rs.stop, cs.start, cs.stop) == (3, 7, 3, 7)
    assert window_fits((1.0, 5.0), 3, (12, 12))
    assert not window_fits((0.4, 5.0), 3, (12, 12))
    with pytest.raises(ConfigError):
        window_slice((0.4, 5.0), 3, (12, 12))
    with pytest.raises(ConfigError):
        window_origin((5.0, 5.0), 0)


# ------------------------------------------------------------- scores

def test_square_score_sums_window():
    img = np.arange(64, dtype=float).reshape(8, 8)
    # rows 3..4, cols 3..4 for s=2 at center (3.9, 3.7)
    expected = img[3:5, 3:5].sum()
    assert square_score(img, (3.9, 3.7), 2) == expected
    stack = np.stack([img, 2.0 * img])
    assert np.allclose(square_score(stack, (3.9, 3.7), 2), [expected, 2 * expected])


def test_square_score_is_scale_covariant():
    rng = np.random.default_rng(1)
    imgs = rng.normal(size=(5, 10, 10))
    a = square_score(imgs, (4.5, 4.5), 3)
    b = square_score(3.0 * imgs, (4.5, 4.5), 3)
    assert np.allclose(b, 3.0 * a)


def test_gaussian_weight_map_matches_formula():
    sigma, cutoff = 1.8, 1e-3
    w = gaussian_weight_map((14.0, 14.0), sigma, (28, 28), cutoff)
    rr = np.arange(28, dtype=float)[:, None] - 14.0
    cc = np.arange(28, dtype=float)[None, :] - 14.0
    analytic = np.exp(-(rr**2 + cc**2) / (2 * sigma**2))
    keep = analytic > cutoff
    assert np.array_equal(w > 0, keep)
    assert np.allclose(w[keep], analytic[keep])
    assert w[14, 14] == 1.0
    # reach at this sigma: 6 px along the axes, nothing at 7
    assert w[14, 20] > 0 and w[14, 21] == 0.0
    d_cut = sigma * math.sqrt(2.0 * math.log(1.0 / cutoff))
    assert 6.0 < d_cut < 7.0


def test_gaussian_weight_map_keeps_subpixel_center():
    w = gaussian_weight_map((13.35, 12.6), 2.0, (28, 28))
    r, c = np.unravel_index(np.argmax(w), w.shape)
    assert (r, c) == (13, 13)
    assert w.max() < 1.0  # unit amplitude only exactly on the center


@given(st.floats(min_value=1e-6, max_value=0.5), st.floats(min_value=1e-6, max_value=0.5))
def test_gaussian_weight_map_cutoff_monotone(c1, c2):
    lo, hi = sorted((c1, c2))
    w_lo = gaussian_weight_map((9.0, 9.0), 2.2, (19, 19), lo)
    w_hi = gaussian_weight_map((9.0, 9.0), 2.2, (19, 19), hi)
    assert np.all((w_hi > 0) <= (w_lo > 0))


def test_gaussian_score_is_weighted_sum():
    rng = np.random.default_rng(2)
    imgs = rng.normal(size=(4, 12, 12))
    w = gaussian_weight_map((6.0, 6.0), 1.5, (12, 12))
    scores = gaussian_score(imgs, w)
    assert np.allclose(scores, [(im * w).sum() for im in imgs])
    with pytest.raises(DataError):
        gaussian_score(imgs, np.ones((5, 5)))


# ---------------------------------------------------------- threshold

def test_unsupervised_threshold_equal_variance_is_midpoint_root():
    # sample moments are exactly (0, 1) and (4, 1): the densities cross at 2
    theta = unsupervised_threshold([-1.0, 1.0], [3.0, 5.0])
    assert theta == pytest.approx(2.0)


def test_unsupervised_threshold_on_sampled_gaussians():
    rng = np.random.default_rng(3)
    theta = unsupervised_threshold(rng.normal(0, 1, 4000), rng.normal(4, 1, 4000))
    assert abs(theta - 2.0) < 0.1


def test_unsupervised_threshold_unequal_variance_density_equality():
    dark = np.array([-1.0, 1.0])          # mean 0, std 1
    bright = np.array([4.0, 8.0])         # mean 6, std 2
    theta = unsupervised_threshold(dark, bright)
    assert 0.0 < theta < 6.0

    def density(x, m, s):
        return math.exp(-((x - m) ** 2) / (2 * s * s)) / (s * math.sqrt(2 * math.pi))

    assert density(theta, 0.0, 1.0) == pytest.approx(density(theta, 6.0, 2.0), abs=1e-6)


def test_unsupervised_threshold_degenerate_inputs():
    with pytest.raises(DataError):
        unsupervised_threshold([0.0], [1.0, 2.0])
    with pytest.raises(DataError):
        unsupervised_threshold([1.0, 1.0], [2.0, 3.0])
    # identical populations: fall back to the midpoint of the means
    assert unsupervised_threshold([0.0, 2.0], [0.0, 2.0]) == pytest.approx(1.0)


# ---------------------------------------------------------- neighbors

def test_neighbor_sites_small_array_uses_everyone():
    grid = SimpleNamespace(rows=3, cols=3, n_sites=9)
    assert neighbor_sites(grid, 4) == (0, 1, 2, 3, 5, 6, 7, 8)
    assert neighbor_sites(grid, 0) == (1, 2, 3, 4, 5, 6, 7, 8)


def test_neighbor_sites_large_array_uses_adjacent_ring():
    grid = SimpleNamespace(rows=4, cols=4, n_sites=16)
    assert neighbor_sites(grid, 0) == (1, 4, 5)
    assert neighbor_sites(grid, 5) == (0, 1, 2, 4, 6, 8, 9, 10)
    with pytest.raises(ConfigError):
        neighbor_sites(grid, 16)


# ----------------------------------------------------------- features

def test_site_feature_layout():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    feats = extract_site_features(img[None], (0.5, 0.5), 2)
    assert feats.shape == (5, 1)
    assert feats[:, 0].tolist() == [1.0, 2.0, 3.0, 4.0, 1.0]  # pixels row-major, bias last


def test_array_feature_layout():
    img = np.zeros((1, 8, 16))
    img[0, 3:5, 3:5] = [[1.0, 2.0], [3.0, 4.0]]
    img[0, 3:5, 11:13] = 6.0
    centers = np.array([[3.9, 3.9], [3.9, 11.9]])
    feats = extract_array_features(img, centers, 0, 2, neighbors=(1,))
    assert feats.shape == (6, 1)
    assert feats[:4, 0].tolist() == [1.0, 2.0, 3.0, 4.0]
    assert feats[4, 0] == pytest.approx(6.0)  # neighbor window mean
    assert feats[5, 0] == 1.0


def test_feature_count_scales_with_neighbors():
    imgs = np.zeros((3, 30, 30))
    centers = np.array([[8.0, 8.0], [8.0, 14.0], [8.0, 20.0]])
    feats = extract_array_features(imgs, centers, 1, 3, neighbors=(0, 2))
    assert feats.shape == (3 * 3 + 2 + 1, 3)


# ------------------------------------------------------------- models

def _cross(n=40, seed=4):
    rng = np.random.default_rng(seed)
    return rng.normal(1.0, 0.3, size=(n, 20, 20))


def test_square_model_scores_and_predictions():
    imgs = _cross()
    model = FilterModel(kind="square", site=0, center=(9.6, 10.2), s=4, theta=16.0)
    scores = model.scores(imgs)
    assert np.allclose(scores, square_score(imgs, (9.6, 10.2), 4))
    assert np.array_equal(model.predict(imgs), (scores >= 16.0).astype(np.uint8))


def test_gaussian_model_matches_weight_map():
    imgs = _cross()
    model = FilterModel(
        kind="gaussian", site=0, center=(9.5, 9.5), s=0, theta=1.0, sigma=1.7,
        image_shape=(20, 20),
    )
    w = gaussian_weight_map((9.5, 9.5), 1.7, (20, 20))
    assert np.allclose(model.scores(imgs), gaussian_score(imgs, w))


def test_mf_site_model_is_linear_in_features():
    imgs = _cross()
    rng = np.random.default_rng(5)
    weights = rng.normal(size=10)
    model = FilterModel(
        kind="mf-site", site=0, center=(9.0, 9.0), s=3, theta=0.5, weights=weights
    )
    feats = extract_site_features(imgs, (9.0, 9.0), 3)
    assert np.allclose(model.scores(imgs), weights @ feats)


def test_model_round_trip_all_kinds():
    centers = np.array([[6.0, 6.0], [6.0, 12.0]])
    models = [
        FilterModel(kind="square", site=0, center=(6.0, 6.0), s=6, theta=3.0),
        FilterModel(
            kind="gaussian", site=1, center=(6.0, 12.0), s=0, theta=1.5, sigma=2.1,
            image_shape=(20, 20),
        ),
        FilterModel(
            kind="mf-site", site=0, center=(6.0, 6.0), s=3, theta=0.4,
            weights=np.arange(10.0),
        ),
        FilterModel(
            kind="mf-array", site=1, center=(6.0, 12.0), s=3, theta=0.6,
            weights=np.arange(11.0), neighbors=(0,), all_centers=centers,
            image_shape=(20, 20),
        ),
    ]
    for model in models:
        back = FilterModel.from_dict(model.to_dict())
        assert back.kind == model.kind
        assert back.site == model.site
        assert back.s == model.s
        assert back.theta == model.theta
        imgs = _cross(10)
        assert np.allclose(back.scores(imgs), model.scores(imgs))


def test_model_dict_uses_one_based_site():
    model = FilterModel(kind="square", site=3, center=(6.0, 6.0), s=4, theta=1.0)
    assert model.to_dict()["site"] == 4


def test_classify_stack_column_order():
    imgs = _cross(12)
    models = [
        FilterModel(kind="square", site=0, center=(6.0, 6.0), s=3, theta=8.0),
        FilterModel(kind="square", site=1, center=(12.0, 12.0), s=3, theta=9.5),
    ]
    preds = classify_stack(models, imgs)
    assert preds.shape == (12, 2)
    for j, model in enumerate(models):
        assert np.array_equal(preds[:, j], model.predict(imgs))
