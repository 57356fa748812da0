import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchmc.errors import InvalidPartition
from switchmc.localbasis import (
    LocalizationDomain,
    brownian_radius,
    build_partition,
    evaluate,
    localize,
    min_cell_probability_bound,
    quantile_bounds,
    regress,
    regress_layer,
)
from switchmc.pathgen import TimeGrid

RNG = np.random.default_rng(7)


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------


def test_brownian_radius_formula_values():
    # sqrt(t ln(8t / (pi eps^(2/d)))), hand-evaluated
    assert brownian_radius(1.0, 0.01, d=1) == pytest.approx(3.18522, abs=1e-4)
    assert brownian_radius(1.0, 0.01, d=2) == pytest.approx(2.35377, abs=1e-4)
    assert brownian_radius(0.0, 0.01) == 0.0


def test_brownian_radius_satisfies_clamp_inequality():
    # E|W_t - clamp(W_t)| <= eps within 2 standard errors, t=1, eps=0.01.
    eps, n = 0.01, 400_000
    r = brownian_radius(1.0, eps, d=1)
    w = RNG.standard_normal(n)
    excess = np.abs(w - np.clip(w, -r, r))
    se = excess.std() / np.sqrt(n)
    assert excess.mean() <= eps + 2 * se


def test_localize_identity_inside_box():
    grid = TimeGrid(T=1.0, N=4)
    dom = LocalizationDomain.brownian(grid, eps=0.01, d=2)
    pts = np.array([[0.5, -0.5], [1.0, 2.0]])
    out = localize(pts, dom, step=4)
    assert np.array_equal(out, pts)


def test_localize_clamps_to_radius():
    grid = TimeGrid(T=1.0, N=4)
    dom = LocalizationDomain.brownian(grid, eps=0.01, d=1)
    r = brownian_radius(1.0, 0.01, d=1)
    assert localize(np.array([[5.0]]), dom, step=4)[0, 0] == pytest.approx(r)
    assert localize(np.array([[-5.0]]), dom, step=4)[0, 0] == pytest.approx(-r)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2))
@settings(max_examples=50, deadline=None)
def test_clamp_is_one_lipschitz(pair):
    grid = TimeGrid(T=1.0, N=1)
    dom = LocalizationDomain.brownian(grid, eps=0.05, d=1)
    x, y = pair
    cx = localize(np.array([[x]]), dom, 1)[0, 0]
    cy = localize(np.array([[y]]), dom, 1)[0, 0]
    assert abs(cx - cy) <= abs(x - y) + 1e-15


def test_quantile_bounds_tail_mass():
    x = RNG.standard_normal((200_000, 2))
    lo, hi = quantile_bounds(x, eps=0.02)
    clipped = (x < lo) | (x > hi)
    frac = clipped.mean()  # fraction of clamped coordinate values
    assert frac <= 2 * 0.02


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------


def test_single_cell_covers_bounding_box():
    pts = RNG.standard_normal((100, 3))
    part = build_partition(pts, 1, mode="adaptive")
    assert part.n_cells == 1
    assert np.allclose(part.cells_lo[0], pts.min(axis=0))
    assert np.allclose(part.cells_hi[0], pts.max(axis=0))
    assert min_cell_probability_bound(part) == 1.0


def test_adaptive_median_split_1d():
    pts = np.array([[1.0], [2.0], [3.0], [4.0]])
    part, ids = build_partition(pts, 2, mode="adaptive", return_ids=True)
    assert part.n_cells == 2
    assert sorted(part.counts.tolist()) == [2, 2]
    assert part.node_thr[0] == pytest.approx(2.5)


def test_adaptive_cells_balanced_in_high_dim():
    pts = RNG.standard_normal((5000, 6))
    part = build_partition(pts, 64, mode="adaptive")
    assert part.n_cells == 64
    assert part.counts.max() <= 2 * part.counts.min()
    assert min_cell_probability_bound(part) >= 0.5 / 64


def test_partition_covers_and_is_disjoint():
    pts = RNG.standard_normal((2000, 2))
    part, ids = build_partition(pts, 16, mode="adaptive", return_ids=True)
    # every training point maps to exactly one cell, consistent with assign()
    assert np.array_equal(part.assign(pts), ids)
    assert np.array_equal(np.bincount(ids, minlength=part.n_cells), part.counts)
    # membership boxes: each point inside its half-open cell (top edge closed)
    lo = part.cells_lo[ids]
    hi = part.cells_hi[ids]
    top = hi >= part.box_hi - 1e-12
    inside = (pts >= lo - 1e-12) & ((pts < hi) | (top & (pts <= hi + 1e-12)))
    assert inside.all()
    assert part.delta_min <= part.delta_max


def test_uniform_mode_grid_shape_and_snap():
    pts = RNG.uniform(0, 1, size=(500, 2))
    part = build_partition(pts, 9, mode="uniform")
    assert part.grid_shape == (3, 3)
    assert part.n_cells == 9
    # far-away point snaps to the nearest cell by center distance
    far = np.array([[10.0, 10.0]])
    cid = part.assign(far)[0]
    d2 = ((far - part.centers) ** 2).sum(axis=1)
    assert cid == np.argmin(d2)


def test_partition_rejects_more_cells_than_points():
    with pytest.raises(InvalidPartition):
        build_partition(np.zeros((5, 1)), 6)


def test_degenerate_cloud_stops_splitting():
    pts = np.zeros((50, 2))
    part = build_partition(pts, 8, mode="adaptive")
    assert part.n_cells == 1  # identical points cannot be split


def test_min_cell_probability_respects_brownian_bound():
    # eps*delta^d/(4t)^d lower bound, one-sided, t=1, eps=0.01, delta >= 0.5
    eps, t, n = 0.01, 1.0, 300_000
    r = brownian_radius(t, eps, d=1)
    w = np.clip(RNG.standard_normal(n), -r, r)[:, None]
    k = int(np.floor(2 * r / 0.5))  # widest grid with edges >= 0.5
    part = build_partition(w, k, mode="uniform", box=(np.array([-r]), np.array([r])))
    assert part.delta_min >= 0.5
    assert min_cell_probability_bound(part) >= eps * 0.5 / (4 * t)


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------


def test_constant_target_reproduced_and_clamped():
    pts = RNG.standard_normal((200, 2))
    part = build_partition(pts, 8)
    est = regress(pts, np.full(200, 3.0), part, bounds=(-10, 10))
    assert np.allclose(est.evaluate(pts), 3.0)
    clamped = regress(pts, np.full(200, 3.0), part, bounds=(-1, 1))
    assert np.allclose(clamped.evaluate(pts), 1.0)


def test_indicator_target_gives_cell_means():
    pts = np.array([[0.0], [0.1], [1.0], [1.1]])
    part, ids = build_partition(pts, 2, return_ids=True)
    y = (pts[:, 0] >= 0.5).astype(float)
    est = regress(pts, y, part, bounds=(0, 1), ids=ids)
    right = ids[3]
    left = 1 - right
    assert est.coef[left] == 0.0
    assert est.coef[right] == 1.0


def test_const_coefficients_are_cell_means():
    pts = RNG.standard_normal((5000, 1))
    y = np.sin(pts[:, 0]) + RNG.standard_normal(5000)
    part, ids = build_partition(pts, 32, return_ids=True)
    est = regress(pts, y, part, bounds=(-100, 100), ids=ids)
    for k in [0, 5, 31]:
        mask = ids == k
        assert est.coef[k] == pytest.approx(y[mask].mean(), rel=1e-12)


def test_gaussian_conditional_expectation_oracle():
    # y = x + noise, E[y|x] = x, 64 adaptive cells, M = 1e5.  The analytic
    # conditional expectation is the oracle.  Piecewise-constant pays the
    # quantizer distortion of the Gaussian tails (~0.065 L2, frozen from the
    # oracle run); the local affine basis gets under 0.05.
    m = 100_000
    x = RNG.standard_normal((m, 1))
    y = x[:, 0] + RNG.standard_normal(m)
    part, ids = build_partition(x, 64, return_ids=True)
    est = regress(x, y, part, bounds=(-10, 10), ids=ids)
    err = est.fitted(ids, x) - x[:, 0]
    assert np.sqrt(np.mean(err**2)) <= 0.07
    est_lin = regress(x, y, part, bounds=(-10, 10), mode="linear", ids=ids)
    err_lin = est_lin.fitted(ids, x) - x[:, 0]
    assert np.sqrt(np.mean(err_lin**2)) <= 0.05


def test_l2_error_decreases_along_refinement():
    # (M, K) refined jointly with K ~ sqrt(M): the regression error drops.
    errs = []
    for m, k in [(2000, 8), (20_000, 24), (200_000, 72)]:
        rng = np.random.default_rng(99)
        x = rng.standard_normal((m, 1))
        y = x[:, 0] + rng.standard_normal(m)
        part, ids = build_partition(x, k, return_ids=True)
        est = regress(x, y, part, bounds=(-10, 10), ids=ids)
        errs.append(np.sqrt(np.mean((est.fitted(ids, x) - x[:, 0]) ** 2)))
    assert errs[0] > errs[1] > errs[2]


def test_linear_mode_recovers_affine_functions():
    x = RNG.uniform(-1, 1, size=(4000, 2))
    y = 1.5 + 2.0 * x[:, 0] - 0.5 * x[:, 1]
    part, ids = build_partition(x, 4, return_ids=True)
    est = regress(x, y, part, bounds=(-100, 100), mode="linear", ids=ids)
    assert np.allclose(est.fitted(ids, x), y, atol=1e-8)


def test_linear_mode_ridge_handles_rank_deficiency():
    # all points identical in one cell: design matrix rank-deficient
    x = np.concatenate([np.zeros((50, 2)), np.ones((50, 2))])
    y = np.concatenate([np.zeros(50), np.ones(50)])
    part, ids = build_partition(x, 2, return_ids=True)
    est = regress(x, y, part, bounds=(-5, 5), mode="linear", ids=ids)
    assert np.all(np.isfinite(est.coef))
    assert est.fitted(ids, x)[0] == pytest.approx(0.0, abs=1e-6)
    assert est.fitted(ids, x)[-1] == pytest.approx(1.0, abs=1e-6)


def test_regress_layer_matches_per_column_fits():
    x = RNG.standard_normal((1000, 2))
    Y = RNG.standard_normal((1000, 3))
    part, ids = build_partition(x, 8, return_ids=True)
    batch = regress_layer(x, Y, part, bounds=(-5, 5), ids=ids)
    for j in range(3):
        single = regress(x, Y[:, j], part, bounds=(-5, 5), ids=ids)
        assert np.array_equal(batch[j].coef, single.coef)


def test_empty_cells_inherit_nearest_value():
    # uniform grid over a two-cluster cloud leaves middle cells empty
    x = np.concatenate([RNG.normal(-5, 0.1, (100, 1)), RNG.normal(5, 0.1, (100, 1))])
    y = np.concatenate([np.zeros(100), np.ones(100)])
    part = build_partition(x, 8, mode="uniform")
    assert (part.counts == 0).any()
    est = regress(x, y, part, bounds=(0, 1))
    assert np.all(np.isfinite(est.coef))
    assert est.evaluate(np.array([[-4.8]])) == pytest.approx(0.0, abs=1e-12)
    assert est.evaluate(np.array([[4.8]])) == pytest.approx(1.0, abs=1e-12)


def test_evaluate_is_piecewise_constant_and_snaps():
    x = RNG.standard_normal((500, 1))
    y = RNG.standard_normal(500)
    part = build_partition(x, 8)
    est = regress(x, y, part, bounds=(-10, 10))
    # two points in the same cell share the value
    pts = np.array([[0.01], [0.011]])
    if part.assign(pts)[0] == part.assign(pts)[1]:
        v = est.evaluate(pts)
        assert v[0] == v[1]
    # outside point gets the nearest cell's value
    far = np.array([[99.0]])
    cid = part.assign(far)[0]
    assert est.evaluate(far)[0] == np.clip(est.coef[cid], -10, 10)


@given(st.floats(-1e6, 1e6))
@settings(max_examples=60, deadline=None)
def test_truncation_invariant(xval):
    x = np.linspace(-2, 2, 64)[:, None]
    y = 100.0 * np.sin(3 * x[:, 0])
    part = build_partition(x, 8)
    est = regress(x, y, part, bounds=(-1.5, 2.5))
    v = float(est.evaluate(np.array([[xval]]))[0])
    assert -1.5 <= v <= 2.5


def test_estimate_json_export():
    x = RNG.standard_normal((100, 1))
    part = build_partition(x, 4)
    est = regress(x, x[:, 0], part, bounds=(-3, 3))
    blob = json.loads(est.to_json())
    assert blob["mode"] == "const"
    assert len(blob["coef"]) == part.n_cells
    assert blob["gamma"] == [-3, 3]
