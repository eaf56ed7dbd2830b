import numpy as np
import pytest
from hypothesis import given, strategies as st

from _oracles import additive_truth, direct_si, full_factorial
from floodsens.ensemble import DemSpec
from floodsens.fixture import Probe
from floodsens.gsa import (AlignedOutputs, align_outputs, align_raster, analysis_header, argmax_codes,
                           bimodality, bootstrap_ci, histogram, probe_estimates, si_convergence,
                           sobol_first_order, sobol_maps, sobol_matrix, ua_stats)
from floodsens.raster import RasterHeader, from_array, write_raster
from floodsens.campaign import RECORDS_NAME, RunRecord, result_name

LEVELS = full_factorial()


def specs_of(levels):
    return [DemSpec(int(s), int(e), int(r)) for s, r, e in levels]


# ---------------------------------------------------------------------------
# point estimator

def test_functional_in_s_gives_full_attribution():
    y = np.array([0.3, 1.7, 0.2, 2.9])[LEVELS[:, 0] - 1]
    est = sobol_first_order(LEVELS, y)
    assert est["S"] == pytest.approx(1.0, abs=1e-12)
    assert abs(est["R"]) < 1e-12 and abs(est["E"]) < 1e-12


def test_constant_output_is_undefined():
    est = sobol_first_order(LEVELS, np.full(len(LEVELS), 2.5))
    assert est.undefined
    assert np.all(np.isnan(est.si))


def test_accepts_spec_pairs():
    idx = np.random.default_rng(0).choice(len(LEVELS), 150, replace=False)
    lv = LEVELS[idx]
    y = np.random.default_rng(1).random(150)
    a = sobol_first_order(list(zip(specs_of(lv), y)))
    b = sobol_first_order(lv, y)
    assert np.array_equal(a.si, b.si, equal_nan=True)


def test_two_factor_additive_matches_enumeration():
    a, b = 1.3, 0.7
    cells = [(s, r) for s in range(1, 5) for r in range(1, 6)]
    # brute-force enumeration of all 20 equally likely cells
    ys = [a * s + b * r for s, r in cells]
    mu = sum(ys) / 20
    var = sum((v - mu) ** 2 for v in ys) / 20
    cond_s = {s: sum(a * s + b * r for r in range(1, 6)) / 5 for s in range(1, 5)}
    truth_s = sum((cond_s[s] - mu) ** 2 for s in range(1, 5)) / 4 / var
    lv = np.array([(s, r, 0) for s, r in cells])
    est = sobol_first_order(lv, np.array(ys))
    assert est["S"] == pytest.approx(truth_s, abs=1e-12)
    assert est["S"] == pytest.approx(a * a * 1.25 / (a * a * 1.25 + b * b * 2.0), abs=1e-12)
    # E has a single level here
    assert np.isnan(est["E"])


def test_full_factorial_additive_recovery():
    a, b, c = 1.0, 0.5, 0.02
    y = a * LEVELS[:, 0] + b * LEVELS[:, 1] + c * LEVELS[:, 2]
    est = sobol_first_order(LEVELS, y)
    assert np.allclose(est.si, additive_truth(a, b, c), atol=1e-12)
    assert est.si.sum() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(20, 200))
def test_matches_direct_double_loop(seed, n):
    rng = np.random.default_rng(seed)
    # few E levels so that E is usually feasible, plus occasional singletons
    lv = np.column_stack([rng.integers(1, 5, n), rng.integers(1, 6, n), rng.integers(0, 12, n)])
    y = rng.gamma(2.0, 0.5, n) + 0.3 * lv[:, 0]
    est = sobol_first_order(lv, y).si
    ref = direct_si(lv, y)
    assert np.array_equal(np.isnan(est), np.isnan(ref))
    ok = ~np.isnan(ref)
    assert np.max(np.abs(est[ok] - ref[ok]), initial=0.0) <= 1e-12


def test_singleton_levels_are_pooled_then_insufficient():
    rng = np.random.default_rng(3)
    lv = full_factorial(4, 5, 5)
    y = rng.random(len(lv))
    lv = np.vstack([lv, [[1, 1, 77]]])  # one sample with an unseen E level
    y = np.r_[y, 0.5]
    est = sobol_first_order(lv, y)
    assert est.pooled[2] == 1 and np.isfinite(est["E"])
    many = np.vstack([lv, [[2, 2, 80 + k] for k in range(10)]])
    est = sobol_first_order(many, np.r_[y, rng.random(10)])
    assert np.isnan(est["E"]) and np.isfinite(est["S"])


@given(st.integers(0, 2**32 - 1), st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3),
       st.floats(-1e3, 1e3))
def test_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(LEVELS), 300, replace=False)
    lv = LEVELS[idx]
    y = rng.random(300) + 0.2 * lv[:, 1]
    base = sobol_first_order(lv, y).si
    moved = sobol_first_order(lv, a * y + b).si
    ok = np.isfinite(base)
    assert np.array_equal(ok, np.isfinite(moved))
    assert np.max(np.abs(base[ok] - moved[ok]), initial=0.0) <= 1e-10


@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance_is_exact(seed):
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(LEVELS), 400, replace=False)
    lv, y = LEVELS[idx], rng.random(400) + 0.1 * LEVELS[idx, 0]
    p = rng.permutation(400)
    a = sobol_first_order(lv, y).si
    b = sobol_first_order(lv[p], y[p]).si
    assert a.tobytes() == b.tobytes()
    ma = sobol_matrix(lv, y[:, None])
    mb = sobol_matrix(lv[p], y[p][:, None])
    assert ma.tobytes() == mb.tobytes()


def test_matrix_matches_per_column():
    rng = np.random.default_rng(5)
    idx = rng.choice(len(LEVELS), 500, replace=False)
    lv = LEVELS[idx]
    Y = rng.random((500, 6)) + lv[:, [0, 1, 2, 0, 1, 2]] * 0.05
    Y[:, 4] = 1.0
    M = sobol_matrix(lv, Y)
    for j in range(6):
        single = sobol_first_order(lv, Y[:, j]).si
        assert np.allclose(M[:, j], single, atol=1e-12, equal_nan=True)
    assert np.all(np.isnan(M[:, 4]))


def test_bias_correction_removes_noise_share():
    rng = np.random.default_rng(2)
    y = rng.normal(0, 1, len(LEVELS))  # no factor matters
    raw = sobol_first_order(LEVELS, y).si
    cor = sobol_first_order(LEVELS, y, bias_correct=True).si
    # E has 100 levels of 20: its raw index carries ~99/2000 of pure noise
    assert raw[2] > 0.03
    assert abs(cor[2]) < 0.02 and abs(cor[0]) < 0.01


def test_large_sample_bounds_and_sum():
    rng = np.random.default_rng(8)
    y = LEVELS[:, 0] * 0.8 + LEVELS[:, 1] * 0.4 + LEVELS[:, 2] * 0.01 + rng.normal(0, 0.05, len(LEVELS))
    est = sobol_first_order(LEVELS, y)
    assert np.all(est.si > -0.05) and np.all(est.si < 1.05)
    assert abs(est.si.sum() - 1.0) <= 0.05


# ---------------------------------------------------------------------------
# bootstrap

def test_ci_collapses_for_noise_free_functional():
    y = (LEVELS[:, 0] ** 2).astype(float)
    est = bootstrap_ci(LEVELS, y, n_boot=200, seed=1)
    assert est.ci_low[0] == pytest.approx(1.0, abs=1e-12)
    assert est.ci_high[0] == pytest.approx(1.0, abs=1e-12)


def test_bootstrap_is_deterministic_and_ordered():
    rng = np.random.default_rng(4)
    y = LEVELS[:, 0] + rng.normal(0, 1, len(LEVELS))
    a = bootstrap_ci(LEVELS, y, n_boot=300, n_sub=500, seed=9)
    b = bootstrap_ci(LEVELS, y, n_boot=300, n_sub=500, seed=9)
    assert np.array_equal(a.ci_low, b.ci_low, equal_nan=True)
    ok = np.isfinite(a.ci_low)
    assert np.all(a.ci_low[ok] <= a.ci_high[ok])


def test_bootstrap_replicates_match_the_point_estimator():
    from floodsens.gsa import _bootstrap_replicates
    rng = np.random.default_rng(6)
    lv = LEVELS[rng.choice(len(LEVELS), 300, replace=False)]
    y = rng.random(300) + 0.3 * lv[:, 0]
    idx = rng.integers(0, 300, size=(20, 300))
    reps = _bootstrap_replicates(lv, y, idx, 2, 0.05, False)
    for b in range(20):
        ref = sobol_first_order(lv[idx[b]], y[idx[b]]).si
        assert np.allclose(reps[b], ref, atol=1e-10, equal_nan=True)


def test_many_dropped_replicates_flag_unreliable():
    rng = np.random.default_rng(1)
    y = LEVELS[:, 0] + rng.normal(0, 1, len(LEVELS))
    est = bootstrap_ci(LEVELS, y, n_boot=100, n_sub=60, seed=0)
    # 60 draws over 100 E levels: almost every replicate pools out too much
    assert est.ci_unreliable[2] and est.dropped[2] > 50
    assert not est.ci_unreliable[0]


def test_ci_width_shrinks_like_inverse_sqrt():
    rng = np.random.default_rng(11)
    pool = np.vstack([LEVELS] * 2)
    y = 0.6 * pool[:, 0] + 0.4 * pool[:, 1] + rng.normal(0, 1.0, len(pool))
    widths = []
    for n_sub in (100, 400, 1600):
        est = bootstrap_ci(pool, y, n_boot=1000, n_sub=n_sub, seed=3)
        widths.append(est.ci_high[:2] - est.ci_low[:2])
    widths = np.array(widths)
    assert np.all(widths[0] > widths[1]) and np.all(widths[1] > widths[2])
    ratios = widths[:-1] / widths[1:]
    assert np.all((ratios > 1.5) & (ratios < 2.7))


def test_basic_interval_reflects_percentile():
    rng = np.random.default_rng(8)
    y = LEVELS[:, 0] + 0.02 * LEVELS[:, 2] + rng.normal(0, 1, len(LEVELS))
    b = bootstrap_ci(LEVELS, y, n_boot=200, seed=2)
    p = bootstrap_ci(LEVELS, y, n_boot=200, seed=2, interval="percentile")
    assert np.allclose(b.ci_low, 2 * b.si - p.ci_high, atol=1e-15)
    assert np.allclose(b.ci_high, 2 * b.si - p.ci_low, atol=1e-15)
    with pytest.raises(ValueError):
        bootstrap_ci(LEVELS, y, interval="bca")


def test_n_sub_bounds():
    with pytest.raises(ValueError):
        bootstrap_ci(LEVELS[:10], np.arange(10.0), n_sub=11)


# ---------------------------------------------------------------------------
# convergence of Si

def test_si_convergence_feasibility():
    y = (LEVELS[:, 0] * 1.0)
    N, si = si_convergence(LEVELS, y, seed=0, n_grid=[50, 500, 2000])
    assert np.isnan(si[0, 2])
    assert np.allclose(si[:, 0], 1.0, atol=1e-12)


def test_si_convergence_reaches_the_analytic_target():
    a, b, c = 1.0, 0.5, 0.02
    y = a * LEVELS[:, 0] + b * LEVELS[:, 1] + c * LEVELS[:, 2]
    N, si = si_convergence(LEVELS, y, seed=3)
    assert N[-1] == len(LEVELS)
    assert np.allclose(si[-1], additive_truth(a, b, c), atol=1e-12)
    assert N[0] == 10


# ---------------------------------------------------------------------------
# uncertainty analysis

def aligned_from(values, specs=None, cellsize=5.0):
    values = np.asarray(values, dtype=float)
    n, ny, nx = values.shape
    specs = specs or [DemSpec(1, i, 1) for i in range(n)]
    return AlignedOutputs(RasterHeader(nx, ny, 0.0, 0.0, cellsize), values, specs, "average")


def test_ua_two_samples():
    al = aligned_from(np.stack([np.zeros((2, 2)), np.ones((2, 2))]))
    ua = ua_stats(al)
    assert np.all(ua.mean.values == 0.5)
    assert np.all(ua.variance.values == 0.5)


def test_ua_identical_and_dry_cells():
    v = np.full((5, 2, 3), 1.2)
    v[:, 0, 0] = 0.0
    ua = ua_stats(aligned_from(v))
    assert ua.variance.values[1, 1] == 0.0
    assert not ua.mean.mask[0, 0] and ua.mean.mask[1, 1]


def test_ua_ignores_nodata_samples():
    v = np.stack([np.full((1, 1), x) for x in (1.0, np.nan, 3.0)])
    ua = ua_stats(aligned_from(v))
    assert ua.mean.values[0, 0] == 2.0 and ua.variance.values[0, 0] == 2.0


def test_mixture_is_flagged_bimodal():
    rng = np.random.default_rng(0)
    n = 200
    comp = rng.random(n) < 0.5
    y = np.where(comp, rng.normal(1, 0.01, n), rng.normal(2, 0.01, n))
    d, thr, flag = bimodality(y)
    assert flag and d > thr
    d, thr, flag = bimodality(rng.normal(1.5, 0.3, n))
    assert not flag


def test_probe_histograms():
    rng = np.random.default_rng(2)
    v = rng.uniform(0, 1, (50, 2, 2))
    ua = ua_stats(aligned_from(v), probes=[Probe("a", 2.0, 8.0)], bin_width=0.05)
    p = ua.probes[0]
    assert p.counts.sum() == 50
    assert np.allclose(np.diff(p.edges), 0.05)
    assert np.array_equal(p.values, v[:, 0, 0])


def test_histogram_edges_start_at_zero():
    edges, counts = histogram([0.0, 0.12, 0.12, 0.49], 0.05)
    assert edges[0] == 0.0 and edges[-1] >= 0.49
    assert counts.sum() == 4


# ---------------------------------------------------------------------------
# alignment

def store_with(tmp_path, rasters):
    (tmp_path / "results").mkdir(parents=True)
    with open(tmp_path / RECORDS_NAME, "w") as fh:
        for k, r in enumerate(rasters):
            spec = DemSpec(1, k, 1)
            write_raster(r, tmp_path / result_name(spec))
            fh.write(RunRecord(spec, result_name(spec), "done", 0.0, "x").to_json() + "\n")


def test_five_metre_results_pass_through(tmp_path):
    rng = np.random.default_rng(0)
    rasters = [from_array(np.round(rng.random((4, 6)), 6), cellsize=5.0, xll=100.0, yll=200.0)
               for _ in range(3)]
    store_with(tmp_path, rasters)
    al = align_outputs(tmp_path, 5.0)
    for k in range(3):
        assert np.array_equal(al.values[k], rasters[k].values)
    assert al.header == rasters[0].header.__class__(6, 4, 100.0, 200.0, 5.0, -9999.0)


def test_one_metre_block_mean(tmp_path):
    v = np.round(np.random.default_rng(1).random((20, 15)), 6)
    store_with(tmp_path, [from_array(v)])
    al = align_outputs(tmp_path, 5.0)
    expect = v.reshape(4, 5, 3, 5).mean(axis=(1, 3))
    assert np.allclose(al.values[0], expect, atol=1e-12)


def test_mixed_resolutions_match_supersampled_block_means():
    rng = np.random.default_rng(7)
    fine = rng.random((60, 60))
    target = RasterHeader(12, 12, 0.0, 0.0, 5.0)
    for r in (1, 2, 3, 4, 5):
        src = fine.reshape(60 // r, r, 60 // r, r).mean(axis=(1, 3))
        raster = from_array(src, cellsize=float(r))
        # oracle: repeat each source cell to 1 m, then take 5 x 5 block means
        up = np.repeat(np.repeat(src, r, axis=0), r, axis=1)
        expect = up.reshape(12, 5, 12, 5).mean(axis=(1, 3))
        got = align_raster(raster, target, "average")
        assert np.allclose(got, expect, atol=1e-12), r
        if 5 % r == 0:
            # source cells nest inside analysis cells, so the fine-field block mean is recovered
            assert np.allclose(got, fine.reshape(12, 5, 12, 5).mean(axis=(1, 3)), atol=1e-12)


def test_nearest_uses_the_cell_under_the_centre():
    src = from_array(np.arange(12.0).reshape(3, 4), cellsize=3.0)  # 9 m x 12 m
    target = RasterHeader(2, 1, 0.0, 4.0, 5.0)  # centres at (2.5, 6.5) and (7.5, 6.5)
    got = align_raster(src, target, "nearest")
    assert got.tolist() == [[0.0, 2.0]]


def test_nodata_spreads_to_overlapping_cells():
    v = np.ones((10, 10))
    v[0, 0] = -9999.0
    r = from_array(v, nodata=-9999.0)
    got = align_raster(r, RasterHeader(2, 2, 0.0, 0.0, 5.0), "average")
    assert np.isnan(got[0, 0]) and np.all(got.ravel()[1:] == 1.0)


def test_extent_mismatch(tmp_path):
    store_with(tmp_path, [from_array(np.zeros((10, 10))), from_array(np.zeros((10, 10)), xll=3.0)])
    with pytest.raises(ValueError, match="extent mismatch"):
        align_outputs(tmp_path, 5.0)


def test_common_grid_uses_smallest_extent():
    a = RasterHeader(10, 10, 0.0, 0.0, 1.0)
    b = RasterHeader(3, 3, 0.0, 1.0, 3.0)  # 9 m x 9 m with the same top-left corner
    h = analysis_header([a, b], 2.0)
    assert (h.ncols, h.nrows, h.xll, h.ytop) == (4, 4, 0.0, 10.0)


# ---------------------------------------------------------------------------
# maps

def campaign_design():
    lv = full_factorial(4, 5, 5)
    return lv, specs_of(lv)


def test_argmax_splits_west_s_east_r():
    lv, specs = campaign_design()
    n = len(lv)
    v = np.empty((n, 2, 10))
    v[:, :, :5] = (0.5 * lv[:, 0])[:, None, None] + np.linspace(0, 1, 5)
    v[:, :, 5:] = (0.3 * lv[:, 1])[:, None, None] + np.linspace(0, 1, 5)
    maps = sobol_maps(aligned_from(v, specs), exclude_dry=False)
    codes = maps.argmax.values
    assert np.all(codes[:, :5] == 1) and np.all(codes[:, 5:] == 2)
    assert maps.area_fraction == {"S": 0.5, "R": 0.5, "E": 0.0}
    scaled = sobol_maps(aligned_from(-3.0 * v + 7.0, specs), exclude_dry=False)
    assert np.array_equal(scaled.argmax.values, codes)


def test_building_interior_has_full_s_attribution():
    lv, specs = campaign_design()
    rng = np.random.default_rng(0)
    v = rng.random((len(lv), 3, 3))
    v[:, 1, 1] = np.where(lv[:, 0] >= 2, 0.0, 0.8)  # flooded only while the building is absent
    maps = sobol_maps(aligned_from(v, specs))
    assert maps.si["S"].values[1, 1] == pytest.approx(1.0, abs=1e-12)


def test_constant_outputs_give_all_nodata():
    lv, specs = campaign_design()
    maps = sobol_maps(aligned_from(np.full((len(lv), 3, 4), 0.7), specs))
    for f in ("S", "R", "E"):
        assert not maps.si[f].mask.any()
    assert not maps.argmax.mask.any()
    assert maps.area_fraction == {"S": 0.0, "R": 0.0, "E": 0.0}


def test_dry_cells_and_footprints_are_excluded():
    lv, specs = campaign_design()
    rng = np.random.default_rng(0)
    v = rng.random((len(lv), 2, 2)) + lv[:, 0, None, None]
    v[:, 0, 0] = 0.0
    fp = np.zeros((2, 2), bool)
    fp[1, 1] = True
    maps = sobol_maps(aligned_from(v, specs), footprint=fp)
    assert not maps.argmax.mask[0, 0] and not maps.argmax.mask[1, 1]
    assert maps.argmax.mask[0, 1]


def test_cells_with_missing_samples_use_the_valid_ones():
    lv, specs = campaign_design()
    v = np.tile((0.5 * lv[:, 0])[:, None, None], (1, 1, 2)).astype(float)
    v[3, 0, 1] = np.nan
    maps = sobol_maps(aligned_from(v, specs), exclude_dry=False)
    assert maps.si["S"].values[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_minimum_sample_count():
    with pytest.raises(ValueError, match="at least 100"):
        sobol_maps(aligned_from(np.random.default_rng(0).random((20, 2, 2))))


def test_argmax_codes_zero_when_all_nan():
    si = np.array([[np.nan, 0.2], [np.nan, 0.5], [np.nan, 0.1]])
    assert argmax_codes(si).tolist() == [0, 2]


def test_probe_estimates():
    lv, specs = campaign_design()
    rng = np.random.default_rng(1)
    v = (lv[:, 0] * 0.4)[:, None, None] + rng.normal(0, 0.1, (len(lv), 2, 2))
    out = probe_estimates(aligned_from(v, specs), [Probe("p", 7.0, 2.0)], n_boot=100, seed=0)
    (probe, est), = out
    assert probe.id == "p"
    assert est.ci_low[0] <= est["S"] <= est.ci_high[0]
