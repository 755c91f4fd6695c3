import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ordocc.geomfeat import (
    UNEVENNESS_EPS,
    ElevationMap,
    NeighborhoodSpec,
    build_elevation_map,
    compute_features,
    export_features_csv,
    fit_plane,
    normal_slope,
    slope,
    step_height,
    unevenness,
)
from ordocc.grid import GridConfig, SemanticLabel
from ordocc.ingest import PointCloudFrame

VS = 0.2
CFG = GridConfig(origin=(0.0, 0.0, -2.0), dims=(15, 15, 20), voxel_size=VS)
NB = NeighborhoodSpec()


def lattice_xy(cfg=CFG):
    i, j = np.meshgrid(np.arange(cfg.dims[0]), np.arange(cfg.dims[1]), indexing="ij")
    return cfg.origin[0] + (i + 0.5) * cfg.voxel_size, cfg.origin[1] + (j + 0.5) * cfg.voxel_size


def plane_map(a0, a1, c=0.0, cfg=CFG):
    x, y = lattice_xy(cfg)
    return ElevationMap.from_elevations(cfg, a0 * x + a1 * y + c)


def lstsq_oracle(emap, cell, radius=0.6):
    """Independent plane fit: ordinary least squares over a brute-force disc."""
    i0, j0 = cell
    xs, ys, zs = [], [], []
    nx, ny = emap.shape
    for i in range(nx):
        for j in range(ny):
            if not emap.valid[i, j]:
                continue
            if ((i - i0) ** 2 + (j - j0) ** 2) * VS * VS <= radius * radius + 1e-12:
                x, y = emap.cell_center(i, j)
                xs.append(x), ys.append(y), zs.append(emap.elevation[i, j])
    A = np.column_stack([xs, ys, np.ones(len(xs))])
    coef, *_ = np.linalg.lstsq(A, np.array(zs), rcond=None)
    mse = np.mean((A @ coef - zs) ** 2)
    return coef, mse, len(zs)


def test_offsets_disc():
    off = NB.offsets(VS)
    assert len(off) == 29
    assert {tuple(o) for o in off} == {(a, b) for a in range(-3, 4) for b in range(-3, 4) if a * a + b * b <= 9}
    with pytest.raises(ValueError):
        NeighborhoodSpec(radius=0.1).offsets(VS)
    with pytest.raises(ValueError):
        NeighborhoodSpec(min_valid_cells=2)


def test_elevation_is_mean_of_ground_points():
    rng = np.random.default_rng(0)
    xyz = np.column_stack([rng.uniform(0, 3, 500), rng.uniform(0, 3, 500), rng.normal(0, 0.3, 500)])
    labels = rng.choice([SemanticLabel.GRASS, SemanticLabel.TREE, SemanticLabel.MUD], 500)
    emap = build_elevation_map(PointCloudFrame.from_points(xyz, labels), CFG)
    sums = {}
    for p, lab in zip(xyz, labels):
        if lab == SemanticLabel.TREE:
            continue
        key = (int(p[0] // VS), int(p[1] // VS))
        sums.setdefault(key, []).append(p[2])
    for (i, j), zs in sums.items():
        assert emap.elevation[i, j] == pytest.approx(np.mean(zs), abs=1e-12)
        assert emap.count[i, j] == len(zs)
        assert emap.bucket(i, j).shape == (3, len(zs))
    assert np.isnan(emap.elevation[~emap.valid]).all()
    assert emap.valid.sum() == len(sums)


def test_step_height_bruteforce():
    rng = np.random.default_rng(1)
    elev = rng.normal(0, 0.2, CFG.dims[:2])
    elev[rng.random(elev.shape) < 0.3] = np.nan
    emap = ElevationMap.from_elevations(CFG, elev)
    feats = compute_features(emap, NB)
    for i in range(15):
        for j in range(15):
            best = None
            if emap.valid[i, j]:
                for a in range(15):
                    for b in range(15):
                        if (a, b) != (i, j) and emap.valid[a, b] and (a - i) ** 2 + (b - j) ** 2 <= 9:
                            d = abs(elev[i, j] - elev[a, b])
                            best = d if best is None else max(best, d)
            got = step_height(emap, (i, j), NB)
            assert got == best
            if best is None:
                assert np.isnan(feats.step[i, j])
            else:
                assert feats.step[i, j] == best


def test_pillar_step():
    elev = np.zeros(CFG.dims[:2])
    elev[7, 7] = 1.0
    emap = ElevationMap.from_elevations(CFG, elev)
    feats = compute_features(emap, NB)
    assert feats.step[7, 7] == 1.0
    for i in range(15):
        for j in range(15):
            near = (i - 7) ** 2 + (j - 7) ** 2 <= 9
            assert feats.step[i, j] == (1.0 if near else 0.0)


@pytest.mark.parametrize("deg", [0, 5, 15, 30, 45, 60])
def test_plane_slope_matches_angle(deg):
    t = math.tan(math.radians(deg))
    for a0, a1 in [(t, 0.0), (0.0, t), (t / math.sqrt(2), t / math.sqrt(2))]:
        emap = plane_map(a0, a1, 0.3)
        s = slope(emap, (7, 7), NB)
        assert s == pytest.approx(math.radians(deg), abs=1e-9)
        assert unevenness(emap, (7, 7), NB) == pytest.approx(math.log(UNEVENNESS_EPS), abs=1e-6)


def test_ramp_slope_pi_over_3():
    emap = plane_map(math.sqrt(3), 0.0)
    feats = compute_features(emap, NB)
    np.testing.assert_allclose(feats.slope[3:12, 3:12], math.pi / 3, atol=1e-9)


def test_unevenness_fixture():
    # center missing, 14 point-symmetric pairs at +/-0.1 with zero mean: OLS plane z = 0, MSE = 0.01
    elev = np.full(CFG.dims[:2], np.nan)
    pairs = sorted({tuple(sorted([tuple(o), tuple(-o)])) for o in NB.offsets(VS) if o.any()})
    assert len(pairs) == 14
    for k, (p, q) in enumerate(pairs):
        z = 0.1 if k % 2 == 0 else -0.1
        for di, dj in (p, q):
            elev[7 + di, 7 + dj] = z
    emap = ElevationMap.from_elevations(CFG, elev)
    fit = fit_plane(emap, (7, 7), NB)
    assert fit.count == 28
    assert fit.residual_mse == pytest.approx(0.01, abs=1e-15)
    assert fit.a0 == pytest.approx(0, abs=1e-12) and fit.a1 == pytest.approx(0, abs=1e-12)
    assert unevenness(emap, (7, 7), NB) == pytest.approx(math.log(0.010001), abs=1e-12)
    assert math.log(0.010001) == pytest.approx(-4.6050, abs=1e-4)
    coef, mse, m = lstsq_oracle(emap, (7, 7))
    assert m == 28 and mse == pytest.approx(0.01, abs=1e-15)
    feats = compute_features(emap, NB)
    # step needs a valid center
    assert np.isnan(feats.step[7, 7])
    assert feats.unevenness[7, 7] == pytest.approx(math.log(0.010001), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_plane_fit_matches_lstsq(seed):
    rng = np.random.default_rng(seed)
    elev = rng.normal(0, 0.1, CFG.dims[:2]) + 0.2 * lattice_xy()[0]
    elev[rng.random(elev.shape) < 0.2] = np.nan
    emap = ElevationMap.from_elevations(CFG, elev)
    cell = tuple(rng.integers(0, 15, 2))
    fit = fit_plane(emap, cell, NB)
    coef, mse, m = lstsq_oracle(emap, cell)
    if fit is None:
        assert m < 3
        return
    assert fit.count == m
    np.testing.assert_allclose([fit.a0, fit.a1, fit.c], coef, atol=1e-8)
    assert fit.residual_mse == pytest.approx(mse, rel=1e-8, abs=1e-14)
    n = np.array(fit.normal)
    assert n[2] >= 0 and np.linalg.norm(n) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-5, 5))
def test_pca_normal_equals_ols_normal_on_exact_planes(a0, a1, c):
    emap = plane_map(a0, a1, c)
    fit = fit_plane(emap, (7, 7), NB)
    expected = np.array([-a0, -a1, 1.0]) / math.sqrt(a0 * a0 + a1 * a1 + 1)
    np.testing.assert_allclose(fit.normal, expected, atol=1e-9)
    assert normal_slope(fit.normal) == pytest.approx(math.atan(math.hypot(a0, a1)), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_vectorized_matches_scalar(seed):
    rng = np.random.default_rng(seed)
    elev = rng.normal(0, 0.3, CFG.dims[:2])
    elev[rng.random(elev.shape) < rng.uniform(0, 0.8)] = np.nan
    emap = ElevationMap.from_elevations(CFG, elev)
    feats = compute_features(emap, NB)
    for i in range(15):
        for j in range(15):
            h = step_height(emap, (i, j), NB)
            s = slope(emap, (i, j), NB)
            u = unevenness(emap, (i, j), NB)
            for got, want in ((feats.step[i, j], h), (feats.slope[i, j], s), (feats.unevenness[i, j], u)):
                if want is None:
                    assert np.isnan(got)
                else:
                    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.floats(-10, 10))
def test_vertical_translation_invariance(seed, dz):
    rng = np.random.default_rng(seed)
    elev = rng.normal(0, 0.3, CFG.dims[:2])
    f1 = compute_features(ElevationMap.from_elevations(CFG, elev), NB)
    f2 = compute_features(ElevationMap.from_elevations(CFG, elev + dz), NB)
    np.testing.assert_allclose(f2.step, f1.step, atol=1e-9)
    np.testing.assert_allclose(f2.slope, f1.slope, atol=1e-7)
    np.testing.assert_allclose(np.exp(f2.unevenness), np.exp(f1.unevenness), rtol=1e-6, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 3))
def test_lattice_rotation_invariance(seed, k):
    rng = np.random.default_rng(seed)
    elev = rng.normal(0, 0.3, CFG.dims[:2])
    f1 = compute_features(ElevationMap.from_elevations(CFG, elev), NB)
    f2 = compute_features(ElevationMap.from_elevations(CFG, np.rot90(elev, k)), NB)
    np.testing.assert_allclose(f2.step, np.rot90(f1.step, k), atol=1e-12)
    np.testing.assert_allclose(f2.slope, np.rot90(f1.slope, k), atol=1e-9)
    np.testing.assert_allclose(f2.unevenness, np.rot90(f1.unevenness, k), atol=1e-6)


def test_collinear_neighborhood_is_invalid():
    elev = np.full(CFG.dims[:2], np.nan)
    elev[7, 4:11] = np.linspace(0, 1, 7)
    emap = ElevationMap.from_elevations(CFG, elev)
    assert fit_plane(emap, (7, 7), NB) is None
    assert np.isnan(compute_features(emap, NB).slope[7, 7])


def test_too_few_cells_invalid():
    elev = np.full(CFG.dims[:2], np.nan)
    elev[7, 7] = 0.0
    elev[7, 8] = 0.1
    feats = compute_features(ElevationMap.from_elevations(CFG, elev), NB)
    assert not feats.valid.any()
    assert feats.step[7, 7] == pytest.approx(0.1)


def test_csv_export(tmp_path):
    emap = plane_map(0.1, 0.0)
    feats = compute_features(emap, NB)
    export_features_csv(emap, feats, tmp_path / "f.csv")
    rows = list(csv.DictReader(open(tmp_path / "f.csv")))
    assert len(rows) == 225
    assert float(rows[112]["slope"]) == pytest.approx(math.atan(0.1))
