"""Whitening, t statistics, tail probabilities, FDR, and clustering.

The t tail is checked against the arctan and algebraic closed forms it
must reproduce at one and two degrees of freedom; the FDR procedure is
checked against hand-worked step-up examples.
"""
import numpy as np
import pytest

from trialmix.inference import (
    activation_map,
    cluster_active,
    fdr_adaptive,
    t_sf,
    t_statistic,
    t_statistics_all,
    whiten,
)
from trialmix.linalg import inv_sqrt
from trialmix.simulate import SimConfig, simulate_dataset
from trialmix.em import em_fit

from helpers import make_dataset, make_dims, make_params


def test_whiten_matches_dense_kronecker():
    rng = np.random.default_rng(0)
    dims = make_dims(n_times=3, n_epochs=4, n_voxels=5, n_covariates=2)
    ds = make_dataset(dims, rng)
    params = make_params(dims, rng)
    series_w, mu_w, design_w = whiten(ds, params)
    half = inv_sqrt(np.kron(params.between_cov, params.within_cov))
    np.testing.assert_allclose(series_w, ds.series @ half.T, atol=1e-10)
    mu = np.tile(params.hrf.values, dims.n_epochs)
    np.testing.assert_allclose(mu_w, half @ mu, atol=1e-10)
    np.testing.assert_allclose(design_w, half @ ds.design, atol=1e-10)


def test_whiten_spheres_the_active_covariance():
    rng = np.random.default_rng(1)
    dims = make_dims(n_times=3, n_epochs=3, n_voxels=2000, n_covariates=0)
    params = make_params(dims, rng)
    chol = np.linalg.cholesky(np.kron(params.between_cov, params.within_cov))
    noise = rng.standard_normal((dims.n_voxels, dims.n_images)) @ chol.T
    ds = make_dataset(dims, rng)
    ds = type(ds)(
        dims=dims, series=noise, design=ds.design, coords=ds.coords,
        stimulus_times=ds.stimulus_times, tr=ds.tr,
    )
    series_w, _, _ = whiten(ds, params)
    cov = series_w.T @ series_w / dims.n_voxels
    # sample covariance of whitened noise is near identity
    assert np.max(np.abs(cov - np.eye(dims.n_images))) < 0.15


def test_t_statistics_match_least_squares_oracle():
    rng = np.random.default_rng(2)
    n, q, v = 24, 3, 6
    series_w = rng.standard_normal((v, n))
    mu_w = rng.standard_normal(n)
    design_w = rng.standard_normal((n, q))
    t, df = t_statistics_all(series_w, mu_w, design_w)
    assert df == n - q - 1
    z = np.column_stack([mu_w, design_w])
    for i in range(v):
        coef, rss, _, _ = np.linalg.lstsq(z, series_w[i], rcond=None)
        s2 = float(rss[0]) / df
        expected = coef[0] / np.sqrt(s2 / float(mu_w @ mu_w))
        assert abs(t[i] - expected) < 1e-10
    one, df_one = t_statistic(series_w[0], mu_w, design_w)
    assert df_one == df and abs(one - t[0]) < 1e-12


def test_t_statistics_exact_fit_gives_infinity():
    mu_w = np.array([1.0, 2.0, -1.0, 0.5])
    series_w = np.stack([3.0 * mu_w, -2.0 * mu_w])
    with pytest.warns(RuntimeWarning, match="exactly"):
        t, _ = t_statistics_all(series_w, mu_w, np.zeros((4, 0)))
    assert t[0] == np.inf and t[1] == -np.inf


def test_t_statistics_reject_nonpositive_df():
    with pytest.raises(ValueError, match="degrees of freedom"):
        t_statistics_all(np.zeros((1, 3)), np.ones(3), np.zeros((3, 2)))


T_GRID = np.array([
    -50.0, -20.0, -10.0, -5.0, -3.0, -2.0, -1.5, -1.0, -0.5, -0.25,
    0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0, 50.0,
])


def test_t_sf_closed_form_df1():
    # Cauchy tail: 1/2 - arctan(t)/pi
    expected = 0.5 - np.arctan(T_GRID) / np.pi
    got = t_sf(T_GRID, 1)
    np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0.0)


def test_t_sf_closed_form_df2():
    # algebraic tail: (1 - t / sqrt(2 + t^2)) / 2
    expected = 0.5 * (1.0 - T_GRID / np.sqrt(2.0 + T_GRID**2))
    got = t_sf(T_GRID, 2)
    np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0.0)


def test_t_sf_monotone_symmetric_and_bounded():
    interior = np.abs(T_GRID) <= 10.0
    for df in (1, 2, 5, 30):
        vals = np.asarray(t_sf(T_GRID, df))
        # non-increasing everywhere, strictly so away from saturation
        assert np.all(np.diff(vals) <= 0.0)
        assert np.all(np.diff(vals[interior]) < 0.0)
        np.testing.assert_allclose(
            np.asarray(t_sf(-T_GRID, df)), 1.0 - vals, atol=1e-14
        )
    assert t_sf(0.0, 7) == 0.5
    assert t_sf(np.inf, 3) == 0.0
    assert t_sf(-np.inf, 3) == 1.0
    assert isinstance(t_sf(1.3, 4), float)
    with pytest.raises(ValueError):
        t_sf(1.0, 0)


def test_fdr_hand_worked_four_values():
    # slopes increase throughout, so the null count stays at m = 4;
    # cutoffs .0125/.025/.0375/.05: k=3 fails but k=4 passes, and the
    # step-up quality rejects everything at or below p(4) = .041
    res = fdr_adaptive(np.array([0.001, 0.008, 0.039, 0.041]), q=0.05)
    assert res.m0_hat == 4
    assert res.threshold == 0.041
    assert res.n_rejected == 4
    assert np.all(res.reject)


def test_fdr_hand_worked_ten_values():
    # first slope decrease at k = 9 where S = (1-.5)/2 = .25, so
    # m0 = ceil(1/.25 + 1) = 5 and the cutoffs are .01 k; the largest
    # passing order statistic is p(6) = .006
    pvals = np.array([0.001, 0.002, 0.003, 0.004, 0.005, 0.006,
                      0.08, 0.1, 0.5, 0.95])
    res = fdr_adaptive(pvals, q=0.05)
    assert res.m0_hat == 5
    assert res.threshold == 0.006
    assert res.n_rejected == 6
    np.testing.assert_array_equal(res.reject, pvals <= 0.006)


def test_fdr_no_rejections_and_small_inputs():
    res = fdr_adaptive(np.array([0.2, 0.5, 0.9]), q=0.05)
    assert res.n_rejected == 0 and res.threshold == 0.0
    assert not res.reject.any()
    res = fdr_adaptive(np.zeros(0))
    assert res.n_rejected == 0 and res.m0_hat == 0
    res = fdr_adaptive(np.array([0.01]), q=0.05)
    assert res.n_rejected == 1


def test_fdr_rejects_ties_together():
    pvals = np.array([0.001, 0.01, 0.01, 0.9, 0.95, 0.99])
    res = fdr_adaptive(pvals, q=0.2)
    if res.threshold >= 0.01:
        assert res.reject[1] and res.reject[2]


def test_fdr_validates_inputs():
    with pytest.raises(ValueError):
        fdr_adaptive(np.array([0.1, 1.5]))
    with pytest.raises(ValueError):
        fdr_adaptive(np.array([0.1, np.nan]))
    with pytest.raises(ValueError):
        fdr_adaptive(np.array([[0.1]]))
    with pytest.raises(ValueError):
        fdr_adaptive(np.array([0.1]), q=0.0)


def _blob(origin, shape):
    pts = np.argwhere(np.ones(shape, dtype=bool))
    return pts + np.asarray(origin)


def test_clustering_sizes_and_relabeling():
    # a 7-voxel blob, a 4-voxel blob, and a lone voxel, far apart
    big = _blob((0, 0, 0), (7, 1, 1))
    small = _blob((20, 0, 0), (2, 2, 1))
    lone = np.array([[40, 40, 40]])
    coords = np.concatenate([small, big, lone])
    labels = cluster_active(coords, min_size=5)
    assert np.all(labels[4:11] == 1)
    assert np.all(labels[:4] == 0)
    assert labels[-1] == 0
    # lowering the floor keeps both blobs, ordered by size
    labels = cluster_active(coords, min_size=2)
    assert np.all(labels[4:11] == 1)
    assert np.all(labels[:4] == 2)


def test_clustering_uses_diagonal_adjacency():
    coords = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]])
    labels = cluster_active(coords, min_size=3)
    assert np.all(labels == 1)


def test_clustering_kmeans_partitions_separated_blobs():
    a = _blob((0, 0, 0), (2, 2, 2))
    b = _blob((30, 30, 30), (2, 2, 2))
    coords = np.concatenate([a, b])
    # seed chosen so Lloyd starts with one center per blob; the naive
    # seeding can split a blob from a bad start, which is why the
    # default method is connected components
    labels = cluster_active(
        coords, method="kmeans", n_clusters=2, min_size=2, seed=1
    )
    assert len(np.unique(labels[:8])) == 1
    assert len(np.unique(labels[8:])) == 1
    assert labels[0] != labels[8]
    repeat = cluster_active(
        coords, method="kmeans", n_clusters=2, min_size=2, seed=1
    )
    np.testing.assert_array_equal(repeat, labels)


def test_clustering_edge_cases():
    assert cluster_active(np.zeros((0, 3), dtype=int)).size == 0
    with pytest.raises(ValueError, match="unknown clustering method"):
        cluster_active(np.array([[0, 0, 0]]), method="spectral")
    with pytest.raises(ValueError):
        cluster_active(np.zeros((3, 2), dtype=int))


def test_activation_map_finds_planted_signal():
    ds, truth = simulate_dataset(
        SimConfig(n_voxels=400, n_times=8, n_epochs=5, n_covariates=1), seed=11
    )
    fit = em_fit(ds)
    amap, fdr = activation_map(ds, fit, q=0.05, min_cluster=1)
    active = truth.labels.astype(bool)
    # most discoveries are real and most of the signal is found
    if fdr.n_rejected:
        precision = np.mean(active[amap.reject])
        assert precision > 0.85
    assert np.mean(amap.reject[active]) > 0.5
    assert amap.pvals.shape == (400,)
    assert np.all(amap.cluster[~amap.reject] == 0)


def test_activation_map_screen_none_adjusts_everything():
    ds, _ = simulate_dataset(
        SimConfig(n_voxels=100, n_times=6, n_epochs=4, n_covariates=0), seed=5
    )
    fit = em_fit(ds)
    amap1, fdr1 = activation_map(ds, fit, screen_alpha=None)
    amap2, fdr2 = activation_map(ds, fit, screen_alpha=1e-12)
    # an impossibly strict screen rejects nothing
    assert fdr2.n_rejected == 0 or fdr2.n_rejected <= fdr1.n_rejected
