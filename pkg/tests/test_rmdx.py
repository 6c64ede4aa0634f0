import math
import numpy as np
import pytest

from rmdfilter import (
    TimeSeries, InclusionPath, PathSampler, sample_paths,
    enumerate_paths, rmd_x_estimate, filter_series, fit_theta, forecast,
    EmptySubsetError, UnderIdentifiedError, InvalidInputError,
)


def test_sampler_sizes():
    assert PathSampler(T=5, beta=0.5, n_paths=1, seed=0).size == 3
    assert PathSampler(T=10, beta=0.25, n_paths=1, seed=0).size == 3
    assert PathSampler(T=221, beta=0.9, n_paths=1, seed=0).size == 199
    assert PathSampler(T=8, beta=1., n_paths=1, seed=0).size == 8
    with pytest.raises(EmptySubsetError):
        PathSampler(T=8, beta=0., n_paths=1, seed=0).size
    with pytest.raises(InvalidInputError):
        PathSampler(T=8, beta=1.5, n_paths=1, seed=0).size


def test_sample_paths():
    sampler = PathSampler(T=40, beta=0.7, n_paths=50, seed=3)
    paths = sample_paths(sampler)
    assert len(paths) == 50
    assert all(p.count == 28 for p in paths)
    assert len(set(paths)) > 40
    assert paths == sample_paths(PathSampler(T=40, beta=0.7, n_paths=50, seed=3))
    assert paths != sample_paths(PathSampler(T=40, beta=0.7, n_paths=50, seed=4))

    full = sample_paths(PathSampler(T=6, beta=1., n_paths=3, seed=0))
    assert all(p == InclusionPath.full(6) for p in full)

    with pytest.raises(UnderIdentifiedError):
        sample_paths(PathSampler(T=8, beta=0.25, n_paths=3, seed=0, floor=3))


def test_enumerated_oracle(uc_family, uc_model, short_series):
    paths = enumerate_paths(8, 0.5)
    assert len(paths) == 70
    assert len(set(paths)) == 70

    res = rmd_x_estimate(uc_family, short_series, 0.5, model=uc_model, paths=paths, h_max=4)
    outs = [filter_series(uc_model, short_series, p) for p in paths]
    expected = np.mean([o.means for o in outs], axis=0)
    assert np.allclose(res.x_bar, expected, atol=1e-10, rtol=0)
    assert res.theta_bar is None
    assert res.n_paths == 70
    assert res.n_failed == 0

    fcs = [forecast(uc_model, o.final, 4) for o in outs]
    expected_fc = np.mean([f.step_means for f in fcs], axis=0)
    assert np.allclose(res.forecast_bar, expected_fc, atol=1e-10, rtol=0)
    avg4 = np.mean([f.average.mean for f in fcs])
    assert res.average_forecast(4) == pytest.approx(avg4, abs=1e-10)


def test_monte_carlo_matches_enumeration(uc_family, uc_model, short_series):
    exact = rmd_x_estimate(
        uc_family, short_series, 0.5, model=uc_model, paths=enumerate_paths(8, 0.5),
        keep_per_path=True,
    )
    per_path = np.stack([p.filtered_means for p in exact.per_path])
    spread = per_path.std(axis=0)

    n = 4000
    approx = rmd_x_estimate(uc_family, short_series, 0.5, n_paths=n, seed=12, model=uc_model)
    assert approx.n_paths == n
    se = spread / math.sqrt(n)
    assert np.all(np.abs(approx.x_bar - exact.x_bar) <= 4 * se + 1e-12)


def test_full_inclusion_equals_mle(uc_family, clean_uc_series):
    series, _ = clean_uc_series
    full = InclusionPath.full(len(series))
    res = rmd_x_estimate(uc_family, series, 1., n_paths=50, seed=1)
    fit = fit_theta(uc_family, series, full)
    assert res.n_paths == 1
    assert np.array_equal(res.theta_bar, fit.theta)
    out = filter_series(fit.model, series, full)
    assert np.array_equal(res.x_bar, out.means)
    assert res.forecast_mixture.var == pytest.approx(
        forecast(fit.model, out.final, 1).average.var, rel=1e-12,
    )


def test_estimated_paths(uc_family, clean_uc_series):
    series, _ = clean_uc_series
    res = rmd_x_estimate(uc_family, series, 0.8, n_paths=6, seed=2, horizons=(1, 4))
    assert res.n_success >= 1
    assert res.theta_bar.shape == (2,)
    assert np.all(res.theta_bar > 0)
    assert set(res.average_mixtures) == {1, 4}
    assert len(res.x_bar) == len(series)
    assert np.all(res.x_var >= 0)


def test_thread_count_does_not_matter(uc_family, uc_model, clean_uc_series):
    series, _ = clean_uc_series
    a = rmd_x_estimate(uc_family, series, 0.7, n_paths=40, seed=5, model=uc_model, threads=1)
    b = rmd_x_estimate(uc_family, series, 0.7, n_paths=40, seed=5, model=uc_model, threads=4)
    assert np.array_equal(a.x_bar, b.x_bar)
    assert np.array_equal(a.forecast_bar, b.forecast_bar)

    short = TimeSeries(series.index[:40], series.values[:40])
    a = rmd_x_estimate(uc_family, short, 0.8, n_paths=4, seed=5, threads=1)
    b = rmd_x_estimate(uc_family, short, 0.8, n_paths=4, seed=5, threads=3)
    assert np.array_equal(a.theta_bar, b.theta_bar)


def test_invalid_beta(uc_family, short_series):
    with pytest.raises(EmptySubsetError):
        rmd_x_estimate(uc_family, short_series, 0.)
    with pytest.raises(UnderIdentifiedError):
        rmd_x_estimate(uc_family, short_series, 0.25)
    with pytest.raises(InvalidInputError):
        rmd_x_estimate(uc_family, short_series, 0.5, theta_scale='median')


def test_theta_scales(uc_family, clean_uc_series):
    series, _ = clean_uc_series
    kw = dict(n_paths=5, seed=8, keep_per_path=True)
    log = rmd_x_estimate(uc_family, series, 0.8, theta_scale='log', **kw)
    nat = rmd_x_estimate(uc_family, series, 0.8, theta_scale='natural', **kw)
    thetas = np.stack([p.theta for p in nat.per_path])
    assert np.allclose(nat.theta_bar, thetas.mean(axis=0))
    assert np.allclose(log.theta_bar, np.exp(np.log(thetas).mean(axis=0)))
    # geometric mean never exceeds the arithmetic mean
    assert np.all(log.theta_bar <= nat.theta_bar + 1e-12)


def test_sampler_is_uniform():
    n = 1000
    paths = sample_paths(PathSampler(T=10, beta=0.5, n_paths=n, seed=21))
    assert all(p.count == 5 for p in paths)
    freq = np.mean([p.flags for p in paths], axis=0)
    se = math.sqrt(0.25 / n)
    assert np.all(np.abs(freq - 0.5) <= 4 * se)


def test_short_series_floor(uc_family):
    series = TimeSeries.from_values([1., 2., 3.])
    with pytest.raises(UnderIdentifiedError):
        rmd_x_estimate(uc_family, series, 0.15)
