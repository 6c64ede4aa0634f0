import math
import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from rmdfilter import (
    TimeSeries, InclusionPath, GaussianBelief, LinearGaussianModel,
    MeasurementMixture, ForecastMixture, kalman_step, filter_series, forecast,
    forecast_average_moments, InvalidInputError, DegenerateModelError,
)
from rmdfilter.utils import stream


def joint_loglik(model: LinearGaussianModel, values, flags):
    """Log density of the included observations from the full covariance"""
    T = len(values)
    means = np.empty(T)
    state_vars = np.empty(T)
    m, P = model.init_mean, model.init_var
    for t in range(T):
        m = model.state_const + model.state_coef * m
        P = model.state_coef ** 2 * P + model.state_sd ** 2
        means[t], state_vars[t] = m, P
    cov = np.empty((T, T))
    for s in range(T):
        for t in range(s, T):
            cov[s, t] = cov[t, s] = model.state_coef ** (t - s) * state_vars[s]
    cov += model.obs_sd ** 2 * np.eye(T)
    idx = np.flatnonzero(flags)
    return multivariate_normal(means[idx], cov[np.ix_(idx, idx)]).logpdf(np.asarray(values)[idx])


def test_kalman_step_examples():
    uc = LinearGaussianModel(0., 1., 0., 1.)
    belief, ll = kalman_step(GaussianBelief(0., 1.), uc, 0.)
    assert belief.mean == 0
    assert belief.var == pytest.approx(0.5, abs=1e-15)
    assert ll == pytest.approx(norm(0, math.sqrt(2)).logpdf(0), abs=1e-12)

    uc = LinearGaussianModel(0., 1., 1., 1.)
    belief, ll = kalman_step(GaussianBelief(0., 1.), uc)
    assert belief == GaussianBelief(0., 2.)
    assert ll == 0

    ar = LinearGaussianModel(2 * (1 - 0.5), 0.5, 0.1, 1.)
    belief, ll = kalman_step(GaussianBelief(1., 0.25), ar)
    assert belief.mean == pytest.approx(1.5, abs=1e-15)
    assert belief.var == pytest.approx(0.0725, abs=1e-15)


def test_kalman_step_errors():
    model = LinearGaussianModel(0., 1., 0., 0.)
    with pytest.raises(DegenerateModelError):
        kalman_step(GaussianBelief(0., 0.), model, 1.)
    # no observation: nothing to update
    kalman_step(GaussianBelief(0., 0.), model)

    model = LinearGaussianModel(0., 1., 1., 1.)
    with pytest.raises(InvalidInputError):
        kalman_step(GaussianBelief(0., 1.), model, float('nan'))
    with pytest.raises(InvalidInputError):
        GaussianBelief(float('inf'), 1.)
    with pytest.raises(InvalidInputError):
        GaussianBelief(0., -1.)
    with pytest.raises(InvalidInputError):
        LinearGaussianModel(0., 1., -1., 1.)


def test_filter_all_missing(model_factory):
    for _ in range(10):
        model = model_factory()
        series = TimeSeries.from_values(stream(3).normal(size=12))
        out = filter_series(model, series, InclusionPath.empty(12))
        assert out.loglik == 0
        m, P = model.init_mean, model.init_var
        for b in out.filtered:
            m = model.state_const + model.state_coef * m
            P = model.state_coef ** 2 * P + model.state_sd ** 2
            assert b.mean == pytest.approx(m, rel=1e-12, abs=1e-12)
            assert b.var == pytest.approx(P, rel=1e-12)


def test_filter_single_obs(model_factory):
    model = model_factory()
    series = TimeSeries.from_values([1.7])
    out = filter_series(model, series, InclusionPath.full(1))
    pred_mean = model.state_const + model.state_coef * model.init_mean
    pred_var = model.state_coef ** 2 * model.init_var + model.state_sd ** 2 + model.obs_sd ** 2
    expected = norm(pred_mean, math.sqrt(pred_var)).logpdf(1.7)
    assert out.loglik == pytest.approx(expected, abs=1e-12)


def test_filter_loglik_matches_joint_density(model_factory):
    for i in range(20):
        model = model_factory()
        T = 5 + i % 6
        values = stream(i).normal(model.init_mean, 2., T)
        series = TimeSeries.from_values(values)
        flags = stream(i, 1).random(T) < 0.7
        flags[0] = True
        out = filter_series(model, series, InclusionPath(flags))
        assert out.loglik == pytest.approx(joint_loglik(model, values, flags), abs=1e-8)

        out = filter_series(model, series, InclusionPath.full(T))
        assert out.loglik == pytest.approx(joint_loglik(model, values, np.ones(T, bool)), abs=1e-8)

    model = LinearGaussianModel(0., 1., 0.4, 0.8, init_mean=1., init_var=2.)
    values = [1.3, -0.2, 2.5, 0.9, 1.1]
    flags = np.array([1, 0, 1, 1, 0], dtype=bool)
    out = filter_series(model, TimeSeries.from_values(values), InclusionPath(flags))
    assert out.loglik == pytest.approx(joint_loglik(model, values, flags), abs=1e-10)


def test_excluded_observations_only_propagate(model_factory):
    model = model_factory()
    values = stream(8).normal(size=10)
    flags = np.array([1, 0, 0, 1, 1, 0, 1, 0, 0, 1], dtype=bool)
    out = filter_series(model, TimeSeries.from_values(values), InclusionPath(flags))

    belief = model.initial_belief
    for t in range(10):
        obs = float(values[t]) if flags[t] else None
        belief, _ = kalman_step(belief, model, obs)
        assert out.filtered[t] == belief


def test_filter_length_mismatch():
    model = LinearGaussianModel(0., 1., 1., 1.)
    series = TimeSeries.from_values([1., 2., 3.])
    with pytest.raises(InvalidInputError):
        filter_series(model, series, InclusionPath.full(4))


def test_time_series_validation():
    with pytest.raises(InvalidInputError):
        TimeSeries(('2000Q2', '2000Q1'), np.array([1., 2.]))
    with pytest.raises(InvalidInputError):
        TimeSeries.from_values([1., float('nan')])
    with pytest.raises(InvalidInputError):
        TimeSeries.from_values([])
    s = TimeSeries.from_values([1., 2., 3., 4.], start='1999Q3')
    assert s.head(2).index == ('1999Q3', '1999Q4')
    assert s.position('2000Q1') == 2
    p = InclusionPath(np.array([1, 0, 1, 0], dtype=bool))
    assert s.subset(p).tolist() == [1., 3.]


def test_forecast_examples():
    uc = LinearGaussianModel(0., 1., 0.3, 0.7)
    belief = GaussianBelief(1.2, 0.4)
    fc = forecast(uc, belief, 1)
    assert fc.average.mean == pytest.approx(1.2)
    assert fc.average.var == pytest.approx(0.4 + 0.09 + 0.49)
    assert fc.step_vars[0] == pytest.approx(fc.average.var)

    still = LinearGaussianModel(0., 1., 0., 0.)
    fc = forecast(still, GaussianBelief(3., 0.), 4)
    assert fc.average == GaussianBelief(3., 0.)

    with pytest.raises(InvalidInputError):
        forecast(uc, belief, 0)


def test_forecast_average_monte_carlo():
    uc = LinearGaussianModel(0., 1., 1., 1.)
    fc = forecast(uc, GaussianBelief(0., 1.), 2)
    assert fc.average.var == pytest.approx(2.75)

    rng = stream(42)
    n = 1_000_000
    x0 = rng.normal(0, 1, n)
    x1 = x0 + rng.normal(0, 1, n)
    x2 = x1 + rng.normal(0, 1, n)
    avg = (x1 + rng.normal(0, 1, n) + x2 + rng.normal(0, 1, n)) / 2
    sample_var = avg.var()
    # standard error of a sample variance of Gaussian data
    se = fc.average.var * math.sqrt(2 / (n - 1))
    assert abs(sample_var - fc.average.var) < 3 * se


def test_forecast_average_moments_vectorized(model_factory):
    models = [model_factory() for _ in range(5)]
    beliefs = [GaussianBelief(m.init_mean, m.init_var) for m in models]
    for h in (1, 4, 12):
        mean, var = forecast_average_moments(
            [m.state_const for m in models], [m.state_coef for m in models],
            [m.state_sd ** 2 for m in models], [m.obs_sd ** 2 for m in models],
            [b.mean for b in beliefs], [b.var for b in beliefs], h,
        )
        for i, (model, belief) in enumerate(zip(models, beliefs)):
            fc = forecast(model, belief, h)
            assert mean[i] == pytest.approx(fc.average.mean, rel=1e-12, abs=1e-12)
            assert var[i] == pytest.approx(fc.average.var, rel=1e-12)
            assert fc.step_means.mean() == pytest.approx(fc.average.mean, rel=1e-12, abs=1e-12)


def test_forecast_mixture():
    mix = ForecastMixture.from_components([1., 1.], [0., 2.], [1., 1.])
    assert mix.mean == pytest.approx(1.)
    assert mix.var == pytest.approx(2.)
    expected = 0.5 * norm(0, 1).pdf(0.3) + 0.5 * norm(2, 1).pdf(0.3)
    assert mix.pdf(0.3) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(InvalidInputError):
        ForecastMixture(np.array([0.5, 0.4]), np.zeros(2), np.ones(2))
    with pytest.raises(InvalidInputError):
        ForecastMixture(np.array([0.5, 0.5]), np.zeros(3), np.ones(2))


def test_mixture_measurement_single_component():
    gauss = LinearGaussianModel(0.1, 0.9, 0.5, 0.8)
    mixed = LinearGaussianModel(
        0.1, 0.9, 0.5, 0.8, obs_mixture=MeasurementMixture(np.array([0.3, 0.7]), np.ones(2)),
    )
    values = stream(5).normal(size=20)
    series = TimeSeries.from_values(values)
    a = filter_series(gauss, series, InclusionPath.full(20))
    b = filter_series(mixed, series, InclusionPath.full(20))
    assert b.loglik == pytest.approx(a.loglik, abs=1e-10)
    assert np.allclose(a.means, b.means, atol=1e-12)
    assert np.allclose(a.vars, b.vars, atol=1e-12)


def test_mixture_validation():
    with pytest.raises(InvalidInputError):
        MeasurementMixture(np.array([np.nan, 0.5]), np.ones(2))
    with pytest.raises(InvalidInputError):
        MeasurementMixture(np.array([0.5, 0.5]), np.array([1., np.inf]))
    with pytest.raises(InvalidInputError):
        MeasurementMixture(np.zeros(2), np.ones(2))
    mix = MeasurementMixture(np.array([1., 3.]), np.array([2., 4.]))
    assert np.allclose(mix.weights, [0.25, 0.75])
    assert np.dot(mix.weights, mix.scales) == pytest.approx(1., abs=1e-12)


def test_mixture_forecast_is_moment_matched():
    gauss = LinearGaussianModel(0., 1., 0.3, 0.9)
    mixed = LinearGaussianModel(
        0., 1., 0.3, 0.9,
        obs_mixture=MeasurementMixture(np.array([0.5, 0.5]), np.array([0.2, 1.8])),
    )
    belief = GaussianBelief(1.7, 0.4)
    for h in (1, 4):
        a = forecast(gauss, belief, h)
        b = forecast(mixed, belief, h)
        assert np.array_equal(a.step_vars, b.step_vars)
        assert b.average == a.average
