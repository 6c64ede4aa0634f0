import itertools
import math
import numpy as np
import pytest
from scipy.stats import norm, mannwhitneyu

from rmdfilter import (
    ModelFamily, TimeSeries, InclusionPath, LinearGaussianModel,
    RmdnConfig, ThetaParticleSystem, ThetaPrior, SmoothedInclusion, kalman_step,
    instantiate,
    filter_series, rmd_n_update, predictive_density, beta_hat,
    smoothed_inclusion, flag_outliers, fit_rmd_n, ContaminationSpec,
    simulate_contaminated,
    InvalidInputError, InvalidStateError, FilterDegeneracyError,
)
from rmdfilter.rmdn import _Inner
from rmdfilter.utils import stream

VALUES = [1.8, 2.6, 9.5, 2.1]


def exact_system(model, beta, values=VALUES):
    config = RmdnConfig(n_theta=1, inner_cap=64, horizons=())
    system = ThetaParticleSystem.from_models([model], beta, config, expected_length=len(values))
    for y in values:
        rmd_n_update(system, y)
    return system


def enumerate_posterior(model, beta, values, log_F):
    """Posterior over every inclusion path by brute force"""
    T = len(values)
    paths, logw, finals = [], [], []
    for flags in itertools.product([True, False], repeat=T):
        belief = model.initial_belief
        lw = 0.
        for t, incl in enumerate(flags):
            if incl:
                belief, ll = kalman_step(belief, model, values[t])
                lw += math.log(beta) + ll - log_F[t]
            else:
                belief, _ = kalman_step(belief, model)
                lw += math.log(1 - beta)
        paths.append(flags)
        logw.append(lw)
        finals.append(belief)
    w = np.exp(np.array(logw))
    w /= w.sum()
    return np.array(paths, dtype=float), w, finals


def test_enumeration_oracle(uc_model):
    beta = 0.7
    system = exact_system(uc_model, beta)
    assert system.n_components == 16
    paths, w, finals = enumerate_posterior(uc_model, beta, VALUES, system.log_F_history)

    probs = smoothed_inclusion(system).probs
    assert np.allclose(probs, w @ paths, atol=1e-10, rtol=0)

    mean, var = system.filtered_moments()
    exp_mean = sum(wi * b.mean for wi, b in zip(w, finals))
    exp_var = sum(wi * (b.var + (b.mean - exp_mean) ** 2) for wi, b in zip(w, finals))
    assert mean == pytest.approx(exp_mean, abs=1e-10)
    assert var == pytest.approx(exp_var, abs=1e-10)

    # the outlier at t=3 is mostly excluded
    assert probs[2] < 0.05
    assert probs[0] > 0.5


def test_full_inclusion_matches_kalman(uc_model):
    system = exact_system(uc_model, 1.)
    out = filter_series(uc_model, TimeSeries.from_values(VALUES), InclusionPath.full(4))
    assert system.log_evidence == pytest.approx(out.loglik, abs=1e-10)
    mean, var = system.filtered_moments()
    assert mean == pytest.approx(out.final.mean, abs=1e-12)
    assert var == pytest.approx(out.final.var, abs=1e-12)
    assert np.array_equal(smoothed_inclusion(system).probs, np.ones(4))
    assert system.n_components == 1


def test_zero_inclusion_propagates(uc_model):
    system = exact_system(uc_model, 0.)
    assert system.log_evidence == 0
    belief = uc_model.initial_belief
    for _ in VALUES:
        belief, _ = kalman_step(belief, uc_model)
    mean, var = system.filtered_moments()
    assert mean == pytest.approx(belief.mean, abs=1e-12)
    assert var == pytest.approx(belief.var, rel=1e-12)
    assert np.array_equal(smoothed_inclusion(system).probs, np.zeros(4))


def test_log_evidence_increments(uc_model):
    beta = 0.6
    system = exact_system(uc_model, beta)
    expected = sum(math.log(beta * math.exp(lf) + 1 - beta) for lf in system.log_F_history)
    assert system.log_evidence == pytest.approx(expected, abs=1e-10)


def test_predictive_density(uc_model):
    system = ThetaParticleSystem.from_models([uc_model], 0.5)
    sd = math.sqrt(uc_model.init_var + uc_model.state_sd ** 2 + uc_model.obs_sd ** 2)
    for y in (2., 0.3, 5.):
        assert predictive_density(system, y) == pytest.approx(norm(2., sd).pdf(y), rel=1e-12)
    with pytest.raises(InvalidInputError):
        predictive_density(system, float('nan'))
    with pytest.raises(InvalidInputError):
        rmd_n_update(system, float('inf'))

    other = LinearGaussianModel(0., 1., 0.35, 0.5, init_mean=-1., init_var=1.)
    pair = ThetaParticleSystem.from_models([uc_model, other], 0.5)
    sd2 = math.sqrt(other.init_var + other.state_sd ** 2 + other.obs_sd ** 2)
    expected = 0.5 * norm(2., sd).pdf(0.5) + 0.5 * norm(-1., sd2).pdf(0.5)
    assert predictive_density(pair, 0.5) == pytest.approx(expected, rel=1e-12)


def test_beta_hat():
    assert beta_hat(0.25, 0.5, 0.5) == 0.25
    assert beta_hat(1., 0.3, 0.1) == 1.
    assert beta_hat(0., 0.3, 0.1) == 0.
    assert beta_hat(0.5, 3., 1.) == pytest.approx(0.75)
    with pytest.raises(InvalidInputError):
        beta_hat(0.5, 0., 0.)


def test_weights_normalized(uc_model):
    models = [
        LinearGaussianModel(0., 1., sd, 0.5, init_mean=2., init_var=1.)
        for sd in (0.1, 0.35, 1.)
    ]
    system = ThetaParticleSystem.from_models(models, 0.8, RmdnConfig(n_theta=3, inner_cap=8))
    for y in stream(2).normal(2., 1., 12):
        rmd_n_update(system, float(y))
        assert system.weights.sum() == pytest.approx(1., abs=1e-12)
        inner = np.exp(system.inner.logw).sum(axis=1)
        assert np.allclose(inner, 1., atol=1e-12)
        assert system.n_components <= 8
    probs = system.inclusion_probs()
    assert len(probs) == 12
    assert np.all((probs >= 0) & (probs <= 1))


def test_smoothed_inclusion_state(uc_model):
    system = ThetaParticleSystem.from_models([uc_model], 0.5, expected_length=5)
    with pytest.raises(InvalidStateError):
        smoothed_inclusion(system)
    for y in VALUES[:3]:
        rmd_n_update(system, y)
    with pytest.raises(InvalidStateError):
        smoothed_inclusion(system)
    with pytest.raises(InvalidStateError):
        system.posterior_quantiles([0.5])


def test_flag_outliers():
    inc = SmoothedInclusion(np.array([0.9, 0.001, 0.4, 0.0049, 0.005]), 0.9)
    assert flag_outliers(inc).tolist() == [1, 3]
    assert flag_outliers(inc, threshold=0.5).tolist() == [1, 2, 3, 4]


def test_events(uc_family, short_series):
    config = RmdnConfig(n_theta=32, inner_cap=8, ess_threshold=1., n_moves=1, seed=3)
    system = ThetaParticleSystem.from_prior(uc_family, 0.9, config, init_mean=2.)
    steps, resamples = [], []

    def on_step(system, t):
        steps.append(t)

    def on_resample(system, t, ess):
        resamples.append((t, ess))

    system.bind(on_step=on_step, on_resample=on_resample)
    system, inclusion, summaries = fit_rmd_n(uc_family, short_series, 0.9, config, system=system)
    assert steps == list(range(1, 9))
    assert len(resamples) == system.n_resample
    assert len(resamples) > 0
    assert len(summaries) == 8
    assert len(inclusion) == 8
    assert summaries[-1].label == short_series.index[-1]
    with pytest.raises(InvalidStateError):
        fit_rmd_n(uc_family, short_series, 0.9, config, system=system)


def test_fit_is_deterministic(uc_family, clean_uc_series):
    series, _ = clean_uc_series
    short = TimeSeries(series.index[:40], series.values[:40])
    config = RmdnConfig(n_theta=48, inner_cap=8, seed=9, horizons=(1, 4))
    a, inc_a, steps_a = fit_rmd_n(uc_family, short, 0.9, config)
    b, inc_b, steps_b = fit_rmd_n(uc_family, short, 0.9, config)
    assert a.log_evidence == b.log_evidence
    assert np.array_equal(inc_a.probs, inc_b.probs)
    assert np.array_equal(a.thetas, b.thetas)
    assert steps_a[-1].forecasts[4].mean == steps_b[-1].forecasts[4].mean
    assert math.isnan(steps_a[-1].forecasts[4].realized)
    f = steps_a[10].forecasts[4]
    assert f.realized == pytest.approx(short.values[11:15].mean())
    assert np.isfinite(f.log_density)

    q = a.posterior_quantiles([0.05, 0.5, 0.95])
    assert set(q) == set(uc_family.param_names)
    for vals in q.values():
        assert vals[0] <= vals[1] <= vals[2]


def test_fixed_lag(uc_family, short_series):
    config = RmdnConfig(n_theta=16, inner_cap=8, fixed_lag=2, seed=1)
    system, inclusion, _ = fit_rmd_n(uc_family, short_series, 0.8, config)
    assert len(inclusion) == 8
    assert system.inner.anc.shape[2] == 2
    assert np.all((inclusion.probs >= 0) & (inclusion.probs <= 1))

    config = RmdnConfig(n_theta=16, inner_cap=8, fixed_lag=2, seed=1)
    system, inclusion, _ = fit_rmd_n(uc_family, short_series, 1., config)
    assert np.allclose(inclusion.probs, 1., atol=1e-12)


def test_contaminated_observations_excluded(uc_family, contaminated_uc_series):
    series, truth = contaminated_uc_series
    bad = ~truth.inclusion.flags
    assert bad.any()
    config = RmdnConfig(n_theta=64, inner_cap=16, seed=4)
    _, inclusion, _ = fit_rmd_n(uc_family, series, 0.9, config)
    assert inclusion.probs[bad].mean() < inclusion.probs[~bad].mean() - 0.3
    flagged = set(flag_outliers(inclusion, threshold=0.1).tolist())
    assert flagged
    assert len(flagged & set(np.flatnonzero(bad).tolist())) >= len(flagged) // 2


def test_predictive_density_summation(model_factory):
    models = [model_factory() for _ in range(5)]
    system = ThetaParticleSystem.from_models(models, 0.5)
    rng = stream(6)
    mean = rng.normal(size=(5, 3))
    var = rng.uniform(0.1, 2., size=(5, 3))
    inner_w = rng.dirichlet(np.ones(3), size=5)
    outer_w = rng.dirichlet(np.ones(5))
    system.inner = _Inner(mean, var, np.log(inner_w), np.zeros((5, 3, 0), dtype=bool))
    system.log_weights = np.log(outer_w)

    y = 0.7
    expected = 0.
    for n, model in enumerate(models):
        for m in range(3):
            pm = model.state_const + model.state_coef * mean[n, m]
            pv = model.state_coef ** 2 * var[n, m] + model.state_sd ** 2 + model.obs_sd ** 2
            expected += outer_w[n] * inner_w[n, m] * norm(pm, math.sqrt(pv)).pdf(y)
    assert predictive_density(system, y) == pytest.approx(expected, rel=1e-12)


def test_point_mass_prior_evidence(uc_family):
    theta = [0.35, 0.5]
    prior = ThetaPrior.create_point_mass(uc_family, theta)
    config = RmdnConfig(n_theta=4, prior=prior, horizons=())
    system = ThetaParticleSystem.from_prior(uc_family, 1., config, init_mean=2., init_var=1.)
    assert not system.can_rejuvenate
    for y in VALUES:
        rmd_n_update(system, y)
    model = instantiate(uc_family, theta, 2., 1.)
    out = filter_series(model, TimeSeries.from_values(VALUES), InclusionPath.full(4))
    assert system.log_evidence == pytest.approx(out.loglik, abs=1e-10)
    assert np.allclose(system.weights, 0.25, atol=1e-12)


def test_zero_inclusion_keeps_prior(uc_family, short_series):
    config = RmdnConfig(n_theta=32, inner_cap=4, seed=2)
    prior_draws = ThetaParticleSystem.from_prior(uc_family, 0., config).thetas
    system, inclusion, _ = fit_rmd_n(uc_family, short_series, 0., config)
    assert system.n_resample == 0
    assert np.array_equal(system.thetas, prior_draws)
    assert np.allclose(system.weights, 1 / 32, atol=1e-12)
    assert np.array_equal(inclusion.probs, np.zeros(8))
    assert system.log_evidence == 0


@pytest.mark.parametrize('dof', [6., 400., 2000.])
def test_student_t_particle(dof):
    fam = ModelFamily.create('uc-t')
    model = instantiate(fam, [0.35, 0.5, dof], 2., 1.)
    system = ThetaParticleSystem.from_models([model], 0.7)
    gauss = LinearGaussianModel(0., 1., 0.35, 0.5, init_mean=2., init_var=1.)
    density = predictive_density(system, 2.1)
    sd = math.sqrt(gauss.init_var + gauss.state_sd ** 2 + gauss.obs_sd ** 2)
    if dof > 100:
        assert density == pytest.approx(norm(2., sd).pdf(2.1), rel=1e-2)
    for y in VALUES:
        rmd_n_update(system, y)
    assert np.isfinite(system.log_evidence)
    assert system.weights.sum() == pytest.approx(1., abs=1e-12)


def test_collapsed_particles_raise(uc_family, monkeypatch):
    config = RmdnConfig(n_theta=8, inner_cap=4, n_moves=1, seed=3, horizons=())
    system = ThetaParticleSystem.from_prior(uc_family, 0.8, config, init_mean=2.)
    for y in VALUES:
        rmd_n_update(system, y)
    # a single surviving ancestor and every move rejected
    system.log_weights = np.array([0.] + [-np.inf] * 7)
    monkeypatch.setattr(
        ThetaPrior, 'logpdf_unconstrained',
        lambda self, z: np.full(len(np.atleast_2d(z)), -np.inf),
    )
    with pytest.raises(FilterDegeneracyError):
        system.resample_move()


def test_resample_move_keeps_diversity(uc_family):
    config = RmdnConfig(n_theta=32, inner_cap=4, n_moves=2, seed=5, horizons=())
    system = ThetaParticleSystem.from_prior(uc_family, 0.8, config, init_mean=2.)
    for y in VALUES:
        rmd_n_update(system, y)
    system.log_weights = np.array([0.] + [-np.inf] * 31)
    system.resample_move()
    assert len(np.unique(system.thetas, axis=0)) > 1
    assert np.allclose(system.weights, 1 / 32, atol=1e-12)


def test_outliers_rank_lowest(uc_family, contaminated_uc_series):
    series, truth = contaminated_uc_series
    bad = ~truth.inclusion.flags
    config = RmdnConfig(n_theta=64, inner_cap=16, seed=8)
    _, inclusion, _ = fit_rmd_n(uc_family, series, 0.15, config)
    probs = inclusion.probs
    assert mannwhitneyu(probs[bad], probs[~bad], alternative='less').pvalue < 0.01


def test_posterior_bands_cover_truth(uc_family, uc_model):
    covered = 0
    for seed in range(4):
        series, _ = simulate_contaminated(uc_model, 200, ContaminationSpec(seed=100 + seed))
        config = RmdnConfig(n_theta=256, inner_cap=4, seed=seed, horizons=())
        system, _, _ = fit_rmd_n(uc_family, series, 1., config)
        q = system.posterior_quantiles([0.005, 0.995])
        for name, truth in (('state_sd', uc_model.state_sd), ('obs_sd', uc_model.obs_sd)):
            lo, hi = q[name]
            covered += int(lo <= truth <= hi)
    assert covered >= 6


def test_contamination_shrinks_obs_sd(uc_family, uc_model):
    spec = ContaminationSpec(rate=0.1, magnitude=10., seed=31)
    series, _ = simulate_contaminated(uc_model, 220, spec)
    medians = {}
    for beta in (1., 0.15):
        config = RmdnConfig(n_theta=128, inner_cap=16, seed=2, horizons=())
        system, _, _ = fit_rmd_n(uc_family, series, beta, config)
        medians[beta] = float(system.posterior_quantiles([0.5])['obs_sd'][0])
    truth = uc_model.obs_sd
    # unmodelled outliers inflate the noise; a low inclusion rate pulls it below truth
    assert medians[1.] > 0.75
    assert medians[0.15] < 0.5 * medians[1.]
    assert abs(medians[0.15] - truth) < abs(medians[1.] - truth)
