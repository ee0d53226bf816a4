import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from latentupdate.errors import ValidationError
from latentupdate.model import (
    ModelConfig,
    ObservationBlock,
    PatientLatents,
    PatientRecord,
    PopulationParams,
    class_posterior_batch,
    log_latent_density,
    log_obs_likelihood,
    log_prior,
    marginal_class_loglik,
    marginal_from_stats,
    read_records,
    sample_latents,
    sample_latents_batch,
    write_records,
)

from conftest import TOY_PARAMS, toy_record


def _direct_loglik(record, latents, p):
    t, y = record.psa_times, record.psa_values
    mean = p.beta_age * record.age_std + latents.u[0] + latents.u[1] * t
    out = stats.norm.logpdf(y, mean, math.sqrt(p.sigma2)).sum()
    prob = 1 / (1 + math.exp(-(p.gamma0 + p.gamma1 * latents.eta)))
    out += sum(stats.bernoulli.logpmf(r, prob) for _, r in record.biopsies)
    return out


def _marginal_mvn(record, eta, p):
    t = record.psa_times
    Z = np.column_stack([np.ones_like(t), t])
    cov = Z @ np.diag(p.tau2[eta]) @ Z.T + p.sigma2 * np.eye(t.size)
    mean = p.beta_age * record.age_std + Z @ np.array(p.mu[eta])
    out = stats.multivariate_normal(mean, cov).logpdf(record.psa_values)
    prob = 1 / (1 + math.exp(-(p.gamma0 + p.gamma1 * eta)))
    return out + sum(stats.bernoulli.logpmf(r, prob) for _, r in record.biopsies)


def test_obs_likelihood_matches_scipy():
    rec = toy_record()
    for lat in (PatientLatents(0, (1.1, 0.1)), PatientLatents(1, (2.0, -0.2))):
        assert log_obs_likelihood(rec, lat, TOY_PARAMS) == pytest.approx(_direct_loglik(rec, lat, TOY_PARAMS), abs=1e-12)


def test_empty_record_likelihood_is_exactly_zero():
    assert log_obs_likelihood(PatientRecord(id="e"), PatientLatents(1, (0.0, 0.0)), TOY_PARAMS) == 0.0


def test_observed_class_label_is_an_indicator():
    rec = toy_record(observed_class=1)
    assert log_obs_likelihood(rec, PatientLatents(0, (1, 0)), TOY_PARAMS) == -math.inf
    free = log_obs_likelihood(toy_record(), PatientLatents(1, (1, 0)), TOY_PARAMS)
    assert log_obs_likelihood(rec, PatientLatents(1, (1, 0)), TOY_PARAMS) == free


def test_single_psa_density_integrates_to_one():
    lat = PatientLatents(0, (1.0, 0.2))

    def dens(y):
        return math.exp(log_obs_likelihood(PatientRecord(id="a", age_std=0.3, psa=((0.5, y),)), lat, TOY_PARAMS))

    total, _ = integrate.quad(dens, -10, 10, points=[1.2])
    assert total == pytest.approx(1.0, abs=1e-9)


def test_latent_density_matches_scipy():
    lat = PatientLatents(1, (1.5, 0.1))
    expect = (
        math.log(TOY_PARAMS.rho)
        + stats.norm.logpdf(1.5, 1.8, math.sqrt(0.3))
        + stats.norm.logpdf(0.1, 0.3, math.sqrt(0.04))
    )
    assert log_latent_density(lat, TOY_PARAMS) == pytest.approx(expect, abs=1e-12)


def test_latent_density_rejects_zero_variance():
    p = PopulationParams(0.5, 0, ((0, 0), (0, 0)), ((0.0, 1), (1, 1)), 1, 0, 0)
    with pytest.raises(ValidationError):
        log_latent_density(PatientLatents(0, (0, 0)), p)


@pytest.mark.parametrize("eta", [0, 1])
def test_marginal_matches_gaussian_covariance(eta):
    rec = toy_record()
    assert marginal_class_loglik(rec, eta, TOY_PARAMS) == pytest.approx(_marginal_mvn(rec, eta, TOY_PARAMS), abs=1e-10)


def test_marginal_matches_2d_quadrature():
    rec = PatientRecord(id="q", age_std=-0.2, psa=((0.0, 1.3), (1.0, 1.5)), biopsies=((1.0, 1),))
    eta = 1
    sd = np.sqrt(TOY_PARAMS.tau2[eta])
    mu = TOY_PARAMS.mu[eta]

    def integrand(u1, u0):
        lat = PatientLatents(eta, (u0, u1))
        return math.exp(log_obs_likelihood(rec, lat, TOY_PARAMS) + log_latent_density(lat, TOY_PARAMS))

    val, _ = integrate.dblquad(
        integrand, mu[0] - 9 * sd[0], mu[0] + 9 * sd[0], mu[1] - 9 * sd[1], mu[1] + 9 * sd[1],
        epsabs=1e-13, epsrel=1e-10,
    )
    expect = math.log(val) - math.log(TOY_PARAMS.rho)
    assert marginal_class_loglik(rec, eta, TOY_PARAMS) == pytest.approx(expect, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    times=st.lists(st.floats(0, 5), min_size=1, max_size=6),
    seed=st.integers(0, 10_000),
    d0=st.floats(1e-6, 4),
    d1=st.floats(1e-6, 4),
    s2=st.floats(0.01, 2),
)
def test_woodbury_marginal_matches_dense_formula(times, seed, d0, d1, s2):
    t = np.sort(np.array(times))
    r = np.random.default_rng(seed).normal(size=t.size)
    Z = np.column_stack([np.ones_like(t), t])
    cov = Z @ np.diag([d0, d1]) @ Z.T + s2 * np.eye(t.size)
    expect = stats.multivariate_normal(np.zeros(t.size), cov, allow_singular=False).logpdf(r)
    got = marginal_from_stats(t.size, t.sum(), (t * t).sum(), r @ r, r.sum(), (t * r).sum(), d0, d1, s2)
    assert got == pytest.approx(expect, rel=1e-8, abs=1e-8)


def test_marginal_with_point_mass_effects_is_plain_likelihood():
    p = PopulationParams(0.4, 0.1, ((1.0, 0.1), (2.0, 0.2)), ((0.0, 0.0), (0.0, 0.0)), 0.1, -1.0, 1.0)
    rec = toy_record()
    for eta in (0, 1):
        direct = log_obs_likelihood(rec, PatientLatents(eta, p.mu[eta]), p)
        assert marginal_class_loglik(rec, eta, p) == pytest.approx(direct, abs=1e-12)


def test_class_posterior_is_bayes_rule():
    rec = toy_record()
    p = TOY_PARAMS
    l0, l1 = marginal_class_loglik(rec, 0, p), marginal_class_loglik(rec, 1, p)
    expect = p.rho * math.exp(l1) / (p.rho * math.exp(l1) + (1 - p.rho) * math.exp(l0))
    prob, log_marg = class_posterior_batch(
        rec, [p.rho], [p.beta_age], p.mu_array[None], p.tau2_array[None], [p.sigma2], p.gamma0, p.gamma1
    )
    assert prob[0] == pytest.approx(expect, abs=1e-14)
    assert log_marg[0] == pytest.approx(math.log(p.rho * math.exp(l1) + (1 - p.rho) * math.exp(l0)), abs=1e-12)


def test_prior_support():
    cfg = ModelConfig()
    assert math.isfinite(log_prior(TOY_PARAMS, cfg))
    bad = PopulationParams(**{**TOY_PARAMS.to_dict(), "gamma1": -0.1})
    assert log_prior(bad, cfg) == -math.inf


def test_sample_latents_point_mass_and_frequency():
    p = PopulationParams(1.0, 0, ((0, 0), (3.0, -1.0)), ((1, 1), (0.0, 0.0)), 1, 0, 1)
    lat = sample_latents(p, 0)
    assert lat.eta == 1 and lat.u == (3.0, -1.0)
    rng = np.random.default_rng(1)
    m = 100_000
    eta, u = sample_latents_batch(np.full(m, 0.3), np.tile(TOY_PARAMS.mu_array, (m, 1, 1)),
                                  np.tile(TOY_PARAMS.tau2_array, (m, 1, 1)), rng)
    se = math.sqrt(0.3 * 0.7 / m)
    assert abs(eta.mean() - 0.3) < 3 * se
    sel = u[eta == 0, 0]
    assert stats.kstest(sel, "norm", args=(1.2, math.sqrt(0.2))).statistic < 0.02


@pytest.mark.parametrize(
    "data",
    [
        {"id": "x", "psa": [{"time": 1, "value": 1}, {"time": 0, "value": 1}]},
        {"id": "x", "psa": [{"time": 0, "value": float("nan")}]},
        {"id": "x", "biopsies": [{"time": 0, "result": 2}]},
        {"id": "x", "observed_class": 3},
        {"id": "x", "colour": "red"},
        {"age_std": 1.0},
    ],
)
def test_record_validation(data):
    with pytest.raises(ValidationError):
        PatientRecord.from_dict(data)


def test_latents_and_params_validation():
    with pytest.raises(ValidationError):
        PatientLatents(2, (0, 0))
    with pytest.raises(ValidationError):
        PopulationParams(1.5, 0, ((0, 0), (0, 0)), ((1, 1), (1, 1)), 1, 0, 0)
    with pytest.raises(ValidationError):
        PopulationParams(0.5, 0, ((0, 0), (0, 0)), ((1, -1), (1, 1)), 1, 0, 0)
    with pytest.raises(ValidationError):
        PopulationParams.from_dict({"rho": 0.5})


def test_extension_checks_time_order():
    rec = toy_record()
    with pytest.raises(ValidationError):
        rec.extended(ObservationBlock(psa=((0.5, 1.0),)))
    ext = rec.extended(ObservationBlock(psa=((2.0, 1.0),), biopsies=((2.0, 1),)))
    assert len(ext.psa) == 4 and ext.biopsy_counts == (1, 1)
    assert len(rec.psa) == 3


def test_records_round_trip(tmp_path):
    recs = [toy_record("a"), toy_record("b", 1), PatientRecord(id="c")]
    write_records(tmp_path / "r.jsonl", recs)
    assert read_records(tmp_path / "r.jsonl") == recs
    assert PopulationParams.from_dict(TOY_PARAMS.to_dict()) == TOY_PARAMS
