import math

import numpy as np
import pytest
from scipy import stats

from latentupdate.errors import SamplerError, ValidationError
from latentupdate.mcmc import (
    ChainState,
    CohortArrays,
    GammaProposal,
    _psa_stats,
    draw_beta_age,
    draw_eta,
    draw_mu,
    draw_rho,
    draw_sigma2,
    draw_tau2,
    draw_u,
    fit,
    gamma_metropolis_step,
    gibbs_sweep,
    patient_risk,
    potential_scale_reduction,
    psa_residuals,
    summarize,
    update_patient_block,
    update_population_block,
)
from latentupdate.model import ModelConfig, PatientLatents, PatientRecord, marginal_class_loglik
from latentupdate.simulate import SimConfig, simulate_cohort

from conftest import TOY_PARAMS, toy_record

N_KS = 10_000
KS_MAX = 0.02


def _ks(draws, dist):
    return stats.kstest(np.asarray(draws), dist.cdf).statistic


def _rng(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# conjugate kernels against closed forms
# ---------------------------------------------------------------------------


def test_rho_kernel():
    cfg = ModelConfig(a_rho=2.0, b_rho=3.0)
    eta = np.array([1, 0, 1, 1, 0, 0, 0, 1, 0])
    rng = _rng(0)
    draws = [draw_rho(eta, cfg, rng) for _ in range(N_KS)]
    assert _ks(draws, stats.beta(2 + 4, 3 + 5)) < KS_MAX


def test_mu_kernel():
    cfg = ModelConfig(m0=(0.5, -0.1), s0=(2.0, 0.3))
    u = _rng(1).normal([1.0, 0.2], [0.5, 0.1], size=(7, 2))
    tau2 = np.array([0.25, 0.01])
    rng = _rng(2)
    draws = np.array([draw_mu(u, tau2, cfg, rng) for _ in range(N_KS)])
    for d in range(2):
        prec = 1 / cfg.s0[d] ** 2 + 7 / tau2[d]
        mean = (cfg.m0[d] / cfg.s0[d] ** 2 + u[:, d].sum() / tau2[d]) / prec
        assert _ks(draws[:, d], stats.norm(mean, 1 / math.sqrt(prec))) < KS_MAX


def test_tau2_kernel():
    cfg = ModelConfig(a_tau=1.5, b_tau=0.2)
    u = _rng(3).normal([1.0, 0.2], [0.5, 0.1], size=(9, 2))
    mu = np.array([0.9, 0.25])
    rng = _rng(4)
    draws = np.array([draw_tau2(u, mu, cfg, rng) for _ in range(N_KS)])
    for d in range(2):
        ss = ((u[:, d] - mu[d]) ** 2).sum()
        assert _ks(draws[:, d], stats.invgamma(1.5 + 4.5, scale=0.2 + ss / 2)) < KS_MAX


def test_sigma2_kernel():
    cfg = ModelConfig(a_tau=2.0, b_tau=0.5)
    resid = _rng(5).normal(0, 0.3, size=25)
    rng = _rng(6)
    draws = [draw_sigma2(resid, cfg, rng) for _ in range(N_KS)]
    assert _ks(draws, stats.invgamma(2 + 12.5, scale=0.5 + resid @ resid / 2)) < KS_MAX


def _cohort(n=6, seed=0):
    recs, lats = simulate_cohort(SimConfig(n_patients=n, seed=seed, psa_mean_count=4, frac_class_observed=0))
    return recs, lats, CohortArrays.from_records(recs)


def test_beta_age_kernel():
    cfg = ModelConfig(s_beta=1.5)
    _, lats, data = _cohort(6, 1)
    u = np.array([l.u for l in lats])
    sigma2 = 0.09
    rng = _rng(7)
    draws = [draw_beta_age(data, u, sigma2, cfg, rng) for _ in range(N_KS)]
    p = data.obs_patient
    target = data.obs_y - u[p, 0] - u[p, 1] * data.obs_t
    a = data.obs_age
    prec = 1 / 1.5**2 + a @ a / sigma2
    assert _ks(draws, stats.norm(a @ target / sigma2 / prec, 1 / math.sqrt(prec))) < KS_MAX


def _state_for(data, params, eta=None, u=None):
    n = data.n
    eta = np.zeros(n, np.int8) if eta is None else eta
    u = np.zeros((n, 2)) if u is None else u
    return ChainState.from_params(params, eta, u)


def test_u_kernel_matches_dense_gaussian_posterior():
    rec = toy_record()
    data = CohortArrays.from_records([rec])
    p = TOY_PARAMS
    state = _state_for(data, p)
    stats_ = _psa_stats(data, p.beta_age)
    eta = np.array([1], np.int8)
    rng = _rng(8)
    draws = np.array([draw_u(data, state, eta, stats_, rng)[0] for _ in range(N_KS)])
    t = rec.psa_times
    Z = np.column_stack([np.ones_like(t), t])
    Dinv = np.diag(1 / np.array(p.tau2[1]))
    cov = np.linalg.inv(Dinv + Z.T @ Z / p.sigma2)
    mean = cov @ (Dinv @ np.array(p.mu[1]) + Z.T @ (rec.psa_values - p.beta_age * rec.age_std) / p.sigma2)
    for d in range(2):
        assert _ks(draws[:, d], stats.norm(mean[d], math.sqrt(cov[d, d]))) < KS_MAX
    combo = draws @ np.array([1.0, 3.0])
    v = np.array([1.0, 3.0])
    assert _ks(combo, stats.norm(v @ mean, math.sqrt(v @ cov @ v))) < KS_MAX


def test_eta_kernel_matches_marginal_bayes_rule():
    rec = toy_record()
    data = CohortArrays.from_records([rec])
    p = TOY_PARAMS
    state = _state_for(data, p)
    stats_ = _psa_stats(data, p.beta_age)
    l0, l1 = marginal_class_loglik(rec, 0, p), marginal_class_loglik(rec, 1, p)
    prob = 1 / (1 + (1 - p.rho) / p.rho * math.exp(l0 - l1))
    rng = _rng(9)
    draws = np.array([draw_eta(data, state, stats_, rng)[0] for _ in range(N_KS)])
    assert abs(draws.mean() - prob) < 3 * math.sqrt(prob * (1 - prob) / N_KS)


def test_eta_kernel_respects_observed_class():
    data = CohortArrays.from_records([toy_record(observed_class=1), toy_record("b", observed_class=0)])
    state = _state_for(data, TOY_PARAMS)
    stats_ = _psa_stats(data, TOY_PARAMS.beta_age)
    rng = _rng(10)
    for _ in range(50):
        assert list(draw_eta(data, state, stats_, rng)) == [1, 0]


def test_uncollapsed_eta_uses_current_effects():
    rec = toy_record()
    data = CohortArrays.from_records([rec])
    p = TOY_PARAMS
    u = np.array([[1.5, 0.1]])
    state = _state_for(data, p, u=u)
    stats_ = _psa_stats(data, p.beta_age)
    lat0, lat1 = PatientLatents(0, (1.5, 0.1)), PatientLatents(1, (1.5, 0.1))
    from latentupdate.model import log_latent_density, log_obs_likelihood
    a1 = log_latent_density(lat1, p) + log_obs_likelihood(rec, lat1, p)
    a0 = log_latent_density(lat0, p) + log_obs_likelihood(rec, lat0, p)
    prob = 1 / (1 + math.exp(a0 - a1))
    rng = _rng(11)
    draws = np.array([draw_eta(data, state, stats_, rng, collapsed=False)[0] for _ in range(N_KS)])
    assert abs(draws.mean() - prob) < 3 * math.sqrt(prob * (1 - prob) / N_KS)


# ---------------------------------------------------------------------------
# Metropolis step
# ---------------------------------------------------------------------------

COUNTS = np.array([[3.0, 17.0], [9.0, 6.0]])
CFG = ModelConfig(s_gamma=2.0)


def _scipy_log_target(g):
    g0, g1 = g
    if g1 < 0:
        return -math.inf
    out = stats.norm.logpdf(g0, 0, 2.0) + stats.halfnorm.logpdf(g1, scale=2.0)
    for c in (0, 1):
        p = 1 / (1 + math.exp(-(g0 + g1 * c)))
        out += stats.binom.logpmf(COUNTS[c, 0], COUNTS[c].sum(), p)
    return out


class _ScriptedRng:
    """Feeds a fixed proposal increment and a given uniform."""

    def __init__(self, z, u):
        self.z, self.u = np.asarray(z, float), u

    def standard_normal(self, size):
        return self.z

    def random(self):
        return self.u


GRID = 20_000


def _acceptance(x, y):
    chol = np.eye(2)
    grid = (np.arange(GRID) + 0.5) / GRID
    hits = [gamma_metropolis_step(x, COUNTS, CFG, chol, _ScriptedRng(y - x, u))[1] for u in grid]
    return float(np.mean(hits))


@pytest.mark.parametrize("seed", range(6))
def test_gamma_step_detailed_balance(seed):
    rng = _rng(100 + seed)
    x = np.array([rng.normal(-1, 0.5), abs(rng.normal(1, 0.5))])
    y = x + rng.normal(0, 0.4, 2)
    y[1] = abs(y[1])
    px, py = math.exp(_scipy_log_target(x)), math.exp(_scipy_log_target(y))
    lhs = px * _acceptance(x, y)
    rhs = py * _acceptance(y, x)
    # each acceptance fraction is quantized to the uniform grid spacing
    assert abs(lhs - rhs) <= (px + py) / GRID
    assert lhs > 0


def test_gamma_step_never_leaves_support():
    rng = _rng(12)
    g = np.array([0.0, 0.01])
    chol = np.eye(2)
    for _ in range(2000):
        g, _ = gamma_metropolis_step(g, COUNTS, CFG, chol, rng)
        assert g[1] >= 0


def test_gamma_chain_stationary_mean():
    # quadrature mean of gamma1 under the frozen target
    g0 = np.linspace(-8, 6, 561)
    g1 = np.linspace(0, 10, 401)
    lt = np.array([[_scipy_log_target((a, b)) for b in g1] for a in g0])
    w = np.exp(lt - lt.max())
    mean_g1 = (w.sum(axis=0) @ g1) / w.sum()
    rng = _rng(13)
    g = np.array([-1.0, 1.0])
    chol = np.linalg.cholesky(np.diag([0.5, 0.5]))
    out = np.empty(60_000)
    for k in range(out.size):
        g, _ = gamma_metropolis_step(g, COUNTS, CFG, chol, rng)
        out[k] = g[1]
    batches = out.reshape(60, -1).mean(axis=1)
    se = batches.std(ddof=1) / math.sqrt(60)
    assert abs(out.mean() - mean_g1) < 3 * se


def test_adaptation_moves_acceptance_towards_target():
    rng = _rng(14)
    prop = GammaProposal(cov=np.diag([25.0, 25.0]))
    g = np.array([-1.0, 1.0])
    for step in range(3000):
        g, acc = gamma_metropolis_step(g, COUNTS, CFG, prop.chol(), rng)
        prop.adapt(g, acc, step)
    hits = 0
    for _ in range(3000):
        g, acc = gamma_metropolis_step(g, COUNTS, CFG, prop.chol(), rng)
        hits += acc
    assert 0.15 < hits / 3000 < 0.5


# ---------------------------------------------------------------------------
# chains and summaries
# ---------------------------------------------------------------------------


def test_psr_identical_chains_is_one():
    x = _rng(15).normal(size=500)
    assert potential_scale_reduction(np.stack([x, x]), split=False) == pytest.approx(1.0, abs=1e-9)
    halves = np.concatenate([x[:250], x[:250]])
    assert potential_scale_reduction(np.stack([halves, halves]), split=True) == pytest.approx(1.0, abs=1e-9)


def test_psr_flags_disagreeing_chains():
    rng = _rng(16)
    chains = np.stack([rng.normal(0, 1, 500), rng.normal(3, 1, 500)])
    assert potential_scale_reduction(chains) > 1.5
    assert math.isnan(potential_scale_reduction(np.ones((2, 100))))


def test_fit_is_deterministic_and_order_free(small_cohort):
    recs, _ = small_cohort
    a = fit(recs[:15], chains=2, iters=60, burn_in=20, seed=4)
    b = fit(list(reversed(recs[:15])), chains=2, iters=60, burn_in=20, seed=4)
    c = fit(recs[:15], chains=2, iters=60, burn_in=20, seed=5)
    for name in ("rho", "mu", "gamma1", "eta", "u"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.rho, c.rho)
    assert a.ids == tuple(sorted(a.ids))


def test_fit_shapes_and_meta(small_fit):
    s = small_fit
    assert s.J == 800 and s.n == 39
    assert s.eta.dtype == np.int8 and s.u.shape == (800, 39, 2)
    assert s.meta["data_digest"] and s.meta["chains"] == 2
    assert np.all(s.gamma1 >= 0) and np.all(s.sigma2 > 0) and np.all((s.rho > 0) & (s.rho < 1))
    names = [r["parameter"] for r in summarize(s)]
    assert len(names) == 13


def test_labelled_patients_keep_their_class(small_cohort, small_fit):
    recs, _ = small_cohort
    for r in recs[:-1]:
        if r.observed_class is not None:
            i = small_fit.index_of(r.id)
            assert np.all(small_fit.eta[:, i] == r.observed_class)


def test_patient_risk_variants(small_cohort, small_fit):
    recs, _ = small_cohort
    r = recs[0]
    plain = patient_risk(small_fit, r.id)
    rb = patient_risk(small_fit, r.id, r)
    assert 0 <= plain <= 1 and 0 <= rb <= 1
    assert abs(plain - rb) < 0.1
    with pytest.raises(ValidationError):
        patient_risk(small_fit, "nobody")


def test_parameter_recovery():
    recs, _ = simulate_cohort(SimConfig(n_patients=500, seed=21))
    s = fit(recs, chains=2, iters=1500, burn_in=500, seed=1)
    truth = SimConfig().params
    checks = {
        "rho": (s.rho, truth.rho),
        "beta_age": (s.beta_age, truth.beta_age),
        "sigma2": (s.sigma2, truth.sigma2),
        "gamma0": (s.gamma0, truth.gamma0),
        "gamma1": (s.gamma1, truth.gamma1),
        "mu00": (s.mu[:, 0, 0], truth.mu[0][0]),
        "mu10": (s.mu[:, 1, 0], truth.mu[1][0]),
        "mu11": (s.mu[:, 1, 1], truth.mu[1][1]),
    }
    inside = {n: bool(np.quantile(d, 0.025) <= v <= np.quantile(d, 0.975)) for n, (d, v) in checks.items()}
    assert sum(inside.values()) >= 6, inside
    assert max(r["psr"] for r in summarize(s) if r["psr"] is not None) < 1.1


def test_uncollapsed_sampler_runs():
    recs, _ = simulate_cohort(SimConfig(n_patients=60, seed=22))
    s = fit(recs, chains=1, iters=300, burn_in=100, seed=2, collapsed=False)
    assert np.all(np.isfinite(s.u))


def test_sampler_reports_non_finite_values():
    recs = [PatientRecord(id=f"x{i}", psa=((0.0, 1e200), (1.0, -1e200))) for i in range(3)]
    with pytest.raises(SamplerError) as err:
        fit(recs, chains=1, iters=5, burn_in=0, seed=0)
    assert err.value.code == "SAMPLER"


def test_fit_validation():
    with pytest.raises(ValidationError):
        fit([], seed=0)
    with pytest.raises(ValidationError):
        fit([toy_record("a"), toy_record("a")], seed=0)


def test_single_block_helpers():
    rec = toy_record()
    lat = update_patient_block(rec, PatientLatents(0, (1, 0)), TOY_PARAMS, 3)
    assert lat.eta in (0, 1)
    recs, lats = simulate_cohort(SimConfig(n_patients=10, seed=2))
    p = update_population_block(recs, lats, TOY_PARAMS, ModelConfig(), 4)
    assert p.gamma1 >= 0 and 0 < p.rho < 1
    data = CohortArrays.from_records(recs)
    resid = psa_residuals(data, 0.0, np.array([l.u for l in lats]))
    assert resid.shape == data.obs_y.shape
