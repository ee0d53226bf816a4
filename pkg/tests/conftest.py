import numpy as np
import pytest

from latentupdate.mcmc import PosteriorSample, fit
from latentupdate.model import PatientRecord, PopulationParams, sample_latents_batch
from latentupdate.simulate import SimConfig, simulate_cohort

TOY_PARAMS = PopulationParams(
    rho=0.35,
    beta_age=0.2,
    mu=((1.2, 0.05), (1.8, 0.3)),
    tau2=((0.2, 0.02), (0.3, 0.04)),
    sigma2=0.1,
    gamma0=-1.5,
    gamma1=1.2,
)


def toy_record(pid="new", observed_class=None):
    return PatientRecord(
        id=pid,
        age_std=0.4,
        psa=((0.0, 1.4), (0.6, 1.7), (1.1, 1.6)),
        biopsies=((1.0, 0),),
        observed_class=observed_class,
    )


def synthetic_store(J=40, n=3, seed=0, params=TOY_PARAMS, jitter=0.05):
    """A posterior-shaped store with draws scattered around ``params``.

    Not an MCMC output; used where only the store layout and theta spread
    matter (weight identities, estimator cross-checks).
    """
    rng = np.random.default_rng(seed)
    def around(x, shape=()):
        return np.asarray(x) * np.exp(jitter * rng.standard_normal((J,) + shape))
    rho = np.clip(params.rho + jitter * rng.standard_normal(J), 0.05, 0.95)
    mu = params.mu_array[None] + jitter * rng.standard_normal((J, 2, 2))
    tau2 = around(params.tau2_array, (2, 2))
    eta, u = np.zeros((J, n), np.int8), np.zeros((J, n, 2))
    for i in range(n):
        eta[:, i], u[:, i] = sample_latents_batch(rho, mu, tau2, rng)
    return PosteriorSample(
        ids=tuple(f"p{i}" for i in range(n)),
        rho=rho,
        beta_age=params.beta_age + jitter * rng.standard_normal(J),
        mu=mu,
        tau2=tau2,
        sigma2=around(params.sigma2),
        gamma0=params.gamma0 + jitter * rng.standard_normal(J),
        gamma1=np.abs(params.gamma1 + jitter * rng.standard_normal(J)),
        eta=eta,
        u=u,
        chain=np.zeros(J, np.int32),
        patient_age=np.linspace(-0.5, 0.5, n),
        last_psa=np.full(n, 2.0),
        last_biopsy=np.full(n, 1.0),
    )


@pytest.fixture(scope="session")
def small_cohort():
    records, latents = simulate_cohort(SimConfig(n_patients=40, seed=3))
    return records, latents


@pytest.fixture(scope="session")
def small_fit(small_cohort):
    records, _ = small_cohort
    return fit(records[:-1], chains=2, iters=400, burn_in=200, seed=7)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
