"""Cross-check estimators for a new patient's class probability.

* rejection sampling on the unstandardized importance weights;
* the conditional-posterior estimator, averaging ``P(eta=1 | y, theta_j)``
  over the stored draws (random effects integrated analytically);
* a Rao-Blackwellized importance sampler with per-draw weights
  ``p(y | theta_j)`` and no proposal noise;
* a brute-force tensor-grid quadrature oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateWeightsError, PrecisionError, ValidationError
from .importance import (
    ProposalCache,
    WeightedProposalSet,
    effective_sample_size,
    normalize_log_weights,
    weigh_new_patient,
)
from .mcmc import PosteriorSample
from .model import (
    LOG_2PI,
    POINT_MASS_VAR,
    PatientRecord,
    PopulationParams,
    biopsy_loglik_batch,
    class_label_loglik,
    class_posterior_batch,
)


@dataclass(eq=False)
class RejectionResult:
    accepted: np.ndarray  # positions within the proposal set
    draw_index: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    risk: float
    acceptance_rate: float
    expected_rate: float  # mean weight / max weight
    proposals: int

    @property
    def n_accepted(self) -> int:
        return self.accepted.shape[0]

    @property
    def risk_se(self) -> float:
        return math.sqrt(self.risk * (1 - self.risk) / self.n_accepted)

    @property
    def rate_se(self) -> float:
        p = self.expected_rate
        return math.sqrt(p * (1 - p) / self.proposals)


def rejection_from_weights(wset: WeightedProposalSet, seed: int) -> RejectionResult:
    """Accept proposal ``m`` with probability ``w_m / max(w)``."""
    lw = wset.log_weights
    top = lw.max() if lw.size else -np.inf
    if not np.isfinite(top):
        raise DegenerateWeightsError("rejection envelope is zero")
    ratio = np.exp(lw - top)
    rng = np.random.default_rng(seed)
    keep = np.flatnonzero(rng.random(lw.size) < ratio)
    eta = wset.eta[keep]
    return RejectionResult(
        accepted=keep,
        draw_index=wset.draw_index[keep],
        eta=eta,
        u=wset.u[keep],
        risk=float(eta.mean()),
        acceptance_rate=keep.size / lw.size,
        expected_rate=float(ratio.mean()),
        proposals=int(lw.size),
    )


def rejection_sample(
    cache: ProposalCache, store: PosteriorSample, record: PatientRecord, seed: int, m: Optional[int] = None
) -> RejectionResult:
    """Rejection sampling over the first ``m`` cached candidates (all by default).

    The envelope is the largest likelihood in the candidate set, so the
    best candidate is always accepted.
    """
    try:
        wset = weigh_new_patient(cache, store, record, m)
    except DegenerateWeightsError:
        raise DegenerateWeightsError("rejection envelope is zero") from None
    return rejection_from_weights(wset, seed)


def _draw_subset(store: PosteriorSample, draws):
    idx = np.arange(store.J) if draws is None else np.asarray(draws, dtype=np.int64)
    if idx.size == 0:
        raise ValidationError("no draws selected")
    return idx


def _class_probs(store: PosteriorSample, record: PatientRecord, draws=None):
    idx = _draw_subset(store, draws)
    return class_posterior_batch(
        record,
        store.rho[idx],
        store.beta_age[idx],
        store.mu[idx],
        store.tau2[idx],
        store.sigma2[idx],
        store.gamma0[idx],
        store.gamma1[idx],
    )


def conditional_posterior_estimate(store: PosteriorSample, record: PatientRecord, draws=None) -> float:
    """``mean_j P(eta = 1 | y, theta_j)`` under the stored (unreweighted) draws."""
    prob, _ = _class_probs(store, record, draws)
    return float(prob.mean())


def rao_blackwell_is(store: PosteriorSample, record: PatientRecord, draws=None):
    """``(estimate, ess)`` with draw weights ``p(y | theta_j)``."""
    prob, log_marg = _class_probs(store, record, draws)
    w = normalize_log_weights(log_marg)
    return float(np.dot(w, prob)), effective_sample_size(w)


def rao_blackwell_is_estimate(store: PosteriorSample, record: PatientRecord, draws=None) -> float:
    """Same target as new-patient IS, with candidates integrated out exactly."""
    return rao_blackwell_is(store, record, draws)[0]


# ---------------------------------------------------------------------------
# quadrature oracle
# ---------------------------------------------------------------------------


def _theta_arrays(source: Union[PosteriorSample, PopulationParams], draws):
    if isinstance(source, PopulationParams):
        return {
            "rho": np.array([source.rho]),
            "beta_age": np.array([source.beta_age]),
            "mu": source.mu_array[None],
            "tau2": source.tau2_array[None],
            "sigma2": np.array([source.sigma2]),
            "gamma0": np.array([source.gamma0]),
            "gamma1": np.array([source.gamma1]),
        }
    idx = _draw_subset(source, draws)
    return {k: np.asarray(v)[idx] for k, v in source.theta_arrays().items()}


def _axis(mean, var, n_grid, width):
    """Trapezoid nodes and log-weights for one random-effect component."""
    if var < POINT_MASS_VAR:
        return np.array([mean]), np.array([0.0])
    sd = math.sqrt(var)
    nodes = np.linspace(mean - width * sd, mean + width * sd, n_grid)
    h = nodes[1] - nodes[0]
    w = np.full(n_grid, h)
    w[0] = w[-1] = h / 2
    log_prior = -0.5 * (LOG_2PI + math.log(var) + (nodes - mean) ** 2 / var)
    return nodes, np.log(w) + log_prior


def _class_integral(record, r, age, mu, var, beta_age, sigma2, n_grid, width):
    """log of the grid-integrated psa likelihood times the random-effect density."""
    u0, lw0 = _axis(mu[0], var[0], n_grid, width)
    u1, lw1 = _axis(mu[1], var[1], n_grid, width)
    t = record.psa_times
    if t.size == 0:
        ll = np.zeros((u0.size, u1.size))
    else:
        resid = (r - beta_age * age)[None, None, :] - u0[:, None, None] - u1[None, :, None] * t[None, None, :]
        ll = -0.5 * (t.size * (LOG_2PI + math.log(sigma2)) + (resid * resid).sum(axis=-1) / sigma2)
    return float(logsumexp(ll + lw0[:, None] + lw1[None, :]))


def _grid_pass(record: PatientRecord, theta: dict, n_grid: int, width: float, reweight: bool) -> float:
    n_pos, n_neg = record.biopsy_counts
    r = record.psa_values
    probs, log_margs = [], []
    for j in range(theta["rho"].shape[0]):
        terms = []
        for c in (0, 1):
            prior = theta["rho"][j] if c == 1 else 1.0 - theta["rho"][j]
            if prior <= 0:
                terms.append(-math.inf)
                continue
            value = math.log(prior) + _class_integral(
                record, r, record.age_std, theta["mu"][j, c], theta["tau2"][j, c],
                theta["beta_age"][j], theta["sigma2"][j], n_grid, width,
            )
            value += float(biopsy_loglik_batch(n_pos, n_neg, c, theta["gamma0"][j], theta["gamma1"][j]))
            value += float(class_label_loglik(record.observed_class, c))
            terms.append(value)
        lm = float(np.logaddexp(terms[0], terms[1]))
        if not np.isfinite(lm):
            raise DegenerateWeightsError(f"record has zero probability under draw {j}")
        probs.append(math.exp(terms[1] - lm))
        log_margs.append(lm)
    probs = np.array(probs)
    if reweight:
        return float(np.dot(normalize_log_weights(np.array(log_margs)), probs))
    return float(probs.mean())


def grid_oracle(
    record: PatientRecord,
    source: Union[PosteriorSample, PopulationParams],
    n_grid: int = 161,
    width: float = 8.0,
    draws=None,
    reweight: bool = False,
    tol: float = 1e-8,
) -> float:
    """Class probability by tensor-grid integration over the random effects.

    The grid spans ``+/- width`` prior sd in each component.  Without
    ``reweight`` the per-draw probabilities are averaged plainly (the
    conditional-posterior target); with it, draws are weighted by their
    quadrature marginal likelihood (the importance-sampling target).  The
    value is recomputed on a grid with halved spacing and
    :class:`PrecisionError` is raised if the two differ by more than ``tol``.
    """
    if n_grid < 3:
        raise ValidationError("n_grid must be >= 3")
    if width < 8:
        raise ValidationError("grid must cover at least 8 prior sd")
    theta = _theta_arrays(source, draws)
    if record.psa_times.size and not np.all(theta["sigma2"] > 0):
        raise ValidationError("sigma2 must be positive when psa values are present")
    coarse = _grid_pass(record, theta, n_grid, width, reweight)
    fine = _grid_pass(record, theta, 2 * n_grid - 1, width, reweight)
    if abs(coarse - fine) > tol:
        raise PrecisionError(f"grid refinement changed the estimate by {abs(coarse - fine):.3g} (> {tol:g})")
    return fine
