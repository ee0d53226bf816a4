"""Metropolis-within-Gibbs sampler for the joint posterior of all parameters
and every patient's latent class and random effects.

Kernels, in sweep order:

* patient block - ``(eta_i, u_i)`` for every patient.  By default eta is drawn
  with ``u`` integrated out and then ``u | eta`` from its Gaussian conditional,
  which is an exact joint draw from ``p(eta_i, u_i | y_i, theta)``.  With
  ``collapsed=False`` eta is drawn given the current ``u`` instead.
* rho (Beta), mu (Gaussian), tau2 (inverse gamma), beta_age (Gaussian),
  sigma2 (inverse gamma) - all conjugate.
* (gamma0, gamma1) - random-walk Metropolis restricted to gamma1 >= 0, with
  the proposal covariance adapted during burn-in only.

The cohort is flattened into :class:`CohortArrays` so that every update is a
handful of vectorized numpy operations over patients or observations.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import SamplerError, ValidationError
from .model import (
    ModelConfig,
    PatientLatents,
    PatientRecord,
    PopulationParams,
    SeedLike,
    as_generator,
    canonical_json,
    class_posterior_batch,
    log_sigmoid,
    marginal_from_stats,
)

SCALAR_PARAMS = (
    "rho",
    "beta_age",
    "mu[0][0]",
    "mu[0][1]",
    "mu[1][0]",
    "mu[1][1]",
    "tau2[0][0]",
    "tau2[0][1]",
    "tau2[1][0]",
    "tau2[1][1]",
    "sigma2",
    "gamma0",
    "gamma1",
)

ADAPT_TARGET = 0.3


# ---------------------------------------------------------------------------
# data layout
# ---------------------------------------------------------------------------


def canonical_order(records: Sequence[PatientRecord]) -> list[PatientRecord]:
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("patient ids must be unique")
    return sorted(records, key=lambda r: r.id)


def cohort_digest(records: Sequence[PatientRecord]) -> str:
    """sha256 of the canonical JSON of the id-sorted cohort."""
    h = hashlib.sha256()
    for rec in canonical_order(records):
        h.update(canonical_json(rec.to_dict()).encode())
        h.update(b"\n")
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class CohortArrays:
    """Flattened cohort: one row per psa observation plus per-patient summaries."""

    ids: tuple
    age: np.ndarray  # (n,)
    obs_patient: np.ndarray  # (N,) patient index of each psa value
    obs_t: np.ndarray
    obs_y: np.ndarray
    n_obs: np.ndarray  # (n,) psa count
    st: np.ndarray  # (n,) sum of times
    stt: np.ndarray  # (n,) sum of squared times
    n_pos: np.ndarray  # (n,) reclassified biopsies
    n_neg: np.ndarray
    observed: np.ndarray  # (n,) observed class, -1 if unknown

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def obs_age(self) -> np.ndarray:
        return self.age[self.obs_patient]

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> "CohortArrays":
        n = len(records)
        counts = np.array([len(r.psa) for r in records], dtype=np.int64)
        obs_patient = np.repeat(np.arange(n), counts)
        obs_t = np.concatenate([r.psa_times for r in records]) if n else np.zeros(0)
        obs_y = np.concatenate([r.psa_values for r in records]) if n else np.zeros(0)
        return cls(
            ids=tuple(r.id for r in records),
            age=np.array([r.age_std for r in records], dtype=float),
            obs_patient=obs_patient,
            obs_t=obs_t,
            obs_y=obs_y,
            n_obs=counts.astype(float),
            st=np.bincount(obs_patient, obs_t, minlength=n),
            stt=np.bincount(obs_patient, obs_t * obs_t, minlength=n),
            n_pos=np.array([r.biopsy_counts[0] for r in records], dtype=float),
            n_neg=np.array([r.biopsy_counts[1] for r in records], dtype=float),
            observed=np.array(
                [-1 if r.observed_class is None else r.observed_class for r in records], dtype=np.int8
            ),
        )

    def with_outcomes(self, obs_y, n_pos) -> "CohortArrays":
        """Same design (times, biopsy counts) with new measured values."""
        n_pos = np.asarray(n_pos, dtype=float)
        total = self.n_pos + self.n_neg
        return replace(self, obs_y=np.asarray(obs_y, dtype=float), n_pos=n_pos, n_neg=total - n_pos)


@dataclass
class ChainState:
    rho: float
    beta_age: float
    mu: np.ndarray  # (2, 2) [class, component]
    tau2: np.ndarray  # (2, 2)
    sigma2: float
    gamma: np.ndarray  # (2,)
    eta: np.ndarray  # (n,) int8
    u: np.ndarray  # (n, 2)

    def params(self) -> PopulationParams:
        return PopulationParams(
            rho=self.rho,
            beta_age=self.beta_age,
            mu=self.mu,
            tau2=self.tau2,
            sigma2=self.sigma2,
            gamma0=self.gamma[0],
            gamma1=self.gamma[1],
        )

    @classmethod
    def from_params(cls, params: PopulationParams, eta, u) -> "ChainState":
        return cls(
            rho=params.rho,
            beta_age=params.beta_age,
            mu=params.mu_array.copy(),
            tau2=params.tau2_array.copy(),
            sigma2=params.sigma2,
            gamma=np.array([params.gamma0, params.gamma1]),
            eta=np.asarray(eta, dtype=np.int8).copy(),
            u=np.asarray(u, dtype=float).reshape(-1, 2).copy(),
        )


@dataclass
class GammaProposal:
    """Random-walk proposal for (gamma0, gamma1) with burn-in adaptation."""

    cov: np.ndarray = field(default_factory=lambda: np.diag([0.2**2, 0.2**2]))
    log_scale: float = 0.0
    n_seen: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    m2: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    accepted: int = 0
    proposed: int = 0

    def chol(self) -> np.ndarray:
        key = (self.log_scale, id(self.cov))
        if getattr(self, "_chol_key", None) != key:
            scaled = math.exp(2 * self.log_scale) * self.cov
            if not np.any(scaled):
                self._chol = np.zeros((2, 2))
            else:
                self._chol = np.linalg.cholesky(scaled + 1e-12 * np.eye(2))
            self._chol_key = key
        return self._chol

    def adapt(self, gamma: np.ndarray, accepted: bool, step: int):
        # Robbins-Monro on the scale, Welford on the empirical covariance
        self.log_scale += (float(accepted) - ADAPT_TARGET) / (step + 1) ** 0.6
        self.n_seen += 1
        delta = gamma - self.mean
        self.mean = self.mean + delta / self.n_seen
        self.m2 = self.m2 + np.outer(delta, gamma - self.mean)
        if self.n_seen >= 200 and self.n_seen % 50 == 0:
            emp = self.m2 / (self.n_seen - 1)
            self.cov = (2.38**2 / 2) * emp + 1e-6 * np.eye(2)


# ---------------------------------------------------------------------------
# patient block
# ---------------------------------------------------------------------------


def _psa_stats(data: CohortArrays, beta_age: float):
    """Per-patient sums of the age-adjusted psa values."""
    y = data.obs_y - beta_age * data.obs_age
    n = data.n
    sy = np.bincount(data.obs_patient, y, minlength=n)
    sty = np.bincount(data.obs_patient, data.obs_t * y, minlength=n)
    syy = np.bincount(data.obs_patient, y * y, minlength=n)
    return sy, sty, syy


def _class_logliks(data: CohortArrays, state: ChainState, stats, collapsed: bool):
    """(n, 2) log-likelihood of each class, random effects integrated or fixed."""
    sy, sty, syy = stats
    out = np.empty((data.n, 2))
    for c in (0, 1):
        lin = state.gamma[0] + state.gamma[1] * c
        bx = data.n_pos * log_sigmoid(lin) + data.n_neg * log_sigmoid(-lin)
        m0, m1 = state.mu[c]
        d0, d1 = state.tau2[c]
        if collapsed:
            v0 = sy - data.n_obs * m0 - data.st * m1
            v1 = sty - data.st * m0 - data.stt * m1
            rr = (
                syy - 2 * m0 * sy - 2 * m1 * sty
                + data.n_obs * m0 * m0 + 2 * m0 * m1 * data.st + m1 * m1 * data.stt
            )
            psa = marginal_from_stats(data.n_obs, data.st, data.stt, rr, v0, v1, d0, d1, state.sigma2)
        else:
            z0 = state.u[:, 0] - m0
            z1 = state.u[:, 1] - m1
            psa = -0.5 * (2 * math.log(2 * math.pi) + math.log(d0 * d1) + z0 * z0 / d0 + z1 * z1 / d1)
        out[:, c] = psa + bx
    return out


def draw_eta(data: CohortArrays, state: ChainState, stats, rng, collapsed=True) -> np.ndarray:
    ll = _class_logliks(data, state, stats, collapsed)
    logit = math.log(state.rho) - math.log1p(-state.rho) + ll[:, 1] - ll[:, 0]
    p1 = np.exp(log_sigmoid(logit))
    eta = (rng.random(data.n) < p1).astype(np.int8)
    known = data.observed >= 0
    eta[known] = data.observed[known]
    return eta


def u_conditional(data: CohortArrays, state: ChainState, eta, stats):
    """Mean and covariance Cholesky factor of ``u_i | eta_i, y_i, theta``."""
    sy, sty, _ = stats
    tau2 = state.tau2[eta]
    mu = state.mu[eta]
    s2 = state.sigma2
    p00 = 1.0 / tau2[:, 0] + data.n_obs / s2
    p01 = data.st / s2
    p11 = 1.0 / tau2[:, 1] + data.stt / s2
    b0 = mu[:, 0] / tau2[:, 0] + sy / s2
    b1 = mu[:, 1] / tau2[:, 1] + sty / s2
    det = p00 * p11 - p01 * p01
    c00, c01, c11 = p11 / det, -p01 / det, p00 / det
    mean = np.stack([c00 * b0 + c01 * b1, c01 * b0 + c11 * b1], axis=1)
    l00 = np.sqrt(c00)
    l10 = c01 / l00
    l11 = np.sqrt(np.maximum(c11 - l10 * l10, 0.0))
    return mean, (l00, l10, l11)


def draw_u(data: CohortArrays, state: ChainState, eta, stats, rng) -> np.ndarray:
    mean, (l00, l10, l11) = u_conditional(data, state, eta, stats)
    z = rng.standard_normal((data.n, 2))
    return np.stack([mean[:, 0] + l00 * z[:, 0], mean[:, 1] + l10 * z[:, 0] + l11 * z[:, 1]], axis=1)


def _update_patients(data, state, rng, collapsed=True):
    stats = _psa_stats(data, state.beta_age)
    eta = draw_eta(data, state, stats, rng, collapsed)
    u = draw_u(data, state, eta, stats, rng)
    return eta, u


def update_patient_block(
    record: PatientRecord,
    latents: PatientLatents,
    params: PopulationParams,
    rng: SeedLike = None,
    collapsed: bool = True,
) -> PatientLatents:
    """One Gibbs update of a single patient's ``(eta, u)`` given theta."""
    rng = as_generator(rng)
    data = CohortArrays.from_records([record])
    state = ChainState.from_params(params, [latents.eta], [latents.u])
    eta, u = _update_patients(data, state, rng, collapsed)
    return PatientLatents(eta=int(eta[0]), u=(float(u[0, 0]), float(u[0, 1])))


# ---------------------------------------------------------------------------
# population block
# ---------------------------------------------------------------------------


def draw_rho(eta, config: ModelConfig, rng) -> float:
    k = float(np.sum(eta))
    return float(rng.beta(config.a_rho + k, config.b_rho + len(eta) - k))


def draw_mu(u_class: np.ndarray, tau2_class: np.ndarray, config: ModelConfig, rng) -> np.ndarray:
    """Both components of one class mean; ``u_class`` is ``(n_c, 2)``."""
    n_c = u_class.shape[0]
    s0sq = np.square(config.s0)
    prec = 1.0 / s0sq + n_c / tau2_class
    mean = (np.asarray(config.m0) / s0sq + u_class.sum(axis=0) / tau2_class) / prec
    return mean + rng.standard_normal(2) / np.sqrt(prec)


def draw_inv_gamma(shape, scale, rng):
    return scale / rng.gamma(shape)


def draw_tau2(u_class: np.ndarray, mu_class: np.ndarray, config: ModelConfig, rng) -> np.ndarray:
    n_c = u_class.shape[0]
    ss = np.sum(np.square(u_class - mu_class), axis=0)
    return draw_inv_gamma(config.a_tau + n_c / 2.0, config.b_tau + ss / 2.0, rng)


def psa_residuals(data: CohortArrays, beta_age: float, u: np.ndarray) -> np.ndarray:
    p = data.obs_patient
    return data.obs_y - beta_age * data.obs_age - u[p, 0] - u[p, 1] * data.obs_t


def draw_sigma2(resid: np.ndarray, config: ModelConfig, rng) -> float:
    return float(draw_inv_gamma(config.a_tau + resid.size / 2.0, config.b_tau + resid @ resid / 2.0, rng))


def draw_beta_age(data: CohortArrays, u: np.ndarray, sigma2: float, config: ModelConfig, rng) -> float:
    p = data.obs_patient
    target = data.obs_y - u[p, 0] - u[p, 1] * data.obs_t
    a = data.obs_age
    prec = 1.0 / config.s_beta**2 + (a @ a) / sigma2
    mean = (a @ target) / sigma2 / prec
    return float(mean + rng.standard_normal() / math.sqrt(prec))


def biopsy_class_counts(data: CohortArrays, eta) -> np.ndarray:
    """(2, 2) array of [class, (reclassified, not)] biopsy totals."""
    out = np.zeros((2, 2))
    for c in (0, 1):
        m = eta == c
        out[c] = data.n_pos[m].sum(), data.n_neg[m].sum()
    return out


def _log_sigmoid_scalar(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x > -30 else x - math.log1p(math.exp(x))


def gamma_log_target(gamma, counts, config: ModelConfig) -> float:
    """Unnormalized log posterior of (gamma0, gamma1) given class biopsy totals."""
    g0, g1 = float(gamma[0]), float(gamma[1])
    if g1 < 0:
        return -math.inf
    s = config.s_gamma
    out = -0.5 * (g0 * g0 + g1 * g1) / (s * s)
    for c in (0, 1):
        lin = g0 + g1 * c
        out += counts[c, 0] * _log_sigmoid_scalar(lin) + counts[c, 1] * _log_sigmoid_scalar(-lin)
    return out


def gamma_metropolis_step(gamma, counts, config: ModelConfig, chol, rng):
    """One random-walk Metropolis step; returns ``(new_gamma, accepted)``.

    ``chol`` is the Cholesky factor of the proposal covariance; an all-zero
    factor leaves the chain where it is.
    """
    gamma = np.asarray(gamma, dtype=float)
    proposal = gamma + chol @ rng.standard_normal(2)
    log_u = math.log(rng.random())
    if proposal[1] < 0:
        return gamma, False
    log_ratio = gamma_log_target(proposal, counts, config) - gamma_log_target(gamma, counts, config)
    if log_u < log_ratio:
        return proposal, True
    return gamma, False


def _update_population(data, state: ChainState, config, rng, proposal: GammaProposal, adapt_step=None):
    eta, u = state.eta, state.u
    state.rho = draw_rho(eta, config, rng)
    for c in (0, 1):
        u_c = u[eta == c]
        state.mu[c] = draw_mu(u_c, state.tau2[c], config, rng)
        state.tau2[c] = draw_tau2(u_c, state.mu[c], config, rng)
    state.beta_age = draw_beta_age(data, u, state.sigma2, config, rng)
    state.sigma2 = draw_sigma2(psa_residuals(data, state.beta_age, u), config, rng)
    counts = biopsy_class_counts(data, eta)
    state.gamma, accepted = gamma_metropolis_step(state.gamma, counts, config, proposal.chol(), rng)
    proposal.proposed += 1
    proposal.accepted += int(accepted)
    if adapt_step is not None:
        proposal.adapt(state.gamma, accepted, adapt_step)
    return state


def update_population_block(
    cohort: Sequence[PatientRecord],
    latents: Sequence[PatientLatents],
    params: PopulationParams,
    config: ModelConfig,
    rng: SeedLike = None,
    gamma_proposal_sd: tuple[float, float] = (0.2, 0.2),
) -> PopulationParams:
    """One sweep over theta given every patient's latents."""
    rng = as_generator(rng)
    data = CohortArrays.from_records(list(cohort))
    state = ChainState.from_params(params, [l.eta for l in latents], [l.u for l in latents])
    proposal = GammaProposal(cov=np.diag(np.square(gamma_proposal_sd)))
    return _update_population(data, state, config, rng, proposal).params()


def gibbs_sweep(data, state, config, rng, proposal, collapsed=True, adapt_step=None) -> ChainState:
    state.eta, state.u = _update_patients(data, state, rng, collapsed)
    return _update_population(data, state, config, rng, proposal, adapt_step)


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------


def initial_state(data: CohortArrays, rng) -> ChainState:
    """Overdispersed, data-scaled starting point; latents are drawn in the first sweep."""
    y = data.obs_y
    ybar = float(y.mean()) if y.size else 0.0
    sd = float(y.std()) if y.size > 1 else 1.0
    sd = sd if sd > 0 else 1.0
    mu = np.array([[ybar, 0.0], [ybar, 0.0]]) + rng.standard_normal((2, 2)) * [0.2 * sd, 0.05]
    eta = np.where(data.observed >= 0, data.observed, rng.random(data.n) < 0.5).astype(np.int8)
    return ChainState(
        rho=float(rng.uniform(0.2, 0.8)),
        beta_age=0.0,
        mu=mu,
        tau2=np.array([[sd * sd, 0.05], [sd * sd, 0.05]]),
        sigma2=0.5 * sd * sd,
        gamma=np.array([rng.uniform(-2.0, 0.0), rng.uniform(0.5, 2.0)]),
        eta=eta,
        u=np.tile(mu[0], (data.n, 1)),
    )


def _check_finite(state: ChainState, iteration: int, chain: int):
    for name in ("rho", "beta_age", "sigma2"):
        if not math.isfinite(getattr(state, name)):
            raise SamplerError(name, iteration, chain)
    for name in ("mu", "tau2", "gamma", "u"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise SamplerError(name, iteration, chain)


def run_chain(
    data: CohortArrays,
    config: ModelConfig,
    iters: int,
    burn_in: int,
    thin: int,
    rng: np.random.Generator,
    chain: int = 0,
    collapsed: bool = True,
    state: Optional[ChainState] = None,
) -> dict:
    """Run one chain; returns kept draws as arrays keyed by parameter name."""
    state = initial_state(data, rng) if state is None else state
    proposal = GammaProposal()
    kept = iters // thin
    out = {
        "rho": np.empty(kept),
        "beta_age": np.empty(kept),
        "mu": np.empty((kept, 2, 2)),
        "tau2": np.empty((kept, 2, 2)),
        "sigma2": np.empty(kept),
        "gamma0": np.empty(kept),
        "gamma1": np.empty(kept),
        "eta": np.empty((kept, data.n), dtype=np.int8),
        "u": np.empty((kept, data.n, 2)),
    }
    k = 0
    # non-finite intermediates are caught by _check_finite, so numpy warnings are noise
    for it in range(burn_in + iters):
        adapting = it < burn_in
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                gibbs_sweep(data, state, config, rng, proposal, collapsed, it if adapting else None)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            raise SamplerError(str(exc), it, chain) from exc
        _check_finite(state, it, chain)
        if adapting:
            continue
        j = it - burn_in
        if (j + 1) % thin == 0 and k < kept:
            out["rho"][k] = state.rho
            out["beta_age"][k] = state.beta_age
            out["mu"][k] = state.mu
            out["tau2"][k] = state.tau2
            out["sigma2"][k] = state.sigma2
            out["gamma0"][k] = state.gamma[0]
            out["gamma1"][k] = state.gamma[1]
            out["eta"][k] = state.eta
            out["u"][k] = state.u
            k += 1
    out["acceptance_gamma"] = proposal.accepted / max(proposal.proposed, 1)
    return out


@dataclass(eq=False)
class PosteriorSample:
    """J joint draws of theta and every patient's latents.

    Arrays are indexed by draw first; ``eta``/``u`` have a patient axis in the
    order of ``ids`` (sorted).  ``patient_age``/``last_psa``/``last_biopsy``
    keep enough of each patient's record to weigh new measurements later.
    """

    ids: tuple
    rho: np.ndarray
    beta_age: np.ndarray
    mu: np.ndarray
    tau2: np.ndarray
    sigma2: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    chain: np.ndarray
    patient_age: np.ndarray
    last_psa: np.ndarray
    last_biopsy: np.ndarray
    meta: dict = field(default_factory=dict)

    PARAM_COLUMNS = ("rho", "beta_age", "mu", "tau2", "sigma2", "gamma0", "gamma1")
    LATENT_COLUMNS = ("eta", "u")
    PATIENT_COLUMNS = ("patient_age", "last_psa", "last_biopsy")

    def __post_init__(self):
        self.ids = tuple(str(i) for i in self.ids)
        j = self.rho.shape[0]
        if j < 1:
            raise ValidationError("a posterior sample needs at least one draw")
        if self.eta.shape != (j, len(self.ids)) or self.u.shape != (j, len(self.ids), 2):
            raise ValidationError("latent arrays do not match draws x patients")
        self._index = {pid: i for i, pid in enumerate(self.ids)}

    @property
    def J(self) -> int:
        return self.rho.shape[0]

    @property
    def n(self) -> int:
        return len(self.ids)

    def index_of(self, patient_id) -> int:
        try:
            return self._index[str(patient_id)]
        except KeyError:
            raise ValidationError(f"unknown patient id {patient_id!r}") from None

    def params(self, j: int) -> PopulationParams:
        return PopulationParams(
            rho=self.rho[j],
            beta_age=self.beta_age[j],
            mu=self.mu[j],
            tau2=self.tau2[j],
            sigma2=self.sigma2[j],
            gamma0=self.gamma0[j],
            gamma1=self.gamma1[j],
        )

    def latents(self, j: int, i: int) -> PatientLatents:
        return PatientLatents(eta=int(self.eta[j, i]), u=tuple(self.u[j, i]))

    def scalar_chains(self) -> dict[str, np.ndarray]:
        """Each scalar parameter as a flat (J,) array."""
        out = {"rho": self.rho, "beta_age": self.beta_age}
        for c in (0, 1):
            for d in (0, 1):
                out[f"mu[{c}][{d}]"] = self.mu[:, c, d]
        for c in (0, 1):
            for d in (0, 1):
                out[f"tau2[{c}][{d}]"] = self.tau2[:, c, d]
        out.update(sigma2=self.sigma2, gamma0=self.gamma0, gamma1=self.gamma1)
        return out

    def theta_arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAM_COLUMNS}


def fit(
    cohort: Sequence[PatientRecord],
    config: ModelConfig = ModelConfig(),
    chains: int = 4,
    iters: int = 5000,
    burn_in: int = 1000,
    thin: int = 1,
    seed: int = 0,
    collapsed: bool = True,
) -> PosteriorSample:
    """Draw from the joint posterior with ``chains`` independent chains.

    Each chain runs ``burn_in`` adaptation sweeps that are discarded, then
    ``iters`` sweeps of which every ``thin``-th is kept.  Patients are put in
    id order first, so the result does not depend on input order.  Chain
    ``c`` draws from ``SeedSequence([seed, c])``.
    """
    if not cohort:
        raise ValidationError("cohort is empty")
    if chains < 1 or iters < 1 or thin < 1 or burn_in < 0 or iters // thin < 1:
        raise ValidationError("need chains >= 1, burn_in >= 0, iters >= thin >= 1")
    records = canonical_order(cohort)
    data = CohortArrays.from_records(records)
    runs = []
    for c in range(chains):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), c]))
        runs.append(run_chain(data, config, iters, burn_in, thin, rng, chain=c, collapsed=collapsed))
    cat = {k: np.concatenate([r[k] for r in runs]) for k in runs[0] if k != "acceptance_gamma"}
    kept = iters // thin
    meta = {
        "chains": chains,
        "iterations": iters,
        "burn_in": burn_in,
        "thin": thin,
        "seed": int(seed),
        "collapsed": collapsed,
        "data_digest": cohort_digest(records),
        "config": config.to_dict(),
        "acceptance_gamma": [r["acceptance_gamma"] for r in runs],
    }
    return PosteriorSample(
        ids=data.ids,
        chain=np.repeat(np.arange(chains, dtype=np.int32), kept),
        patient_age=data.age.copy(),
        last_psa=np.array([r.last_psa_time for r in records]),
        last_biopsy=np.array([r.last_biopsy_time for r in records]),
        meta=meta,
        **cat,
    )


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def potential_scale_reduction(chains, split: bool = True) -> float:
    """Potential scale reduction of an ``(m, n)`` array of chains.

    Uses ``sqrt((W + B/n) / W)``; each chain is halved first when ``split``.
    Returns nan (undefined) when every within-chain variance is zero.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None]
    if split:
        half = x.shape[1] // 2
        if half < 2:
            return math.nan
        x = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    if x.shape[1] < 2:
        return math.nan
    w = x.var(axis=1, ddof=1).mean()
    if not w > 0:
        return math.nan
    b_over_n = x.mean(axis=1).var(ddof=1) if x.shape[0] > 1 else 0.0
    return math.sqrt((w + b_over_n) / w)


def summarize(sample: PosteriorSample, interval: float = 0.95) -> list[dict]:
    """Mean, sd, central interval and split-chain psr per scalar parameter."""
    lo_q, hi_q = (1 - interval) / 2, 1 - (1 - interval) / 2
    rows = []
    n_chains = int(sample.chain.max()) + 1
    for name, values in sample.scalar_chains().items():
        per_chain = [values[sample.chain == c] for c in range(n_chains)]
        length = min(len(v) for v in per_chain)
        psr = potential_scale_reduction(np.stack([v[:length] for v in per_chain]), split=True)
        rows.append(
            {
                "parameter": name,
                "mean": float(values.mean()),
                "sd": float(values.std(ddof=1)) if values.size > 1 else math.nan,
                "lower": float(np.quantile(values, lo_q)),
                "upper": float(np.quantile(values, hi_q)),
                "psr": None if math.isnan(psr) else psr,
            }
        )
    return rows


def patient_risk(sample: PosteriorSample, patient_id, record: Optional[PatientRecord] = None) -> float:
    """Posterior probability that a fitted patient is in the aggressive class.

    With ``record`` the per-draw conditional ``P(eta = 1 | y, theta_j)`` is
    averaged (random effects integrated out), which has lower Monte Carlo
    error than the plain mean of the eta draws returned otherwise.
    """
    i = sample.index_of(patient_id)
    if record is None:
        return float(sample.eta[:, i].mean())
    prob, _ = class_posterior_batch(
        record, sample.rho, sample.beta_age, sample.mu, sample.tau2, sample.sigma2, sample.gamma0, sample.gamma1
    )
    return float(prob.mean())
