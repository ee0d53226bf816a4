"""Two-class stratified random-effects model of log-PSA and biopsy outcomes.

Each patient carries a latent class ``eta`` (0 = indolent, 1 = aggressive)
and a random intercept/slope ``u`` whose distribution depends on the class.
Log-PSA measurements are Gaussian around ``beta_age * age_std + u0 + u1 * t``
and each biopsy reclassifies with probability ``logistic(gamma0 + gamma1 * eta)``.

Everything here is a pure function of its inputs.  The ``*_batch`` variants
broadcast over a leading axis of parameter draws / candidate latents and are
what the samplers and the importance-sampling engine call in hot loops.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ValidationError

LOG_2PI = math.log(2.0 * math.pi)
# logits are clamped here before exponentiation when simulating
LOGIT_CLAMP = 700.0
# variances below this are treated as point masses
POINT_MASS_VAR = 1e-300

SeedLike = Union[None, int, np.random.Generator, np.random.SeedSequence]


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def log_sigmoid(x):
    """log(1 / (1 + exp(-x))) without overflow."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def sigmoid(x):
    x = np.clip(np.asarray(x, dtype=float), -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def _finite(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite, got {value!r}")


def _pair(name, value) -> tuple[float, float]:
    vals = tuple(float(v) for v in value)
    if len(vals) != 2:
        raise ValidationError(f"{name} must have length 2")
    return vals


def _check_keys(kind: str, data: Mapping[str, Any], allowed: Iterable[str], required: Iterable[str]):
    if not isinstance(data, Mapping):
        raise ValidationError(f"{kind} must be a JSON object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown {kind} fields: {sorted(unknown)}")
    missing = set(required) - set(data)
    if missing:
        raise ValidationError(f"missing {kind} fields: {sorted(missing)}")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PopulationParams:
    """Population-level parameters.

    ``mu[c]`` and ``tau2[c]`` are the (intercept, slope) means and diagonal
    variances of the random effects in class ``c``.  The constructor accepts
    the closed limits ``rho in [0, 1]`` and zero variances so that degenerate
    cases can be simulated; density evaluations that need strict positivity
    check it themselves.
    """

    rho: float
    beta_age: float
    mu: tuple[tuple[float, float], tuple[float, float]]
    tau2: tuple[tuple[float, float], tuple[float, float]]
    sigma2: float
    gamma0: float
    gamma1: float

    def __post_init__(self):
        for name in ("rho", "beta_age", "sigma2", "gamma0", "gamma1"):
            object.__setattr__(self, name, float(getattr(self, name)))
            _finite(name, getattr(self, name))
        for name in ("mu", "tau2"):
            raw = getattr(self, name)
            if len(raw) != 2:
                raise ValidationError(f"{name} needs one entry per class")
            value = (_pair(f"{name}[0]", raw[0]), _pair(f"{name}[1]", raw[1]))
            _finite(name, value)
            object.__setattr__(self, name, value)
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError(f"rho must lie in [0, 1], got {self.rho}")
        if self.sigma2 < 0 or min(min(t) for t in self.tau2) < 0:
            raise ValidationError("variances must be non-negative")

    @property
    def mu_array(self) -> np.ndarray:
        return np.array(self.mu)

    @property
    def tau2_array(self) -> np.ndarray:
        return np.array(self.tau2)

    def is_strict(self) -> bool:
        """True when rho is interior and every variance strictly positive."""
        return 0.0 < self.rho < 1.0 and self.sigma2 > 0 and min(min(t) for t in self.tau2) > 0

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "beta_age": self.beta_age,
            "mu": [list(self.mu[0]), list(self.mu[1])],
            "tau2": [list(self.tau2[0]), list(self.tau2[1])],
            "sigma2": self.sigma2,
            "gamma0": self.gamma0,
            "gamma1": self.gamma1,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PopulationParams":
        names = ("rho", "beta_age", "mu", "tau2", "sigma2", "gamma0", "gamma1")
        _check_keys("PopulationParams", data, names, names)
        return cls(**{k: data[k] for k in names})


@dataclass(frozen=True)
class PatientLatents:
    eta: int
    u: tuple[float, float]

    def __post_init__(self):
        if self.eta not in (0, 1):
            raise ValidationError(f"eta must be 0 or 1, got {self.eta!r}")
        object.__setattr__(self, "eta", int(self.eta))
        object.__setattr__(self, "u", _pair("u", self.u))
        _finite("u", self.u)

    def to_dict(self) -> dict:
        return {"eta": self.eta, "u": list(self.u)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PatientLatents":
        _check_keys("PatientLatents", data, ("eta", "u"), ("eta", "u"))
        return cls(eta=data["eta"], u=data["u"])


def _check_times(kind: str, times: Sequence[float]):
    arr = np.asarray(times, dtype=float)
    if arr.size == 0:
        return
    _finite(f"{kind} times", arr)
    if arr.min() < 0:
        raise ValidationError(f"{kind} times must be >= 0")
    if np.any(np.diff(arr) < 0):
        raise ValidationError(f"{kind} times must be nondecreasing")


def _psa_tuple(entries) -> tuple[tuple[float, float], ...]:
    out = []
    for e in entries:
        if isinstance(e, Mapping):
            _check_keys("psa entry", e, ("time", "value"), ("time", "value"))
            out.append((float(e["time"]), float(e["value"])))
        else:
            t, v = e
            out.append((float(t), float(v)))
    return tuple(out)


def _biopsy_tuple(entries) -> tuple[tuple[float, int], ...]:
    out = []
    for e in entries:
        if isinstance(e, Mapping):
            _check_keys("biopsy entry", e, ("time", "result"), ("time", "result"))
            t, r = e["time"], e["result"]
        else:
            t, r = e
        if r not in (0, 1):
            raise ValidationError(f"biopsy result must be 0 or 1, got {r!r}")
        out.append((float(t), int(r)))
    return tuple(out)


@dataclass(frozen=True)
class ObservationBlock:
    """A batch of new measurements for one patient (no covariates)."""

    psa: tuple = ()
    biopsies: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "psa", _psa_tuple(self.psa))
        object.__setattr__(self, "biopsies", _biopsy_tuple(self.biopsies))
        _finite("psa values", [v for _, v in self.psa])
        _check_times("psa", [t for t, _ in self.psa])
        _check_times("biopsy", [t for t, _ in self.biopsies])

    @property
    def empty(self) -> bool:
        return not self.psa and not self.biopsies

    def to_dict(self) -> dict:
        return {
            "psa": [{"time": t, "value": v} for t, v in self.psa],
            "biopsies": [{"time": t, "result": r} for t, r in self.biopsies],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ObservationBlock":
        _check_keys("ObservationBlock", data, ("psa", "biopsies"), ())
        return cls(psa=data.get("psa", ()), biopsies=data.get("biopsies", ()))


@dataclass(frozen=True)
class PatientRecord:
    """One patient's covariates and measurement history."""

    id: str
    age_std: float = 0.0
    psa: tuple = ()
    biopsies: tuple = ()
    observed_class: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "age_std", float(self.age_std))
        _finite("age_std", self.age_std)
        object.__setattr__(self, "psa", _psa_tuple(self.psa))
        object.__setattr__(self, "biopsies", _biopsy_tuple(self.biopsies))
        _finite("psa values", [v for _, v in self.psa])
        _check_times("psa", [t for t, _ in self.psa])
        _check_times("biopsy", [t for t, _ in self.biopsies])
        if self.observed_class is not None:
            if self.observed_class not in (0, 1):
                raise ValidationError(f"observed_class must be 0, 1 or null, got {self.observed_class!r}")
            object.__setattr__(self, "observed_class", int(self.observed_class))

    # cached numeric views; cached_property writes straight into __dict__
    @cached_property
    def psa_times(self) -> np.ndarray:
        return np.array([t for t, _ in self.psa], dtype=float)

    @cached_property
    def psa_values(self) -> np.ndarray:
        return np.array([v for _, v in self.psa], dtype=float)

    @cached_property
    def biopsy_counts(self) -> tuple[int, int]:
        """(number reclassified, number not reclassified)."""
        pos = sum(r for _, r in self.biopsies)
        return pos, len(self.biopsies) - pos

    @property
    def last_psa_time(self) -> float:
        return self.psa[-1][0] if self.psa else -math.inf

    @property
    def last_biopsy_time(self) -> float:
        return self.biopsies[-1][0] if self.biopsies else -math.inf

    def extended(self, block: ObservationBlock) -> "PatientRecord":
        check_block_order(block, self.last_psa_time, self.last_biopsy_time)
        return PatientRecord(
            id=self.id,
            age_std=self.age_std,
            psa=self.psa + block.psa,
            biopsies=self.biopsies + block.biopsies,
            observed_class=self.observed_class,
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "age_std": self.age_std,
            "psa": [{"time": t, "value": v} for t, v in self.psa],
            "biopsies": [{"time": t, "result": r} for t, r in self.biopsies],
            "observed_class": self.observed_class,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PatientRecord":
        names = ("id", "age_std", "psa", "biopsies", "observed_class")
        _check_keys("PatientRecord", data, names, ("id",))
        return cls(
            id=data["id"],
            age_std=data.get("age_std", 0.0),
            psa=data.get("psa", ()),
            biopsies=data.get("biopsies", ()),
            observed_class=data.get("observed_class"),
        )


def check_block_order(block: ObservationBlock, last_psa: float, last_biopsy: float):
    """New observations may not precede the existing ones of the same kind."""
    if block.psa and block.psa[0][0] < last_psa:
        raise ValidationError(f"new psa at t={block.psa[0][0]} precedes last psa at t={last_psa}")
    if block.biopsies and block.biopsies[0][0] < last_biopsy:
        raise ValidationError(
            f"new biopsy at t={block.biopsies[0][0]} precedes last biopsy at t={last_biopsy}"
        )


@dataclass(frozen=True)
class ModelConfig:
    """Prior hyperparameters.

    rho ~ Beta(a_rho, b_rho); mu[c][d] ~ N(m0[d], s0[d]^2);
    tau2[c][d], sigma2 ~ InvGamma(a_tau, b_tau); beta_age ~ N(0, s_beta^2);
    gamma0 ~ N(0, s_gamma^2); gamma1 ~ N(0, s_gamma^2) truncated to gamma1 >= 0.
    """

    a_rho: float = 1.0
    b_rho: float = 1.0
    m0: tuple[float, float] = (0.0, 0.0)
    s0: tuple[float, float] = (10.0, 10.0)
    a_tau: float = 1.0
    b_tau: float = 0.01
    s_beta: float = 10.0
    s_gamma: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "m0", _pair("m0", self.m0))
        object.__setattr__(self, "s0", _pair("s0", self.s0))
        for name in ("a_rho", "b_rho", "a_tau", "b_tau", "s_beta", "s_gamma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        _finite("ModelConfig", [self.a_rho, self.b_rho, *self.m0, *self.s0, self.a_tau, self.b_tau, self.s_beta, self.s_gamma])
        scales = [self.a_rho, self.b_rho, *self.s0, self.a_tau, self.b_tau, self.s_beta, self.s_gamma]
        if min(scales) <= 0:
            raise ValidationError("all scale hyperparameters must be strictly positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("a_rho", "b_rho", "a_tau", "b_tau", "s_beta", "s_gamma")}
        d["m0"] = list(self.m0)
        d["s0"] = list(self.s0)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        names = ("a_rho", "b_rho", "m0", "s0", "a_tau", "b_tau", "s_beta", "s_gamma")
        _check_keys("ModelConfig", data, names, ())
        return cls(**dict(data))


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


def psa_loglik_batch(times, values, age_std, u0, u1, beta_age, sigma2):
    """Sum of Gaussian log-densities of the psa series, broadcast over draws.

    ``u0, u1, beta_age, sigma2`` share a leading shape ``(M,)`` (or are
    scalars); ``times``/``values`` have shape ``(T,)``.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return np.zeros(np.broadcast(u0, u1, beta_age, sigma2).shape)
    u0, u1, beta_age, sigma2 = (np.asarray(a, dtype=float)[..., None] for a in (u0, u1, beta_age, sigma2))
    resid = np.asarray(values, dtype=float) - (beta_age * age_std + u0 + u1 * times)
    out = -0.5 * (LOG_2PI + np.log(sigma2) + resid * resid / sigma2)
    return out.sum(axis=-1)


def biopsy_loglik_batch(n_pos, n_neg, eta, gamma0, gamma1):
    """Bernoulli log-likelihood of ``n_pos`` reclassifications out of ``n_pos + n_neg``."""
    if n_pos == 0 and n_neg == 0:
        return np.zeros(np.broadcast(eta, gamma0, gamma1).shape)
    lin = np.asarray(gamma0, dtype=float) + np.asarray(gamma1, dtype=float) * np.asarray(eta)
    out = 0.0
    if n_pos:
        out = out + n_pos * log_sigmoid(lin)
    if n_neg:
        out = out + n_neg * log_sigmoid(-lin)
    return out


def class_label_loglik(observed_class, eta):
    """log P(observed label | eta): 0 on a match, -inf otherwise."""
    eta = np.asarray(eta)
    if observed_class is None:
        return np.zeros(eta.shape)
    return np.where(eta == observed_class, 0.0, -np.inf)


def log_obs_likelihood_batch(record: PatientRecord, eta, u, beta_age, sigma2, gamma0, gamma1):
    """Vectorized ``log f(y | b, theta)`` over candidate latents/draws.

    ``u`` has shape ``(M, 2)``; other arguments broadcast against ``(M,)``.
    """
    u = np.asarray(u, dtype=float)
    out = psa_loglik_batch(
        record.psa_times, record.psa_values, record.age_std, u[..., 0], u[..., 1], beta_age, sigma2
    )
    n_pos, n_neg = record.biopsy_counts
    out = out + biopsy_loglik_batch(n_pos, n_neg, eta, gamma0, gamma1)
    if record.observed_class is not None:
        out = out + class_label_loglik(record.observed_class, eta)
    return out


def _require_strict_variance(name, value):
    if not value > 0:
        raise ValidationError(f"{name} must be strictly positive, got {value}")


def log_obs_likelihood(record: PatientRecord, latents: PatientLatents, params: PopulationParams) -> float:
    """``log f(y_i | b_i, theta)``.

    Sum of Gaussian log-densities of the psa values plus Bernoulli
    log-probabilities of the biopsy outcomes.  A patient with a recorded
    pathology class contributes ``log 1[eta == observed_class]``.
    An empty record gives exactly 0.
    """
    if not record.psa and not record.biopsies and record.observed_class is None:
        return 0.0
    if record.psa:
        _require_strict_variance("sigma2", params.sigma2)
    value = log_obs_likelihood_batch(
        record,
        np.array([latents.eta]),
        np.array([latents.u]),
        params.beta_age,
        params.sigma2,
        params.gamma0,
        params.gamma1,
    )
    return float(value[0])


def log_latent_density(latents: PatientLatents, params: PopulationParams) -> float:
    """``log g(b_i | theta)``: class prevalence times class-conditional Gaussian."""
    eta = latents.eta
    mu = params.mu[eta]
    tau2 = params.tau2[eta]
    for d in range(2):
        _require_strict_variance(f"tau2[{eta}][{d}]", tau2[d])
    prob = params.rho if eta == 1 else 1.0 - params.rho
    out = math.log(prob) if prob > 0 else -math.inf
    for d in range(2):
        z = latents.u[d] - mu[d]
        out += -0.5 * (LOG_2PI + math.log(tau2[d]) + z * z / tau2[d])
    return out


def _normal_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * (LOG_2PI + z * z) - math.log(sd)


def _invgamma_logpdf(x, a, b):
    if x <= 0:
        return -math.inf
    return a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(x) - b / x


def log_prior_gamma(gamma0, gamma1, config: ModelConfig):
    """Log prior of the biopsy coefficients; gamma1 is half-normal on [0, inf)."""
    gamma0 = np.asarray(gamma0, dtype=float)
    gamma1 = np.asarray(gamma1, dtype=float)
    s = config.s_gamma
    out = -0.5 * (gamma0 / s) ** 2 - 0.5 * (gamma1 / s) ** 2 - 2 * math.log(s) - LOG_2PI + math.log(2.0)
    return np.where(gamma1 >= 0, out, -np.inf)


def log_prior(params: PopulationParams, config: ModelConfig) -> float:
    """``log pi(theta)``; returns -inf outside the support."""
    if not 0.0 < params.rho < 1.0:
        return -math.inf
    variances = [params.sigma2, *params.tau2[0], *params.tau2[1]]
    if min(variances) <= 0:
        return -math.inf
    a, b = config.a_rho, config.b_rho
    out = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + (a - 1.0) * math.log(params.rho)
        + (b - 1.0) * math.log1p(-params.rho)
    )
    for c in range(2):
        for d in range(2):
            out += _normal_logpdf(params.mu[c][d], config.m0[d], config.s0[d])
            out += _invgamma_logpdf(params.tau2[c][d], config.a_tau, config.b_tau)
    out += _invgamma_logpdf(params.sigma2, config.a_tau, config.b_tau)
    out += _normal_logpdf(params.beta_age, 0.0, config.s_beta)
    out += float(log_prior_gamma(params.gamma0, params.gamma1, config))
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_latents_batch(rho, mu, tau2, rng: np.random.Generator):
    """Draw one latent per row of the parameter arrays.

    ``rho`` has shape ``(M,)``, ``mu``/``tau2`` shape ``(M, 2, 2)`` indexed
    ``[draw, class, component]``.  Returns ``(eta, u)`` with shapes
    ``(M,)`` int8 and ``(M, 2)``.
    """
    rho = np.asarray(rho, dtype=float)
    m = rho.shape[0]
    eta = (rng.random(m) < rho).astype(np.int8)
    rows = np.arange(m)
    mean = np.asarray(mu)[rows, eta]
    var = np.asarray(tau2)[rows, eta]
    z = rng.standard_normal((m, 2))
    u = np.where(var < POINT_MASS_VAR, mean, mean + np.sqrt(np.maximum(var, 0.0)) * z)
    return eta, u


def sample_latents(params: PopulationParams, rng_seed: SeedLike = None) -> PatientLatents:
    """Draw ``eta ~ Bernoulli(rho)`` then ``u ~ N(mu[eta], diag(tau2[eta]))``."""
    rng = as_generator(rng_seed)
    eta, u = sample_latents_batch(
        np.array([params.rho]), params.mu_array[None], params.tau2_array[None], rng
    )
    return PatientLatents(eta=int(eta[0]), u=(float(u[0, 0]), float(u[0, 1])))


# ---------------------------------------------------------------------------
# random-effects marginal
# ---------------------------------------------------------------------------


def marginal_from_stats(n_obs, st, stt, rr, v0, v1, d0, d1, sigma2):
    """Gaussian random-effects marginal from per-series sufficient statistics.

    For a series with design rows ``(1, t)`` and residuals ``r = y - mean``:
    ``n_obs, st, stt`` are ``n, sum t, sum t^2``; ``rr = r'r``;
    ``v0, v1 = sum r, sum t r``; ``d0, d1`` the random-effect variances.
    Returns ``log N(r; 0, Z diag(d) Z' + sigma2 I)``.  Woodbury on the 2x2
    block keeps this valid as ``d -> 0``.
    """
    m00, m01, m11 = n_obs / sigma2, st / sigma2, stt / sigma2
    k00 = 1.0 + d0 * m00
    k01 = d0 * m01
    k10 = d1 * m01
    k11 = 1.0 + d1 * m11
    det_k = k00 * k11 - k01 * k10
    if np.any(det_k <= 0):
        raise FloatingPointError("marginal psa covariance is not positive definite")
    # x = K^{-1} D v
    dv0, dv1 = d0 * v0, d1 * v1
    x0 = (k11 * dv0 - k01 * dv1) / det_k
    x1 = (-k10 * dv0 + k00 * dv1) / det_k
    quad = rr / sigma2 - (v0 * x0 + v1 * x1) / (sigma2 * sigma2)
    logdet = n_obs * np.log(sigma2) + np.log(det_k)
    return -0.5 * (n_obs * LOG_2PI + logdet + quad)


def psa_marginal_loglik_batch(times, values, age_std, mu, tau2, beta_age, sigma2):
    """``log N(y; beta*age + Z mu, Z diag(tau2) Z' + sigma2 I)`` per draw.

    ``mu`` and ``tau2`` have shape ``(J, 2)``; scalars broadcast.
    """
    times = np.asarray(times, dtype=float)
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    tau2 = np.atleast_2d(np.asarray(tau2, dtype=float))
    shape = np.broadcast_shapes(mu.shape[:-1], np.shape(beta_age), np.shape(sigma2))
    if times.size == 0:
        return np.zeros(shape)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise FloatingPointError("marginal psa covariance is not positive definite (sigma2 <= 0)")
    resid = (
        np.asarray(values, dtype=float)
        - np.asarray(beta_age, dtype=float)[..., None] * age_std
        - mu[..., 0:1]
        - mu[..., 1:2] * times
    )
    return marginal_from_stats(
        times.size,
        times.sum(),
        (times * times).sum(),
        (resid * resid).sum(axis=-1),
        resid.sum(axis=-1),
        (resid * times).sum(axis=-1),
        tau2[..., 0],
        tau2[..., 1],
        sigma2,
    )


def marginal_class_loglik_batch(record: PatientRecord, eta: int, beta_age, mu, tau2, sigma2, gamma0, gamma1):
    """Class-conditional marginal log-likelihood per draw.

    ``mu``/``tau2`` are full ``(J, 2, 2)`` arrays; the class slice is taken here.
    """
    mu = np.asarray(mu, dtype=float)
    tau2 = np.asarray(tau2, dtype=float)
    out = psa_marginal_loglik_batch(
        record.psa_times, record.psa_values, record.age_std, mu[..., eta, :], tau2[..., eta, :], beta_age, sigma2
    )
    n_pos, n_neg = record.biopsy_counts
    out = out + biopsy_loglik_batch(n_pos, n_neg, eta, gamma0, gamma1)
    if record.observed_class is not None:
        out = out + class_label_loglik(record.observed_class, eta)
    return out


def marginal_class_loglik(record: PatientRecord, eta: int, params: PopulationParams) -> float:
    """``log of the integral over u of f(y | eta, u, theta) N(u; mu[eta], diag(tau2[eta])) du``.

    The class prior is deliberately left out; callers combine the two classes.
    """
    if eta not in (0, 1):
        raise ValidationError("eta must be 0 or 1")
    value = marginal_class_loglik_batch(
        record,
        eta,
        np.array([params.beta_age]),
        params.mu_array[None],
        params.tau2_array[None],
        np.array([params.sigma2]),
        params.gamma0,
        params.gamma1,
    )
    return float(value[0])


def class_posterior_batch(record: PatientRecord, rho, beta_age, mu, tau2, sigma2, gamma0, gamma1):
    """Per-draw ``P(eta = 1 | y, theta_j)`` and log marginal likelihood ``log p(y | theta_j)``."""
    rho = np.asarray(rho, dtype=float)
    l1 = marginal_class_loglik_batch(record, 1, beta_age, mu, tau2, sigma2, gamma0, gamma1)
    l0 = marginal_class_loglik_batch(record, 0, beta_age, mu, tau2, sigma2, gamma0, gamma1)
    with np.errstate(divide="ignore"):
        a1 = np.log(rho) + l1
        a0 = np.log1p(-rho) + l0
    log_marg = np.logaddexp(a0, a1)
    if np.any(~np.isfinite(log_marg)):
        # both classes impossible for some draw; leave prob at the prior there
        prob = np.where(np.isfinite(log_marg), np.exp(a1 - np.where(np.isfinite(log_marg), log_marg, 0.0)), rho)
    else:
        prob = np.exp(a1 - log_marg)
    return prob, log_marg


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------


def read_records(path) -> list[PatientRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            records.append(PatientRecord.from_dict(data))
    return records


def write_records(path, records: Iterable[PatientRecord]):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_latents(path) -> list[PatientLatents]:
    with open(path) as fh:
        return [PatientLatents.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_latents(path, latents: Iterable[PatientLatents]):
    with open(path, "w") as fh:
        for lat in latents:
            fh.write(json.dumps(lat.to_dict(), sort_keys=True) + "\n")


def load_json(path, cls):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    return cls.from_dict(data)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
