"""Synthetic active-surveillance cohorts drawn from the model."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .model import (
    LOGIT_CLAMP,
    ObservationBlock,
    PatientLatents,
    PatientRecord,
    PopulationParams,
    SeedLike,
    as_generator,
    sample_latents,
    sigmoid,
    _check_keys,
)

# experimental knobs only; not estimates from any real cohort
DEFAULT_TRUE_PARAMS = PopulationParams(
    rho=0.3,
    beta_age=0.1,
    mu=((1.5, 0.02), (1.9, 0.25)),
    tau2=((0.25, 0.01), (0.25, 0.02)),
    sigma2=0.08,
    gamma0=-2.2,
    gamma1=1.6,
)


@dataclass(frozen=True)
class SimConfig:
    """Cohort simulation settings.

    PSA is measured on a ``psa_spacing`` grid with per-visit uniform jitter of
    ``+/- psa_jitter`` years; each patient has ``1 + Poisson(psa_mean_count - 1)``
    PSA visits.  Biopsies are annual, ``Poisson(biopsy_mean_count)`` of them.
    """

    n_patients: int = 200
    params: PopulationParams = DEFAULT_TRUE_PARAMS
    psa_mean_count: float = 10.0
    psa_spacing: float = 0.5
    psa_jitter: float = 1.0 / 12.0
    biopsy_mean_count: float = 3.0
    biopsy_spacing: float = 1.0
    frac_class_observed: float = 0.2
    age_mean: float = 0.0
    age_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if int(self.n_patients) != self.n_patients or self.n_patients < 1:
            raise ValidationError("n_patients must be a positive integer")
        if not 0.0 <= self.frac_class_observed <= 1.0:
            raise ValidationError("frac_class_observed must lie in [0, 1]")
        if self.age_sd < 0 or self.psa_jitter < 0:
            raise ValidationError("standard deviations and jitter must be >= 0")
        if self.psa_mean_count < 1 or self.biopsy_mean_count < 0:
            raise ValidationError("psa_mean_count must be >= 1 and biopsy_mean_count >= 0")
        if self.psa_spacing <= 0 or self.biopsy_spacing <= 0:
            raise ValidationError("visit spacing must be positive")
        if 2 * self.psa_jitter >= self.psa_spacing:
            raise ValidationError("psa_jitter must be less than half the spacing")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["params"] = self.params.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimConfig":
        _check_keys("SimConfig", data, cls.__dataclass_fields__, ())
        data = dict(data)
        if "params" in data:
            data["params"] = PopulationParams.from_dict(data["params"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def patient_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one patient, derived from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _simulate_psa(times, age_std, latents: PatientLatents, params: PopulationParams, rng):
    mean = params.beta_age * age_std + latents.u[0] + latents.u[1] * times
    return mean + np.sqrt(params.sigma2) * rng.standard_normal(times.size)


def _simulate_biopsies(n, latents: PatientLatents, params: PopulationParams, rng):
    logit = np.clip(params.gamma0 + params.gamma1 * latents.eta, -LOGIT_CLAMP, LOGIT_CLAMP)
    return (rng.random(n) < sigmoid(logit)).astype(int)


def simulate_patient(config: SimConfig, index: int) -> tuple[PatientRecord, PatientLatents]:
    rng = patient_rng(config.seed, index)
    params = config.params
    age = config.age_mean + config.age_sd * rng.standard_normal()
    latents = sample_latents(params, rng)

    n_psa = 1 + rng.poisson(config.psa_mean_count - 1.0)
    jitter = rng.uniform(-config.psa_jitter, config.psa_jitter, n_psa)
    psa_times = np.maximum(np.arange(n_psa) * config.psa_spacing + jitter, 0.0)
    psa_values = _simulate_psa(psa_times, age, latents, params, rng)

    n_biopsy = rng.poisson(config.biopsy_mean_count)
    biopsy_times = config.biopsy_spacing * np.arange(1, n_biopsy + 1)
    results = _simulate_biopsies(n_biopsy, latents, params, rng)

    observed = latents.eta if rng.random() < config.frac_class_observed else None
    record = PatientRecord(
        id=f"p{index:05d}",
        age_std=age,
        psa=tuple(zip(psa_times.tolist(), psa_values.tolist())),
        biopsies=tuple(zip(biopsy_times.tolist(), results.tolist())),
        observed_class=observed,
    )
    return record, latents


def simulate_cohort(config: SimConfig) -> tuple[list[PatientRecord], list[PatientLatents]]:
    """Simulate ``config.n_patients`` patients; returns records and true latents."""
    pairs = [simulate_patient(config, i) for i in range(config.n_patients)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def append_observations(
    record: PatientRecord,
    latents: PatientLatents,
    params: PopulationParams,
    new_times: Sequence[float],
    kinds: Sequence[str],
    seed: SeedLike = None,
) -> PatientRecord:
    """Extend ``record`` with freshly simulated measurements.

    ``kinds[i]`` is ``"psa"`` or ``"biopsy"`` for ``new_times[i]``.  The input
    record is left untouched.
    """
    if len(new_times) != len(kinds):
        raise ValidationError("new_times and kinds must have equal length")
    if not len(new_times):
        return record
    unknown = set(kinds) - {"psa", "biopsy"}
    if unknown:
        raise ValidationError(f"unknown observation kinds: {sorted(unknown)}")
    rng = as_generator(seed)
    times = np.asarray(new_times, dtype=float)
    kinds = np.asarray(kinds)
    psa_t = times[kinds == "psa"]
    bx_t = times[kinds == "biopsy"]
    block = ObservationBlock(
        psa=tuple(zip(psa_t.tolist(), _simulate_psa(psa_t, record.age_std, latents, params, rng).tolist())),
        biopsies=tuple(zip(bx_t.tolist(), _simulate_biopsies(bx_t.size, latents, params, rng).tolist())),
    )
    return record.extended(block)


def sim_params(config: SimConfig, **changes) -> SimConfig:
    """Copy of ``config`` with selected population parameters replaced."""
    return replace(config, params=replace(config.params, **changes))
