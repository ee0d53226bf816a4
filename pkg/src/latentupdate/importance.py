"""Fast posterior updates by importance sampling against a stored MCMC sample.

New patient: each stored draw ``theta_j`` is paired with candidate latents
drawn from the class/random-effect prior ``g(. | theta_j)``; with that
proposal the importance weight of a candidate reduces to the likelihood of
the new patient's data, ``f(y_new | b, theta_j)``.

New measurements on a fitted patient: the stored ``(theta_j, b_k_j)`` pairs
are reused as proposals and, because measurements are conditionally
independent given the latents, each weight is the likelihood of the new
measurements alone.

All weight arithmetic happens in log space.  Candidates can be generated
ahead of time (:class:`ProposalCache`) so that only weighing is on the
latency-critical path.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import DegenerateWeightsError, StaleCacheError, ValidationError
from .mcmc import PosteriorSample
from .model import (
    ObservationBlock,
    PatientRecord,
    check_block_order,
    log_obs_likelihood_batch,
    sample_latents_batch,
)
from .store import read_columns, sample_digest, write_columns

CACHE_MAGIC = b"LUCACHE\x00"
DEFAULT_INITIAL_M = 50_000
DEFAULT_ESS_THRESHOLD = 1000.0
DEFAULT_GROWTH = 10.0
_CHUNK = 100_000


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def normalize_log_weights(log_weights) -> np.ndarray:
    """Self-normalize log-weights with a max shift.

    Equal finite log-weights give exactly ``1/M``.  Raises
    :class:`DegenerateWeightsError` when no entry is finite.
    """
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0:
        raise DegenerateWeightsError("no proposals to weigh")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise DegenerateWeightsError("log-weights contain nan or +inf")
    top = lw.max()
    if top == -np.inf:
        raise DegenerateWeightsError("every proposal has zero weight")
    if np.all(lw == top):
        return np.full(lw.shape, 1.0 / lw.size)
    w = np.exp(lw - top)
    return w / w.sum()


def effective_sample_size(weights) -> float:
    """``1 / sum(w^2)`` for normalized weights."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.dot(w, w))


@dataclass(eq=False)
class WeightedProposalSet:
    """Weighted candidates for one target patient.

    ``draw_index[m]`` points into the posterior store; ``eta``/``u`` are the
    candidate latents.  ``capped`` means the proposal budget ran out before
    the ESS threshold was met; ``degenerate`` that fewer than two effective
    proposals remain (or none carry weight at all).
    """

    target_id: str
    draw_index: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    log_weights: np.ndarray
    weights: np.ndarray
    ess: float
    generation: int = 1
    round_times: list = field(default_factory=list)
    capped: bool = False
    degenerate: bool = False
    diagnostic: str = ""

    @property
    def size(self) -> int:
        return self.log_weights.shape[0]

    @property
    def risk(self) -> float:
        return posterior_functional(self, lambda eta, u, j: eta)

    @property
    def risk_se(self) -> float:
        return monte_carlo_se(self, self.eta.astype(float))

    @property
    def elapsed_ms(self) -> float:
        return 1000.0 * sum(self.round_times)


def _weighted_set(target_id, draw_index, eta, u, lw, **kw) -> WeightedProposalSet:
    w = normalize_log_weights(lw)
    return WeightedProposalSet(
        target_id=target_id, draw_index=draw_index, eta=eta, u=u, log_weights=lw, weights=w,
        ess=effective_sample_size(w), **kw,
    )


def posterior_functional(wset: WeightedProposalSet, functional: Callable) -> float:
    """``sum_m w_m * functional(eta_m, u_m, draw_index_m)``.

    ``functional`` is called once with the full candidate arrays and must
    return one value per candidate (or a scalar constant).
    """
    values = np.broadcast_to(np.asarray(functional(wset.eta, wset.u, wset.draw_index), dtype=float), wset.weights.shape)
    return float(np.dot(wset.weights, values))


def monte_carlo_se(wset: WeightedProposalSet, values) -> float:
    """Delta-method standard error of a self-normalized IS mean."""
    values = np.asarray(values, dtype=float)
    mean = float(np.dot(wset.weights, values))
    return float(math.sqrt(np.dot(wset.weights**2, (values - mean) ** 2)))


def new_patient_log_weights(store: PosteriorSample, record: PatientRecord, draw_index, eta, u) -> np.ndarray:
    """``log f(y | candidate, theta_j)`` for each candidate (chunked)."""
    out = np.empty(draw_index.shape[0])
    # overflowing residuals give -inf log-weights, which normalization handles
    with np.errstate(over="ignore"):
        for start in range(0, out.size, _CHUNK):
            sl = slice(start, start + _CHUNK)
            j = draw_index[sl]
            out[sl] = log_obs_likelihood_batch(
                record, eta[sl], u[sl], store.beta_age[j], store.sigma2[j], store.gamma0[j], store.gamma1[j]
            )
    return out


# ---------------------------------------------------------------------------
# proposal cache
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ProposalCache:
    """Candidate latents generated before any new data is seen.

    Candidates are laid out replicate-major: replicate ``r`` holds one
    candidate per stored draw, in a random draw order, generated from
    ``SeedSequence([seed, r])``.  The first ``m`` candidates are therefore
    always a spread-out subset, and replicates past ``m_per_draw`` can be
    produced on demand with the same stream.
    """

    store_digest: str
    m_per_draw: int
    seed: int
    J: int
    draw_index: np.ndarray
    eta: np.ndarray
    u: np.ndarray

    @property
    def size(self) -> int:
        return self.draw_index.shape[0]


def _replicate(store: PosteriorSample, seed: int, r: int):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(r)]))
    perm = rng.permutation(store.J)
    eta, u = sample_latents_batch(store.rho[perm], store.mu[perm], store.tau2[perm], rng)
    return perm.astype(np.int64), eta, u


def generate_proposals(store: PosteriorSample, m_per_draw: int, seed: int) -> ProposalCache:
    """Draw ``m_per_draw`` candidates from ``g(. | theta_j)`` for every stored draw."""
    if m_per_draw < 1:
        raise ValidationError("m_per_draw must be >= 1")
    parts = [_replicate(store, seed, r) for r in range(m_per_draw)]
    return ProposalCache(
        store_digest=sample_digest(store),
        m_per_draw=int(m_per_draw),
        seed=int(seed),
        J=store.J,
        draw_index=np.concatenate([p[0] for p in parts]),
        eta=np.concatenate([p[1] for p in parts]),
        u=np.concatenate([p[2] for p in parts]),
    )


def check_cache(cache: ProposalCache, store: PosteriorSample):
    if cache.store_digest != sample_digest(store) or cache.J != store.J:
        raise StaleCacheError("proposal cache was generated for a different posterior store")


def cache_proposals(cache: ProposalCache, store: PosteriorSample, m: int):
    """First ``m`` candidates, generating replicates beyond the cache if needed."""
    if m <= cache.size:
        return cache.draw_index[:m], cache.eta[:m], cache.u[:m]
    parts = [(cache.draw_index, cache.eta, cache.u)]
    r = cache.m_per_draw
    have = cache.size
    while have < m:
        parts.append(_replicate(store, cache.seed, r))
        have += store.J
        r += 1
    cat = [np.concatenate([p[k] for p in parts])[:m] for k in range(3)]
    return cat[0], cat[1], cat[2]


def save_cache(cache: ProposalCache, path) -> str:
    header = {"store_digest": cache.store_digest, "m_per_draw": cache.m_per_draw, "seed": cache.seed, "J": cache.J}
    cols = {"draw_index": cache.draw_index, "eta": cache.eta, "u": cache.u}
    return write_columns(path, CACHE_MAGIC, cache.size, 0, header, cols)


def load_cache(path, mmap: bool = True) -> ProposalCache:
    rows, _, header, cols = read_columns(path, CACHE_MAGIC, mmap=mmap)
    return ProposalCache(
        store_digest=header["store_digest"],
        m_per_draw=header["m_per_draw"],
        seed=header["seed"],
        J=header["J"],
        draw_index=cols["draw_index"],
        eta=cols["eta"],
        u=cols["u"],
    )


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------


def weigh_new_patient(
    cache: ProposalCache, store: PosteriorSample, record: PatientRecord, m: Optional[int] = None
) -> WeightedProposalSet:
    """Weigh the first ``m`` cached candidates (all by default) for a new patient."""
    check_cache(cache, store)
    m = cache.size if m is None else int(m)
    t0 = time.perf_counter()
    idx, eta, u = cache_proposals(cache, store, m)
    lw = new_patient_log_weights(store, record, idx, eta, u)
    wset = _weighted_set(record.id, idx, eta, u, lw)
    wset.degenerate = wset.ess < 2
    wset.round_times.append(time.perf_counter() - t0)
    return wset


def _update_weigher(store: PosteriorSample, patient_id, new_obs: ObservationBlock):
    k = store.index_of(patient_id)
    if not store.meta.get("_latents_loaded", True):
        raise ValidationError("store was loaded without latent draws")
    check_block_order(new_obs, store.last_psa[k], store.last_biopsy[k])
    new_record = PatientRecord(id=str(patient_id), age_std=float(store.patient_age[k]), psa=new_obs.psa, biopsies=new_obs.biopsies)

    def proposals(order):
        return order, np.asarray(store.eta[order, k]), np.asarray(store.u[order, k])

    def weigh(draw_index, eta, u):
        return new_patient_log_weights(store, new_record, draw_index, eta, u)

    return proposals, weigh


def weigh_new_observations(
    store: PosteriorSample, patient_id, new_obs: ObservationBlock
) -> WeightedProposalSet:
    """Reweigh a fitted patient's stored draws by the likelihood of new measurements."""
    t0 = time.perf_counter()
    proposals, weigh = _update_weigher(store, patient_id, new_obs)
    idx, eta, u = proposals(np.arange(store.J))
    if new_obs.empty:
        lw = np.zeros(store.J)
    else:
        lw = weigh(idx, eta, u)
    wset = _weighted_set(str(patient_id), idx, eta, u, lw)
    wset.degenerate = wset.ess < 2
    wset.round_times.append(time.perf_counter() - t0)
    return wset


def store_functional(store: PosteriorSample, patient_id, functional: Callable) -> float:
    """Unweighted posterior mean of ``functional`` for a fitted patient."""
    k = store.index_of(patient_id)
    idx = np.arange(store.J)
    wset = WeightedProposalSet(
        target_id=str(patient_id), draw_index=idx, eta=np.asarray(store.eta[:, k]), u=np.asarray(store.u[:, k]),
        log_weights=np.zeros(store.J), weights=np.full(store.J, 1.0 / store.J), ess=float(store.J),
    )
    return posterior_functional(wset, functional)


def dynamic_update(
    target: Union[PatientRecord, tuple],
    store: PosteriorSample,
    cache: Optional[ProposalCache] = None,
    initial_m: int = DEFAULT_INITIAL_M,
    ess_threshold: float = DEFAULT_ESS_THRESHOLD,
    growth_factor: float = DEFAULT_GROWTH,
    max_m: Optional[int] = None,
    seed: int = 0,
) -> WeightedProposalSet:
    """Weigh ``initial_m`` proposals, growing the set until the ESS threshold is met.

    ``target`` is either a new patient's :class:`PatientRecord` (proposals come
    from ``cache``, extended on demand past its end) or a
    ``(patient_id, ObservationBlock)`` pair for a fitted patient (proposals
    are the store's own draws in a ``seed``-shuffled order, so ``max_m``
    cannot exceed J).  Log-weights of earlier rounds are kept and the union
    is renormalized each round.
    """
    if growth_factor <= 1:
        raise ValidationError("growth_factor must be > 1")
    if isinstance(target, PatientRecord):
        if cache is None:
            raise ValidationError("a proposal cache is required for new patients")
        check_cache(cache, store)
        max_m = cache.size if max_m is None else int(max_m)
        target_id = target.id

        def proposals(m):
            return cache_proposals(cache, store, m)

        def weigh(idx, eta, u):
            return new_patient_log_weights(store, target, idx, eta, u)
    else:
        patient_id, new_obs = target
        target_id = str(patient_id)
        source, weigh_obs = _update_weigher(store, patient_id, new_obs)
        order = np.random.default_rng(seed).permutation(store.J)
        max_m = store.J if max_m is None else min(int(max_m), store.J)

        def proposals(m):
            return source(order[:m])

        def weigh(idx, eta, u):
            return np.zeros(idx.shape[0]) if new_obs.empty else weigh_obs(idx, eta, u)

    if not 1 <= initial_m <= max_m:
        raise ValidationError(f"need 1 <= initial_m ({initial_m}) <= max_m ({max_m})")

    lw = np.empty(0)
    times = []
    m, generation = 0, 0
    next_m = int(initial_m)
    while True:
        t0 = time.perf_counter()
        idx, eta, u = proposals(next_m)
        lw = np.concatenate([lw, weigh(idx[m:], eta[m:], u[m:])])
        m = next_m
        generation += 1
        finite = np.isfinite(lw).any()
        ess = effective_sample_size(normalize_log_weights(lw)) if finite else 0.0
        times.append(time.perf_counter() - t0)
        if ess >= ess_threshold or m >= max_m:
            break
        next_m = min(int(math.ceil(m * growth_factor)), max_m)

    capped = ess < ess_threshold
    if not finite:
        return WeightedProposalSet(
            target_id=target_id, draw_index=idx, eta=eta, u=u, log_weights=lw, weights=np.zeros(m), ess=0.0,
            generation=generation, round_times=times, capped=True, degenerate=True,
            diagnostic=f"all {m} proposals have zero likelihood",
        )
    wset = _weighted_set(target_id, idx, eta, u, lw, generation=generation, round_times=times, capped=capped)
    if capped:
        wset.diagnostic = f"ess {wset.ess:.1f} below threshold {ess_threshold:g} at max proposals {m}"
    if wset.ess < 2 and capped:
        wset.degenerate = True
    return wset
