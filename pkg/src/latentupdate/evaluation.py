"""Agreement between fast updates and full MCMC refits on held-out patients.

The base cohort is fitted once.  For every held-out patient the reference
risk comes from a refit on base + that patient, and each fast method
(importance sampling, rejection sampling, the conditional-posterior and
Rao-Blackwellized estimators) works from the base fit alone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .alternatives import rao_blackwell_is, conditional_posterior_estimate, rejection_from_weights
from .errors import DegenerateWeightsError, ValidationError
from .importance import dynamic_update, generate_proposals, weigh_new_patient
from .mcmc import PosteriorSample, fit, patient_risk, summarize
from .model import ModelConfig, PatientRecord

ROW_FIELDS = ("id", "risk_mcmc", "risk_is", "risk_rs", "risk_wu", "ess", "proposals_used", "elapsed_ms")
METHODS = ("is", "rs", "wu", "rbis")


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit seed from ``seed`` and string keys (order-free across holdouts)."""
    text = "/".join([str(int(seed))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class MCMCSettings:
    chains: int = 4
    iters: int = 5000
    burn_in: int = 1000
    thin: int = 1
    config: ModelConfig = ModelConfig()

    def run(self, cohort, seed) -> PosteriorSample:
        return fit(cohort, self.config, self.chains, self.iters, self.burn_in, self.thin, seed)

    def to_dict(self):
        d = asdict(self)
        d["config"] = self.config.to_dict()
        return d


@dataclass(frozen=True)
class ISSettings:
    """Importance-sampling settings.

    ``fixed_budgets`` are extra single-round runs (no expansion) reported
    alongside the dynamic mode.
    """

    m_per_draw: int = 10
    initial_m: int = 50_000
    ess_threshold: float = 1000.0
    growth_factor: float = 10.0
    max_m: Optional[int] = 5_000_000
    fixed_budgets: tuple = (5_000, 200_000)

    def to_dict(self):
        d = asdict(self)
        d["fixed_budgets"] = list(self.fixed_budgets)
        return d


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _pair_arrays(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValidationError("need two equal-length nonempty vectors")
    if np.any((a < 0) | (a > 1)) or np.any((b < 0) | (b > 1)):
        raise ValidationError("probabilities must lie in [0, 1]")
    return a, b


def rmsd(a, b) -> float:
    a, b = _pair_arrays(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def diff_quantiles(a, b, q: float) -> float:
    """Nearest-rank ``q``-quantile of ``|a - b|`` (``q=1`` gives the max)."""
    if not 0.0 <= q <= 1.0:
        raise ValidationError("q must lie in [0, 1]")
    a, b = _pair_arrays(a, b)
    d = np.sort(np.abs(a - b))
    rank = max(1, math.ceil(q * d.size))
    return float(d[rank - 1])


def max_abs_diff(a, b) -> float:
    return diff_quantiles(a, b, 1.0)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class AgreementReport:
    """Per-holdout rows plus method extras and the run configuration.

    ``rows`` hold exactly :data:`ROW_FIELDS` (None for a method not run);
    ``extras`` hold per-holdout values for additional methods and
    diagnostics, keyed by id.  Aggregates are always recomputed from these.
    """

    rows: list
    extras: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    base_store: Optional[PosteriorSample] = field(default=None, repr=False, compare=False)

    def column(self, name) -> np.ndarray:
        if name in ROW_FIELDS:
            values = [r[name] for r in self.rows]
        else:
            values = [self.extras[r["id"]].get(name) for r in self.rows]
        return np.array([np.nan if v is None else v for v in values], dtype=float)

    def method_columns(self) -> dict:
        cols = {"is": "risk_is", "rs": "risk_rs", "wu": "risk_wu", "rbis": "risk_rbis"}
        for m in self.config.get("is", {}).get("fixed_budgets", []):
            cols[f"is_fixed_{m}"] = f"risk_is_fixed_{m}"
        return cols

    def aggregates(self) -> dict:
        ref = self.column("risk_mcmc")
        out = {}
        for method, col in self.method_columns().items():
            est = self.column(col)
            if np.all(np.isnan(est)):
                continue
            ok = ~np.isnan(est)
            out[method] = {
                "n": int(ok.sum()),
                "rmsd": rmsd(ref[ok], est[ok]),
                "max_abs_diff": max_abs_diff(ref[ok], est[ok]),
                "q99_abs_diff": diff_quantiles(ref[ok], est[ok], 0.99),
            }
        flags = [self.extras[r["id"]] for r in self.rows]
        out["capped"] = sum(bool(f.get("capped")) for f in flags)
        out["degenerate"] = sum(bool(f.get("degenerate")) for f in flags)
        return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, str):
        return value
    return repr(float(value))


def write_report(report: AgreementReport, directory, include_timing: bool = True) -> tuple[Path, Path]:
    """Write ``report.csv`` (rows) and ``report.json`` (aggregates, extras, config).

    Floats are written with ``repr`` so values read back bit-exactly.
    Existing files are never overwritten.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = directory / "report.csv", directory / "report.json"
    for p in (csv_path, json_path):
        if p.exists():
            raise ValidationError(f"{p} already exists; outputs are never overwritten")
    with open(csv_path, "x", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for row in report.rows:
            w.writerow([_fmt(row[k] if k != "elapsed_ms" or include_timing else None) for k in ROW_FIELDS])
    extras = report.extras
    if not include_timing:
        extras = {k: {n: v for n, v in e.items() if not n.startswith("elapsed_")} for k, e in extras.items()}
    doc = {"aggregates": report.aggregates(), "extras": extras, "config": report.config}
    if include_timing:
        doc["timing"] = timing_report(report)
    with open(json_path, "x") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return csv_path, json_path


def _parse(name, text):
    if text == "":
        return None
    if name == "id":
        return text
    if name == "proposals_used":
        return int(text)
    return float(text)


def read_report(directory) -> AgreementReport:
    directory = Path(directory)
    with open(directory / "report.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROW_FIELDS:
            raise ValidationError("report.csv has unexpected columns")
        rows = [{k: _parse(k, r[k]) for k in ROW_FIELDS} for r in reader]
    with open(directory / "report.json") as fh:
        doc = json.load(fh)
    return AgreementReport(rows=rows, extras=doc["extras"], config=doc["config"])


# ---------------------------------------------------------------------------
# derived tables
# ---------------------------------------------------------------------------


def is_modes(report: AgreementReport) -> list:
    """``(ess column, risk column)`` for every importance-sampling mode in the report."""
    modes = [("ess", "risk_is")]
    for m in report.config.get("is", {}).get("fixed_budgets", []):
        modes.append((f"ess_is_fixed_{m}", f"risk_is_fixed_{m}"))
    return modes


def ess_deviation_table(report: AgreementReport, bin_edges=None, n_bins: int = 4, modes=None):
    """Mean ``|risk - risk_mcmc|`` per log-spaced ESS bin.

    ``modes`` lists ``(ess column, risk column)`` pairs whose points are
    pooled; by default every importance-sampling mode in the report, which
    spreads the points over several decades of ESS.  Bins are ``[lo, hi)``
    except the last, which is closed.  Empty bins get ``mean_abs_diff = None``.
    """
    if not report.rows:
        raise ValidationError("report has no rows")
    modes = is_modes(report) if modes is None else modes
    ref = report.column("risk_mcmc")
    ess = np.concatenate([report.column(e) for e, _ in modes])
    dev = np.concatenate([np.abs(report.column(r) - ref) for _, r in modes])
    ok = ~(np.isnan(ess) | np.isnan(dev))
    ess, dev = ess[ok], dev[ok]
    if ess.size == 0:
        raise ValidationError("no rows with both an ess and a risk estimate")
    if bin_edges is None:
        lo, hi = ess.min(), ess.max()
        if hi <= lo:
            hi = lo * (1 + 1e-9) + 1e-9
        bin_edges = np.geomspace(lo, hi, n_bins + 1)
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValidationError("bin edges must be increasing with at least two entries")
    table = []
    for k in range(edges.size - 1):
        last = k == edges.size - 2
        member = (ess >= edges[k]) & ((ess <= edges[k + 1]) if last else (ess < edges[k + 1]))
        table.append(
            {
                "lower": float(edges[k]),
                "upper": float(edges[k + 1]),
                "count": int(member.sum()),
                "mean_abs_diff": float(dev[member].mean()) if member.any() else None,
            }
        )
    return table


def count_inversions(table) -> int:
    """Adjacent increases of mean deviation between consecutive nonempty bins."""
    means = [b["mean_abs_diff"] for b in table if b["mean_abs_diff"] is not None]
    return sum(b > a for a, b in zip(means, means[1:]))


def _summary(values):
    v = np.asarray([x for x in values if x is not None and not np.isnan(x)], dtype=float)
    if v.size == 0:
        return None
    q25, q75 = np.quantile(v, [0.25, 0.75])
    return {"n": int(v.size), "min": float(v.min()), "q25": float(q25), "q75": float(q75), "max": float(v.max())}


def timing_report(report: AgreementReport) -> dict:
    """Per-method min / interquartile range / max of elapsed milliseconds."""
    out = {}
    is_col = report.column("elapsed_ms")
    if not np.all(np.isnan(is_col)):
        out["is"] = _summary(is_col)
    names = sorted({k for e in report.extras.values() for k in e if k.startswith("elapsed_")})
    for name in names:
        s = _summary(report.column(name))
        if s is not None:
            out[name[len("elapsed_"):]] = s
    return out


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def select_holdouts(cohort: Sequence[PatientRecord], holdout_count: int, seed: int) -> list[str]:
    """Ids of held-out patients: unlabeled patients first, chosen by ``seed``."""
    if not 1 <= holdout_count < len(cohort):
        raise ValidationError("need 1 <= holdout_count < cohort size")
    ids = sorted(r.id for r in cohort)
    labeled = {r.id for r in cohort if r.observed_class is not None}
    unlabeled = [i for i in ids if i not in labeled]
    rest = [i for i in ids if i in labeled]
    rng = np.random.default_rng(derive_seed(seed, "holdouts"))
    pool = list(rng.permutation(unlabeled)) + list(rng.permutation(rest))
    return sorted(str(i) for i in pool[:holdout_count])


def _refit_risk(args):
    base, record, mcmc, seed = args
    sample = mcmc.run(list(base) + [record], derive_seed(seed, "refit", record.id))
    return patient_risk(sample, record.id, record)


def reference_risks(base, holdouts, mcmc: MCMCSettings, seed: int, workers: int = 1) -> dict:
    """Risk of each holdout from an MCMC refit on ``base`` + that patient."""
    jobs = [(base, rec, mcmc, seed) for rec in holdouts]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            values = list(pool.map(_refit_risk, jobs))
    else:
        values = [_refit_risk(j) for j in jobs]
    return {rec.id: v for rec, v in zip(holdouts, values)}


def _fast_methods(store, cache, record, is_cfg: ISSettings, methods, seed):
    row = {k: None for k in ROW_FIELDS}
    row["id"] = record.id
    extra = {}
    if "is" in methods or "rs" in methods:
        t0 = time.perf_counter()
        wset = dynamic_update(
            record, store, cache, is_cfg.initial_m, is_cfg.ess_threshold, is_cfg.growth_factor,
            is_cfg.max_m if is_cfg.max_m is not None else cache.size,
        )
        elapsed = 1000 * (time.perf_counter() - t0)
        extra.update(capped=wset.capped, degenerate=wset.degenerate, generations=wset.generation)
        if wset.diagnostic:
            extra["diagnostic"] = wset.diagnostic
        if not (wset.degenerate and wset.ess == 0):
            if "is" in methods:
                row.update(risk_is=wset.risk, ess=wset.ess, proposals_used=wset.size, elapsed_ms=elapsed)
                extra["is_se"] = wset.risk_se
            if "rs" in methods:
                t0 = time.perf_counter()
                rs = rejection_from_weights(wset, derive_seed(seed, "rs", record.id))
                row["risk_rs"] = rs.risk
                extra.update(
                    rs_se=rs.risk_se, rs_accepted=rs.n_accepted, rs_rate=rs.acceptance_rate,
                    rs_expected_rate=rs.expected_rate, rs_rate_se=rs.rate_se, rs_proposals=rs.proposals,
                    elapsed_rs=1000 * (time.perf_counter() - t0),
                )
        for m in is_cfg.fixed_budgets:
            t0 = time.perf_counter()
            try:
                fixed = weigh_new_patient(cache, store, record, m)
            except DegenerateWeightsError:
                extra[f"risk_is_fixed_{m}"] = None
                continue
            extra[f"risk_is_fixed_{m}"] = fixed.risk
            extra[f"ess_is_fixed_{m}"] = fixed.ess
            extra[f"elapsed_is_fixed_{m}"] = 1000 * (time.perf_counter() - t0)
    if "wu" in methods:
        t0 = time.perf_counter()
        row["risk_wu"] = conditional_posterior_estimate(store, record)
        extra["elapsed_wu"] = 1000 * (time.perf_counter() - t0)
    if "rbis" in methods:
        t0 = time.perf_counter()
        extra["risk_rbis"], extra["ess_rbis"] = rao_blackwell_is(store, record)
        extra["elapsed_rbis"] = 1000 * (time.perf_counter() - t0)
    return row, extra


def agreement_experiment(
    cohort: Sequence[PatientRecord],
    holdout_count: int,
    mcmc: MCMCSettings = MCMCSettings(),
    is_settings: ISSettings = ISSettings(),
    methods: Sequence[str] = METHODS,
    seed: int = 0,
    workers: int = 1,
    references: Optional[dict] = None,
) -> AgreementReport:
    """Fit the base cohort, refit per holdout, and score every fast method.

    ``references`` may supply precomputed refit risks keyed by holdout id.
    Degenerate or capped weights are recorded in the extras, never raised.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValidationError(f"unknown methods: {sorted(unknown)}")
    hold_ids = select_holdouts(cohort, holdout_count, seed)
    by_id = {r.id: r for r in cohort}
    holdouts = [by_id[i] for i in hold_ids]
    base = [r for r in cohort if r.id not in set(hold_ids)]

    store = mcmc.run(base, derive_seed(seed, "base"))
    cache = generate_proposals(store, is_settings.m_per_draw, derive_seed(seed, "cache"))
    if references is None:
        references = reference_risks(base, holdouts, mcmc, seed, workers)

    rows, extras = [], {}
    for rec in holdouts:
        row, extra = _fast_methods(store, cache, rec, is_settings, methods, seed)
        row["risk_mcmc"] = references[rec.id]
        rows.append(row)
        extras[rec.id] = extra
    psr = [r["psr"] for r in summarize(store) if r["psr"] is not None]
    config = {
        "seed": int(seed),
        "holdout_count": int(holdout_count),
        "holdouts": hold_ids,
        "methods": list(methods),
        "mcmc": mcmc.to_dict(),
        "is": is_settings.to_dict(),
        "base_draws": store.J,
        "base_max_psr": max(psr) if psr else None,
        "cache_size": cache.size,
    }
    return AgreementReport(rows=rows, extras=extras, config=config, base_store=store)
