"""Command-line workflow: simulate -> fit -> cache -> predict/update -> evaluate.

Every subcommand writes new files only, records them in the workspace
manifest, and on failure exits with status 2 and a JSON error object
(``{"error": CODE, "message": ...}``) on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alternatives import (
    conditional_posterior_estimate,
    grid_oracle,
    rao_blackwell_is,
    rejection_sample,
)
from .errors import CappedESSError, DegenerateWeightsError, LatentUpdateError, ValidationError
from .evaluation import ISSettings, MCMCSettings, METHODS, agreement_experiment, ess_deviation_table, write_report
from .importance import (
    DEFAULT_ESS_THRESHOLD,
    DEFAULT_GROWTH,
    DEFAULT_INITIAL_M,
    dynamic_update,
    generate_proposals,
    load_cache,
    save_cache,
    weigh_new_observations,
    weigh_new_patient,
)
from .manifest import WorkspaceManifest
from .mcmc import fit, summarize
from .model import ModelConfig, ObservationBlock, PatientRecord, load_json, read_records, write_latents, write_records
from .simulate import SimConfig, simulate_cohort
from .store import file_digest, load_sample, save_sample, sidecar_path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _fresh(path) -> Path:
    path = Path(path)
    if path.exists():
        raise ValidationError(f"{path} already exists; outputs are never overwritten")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _emit(obj, out=None):
    text = json.dumps(obj, sort_keys=True, indent=2)
    if out:
        with open(_fresh(out), "w") as fh:
            fh.write(text + "\n")
    print(text)


def _read_patients(path) -> list[PatientRecord]:
    """A single JSON object or JSON lines."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return read_records(path)
    if isinstance(data, list):
        return [PatientRecord.from_dict(d) for d in data]
    return [PatientRecord.from_dict(data)]


def _manifest(args) -> WorkspaceManifest:
    return WorkspaceManifest(args.workspace, __version__)


def _load_store(args, path, latents=True):
    _manifest(args).verify(path)
    return load_sample(path, latents=latents)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    config = SimConfig.load(args.config) if args.config else SimConfig()
    changes = {"seed": args.seed}
    if args.n is not None:
        changes["n_patients"] = args.n
    config = SimConfig.from_dict({**config.to_dict(), **changes})
    out = _fresh(args.out)
    truth = _fresh(args.truth) if args.truth else None
    records, latents = simulate_cohort(config)
    write_records(out, records)
    ws = _manifest(args)
    ws.append("cohort", out, "simulate", seed=args.seed, config=config.to_dict())
    if truth:
        write_latents(truth, latents)
        ws.append("truth", truth, "simulate", seed=args.seed, config=config.to_dict())
    _emit({"cohort": str(out), "patients": len(records), "digest": file_digest(out)})


def cmd_fit(args):
    config = load_json(args.config, ModelConfig) if args.config else ModelConfig()
    records = read_records(args.cohort)
    out = _fresh(args.out)
    _fresh(sidecar_path(out))
    sample = fit(records, config, args.chains, args.iters, args.burn_in, args.thin, args.seed)
    digest = save_sample(sample, out)
    settings = {"chains": args.chains, "iters": args.iters, "burn_in": args.burn_in, "thin": args.thin,
                "model": config.to_dict()}
    _manifest(args).append("store", out, "fit", seed=args.seed, config=settings,
                           inputs={args.cohort: file_digest(args.cohort)}, digest=digest)
    _emit({"store": str(out), "digest": digest, "draws": sample.J, "patients": sample.n})


def cmd_cache(args):
    store = _load_store(args, args.store)
    out = _fresh(args.out)
    cache = generate_proposals(store, args.per_draw, args.seed)
    digest = save_cache(cache, out)
    _manifest(args).append("cache", out, "cache-proposals", seed=args.seed,
                           config={"per_draw": args.per_draw}, inputs={args.store: cache.store_digest}, digest=digest)
    _emit({"cache": str(out), "digest": digest, "proposals": cache.size, "store_digest": cache.store_digest})


def _result(wset, strict: bool) -> dict:
    if wset.degenerate and wset.ess == 0:
        raise DegenerateWeightsError(wset.diagnostic or "every proposal has zero weight")
    if wset.capped and strict:
        raise CappedESSError(wset.diagnostic)
    out = {
        "id": wset.target_id,
        "risk": wset.risk,
        "risk_se": wset.risk_se,
        "ess": wset.ess,
        "proposals_used": wset.size,
        "generations": wset.generation,
        "capped": wset.capped,
        "degenerate": wset.degenerate,
        "elapsed_ms": wset.elapsed_ms,
    }
    if wset.diagnostic:
        out["diagnostic"] = wset.diagnostic
    if wset.capped or wset.degenerate:
        print(json.dumps({"warning": "DEGENERATE_WEIGHTS" if wset.degenerate else "CAPPED_ESS",
                          "id": wset.target_id, "message": wset.diagnostic}), file=sys.stderr)
    return out


def cmd_predict(args):
    store = _load_store(args, args.store)
    _manifest(args).verify(args.cache)
    cache = load_cache(args.cache)
    results = []
    for record in _read_patients(args.patient):
        if args.dynamic:
            wset = dynamic_update(record, store, cache, args.initial, args.ess_threshold, DEFAULT_GROWTH, args.max)
        else:
            wset = weigh_new_patient(cache, store, record, args.proposals)
        results.append(_result(wset, args.strict))
    _emit(results[0] if len(results) == 1 else results, args.out)


def cmd_update(args):
    store = _load_store(args, args.store)
    new_obs = load_json(args.new_obs, ObservationBlock)
    if args.dynamic:
        if args.seed is None:
            raise ValidationError("--seed is required with --dynamic")
        wset = dynamic_update((args.id, new_obs), store, None, min(args.initial, store.J), args.ess_threshold,
                              DEFAULT_GROWTH, None, args.seed)
    else:
        wset = weigh_new_observations(store, args.id, new_obs)
    _emit(_result(wset, args.strict), args.out)


def cmd_oracle(args):
    store = _load_store(args, args.store, latents=False)
    records = _read_patients(args.patient)
    draws = None
    if args.draws is not None and args.draws < store.J:
        if args.seed is None:
            raise ValidationError("--seed is required to subsample draws")
        draws = np.sort(np.random.default_rng(args.seed).choice(store.J, args.draws, replace=False))
    results = []
    for record in records:
        if args.method == "rs":
            if args.cache is None or args.seed is None:
                raise ValidationError("--method rs needs --cache and --seed")
            cache = load_cache(args.cache)
            rs = rejection_sample(cache, store, record, args.seed)
            out = {"risk": rs.risk, "diagnostics": {"acceptance_rate": rs.acceptance_rate,
                   "expected_rate": rs.expected_rate, "accepted": rs.n_accepted, "proposals": rs.proposals,
                   "risk_se": rs.risk_se}}
        elif args.method == "wu":
            out = {"risk": conditional_posterior_estimate(store, record, draws), "diagnostics": {}}
        elif args.method == "rbis":
            risk, ess = rao_blackwell_is(store, record, draws)
            out = {"risk": risk, "diagnostics": {"ess": ess}}
        else:
            risk = grid_oracle(record, store, n_grid=args.grid, draws=draws, reweight=args.reweight, tol=args.tol)
            out = {"risk": risk, "diagnostics": {"grid": args.grid, "refined_grid": 2 * args.grid - 1,
                                                 "reweight": args.reweight}}
        out["id"] = record.id
        out["diagnostics"]["draws"] = store.J if draws is None else int(draws.size)
        results.append(out)
    _emit(results[0] if len(results) == 1 else results, args.out)


def cmd_evaluate(args):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    records = read_records(args.cohort)
    out_dir = Path(args.out)
    for name in ("report.csv", "report.json"):
        _fresh(out_dir / name)
    config = load_json(args.config, ModelConfig) if args.config else ModelConfig()
    mcmc = MCMCSettings(args.chains, args.iters, args.burn_in, args.thin, config)
    budgets = tuple(int(b) for b in args.fixed_budgets.split(",") if b.strip()) if args.fixed_budgets else ()
    is_cfg = ISSettings(args.per_draw, args.initial, args.ess_threshold, DEFAULT_GROWTH, args.max, budgets)
    report = agreement_experiment(records, args.holdouts, mcmc, is_cfg, methods, args.seed, args.workers)
    csv_path, json_path = write_report(report, out_dir, include_timing=not args.omit_timing)
    ws = _manifest(args)
    inputs = {args.cohort: file_digest(args.cohort)}
    settings = {"methods": methods, "holdouts": args.holdouts, "mcmc": mcmc.to_dict(), "is": is_cfg.to_dict(),
                "omit_timing": args.omit_timing}
    ws.append("report", csv_path, "evaluate", seed=args.seed, config=settings, inputs=inputs)
    ws.append("report-aggregates", json_path, "evaluate", seed=args.seed, config=settings, inputs=inputs)
    summary = {"report": str(csv_path), "aggregates": report.aggregates()}
    if "is" in methods:
        summary["ess_bins"] = ess_deviation_table(report)
    _emit(summary)


def cmd_summarize(args):
    store = _load_store(args, args.store, latents=False)
    rows = summarize(store, args.interval)
    _emit({"draws": store.J, "patients": store.n, "meta": {k: v for k, v in store.meta.items()
                                                           if not k.startswith("_")}, "parameters": rows}, args.out)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentupdate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--workspace", default=".", help="directory holding the manifest (default: current)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a cohort")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--config", help="SimConfig JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="write true latents here")
    s.set_defaults(func=cmd_simulate)

    def mcmc_flags(q):
        q.add_argument("--chains", type=int, default=4)
        q.add_argument("--iters", type=int, default=5000)
        q.add_argument("--burn-in", type=int, default=1000)
        q.add_argument("--thin", type=int, default=1)
        q.add_argument("--config", help="ModelConfig JSON (prior hyperparameters)")

    s = sub.add_parser("fit", help="MCMC fit of a cohort into a posterior store")
    s.add_argument("--cohort", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    mcmc_flags(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("cache-proposals", help="pre-generate new-patient proposals")
    s.add_argument("--store", required=True)
    s.add_argument("--per-draw", type=int, default=10)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cache)

    def is_flags(q, max_default):
        q.add_argument("--dynamic", action="store_true")
        q.add_argument("--ess-threshold", type=float, default=DEFAULT_ESS_THRESHOLD)
        q.add_argument("--initial", type=int, default=DEFAULT_INITIAL_M)
        q.add_argument("--strict", action="store_true", help="fail with CAPPED_ESS instead of flagging")
        q.add_argument("--out")
        if max_default:
            q.add_argument("--max", type=int, default=max_default)

    s = sub.add_parser("predict-new", help="risk for new patients from a store and proposal cache")
    s.add_argument("--store", required=True)
    s.add_argument("--cache", required=True)
    s.add_argument("--patient", required=True, help="patient JSON object or JSON lines")
    s.add_argument("--proposals", type=int, help="fixed mode: weigh this many cached proposals")
    is_flags(s, 5_000_000)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("update-patient", help="reweigh a fitted patient's draws for new measurements")
    s.add_argument("--store", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--new-obs", required=True)
    s.add_argument("--seed", type=int, help="required with --dynamic (draw order)")
    is_flags(s, None)
    s.set_defaults(func=cmd_update)

    s = sub.add_parser("oracle", help="cross-check estimators")
    s.add_argument("--store", required=True)
    s.add_argument("--patient", required=True)
    s.add_argument("--method", choices=("rs", "wu", "rbis", "grid"), required=True)
    s.add_argument("--cache", help="proposal cache (rs)")
    s.add_argument("--seed", type=int, help="required for rs and for --draws subsampling")
    s.add_argument("--draws", type=int, help="use a random subset of this many draws")
    s.add_argument("--grid", type=int, default=161)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--reweight", action="store_true", help="grid: weight draws by marginal likelihood")
    s.add_argument("--out")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("evaluate", help="holdout agreement experiment")
    s.add_argument("--cohort", required=True)
    s.add_argument("--holdouts", type=int, required=True)
    s.add_argument("--methods", default=",".join(METHODS))
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    mcmc_flags(s)
    s.add_argument("--per-draw", type=int, default=10)
    s.add_argument("--initial", type=int, default=DEFAULT_INITIAL_M)
    s.add_argument("--ess-threshold", type=float, default=DEFAULT_ESS_THRESHOLD)
    s.add_argument("--max", type=int, default=5_000_000)
    s.add_argument("--fixed-budgets", default="5000,200000", help="comma-separated; empty for none")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--omit-timing", action="store_true", help="leave elapsed_ms blank (byte-stable output)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("summarize", help="posterior summary table")
    s.add_argument("--store", required=True)
    s.add_argument("--interval", type=float, default=0.95)
    s.add_argument("--out")
    s.set_defaults(func=cmd_summarize)
    return p


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except LatentUpdateError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": "VALIDATION", "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
