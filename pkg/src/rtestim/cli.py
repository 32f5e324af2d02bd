"""Command-line entry point: ``rtestim <command> [options]``.

Every command writes ``manifest.json`` next to its outputs.  Exit codes:
0 success, 2 invalid input (schema or argument errors), 3 a fit failed its
convergence gate (outputs are still written), 4 missing replicates during
evaluation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .data import SchemaError, read_series, write_series
from .delays import ContinuousDelay, discretize_at_step
from .diagnostics import ConvergenceError, diagnose
from .fitting import FitResult, fit
from .metrics import EstimateSeries, score_methods, summarize_replicates, write_metrics
from .models import ModelSettings, build_model
from .priors import (
    DetectionPriorSpec,
    elicit_kappa,
    elicit_rho,
    prior_fragment,
    rho_prior_from_median,
    write_fragment,
)
from .sampler import PosteriorDraws, SamplerConfig, default_jobs
from .seir import SeirConfig, TestingScenario, scenario_presets, simulate
from .study import STUDY_R0_KNOTS

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_MISSING = 4

BASELINES = {"epiestim", "glm-pois", "glm-quasi"}


# --------------------------------------------------------------------------
# manifest


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    out_dir: Path
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    converged: bool | None = None
    errors: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def add_input(self, path):
        self.inputs[Path(path).name] = file_digest(path)

    def add_output(self, path):
        path = Path(path)
        self.outputs[str(path.relative_to(self.out_dir))] = file_digest(path)

    @property
    def config_digest(self):
        return hashlib.sha256(_canonical(self.config).encode()).hexdigest()

    def to_dict(self):
        return {
            "command": self.command,
            "config": self.config,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "converged": self.converged,
            "errors": self.errors,
            **self.extra,
        }

    def write(self):
        path = self.out_dir / "manifest.json"
        _write_json(self.to_dict(), path)
        return path


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------
# argument helpers


def _sampler(args):
    jobs = args.jobs if args.jobs is not None else default_jobs()
    base = SamplerConfig.preset(args.preset)
    return SamplerConfig(
        chains=args.chains,
        iterations=args.iterations if args.iterations is not None else base.iterations,
        warmup=args.warmup if args.warmup is not None else base.warmup,
        seed=args.seed,
        jobs=jobs,
        target_acceptance=args.target_acceptance,
    )


def _add_sampler_flags(p, target=0.8):
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--preset", choices=["simulation", "real-data"], default="simulation",
                   help="run length: 2000 or 6000 iterations, half of them warmup")
    p.add_argument("--iterations", type=int, default=None, help="draws per chain, warmup included")
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--target-acceptance", type=float, default=target)
    p.add_argument("--jobs", type=int, default=None, help="parallel chains (default: RT_ESTIM_THREADS or 1)")


def _load_settings(paths, method):
    """Merge ``--priors`` files: full settings objects or bare prior fragments."""
    model = method if method in ("gamma", "normal") else "gamma"
    settings = ModelSettings(model)
    for path in paths or []:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise SchemaError(f"{path}: expected a JSON object")
        if "model" in d or "priors" in d or "generation" in d or "latent" in d:
            d = dict(d)
            if d.get("model", model) != model:
                raise SchemaError(f"{path}: settings are for model {d['model']!r}, not {model!r}")
            d["model"] = model
            frag = d.pop("priors", {})
            settings = ModelSettings.from_dict({**settings.to_dict(), **d, "priors": {**settings.priors, **frag}})
        else:
            settings = settings.with_priors(d)
    return settings


# --------------------------------------------------------------------------
# simulate


def _parse_knots(text):
    if text == "study":
        return STUDY_R0_KNOTS
    if text == "default":
        return SeirConfig().r0_knots
    pairs = []
    for item in text.split(","):
        w, r = item.split(":")
        pairs.append((float(w), float(r)))
    return tuple(pairs)


def cmd_simulate(args):
    out = _out_dir(args.out)
    if args.scenario == "custom":
        if not args.scenario_json:
            raise SchemaError("--scenario custom needs --scenario-json")
        with open(args.scenario_json, encoding="utf-8") as fh:
            d = json.load(fh)
        scenario = TestingScenario(d["kind"], d["params"])
    else:
        scenario = scenario_presets()[args.scenario]
    config = SeirConfig(r0_knots=_parse_knots(args.r0_knots), population=args.population)
    man = RunManifest(
        "simulate",
        {"seir": config.to_dict(), "scenario": scenario.to_dict(), "scenario_name": args.scenario,
         "rho": args.rho,
         "kappa": args.kappa, "replicates": args.replicates},
        args.seed,
        out,
    )
    seeds = np.random.SeedSequence(args.seed).generate_state(args.replicates)
    reps = []
    for k in range(args.replicates):
        truth = simulate(config, scenario, rho=args.rho, kappa=args.kappa, seed=int(seeds[k]))
        name = f"rep_{k + 1:03d}"
        tpath = out / f"{name}_truth.csv"
        opath = out / f"{name}_observed.csv"
        fpath = out / f"{name}_weekly_full.csv"
        truth.write_truth(tpath)
        obs, _ = truth.analysis()
        write_series(obs, opath)
        write_series(truth.weekly, fpath)
        for p in (tpath, opath, fpath):
            man.add_output(p)
        reps.append({"name": name, "seed": int(seeds[k]), "extinct": truth.extinct})
        if truth.extinct:
            man.errors.append(f"{name}: epidemic extinct before week {config.discard_weeks}")
    man.extra["replicates"] = reps
    man.write()
    return EXIT_OK


def _truth_rt_weekly(path, discard_weeks):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    rt = np.array([float(r["Rt"]) for r in rows])
    return rt[2::7][discard_weeks:]


# --------------------------------------------------------------------------
# estimate


def _write_rt_table(estimates, labels, path):
    """Baseline estimates with the same layout as the model summaries."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "median", "lower95", "upper95", "dispersion"])
        for label, e in zip(labels, estimates):
            w.writerow([label] + [baselines._cell(v) for v in (e.median, e.lower95, e.upper95, e.dispersion)])


def _save_fit(res: FitResult, out):
    np.save(out / "draws.npy", res.draws.draws)
    meta = {
        "settings": res.settings.to_dict(),
        "names": list(res.draws.names),
        "divergences": [int(d) for d in res.draws.divergences],
    }
    _write_json(meta, out / "fit.json")
    return [out / "draws.npy", out / "fit.json"]


def _load_fit(fit_dir, series):
    fit_dir = Path(fit_dir)
    with open(fit_dir / "fit.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    settings = ModelSettings.from_dict(meta["settings"])
    config = settings.bind(series)
    model = build_model(config)
    arr = np.load(fit_dir / "draws.npy")
    if arr.ndim != 3 or arr.shape[2] != model.dim:
        raise SchemaError("stored draws do not match the model implied by the data")
    draws = PosteriorDraws(
        draws=arr,
        names=meta["names"],
        divergences=np.asarray(meta["divergences"]),
    )
    return FitResult(settings, config, model, draws, diagnose(draws))


def _write_predictive(res, seed, out):
    s, cov = res.posterior_predictive(seed)
    path = out / "predictive.csv"
    covered = [
        int(s.lower95[i] <= o <= s.upper95[i]) for i, o in enumerate(res.series.cases)
    ]
    s.write_csv(path, extra={"observed": [int(o) for o in res.series.cases], "covered": covered})
    return path, cov


def _epiestim_uncertain(series, settings, args):
    if "weights" in settings.generation:
        raise SchemaError("--generation-uncertainty needs a continuous generation time")
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    base = ContinuousDelay.from_dict(settings.generation)
    draws = baselines.generation_draws(base, args.generation_draws, args.generation_uncertainty, rng)
    gens = [discretize_at_step(d, len(series), 1, series.step_days) for d in draws]
    return baselines.epiestim_uncertain(series, gens, window=args.window)


def cmd_estimate(args):
    out = _out_dir(args.out)
    series = read_series(args.data)
    man = RunManifest("estimate", {"method": args.method, "window": args.window}, args.seed, out)
    man.add_input(args.data)
    for p in args.priors or []:
        man.add_input(p)
    settings = _load_settings(args.priors, args.method)
    if args.method in BASELINES:
        gen = settings.bind(series.require_length(2)).generation
        if args.method == "epiestim" and args.generation_uncertainty > 0:
            est = _epiestim_uncertain(series, settings, args)
            man.config.update(
                generation_uncertainty=args.generation_uncertainty,
                generation_draws=args.generation_draws,
            )
        elif args.method == "epiestim":
            est = baselines.epiestim(series, baselines.EpiEstimConfig(gen, window=args.window))
        elif args.method == "glm-pois":
            est = baselines.glm_poisson_mimic(series, args.window, gen)
        else:
            est = baselines.glm_quasipoisson_mimic(series, args.window, gen)
        path = out / "rt.csv"
        _write_rt_table(est, series.labels(), path)
        man.add_output(path)
        man.config["settings"] = settings.to_dict()
        man.converged = True
        man.extra["estimates"] = sum(not e.missing for e in est)
        man.write()
        return EXIT_OK

    sampler = _sampler(args)
    man.config.update(settings=settings.to_dict(), sampler=sampler.__dict__ | {"jobs": None})
    res = fit(series, settings, sampler)
    res.rt().write_csv(out / "rt.csv")
    res.incidence().write_csv(out / "incidence.csv")
    pred, cov = _write_predictive(res, args.seed, out)
    res.draws.write_summary_json(out / "summary.json")
    _write_json(res.diagnostics.to_dict(), out / "diagnostics.json")
    for p in [out / "rt.csv", out / "incidence.csv", pred, out / "summary.json", out / "diagnostics.json"]:
        man.add_output(p)
    for p in _save_fit(res, out):
        man.add_output(p)
    ok, reasons = res.diagnostics.verdict()
    man.converged = ok
    man.errors.extend(reasons)
    man.extra["predictive_coverage"] = cov
    man.write()
    if not ok:
        print("fit did not converge: " + "; ".join(reasons), file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


# --------------------------------------------------------------------------
# posterior predictive


def cmd_predict(args):
    out = _out_dir(args.out)
    series = read_series(args.data)
    # the fit is identified by the digests of its files, not by its location
    man = RunManifest("predict", {}, args.seed, out)
    man.add_input(args.data)
    man.add_input(Path(args.fit) / "draws.npy")
    man.add_input(Path(args.fit) / "fit.json")
    res = _load_fit(args.fit, series)
    path, cov = _write_predictive(res, args.seed, out)
    man.add_output(path)
    man.extra["predictive_coverage"] = cov
    man.converged = res.converged
    man.write()
    return EXIT_OK


# --------------------------------------------------------------------------
# elicit


def cmd_elicit(args):
    out = _out_dir(args.out)
    series = read_series(args.data)
    if args.mode == "held-out":
        if not args.reference:
            raise SchemaError("held-out mode needs --reference (a series that will not be analyzed)")
        kappa_series = read_series(args.reference)
    else:
        kappa_series = series
    man = RunManifest(
        "elicit",
        {"mode": args.mode, "test_quantile": args.test_quantile, "detection_low": args.detection_low,
         "detection_high": args.detection_high, "detection_median": args.detection_median,
         "rho_sigma": args.rho_sigma, "kappa_cap": args.kappa_cap},
        args.seed,
        out,
    )
    man.add_input(args.data)
    if args.mode == "held-out":
        man.add_input(args.reference)
    if args.detection_low is not None or args.detection_high is not None:
        if args.detection_low is None or args.detection_high is None:
            raise SchemaError("give both --detection-low and --detection-high")
        spec = DetectionPriorSpec(args.detection_low, args.detection_high, args.test_quantile)
        mu_rho, s_rho = elicit_rho(series.tests, spec)
    else:
        mu_rho, s_rho = rho_prior_from_median(
            series.tests, args.detection_median, args.rho_sigma, args.test_quantile
        )
    sampler = _sampler(args)
    try:
        (mu_k, s_k), spline = elicit_kappa(kappa_series.cases, sampler, cap=args.kappa_cap)
        man.converged = True
    except ConvergenceError as exc:
        man.converged = False
        man.errors.append(str(exc))
        man.write()
        print(str(exc), file=sys.stderr)
        return EXIT_CONVERGENCE
    frag = prior_fragment(mu_rho=mu_rho, sigma_rho=s_rho, mu_kappa=mu_k, sigma_kappa=s_k)
    path = out / "priors.json"
    write_fragment(frag, path)
    man.add_output(path)
    man.write()
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate


def _read_rt_table(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))

    def num(x):
        return float(x) if x not in ("", None) else math.nan

    return EstimateSeries(
        np.arange(1, len(rows) + 1),
        np.array([num(r["median"]) for r in rows]),
        np.array([num(r["lower95"]) for r in rows]),
        np.array([num(r["upper95"]) for r in rows]),
    )


def cmd_evaluate(args):
    out = _out_dir(args.out)
    truth_dir = Path(args.truth)
    est_dir = Path(args.estimates)
    with open(truth_dir / "manifest.json", encoding="utf-8") as fh:
        sim = json.load(fh)
    discard = sim["config"]["seir"]["discard_weeks"]
    scenario = args.scenario or sim["config"]["scenario_name"]
    methods = sorted(p.name for p in est_dir.iterdir() if p.is_dir())
    man = RunManifest("evaluate", {"scenario": scenario, "methods": methods}, None, out)
    rows = []
    for rep in sim["replicates"]:
        name = rep["name"]
        tpath = truth_dir / f"{name}_truth.csv"
        truth = _truth_rt_weekly(tpath, discard)
        man.add_input(tpath)
        estimates = {}
        for m in methods:
            path = est_dir / m / name / "rt.csv"
            if not path.exists():
                man.errors.append(f"{m}/{name}: missing estimates")
                continue
            estimates[m] = _read_rt_table(path)
        if len(estimates) != len(methods):
            continue
        scores, truth_masv = score_methods(estimates, truth)
        for m in methods:
            rows.append({"method": m, "scenario": scenario, "replicate": name, **scores[m],
                         "truth_masv": truth_masv})
    mpath = out / "metrics.csv"
    write_metrics(rows, mpath)
    box = {
        m: {
            k: summarize_replicates([r[k] for r in rows if r["method"] == m])
            for k in ("envelope", "mciw", "abs_dev", "masv")
        }
        for m in methods
        if any(r["method"] == m for r in rows)
    }
    bpath = out / "boxplot-data.json"
    _write_json({"scenario": scenario, "methods": box}, bpath)
    man.add_output(mpath)
    man.add_output(bpath)
    man.converged = None
    man.write()
    return EXIT_MISSING if man.errors else EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="rtestim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate SEIR outbreaks with test-dependent reporting")
    p.add_argument("--scenario", choices=["s1", "s2", "s3", "custom"], default="s1")
    p.add_argument("--scenario-json", help="testing scenario for --scenario custom")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--r0-knots", default="study",
                   help="'study', 'default' or week:R0 pairs such as 0:2,8:0.9,28:1.1")
    p.add_argument("--population", type=int, default=1_000_000)
    p.add_argument("--rho", type=float, default=9e-5)
    p.add_argument("--kappa", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate Rt from a date,cases,tests CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--priors", action="append", help="settings or prior-fragment JSON (repeatable)")
    p.add_argument("--method", choices=["gamma", "normal", *sorted(BASELINES)], default="gamma")
    p.add_argument("--window", type=int, default=1, help="window length for the baselines")
    p.add_argument(
        "--generation-uncertainty",
        type=float,
        default=0.0,
        help="log-scale sd of a time rescaling of the generation time (epiestim only)",
    )
    p.add_argument("--generation-draws", type=int, default=100)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("predict", help="posterior predictive case intervals from a stored fit")
    p.add_argument("--fit", required=True, help="output directory of a gamma/normal estimate")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("elicit", help="elicit detection and over-dispersion priors")
    p.add_argument("--data", required=True, help="series to be analyzed (its tests set the rho prior)")
    p.add_argument("--mode", choices=["held-out", "same-data"], default="held-out")
    p.add_argument("--reference", help="held-out series for the over-dispersion spline")
    p.add_argument("--detection-low", type=float)
    p.add_argument("--detection-high", type=float)
    p.add_argument("--detection-median", type=float, default=0.066)
    p.add_argument("--rho-sigma", type=float, default=0.3)
    p.add_argument("--test-quantile", type=float, default=0.5)
    p.add_argument("--kappa-cap", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_sampler_flags(p, target=0.95)
    p.set_defaults(func=cmd_elicit)

    p = sub.add_parser("evaluate", help="score estimates against simulation truth")
    p.add_argument("--estimates", required=True, help="directory laid out as <method>/<replicate>/rt.csv")
    p.add_argument("--truth", required=True, help="output directory of 'simulate'")
    p.add_argument("--scenario", help="label for the metrics table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
