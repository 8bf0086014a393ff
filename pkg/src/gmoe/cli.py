"""Command-line interface.

Every artifact-producing run writes its outputs atomically (temp file plus
rename) together with a ``manifest.json`` recording the fully resolved
configuration, the base seed, and a sha256 per artifact; re-running a sweep
from its manifest reproduces ``results.csv`` byte for byte.

Exit codes: 0 success, 1 usage error, 2 domain error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .em import EmSettings, fit, fit_result_to_json, init_favourable
from .experiments import (
    LOSS_AUTO,
    MODEL_IDS,
    SWEEP_COV_FLOOR,
    ExperimentConfig,
    fit_loglog,
    fit_rate,
    model_presets,
    profile_grid,
    results_to_csv,
    run_sweep,
    summarize,
    summary_to_csv,
)
from .model import (
    GmoeError,
    InvalidParameterError,
    MixingMeasure,
    measure_from_json,
    measure_to_json,
)
from .plotting import render_rate_svg
from .polysys import (
    Candidate,
    PolySystemSpec,
    builtin_candidate,
    equation_labels,
    residuals,
    search_nontrivial,
    verify_candidate,
)
from .sampling import (
    dataset_from_csv,
    dataset_sidecar,
    dataset_to_csv,
    derive_seed,
    sample,
    sidecar_to_json,
)
from .voronoi import TYPE_II, assign_cells, classify_setting, loss_dbar, loss_dtilde

CONFIG_SCHEMA_SUMMARY = """sweep config schema (JSON object):
  model       "model1".."model4" or an inline measure document
              {"dim": d, "atoms": [{"weight","c","gamma","a","b","nu"}, ...]}
  k           fitted number of atoms (int)
  profile     "desk" | "paper" (fills n_grid/reps when absent)
  n_grid      strictly increasing list of sample sizes (ints)
  reps        replications per sample size (int)
  base_seed   64-bit int
  loss        "dbar" | "dtilde" | "auto"
  perturb_sd  initializer noise scale (float)
  threads     worker count (int; env GMOE_THREADS is the fallback)
  em          {"epsilon","max_iter","lambda_floor","nu_floor","beta_floor"}
  r_override  {"4": 8, ...} asserted loss orders for cells of size >= 4
CLI flags override file values."""


PROFILE_NAMES = ("desk", "paper")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems (argparse defaults to 2)
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(outdir: Path, command: str, config: dict, base_seed, artifacts: dict[str, str]) -> None:
    """Write artifacts plus a manifest with their hashes."""
    for name, text in artifacts.items():
        _write_atomic(outdir / name, text)
    manifest = {
        "command": command,
        "config": config,
        "base_seed": base_seed,
        "artifacts": {name: _sha256(text) for name, text in artifacts.items()},
    }
    _write_atomic(outdir / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def _load_measure_arg(value: str) -> MixingMeasure:
    """Resolve a preset id or a path to a measure JSON document."""
    if value.lower() in MODEL_IDS:
        return model_presets(value)[0]
    path = Path(value)
    if path.exists():
        return measure_from_json(path.read_text())
    raise InvalidParameterError(
        f"{value!r} is neither a preset id {MODEL_IDS} nor an existing measure file"
    )


def _threads(cli_value, config: dict | None = None) -> int:
    if cli_value is not None:
        return int(cli_value)
    if config and config.get("threads") is not None:
        return int(config["threads"])
    env = os.environ.get("GMOE_THREADS")
    return int(env) if env else 1


# ---------------------------------------------------------------- presets

def _cmd_presets(args) -> int:
    G0, _ = model_presets(args.id)
    text = measure_to_json(G0) + "\n"
    sys.stdout.write(text)
    if args.output_dir:
        outdir = Path(args.output_dir)
        _emit(outdir, "presets", {"id": args.id}, None, {"measure.json": text})
    return 0


# ---------------------------------------------------------------- simulate

def _cmd_simulate(args) -> int:
    G0 = _load_measure_arg(args.model)
    label = args.label or (args.model if args.model.lower() in MODEL_IDS else "inline")
    data = sample(G0, args.n, args.seed, source_label=label)
    config = {"model": args.model, "n": args.n, "seed": args.seed, "label": label}
    _emit(
        Path(args.output_dir),
        "simulate",
        config,
        args.seed,
        {
            "dataset.csv": dataset_to_csv(data),
            "dataset.json": sidecar_to_json(dataset_sidecar(data)),
        },
    )
    return 0


# ---------------------------------------------------------------- fit

def _cmd_fit(args) -> int:
    G0 = _load_measure_arg(args.model)
    settings = EmSettings(epsilon=args.epsilon, max_iter=args.max_iter)
    if args.data:
        csv_path = Path(args.data)
        sidecar = json.loads(csv_path.with_suffix(".json").read_text())
        data = dataset_from_csv(csv_path.read_text(), sidecar)
    else:
        if args.n is None:
            raise _UsageError("fit needs --data or --n")
        data = sample(G0, args.n, args.seed)
    init = init_favourable(G0, args.k, derive_seed(args.seed, 1), args.perturb_sd)
    result = fit(data, args.k, init, settings)
    config = {
        "model": args.model,
        "k": args.k,
        "n": data.n,
        "seed": args.seed,
        "perturb_sd": args.perturb_sd,
        "epsilon": args.epsilon,
        "max_iter": args.max_iter,
    }
    _emit(Path(args.output_dir), "fit", config, args.seed, {"fit.json": fit_result_to_json(result)})
    sys.stdout.write(
        f"converged={result.converged} iterations={result.iterations} "
        f"loglik={float(result.loglik_trace[-1])!r}\n"
    )
    return 0


# ---------------------------------------------------------------- loss

LOSS_HEADER = "model_id,n,rep,k,loss_name,value,cell_sizes"


def _load_fitted_measure(path: Path) -> MixingMeasure:
    doc = json.loads(path.read_text())
    if isinstance(doc, dict) and "measure" in doc:
        doc = doc["measure"]
    return measure_from_json(json.dumps(doc))


def _cmd_loss(args) -> int:
    G = _load_fitted_measure(Path(args.fitted))
    G0 = _load_measure_arg(args.model)
    setting = classify_setting(G0, zero_tol=args.zero_tol)
    name = args.loss
    if name == LOSS_AUTO:
        name = "dtilde" if setting.kind == TYPE_II else "dbar"
    asg = assign_cells(G, G0)
    if name == "dbar":
        value = loss_dbar(G, G0, assignment=asg)
    else:
        value = loss_dtilde(G, G0, setting, assignment=asg)
    cells = "|".join(str(s) for s in asg.cell_sizes)
    row = f"{args.model},{args.n},{args.rep},{G.k},{name},{value!r},{cells}"
    text = LOSS_HEADER + "\n" + row + "\n"
    sys.stdout.write(f"{name} {value!r}\n")
    if args.output_dir:
        config = {
            "fitted": str(args.fitted), "model": args.model, "loss": args.loss,
            "zero_tol": args.zero_tol, "n": args.n, "rep": args.rep,
        }
        _emit(Path(args.output_dir), "loss", config, None, {"loss.csv": text})
    return 0


# ---------------------------------------------------------------- sweep

def _sweep_config_dict(args) -> dict:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        config = dict(manifest["config"])
    elif args.config:
        config = json.loads(Path(args.config).read_text())
        if not isinstance(config, dict):
            raise InvalidParameterError("sweep config must be a JSON object")
        if "config" in config and "artifacts" in config:
            config = dict(config["config"])  # a manifest was passed directly
    else:
        config = {}
    if args.model is not None:
        config["model"] = args.model
    if args.k is not None:
        config["k"] = args.k
    if args.profile is not None:
        config["profile"] = args.profile
    if args.seed is not None:
        config["base_seed"] = args.seed
    if args.loss is not None:
        config["loss"] = args.loss
    if args.reps is not None:
        config["reps"] = args.reps
    if args.perturb_sd is not None:
        config["perturb_sd"] = args.perturb_sd
    config["threads"] = _threads(args.threads, config)
    if "model" not in config:
        raise _UsageError("sweep needs a config file or --model\n" + CONFIG_SCHEMA_SUMMARY)
    # the paper-scale profile is opt-in; unspecified sweeps run desk scale
    profile = config.get("profile") or "desk"
    grid, reps = profile_grid(profile)
    config.setdefault("n_grid", list(grid))
    config.setdefault("reps", reps)
    config.setdefault("base_seed", 0)
    config.setdefault("loss", LOSS_AUTO)
    config.setdefault("perturb_sd", 0.001)
    config.setdefault("em", {})
    return config


def _experiment_from_dict(config: dict) -> ExperimentConfig:
    model = config["model"]
    if isinstance(model, dict):
        model = measure_from_json(json.dumps(model))
    em_fields = {"lambda_floor": SWEEP_COV_FLOOR, "nu_floor": SWEEP_COV_FLOOR}
    em_fields.update(config.get("em", {}))
    em = EmSettings(**em_fields)
    override = config.get("r_override")
    if override:
        override = tuple(sorted((int(m), int(r)) for m, r in dict(override).items()))
    else:
        override = None
    return ExperimentConfig(
        model=model,
        k=int(config["k"]),
        n_grid=tuple(int(v) for v in config["n_grid"]),
        reps=int(config["reps"]),
        base_seed=int(config["base_seed"]),
        em=em,
        loss=str(config["loss"]),
        perturb_sd=float(config["perturb_sd"]),
        threads=int(config.get("threads", 1)),
        r_override=override,
    )


def _rate_json(rate) -> str:
    doc = {"slope": rate.slope, "intercept": rate.intercept, "r_squared": rate.r_squared}
    return json.dumps(doc, indent=2) + "\n"


def _cmd_sweep(args) -> int:
    config = _sweep_config_dict(args)
    if "k" not in config:
        raise _UsageError("sweep needs --k or a config with k\n" + CONFIG_SCHEMA_SUMMARY)
    cfg = _experiment_from_dict(config)
    result = run_sweep(cfg)
    rate = fit_rate(result)
    summaries = summarize(result)
    model_name = config["model"] if isinstance(config["model"], str) else "inline"
    title = f"{model_name}, k = {cfg.k} ({result.loss_name})"
    artifacts = {
        "results.csv": results_to_csv(result),
        "summary.csv": summary_to_csv(result),
        "rate.json": _rate_json(rate),
        "plot.svg": render_rate_svg(summaries, rate, title=title),
    }
    _emit(Path(args.output_dir), "sweep", config, cfg.base_seed, artifacts)
    sys.stdout.write(
        f"sweep done: {len(result.rows)} rows, {result.excluded_count} excluded, "
        f"slope={rate.slope:.4f}\n"
    )
    return 0


# ---------------------------------------------------------------- rate

def _cmd_rate(args) -> int:
    lines = Path(args.results).read_text().splitlines()
    if not lines:
        raise InvalidParameterError("results file is empty")
    header = lines[0].split(",")
    try:
        i_n = header.index("n")
        i_loss = header.index("loss")
        i_excl = header.index("excluded")
    except ValueError:
        raise InvalidParameterError(f"unexpected results header {lines[0]!r}") from None
    per_n: dict[int, list[float]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        if parts[i_excl] == "true":
            continue
        value = float(parts[i_loss])
        if np.isfinite(value):
            per_n.setdefault(int(parts[i_n]), []).append(value)
    ns = sorted(per_n)
    means = [float(np.mean(per_n[n])) for n in ns]
    rate = fit_loglog(ns, means)
    text = _rate_json(rate)
    sys.stdout.write(text)
    if args.output_dir:
        _emit(Path(args.output_dir), "rate", {"results": str(args.results)}, None, {"rate.json": text})
    return 0


# ---------------------------------------------------------------- polysys

def _candidate_from_file(path: Path, m: int) -> Candidate:
    doc = json.loads(path.read_text())
    q = np.zeros((m, 5))
    given = np.asarray(doc["q"], dtype=float)
    q[:, : given.shape[1]] = given
    return Candidate(np.asarray(doc["p"], dtype=float), q)


def _cmd_polysys(args) -> int:
    spec = PolySystemSpec(family=args.family, m=args.m, r=args.r)
    if args.verify is None and not args.search:
        raise _UsageError("polysys needs --verify NAME|PATH or --search")
    note = None
    extra = {}
    if args.search:
        mode = "search"
        found = search_nontrivial(spec, restarts=args.restarts, seed=args.seed)
        cand = found.best
        note = (
            "search evidence only: a residual above the threshold suggests but "
            "does not certify that no non-trivial solution exists"
        )
        extra = {"restarts": found.restarts, "best_objective": found.best_objective}
    else:
        mode = "verify"
        if args.verify == "builtin-c3":
            cand = builtin_candidate(spec.family, spec.m)
        else:
            cand = _candidate_from_file(Path(args.verify), spec.m)
    res = residuals(spec, cand)
    report = verify_candidate(spec, cand, tol=args.tol)
    doc = {
        "family": spec.family,
        "m": spec.m,
        "r": spec.r,
        "mode": mode,
        "candidate": {"p": cand.p.tolist(), "q": cand.q.tolist()},
        "equations": [list(lbl) if isinstance(lbl, tuple) else lbl for lbl in equation_labels(spec)],
        "residuals": res.tolist(),
        "verdict": {
            "is_solution": report.is_solution,
            "is_nontrivial": report.is_nontrivial,
            "max_abs_residual": report.max_abs_residual,
        },
    }
    doc.update(extra)
    if note:
        doc["note"] = note
    text = json.dumps(doc, indent=2) + "\n"
    sys.stdout.write(text)
    if args.output_dir:
        config = {
            "family": spec.family, "m": spec.m, "r": spec.r, "mode": mode,
            "verify": args.verify, "restarts": args.restarts, "tol": args.tol,
        }
        _emit(Path(args.output_dir), "polysys", config, args.seed, {"polysys.json": text})
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> _Parser:
    parser = _Parser(prog="gmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("presets", parents=[], help="print a benchmark measure")
    p.add_argument("--id", required=True, choices=MODEL_IDS)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_cmd_presets)

    p = sub.add_parser("simulate", help="sample a dataset to CSV")
    p.add_argument("--model", required=True, help="preset id or measure JSON path")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", default=None)
    p.add_argument("--output-dir", default="gmoe-out")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="run EM on a dataset")
    p.add_argument("--model", required=True, help="truth used for the initializer")
    p.add_argument("--data", default=None, help="dataset CSV (with .json sidecar)")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--perturb-sd", type=float, default=0.001)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--output-dir", default="gmoe-out")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("loss", help="score a fitted measure against a truth")
    p.add_argument("--fitted", required=True, help="fit.json or measure JSON path")
    p.add_argument("--model", required=True, help="preset id or measure JSON path")
    p.add_argument("--loss", default="auto", choices=["dbar", "dtilde", "auto"])
    p.add_argument("--zero-tol", type=float, default=0.0)
    p.add_argument("--n", type=int, default=0, help="label for the CSV row")
    p.add_argument("--rep", type=int, default=0, help="label for the CSV row")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("sweep", help="run the full rate benchmark")
    p.add_argument("--config", default=None)
    p.add_argument("--from-manifest", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--profile", choices=sorted(PROFILE_NAMES), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss", choices=["dbar", "dtilde", "auto"], default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--perturb-sd", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--output-dir", default="gmoe-out")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("rate", help="refit the rate from an existing results.csv")
    p.add_argument("--results", required=True)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_cmd_rate)

    p = sub.add_parser("polysys", help="verify or search the polynomial systems")
    p.add_argument("--family", required=True, choices=["rbar", "rtilde"])
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--verify", default=None, help='"builtin-c3" or a candidate JSON path')
    p.add_argument("--search", action="store_true")
    p.add_argument("--restarts", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_cmd_polysys)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"gmoe: error: {exc}", file=sys.stderr)
        return 1
    except GmoeError as exc:
        print(f"gmoe: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
