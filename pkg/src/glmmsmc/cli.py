"""Command line: ``glmmsmc simulate | fit | compare``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure, 4 file system failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from collections import defaultdict
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import yaml

from . import baselines, config, diagnostics, simulate, smc
from .design import design_from_frame
from .errors import NumericError, ValidationError
from .model import ModelSpec
from .pql import fit_from_estimates, pql_fit

log = logging.getLogger("glmmsmc")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class StageError(Exception):
    """Wraps a module error with the pipeline stage it came from."""

    def __init__(self, stage, exc):
        self.stage = stage
        self.exc = exc
        super().__init__(f"{stage}: {exc}")


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValidationError, NumericError, OSError, ValueError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        own = "unknown"
    return {"glmmsmc": own, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__}


def _write_yaml(path, data):
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ simulate


def cmd_simulate(args) -> Path:
    if args.kind == "poisson":
        params = {"n": args.n, "seed": args.seed}
        ds = simulate.simulate_poisson(**params)
    else:
        params = {"n_subjects": args.subjects, "n_visits": args.visits,
                  "sigma_U": args.sigma_u, "f": args.f, "seed": args.seed}
        ds = simulate.simulate_logit_longitudinal(**params)
    root = Path(args.out) if args.out else (
        Path(os.environ.get(config.OUTPUT_ROOT_ENV, "runs"))
        / f"simulate-{args.kind}-seed{args.seed}")
    ds.write(root)
    _write_yaml(root / "config.yaml", {"command": "simulate", "kind": args.kind, **params})
    print(root / "data.csv")
    return root


# ----------------------------------------------------------------------- fit


def build_model(cfg):
    m = cfg["model"]
    if not m.get("data"):
        raise ValidationError("model.data (or --data) is required")
    frame = pd.read_csv(m["data"])
    design = design_from_frame(frame, m["response"], m["predictors"], m["splines"],
                               m["random_intercepts"], m["intercept"])
    model = ModelSpec(design.y, design.C, design.q_beta, design.blocks, float(m["sigma_beta_sq"]),
                      float(m["A"]), m["family"], tuple(design.names))
    return design, model


def initial_fit(cfg, model):
    pc, init = cfg["pql"], cfg["init"]
    if init["nu"] is not None:
        sig = init["sigma_sq"] if init["sigma_sq"] is not None else []
        return fit_from_estimates(model, init["nu"], sig, inflate=float(pc["inflate"]))
    return pql_fit(model, pc["max_outer"], float(pc["tol"]), inflate=float(pc["inflate"]))


def _run_sampler(cfg, model, pql):
    """Returns ``(draws, weights, extra metadata, trace or None)``."""
    kind, seed = cfg["sampler"], cfg["seed"]
    if kind == "smc":
        sc = cfg["smc"]
        conf = smc.SmcConfig(
            n_particles=sc["n_particles"], n_stages=sc["n_stages"],
            resample_threshold=float(sc["resample_threshold"]),
            move_config=config.move_config(cfg, model),
            seed=seed if sc["seed"] is None else sc["seed"], workers=sc["workers"])
        system, trace = smc.run(model, pql, conf)
        extra = {"mean_acceptance": np.mean(trace.acceptance, axis=0).tolist(),
                 "resample_stages": trace.resample_stages}
        return system.draws(), system.weights(), extra, trace
    if kind == "is":
        out = baselines.importance_sampler(model, pql, cfg["is"]["n"],
                                           baselines.default_chain_rng(seed))
        return out.draws, out.weights(), {"ess": out.ess}, None
    mc = cfg["mcmc"]
    rngs = [baselines.default_chain_rng(seed, r) for r in range(mc["chains"])]
    if kind == "rwmh":
        chains = baselines.rwmh_chains(model, pql, config.move_config(cfg, model),
                                       mc["iters"], mc["burnin"], rngs)
    else:
        chains = [baselines.slice_sampler(model, pql, mc["iters"], mc["burnin"],
                                          float(cfg["slice"]["width"]), r) for r in rngs]
    draws = np.vstack([c.draws for c in chains])
    extra = {"chains": len(chains), "burnin": mc["burnin"]}
    if kind == "rwmh":
        extra["acceptance"] = np.mean([c.acceptance for c in chains], axis=0).tolist()
    return draws, np.full(draws.shape[0], 1.0 / draws.shape[0]), extra, None


def _write_curves(out, cfg, design, model, nu_mean):
    npts = cfg["output"]["curve_points"]
    for sp in design.splines:
        raw = np.asarray(pd.read_csv(cfg["model"]["data"], usecols=[sp.column])[sp.column],
                         dtype=float)
        grid = np.linspace(raw.min(), raw.max(), npts)
        f = diagnostics.curve_estimate(design, nu_mean, grid, sp.column)
        eta, mean = diagnostics.curve_at_means(design, nu_mean, grid, sp.column, model.family)
        pd.DataFrame({sp.column: grid, "f": f, "eta_at_means": eta, "mean_at_means": mean}
                     ).to_csv(out / f"curve_{sp.column}.csv", index=False)


def cmd_fit(cfg) -> Path:
    if not cfg["model"].get("data"):
        raise ValidationError("model.data (or --data) is required")
    out = config.output_dir(cfg)
    _stage("output", out.mkdir, parents=True, exist_ok=True)
    _write_yaml(out / "config.yaml", cfg)
    timings = {}
    t = time.perf_counter()
    design, model = _stage("design", build_model, cfg)
    timings["design"] = time.perf_counter() - t
    t = time.perf_counter()
    pql = _stage("pql", initial_fit, cfg, model)
    timings["pql"] = time.perf_counter() - t
    t = time.perf_counter()
    draws, weights, extra, trace = _stage("sampler", _run_sampler, cfg, model, pql)
    timings["sampler"] = time.perf_counter() - t

    names = tuple(model.names) + model.variance_names()
    summary = _stage("diagnostics", diagnostics.summarize, draws, weights, names)
    summary.to_frame().to_csv(out / "summary.csv", index=False)
    if cfg["output"]["write_sample"]:
        frame = pd.DataFrame(draws, columns=list(names))
        frame["weight"] = weights
        frame.to_csv(out / "sample.csv", index=False)
    if trace is not None:
        _write_json(out / "trace.json", trace.to_dict())
        pd.DataFrame({"stage": np.arange(1, len(trace.ess) + 1), "gamma": trace.gammas[1:],
                      "ess": trace.ess, "resampled": trace.resampled}
                     ).to_csv(out / "ess_trace.csv", index=False)
    _stage("diagnostics", _write_curves, out, cfg, design, model, summary.mean[: model.P])
    _write_json(out / "design.json", design.to_dict())
    _write_json(out / "metadata.json", {
        "label": cfg["label"], "sampler": cfg["sampler"], "seed": cfg["seed"],
        "versions": _versions(), "timings_seconds": timings,
        "pql": {"converged": pql.converged, "iterations": pql.iterations,
                "sigma_sq": pql.sigma_sq_hat.tolist()},
        "n_draws": int(draws.shape[0]), "parameters": list(names), **extra,
    })
    print(out)
    return out


# ------------------------------------------------------------------- compare


def _load_run(run_dir, parameter):
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "metadata.json").read_text())
    sample = pd.read_csv(run_dir / "sample.csv")
    if parameter not in sample.columns:
        raise ValidationError(f"parameter {parameter!r} missing from run {run_dir}")
    x = sample[parameter].to_numpy(dtype=float)
    w = sample["weight"].to_numpy(dtype=float) if "weight" in sample else None
    return meta, x, w / w.sum() if w is not None else np.full(x.size, 1.0 / x.size)


def _resampled(x, w, size=None):
    """Deterministic equal-weight version of a weighted sample for QQ pairs."""
    if np.allclose(w, w[0]):
        return x
    levels = (np.arange(size or x.size) + 0.5) / (size or x.size)
    return diagnostics.weighted_quantile(x, levels, w)


def cmd_compare(run_dirs, parameter, out, n_quantiles=100, grid_points=200) -> Path:
    if len(run_dirs) < 2:
        raise ValidationError("compare needs at least two run directories")
    runs = [_stage("load", _load_run, d, parameter) for d in run_dirs]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base_meta, bx, bw = runs[0]
    ref = _resampled(bx, bw)
    for i, (meta, x, w) in enumerate(runs[1:], start=1):
        pairs = diagnostics.qq_pairs(ref, _resampled(x, w), n_quantiles)
        pd.DataFrame(pairs, columns=[Path(run_dirs[0]).name, Path(run_dirs[i]).name]
                     ).to_csv(out / f"qq_{i:02d}_{Path(run_dirs[i]).name}.csv", index=False)
    lo = min(x.min() for _, x, _ in runs)
    hi = max(x.max() for _, x, _ in runs)
    pad = 0.1 * (hi - lo if hi > lo else 1.0)
    grid = np.linspace(lo - pad, hi + pad, grid_points)
    dens = {parameter: grid}
    for d, (_, x, w) in zip(run_dirs, runs):
        dens[Path(d).name] = _stage("kde", diagnostics.kde, x, w, grid)
    pd.DataFrame(dens).to_csv(out / "kde.csv", index=False)

    groups = defaultdict(list)
    for meta, x, w in runs:
        m = w @ x
        groups[(meta["label"], meta["sampler"])].append((m, w @ (x - m) ** 2))
    rows = []
    for (label, sampler), stats in groups.items():
        if len(stats) < 2:
            print(f"notice: {label} ({sampler}) has one run; cross-run ESS omitted",
                  file=sys.stderr)
            continue
        means, variances = np.array(stats).T
        est = diagnostics.carpenter_ess(means, variances)
        rows.append({"label": label, "sampler": sampler, "runs": len(stats),
                     "ess": est.value, "identical_runs": est.identical_runs})
    if rows:
        pd.DataFrame(rows).to_csv(out / "carpenter_ess.csv", index=False)
    print(out)
    return out


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glmmsmc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a dataset")
    s.add_argument("kind", choices=["poisson", "logit"])
    s.add_argument("--n", type=int, default=500, help="observations (poisson)")
    s.add_argument("--subjects", type=int, default=275)
    s.add_argument("--visits", type=int, default=6)
    s.add_argument("--sigma-u", type=float, default=simulate.LOGIT_SIGMA_U_DEFAULT)
    s.add_argument("--f", choices=sorted(simulate.AGE_EFFECTS), default="default")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    f = sub.add_parser("fit", help="fit a model with one sampler")
    f.add_argument("--config", help="YAML run configuration")
    f.add_argument("--preset", choices=sorted(config.PRESETS))
    f.add_argument("--data")
    f.add_argument("--sampler", choices=config.SAMPLERS)
    f.add_argument("--n", type=int, help="particles (smc), draws (is) or iterations (mcmc)")
    f.add_argument("--seed", type=int)
    f.add_argument("--label")
    f.add_argument("--workers", type=int)
    f.add_argument("--out")
    f.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. smc.n_stages=50")

    c = sub.add_parser("compare", help="compare completed runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--parameter", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--n-quantiles", type=int, default=100)
    c.add_argument("--grid-points", type=int, default=200)
    return p


def _fit_overrides(args):
    o = {}
    if args.data:
        o.setdefault("model", {})["data"] = args.data
    if args.sampler:
        o["sampler"] = args.sampler
    if args.seed is not None:
        o["seed"] = args.seed
    if args.label:
        o["label"] = args.label
    if args.out:
        o["output_dir"] = args.out
    if args.workers:
        o["smc"] = {"workers": args.workers}
    return o


def _apply_n(cfg, n):
    key = {"smc": ("smc", "n_particles"), "is": ("is", "n"),
           "rwmh": ("mcmc", "iters"), "slice": ("mcmc", "iters")}[cfg["sampler"]]
    cfg[key[0]][key[1]] = n
    config.validate(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            cmd_simulate(args)
        elif args.command == "fit":
            cfg = config.resolve(args.preset, args.config, [_fit_overrides(args), *args.set])
            if args.n is not None:
                _apply_n(cfg, args.n)
            cmd_fit(cfg)
        else:
            cmd_compare(args.runs, args.parameter, args.out, args.n_quantiles, args.grid_points)
    except StageError as err:
        print(f"error in stage {err.stage}: {err.exc}", file=sys.stderr)
        return _code(err.exc)
    except (ValidationError, NumericError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code(exc)
    return EXIT_OK


def _code(exc) -> int:
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (NumericError, ArithmeticError)):
        return EXIT_NUMERIC
    return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
