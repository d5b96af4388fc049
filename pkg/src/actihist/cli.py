"""Command-line entry point: simulate, clean, summarize, fit, compare, infer.

Each subcommand reads a JSON config (``--config``), applies flag overrides,
writes the fully resolved config next to its outputs and exits with

    0 ok, 2 input error, 3 empty cohort, 4 fit failure, 5 config error.

Subcommands chain through the output directory: ``clean`` reads
``<out>/sim/profiles.csv`` unless an input path is configured, ``summarize``
reads ``<out>/clean``, and so on.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .basis import BasisSpec
from .design import VARIANTS, DesignError, ModelSpec, assemble, nonlinearity_specs, variant_spec
from .fitting import FitError, fit_reml, fit_to_dict, write_coef_function
from .inference import (
    Scenario,
    ScenarioError,
    coef_function_band,
    nonlinearity_test,
    percent_change,
    sample_posterior,
    write_intervals,
)
from .plotting import write_function_svg
from .profiles import (
    CleaningConfig,
    ParseError,
    clean_cohort,
    cleaning_report,
    parse_profiles,
    restore_clean_profiles,
    write_profiles,
    write_report,
)
from .selection import compare_family, drop_term, format_table, make_split, write_table_csv
from .summaries import (
    InvalidProfileError,
    hist1d,
    hist2d,
    hist_split,
    make_bins,
    read_grid,
    read_hist1d,
    read_hist2d,
    read_hist_split,
    write_grid,
    write_hist1d,
    write_hist2d,
    write_hist_split,
)
from .synth import TruthSpec, gen_histograms, gen_profiles

logger = logging.getLogger("actihist")

EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_FIT, EXIT_CONFIG = 0, 2, 3, 4, 5

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "out": "out",
    "plots": True,
    "inputs": {
        "profiles": None,
        "profile_format": "long_csv",
        "covariates": None,
    },
    "cleaning": asdict(CleaningConfig()),
    "bins": {"width": 100.0, "upper": 8000.0, "cap": 15000.0, "transform": "identity", "alpha": 0.35, "hour_width": 1.0},
    "models": list(VARIANTS),
    "model_options": {"parameterization": "drop_first_bin", "response": "fat_mass", "height": "height"},
    "split": {"fraction": 0.75, "seed": None},
    "drop_term": None,
    "inference": {"model": "hist", "draws": 10000, "level": 0.95, "nonlinearity": True},
    "scenarios": [
        {"name": "scenario1", "minutes_moved": 15.0, "target_range": [3600.0, None]},
        {"name": "scenario2", "minutes_moved": 15.0, "target_range": [6200.0, None]},
    ],
    "simulate": {"level": "profiles", "truth": {"n": 120}, "profile_format": "long_csv"},
}


class ConfigError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k not in ("cleaning",) and isinstance(v, dict) and k != "simulate":
            out[k] = _merge(base[k], v, f"{path}{k}.")
        elif k == "simulate" and isinstance(v, dict):
            sim = copy.deepcopy(base[k])
            sim.update(v)
            out[k] = sim
        elif k == "cleaning":
            if not isinstance(v, dict):
                raise ConfigError("cleaning must be an object")
            unknown = set(v) - set(base[k])
            if unknown:
                raise ConfigError(f"unknown cleaning keys {sorted(unknown)}")
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def _parse_bins(text: str) -> dict:
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"--bins expects WIDTH[,UPPER[,CAP]], got {text!r}") from None
    if not 1 <= len(parts) <= 3:
        raise ConfigError(f"--bins expects WIDTH[,UPPER[,CAP]], got {text!r}")
    return dict(zip(("width", "upper", "cap"), parts))


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(EXIT_INPUT, f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.out is not None:
        cfg["out"] = args.out
    if args.zero_block is not None:
        cfg["cleaning"]["zero_block_len"] = args.zero_block
    if args.bins is not None:
        cfg["bins"].update(_parse_bins(args.bins))
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    try:
        CleaningConfig(**cfg["cleaning"])
        _grid(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for m in cfg["models"]:
        name = m if isinstance(m, str) else m.get("variant") if isinstance(m, dict) else None
        if name not in VARIANTS:
            raise ConfigError(f"unknown model {m!r}; expected one of {VARIANTS}")
    if not 0 < cfg["split"]["fraction"] < 1:
        raise ConfigError("split.fraction must lie in (0, 1)")
    if cfg["inputs"]["profile_format"] not in ("long_csv", "wide_csv"):
        raise ConfigError("inputs.profile_format must be long_csv or wide_csv")
    if cfg["simulate"]["level"] not in ("profiles", "histograms"):
        raise ConfigError("simulate.level must be profiles or histograms")
    try:
        TruthSpec.from_dict(cfg["simulate"]["truth"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulate.truth: {exc}") from None


def _grid(cfg: dict):
    b = cfg["bins"]
    return make_bins(b["width"], b["upper"], b["cap"], b["transform"], b["alpha"])


def _specs(cfg: dict) -> list[ModelSpec]:
    opts = cfg["model_options"]
    specs = []
    for m in cfg["models"]:
        d = {"variant": m} if isinstance(m, str) else dict(m)
        kw = {}
        if "num_basis" in d or "adaptive_dim" in d or "penalty_order" in d:
            kw["functional_basis"] = BasisSpec(
                "pspline", d.get("num_basis", 40), d.get("penalty_order", 1), d.get("adaptive_dim", 5)
            )
        specs.append(
            variant_spec(
                d["variant"],
                response=opts["response"],
                height=opts["height"],
                parameterization=d.get("parameterization", opts["parameterization"]),
                **kw,
            )
        )
    return specs


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _outdir(cfg: dict, name: str) -> Path:
    d = Path(cfg["out"]) / name
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot create output directory {d}: {exc}") from None
    _dump(cfg, d / "config.json")
    return d


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_INPUT, f"{what} not found: {p}")
    return p


def _profiles_path(cfg: dict) -> Path:
    p = cfg["inputs"]["profiles"] or Path(cfg["out"]) / "sim" / "profiles.csv"
    return _need(p, "profile file")


def _covariates(cfg: dict) -> pd.DataFrame:
    p = _need(cfg["inputs"]["covariates"] or Path(cfg["out"]) / "sim" / "covariates.csv", "covariate file")
    try:
        df = pd.read_csv(p, dtype={"subject_id": str})
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"{p}: {exc}") from None
    if "subject_id" not in df.columns:
        raise CliError(EXIT_INPUT, f"{p}: no subject_id column")
    return df


def _load_summaries(cfg: dict) -> dict:
    d = Path(cfg["out"]) / "summaries"
    grid = read_grid(_need(d / "grid.json", "bin grid"))
    one = read_hist1d(_need(d / "hist1d.csv", "1D histograms"), grid)
    out = {"oneD": one}
    if (d / "hist_split.csv").exists():
        out["split"] = read_hist_split(d / "hist_split.csv", grid)
    if (d / "hist2d.csv").exists():
        wear = {sid: (h.weartime_minutes, h.valid_days) for sid, h in one.items()}
        out["twoD"] = read_hist2d(d / "hist2d.csv", grid, cfg["bins"]["hour_width"], wear)
    return out


# ----------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict) -> int:
    out = _outdir(cfg, "sim")
    sim = cfg["simulate"]
    truth = TruthSpec.from_dict(sim["truth"])
    if sim["level"] == "profiles":
        cohort = gen_profiles(truth, cfg["seed"], CleaningConfig(**cfg["cleaning"]))
    else:
        cohort = gen_histograms(truth, cfg["seed"])
    cohort.write(out, profile_format=sim["profile_format"])
    if cohort.profiles is None:
        # histogram-level cohorts skip cleaning; hand their summaries straight to fit
        summ = _outdir(cfg, "summaries")
        write_grid(cohort.grid, summ / "grid.json")
        write_hist1d([cohort.histograms[s] for s in cohort.ids], summ / "hist1d.csv")
    logger.info("simulated %d subjects into %s", truth.n, out)
    return EXIT_OK


def cmd_clean(cfg: dict) -> int:
    path = _profiles_path(cfg)
    ccfg = CleaningConfig(**cfg["cleaning"])
    try:
        profiles = parse_profiles(path, cfg["inputs"]["profile_format"])
    except ParseError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None
    if not profiles:
        raise CliError(EXIT_EMPTY, f"{path}: no profiles")
    try:
        cleaned, stats = clean_cohort(profiles, ccfg)
    except ValueError as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from None
    out = _outdir(cfg, "clean")
    report = cleaning_report(cleaned, ccfg, stats)
    write_report(report, out / "report.json")
    write_profiles(cleaned, out / "profiles_clean.csv", format="wide_csv")
    if report["n_valid"] == 0:
        raise CliError(EXIT_EMPTY, "no profile passed cleaning")
    logger.info("%d of %d profiles valid", report["n_valid"], report["n_subjects"])
    return EXIT_OK


def cmd_summarize(cfg: dict) -> int:
    src = Path(cfg["out"]) / "clean"
    report = json.loads(_need(src / "report.json", "cleaning report").read_text())
    try:
        raw = parse_profiles(_need(src / "profiles_clean.csv", "cleaned profiles"), "wide_csv")
    except ParseError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    cleaned = [c for c in restore_clean_profiles(raw, report) if c.valid]
    if not cleaned:
        raise CliError(EXIT_EMPTY, "no valid profiles to summarise")
    grid = _grid(cfg)
    out = _outdir(cfg, "summaries")
    try:
        h1 = [hist1d(c, grid) for c in cleaned]
        hs = [hist_split(c, grid) for c in cleaned]
        h2 = [hist2d(c, grid, cfg["bins"]["hour_width"]) for c in cleaned]
    except (InvalidProfileError, ValueError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    write_grid(grid, out / "grid.json")
    write_hist1d(h1, out / "hist1d.csv")
    write_hist_split(hs, out / "hist_split.csv")
    write_hist2d(h2, out / "hist2d.csv")
    return EXIT_OK


def _fit_one(spec: ModelSpec, cov, summaries):
    try:
        D = assemble(spec, cov, summaries)
        return fit_reml(D), None
    except (FitError, DesignError, np.linalg.LinAlgError) as exc:
        return None, exc


def cmd_fit(cfg: dict) -> int:
    cov = _covariates(cfg)
    summaries = _load_summaries(cfg)
    specs = _specs(cfg)
    out = _outdir(cfg, "fit")
    with ThreadPoolExecutor(max_workers=cfg["threads"]) as ex:
        results = list(ex.map(lambda s: _fit_one(s, cov, summaries), specs))
    failed = False
    for spec, (fit, err) in zip(specs, results):
        d = out / spec.variant
        d.mkdir(exist_ok=True)
        if fit is None:
            failed = True
            _dump({"variant": spec.variant, "error": str(err), "error_type": type(err).__name__}, d / "diagnostics.json")
            logger.error("%s: fit failed: %s", spec.variant, err)
            continue
        _dump(fit_to_dict(fit), d / "fit.json")
        _dump({"converged": fit.converged, "diagnostics": fit.diagnostics}, d / "diagnostics.json")
        for t in fit.design.functional_terms():
            safe = t.label.replace("(", "_").replace(")", "").replace(",", "_").replace(":", "_")
            write_coef_function(fit, t.label, d / f"coef_{safe}.csv")
            if cfg["plots"] and t.source != "hist2d":
                se = fit.term_se(t.label)
                est = fit.term_function(t.label)
                write_function_svg(d / f"coef_{safe}.svg", t.eval_points, est, est - 1.96 * se, est + 1.96 * se, title=t.label)
    return EXIT_FIT if failed else EXIT_OK


def cmd_compare(cfg: dict) -> int:
    cov = _covariates(cfg)
    summaries = _load_summaries(cfg)
    specs = _specs(cfg)
    out = _outdir(cfg, "compare")
    ids = sorted(set(cov["subject_id"].astype(str)) & set(summaries["oneD"]))
    split_seed = cfg["split"]["seed"] if cfg["split"]["seed"] is not None else cfg["seed"]
    try:
        split = make_split(ids, cfg["split"]["fraction"], split_seed)
    except ValueError as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from None
    rows = compare_family(specs, cov, summaries, split)
    write_table_csv(rows, out / "table.csv")
    (out / "table.txt").write_text(format_table(rows))
    _dump({"train_ids": list(split.train_ids), "valid_ids": list(split.valid_ids), "seed": split.seed}, out / "split.json")
    if cfg["drop_term"]:
        spec = next((s for s in specs if s.variant == cfg["drop_term"]), None)
        if spec is None:
            raise ConfigError(f"drop_term model {cfg['drop_term']!r} is not in models")
        drows = drop_term(spec, cov, summaries, split)
        write_table_csv(drows, out / "drop_term.csv")
        (out / "drop_term.txt").write_text(format_table(drows))
    return EXIT_FIT if all(r.failed for r in rows) else EXIT_OK


def cmd_infer(cfg: dict) -> int:
    cov = _covariates(cfg)
    summaries = _load_summaries(cfg)
    inf = cfg["inference"]
    spec = next((s for s in _specs({**cfg, "models": [inf["model"]]})), None)
    out = _outdir(cfg, "infer")
    fit, err = _fit_one(spec, cov, summaries)
    if fit is None:
        _dump({"variant": spec.variant, "error": str(err)}, out / "diagnostics.json")
        raise CliError(EXIT_FIT, f"fit failed: {err}")
    draws = sample_posterior(fit, inf["draws"], cfg["seed"])
    grid = read_grid(Path(cfg["out"]) / "summaries" / "grid.json")
    intervals = []
    for sd in cfg["scenarios"]:
        try:
            s = Scenario.from_dict(sd, grid)
            intervals.append(percent_change(fit, draws, cov, summaries, s, level=inf["level"]))
        except ScenarioError as exc:
            raise ConfigError(f"scenario {sd.get('name', '')!r}: {exc}") from None
    write_intervals(intervals, out / "intervals.json", out / "intervals.csv")
    if fit.design.functional_terms():
        band = coef_function_band(fit, draws, level=inf["level"])
        band.write_csv(out / "band.csv")
        if cfg["plots"]:
            write_function_svg(out / "band.svg", band.points, band.estimate, band.lower, band.upper, title=band.label)
    if inf["nonlinearity"]:
        opts = cfg["model_options"]
        lin, full = nonlinearity_specs(response=opts["response"], height=opts["height"])
        try:
            res = nonlinearity_test(assemble(lin, cov, summaries), assemble(full, cov, summaries))
        except (FitError, DesignError) as exc:
            raise CliError(EXIT_FIT, f"nonlinearity test failed: {exc}") from None
        _dump(res.to_dict(), out / "nonlinearity.json")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "clean": cmd_clean,
    "summarize": cmd_summarize,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "infer": cmd_infer,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="maximum worker threads")
    common.add_argument("--zero-block", type=int, dest="zero_block", help="non-wear zero-run threshold (minutes)")
    common.add_argument("--bins", help="bin grid as WIDTH[,UPPER[,CAP]]")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="actihist", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
