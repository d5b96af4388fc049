"""Posterior simulation, pointwise bands, redistribution scenarios and the
approximate nonlinearity test."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .design import DesignBlocks
from .fitting import FitResult, fit_reml
from .summaries import BinGrid, HistogramSummary

logger = logging.getLogger(__name__)

# an edf difference at or below this means the penalised part was shrunk away
DEGENERATE_DOF = 1e-6
# chi-square reference dof floor; with fractional edf differences the
# distribution piles up at zero and rejects far too often
MIN_REFERENCE_DOF = 1.0


class ScenarioError(ValueError):
    pass


class PosteriorError(ValueError):
    pass


@dataclass(frozen=True)
class PosteriorDraws:
    draws: np.ndarray = field(repr=False)
    seed: int
    R: int


def sample_posterior(fit: FitResult, R: int = 10000, seed: int = 0) -> PosteriorDraws:
    """``R`` draws from ``N(beta_hat, V_beta)`` using a symmetric square root of ``V_beta``."""
    V = 0.5 * (fit.V_beta + fit.V_beta.T)
    if not np.all(np.isfinite(V)):
        raise PosteriorError("V_beta has non-finite entries")
    ev, U = np.linalg.eigh(V)
    scale = max(np.abs(ev).max(), 0.0) if ev.size else 0.0
    if ev.size and ev.min() < -1e-8 * max(scale, 1e-300):
        jitter = 1e-10 * np.trace(V) / V.shape[0]
        raise PosteriorError(
            f"V_beta is not positive semi-definite (min eigenvalue {ev.min():.3g}); "
            f"consider adding a ridge of {jitter:.3g} to the diagonal"
        )
    L = U * np.sqrt(np.clip(ev, 0.0, None))
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((R, V.shape[0]))
    return PosteriorDraws(fit.beta_hat[None, :] + Z @ L.T, seed, R)


# ----------------------------------------------------------------------------
# bands


@dataclass(frozen=True)
class Band:
    label: str
    points: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float

    @property
    def excludes_zero(self) -> np.ndarray:
        return (self.lower > 0) | (self.upper < 0)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "mean", "lo", "hi", "excludes_zero"])
            for row in zip(self.points, self.estimate, self.lower, self.upper, self.excludes_zero):
                w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), repr(float(row[3])), int(row[4])])


def _default_functional(fit: FitResult) -> str:
    terms = fit.design.functional_terms()
    if not terms:
        raise ValueError("fit has no functional term")
    return terms[0].label


def coef_function_band(
    fit: FitResult,
    draws: PosteriorDraws,
    grid=None,
    level: float = 0.95,
    label: str | None = None,
) -> Band:
    """Pointwise posterior band for a smooth term.

    ``grid`` defaults to the term's evaluation points (the included bin
    midpoints for functional terms).  Points outside the basis domain raise.
    """
    label = label or _default_functional(fit)
    t = fit.design.term(label)
    pts = t.eval_points if grid is None else np.asarray(grid, dtype=float)
    L = t.coef_map(pts)
    est = L @ fit.beta_hat[t.cols]
    curves = draws.draws[:, t.cols] @ L.T
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(curves, [a, 1.0 - a], axis=0)
    return Band(label, pts, est, lo, hi, level)


# ----------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class Scenario:
    """Move ``minutes_moved`` minutes/day from ``source_bins`` to ``target_bins``.

    Bin indices refer to the full grid (before any bin is dropped).
    """

    minutes_moved: float = 15.0
    source_bins: tuple[int, ...] = (0,)
    target_bins: tuple[int, ...] = ()
    allocation: str = "equal_mass_per_bin"
    name: str = ""

    def __post_init__(self):
        if self.minutes_moved < 0:
            raise ScenarioError("minutes_moved must be non-negative")
        if not self.source_bins:
            raise ScenarioError("source_bins is empty")
        if not self.target_bins and self.minutes_moved > 0:
            raise ScenarioError("target_bins is empty")
        if set(self.source_bins) & set(self.target_bins):
            raise ScenarioError("source and target bins overlap")
        if self.allocation != "equal_mass_per_bin":
            raise ScenarioError(f"unsupported allocation {self.allocation!r}")

    @classmethod
    def above(cls, grid: BinGrid, threshold: float, minutes: float = 15.0, name: str = "") -> "Scenario":
        """Sedentary bin to every bin whose midpoint exceeds ``threshold``."""
        return cls.from_ranges(grid, minutes, (None, grid.edges[1]), (threshold, None), name=name)

    @classmethod
    def from_ranges(cls, grid: BinGrid, minutes: float, source, target, name: str = "") -> "Scenario":
        def pick(rng):
            lo, hi = rng
            m = grid.midpoints
            ok = np.ones(m.size, dtype=bool)
            if lo is not None:
                ok &= m > lo
            if hi is not None:
                ok &= m < hi
            return tuple(int(i) for i in np.flatnonzero(ok))

        return cls(float(minutes), pick(source), pick(target), name=name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "minutes_moved": self.minutes_moved,
            "source_bins": list(self.source_bins),
            "target_bins": list(self.target_bins),
            "allocation": self.allocation,
        }

    @classmethod
    def from_dict(cls, d: Mapping, grid: BinGrid | None = None) -> "Scenario":
        """Accept explicit bin lists or ``source_range``/``target_range`` midpoint ranges."""
        minutes = float(d.get("minutes_moved", d.get("minutes", 15.0)))
        name = d.get("name", "")
        if "source_range" in d or "target_range" in d:
            if grid is None:
                raise ScenarioError("midpoint ranges need a bin grid")
            src = d.get("source_range", [None, float(grid.edges[1])])
            return cls.from_ranges(grid, minutes, src, d["target_range"], name=name)
        return cls(
            minutes,
            tuple(int(b) for b in d.get("source_bins", (0,))),
            tuple(int(b) for b in d.get("target_bins", ())),
            d.get("allocation", "equal_mass_per_bin"),
            name,
        )


def apply_scenario(h: HistogramSummary, s: Scenario) -> HistogramSummary:
    """Redistribute ``minutes_moved / daily_weartime`` of relative frequency.

    Mass leaves the source bins in proportion to their current frequencies
    and is added in equal amounts to each target bin.
    """
    h._need("oneD")
    if h.offset:
        raise ScenarioError("apply scenarios to full-grid summaries")
    if s.minutes_moved == 0:
        return h
    J = h.z.size
    if max(s.source_bins + s.target_bins) >= J:
        raise ScenarioError(f"scenario bins exceed the {J}-bin grid")
    m = s.minutes_moved / h.daily_weartime
    src = np.asarray(s.source_bins)
    tgt = np.asarray(s.target_bins)
    available = float(h.z[src].sum())
    if available < m:
        raise ScenarioError(f"{h.subject_id}: source mass {available:.4g} < {m:.4g}")
    z = h.z.copy()
    z[src] -= m * z[src] / available
    z[tgt] += m / tgt.size
    return replace(h, z=z)


@dataclass(frozen=True)
class CredibleInterval:
    level: float
    lower: float
    mean: float
    upper: float
    n_subjects: int = 0
    skipped: tuple[str, ...] = ()
    scenario: str = ""

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "level": self.level,
            "lower": self.lower,
            "mean": self.mean,
            "upper": self.upper,
            "n_subjects": self.n_subjects,
            "n_skipped": len(self.skipped),
            "skipped": list(self.skipped),
        }


def scenario_delta_matrix(fit: FitResult, covariates: pd.DataFrame, summaries, s: Scenario, ids=None):
    """``X(z') - X(z)`` for the subjects the scenario applies to."""
    D = fit.design
    for t in D.terms:
        if t.source in ("hist_wd", "hist_we", "hist2d"):
            raise ScenarioError(f"scenarios are defined for 1D histograms only (term {t.label})")
    from .design import normalize_summaries

    table = normalize_summaries(summaries).get("oneD", {})
    ids = list(D.subject_ids if ids is None else ids)
    used, skipped, moved = [], [], {}
    for sid in ids:
        try:
            moved[sid] = apply_scenario(table[sid], s)
            used.append(sid)
        except ScenarioError as exc:
            logger.info("scenario %s: skipping %s", s.name, exc)
            skipped.append(sid)
    if not used:
        return np.zeros((0, D.p)), used, skipped
    X0 = D.predict_matrix(covariates, {"oneD": table}, used)
    X1 = D.predict_matrix(covariates, {"oneD": moved}, used)
    return X1 - X0, used, skipped


def percent_change(
    fit: FitResult,
    draws: PosteriorDraws,
    covariates: pd.DataFrame,
    summaries,
    s: Scenario,
    ids: Sequence[str] | None = None,
    level: float = 0.95,
) -> CredibleInterval:
    """Cohort-mean percentage change in the outcome under scenario ``s``.

    Per draw, ``exp(delta eta) - 1`` is averaged over subjects; the interval
    is taken over draws.
    """
    dX, used, skipped = scenario_delta_matrix(fit, covariates, summaries, s, ids)
    if not used:
        raise ScenarioError("no subject has enough source mass for this scenario")
    per_draw = 100.0 * np.expm1(dX @ draws.draws.T).mean(axis=0)
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(per_draw, [a, 1.0 - a])
    return CredibleInterval(level, float(lo), float(per_draw.mean()), float(hi), len(used), tuple(skipped), s.name)


def write_intervals(intervals: Sequence[CredibleInterval], json_path, csv_path=None) -> None:
    rows = [ci.to_dict() for ci in intervals]
    Path(json_path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        cols = ["scenario", "level", "lower", "mean", "upper", "n_subjects", "n_skipped"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


# ----------------------------------------------------------------------------
# nonlinearity test


@dataclass(frozen=True)
class NonlinearityTest:
    statistic: float
    dof: float
    p_value: float
    inconclusive: bool
    criteria_linear: dict
    criteria_full: dict
    approximate: bool = True

    def rejects(self, alpha: float = 0.05) -> bool:
        return (not self.inconclusive) and self.p_value < alpha

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "dof": self.dof,
            "p_value": self.p_value,
            "inconclusive": self.inconclusive,
            "approximate": self.approximate,
            "criteria_linear": self.criteria_linear,
            "criteria_full": self.criteria_full,
        }


def nonlinearity_test(
    D_linear: DesignBlocks,
    D_full: DesignBlocks,
    y=None,
    fits: tuple[FitResult, FitResult] | None = None,
) -> NonlinearityTest:
    """Approximate LRT of the penalised thin-plate part against the linear-in-cpm model.

    Both models are fitted by REML; the statistic is twice the log-likelihood
    difference and the reference is chi-square on the edf difference, floored
    at ``MIN_REFERENCE_DOF``.  A vanishing edf difference is reported as
    inconclusive with p = 1.
    """
    if fits is None:
        fits = (fit_reml(D_linear, y), fit_reml(D_full, y))
    f0, f1 = fits
    stat = max(0.0, 2.0 * (f1.criteria["logLik"] - f0.criteria["logLik"]))
    dof = f1.edf_total - f0.edf_total
    inconclusive = dof <= DEGENERATE_DOF
    p = 1.0 if inconclusive else float(stats.chi2.sf(stat, max(dof, MIN_REFERENCE_DOF)))
    return NonlinearityTest(float(stat), float(dof), p, bool(inconclusive), dict(f0.criteria), dict(f1.criteria))
