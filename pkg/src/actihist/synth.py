"""Synthetic cohorts with known truth.

Two generation levels:

* ``gen_histograms`` draws relative-frequency histograms directly (fast; used
  by the statistical checks);
* ``gen_profiles`` draws 7-day minute series from a four-state Markov dwell
  chain with night-time device removal, random non-wear blocks and sensor
  spikes, so the whole cleaning pipeline is exercised.

Outcomes follow the additive model on the log scale,

    log y = alpha + x^T beta + f2(height) + sum_j f(p_j) z_j + eps.

All generator constants below were tuned once (see ``tests/test_synth.py``
for the calibration targets) and are frozen.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import interpolate, stats

from .profiles import MAX_MINUTES, MINUTES_PER_DAY, CleaningConfig, RawProfile, clean_cohort
from .summaries import BinGrid, HistogramSummary, hist1d, make_bins

# default shape: rises over [200, 800], crosses zero near 1400, negative
# plateau beyond 2400 (in units of f_scale)
HUMP_KNOTS = np.array([0.0, 200.0, 500.0, 800.0, 1100.0, 1400.0, 1900.0, 2400.0, 15000.0])
HUMP_VALUES = np.array([0.0, 0.0, 0.6, 1.0, 0.6, 0.0, -0.75, -1.0, -1.0])

# minute-level chain: sedentary, light, moderate, vigorous
STATE_PERSISTENCE = (0.92, 0.85, 0.75, 0.6)
STATE_LOG_MEANS = (np.log(350.0), np.log(2500.0), np.log(6000.0))
STATE_LOG_SDS = (0.6, 0.35, 0.3)
START_DATE = datetime(2024, 1, 1)  # a Monday


@dataclass(frozen=True)
class TruthSpec:
    """Ground truth and generator settings for a synthetic cohort."""

    n: int = 500
    f_kind: str = "hump"  # hump | linear | zero
    f_scale: float = 1.0
    f_slope: float = -2.5e-4  # per cpm, used when f_kind == "linear"
    f2_slope: float = 0.03  # per 10 cm of height
    f2_curve: float = 0.01
    alpha: float = float(np.log(12.0))
    beta: dict = field(default_factory=lambda: {"sex": 0.05, "weartime": 0.0, "m_obese": 0.05})
    sigma: float = 0.163
    # direct-histogram generator
    sed_mean: float = 0.55
    sed_concentration: float = 25.0
    component_log_centers: tuple = (float(np.log(450.0)), float(np.log(2500.0)), float(np.log(6000.0)))
    component_weights: tuple = (6.0, 2.0, 0.6)
    component_jitter: float = 0.25
    component_log_sd_range: tuple = (0.4, 0.7)
    wiggle_sd: float = 0.5
    wiggle_dim: int = 10
    valid_day_range: tuple = (3, 7)
    daily_wear_range: tuple = (600.0, 840.0)
    # minute-series generator
    sedentary_zero_prob: float = 0.5
    nonwear_blocks_per_day: float = 0.6
    nonwear_block_range: tuple = (30, 180)
    night_off: bool = True
    spike_rate: float = 2e-4
    sedentary_persistence: float | None = None
    # grid
    bin_width: float = 100.0
    bin_upper: float = 8000.0
    bin_cap: float = 15000.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if self.f_kind not in ("hump", "linear", "zero"):
            raise ValueError(f"unknown f_kind {self.f_kind!r}")

    def grid(self) -> BinGrid:
        return make_bins(self.bin_width, self.bin_upper, self.bin_cap)

    def with_(self, **kw) -> "TruthSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TruthSpec":
        d = dict(d)
        for k in ("component_log_centers", "component_weights", "component_log_sd_range", "valid_day_range", "daily_wear_range", "nonwear_block_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def f_true(p, t: TruthSpec) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if t.f_kind == "zero":
        return np.zeros_like(p)
    if t.f_kind == "linear":
        return t.f_slope * p
    shape = interpolate.PchipInterpolator(HUMP_KNOTS, HUMP_VALUES, extrapolate=True)
    return t.f_scale * shape(p)


def f2_true(height, t: TruthSpec) -> np.ndarray:
    u = (np.asarray(height, dtype=float) - 150.0) / 10.0
    return t.f2_slope * u + t.f2_curve * u**2


@dataclass
class SynthCohort:
    truth: TruthSpec
    seed: int
    grid: BinGrid
    covariates: pd.DataFrame
    histograms: dict[str, HistogramSummary]
    y: np.ndarray
    profiles: list[RawProfile] | None = None

    @property
    def ids(self) -> list[str]:
        return list(self.covariates["subject_id"])

    def write(self, out_dir: str | Path, profile_format: str = "long_csv") -> dict[str, Path]:
        from .profiles import write_profiles
        from .summaries import write_grid, write_hist1d

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"covariates": out / "covariates.csv", "truth": out / "truth.json"}
        self.covariates.to_csv(paths["covariates"], index=False, float_format="%.17g")
        write_truth(self.truth, paths["truth"], seed=self.seed)
        if self.profiles is not None:
            paths["profiles"] = out / "profiles.csv"
            write_profiles(self.profiles, paths["profiles"], format=profile_format)
        else:
            paths["grid"] = out / "grid.json"
            paths["hist"] = out / "hist1d.csv"
            write_grid(self.grid, paths["grid"])
            write_hist1d([self.histograms[s] for s in self.ids], paths["hist"])
        return paths


def write_truth(t: TruthSpec, path: str | Path, seed: int | None = None) -> None:
    d = {"truth": t.to_dict(), "seed": seed}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_truth(path: str | Path) -> TruthSpec:
    return TruthSpec.from_dict(json.loads(Path(path).read_text())["truth"])


def _ids(n: int) -> list[str]:
    width = max(4, len(str(n)))
    return [f"S{i:0{width}d}" for i in range(1, n + 1)]


def _covariates(ids, rng: np.random.Generator) -> pd.DataFrame:
    n = len(ids)
    sex = np.where(rng.random(n) < 0.5, "male", "female")
    height = rng.normal(150.0, 8.0, n)
    m_obese = (rng.random(n) < 0.15).astype(int)
    return pd.DataFrame({"subject_id": ids, "sex": sex, "height": height, "m_obese": m_obese})


def linear_predictor(covariates: pd.DataFrame, histograms, t: TruthSpec) -> np.ndarray:
    """``log y`` without noise, from the histograms on their own grids."""
    eta = np.full(len(covariates), t.alpha)
    for name, b in t.beta.items():
        if name == "sex":
            eta += b * (covariates["sex"].to_numpy() == "male")
        else:
            eta += b * covariates[name].to_numpy(dtype=float)
    eta += f2_true(covariates["height"].to_numpy(), t)
    for i, sid in enumerate(covariates["subject_id"]):
        h = histograms[sid]
        eta[i] += float(np.dot(f_true(h.midpoints, t), h.z))
    return eta


def gen_outcomes(histograms, covariates: pd.DataFrame, t: TruthSpec, seed: int) -> np.ndarray:
    """Outcomes in kg; ``covariates`` must contain ``subject_id``, sex, height, m_obese, weartime."""
    grid = t.grid()
    for sid in covariates["subject_id"]:
        if not histograms[sid].grid.same_as(grid):
            raise ValueError(f"{sid}: histogram grid does not match the truth grid")
    eta = linear_predictor(covariates, histograms, t)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return np.exp(eta + t.sigma * rng.standard_normal(len(eta)))


def _component_cdf(edges: np.ndarray, mu: np.ndarray, s: np.ndarray) -> np.ndarray:
    logs = np.log(np.maximum(edges, 1e-300))
    cdf = stats.norm.cdf((logs[None, :] - mu[:, None]) / s[:, None])
    cdf[:, 0] = 0.0
    return cdf


def _bin_probs(t: TruthSpec, grid: BinGrid, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-subject bin probabilities.

    Sedentary share ``w0`` goes to the first bin; the active share is a
    mixture of light, moderate and vigorous lognormal components with
    subject-specific weights and locations, tilted by a smooth random
    log-perturbation so that histograms vary in many directions.
    """
    a = t.sed_mean * t.sed_concentration
    w0 = rng.beta(a, t.sed_concentration - a, n)
    weights = rng.dirichlet(t.component_weights, n)
    probs = np.zeros((n, grid.n_bins))
    for k, center in enumerate(t.component_log_centers):
        mu = center + t.component_jitter * rng.standard_normal(n)
        sd = rng.uniform(*t.component_log_sd_range, n)
        cdf = _component_cdf(grid.edges, mu, sd)
        mass = np.diff(cdf, axis=1)
        mass /= np.maximum(mass.sum(axis=1, keepdims=True), 1e-300)
        probs += weights[:, k : k + 1] * mass
    if t.wiggle_sd > 0:
        from .basis import bspline_matrix

        u = np.log(grid.midpoints)
        B = bspline_matrix(u, t.wiggle_dim, 3, (u.min(), u.max()))
        probs *= np.exp(rng.normal(0.0, t.wiggle_sd, (n, t.wiggle_dim)) @ B.T)
    probs[:, 0] = 0.0
    probs /= probs.sum(axis=1, keepdims=True)
    probs *= (1.0 - w0)[:, None]
    probs[:, 0] += w0
    return probs


def gen_histograms(t: TruthSpec, seed: int) -> SynthCohort:
    """Histogram-level cohort (no minute series)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    grid = t.grid()
    ids = _ids(t.n)
    cov = _covariates(ids, rng)
    n = t.n
    probs = _bin_probs(t, grid, n, rng)
    days = rng.integers(t.valid_day_range[0], t.valid_day_range[1] + 1, n)
    daily = rng.uniform(*t.daily_wear_range, n)
    wear = np.round(days * daily).astype(int)
    tallies = np.vstack([rng.multinomial(wear[i], probs[i]) for i in range(n)])
    hists = {
        sid: HistogramSummary(sid, "oneD", tallies[i] / wear[i], grid, int(wear[i]), int(days[i]))
        for i, sid in enumerate(ids)
    }
    cov["weartime"] = wear
    y = gen_outcomes(hists, cov, t, seed)
    cov["fat_mass"] = y
    return SynthCohort(t, seed, grid, cov, hists, y)


def _transition_matrices(weights: np.ndarray, persistence) -> np.ndarray:
    # row k: stay with prob persistence[k], else move to another state in
    # proportion to the subject's mixture weights
    n, m = weights.shape
    P = np.empty((n, m, m))
    for k in range(m):
        w = weights.copy()
        w[:, k] = 0.0
        w /= w.sum(axis=1, keepdims=True)
        P[:, k, :] = (1.0 - persistence[k]) * w
        P[:, k, k] = persistence[k]
    return P


def _simulate_minutes(t: TruthSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    persistence = list(STATE_PERSISTENCE)
    if t.sedentary_persistence is not None:
        persistence[0] = t.sedentary_persistence
    weights = rng.dirichlet([6.0, 3.0, 0.8, 0.25], n)
    P = _transition_matrices(weights, persistence)
    cum = np.cumsum(P, axis=2)
    cum[:, :, -1] = 1.0
    state = np.zeros((n, MAX_MINUTES), dtype=np.int8)
    cur = np.zeros(n, dtype=int) if persistence[0] >= 1.0 else rng.choice(4, n, p=[0.6, 0.3, 0.08, 0.02])
    u = rng.random((n, MAX_MINUTES))
    rows = np.arange(n)
    for m in range(MAX_MINUTES):
        state[:, m] = cur
        cur = (u[:, m, None] > cum[rows, cur]).sum(axis=1)
        cur = np.minimum(cur, 3)
    counts = np.empty((n, MAX_MINUTES))
    sed = state == 0
    zero = rng.random((n, MAX_MINUTES)) < t.sedentary_zero_prob
    counts[sed] = np.where(zero[sed], 0.0, rng.integers(1, 100, int(sed.sum())))
    for k in (1, 2, 3):
        mask = state == k
        draws = np.exp(rng.normal(STATE_LOG_MEANS[k - 1], STATE_LOG_SDS[k - 1], int(mask.sum())))
        counts[mask] = np.clip(np.round(draws), 100, 14999)
    return counts


def _inject_nonwear(counts: np.ndarray, t: TruthSpec, rng: np.random.Generator) -> None:
    n = counts.shape[0]
    days = counts.reshape(n, -1, MINUTES_PER_DAY)
    if t.night_off:
        # device off from ~22:00 to ~07:00, jittered per subject and day
        off = rng.integers(21 * 60, 23 * 60, days.shape[:2])
        on = rng.integers(6 * 60, 8 * 60, days.shape[:2])
        minute = np.arange(MINUTES_PER_DAY)
        night = (minute[None, None, :] >= off[..., None]) | (minute[None, None, :] < on[..., None])
        days[night] = 0.0
    if t.nonwear_blocks_per_day > 0:
        k = rng.poisson(t.nonwear_blocks_per_day, days.shape[:2])
        for i, d in zip(*np.nonzero(k)):
            for _ in range(k[i, d]):
                length = rng.integers(t.nonwear_block_range[0], t.nonwear_block_range[1] + 1)
                start = rng.integers(8 * 60, 20 * 60)
                days[i, d, start : start + length] = 0.0
    if t.spike_rate > 0:
        spikes = rng.random(counts.shape) < t.spike_rate
        counts[spikes] = rng.integers(15001, 30000, int(spikes.sum()))


def gen_profiles(t: TruthSpec, seed: int, cfg: CleaningConfig = CleaningConfig()) -> SynthCohort:
    """Minute-level cohort.

    Outcomes are generated from each subject's 1D histogram after cleaning
    with ``cfg``; subjects whose profile fails cleaning get ``NaN`` outcome
    and no histogram.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    ids = _ids(t.n)
    cov = _covariates(ids, rng)
    counts = _simulate_minutes(t, t.n, rng)
    _inject_nonwear(counts, t, rng)
    profiles = [RawProfile(sid, START_DATE, counts[i]) for i, sid in enumerate(ids)]
    grid = t.grid()
    hists: dict[str, HistogramSummary] = {}
    try:
        cleaned, _ = clean_cohort(profiles, cfg)
    except ValueError:
        cleaned = []
    for c in cleaned:
        if c.valid:
            hists[c.subject_id] = hist1d(c, grid)
    wear = np.array([hists[s].weartime_minutes if s in hists else np.nan for s in ids])
    cov["weartime"] = wear
    y = np.full(t.n, np.nan)
    keep = cov["subject_id"].isin(list(hists)).to_numpy()
    if keep.any():
        y[keep] = gen_outcomes(hists, cov.loc[keep].reset_index(drop=True), t, seed)
    cov["fat_mass"] = y
    return SynthCohort(t, seed, grid, cov, hists, y, profiles)


def true_percent_change(cohort: SynthCohort, scenario, ids=None) -> float:
    """Cohort-mean percentage change implied by ``f_true`` under ``scenario``."""
    from .inference import apply_scenario, ScenarioError

    ids = cohort.ids if ids is None else ids
    changes = []
    for sid in ids:
        h = cohort.histograms[sid]
        try:
            h2 = apply_scenario(h, scenario)
        except ScenarioError:
            continue
        d = float(np.dot(f_true(h.midpoints, cohort.truth), h2.z - h.z))
        changes.append(np.expm1(d))
    return 100.0 * float(np.mean(changes))
