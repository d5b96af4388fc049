"""Train/validation splits, RMSPE and model-family comparison tables."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .design import VARIANT_LABELS, DesignError, ModelSpec, assemble, normalize_summaries
from .fitting import FitError, FitResult, fit_reml

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("model", "N_T", "edf", "adj_R2", "dAIC", "dBIC", "RMSPE")


@dataclass(frozen=True)
class Split:
    train_ids: tuple[str, ...]
    valid_ids: tuple[str, ...]
    fraction: float
    seed: int


def make_split(ids: Sequence[str], fraction: float = 0.75, seed: int = 0) -> Split:
    """Uniform split without replacement; ``round(fraction * n)`` subjects train."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    ids = list(ids)
    n = len(ids)
    if n < 8:
        raise ValueError(f"need at least 8 subjects to split, got {n}")
    if len(set(ids)) != n:
        raise ValueError("subject ids are not unique")
    n_train = int(np.floor(fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    train = sorted(ids[i] for i in perm[:n_train])
    valid = sorted(ids[i] for i in perm[n_train:])
    return Split(tuple(train), tuple(valid), fraction, seed)


@dataclass(frozen=True)
class RMSPEResult:
    value: float
    n_used: int
    excluded: tuple[tuple[str, str], ...] = ()


def rmspe(
    fit: FitResult,
    covariates: pd.DataFrame,
    summaries,
    valid_ids: Sequence[str],
    smearing: bool = False,
) -> RMSPEResult:
    """Root mean squared prediction error on the natural scale.

    Predictions are ``exp(eta_hat)``; ``smearing`` multiplies them by the
    mean of the exponentiated training residuals.
    """
    D = fit.design
    leaked = set(valid_ids) & set(D.subject_ids)
    if leaked:
        raise ValueError(f"validation subjects were used in training: {sorted(leaked)[:5]}")
    spec = D.spec
    frame = covariates.set_index("subject_id") if "subject_id" in covariates.columns else covariates
    frame = frame.copy()
    frame.index = frame.index.astype(str)
    frame = frame.loc[[str(i) for i in valid_ids]]
    from .design import _complete_cases

    kept, excluded = _complete_cases(spec, frame, normalize_summaries(summaries))
    if excluded:
        logger.info("rmspe: %d validation subjects excluded", len(excluded))
    if not kept:
        return RMSPEResult(float("nan"), 0, tuple(excluded))
    eta = D.predict_matrix(frame, summaries, kept) @ fit.beta_hat
    pred = np.exp(eta) if spec.log_response else eta
    if smearing and spec.log_response:
        pred = pred * float(np.mean(np.exp(D.y - fit.fitted)))
    y = frame.loc[kept, spec.response].to_numpy(dtype=float)
    return RMSPEResult(float(np.sqrt(np.mean((y - pred) ** 2))), len(kept), tuple(excluded))


@dataclass(frozen=True)
class ComparisonRow:
    model: str
    N_T: int
    edf: float
    adj_R2: float
    dAIC: float
    dBIC: float
    RMSPE: float
    failed: bool = False
    message: str = ""
    criteria: dict = field(default_factory=dict, repr=False, compare=False)

    def as_list(self) -> list:
        return [getattr(self, c) for c in TABLE_COLUMNS]


def _label(spec: ModelSpec) -> str:
    return VARIANT_LABELS.get(spec.variant, spec.variant)


def _fit_on(spec: ModelSpec, covariates, summaries, train_ids) -> FitResult:
    cov = covariates.set_index("subject_id") if "subject_id" in covariates.columns else covariates
    cov = cov.copy()
    cov.index = cov.index.astype(str)
    D = assemble(spec, cov.loc[list(train_ids)], summaries)
    return fit_reml(D)


def _rows(
    named: Sequence[tuple[str, ModelSpec]],
    base_index: int,
    covariates,
    summaries,
    split: Split,
    smearing: bool,
) -> list[ComparisonRow]:
    fits: list[FitResult | None] = []
    errors: list[str] = []
    for _, spec in named:
        try:
            fits.append(_fit_on(spec, covariates, summaries, split.train_ids))
            errors.append("")
        except (FitError, DesignError, np.linalg.LinAlgError) as exc:
            logger.warning("fit failed for %s: %s", spec.variant, exc)
            fits.append(None)
            errors.append(str(exc))
    base = fits[base_index]
    rows = []
    for (label, spec), fit, err in zip(named, fits, errors):
        if fit is None:
            rows.append(ComparisonRow(label, 0, np.nan, np.nan, np.nan, np.nan, np.nan, True, err))
            continue
        c = fit.criteria
        daic = base.criteria["AIC"] - c["AIC"] if base is not None else np.nan
        dbic = base.criteria["BIC"] - c["BIC"] if base is not None else np.nan
        r = rmspe(fit, covariates, summaries, split.valid_ids, smearing=smearing)
        rows.append(
            ComparisonRow(
                label,
                fit.design.n,
                fit.edf_total,
                c["adj_R2"],
                daic,
                dbic,
                r.value,
                not fit.converged,
                "" if fit.converged else "REML optimiser did not converge",
                dict(c),
            )
        )
    return rows


def _sort_key(row: ComparisonRow):
    return (row.failed and np.isnan(row.RMSPE), np.inf if np.isnan(row.RMSPE) else row.RMSPE, row.model)


def compare_family(
    specs: Sequence[ModelSpec],
    covariates: pd.DataFrame,
    summaries,
    split: Split,
    base: str = "base",
    smearing: bool = False,
) -> list[ComparisonRow]:
    """Fit each spec on the training rows; deltas are ``criterion(base) - criterion(model)``.

    The base model is the spec whose variant equals ``base`` (the first spec
    if none does).  Rows are sorted by RMSPE; failed fits are flagged and
    sorted last.
    """
    if not specs:
        raise ValueError("empty model family")
    idx = next((i for i, s in enumerate(specs) if s.variant == base), 0)
    named = [(_label(s), s) for s in specs]
    rows = _rows(named, idx, covariates, summaries, split, smearing)
    return sorted(rows, key=_sort_key)


def drop_term(
    spec: ModelSpec,
    covariates: pd.DataFrame,
    summaries,
    split: Split,
    drops: Sequence[str] | None = None,
    smearing: bool = False,
) -> list[ComparisonRow]:
    """Refit with each term removed in turn; deltas are relative to the full model.

    The first row is the full model itself.
    """
    drops = list(spec.term_names if drops is None else drops)
    if len(spec.term_names) < 2:
        raise ValueError("drop_term needs a model with at least two terms")
    if not drops:
        raise ValueError("nothing to drop")
    named = [("full", spec)] + [(f"- {name}", spec.without(name)) for name in drops]
    return _rows(named, 0, covariates, summaries, split, smearing)


def write_table_csv(rows: Sequence[ComparisonRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(TABLE_COLUMNS) + ["failed"])
        for r in rows:
            vals = [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r.as_list()]
            w.writerow(vals + [int(r.failed)])


def format_table(rows: Sequence[ComparisonRow]) -> str:
    header = ["model", "N_T", "edf", "adj.R2", "dAIC", "dBIC", "RMSPE"]
    body = [
        [
            r.model + (" *" if r.failed else ""),
            str(r.N_T),
            f"{r.edf:.2f}",
            f"{100 * r.adj_R2:.2f}",
            f"{r.dAIC:.2f}",
            f"{r.dBIC:.2f}",
            f"{r.RMSPE:.4f}",
        ]
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    for b in body:
        lines.append("  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(b, widths))))
    return "\n".join(lines) + "\n"
