"""Model specifications and design-matrix assembly.

A functional term ``sum_j f(p_j) z_i(p_j)`` becomes the column block
``Z @ B(p) @ C`` where ``Z`` stacks the subjects' histograms, ``B(p)`` is a
spline basis evaluated at the bin midpoints and ``C`` absorbs the
identifiability constraint (sum-to-zero over midpoints, or ``f(p_1) = 0``
for the dropped-first-bin form).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .basis import (
    BasisRealization,
    BasisSpec,
    constraint_null_space,
    cubic_rs_basis,
    make_basis,
    penalty_null_dim,
    tensor_product,
)
from .summaries import BinGrid, HistogramSummary, drop_first_bin, mean_cpm

logger = logging.getLogger(__name__)

FUNCTIONAL_SOURCES = {"hist": "oneD", "hist_wd": "split", "hist_we": "split", "hist2d": "twoD"}
VARIANTS = ("base", "hist", "cpm_linear", "hist_by_gender", "hist2d", "hist_weekend")
VARIANT_LABELS = {
    "base": "base",
    "hist": "+ hist",
    "cpm_linear": "+ cpm",
    "hist_by_gender": "+ hist by gender",
    "hist2d": "+ 2Dhist",
    "hist_weekend": "+ hist by WE",
}


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothTerm:
    """A penalised term.

    ``source`` is a covariate column or one of ``hist``, ``hist_wd``,
    ``hist_we``, ``hist2d``.  ``part`` selects the affine (``linear``) or
    penalised (``nonlinear``) columns of a thin-plate basis.
    """

    source: str
    basis: BasisSpec = BasisSpec()
    by: str | None = None
    parameterization: str = "centered"
    part: str = "full"
    label: str | None = None

    def __post_init__(self):
        if self.parameterization not in ("centered", "drop_first_bin"):
            raise DesignError(f"unknown parameterization {self.parameterization!r}")
        if self.parameterization == "drop_first_bin" and self.source not in ("hist", "hist_wd", "hist_we"):
            raise DesignError("drop_first_bin applies only to one-dimensional functional terms")
        if (self.source == "hist2d") != (self.basis.kind == "tensor"):
            raise DesignError("hist2d terms need a tensor basis and vice versa")
        if self.part != "full" and self.basis.kind != "thinplate":
            raise DesignError("part selection needs a thin-plate basis")

    @property
    def is_functional(self) -> bool:
        return self.source in FUNCTIONAL_SOURCES

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        base = {
            "hist": "f(p)",
            "hist_wd": "f_wd(p)",
            "hist_we": "f_we(p)",
            "hist2d": "f(p,t)",
        }.get(self.source, f"s({self.source})")
        if self.part != "full":
            base += f"[{self.part}]"
        return base


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "hist"
    response: str = "fat_mass"
    log_response: bool = True
    scalar_terms: tuple[str, ...] = ("sex", "weartime", "m_obese")
    smooth_terms: tuple[SmoothTerm, ...] = ()

    def __post_init__(self):
        names = [t.name for t in self.smooth_terms] + list(self.scalar_terms)
        if len(set(names)) != len(names):
            raise DesignError(f"duplicate term names in {names}")

    @property
    def term_names(self) -> list[str]:
        return list(self.scalar_terms) + [t.name for t in self.smooth_terms]

    def without(self, name: str) -> "ModelSpec":
        if name in self.scalar_terms:
            return ModelSpec(
                f"{self.variant}-{name}",
                self.response,
                self.log_response,
                tuple(s for s in self.scalar_terms if s != name),
                self.smooth_terms,
            )
        kept = tuple(t for t in self.smooth_terms if t.name != name)
        if len(kept) == len(self.smooth_terms):
            raise DesignError(f"no term named {name!r}")
        return ModelSpec(f"{self.variant}-{name}", self.response, self.log_response, self.scalar_terms, kept)


DEFAULT_FUNCTIONAL_BASIS = BasisSpec("pspline", 40, penalty_order=1, adaptive_dim=5)
DEFAULT_HEIGHT_BASIS = BasisSpec("thinplate", 10)
DEFAULT_TENSOR_BASIS = BasisSpec("tensor", (8, 8))


def variant_spec(
    variant: str,
    *,
    scalar_terms: Sequence[str] = ("sex", "weartime", "m_obese"),
    height: str | None = "height",
    response: str = "fat_mass",
    functional_basis: BasisSpec = DEFAULT_FUNCTIONAL_BASIS,
    height_basis: BasisSpec = DEFAULT_HEIGHT_BASIS,
    tensor_basis: BasisSpec = DEFAULT_TENSOR_BASIS,
    parameterization: str = "drop_first_bin",
    by: str = "sex",
) -> ModelSpec:
    """One of the six model variants compared in the model-selection table."""
    if variant not in VARIANTS:
        raise DesignError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    scalars = tuple(scalar_terms)
    smooths = [SmoothTerm(height, height_basis)] if height else []
    if variant == "cpm_linear":
        scalars = scalars + ("cpm",)
    elif variant == "hist":
        smooths.append(SmoothTerm("hist", functional_basis, parameterization=parameterization))
    elif variant == "hist_by_gender":
        smooths.append(SmoothTerm("hist", functional_basis, by=by, parameterization=parameterization))
    elif variant == "hist2d":
        smooths.append(SmoothTerm("hist2d", tensor_basis))
    elif variant == "hist_weekend":
        smooths.append(SmoothTerm("hist_wd", functional_basis, parameterization=parameterization))
        smooths.append(SmoothTerm("hist_we", functional_basis, parameterization=parameterization))
    return ModelSpec(variant, response, True, scalars, tuple(smooths))


def nonlinearity_specs(
    *,
    scalar_terms: Sequence[str] = ("sex", "weartime", "m_obese"),
    height: str | None = "height",
    response: str = "fat_mass",
    num_basis: int = 20,
    height_basis: BasisSpec = DEFAULT_HEIGHT_BASIS,
) -> tuple[ModelSpec, ModelSpec]:
    """Linear-in-mean-cpm model and the same model plus the penalised thin-plate part."""
    linear = variant_spec(
        "cpm_linear", scalar_terms=scalar_terms, height=height, response=response, height_basis=height_basis
    )
    wiggle = SmoothTerm("hist", BasisSpec("thinplate", num_basis), part="nonlinear")
    full = ModelSpec("cpm_nonlinear", response, True, linear.scalar_terms, linear.smooth_terms + (wiggle,))
    return linear, full


# ----------------------------------------------------------------------------
# design containers


@dataclass(frozen=True)
class Penalty:
    cols: slice
    S: np.ndarray
    label: str
    term: str


@dataclass
class TermBlock:
    label: str
    cols: slice
    build: Callable[[pd.DataFrame, Mapping[str, Mapping[str, HistogramSummary]]], np.ndarray] = field(repr=False)
    col_labels: list[str] = field(default_factory=list)
    penalized: bool = False
    null_dim: int = 0
    coef_map: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    eval_points: np.ndarray | None = field(default=None, repr=False)
    grid: BinGrid | None = field(default=None, repr=False)
    source: str | None = None
    by_level: str | None = None
    parameterization: str | None = None

    @property
    def width(self) -> int:
        return self.cols.stop - self.cols.start


@dataclass
class DesignBlocks:
    X: np.ndarray
    y: np.ndarray | None
    penalties: list[Penalty]
    terms: list[TermBlock] = field(default_factory=list)
    subject_ids: list[str] = field(default_factory=list)
    excluded: list[tuple[str, str]] = field(default_factory=list)
    spec: ModelSpec | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def block_index(self) -> dict[str, slice]:
        return {t.label: t.cols for t in self.terms}

    @property
    def col_labels(self) -> list[str]:
        out = []
        for t in self.terms:
            out.extend(t.col_labels)
        return out or [f"x{i}" for i in range(self.p)]

    @property
    def S_list(self) -> list[np.ndarray]:
        out = []
        for pen in self.penalties:
            S = np.zeros((self.p, self.p))
            S[pen.cols, pen.cols] = pen.S
            out.append(S)
        return out

    def term(self, label: str) -> TermBlock:
        for t in self.terms:
            if t.label == label:
                return t
        raise KeyError(label)

    def functional_terms(self) -> list[TermBlock]:
        return [t for t in self.terms if t.source in FUNCTIONAL_SOURCES]

    def predict_matrix(
        self, covariates: pd.DataFrame, summaries, ids: Sequence[str] | None = None
    ) -> np.ndarray:
        """Design rows for new subjects using the fitted bases and constraints."""
        summaries = normalize_summaries(summaries)
        frame = _frame(covariates)
        if ids is not None:
            frame = frame.loc[list(ids)]
        X = np.zeros((len(frame), self.p))
        for t in self.terms:
            X[:, t.cols] = t.build(frame, summaries)
        return X

    @classmethod
    def from_matrices(cls, X, y, penalties: Sequence[tuple[slice, np.ndarray]]) -> "DesignBlocks":
        """Wrap a raw design and block penalties (for tests and oracles)."""
        pens = [Penalty(c, np.asarray(S, dtype=float), f"S{k}", f"block{k}") for k, (c, S) in enumerate(penalties)]
        return cls(np.asarray(X, dtype=float), None if y is None else np.asarray(y, dtype=float), pens)


def normalize_summaries(summaries) -> dict[str, dict[str, HistogramSummary]]:
    """Accept ``{kind: {sid: h}}`` or a flat ``{sid: h}`` mapping."""
    if summaries is None:
        return {}
    values = list(summaries.values())
    if values and all(isinstance(v, HistogramSummary) for v in values):
        out: dict[str, dict[str, HistogramSummary]] = {}
        for sid, h in summaries.items():
            out.setdefault(h.kind, {})[sid] = h
        return out
    return {k: dict(v) for k, v in summaries.items()}


def _frame(covariates: pd.DataFrame) -> pd.DataFrame:
    if "subject_id" in covariates.columns:
        covariates = covariates.set_index("subject_id")
    covariates = covariates.copy()
    covariates.index = covariates.index.astype(str)
    return covariates


def _is_factor(s: pd.Series) -> bool:
    return isinstance(s.dtype, pd.CategoricalDtype) or s.dtype == object or s.dtype == bool or pd.api.types.is_string_dtype(s.dtype)


def _levels(s: pd.Series) -> list:
    if isinstance(s.dtype, pd.CategoricalDtype):
        return list(s.cat.categories)
    return sorted(s.dropna().unique().tolist(), key=str)


def _summary_matrix(summaries, kind, ids, side=None, drop=False) -> tuple[np.ndarray, BinGrid]:
    table = summaries.get(kind, {})
    rows = []
    grid = None
    for sid in ids:
        h = table[sid]
        if grid is None:
            grid = h.grid
        elif not h.grid.same_as(grid):
            raise DesignError(f"{sid}: histogram grid differs from the cohort grid")
        if drop and h.offset == 0:
            h = drop_first_bin(h)
        if kind == "split":
            rows.append(h.z[0 if side == "wd" else 1])
        elif kind == "twoD":
            rows.append((h.z * h.time_widths[None, :]).ravel())
        else:
            rows.append(h.z)
    return np.vstack(rows) if rows else np.zeros((0, 0)), grid


def _penalty_scale(block: np.ndarray, S: np.ndarray) -> float:
    # keeps lambda ~ 1 meaningful whatever the units of the block
    xx = np.abs(block).sum(axis=1).max() ** 2 if block.size else 1.0
    s1 = np.abs(S).sum(axis=0).max()
    return xx / s1 if s1 > 0 and xx > 0 else 1.0


# ----------------------------------------------------------------------------
# assembly


def _complete_cases(spec: ModelSpec, frame: pd.DataFrame, summaries) -> tuple[list[str], list[tuple[str, str]]]:
    needed_cols = set()
    for s in spec.scalar_terms:
        if s != "cpm":
            needed_cols.add(s)
    for t in spec.smooth_terms:
        if not t.is_functional:
            needed_cols.add(t.source)
        if t.by:
            needed_cols.add(t.by)
    kinds = {FUNCTIONAL_SOURCES[t.source] for t in spec.smooth_terms if t.is_functional}
    if "cpm" in spec.scalar_terms:
        kinds.add("oneD")
    missing_cols = [c for c in sorted(needed_cols | {spec.response}) if c not in frame.columns]
    if missing_cols:
        raise DesignError(f"covariate table lacks columns {missing_cols}")
    kept, excluded = [], []
    for sid, row in frame.iterrows():
        reason = None
        for c in sorted(needed_cols):
            if pd.isna(row[c]):
                reason = f"missing {c}"
                break
        if reason is None:
            yv = row[spec.response]
            if pd.isna(yv):
                reason = f"missing {spec.response}"
            elif spec.log_response and not yv > 0:
                reason = f"non-positive {spec.response}"
        if reason is None:
            for k in sorted(kinds):
                if sid not in summaries.get(k, {}):
                    reason = f"no {k} summary"
                    break
        if reason is None:
            kept.append(sid)
        else:
            excluded.append((sid, reason))
    return kept, excluded


def assemble(spec: ModelSpec, covariates: pd.DataFrame, summaries) -> DesignBlocks:
    """Build the full design and block penalties for ``spec``.

    Subjects lacking any required covariate, response or summary are dropped
    (listwise deletion); the exclusions are logged and kept on the result.
    """
    summaries = normalize_summaries(summaries)
    frame = _frame(covariates)
    ids, excluded = _complete_cases(spec, frame, summaries)
    if excluded:
        logger.info("%s: %d subjects excluded (%s)", spec.variant, len(excluded),
                    ", ".join(f"{s}: {r}" for s, r in excluded[:5]))
    if not ids:
        raise DesignError("no complete cases")
    frame = frame.loc[ids]
    yraw = frame[spec.response].to_numpy(dtype=float)
    y = np.log(yraw) if spec.log_response else yraw

    blocks: list[np.ndarray] = []
    terms: list[TermBlock] = []
    penalties: list[Penalty] = []
    pos = 0

    def add(label, X_b, build, col_labels, pens=(), **kw):
        nonlocal pos
        cols = slice(pos, pos + X_b.shape[1])
        pos += X_b.shape[1]
        blocks.append(X_b)
        terms.append(TermBlock(label, cols, build, col_labels, penalized=bool(pens), **kw))
        for plabel, S in pens:
            penalties.append(Penalty(cols, S, plabel, label))

    add("(Intercept)", np.ones((len(ids), 1)), lambda f, s: np.ones((len(f), 1)), ["(Intercept)"])

    for name in spec.scalar_terms:
        if name == "cpm":
            def build_cpm(f, s):
                return np.array([[mean_cpm(s["oneD"][sid])] for sid in f.index])
            add("cpm", build_cpm(frame, summaries), build_cpm, ["cpm"])
        elif _is_factor(frame[name]):
            levels = _levels(frame[name])
            used = set(frame[name].unique())
            empty = [lv for lv in levels if lv not in used]
            if empty:
                raise DesignError(f"factor {name!r} has empty levels {empty}")

            def build_factor(f, s, name=name, levels=levels):
                vals = f[name].to_numpy()
                unknown = set(vals) - set(levels)
                if unknown:
                    raise DesignError(f"factor {name!r}: unseen levels {sorted(map(str, unknown))}")
                return np.column_stack([(vals == lv).astype(float) for lv in levels[1:]]) if len(levels) > 1 else np.zeros((len(f), 0))

            add(name, build_factor(frame, summaries), build_factor, [f"{name}[{lv}]" for lv in levels[1:]])
        else:
            def build_num(f, s, name=name):
                return f[[name]].to_numpy(dtype=float)
            add(name, build_num(frame, summaries), build_num, [name])

    for term in spec.smooth_terms:
        for item in _smooth_blocks(term, frame, summaries):
            add(**item)

    X = np.hstack(blocks)
    return DesignBlocks(X, y, penalties, terms, list(ids), excluded, spec)


def _smooth_blocks(term: SmoothTerm, frame: pd.DataFrame, summaries) -> list[dict]:
    """Column blocks (one per ``by`` level) for a smooth term."""
    ids = list(frame.index)
    if term.source == "hist2d":
        raw, realization, Zc, grid, points, cmap, full_block = _tensor_setup(term, summaries, ids)
    elif term.is_functional:
        raw, realization, Zc, grid, points, cmap, full_block = _functional_setup(term, summaries, ids)
    else:
        raw, realization, Zc, grid, points, cmap, full_block = _covariate_setup(term, frame)

    S_raw = [_select(S, term, realization) for S in realization.S_list]
    if full_block is None:
        full_block = raw(frame, summaries)
    scales = [_penalty_scale(full_block, S) for S in S_raw]
    S_con = [sc * (Zc.T @ S @ Zc) for sc, S in zip(scales, S_raw)]
    S_con = [0.5 * (S + S.T) for S in S_con]
    null_dim = penalty_null_dim(S_con, Zc.shape[1]) if S_con else Zc.shape[1]
    if term.part == "linear":
        S_con = []

    def build_all(f, s):
        return raw(f, s) @ Zc

    if term.by is None:
        levels = [None]
    else:
        levels = _levels(frame[term.by])
    out = []
    for lv in levels:
        label = term.name if lv is None else f"{term.name}:{lv}"

        def build(f, s, lv=lv):
            Xb = build_all(f, s)
            if lv is not None:
                Xb = Xb * (f[term.by].to_numpy() == lv)[:, None]
            return Xb

        Xb = build(frame, summaries)
        if lv is not None and not np.any(Xb):
            raise DesignError(f"{label}: no rows in level {lv!r}")
        pens = [(f"{label}#{k}" if len(S_con) > 1 else label, S) for k, S in enumerate(S_con)]
        out.append(
            dict(
                label=label,
                X_b=Xb,
                build=build,
                col_labels=[f"{label}.{k + 1}" for k in range(Xb.shape[1])],
                pens=pens,
                null_dim=null_dim,
                coef_map=(lambda pts, cmap=cmap: cmap(pts) @ Zc),
                eval_points=points,
                grid=grid,
                source=term.source,
                by_level=lv,
                parameterization=term.parameterization,
            )
        )
    return out


def _select(S: np.ndarray, term: SmoothTerm, r: BasisRealization) -> np.ndarray:
    cols = _part_columns(term, r)
    return S[np.ix_(cols, cols)]


def _part_columns(term: SmoothTerm, r: BasisRealization) -> np.ndarray:
    if term.part == "full":
        return np.arange(r.num_basis)
    affine, penalized = r.linear_split
    return affine if term.part == "linear" else penalized


def _constraint(C: np.ndarray) -> np.ndarray:
    C = np.atleast_2d(C)
    if np.linalg.norm(C) <= 1e-12 * max(1.0, np.abs(C).max()) or np.allclose(C, 0.0, atol=1e-10):
        return np.eye(C.shape[1])
    return constraint_null_space(C)


def _functional_setup(term: SmoothTerm, summaries, ids):
    kind = FUNCTIONAL_SOURCES[term.source]
    side = {"hist_wd": "wd", "hist_we": "we"}.get(term.source)
    _, grid = _summary_matrix(summaries, kind, ids[:1], side)
    mids = grid.midpoints
    spec = term.basis
    if spec.kind == "thinplate":
        from .basis import thinplate_basis

        r = thinplate_basis(mids, spec.num_basis, spec.domain)
    else:
        r = make_basis(spec, mids)
    cols = _part_columns(term, r)
    B_full = r.B[:, cols]
    drop = term.parameterization == "drop_first_bin"
    Zc = _constraint(B_full[0] if drop else B_full.sum(axis=0))
    # the dropped form multiplies the remaining bins by the remaining basis rows
    B_use = B_full[1:] if drop else B_full

    def raw(f, s):
        Zm, g = _summary_matrix(s, kind, list(f.index), side, drop=drop)
        if g is not None and not g.same_as(grid):
            raise DesignError("histogram grid differs from the grid used at fit time")
        return Zm @ B_use

    def cmap(pts):
        return r.evaluate(pts)[:, cols]

    points = mids[1:] if drop else mids
    # penalty scale from the unconstrained full-grid block, so both
    # parameterisations share the same lambda units
    full_block = _summary_matrix(summaries, kind, ids, side)[0] @ B_full
    return raw, r, Zc, grid, points, cmap, full_block


def _tensor_setup(term: SmoothTerm, summaries, ids):
    h0 = summaries["twoD"][ids[0]]
    grid = h0.grid
    widths = h0.time_widths
    hour_mid = np.cumsum(widths) - 0.5 * widths
    Kt, Kp = term.basis.num_basis
    mt = cubic_rs_basis(hour_mid, Kt)
    mp = cubic_rs_basis(grid.midpoints, Kp)
    r = tensor_product(mt, mp)
    # rows ordered bin-major, hour-minor to match z.ravel()
    P, T = np.meshgrid(grid.midpoints, hour_mid, indexing="ij")
    pts = np.column_stack([T.ravel(), P.ravel()])
    B_grid = r.evaluate(pts)
    Zc = _constraint(B_grid.sum(axis=0))

    def raw(f, s):
        W, g = _summary_matrix(s, "twoD", list(f.index))
        if g is not None and not g.same_as(grid):
            raise DesignError("histogram grid differs from the grid used at fit time")
        return W @ B_grid

    return raw, r, Zc, grid, pts, r.evaluate, None


def _covariate_setup(term: SmoothTerm, frame: pd.DataFrame):
    x = frame[term.source].to_numpy(dtype=float)
    spec = term.basis
    if spec.kind == "thinplate":
        from .basis import thinplate_basis

        # new subjects may fall outside the training range of a covariate
        r = thinplate_basis(x, spec.num_basis, spec.domain, extrapolate=True)
    else:
        r = make_basis(spec, x)
    cols = _part_columns(term, r)
    B = r.B[:, cols]
    Zc = _constraint(B.sum(axis=0))

    def raw(f, s):
        return r.evaluate(f[term.source].to_numpy(dtype=float))[:, cols]

    def cmap(pts):
        return r.evaluate(pts)[:, cols]

    points = np.linspace(*r.domain, 50) if r.domain else np.unique(x)
    return raw, r, Zc, None, points, cmap, None
