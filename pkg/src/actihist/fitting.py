"""Penalised least squares with REML smoothing-parameter selection.

For a Gaussian response with identity link the penalised IRLS inner loop is a
single penalised least-squares solve, done here by a pivoted QR of the
augmented system ``[R_X; E]`` where ``R_X`` comes from a QR of the design and
``E^T E`` is the weighted penalty.  The outer loop minimises the restricted
likelihood with ``sigma^2`` profiled out:

    V(rho) = (n - M0)/2 * (1 + log(2 pi D_p / (n - M0)))
             + 1/2 log|X^T X + S| - 1/2 log|S|_+

where ``D_p`` is the penalised residual sum of squares and ``M0`` the
dimension of the total penalty null space.  Smoothing parameters are handled
on the log10 scale throughout.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .design import DesignBlocks

logger = logging.getLogger(__name__)

LN10 = np.log(10.0)
LOG_LAMBDA_BOUNDS = (-12.0, 12.0)
DEFAULT_STARTS = (-2.0, 0.0, 2.0)
GRAD_TOL = 1e-3


class FitError(RuntimeError):
    pass


class RankDeficientError(FitError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design is rank deficient beyond the penalty null space; confounded columns: {self.columns}")


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    log_lambda: np.ndarray
    sigma2_hat: float
    V_beta: np.ndarray = field(repr=False)
    edf_total: float
    edf_terms: dict
    criteria: dict
    converged: bool
    diagnostics: dict = field(default_factory=dict, repr=False)
    design: DesignBlocks | None = field(default=None, repr=False, compare=False)

    @property
    def lam(self) -> np.ndarray:
        return 10.0**self.log_lambda

    @property
    def fitted(self) -> np.ndarray:
        return self.design.X @ self.beta_hat

    def linear_predictor(self, covariates, summaries, ids=None) -> np.ndarray:
        return self.design.predict_matrix(covariates, summaries, ids) @ self.beta_hat

    def term_function(self, label: str, points=None, beta: np.ndarray | None = None) -> np.ndarray:
        """Evaluate a smooth term's function (e.g. ``f(p)``) at ``points``."""
        t = self.design.term(label)
        if t.coef_map is None:
            raise ValueError(f"{label} is not a smooth term")
        pts = t.eval_points if points is None else np.asarray(points, dtype=float)
        b = self.beta_hat if beta is None else beta
        return t.coef_map(pts) @ (b[..., t.cols].T if b.ndim > 1 else b[t.cols])

    def term_se(self, label: str, points=None) -> np.ndarray:
        t = self.design.term(label)
        pts = t.eval_points if points is None else np.asarray(points, dtype=float)
        L = t.coef_map(pts)
        V = self.V_beta[t.cols, t.cols]
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", L, V, L), 0.0))


# ----------------------------------------------------------------------------
# core solver


def _penalty_root(S: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """``R`` with ``R^T R = S`` for a symmetric non-negative definite ``S``."""
    ev, V = np.linalg.eigh(0.5 * (S + S.T))
    keep = ev > rel_tol * max(ev.max(), 0.0)
    return np.sqrt(ev[keep])[:, None] * V[:, keep].T


def _graded_qr(A: np.ndarray):
    """Pivoted QR with rows in decreasing norm order.

    Stacked penalty roots can differ in scale by many orders of magnitude;
    ordering rows this way keeps Householder QR accurate for such graded
    matrices.
    """
    order = np.argsort(-np.linalg.norm(A, axis=1), kind="stable")
    Q, R, piv = linalg.qr(A[order], mode="economic", pivoting=True)
    return Q, R, piv, order


class _PenaltyGroups:
    """Penalties grouped by the column block they act on.

    Each group's range space is fixed for positive smoothing parameters, so
    ``log|S|_+`` is a sum of ``log det(U^T S_g U)`` over groups.  Both the
    determinant and the square root of ``S_lam`` are built from per-penalty
    roots, never from an eigendecomposition of the weighted sum.
    """

    def __init__(self, D: DesignBlocks):
        self.p = D.p
        self.penalties = D.penalties
        self.roots = []
        for pen in D.penalties:
            Rk = _penalty_root(pen.S)
            full = np.zeros((Rk.shape[0], self.p))
            full[:, pen.cols] = Rk
            self.roots.append(full)
        keyed: dict[tuple[int, int], list[int]] = {}
        for k, pen in enumerate(D.penalties):
            keyed.setdefault((pen.cols.start, pen.cols.stop), []).append(k)
        self.groups = []
        rank_total = 0
        for (a, b), idx in keyed.items():
            total = sum(D.penalties[k].S / max(np.abs(D.penalties[k].S).max(), 1e-300) for k in idx)
            ev, U = np.linalg.eigh(0.5 * (total + total.T))
            keep = ev > 1e-10 * max(ev.max(), 0.0)
            U = U[:, keep]
            rank_total += U.shape[1]
            RU = [_penalty_root(D.penalties[k].S) @ U for k in idx]
            SU = [r.T @ r for r in RU]
            self.groups.append((slice(a, b), idx, U, RU, SU))
        self.M0 = self.p - rank_total

    def root(self, lam: np.ndarray) -> np.ndarray:
        """``E`` with ``E^T E = sum_k lam_k S_k``."""
        rows = [np.sqrt(lam[k]) * R for k, R in enumerate(self.roots)]
        return np.vstack(rows) if rows else np.zeros((0, self.p))

    def logdet_and_grad(self, lam: np.ndarray) -> tuple[float, np.ndarray]:
        """``log|S_lam|_+`` and its derivatives w.r.t. ``log(lam_k)``."""
        total = 0.0
        grad = np.zeros(lam.size)
        for _, idx, U, RU, SU in self.groups:
            r = U.shape[1]
            if r == 0:
                continue
            E = np.vstack([np.sqrt(lam[k]) * R for k, R in zip(idx, RU)])
            _, R, piv, _ = _graded_qr(E)
            d = np.abs(np.diag(R))
            d = np.maximum(d, np.finfo(float).tiny)
            total += float(2.0 * np.sum(np.log(d)))
            Rinv = linalg.solve_triangular(R, np.eye(r))
            inv = np.empty((r, r))
            inv[np.ix_(piv, piv)] = Rinv @ Rinv.T
            for k, s in zip(idx, SU):
                grad[k] = lam[k] * np.sum(inv * s)
        return total, grad


class _Solver:
    def __init__(self, D: DesignBlocks, y: np.ndarray):
        self.D = D
        self.y = np.asarray(y, dtype=float)
        self.n, self.p = D.X.shape
        if self.n <= self.p:
            logger.debug("n=%d <= p=%d; relying on penalties for identifiability", self.n, self.p)
        Q, R = np.linalg.qr(D.X, mode="reduced")
        self.R_X = R
        self.qty = Q.T @ self.y
        self.rss_perp = float(np.sum((self.y - Q @ self.qty) ** 2))
        self.XtX = R.T @ R
        self.groups = _PenaltyGroups(D)
        self.labels = D.col_labels

    def solve(self, lam: np.ndarray) -> dict:
        lam = np.asarray(lam, dtype=float)
        E = self.groups.root(lam)
        M = np.vstack([self.R_X, E])
        f = np.concatenate([self.qty, np.zeros(E.shape[0])])
        Q2, R2, piv, order = _graded_qr(M)
        f = f[order]
        d = np.abs(np.diag(R2))
        # graded rows make a single global tolerance meaningless; compare each pivot to its column
        colnorm = np.linalg.norm(M, axis=0)[piv]
        bad = np.flatnonzero(d <= max(M.shape) * np.finfo(float).eps * 10 * colnorm)
        if bad.size:
            raise RankDeficientError([self.labels[piv[i]] for i in bad])
        z = Q2.T @ f
        # residual of the augmented system; lam * b'Sb amplifies rounding in b when lam is huge
        r_aug = np.empty_like(f)
        r_aug[order] = f - Q2 @ z
        dp = self.rss_perp + float(np.sum(r_aug**2))
        beta = np.empty(self.p)
        beta[piv] = linalg.solve_triangular(R2, z)
        Rinv = linalg.solve_triangular(R2, np.eye(self.p))
        Hinv = np.empty((self.p, self.p))
        Hinv[np.ix_(piv, piv)] = Rinv @ Rinv.T
        resid = self.y - self.D.X @ beta
        rss = float(resid @ resid)
        # lam_k b'S_k b read off the penalty rows of the augmented residual
        bounds = np.cumsum([self.R_X.shape[0]] + [R.shape[0] for R in self.groups.roots])
        lam_pens = np.array([np.sum(r_aug[a:b] ** 2) for a, b in zip(bounds[:-1], bounds[1:])])
        pens = np.array([beta[pen.cols] @ pen.S @ beta[pen.cols] for pen in self.D.penalties])
        pen = float(lam @ pens) if pens.size else 0.0
        return dict(
            beta=beta,
            Hinv=0.5 * (Hinv + Hinv.T),
            logdet_H=float(2.0 * np.sum(np.log(d))),
            rss=rss,
            pen=pen,
            pens=pens,
            lam=lam,
            dp=dp,
            lam_pens=lam_pens,
        )

    def reml(self, log_lambda: np.ndarray, with_grad: bool = False):
        log_lambda = np.atleast_1d(np.asarray(log_lambda, dtype=float))
        lam = 10.0**log_lambda
        s = self.solve(lam)
        nm = self.n - self.groups.M0
        Dp = s["dp"]
        if not Dp > 0:
            raise FitError(f"non-positive penalised RSS at log10(lambda)={log_lambda.tolist()}")
        logdet_S, dlogdet_S = self.groups.logdet_and_grad(lam)
        score = 0.5 * nm * (1.0 + np.log(2.0 * np.pi * Dp / nm)) + 0.5 * s["logdet_H"] - 0.5 * logdet_S
        if not np.isfinite(score):
            raise FitError(f"non-finite REML score at log10(lambda)={log_lambda.tolist()}")
        if not with_grad:
            return float(score)
        trHS = np.array(
            [np.sum(s["Hinv"][pen.cols, pen.cols] * pen.S) for pen in self.D.penalties]
        )
        phi = Dp / nm
        grad_ln = s["lam_pens"] / (2.0 * phi) + 0.5 * lam * trHS - 0.5 * dlogdet_S
        return float(score), grad_ln * LN10

    def result(self, log_lambda: np.ndarray, converged: bool = True, diagnostics=None) -> FitResult:
        log_lambda = np.atleast_1d(np.asarray(log_lambda, dtype=float))
        lam = 10.0**log_lambda
        fit = _result_from_lambda(self, lam, log_lambda, self.solve(lam))
        object.__setattr__(fit, "converged", converged)
        object.__setattr__(fit, "diagnostics", dict(diagnostics or {}))
        return fit


def _reml_unpenalized(solver: _Solver, s: dict) -> float:
    nm = solver.n - solver.groups.M0
    return float(0.5 * nm * (1.0 + np.log(2.0 * np.pi * s["rss"] / nm)) + 0.5 * s["logdet_H"])


def _as_log10(D: DesignBlocks, lam) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.size == 1 and len(D.penalties) > 1:
        lam = np.full(len(D.penalties), lam[0])
    if lam.size != len(D.penalties):
        raise ValueError(f"{lam.size} smoothing parameters for {len(D.penalties)} penalties")
    return lam


def penalized_fit(D: DesignBlocks, y=None, lam=0.0) -> FitResult:
    """Fit at fixed smoothing parameters ``lam`` (natural scale; zero allowed)."""
    y = D.y if y is None else y
    lam = _as_log10(D, lam) if D.penalties else np.zeros(0)
    solver = _Solver(D, y)
    with np.errstate(divide="ignore"):
        log_lambda = np.log10(lam)
    s = solver.solve(lam)
    # result() re-solves from log10; keep exact zeros by bypassing it
    return _result_from_lambda(solver, lam, log_lambda, s)


def _result_from_lambda(solver: _Solver, lam, log_lambda, s) -> FitResult:
    F = s["Hinv"] @ solver.XtX
    edf_diag = np.diag(F)
    edf = float(edf_diag.sum())
    n = solver.n
    rss = s["rss"]
    resid_df = n - edf
    sigma2 = rss / resid_df if resid_df > 0 else np.nan
    loglik = -0.5 * n * (np.log(2.0 * np.pi * rss / n) + 1.0)
    tss = float(np.sum((solver.y - solver.y.mean()) ** 2))
    reml = np.nan
    if np.all(lam > 0) and lam.size:
        reml = solver.reml(log_lambda)
    elif not lam.size:
        reml = _reml_unpenalized(solver, s)
    criteria = {
        "n": n,
        "RSS": rss,
        "TSS": tss,
        "edf": edf,
        "logLik": loglik,
        "AIC": -2.0 * loglik + 2.0 * (edf + 1.0),
        "BIC": -2.0 * loglik + np.log(n) * (edf + 1.0),
        "adj_R2": 1.0 - (rss / resid_df) / (tss / (n - 1)) if resid_df > 0 else np.nan,
        "REML": reml,
    }
    return FitResult(
        beta_hat=s["beta"],
        log_lambda=log_lambda,
        sigma2_hat=float(sigma2),
        V_beta=s["Hinv"] * sigma2,
        edf_total=edf,
        edf_terms={t.label: float(edf_diag[t.cols].sum()) for t in solver.D.terms},
        criteria=criteria,
        converged=True,
        design=solver.D,
    )


def reml_score(D: DesignBlocks, y=None, log_lambda=None) -> float:
    """Negative restricted log-likelihood at ``log10(lambda) = log_lambda``."""
    y = D.y if y is None else y
    return _Solver(D, y).reml(np.atleast_1d(log_lambda))


def reml_gradient(D: DesignBlocks, y=None, log_lambda=None) -> np.ndarray:
    """Gradient of :func:`reml_score` with respect to ``log10(lambda)``."""
    y = D.y if y is None else y
    return _Solver(D, y).reml(np.atleast_1d(log_lambda), with_grad=True)[1]


def fit_reml(D: DesignBlocks, y=None, init_log_lambda=None, starts: Sequence[float] = DEFAULT_STARTS) -> FitResult:
    """Select smoothing parameters by REML and fit.

    Without ``init_log_lambda`` the optimiser (L-BFGS-B on log10 lambda, box
    [-12, 12]) is started with every parameter at each value in ``starts``.
    The lowest score wins; ties go to the start with the smallest
    ``|log10 lambda|``.
    """
    y = D.y if y is None else y
    solver = _Solver(D, y)
    m = len(D.penalties)
    if m == 0:
        s = solver.solve(np.zeros(0))
        return _result_from_lambda(solver, np.zeros(0), np.zeros(0), s)
    inits = [np.atleast_1d(np.asarray(init_log_lambda, dtype=float))] if init_log_lambda is not None else [
        np.full(m, v) for v in starts
    ]
    trace = []
    best = None

    def fun(x):
        return solver.reml(x, with_grad=True)

    for x0 in inits:
        try:
            res = optimize.minimize(
                fun,
                x0,
                jac=True,
                method="L-BFGS-B",
                bounds=[LOG_LAMBDA_BOUNDS] * m,
                options={"maxiter": 500, "ftol": 1e-13, "gtol": 1e-7},
            )
        except (FitError, linalg.LinAlgError, ValueError) as exc:
            trace.append({"start": x0.tolist(), "error": str(exc)})
            continue
        trace.append({"start": x0.tolist(), "x": res.x.tolist(), "score": float(res.fun),
                      "success": bool(res.success), "message": str(res.message), "nit": int(res.nit)})
        key = (float(res.fun), float(np.linalg.norm(res.x)))
        if best is None or key[0] < best[0][0] - 1e-9 * max(1.0, abs(key[0])) or (
            abs(key[0] - best[0][0]) <= 1e-9 * max(1.0, abs(key[0])) and key[1] < best[0][1]
        ):
            best = (key, res)
    if best is None:
        raise FitError(f"all REML starts failed: {trace}")
    res = best[1]
    # line-search failures on a flat score are common; accept a small projected gradient
    pg = _projected_gradient(res.x, res.jac, LOG_LAMBDA_BOUNDS)
    converged = bool(res.success) or float(np.max(np.abs(pg))) < GRAD_TOL
    if not converged:
        logger.warning("REML optimiser did not converge: %s", res.message)
    return solver.result(res.x, converged=converged, diagnostics={"starts": trace})


def _projected_gradient(x, g, bounds) -> np.ndarray:
    g = np.asarray(g, dtype=float).copy()
    lo, hi = bounds
    g[(x <= lo + 1e-10) & (g > 0)] = 0.0
    g[(x >= hi - 1e-10) & (g < 0)] = 0.0
    return g


# ----------------------------------------------------------------------------
# export


def fit_to_dict(fit: FitResult, include_covariance: bool = False) -> dict:
    D = fit.design
    out = {
        "variant": D.spec.variant if D is not None and D.spec is not None else None,
        "n": int(fit.criteria["n"]),
        "coefficients": dict(zip(D.col_labels, map(float, fit.beta_hat))) if D is not None else fit.beta_hat.tolist(),
        "log10_lambda": dict(zip([p.label for p in D.penalties], map(float, fit.log_lambda))) if D is not None else fit.log_lambda.tolist(),
        "edf_terms": fit.edf_terms,
        "edf_total": fit.edf_total,
        "sigma2": fit.sigma2_hat,
        "criteria": {k: float(v) for k, v in fit.criteria.items()},
        "converged": fit.converged,
        "excluded": [list(e) for e in D.excluded] if D is not None else [],
    }
    if include_covariance:
        out["V_beta"] = fit.V_beta.tolist()
    return out


def write_fit_json(fit: FitResult, path: str | Path, include_covariance: bool = False) -> None:
    Path(path).write_text(json.dumps(fit_to_dict(fit, include_covariance), indent=2, sort_keys=True) + "\n")


def write_coef_function(fit: FitResult, label: str, path: str | Path) -> None:
    t = fit.design.term(label)
    pts = t.eval_points
    f = fit.term_function(label)
    se = fit.term_se(label)
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    else:
        # tensor eval points are (hour, p_j); write p_j first
        pts = pts[:, ::-1]
    head = ["p_j", "hour_m"][: pts.shape[1]]
    lines = [",".join(head + ["f_hat", "se"])]
    for row, a, b in zip(pts, f, se):
        lines.append(",".join([repr(float(v)) for v in row] + [repr(float(a)), repr(float(b))]))
    Path(path).write_text("\n".join(lines) + "\n")
