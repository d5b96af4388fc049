"""Spline bases and their penalty matrices.

Every constructor returns a :class:`BasisRealization` whose ``evaluate``
re-computes the basis at new points, so terms can build prediction matrices
identical to the ones they were fitted with.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class BasisSpec:
    """Declarative basis choice.

    ``num_basis`` is a pair ``(K_t, K_p)`` for tensor products.  ``domain`` is
    optional; by default the range of the evaluation points is used.
    """

    kind: str = "pspline"
    num_basis: int | tuple[int, int] = 20
    penalty_order: int = 2
    adaptive_dim: int = 0
    degree: int = 3
    domain: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("pspline", "thinplate", "cubic_rs", "tensor"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        ks = self.num_basis if self.kind == "tensor" else (self.num_basis,)
        if self.kind == "tensor" and (np.ndim(ks) != 1 or len(ks) != 2):
            raise ValueError("tensor bases need num_basis=(K_t, K_p)")
        for K in ks:
            if K < self.penalty_order + 1:
                raise ValueError(f"num_basis {K} < penalty_order + 1")
            if self.adaptive_dim >= K:
                raise ValueError("adaptive_dim must be < num_basis")


@dataclass(frozen=True)
class BasisRealization:
    B: np.ndarray
    S_list: list[np.ndarray]
    null_dim: int
    evaluate: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    linear_split: tuple[np.ndarray, np.ndarray] | None = None
    domain: tuple[float, float] | None = None
    kind: str = ""

    @property
    def num_basis(self) -> int:
        return self.B.shape[1]


def penalty_null_dim(S_list: Sequence[np.ndarray], K: int) -> int:
    if not S_list:
        return K
    total = sum(S / max(np.abs(S).max(), 1e-300) for S in S_list)
    ev = np.linalg.eigvalsh(0.5 * (total + total.T))
    return int(K - np.count_nonzero(ev > 1e-10 * max(ev.max(), 0.0)))


def _resolve_domain(points: np.ndarray, domain) -> tuple[float, float]:
    if domain is None:
        return float(points.min()), float(points.max())
    a, b = float(domain[0]), float(domain[1])
    if not b > a:
        raise ValueError(f"empty domain {domain}")
    return a, b


def _check_inside(points: np.ndarray, a: float, b: float):
    tol = 1e-10 * max(1.0, abs(a), abs(b))
    if points.size and (points.min() < a - tol or points.max() > b + tol):
        raise ValueError(f"points outside basis domain [{a}, {b}]")


# ----------------------------------------------------------------------------
# B-splines and difference penalties


def bspline_knots(K: int, degree: int, a: float, b: float) -> np.ndarray:
    n_int = K - degree
    h = (b - a) / n_int
    inner = np.linspace(a, b, n_int + 1)  # exact end knots
    return np.concatenate([a - h * np.arange(degree, 0, -1), inner, b + h * np.arange(1, degree + 1)])


def bspline_matrix(points, K: int, degree: int = 3, domain=None) -> np.ndarray:
    """Evaluate ``K`` B-splines on equally spaced knots covering ``domain``.

    Rows form a partition of unity.  Degree 0 with ``K`` equal to the number of
    bins gives the histogram indicator basis.
    """
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if K < degree + 1:
        raise ValueError(f"K={K} needs to be at least degree + 1 = {degree + 1}")
    a, b = _resolve_domain(x, domain)
    _check_inside(x, a, b)
    x = np.clip(x, a, b)
    t = bspline_knots(K, degree, a, b)
    if degree == 0:
        # right endpoint belongs to the last interval
        idx = np.minimum(np.searchsorted(t, x, side="right") - 1, K - 1)
        out = np.zeros((x.size, K))
        out[np.arange(x.size), idx] = 1.0
        return out
    return BSpline.design_matrix(x, t, degree, extrapolate=False).toarray()


def difference_matrix(K: int, d: int) -> np.ndarray:
    if not K > d:
        raise ValueError(f"K={K} must exceed difference order {d}")
    return np.diff(np.eye(K), n=d, axis=0)


def difference_penalty(K: int, d: int = 2) -> np.ndarray:
    D = difference_matrix(K, d)
    return D.T @ D


def adaptive_weight_basis(K: int, d: int, A: int) -> np.ndarray:
    """``(K - d) x A`` B-spline basis (degree <= 2) over the difference index."""
    n = K - d
    if A < 1 or A > n:
        raise ValueError(f"adaptive_dim {A} must be in [1, {n}]")
    if A == 1:
        return np.ones((n, 1))
    return bspline_matrix(np.arange(n, dtype=float), A, degree=min(2, A - 1), domain=(0.0, n - 1.0))


def adaptive_penalties(K: int, d: int, A: int) -> list[np.ndarray]:
    """Penalties ``D^T diag(C[:, a]) D`` whose weighted sum varies smoothly along the basis."""
    D = difference_matrix(K, d)
    C = adaptive_weight_basis(K, d, A)
    return [D.T @ (C[:, a, None] * D) for a in range(A)]


def pspline_basis(
    points, K: int = 20, d: int = 2, adaptive_dim: int = 0, degree: int = 3, domain=None
) -> BasisRealization:
    x = np.asarray(points, dtype=float)
    dom = _resolve_domain(x, domain)
    S_list = adaptive_penalties(K, d, adaptive_dim) if adaptive_dim else [difference_penalty(K, d)]

    def evaluate(p):
        return bspline_matrix(p, K, degree, dom)

    return BasisRealization(evaluate(x), S_list, d, evaluate, domain=dom, kind="pspline")


# ----------------------------------------------------------------------------
# thin-plate regression spline in one dimension


def _quantile_knots(x: np.ndarray, K: int) -> np.ndarray:
    ux = np.unique(x)
    if ux.size < K:
        raise ValueError(f"need at least {K} distinct points, got {ux.size}")
    return np.quantile(ux, np.linspace(0.0, 1.0, K))


def _tps_eta(r: np.ndarray) -> np.ndarray:
    # 1-D, second-order thin-plate radial function
    return np.abs(r) ** 3 / 12.0


def thinplate_basis(points, K: int = 10, domain=None, extrapolate: bool = False) -> BasisRealization:
    """Low-rank 1-D thin-plate spline: ``{1, x}`` plus ``K - 2`` penalised radial columns.

    Radial functions sit at ``K`` quantile knots and are constrained to be
    orthogonal to the affine functions at the knots, leaving ``K - 2`` free
    columns.  These are then orthogonalised against ``{1, x}`` at ``points``.
    Columns 0 and 1 are the affine part (``linear_split[0]``).  With
    ``extrapolate`` the basis may be evaluated outside ``domain``, where the
    fitted function continues linearly.
    """
    x = np.asarray(points, dtype=float)
    a, b = _resolve_domain(x, domain)
    knots = _quantile_knots(x, K)
    scale = b - a
    ks = (knots - a) / scale
    T = np.column_stack([np.ones(K), ks])
    Q, _ = np.linalg.qr(T, mode="complete")
    Zt = Q[:, 2:]
    E = _tps_eta(ks[:, None] - ks[None, :])
    S_pen = Zt.T @ E @ Zt
    S_pen = 0.5 * (S_pen + S_pen.T)

    def raw(p):
        p = np.atleast_1d(np.asarray(p, dtype=float))
        if not extrapolate:
            _check_inside(p, a, b)
        s = (p - a) / scale
        A = np.column_stack([np.ones(p.size), s])
        return A, _tps_eta(s[:, None] - ks[None, :]) @ Zt

    A0, P0 = raw(x)
    proj = np.linalg.lstsq(A0, P0, rcond=None)[0]

    def evaluate(p):
        A, P = raw(p)
        return np.hstack([A, P - A @ proj])

    S = np.zeros((K, K))
    S[2:, 2:] = S_pen
    split = (np.arange(2), np.arange(2, K))
    return BasisRealization(evaluate(x), [S], 2, evaluate, linear_split=split, domain=(a, b), kind="thinplate")


# ----------------------------------------------------------------------------
# cubic regression spline (value-at-knot parameterisation)


def _crs_matrices(knots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``F`` (second derivatives at knots from values) and penalty ``S``."""
    K = knots.size
    h = np.diff(knots)
    D = np.zeros((K - 2, K))
    Bm = np.zeros((K - 2, K - 2))
    for i in range(K - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        Bm[i, i] = (h[i] + h[i + 1]) / 3.0
        if i < K - 3:
            Bm[i, i + 1] = Bm[i + 1, i] = h[i + 1] / 6.0
    BinvD = linalg.solve(Bm, D, assume_a="pos")
    F = np.zeros((K, K))
    F[1:-1] = BinvD
    S = D.T @ BinvD
    return F, 0.5 * (S + S.T)


def cubic_rs_basis(points, K: int = 10, knots=None) -> BasisRealization:
    """Natural cubic spline parameterised by its values at ``K`` quantile knots.

    The penalty is the exact integrated squared second derivative.
    """
    x = np.asarray(points, dtype=float)
    knots = _quantile_knots(x, K) if knots is None else np.asarray(knots, dtype=float)
    K = knots.size
    F, S = _crs_matrices(knots)
    lo, hi = float(knots[0]), float(knots[-1])

    def evaluate(p):
        p = np.atleast_1d(np.asarray(p, dtype=float))
        _check_inside(p, lo, hi)
        p = np.clip(p, lo, hi)
        j = np.clip(np.searchsorted(knots, p, side="right") - 1, 0, K - 2)
        h = knots[j + 1] - knots[j]
        dm = knots[j + 1] - p
        dp = p - knots[j]
        am, ap = dm / h, dp / h
        cm = (dm**3 / h - h * dm) / 6.0
        cp = (dp**3 / h - h * dp) / 6.0
        rows = np.arange(p.size)
        out = cm[:, None] * F[j] + cp[:, None] * F[j + 1]
        out[rows, j] += am
        out[rows, j + 1] += ap
        return out

    return BasisRealization(evaluate(x), [S], 2, evaluate, domain=(lo, hi), kind="cubic_rs")


# ----------------------------------------------------------------------------
# tensor products


def row_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape[0] != B.shape[0]:
        raise ValueError("row counts differ")
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


def tensor_product(margin_t: BasisRealization, margin_p: BasisRealization) -> BasisRealization:
    """Tensor product of two one-penalty margins with one penalty per margin.

    Column ``a * K_p + b`` pairs margin-t function ``a`` with margin-p function
    ``b``.  ``evaluate`` takes an ``(n, 2)`` array of ``(t, p)`` pairs.
    """
    if len(margin_t.S_list) != 1 or len(margin_p.S_list) != 1:
        raise ValueError("tensor margins must carry exactly one penalty")
    Kt, Kp = margin_t.num_basis, margin_p.num_basis
    St = np.kron(margin_t.S_list[0], np.eye(Kp))
    Sp = np.kron(np.eye(Kt), margin_p.S_list[0])

    def evaluate(tp):
        tp = np.asarray(tp, dtype=float)
        return row_kron(margin_t.evaluate(tp[:, 0]), margin_p.evaluate(tp[:, 1]))

    B = row_kron(margin_t.B, margin_p.B) if margin_t.B.shape[0] == margin_p.B.shape[0] else None
    return BasisRealization(
        B if B is not None else np.empty((0, Kt * Kp)),
        [St, Sp],
        penalty_null_dim([St, Sp], Kt * Kp),
        evaluate,
        kind="tensor",
    )


# ----------------------------------------------------------------------------
# constraints and dumps


def constraint_null_space(C: np.ndarray) -> np.ndarray:
    """Orthonormal basis ``Z`` of ``{beta : C beta = 0}``."""
    C = np.atleast_2d(C)
    Q, _ = np.linalg.qr(C.T, mode="complete")
    return Q[:, C.shape[0] :]


def realization_to_dict(r: BasisRealization) -> dict:
    return {
        "kind": r.kind,
        "B": r.B.tolist(),
        "S_list": [S.tolist() for S in r.S_list],
        "null_dim": r.null_dim,
        "domain": list(r.domain) if r.domain else None,
        "linear_split": [s.tolist() for s in r.linear_split] if r.linear_split else None,
    }


def dump_realization(r: BasisRealization, path: str | Path) -> None:
    Path(path).write_text(json.dumps(realization_to_dict(r)) + "\n")


def make_basis(spec: BasisSpec, points) -> BasisRealization:
    """Build a one-dimensional realization from a spec (tensor specs excluded)."""
    if spec.kind == "pspline":
        return pspline_basis(points, spec.num_basis, spec.penalty_order, spec.adaptive_dim, spec.degree, spec.domain)
    if spec.kind == "thinplate":
        return thinplate_basis(points, spec.num_basis, spec.domain)
    if spec.kind == "cubic_rs":
        return cubic_rs_basis(points, spec.num_basis)
    raise ValueError("tensor bases are built with tensor_product")
