"""Histogram summaries of cleaned activity profiles."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .profiles import MINUTES_PER_DAY, CleanProfile


class InvalidProfileError(ValueError):
    pass


@dataclass(frozen=True)
class BinGrid:
    edges: np.ndarray
    midpoints: np.ndarray
    transform: str = "identity"
    alpha: float = 0.35

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "midpoints", np.asarray(self.midpoints, dtype=float))

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def same_as(self, other: "BinGrid") -> bool:
        return (
            self.edges.shape == other.edges.shape
            and np.array_equal(self.edges, other.edges)
            and self.transform == other.transform
        )

    def to_dict(self) -> dict:
        return {
            "edges": self.edges.tolist(),
            "midpoints": self.midpoints.tolist(),
            "transform": self.transform,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BinGrid":
        return cls(np.array(d["edges"]), np.array(d["midpoints"]), d["transform"], d.get("alpha", 0.35))


def make_bins(
    width: float = 100,
    upper: float = 8000,
    cap: float = 15000,
    transform: str = "identity",
    alpha: float = 0.35,
) -> BinGrid:
    """Equal-width bins on ``[0, upper)`` plus a tail bin ``[upper, cap)``.

    With ``transform="power"`` the ``upper / width`` regular bins are equally
    wide in ``u = count ** alpha`` instead of in counts; midpoints are taken on
    the transformed scale and mapped back.
    """
    if cap <= upper:
        raise ValueError(f"cap ({cap}) must exceed upper ({upper})")
    n_main = upper / width
    if width <= 0 or abs(n_main - round(n_main)) > 1e-9:
        raise ValueError(f"upper ({upper}) must be a multiple of width ({width})")
    n_main = int(round(n_main))
    if transform == "identity":
        edges = np.append(np.arange(n_main + 1) * float(width), float(cap))
        midpoints = 0.5 * (edges[:-1] + edges[1:])
    elif transform == "power":
        u = np.append(np.linspace(0.0, upper**alpha, n_main + 1), cap**alpha)
        edges = u ** (1.0 / alpha)
        edges[n_main] = float(upper)
        edges[-1] = float(cap)
        midpoints = (0.5 * (u[:-1] + u[1:])) ** (1.0 / alpha)
    else:
        raise ValueError(f"unknown transform {transform!r}")
    return BinGrid(edges, midpoints, transform, alpha)


def bin_index(values: np.ndarray, grid: BinGrid) -> np.ndarray:
    """Bin of each value; the last bin is closed on the right."""
    values = np.asarray(values, dtype=float)
    if values.size and (values.min() < grid.edges[0] or values.max() > grid.edges[-1]):
        raise ValueError(
            f"values outside grid range [{grid.edges[0]}, {grid.edges[-1]}]; "
            "counts above the cap must be removed before binning"
        )
    idx = np.searchsorted(grid.edges, values, side="right") - 1
    return np.minimum(idx, grid.n_bins - 1)


def tally(values: np.ndarray, grid: BinGrid) -> np.ndarray:
    return np.bincount(bin_index(values, grid), minlength=grid.n_bins).astype(float)


@dataclass(frozen=True)
class HistogramSummary:
    """Relative-frequency summary of one subject's cleaned profile.

    ``z`` has shape ``(J,)`` for ``oneD``, ``(J, M)`` for ``twoD`` (a density
    in time, so ``sum(z * l) == 1``) and ``(2, J)`` for ``split`` with the
    weekday row first.  ``offset`` counts leading bins removed by
    :func:`drop_first_bin`.
    """

    subject_id: str
    kind: str
    z: np.ndarray = field(repr=False)
    grid: BinGrid = field(repr=False)
    weartime_minutes: int = 0
    valid_days: int = 0
    time_widths: np.ndarray | None = field(default=None, repr=False)
    side_weartime: tuple[int, int] | None = None
    offset: int = 0

    @property
    def midpoints(self) -> np.ndarray:
        return self.grid.midpoints[self.offset :]

    @property
    def z_wd(self) -> np.ndarray:
        self._need("split")
        return self.z[0]

    @property
    def z_we(self) -> np.ndarray:
        self._need("split")
        return self.z[1]

    @property
    def empty_sides(self) -> tuple[bool, bool]:
        self._need("split")
        return (self.side_weartime[0] == 0, self.side_weartime[1] == 0)

    @property
    def daily_weartime(self) -> float:
        return self.weartime_minutes / self.valid_days

    def _need(self, kind: str):
        if self.kind != kind:
            raise ValueError(f"summary is {self.kind!r}, not {kind!r}")


def _check_valid(p: CleanProfile):
    if not p.valid:
        raise InvalidProfileError(f"{p.subject_id}: invalid profile ({p.reason})")
    if p.weartime_total <= 0:
        raise InvalidProfileError(f"{p.subject_id}: zero weartime")


def hist1d(p: CleanProfile, grid: BinGrid) -> HistogramSummary:
    _check_valid(p)
    counts = p.counts.ravel()
    z = tally(counts[~np.isnan(counts)], grid) / p.weartime_total
    return HistogramSummary(p.subject_id, "oneD", z, grid, p.weartime_total, p.n_valid_days)


def hist2d(p: CleanProfile, grid: BinGrid, hour_width: float = 1.0) -> HistogramSummary:
    """Intensity x hour-of-day histogram, normalised so ``sum(z * l_m) == 1``."""
    n_hours = 24.0 / hour_width
    if hour_width <= 0 or abs(n_hours - round(n_hours)) > 1e-9:
        raise ValueError(f"24 is not divisible by hour_width={hour_width}")
    n_hours = int(round(n_hours))
    _check_valid(p)
    counts = p.counts
    minute = np.broadcast_to(np.arange(MINUTES_PER_DAY), counts.shape)
    worn = ~np.isnan(counts)
    hour_bin = (minute[worn] // (60.0 * hour_width)).astype(int)
    j = bin_index(counts[worn], grid)
    tallies = np.zeros((grid.n_bins, n_hours))
    np.add.at(tallies, (j, hour_bin), 1.0)
    z = tallies / (p.weartime_total * hour_width)
    return HistogramSummary(
        p.subject_id,
        "twoD",
        z,
        grid,
        p.weartime_total,
        p.n_valid_days,
        time_widths=np.full(n_hours, float(hour_width)),
    )


def hist_split(p: CleanProfile, grid: BinGrid) -> HistogramSummary:
    """Separate weekday (Mon-Fri) and weekend histograms, each normalised by its own weartime.

    A side without weartime gives an all-zero row; see ``empty_sides``.
    """
    _check_valid(p)
    counts = p.counts
    rows, wear = [], []
    for mask in (p.weekday_mask, ~p.weekday_mask):
        side = counts[mask].ravel()
        side = side[~np.isnan(side)]
        t = tally(side, grid)
        rows.append(t / side.size if side.size else t)
        wear.append(int(side.size))
    return HistogramSummary(
        p.subject_id,
        "split",
        np.vstack(rows),
        grid,
        p.weartime_total,
        p.n_valid_days,
        side_weartime=(wear[0], wear[1]),
    )


def mean_cpm(h: HistogramSummary) -> float:
    """Histogram estimate of mean counts per minute."""
    h._need("oneD")
    return float(np.dot(h.midpoints, h.z))


def drop_first_bin(h: HistogramSummary) -> HistogramSummary:
    """Remove the first bin without renormalising the remaining frequencies."""
    if h.kind == "oneD":
        z = h.z[1:]
    elif h.kind == "split":
        z = h.z[:, 1:]
    else:
        raise ValueError("drop_first_bin applies to oneD or split summaries")
    return replace(h, z=z.copy(), offset=h.offset + 1)


def aggregate(h: HistogramSummary, coarse: BinGrid) -> HistogramSummary:
    """Re-bin a oneD summary onto a grid whose edges are a subset of its own."""
    h._need("oneD")
    fine = h.grid.edges[h.offset :]
    pos = np.searchsorted(fine, coarse.edges)
    if np.any(pos >= fine.size) or not np.array_equal(fine[pos], coarse.edges):
        raise ValueError("coarse edges must be a subset of the fine edges")
    if pos[0] != 0 or pos[-1] != fine.size - 1:
        raise ValueError("coarse grid must span the fine grid")
    z = np.add.reduceat(h.z, pos[:-1])
    return HistogramSummary(h.subject_id, "oneD", z, coarse, h.weartime_minutes, h.valid_days)


@dataclass(frozen=True)
class BinCorrelation:
    matrix: np.ndarray
    missing: np.ndarray  # True for bins with zero variance across subjects


def bin_correlation(hs: Sequence[HistogramSummary]) -> BinCorrelation:
    """Pearson correlation of bin frequencies across subjects."""
    if len(hs) < 3:
        raise ValueError("need at least 3 subjects")
    grid = hs[0].grid
    for h in hs:
        h._need("oneD")
        if not h.grid.same_as(grid) or h.offset != hs[0].offset:
            raise ValueError(f"{h.subject_id}: grid differs from {hs[0].subject_id}")
    Z = np.vstack([h.z for h in hs])
    C = Z - Z.mean(axis=0)
    ss = np.sqrt(np.einsum("ij,ij->j", C, C))
    scale = np.max(np.abs(Z), axis=0)
    missing = ss <= 1e-14 * np.maximum(scale, 1e-300) * np.sqrt(Z.shape[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        R = (C.T @ C) / np.outer(ss, ss)
    R = np.clip(R, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    R[missing, :] = np.nan
    R[:, missing] = np.nan
    return BinCorrelation(R, missing)


# ----------------------------------------------------------------------------
# export / import


def write_grid(grid: BinGrid, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid.to_dict(), indent=2) + "\n")


def read_grid(path: str | Path) -> BinGrid:
    return BinGrid.from_dict(json.loads(Path(path).read_text()))


def write_hist1d(hs: Sequence[HistogramSummary], path: str | Path) -> None:
    J = hs[0].z.size if hs else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "weartime", "valid_days"] + [f"z_{j + 1}" for j in range(J)])
        for h in hs:
            h._need("oneD")
            w.writerow([h.subject_id, h.weartime_minutes, h.valid_days] + [repr(float(v)) for v in h.z])


def read_hist1d(path: str | Path, grid: BinGrid) -> dict[str, HistogramSummary]:
    out = {}
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if len(header) - 3 != grid.n_bins:
            raise ValueError(f"{path}: {len(header) - 3} bins, grid has {grid.n_bins}")
        for row in r:
            z = np.array([float(v) for v in row[3:]])
            out[row[0]] = HistogramSummary(row[0], "oneD", z, grid, int(row[1]), int(row[2]))
    return out


def write_hist_split(hs: Sequence[HistogramSummary], path: str | Path) -> None:
    J = hs[0].z.shape[1] if hs else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "side", "weartime", "valid_days"] + [f"z_{j + 1}" for j in range(J)])
        for h in hs:
            h._need("split")
            for side, row, wt in zip(("weekday", "weekend"), h.z, h.side_weartime):
                w.writerow([h.subject_id, side, wt, h.valid_days] + [repr(float(v)) for v in row])


def read_hist_split(path: str | Path, grid: BinGrid) -> dict[str, HistogramSummary]:
    parts: dict[str, dict] = {}
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            d = parts.setdefault(row[0], {"valid_days": int(row[3])})
            d[row[1]] = (int(row[2]), np.array([float(v) for v in row[4:]]))
    out = {}
    for sid, d in parts.items():
        (wt_wd, z_wd), (wt_we, z_we) = d["weekday"], d["weekend"]
        out[sid] = HistogramSummary(
            sid, "split", np.vstack([z_wd, z_we]), grid, wt_wd + wt_we, d["valid_days"],
            side_weartime=(wt_wd, wt_we),
        )
    return out


def write_hist2d(hs: Sequence[HistogramSummary], path: str | Path) -> None:
    """Long format; zero cells are omitted."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "bin_j", "hour_m", "z"])
        for h in hs:
            h._need("twoD")
            for j, m in zip(*np.nonzero(h.z)):
                w.writerow([h.subject_id, j + 1, m + 1, repr(float(h.z[j, m]))])


def read_hist2d(
    path: str | Path, grid: BinGrid, hour_width: float, weartime: Mapping[str, tuple[int, int]]
) -> dict[str, HistogramSummary]:
    """Read a long 2D export; ``weartime`` maps subject -> (weartime, valid_days)."""
    M = int(round(24 / hour_width))
    Zs: dict[str, np.ndarray] = {sid: np.zeros((grid.n_bins, M)) for sid in weartime}
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for sid, j, m, z in r:
            Zs.setdefault(sid, np.zeros((grid.n_bins, M)))[int(j) - 1, int(m) - 1] = float(z)
    return {
        sid: HistogramSummary(
            sid, "twoD", Z, grid, *weartime.get(sid, (0, 0)), time_widths=np.full(M, float(hour_width))
        )
        for sid, Z in Zs.items()
    }
