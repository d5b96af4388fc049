"""Minute-epoch activity profiles: parsing, non-wear detection and day validity.

Counts are held as float arrays with ``NaN`` marking missing minutes.  A raw
series starts at an arbitrary minute; cleaned profiles are laid out on a
7 x 1440 calendar grid anchored at midnight of the start date.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440
N_DAYS = 7
MAX_MINUTES = MINUTES_PER_DAY * N_DAYS


class ParseError(ValueError):
    """Malformed input row; ``line`` is the 1-based line number in the file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ConflictError(ParseError):
    """Two rows claim the same (subject, minute)."""


@dataclass(frozen=True)
class CleaningConfig:
    zero_block_len: int = 10
    min_day_mean: float = 150.0
    sd_multiplier: float = 3.0
    min_wear_minutes: int = 600
    min_valid_days: int = 3
    count_cap: float = 15000.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"CleaningConfig.{name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class RawProfile:
    subject_id: str
    start: datetime
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if counts.size > MAX_MINUTES:
            raise ValueError(f"{self.subject_id}: {counts.size} minutes exceeds {MAX_MINUTES}")
        if np.any(counts[~np.isnan(counts)] < 0):
            raise ValueError(f"{self.subject_id}: negative counts")
        object.__setattr__(self, "counts", counts)

    def replace_counts(self, counts: np.ndarray) -> "RawProfile":
        return RawProfile(self.subject_id, self.start, counts)


@dataclass(frozen=True)
class DayRecord:
    day_index: int
    date: date
    weekday_flag: bool
    counts: np.ndarray = field(repr=False)
    weartime: int
    valid: bool
    reason: str | None = None


@dataclass(frozen=True)
class CleanProfile:
    subject_id: str
    start: datetime
    day_records: tuple[DayRecord, ...]
    weartime_total: int
    valid: bool
    reason: str | None = None

    @property
    def n_valid_days(self) -> int:
        return sum(d.valid for d in self.day_records)

    @property
    def counts(self) -> np.ndarray:
        """7 x 1440 matrix of cleaned counts (invalid days all missing)."""
        return np.vstack([d.counts for d in self.day_records])

    @property
    def weekday_mask(self) -> np.ndarray:
        return np.array([d.weekday_flag for d in self.day_records])


# ----------------------------------------------------------------------------
# cleaning rules


def _zero_run_mask(counts: np.ndarray, min_len: int) -> np.ndarray:
    """Boolean mask of zeros lying in maximal zero runs of length >= ``min_len``.

    Works along the last axis of ``counts``; ``NaN`` breaks a run.
    """
    counts = np.asarray(counts, dtype=float)
    shape = counts.shape
    rows = counts.reshape(-1, shape[-1]) if counts.ndim > 1 else counts[None, :]
    # a False separator column keeps runs from leaking between rows
    iz = np.zeros((rows.shape[0], rows.shape[1] + 1), dtype=np.int8)
    iz[:, :-1] = rows == 0
    flat = np.concatenate(([0], iz.ravel(), [0]))
    edges = np.diff(flat)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    long = (ends - starts) >= min_len
    delta = np.zeros(flat.size, dtype=np.int64)
    np.add.at(delta, starts[long], 1)
    np.add.at(delta, ends[long], -1)
    mask = np.cumsum(delta)[: iz.size].reshape(iz.shape)[:, :-1] > 0
    return mask.reshape(shape)


def nonwear_kernel(counts: np.ndarray, zero_block_len: int) -> np.ndarray:
    """Array form of :func:`mark_nonwear`; operates along the last axis."""
    out = np.array(counts, dtype=float, copy=True)
    out[_zero_run_mask(out, zero_block_len + 1)] = np.nan
    return out


def cap_kernel(counts: np.ndarray, cap: float) -> np.ndarray:
    out = np.array(counts, dtype=float, copy=True)
    with np.errstate(invalid="ignore"):
        out[out > cap] = np.nan
    return out


def mark_nonwear(p: RawProfile, cfg: CleaningConfig = CleaningConfig()) -> RawProfile:
    """Set every run of more than ``cfg.zero_block_len`` consecutive zeros to missing."""
    return p.replace_counts(nonwear_kernel(p.counts, cfg.zero_block_len))


def cap_counts(p: RawProfile, cfg: CleaningConfig = CleaningConfig()) -> RawProfile:
    """Set counts strictly above ``cfg.count_cap`` to missing."""
    return p.replace_counts(cap_kernel(p.counts, cfg.count_cap))


def calendar_grid(p: RawProfile) -> tuple[np.ndarray, list[date]]:
    """Place a series on a 7 x 1440 grid starting at midnight of the start date.

    Minutes before the start time are missing.  Minutes falling after the
    seventh calendar day are dropped.
    """
    offset = p.start.hour * 60 + p.start.minute
    grid = np.full(MAX_MINUTES, np.nan)
    n_keep = min(p.counts.size, MAX_MINUTES - offset)
    if n_keep < p.counts.size:
        dropped = p.counts[n_keep:]
        n_lost = int(np.count_nonzero(~np.isnan(dropped)))
        if n_lost:
            logger.info("%s: %d worn minutes past day 7 dropped", p.subject_id, n_lost)
    grid[offset : offset + n_keep] = p.counts[:n_keep]
    day0 = p.start.date()
    return grid.reshape(N_DAYS, MINUTES_PER_DAY), [day0 + timedelta(days=d) for d in range(N_DAYS)]


def _day_means(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    worn = np.count_nonzero(~np.isnan(grid), axis=-1)
    totals = np.nansum(grid, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(worn > 0, totals / np.maximum(worn, 1), np.nan)
    return means, worn


def cohort_day_stats(profiles: Sequence[RawProfile]) -> tuple[float, float]:
    """Mean and sample sd of per-day mean counts over all days with any wear.

    Profiles must already be non-wear marked and capped.
    """
    if len(profiles) == 0:
        raise ValueError("empty cohort")
    day_means = []
    for p in profiles:
        grid, _ = calendar_grid(p)
        means, worn = _day_means(grid)
        day_means.append(means[worn > 0])
    pooled = np.concatenate(day_means)
    if pooled.size == 0:
        raise ValueError("cohort has no worn minutes")
    mean = float(np.mean(pooled))
    sd = float(np.std(pooled, ddof=1)) if pooled.size > 1 else 0.0
    return mean, sd


def validate_days(
    p: RawProfile,
    cfg: CleaningConfig,
    global_mean: float,
    global_sd: float,
) -> CleanProfile:
    """Apply the weartime and day-mean rules and the minimum valid-day count."""
    grid, dates = calendar_grid(p)
    means, worn = _day_means(grid)
    upper = global_mean + cfg.sd_multiplier * global_sd
    records = []
    for d in range(N_DAYS):
        weartime = int(worn[d])
        if weartime == 0:
            reason = "no wear"
        elif weartime < cfg.min_wear_minutes:
            reason = f"weartime {weartime} < {cfg.min_wear_minutes}"
        elif means[d] < cfg.min_day_mean:
            reason = f"day mean {means[d]:.1f} < {cfg.min_day_mean:g}"
        elif means[d] > upper:
            reason = f"day mean {means[d]:.1f} > {upper:.1f}"
        else:
            reason = None
        valid = reason is None
        counts = grid[d] if valid else np.full(MINUTES_PER_DAY, np.nan)
        records.append(
            DayRecord(
                day_index=d,
                date=dates[d],
                weekday_flag=dates[d].weekday() < 5,
                counts=counts,
                weartime=weartime,
                valid=valid,
                reason=reason,
            )
        )
    n_valid = sum(r.valid for r in records)
    weartime_total = sum(r.weartime for r in records if r.valid)
    valid = n_valid >= cfg.min_valid_days
    reason = None if valid else f"{n_valid} valid days < {cfg.min_valid_days}"
    return CleanProfile(p.subject_id, p.start, tuple(records), weartime_total, valid, reason)


def clean_cohort(
    profiles: Sequence[RawProfile], cfg: CleaningConfig = CleaningConfig()
) -> tuple[list[CleanProfile], tuple[float, float]]:
    """Run the full protocol on a cohort; returns cleaned profiles and (mean, sd)."""
    prepared = [cap_counts(mark_nonwear(p, cfg), cfg) for p in profiles]
    stats = cohort_day_stats(prepared)
    return [validate_days(p, cfg, *stats) for p in prepared], stats


def cleaning_report(
    cleaned: Sequence[CleanProfile], cfg: CleaningConfig, stats: tuple[float, float]
) -> dict:
    subjects = []
    for c in cleaned:
        subjects.append(
            {
                "subject_id": c.subject_id,
                "valid": c.valid,
                "valid_days": c.n_valid_days,
                "weartime": c.weartime_total,
                "exclusion_reason": c.reason,
                "days": [
                    {
                        "day_index": d.day_index,
                        "date": d.date.isoformat(),
                        "weekday": d.weekday_flag,
                        "weartime": d.weartime,
                        "valid": d.valid,
                        "reason": d.reason,
                    }
                    for d in c.day_records
                ],
            }
        )
    return {
        "config": asdict(cfg),
        "global_mean": stats[0],
        "global_sd": stats[1],
        "n_subjects": len(cleaned),
        "n_valid": sum(c.valid for c in cleaned),
        "excluded": [c.subject_id for c in cleaned if not c.valid],
        "subjects": subjects,
    }


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# CSV input/output


def _parse_timestamp(text: str, line: int) -> datetime:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"bad timestamp {text!r}", line) from None
    if ts.second or ts.microsecond:
        raise ParseError(f"timestamp {text!r} is not at minute resolution", line)
    return ts.replace(tzinfo=None)


def _parse_count(text: str, line: int) -> float:
    text = text.strip()
    if text == "":
        return np.nan
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"count {text!r} is not an integer", line) from None
    if value < 0:
        raise ParseError(f"negative count {value}", line)
    return float(value)


def _read_long(path: Path) -> list[RawProfile]:
    rows: dict[str, dict[datetime, tuple[float, int]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject_id", "timestamp", "count"]:
            raise ParseError("expected header subject_id,timestamp,count", 1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line_no)
            sid = row[0].strip()
            if not sid:
                raise ParseError("empty subject_id", line_no)
            ts = _parse_timestamp(row[1], line_no)
            count = _parse_count(row[2], line_no)
            per_subject = rows.setdefault(sid, {})
            if ts in per_subject:
                raise ConflictError(
                    f"duplicate timestamp {ts.isoformat()} for subject {sid!r} "
                    f"(first seen on line {per_subject[ts][1]})",
                    line_no,
                )
            per_subject[ts] = (count, line_no)
    profiles = []
    for sid, entries in rows.items():
        start = min(entries)
        counts = np.full(max(int((ts - start).total_seconds() // 60) for ts in entries) + 1, np.nan)
        if counts.size > MAX_MINUTES:
            last = max(entries)
            raise ParseError(
                f"subject {sid!r} spans {counts.size} minutes (> {MAX_MINUTES})", entries[last][1]
            )
        for ts, (count, _) in entries.items():
            counts[int((ts - start).total_seconds() // 60)] = count
        profiles.append(RawProfile(sid, start, counts))
    return profiles


def _read_wide(path: Path) -> list[RawProfile]:
    profiles = []
    seen: dict[str, int] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or [h.strip() for h in header[:2]] != [
            "subject_id",
            "start_timestamp",
        ]:
            raise ParseError("expected header subject_id,start_timestamp,c0,...", 1)
        n_minutes = len(header) - 2
        if n_minutes > MAX_MINUTES:
            raise ParseError(f"{n_minutes} minute columns exceeds {MAX_MINUTES}", 1)
        if [h.strip() for h in header[2:]] != [f"c{i}" for i in range(n_minutes)]:
            raise ParseError("minute columns must be c0..cN in order", 1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line_no)
            sid = row[0].strip()
            if sid in seen:
                raise ConflictError(
                    f"subject {sid!r} repeated (first on line {seen[sid]})", line_no
                )
            seen[sid] = line_no
            start = _parse_timestamp(row[1], line_no)
            counts = np.array([_parse_count(c, line_no) for c in row[2:]])
            profiles.append(RawProfile(sid, start, counts))
    return profiles


def parse_profiles(path: str | Path, format: str = "long_csv") -> list[RawProfile]:
    """Read raw profiles from a long (one row per minute) or wide CSV.

    Profiles are returned sorted by subject id.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "long_csv":
        profiles = _read_long(path)
    elif format == "wide_csv":
        profiles = _read_wide(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    return sorted(profiles, key=lambda p: p.subject_id)


def _fmt_count(value: float) -> str:
    return "" if np.isnan(value) else str(int(value))


def _as_series(p: RawProfile | CleanProfile) -> tuple[datetime, np.ndarray]:
    if isinstance(p, CleanProfile):
        midnight = datetime.combine(p.start.date(), datetime.min.time())
        return midnight, p.counts.ravel()
    return p.start, p.counts


def write_profiles(
    profiles: Iterable[RawProfile | CleanProfile], path: str | Path, format: str = "wide_csv"
) -> None:
    """Write raw or cleaned profiles; cleaned ones are emitted on their calendar grid."""
    series = [(p.subject_id, *_as_series(p)) for p in profiles]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if format == "wide_csv":
            width = max((s[2].size for s in series), default=0)
            writer.writerow(["subject_id", "start_timestamp"] + [f"c{i}" for i in range(width)])
            for sid, start, counts in series:
                padded = np.full(width, np.nan)
                padded[: counts.size] = counts
                writer.writerow(
                    [sid, start.isoformat(timespec="minutes")] + [_fmt_count(c) for c in padded]
                )
        elif format == "long_csv":
            writer.writerow(["subject_id", "timestamp", "count"])
            for sid, start, counts in series:
                for i, c in enumerate(counts):
                    ts = start + timedelta(minutes=i)
                    writer.writerow([sid, ts.isoformat(timespec="minutes"), _fmt_count(c)])
        else:
            raise ValueError(f"unknown format {format!r}")


def restore_clean_profiles(profiles: Sequence[RawProfile], report: dict) -> list[CleanProfile]:
    """Rebuild cleaned profiles from their written calendar grids and the cleaning report."""
    by_id = {s["subject_id"]: s for s in report["subjects"]}
    out = []
    for p in profiles:
        if p.subject_id not in by_id:
            raise ValueError(f"{p.subject_id}: not in cleaning report")
        info = by_id[p.subject_id]
        grid = np.full(MAX_MINUTES, np.nan)
        grid[: p.counts.size] = p.counts[:MAX_MINUTES]
        grid = grid.reshape(N_DAYS, MINUTES_PER_DAY)
        records = []
        for d in info["days"]:
            k = d["day_index"]
            counts = grid[k] if d["valid"] else np.full(MINUTES_PER_DAY, np.nan)
            records.append(
                DayRecord(k, date.fromisoformat(d["date"]), d["weekday"], counts, d["weartime"], d["valid"], d["reason"])
            )
        out.append(
            CleanProfile(p.subject_id, p.start, tuple(records), info["weartime"], info["valid"], info["exclusion_reason"])
        )
    return out
