"""Hand-built profiles at every cleaning-rule boundary.

Each case lists the expected per-day weartime and validity, the profile
verdict and the total weartime.  The numbers are worked out by hand in the
comments; nothing here calls package code.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

NAN = float("nan")
MON = datetime(2024, 1, 1)  # Monday
DAY = 1440


def worn(value=200.0, minutes=DAY):
    """One calendar day worn for ``minutes`` minutes at a constant count."""
    d = np.full(DAY, NAN)
    d[:minutes] = value
    return d


def week(*days):
    """Seven days; unspecified trailing days are fully worn at 200."""
    days = list(days) + [worn() for _ in range(7 - len(days))]
    return np.concatenate(days)


@dataclass
class Case:
    name: str
    counts: np.ndarray
    day_weartime: list
    day_valid: list
    valid: bool
    weartime_total: int
    start: datetime = MON
    zero_block_len: int = 10
    global_mean: float = 1000.0
    global_sd: float = 1000.0  # upper day-mean bound 4000
    weekday: list = field(default_factory=lambda: [True] * 5 + [False] * 2)
    # (flat minute index on the calendar grid, expected cleaned value)
    spot_checks: list = field(default_factory=list)


FULL = [DAY] * 7
ALL = [True] * 7


def _cases() -> list[Case]:
    c = []

    d = worn()
    d[100:110] = 0  # 10 zeros: not more than 10, kept
    c.append(Case("zero run of 10 kept", week(d), FULL, ALL, True, 10080, spot_checks=[(105, 0.0)]))

    d = worn()
    d[100:111] = 0  # 11 zeros removed: 1440 - 11 = 1429
    c.append(Case("zero run of 11 removed", week(d), [1429] + [DAY] * 6, ALL, True, 10069,
                  spot_checks=[(100, NAN), (110, NAN), (111, 200.0)]))

    d = worn()
    d[:10] = 0
    c.append(Case("zero run of 10 at series start kept", week(d), FULL, ALL, True, 10080))

    last = worn()
    last[-11:] = 0  # last 11 minutes of day 6
    c.append(Case("zero run of 11 at series end removed", week(*[worn()] * 6, last),
                  [DAY] * 6 + [1429], ALL, True, 10069))

    d = worn()
    d[100:109] = 0  # 9 zeros
    d[109] = NAN  # missing breaks the run
    d[110:120] = 0  # 10 zeros
    c.append(Case("missing splits zeros into runs of 9 and 10", week(d), [1439] + [DAY] * 6, ALL, True, 10079,
                  spot_checks=[(100, 0.0), (115, 0.0)]))

    d0, d1 = worn(), worn()
    d0[-6:] = 0  # 6 + 5 = 11 zeros across midnight
    d1[:5] = 0
    c.append(Case("zero run of 11 across midnight removed", week(d0, d1), [1434, 1435] + [DAY] * 5, ALL, True, 10069))

    c.append(Case("day mean 149 invalid", week(worn(149.0)), FULL, [False] + [True] * 6, True, 8640))
    c.append(Case("day mean exactly 150 valid", week(worn(150.0)), FULL, ALL, True, 10080))

    c.append(Case("weartime 599 invalid", week(worn(200.0, 599)), [599] + [DAY] * 6, [False] + [True] * 6, True, 8640,
                  spot_checks=[(0, NAN)]))
    # 600 + 6 * 1440 = 9240
    c.append(Case("weartime exactly 600 valid", week(worn(200.0, 600)), [600] + [DAY] * 6, ALL, True, 9240,
                  spot_checks=[(0, 200.0)]))

    gone = worn(200.0, 0)
    c.append(Case("two valid days invalidates profile", week(worn(), worn(), *[gone] * 5),
                  [DAY, DAY, 0, 0, 0, 0, 0], [True, True] + [False] * 5, False, 2880))
    c.append(Case("three valid days keeps profile", week(worn(), worn(), worn(), *[gone] * 4),
                  [DAY] * 3 + [0] * 4, [True] * 3 + [False] * 4, True, 4320))

    d = worn()
    d[500] = 15000  # equal to the cap: kept
    c.append(Case("count 15000 retained", week(d), FULL, ALL, True, 10080, spot_checks=[(500, 15000.0)]))

    d = worn()
    d[500] = 15001  # above the cap: missing
    c.append(Case("count 15001 removed", week(d), [1439] + [DAY] * 6, ALL, True, 10079, spot_checks=[(500, NAN)]))

    # upper bound 1000 + 3 * 100 = 1300
    c.append(Case("day mean at upper bound valid", week(worn(1300.0)), FULL, ALL, True, 10080,
                  global_mean=1000.0, global_sd=100.0))
    c.append(Case("day mean above upper bound invalid", week(worn(1301.0)), FULL, [False] + [True] * 6, True, 8640,
                  global_mean=1000.0, global_sd=100.0))

    # starts 13:00, so day 0 holds 660 minutes; 10080 - 660 = 9420 minutes
    # remain, of which 6 * 1440 = 8640 fit and 780 fall past day 7
    c.append(Case("start at 13:00 fills a partial first day", np.full(10080, 200.0),
                  [660] + [DAY] * 6, ALL, True, 9300, start=datetime(2024, 1, 1, 13, 0),
                  spot_checks=[(0, NAN), (779, NAN), (780, 200.0)]))

    d = worn()
    d[100:105] = 0
    d[105] = 15001  # becomes missing and separates two runs of 5
    d[106:111] = 0
    c.append(Case("capped spike separates zero runs", week(d), [1439] + [DAY] * 6, ALL, True, 10079,
                  spot_checks=[(100, 0.0), (105, NAN), (110, 0.0)]))

    c.append(Case("all-missing profile invalid", np.full(10080, NAN), [0] * 7, [False] * 7, False, 0))

    c.append(Case("three-day series padded with missing days", np.full(3 * DAY, 200.0),
                  [DAY] * 3 + [0] * 4, [True] * 3 + [False] * 4, True, 4320))

    c.append(Case("weekend start flags Saturday and Sunday", week(), FULL, ALL, True, 10080,
                  start=datetime(2024, 1, 6), weekday=[False, False] + [True] * 5))

    d = worn()
    d[100:160] = 0
    c.append(Case("block length 60 keeps a run of 60", week(d), FULL, ALL, True, 10080, zero_block_len=60))

    d = worn()
    d[100:161] = 0  # 1440 - 61 = 1379
    c.append(Case("block length 60 removes a run of 61", week(d), [1379] + [DAY] * 6, ALL, True, 10019,
                  zero_block_len=60))

    c.append(Case("all-zero day becomes missing", week(worn(0.0)), [0] + [DAY] * 6, [False] + [True] * 6, True, 8640))

    d = worn()
    d[100:110] = 0  # 10 zeros
    d[110] = 15001  # removed spike
    d[111] = 0  # 1 zero
    c.append(Case("zeros next to a removed spike kept", week(d), [1439] + [DAY] * 6, ALL, True, 10079,
                  spot_checks=[(109, 0.0), (110, NAN), (111, 0.0)]))
    return c


CASES = _cases()
assert len(CASES) == 25
