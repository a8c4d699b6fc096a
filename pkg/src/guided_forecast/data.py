"""Seasonal wILI data: ingestion, synthetic generation and train/safety/test splits.

A season runs from epidemiological week 40 of its start year through week 17
of the following year. Values are stored on the raw wILI scale.

Example:
    >>> ss = synth_seasons(3, noise_sd=0.0, seed=0)
    >>> len(ss), len(ss.seasons[0])
    (3, 30)
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import GapError, ParseError, SizingError, ValidationError

logger = logging.getLogger(__name__)

FIRST_WEEK = 40
LAST_WEEK = 17
SEASON_LENGTH = 30
CSV_HEADER = ("region", "year", "week", "wili")


def epiweek_of(index: int, long_year: bool = False) -> int:
    """Epidemiological week number of season position ``index``."""
    n = SEASON_LENGTH + (1 if long_year else 0)
    if not 0 <= index < n:
        raise IndexError(f"week index {index} outside season of length {n}")
    limit = 53 if long_year else 52
    week = FIRST_WEEK + index
    return week - limit if week > limit else week


def week_index(epiweek: int, long_year: bool = False) -> int:
    """Inverse of :func:`epiweek_of`."""
    limit = 53 if long_year else 52
    if FIRST_WEEK <= epiweek <= limit:
        return epiweek - FIRST_WEEK
    if 1 <= epiweek <= LAST_WEEK:
        return epiweek + limit - FIRST_WEEK
    raise IndexError(f"epiweek {epiweek} is not part of a season")


def year_label(start_year: int) -> str:
    return f"{start_year}/{(start_year + 1) % 100:02d}"


def start_year_of(label: str) -> int:
    return int(label.split("/")[0])


@dataclass(frozen=True)
class Season:
    """One region-year of weekly wILI values, week 40 first."""

    region: str
    year_label: str
    values: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if len(values) not in (SEASON_LENGTH, SEASON_LENGTH + 1):
            raise ValidationError(
                f"season {self.key} has {len(values)} weeks, expected 30 or 31"
            )
        for i, v in enumerate(values):
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"season {self.key} week index {i}: bad wILI {v!r}")

    @property
    def key(self) -> tuple[str, str]:
        """Canonical sort key: (year_label, region)."""
        return (self.year_label, self.region)

    @property
    def long_year(self) -> bool:
        return len(self.values) == SEASON_LENGTH + 1

    def __len__(self) -> int:
        return len(self.values)

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class SeasonSet:
    """An ordered, duplicate-free collection of seasons.

    Seasons are kept sorted by (year_label, region) so two sets holding the
    same seasons compare equal regardless of how they were built.
    """

    seasons: tuple[Season, ...] = ()
    regions: frozenset[str] = field(default=frozenset(), compare=False)

    def __post_init__(self):
        seasons = tuple(sorted(self.seasons, key=lambda s: s.key))
        keys = [s.key for s in seasons]
        if len(set(keys)) != len(keys):
            dupes = sorted({k for k in keys if keys.count(k) > 1})
            raise ValidationError(f"duplicate seasons: {dupes}")
        object.__setattr__(self, "seasons", seasons)
        object.__setattr__(self, "regions", frozenset(s.region for s in seasons))

    def __len__(self) -> int:
        return len(self.seasons)

    def __iter__(self):
        return iter(self.seasons)

    def __or__(self, other: "SeasonSet") -> "SeasonSet":
        return SeasonSet(self.seasons + other.seasons)

    def keys(self) -> list[tuple[str, str]]:
        return [s.key for s in self.seasons]

    def filter(self, regions: Iterable[str] | None = None,
               exclude_years: Iterable[str] = ()) -> "SeasonSet":
        regions = None if regions is None else set(regions)
        exclude_years = set(exclude_years)
        return SeasonSet(tuple(
            s for s in self.seasons
            if (regions is None or s.region in regions) and s.year_label not in exclude_years
        ))

    def by_region(self, region: str) -> "SeasonSet":
        return self.filter(regions=[region])

    def year_labels(self) -> list[str]:
        return sorted({s.year_label for s in self.seasons})

    def max_value(self) -> float:
        return max((max(s.values) for s in self.seasons), default=0.0)


@dataclass(frozen=True)
class PredictionTask:
    """Forecast week ``week_index + 1`` from the first ``week_index`` weeks.

    ``week_index`` is the number of observed weeks (1-based position of the
    last observation), so the target is ``values[week_index]``.
    """

    week_index: int
    horizon: int = 1

    def __post_init__(self):
        if self.horizon != 1:
            raise ValidationError("only one-week-ahead forecasting is supported")
        if not 1 <= self.week_index < SEASON_LENGTH:
            raise ValidationError(
                f"week_index must be in [1, {SEASON_LENGTH - 1}], got {self.week_index}"
            )

    @classmethod
    def from_epiweek(cls, epiweek: int) -> "PredictionTask":
        """Task for a forecast made once ``epiweek`` has been observed."""
        return cls(week_index(epiweek) + 1)

    @property
    def epiweek(self) -> int:
        """Epidemiological week of the last observation."""
        return epiweek_of(self.week_index - 1)


@dataclass(frozen=True)
class DataSplit:
    candidate: SeasonSet
    safety: SeasonSet
    test: SeasonSet
    seed: int

    def __post_init__(self):
        c, s, t = (set(x.keys()) for x in (self.candidate, self.safety, self.test))
        if c & s or c & t or s & t:
            raise ValidationError("split parts overlap")

    @property
    def training(self) -> SeasonSet:
        return self.candidate | self.safety

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "candidate": ["|".join(k) for k in self.candidate.keys()],
            "safety": ["|".join(k) for k in self.safety.keys()],
            "test": ["|".join(k) for k in self.test.keys()],
        }


# --------------------------------------------------------------------------- I/O


def _season_key(year: int, week: int) -> int | None:
    if week >= FIRST_WEEK:
        return year
    if week <= LAST_WEEK:
        return year - 1
    return None


def ingest_wili(path: str | Path, region_filter: Iterable[str] | None = None) -> SeasonSet:
    """Read a ``region,year,week,wili`` CSV into a :class:`SeasonSet`.

    Rows outside weeks 40-17 are ignored. Week 53 is dropped so every season
    has 30 entries. A season with a hole in the middle is an error; seasons
    that are only truncated at either end (e.g. the current, still running
    season) are skipped with a warning.

    Raises:
        ParseError: malformed row or header.
        GapError: a season is missing an interior week.
        ValidationError: negative or non-finite wILI.
    """
    wanted = None if region_filter is None else set(region_filter)
    rows: dict[tuple[str, int], dict[int, float]] = defaultdict(dict)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return SeasonSet()
        if tuple(h.strip().lower() for h in header) != CSV_HEADER:
            raise ParseError(1, f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(lineno, f"expected 4 fields, got {len(row)}")
            region = row[0].strip()
            try:
                year, week, value = int(row[1]), int(row[2]), float(row[3])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not region or not 1 <= week <= 53:
                raise ParseError(lineno, f"bad region/week {row[0]!r}/{row[2]!r}")
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"line {lineno}: wILI must be finite and >= 0, got {value}")
            if wanted is not None and region not in wanted:
                continue
            start = _season_key(year, week)
            if start is None:
                continue
            if week == 53:
                continue
            weeks = rows[(region, start)]
            if week in weeks:
                raise ParseError(lineno, f"duplicate row for {region} {year} week {week}")
            weeks[week] = value

    seasons = []
    for (region, start), weeks in sorted(rows.items()):
        expected = [(start, w) for w in range(FIRST_WEEK, 53)] + [
            (start + 1, w) for w in range(1, LAST_WEEK + 1)
        ]
        present = [w in weeks for _, w in expected]
        if not all(present):
            first = present.index(True)
            last = len(present) - 1 - present[::-1].index(True)
            interior = [i for i in range(first, last + 1) if not present[i]]
            if interior:
                y, w = expected[interior[0]]
                raise GapError(region, y, w)
            logger.warning("skipping incomplete season %s %s", region, year_label(start))
            continue
        seasons.append(Season(region, year_label(start), tuple(weeks[w] for _, w in expected)))
    return SeasonSet(tuple(seasons))


def write_wili(data: SeasonSet, path: str | Path) -> None:
    """Write seasons in the CSV schema read by :func:`ingest_wili`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in data:
            start = start_year_of(s.year_label)
            for i, v in enumerate(s.values):
                week = epiweek_of(i, s.long_year)
                writer.writerow([s.region, start if week >= FIRST_WEEK else start + 1, week, repr(v)])


# ------------------------------------------------------------------------- split


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, test_fraction: float, candidate_fraction: float) -> tuple[int, int, int]:
    """Return (|test|, |candidate|, |safety|) for ``n`` units."""
    if not 0 < test_fraction < 1 or not 0 < candidate_fraction < 1:
        raise ValidationError("fractions must lie strictly between 0 and 1")
    n_test = max(1, _round_half_up(test_fraction * n))
    rest = n - n_test
    n_cand = max(1, math.floor(candidate_fraction * rest))
    n_safe = rest - n_cand
    if n_safe < 2:
        raise SizingError(
            f"{n} units cannot be split into test/candidate/safety with |safety| >= 2; "
            f"need at least 4"
        )
    return n_test, n_cand, n_safe


def split(data: SeasonSet, test_fraction: float = 0.2, candidate_fraction: float = 0.5,
          seed: int = 0, group_by_year: bool = False) -> DataSplit:
    """Shuffle seasons and cut them into candidate, safety and test sets.

    With ``group_by_year`` all regions of a year land in the same part, which
    keeps same-year region pairs together for regional-equity guidance.
    """
    if group_by_year:
        units = [[s for s in data if s.year_label == y] for y in data.year_labels()]
    else:
        units = [[s] for s in data]
    n_test, n_cand, _ = split_sizes(len(units), test_fraction, candidate_fraction)
    order = np.random.default_rng(seed).permutation(len(units))
    parts = [units[i] for i in order]

    def collect(chunk):
        return SeasonSet(tuple(s for unit in chunk for s in unit))

    return DataSplit(
        candidate=collect(parts[n_test:n_test + n_cand]),
        safety=collect(parts[n_test + n_cand:]),
        test=collect(parts[:n_test]),
        seed=seed,
    )


# --------------------------------------------------------------------- synthetic


def bump(peak_week: float, peak_height: float, width: float, baseline: float,
         length: int = SEASON_LENGTH) -> np.ndarray:
    """Single-peaked Gaussian season curve."""
    t = np.arange(length, dtype=float)
    return baseline + peak_height * np.exp(-0.5 * ((t - peak_week) / width) ** 2)


def synth_seasons(n: int, dip_week: int | None = None, dip_depth: float = 0.0,
                  noise_sd: float = 0.0, seed: int = 0, *, region: str = "synthetic",
                  start_year: int = 1990, peak_week: float = 15.0, peak_height: float = 4.0,
                  width: float = 4.0, baseline: float = 1.0, jitter: float = 0.0) -> SeasonSet:
    """Generate ``n`` smooth single-peak seasons.

    Each season is :func:`bump` plus N(0, ``noise_sd``) noise. ``jitter``
    perturbs peak week, height and width from season to season (relative
    scale; 0 keeps every season identical before noise). If ``dip_week`` is
    given, that week index is multiplied by ``1 - dip_depth``. Values are
    clipped at 0.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if dip_depth < 0 or noise_sd < 0 or jitter < 0:
        raise ValidationError("dip_depth, noise_sd and jitter must be >= 0")
    if dip_week is not None and not 0 <= dip_week < SEASON_LENGTH:
        raise IndexError(f"dip_week {dip_week} outside season of length {SEASON_LENGTH}")
    rng = np.random.default_rng(seed)
    seasons = []
    for i in range(n):
        shape = rng.standard_normal(3)
        curve = bump(
            peak_week + jitter * 3.0 * shape[0],
            peak_height * math.exp(jitter * 0.25 * shape[1]),
            width * math.exp(jitter * 0.15 * shape[2]),
            baseline,
        )
        curve = curve + noise_sd * rng.standard_normal(SEASON_LENGTH)
        if dip_week is not None:
            curve[dip_week] *= 1.0 - dip_depth
        curve = np.clip(curve, 0.0, None)
        seasons.append(Season(region, year_label(start_year + i), tuple(curve.tolist())))
    return SeasonSet(tuple(seasons))


def merge(sets: Sequence[SeasonSet]) -> SeasonSet:
    return SeasonSet(tuple(s for ss in sets for s in ss))
