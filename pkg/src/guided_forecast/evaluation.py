"""Test-set evaluation, scoring of external forecasts, and report files."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PredictionTask, SeasonSet, epiweek_of
from .errors import AlignmentError, GuidedForecastError, ParseError, ValidationError
from .forecaster import ForecastModel, predict
from .guidance import REGIONAL_EQUITY, Guidance, collect_z, failure_rate
from .modes import WeekResult, rmse


@dataclass
class EvalRow:
    week: int
    failure_rate_guided: float | None
    failure_rate_unconstrained: float | None
    delta: float
    rmse_guided: float | None
    rmse_unconstrained: float | None
    status: str


@dataclass
class EvalReport:
    per_week: list[EvalRow] = field(default_factory=list)
    summary: dict = field(default_factory=lambda: {
        "mean_rmse_ratio": None, "weeks_violating_delta": 0, "weeks_total": 0})

    def to_dict(self) -> dict:
        return {"per_week": [asdict(r) for r in self.per_week], "summary": dict(self.summary)}

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls([EvalRow(**r) for r in obj["per_week"]], dict(obj["summary"]))


def _summary(rows: Sequence[EvalRow]) -> dict:
    ratios = [r.rmse_guided / r.rmse_unconstrained for r in rows
              if r.rmse_guided is not None and r.rmse_unconstrained]
    return {
        "mean_rmse_ratio": float(np.mean(ratios)) if ratios else None,
        "weeks_violating_delta": sum(
            1 for r in rows if r.failure_rate_guided is not None
            and r.failure_rate_guided > r.delta),
        "weeks_total": len(rows),
        "weeks_certified": sum(1 for r in rows if r.failure_rate_guided is not None),
        "weeks_nsf": sum(1 for r in rows if r.failure_rate_guided is None),
    }


def evaluate(results: Sequence[WeekResult], test: SeasonSet, guidance: Guidance,
             baselines: Sequence[ForecastModel] | None = None,
             historical: SeasonSet | None = None) -> EvalReport:
    """Failure rates and RMSE on the test seasons, week by week.

    ``baselines`` are the unconstrained models aligned with ``results``
    (defaulting to the baselines stored in each result). NSF and errored
    weeks keep a row with empty guided fields and are left out of the
    failure-rate aggregation. ``historical`` defaults to each run's training
    seasons.
    """
    if not results:
        raise GuidedForecastError("nothing to evaluate")
    if baselines is None:
        baselines = [r.baseline for r in results]
    if len(baselines) != len(results):
        raise AlignmentError(f"{len(results)} outcomes but {len(baselines)} baseline models")
    rows = []
    for res, base in zip(results, baselines):
        if base is None:
            raise AlignmentError(f"week index {res.week_index} has no baseline model")
        task = PredictionTask(res.week_index)
        split = None if res.outcome is None else res.outcome.split
        hist = historical if historical is not None else (split.training if split else None)
        if hist is None:
            raise AlignmentError(f"week index {res.week_index}: no historical seasons available")
        z_base = collect_z(base, guidance, test, task, hist)
        fr_base = failure_rate(z_base, guidance.epsilon)
        rmse_base = _test_rmse(base, test, task, hist, guidance)
        model = res.model
        if model is not None and (model.arch != base.arch or model.normalizer != base.normalizer):
            raise AlignmentError(f"week index {res.week_index}: guided and baseline models differ "
                                 "in architecture or training split")
        if model is not None:
            z = collect_z(model, guidance, test, task, hist)
            fr, err = failure_rate(z, guidance.epsilon), _test_rmse(model, test, task, hist,
                                                                      guidance)
        else:
            fr = err = None
        rows.append(EvalRow(res.epiweek, fr, fr_base, guidance.delta, err, rmse_base, res.status))
    return EvalReport(rows, _summary(rows))


def _test_rmse(model, test, task, hist, guidance) -> float:
    if guidance.kind == REGIONAL_EQUITY:
        test = test.filter(regions=guidance.regions)
    return rmse(model, test, task, hist)


# ----------------------------------------------------------- external forecasts


@dataclass(frozen=True)
class ExternalForecast:
    team_id: str
    predictions: tuple[tuple[str, int, int, float], ...]  # (region, year, week, value)

    def __post_init__(self):
        for p in self.predictions:
            if not math.isfinite(p[3]):
                raise ValidationError(f"team {self.team_id}: non-finite prediction {p}")


def read_external(path: str | Path) -> list[ExternalForecast]:
    """Read ``team,region,year,week,value`` rows grouped by team."""
    by_team: dict[str, list] = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip().lower() for h in header] != ["team", "region", "year", "week", "value"]:
            raise ParseError(1, "expected header team,region,year,week,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(lineno, f"expected 5 fields, got {len(row)}")
            try:
                by_team[row[0]].append((row[1], int(row[2]), int(row[3]), float(row[4])))
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
    return [ExternalForecast(team, tuple(preds)) for team, preds in sorted(by_team.items())]


def _truth_lookup(truth: SeasonSet) -> dict:
    out = {}
    for s in truth:
        start = int(s.year_label.split("/")[0])
        for i, v in enumerate(s.values):
            week = epiweek_of(i, s.long_year)
            year = start if week >= 40 else start + 1
            prev = s.values[i - 1] if i > 0 else None
            out[(s.region, year, week)] = (v, prev)
    return out


def score_external(forecasts: Sequence[ExternalForecast], truth: SeasonSet, guidance: Guidance,
                   target: tuple[int, int] | None = None) -> dict[str, dict]:
    """Per-team RMSE and guidance Z for externally produced forecasts.

    ``target`` restricts scoring to one (year, week). Smoothness Z is the
    mean over regions of ``|forecast - previous observed week|``; regional
    equity Z is the absolute RMSE gap between the two regions. A team with no
    usable prediction is flagged with ``gap=True`` instead of failing the
    whole scoring.
    """
    lookup = _truth_lookup(truth)
    scores = {}
    for fc in forecasts:
        preds = [p for p in fc.predictions if target is None or (p[1], p[2]) == target]
        matched = [(p, lookup[(p[0], p[1], p[2])]) for p in preds if (p[0], p[1], p[2]) in lookup]
        if not matched:
            scores[fc.team_id] = {"rmse": None, "z_value": None, "gap": True, "n": 0}
            continue
        errs = np.array([p[3] - t for p, (t, _) in matched])
        entry = {"rmse": float(np.sqrt(np.mean(errs ** 2))),
                 "gap": len(matched) < len(preds), "n": len(matched)}
        if guidance.kind == REGIONAL_EQUITY:
            per = {}
            for r in guidance.regions:
                e = [p[3] - t for p, (t, _) in matched if p[0] == r]
                per[r] = float(np.sqrt(np.mean(np.square(e)))) if e else None
            vals = list(per.values())
            entry["z_value"] = None if None in vals else abs(vals[0] - vals[1])
            entry["gap"] = entry["gap"] or None in vals
        else:
            z = [abs(p[3] - prev) for p, (_, prev) in matched if prev is not None]
            entry["z_value"] = float(np.mean(z)) if z else None
        scores[fc.team_id] = entry
    return scores


def persistence_forecast(truth: SeasonSet, year: int, week: int, team_id: str = "persistence"
                         ) -> ExternalForecast:
    """Forecast that repeats the last observed value for every region."""
    lookup = _truth_lookup(truth)
    preds = [(region, y, w, prev) for (region, y, w), (_, prev) in sorted(lookup.items())
             if (y, w) == (year, week) and prev is not None]
    return ExternalForecast(team_id, tuple(preds))


# ---------------------------------------------------------------------- output


def _fmt(obj) -> str:
    """Deterministic JSON: sorted keys, floats with six decimals."""
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return '"nan"'
        if math.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        text = f"{x:.6f}"
        return "0.000000" if text == "-0.000000" else text
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = sorted(obj.items())
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return _fmt(obj) + "\n"


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(dumps(obj))


def emit_report(report: EvalReport, path: str | Path, format: str = "json") -> None:
    """Write ``report`` as bit-stable JSON or as CSV of the per-week rows."""
    if format == "json":
        write_json(report.to_dict(), path)
    elif format == "csv":
        names = [f.name for f in fields(EvalRow)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            for row in report.per_week:
                values = []
                for name in names:
                    v = getattr(row, name)
                    values.append("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v))
                writer.writerow(values)
    else:
        raise ValidationError(f"unknown report format {format!r}")


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
