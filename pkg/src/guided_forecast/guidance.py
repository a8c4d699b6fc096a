"""Expert guidance: behavioral constraints and their per-instance deviations Z.

Two kinds are supported:

* smoothness, ``Z = |y_hat_{t+1} - Y_t|``: the forecast should stay close to
  the last observation;
* regional equity, ``Z = |mu(R1) - mu(R2)|``: forecast quality (RMSE by
  default) should be similar in two regions.

Z values are always on the raw wILI scale so ``epsilon`` is in wILI units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import PredictionTask, SeasonSet
from .errors import GuidedForecastError, ValidationError
from .forecaster import Batch, ForecastModel, Prediction, backward_batch, forward_batch, make_batch

SMOOTHNESS = "smoothness"
REGIONAL_EQUITY = "regional_equity"
KINDS = (SMOOTHNESS, REGIONAL_EQUITY)
QUALITY_METRICS = ("rmse", "mae")


@dataclass(frozen=True)
class Guidance:
    """A constraint ``Pr(g(theta) <= epsilon) >= 1 - delta``.

    ``window`` only matters for regional equity: the number of consecutive
    target weeks (ending at the task's target) pooled into each region's
    quality metric.
    """

    kind: str
    epsilon: float
    delta: float
    regions: tuple[str, str] | None = None
    quality: str = "rmse"
    window: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown guidance kind {self.kind!r}")
        if not self.epsilon >= 0:
            raise ValidationError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValidationError(f"delta must be in (0, 1), got {self.delta}")
        if self.kind == REGIONAL_EQUITY:
            if self.regions is None or len(self.regions) != 2:
                raise ValidationError("regional equity needs exactly two regions")
            r1, r2 = self.regions
            if r1 == r2:
                raise ValidationError("regional equity needs two different regions")
            object.__setattr__(self, "regions", (str(r1), str(r2)))
        elif self.regions is not None:
            raise ValidationError("regions are only allowed for regional equity")
        if self.quality not in QUALITY_METRICS:
            raise ValidationError(f"unknown quality metric {self.quality!r}")
        if self.window < 1:
            raise ValidationError("window must be >= 1")

    def with_epsilon(self, epsilon: float) -> "Guidance":
        return Guidance(self.kind, epsilon, self.delta, self.regions, self.quality, self.window)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "epsilon": self.epsilon, "delta": self.delta}
        if self.regions is not None:
            out["regions"] = list(self.regions)
        if self.quality != "rmse":
            out["quality"] = self.quality
        if self.window != 1:
            out["window"] = self.window
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "Guidance":
        unknown = set(obj) - {"kind", "epsilon", "delta", "regions", "quality", "window"}
        if unknown:
            raise ValidationError(f"unknown guidance fields {sorted(unknown)}")
        try:
            regions = obj.get("regions")
            return cls(
                kind=obj["kind"],
                epsilon=float(obj.get("epsilon", math.inf)),
                delta=float(obj["delta"]),
                regions=tuple(regions) if regions is not None else None,
                quality=obj.get("quality", "rmse"),
                window=int(obj.get("window", 1)),
            )
        except KeyError as exc:
            raise ValidationError(f"guidance is missing field {exc}") from None

    def label(self) -> str:
        if self.kind == REGIONAL_EQUITY:
            return f"{self.kind}[{self.regions[0]},{self.regions[1]}]"
        return self.kind


def parse_guidances(text_or_path: str) -> list[Guidance]:
    """Parse a guidance JSON object or list, inline or from a file."""
    path = Path(text_or_path)
    text = path.read_text() if not text_or_path.lstrip().startswith(("{", "[")) and path.exists() \
        else text_or_path
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"guidance is not valid JSON: {exc}") from None
    items = obj if isinstance(obj, list) else [obj]
    return [Guidance.from_dict(item) for item in items]


@dataclass(frozen=True)
class ZSample:
    value: float
    week_index: int
    provenance: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.value >= 0:
            raise ValidationError(f"Z must be >= 0, got {self.value}")


def z_smooth(prediction: Prediction, last_observed: float) -> ZSample:
    """Deviation of the forecast from the last observed value."""
    prov = prediction.season_ref or ()
    return ZSample(abs(prediction.value - last_observed), prediction.week_index,
                   tuple(reversed(prov)))


def _quality(errors: np.ndarray, quality: str) -> float:
    if quality == "rmse":
        return float(np.sqrt(np.mean(errors ** 2)))
    return float(np.mean(np.abs(errors)))


# ------------------------------------------------------- vectorized Z builders

ZFunction = Callable[[np.ndarray], "tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]"]


class SmoothnessZ:
    """Z per season for one task: ``|y_hat * N - Y_t|``."""

    def __init__(self, data: SeasonSet, task: PredictionTask, historical: SeasonSet,
                 model: ForecastModel):
        self.arch = model.arch
        self.batch = make_batch(data, task.week_index, historical, model.normalizer,
                                with_target=False)
        self.task = task
        self.provenance = [(region, year) for year, region in self.batch.refs]

    def __call__(self, theta: np.ndarray, out=None):
        batch = self.batch
        if out is None:
            out = forward_batch(theta, self.arch, batch)
        dev = out.y * batch.normalizer - batch.last_raw
        z = np.abs(dev)

        def vjp(g_z: np.ndarray) -> np.ndarray:
            g_y = g_z * np.sign(dev) * batch.normalizer
            return backward_batch(theta, self.arch, batch, out, g_y)

        return z, vjp


class RegionalZ:
    """Z per year shared by both regions: ``|mu(R1) - mu(R2)|``.

    Each region's quality ``mu`` pools the errors of its seasons in that
    year over the last ``window`` target weeks.
    """

    def __init__(self, data: SeasonSet, task: PredictionTask, historical: SeasonSet,
                 model: ForecastModel, regions: tuple[str, str], quality: str = "rmse",
                 window: int = 1, by_year: bool = True):
        self.arch = model.arch
        self.quality = quality
        self.regions = regions
        for r in regions:
            if r not in data.regions:
                raise GuidedForecastError(f"region {r!r} has no seasons in the data")
        seasons = [s for s in data if s.region in regions]
        if by_year:
            years = [y for y in sorted({s.year_label for s in seasons})
                     if all(any(s.year_label == y and s.region == r for s in seasons)
                            for r in regions)]
            if not years:
                raise GuidedForecastError(f"regions {regions} share no seasons")
            seasons = [s for s in seasons if s.year_label in years]
            self.groups = [(y, [i for i, s in enumerate(seasons) if s.year_label == y
                                and s.region == r]) for y in years for r in regions]
        else:
            years = ["*"]
            self.groups = [("*", [i for i, s in enumerate(seasons) if s.region == r])
                           for r in regions]
        self.years = years
        lengths = [task.week_index - lag for lag in range(window)]
        if lengths[-1] < 1:
            raise GuidedForecastError(f"window {window} reaches before the first week")
        self.batches: list[Batch] = [
            make_batch(seasons, length, historical, model.normalizer) for length in lengths
        ]
        self.task = task

    def __call__(self, theta: np.ndarray, out=None):
        outs = [forward_batch(theta, self.arch, b) for b in self.batches]
        norm = self.batches[0].normalizer
        err = np.stack([(o.y - b.target) * norm for o, b in zip(outs, self.batches)])  # (W, n)
        mus, dmus = [], []
        for _, rows in self.groups:
            e = err[:, rows]
            g = np.zeros_like(err)
            if self.quality == "rmse":
                mu = float(np.sqrt(np.mean(e ** 2)))
                if mu > 0:
                    g[:, rows] = e / (e.size * mu)
            else:
                mu = float(np.mean(np.abs(e)))
                g[:, rows] = np.sign(e) / e.size
            mus.append(mu)
            dmus.append(g)
        mus = np.array(mus).reshape(len(self.years), 2)
        diff = mus[:, 0] - mus[:, 1]
        z = np.abs(diff)

        def vjp(g_z: np.ndarray) -> np.ndarray:
            s = g_z * np.sign(diff)
            g_err = np.zeros_like(err)
            for j in range(len(self.years)):
                g_err += s[j] * (dmus[2 * j] - dmus[2 * j + 1])
            total = np.zeros_like(theta)
            for b, o, ge in zip(self.batches, outs, g_err):
                total += backward_batch(theta, self.arch, b, o, ge * norm)
            return total

        return z, vjp


def z_builder(model: ForecastModel, guidance: Guidance, data: SeasonSet, task: PredictionTask,
              historical: SeasonSet):
    if guidance.kind == SMOOTHNESS:
        return SmoothnessZ(data, task, historical, model)
    return RegionalZ(data, task, historical, model, guidance.regions, guidance.quality,
                     guidance.window)


# --------------------------------------------------------------- public ops


def z_regional(model: ForecastModel, week: PredictionTask, data: SeasonSet,
               quality: str = "rmse", pair: tuple[str, str] = ("", ""),
               historical: SeasonSet | None = None, window: int = 1) -> ZSample:
    """Difference in forecast quality between two regions at one task week.

    ``quality`` pools every prediction of a region present in ``data``.
    """
    historical = data if historical is None else historical
    builder = RegionalZ(data, week, historical, model, tuple(pair), quality, window,
                        by_year=False)
    z, _ = builder(model.theta)
    years = tuple(sorted({s.year_label for s in data if s.region in pair}))
    return ZSample(float(z[0]), week.week_index, tuple(pair) + years)


def collect_z(model: ForecastModel, guidance: Guidance, data: SeasonSet, task: PredictionTask,
              historical: SeasonSet | None = None) -> list[ZSample]:
    """One Z per season (smoothness) or per shared year (regional equity).

    Samples are ordered by (year_label, region).
    """
    if len(data) == 0:
        raise GuidedForecastError("cannot collect Z from an empty season set")
    historical = data if historical is None else historical
    builder = z_builder(model, guidance, data, task, historical)
    z, _ = builder(model.theta)
    if guidance.kind == SMOOTHNESS:
        return [ZSample(float(v), task.week_index, prov)
                for v, prov in zip(z, builder.provenance)]
    return [ZSample(float(v), task.week_index, tuple(guidance.regions) + (year,))
            for v, year in zip(z, builder.years)]


def _values(z: Iterable) -> np.ndarray:
    return np.array([s.value if isinstance(s, ZSample) else float(s) for s in z], dtype=float)


def failure_rate(z: Sequence, epsilon: float) -> float:
    """Fraction of samples with ``Z > epsilon`` (``Z == epsilon`` is fine)."""
    values = _values(z)
    if values.size == 0:
        raise GuidedForecastError("failure rate of an empty sample")
    return float(np.mean(values > epsilon))
