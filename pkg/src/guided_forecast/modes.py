"""Direct and automatic guidance, and per-week sweeps over a season."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DataSplit, PredictionTask, SeasonSet, split
from .errors import GuidedForecastError, ValidationError
from .forecaster import ForecastModel, predict
from .guidance import REGIONAL_EQUITY, Guidance, collect_z
from .seldonian import (
    NSF,
    RunOutcome,
    SeldonianConfig,
    safety_test,
    train_candidate,
    upper_bound,
)

logger = logging.getLogger(__name__)

DEFAULT_GRID = (0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0)
FOUND = "found"


@dataclass(frozen=True)
class SplitParams:
    test_fraction: float = 0.2
    candidate_fraction: float = 0.5
    group_by_year: bool = False

    def apply(self, data: SeasonSet, seed: int) -> DataSplit:
        return split(data, self.test_fraction, self.candidate_fraction, seed, self.group_by_year)


def week_seed(base_seed: int, week_index: int) -> int:
    """Model-initialization seed for one week, derived from the base seed."""
    return int(np.random.SeedSequence([base_seed, week_index]).generate_state(1)[0])


def rmse(model: ForecastModel, seasons: SeasonSet, task: PredictionTask,
         historical: SeasonSet) -> float:
    """Raw-scale next-week RMSE over ``seasons``."""
    preds = predict(model, seasons, task, historical)
    truth = np.array([s.values[task.week_index] for s in seasons])
    return float(np.sqrt(np.mean((np.array([p.value for p in preds]) - truth) ** 2)))


def _metadata(config: SeldonianConfig, task: PredictionTask, data_split: DataSplit,
              seed: int, run) -> dict:
    meta = {
        "week_index": task.week_index,
        "epiweek": task.epiweek,
        "seed": seed,
        "split": data_split.describe(),
        "regions": sorted(data_split.training.regions),
        "arch": {"hidden": config.arch.hidden, "embed": config.arch.embed, "k": config.arch.k},
        "train": {"learning_rate": config.train.learning_rate, "epochs": config.train.epochs,
                  "beta_weight": config.train.beta_weight, "grad_clip": config.train.grad_clip,
                  "optimizer": config.train.optimizer},
        "lambda": config.lam,
        "inflation": config.inflation,
        "u_loss": run.u_loss,
        "normalizer": run.model.normalizer,
        "final_branch": run.branch,
    }
    if len(config.guidances) > 1:
        meta["multi_guidance_penalty"] = "worst violated guidance (max predicted bound)"
    if any(g.kind == REGIONAL_EQUITY for g in config.guidances):
        meta["regional_training"] = "shared parameters, region-specific histories"
    return meta


def direct_guidance(data: SeasonSet, guidances: Sequence[Guidance], config: SeldonianConfig,
                    task: PredictionTask, split_params: SplitParams = SplitParams(),
                    seed: int = 0, init_seed: int | None = None) -> RunOutcome:
    """Split, pick a candidate, run the safety test.

    ``seed`` drives the split; ``init_seed`` (default ``seed``) the model
    initialization.
    """
    config = config.replace(guidances=tuple(guidances))
    data_split = split_params.apply(data, seed)
    init_seed = seed if init_seed is None else init_seed
    run = train_candidate(data_split, config, task, seed=init_seed)
    outcome = safety_test(run.model, data_split, config, task, run.candidate_bounds)
    outcome.metadata = _metadata(config, task, data_split, seed, run)
    outcome.metadata["init_seed"] = init_seed
    outcome.split = data_split
    return outcome


def train_baseline(data_split: DataSplit, config: SeldonianConfig, task: PredictionTask,
                   init_seed: int) -> ForecastModel:
    """Unconstrained model: same split, arch, epochs and seed; no guidance, lambda 0."""
    base = config.replace(guidances=(), lam=0.0)
    return train_candidate(data_split, base, task, seed=init_seed).model


# ------------------------------------------------------------- automatic mode


@dataclass(frozen=True)
class AutoGuidanceSpec:
    kind: str
    delta: float
    epsilon_grid: tuple[float, ...] = DEFAULT_GRID
    performance_requirement: float = 1.0
    regions: tuple[str, str] | None = None
    quality: str = "rmse"
    window: int = 1

    def __post_init__(self):
        grid = tuple(float(e) for e in self.epsilon_grid)
        object.__setattr__(self, "epsilon_grid", grid)
        if not grid:
            raise ValidationError("epsilon grid must not be empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValidationError("epsilon grid must be strictly ascending")
        if any(e <= 0 for e in grid):
            raise ValidationError("epsilon grid values must be positive")
        if not self.performance_requirement > 0:
            raise ValidationError("performance requirement must be > 0")
        self.guidance(grid[0])  # validates kind, delta, regions

    def guidance(self, epsilon: float) -> Guidance:
        return Guidance(self.kind, epsilon, self.delta, self.regions, self.quality, self.window)


@dataclass
class TraceEntry:
    epsilon: float
    certified: bool
    rmse_ratio: float
    safety_bound: float | None

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "certified": self.certified,
                "rmse_ratio": self.rmse_ratio, "safety_bound": self.safety_bound}


@dataclass
class AutoOutcome:
    status: str
    epsilon: float | None
    model: ForecastModel | None
    trace: list[TraceEntry]
    outcome: RunOutcome | None = None
    baseline: ForecastModel | None = None
    baseline_rmse: float | None = None
    split: DataSplit | None = field(default=None, repr=False)
    metadata: dict = field(default_factory=dict)

    @property
    def found(self) -> bool:
        return self.status == FOUND

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "epsilon": self.epsilon,
            "baseline_rmse": self.baseline_rmse,
            "trace": [t.to_dict() for t in self.trace],
            "outcome": None if self.outcome is None else self.outcome.to_dict(),
            "metadata": self.metadata,
        }


def _safety_rmse(model: ForecastModel, data_split: DataSplit, task: PredictionTask) -> float:
    return rmse(model, data_split.safety, task, data_split.training)


def automatic_guidance(data: SeasonSet, spec: AutoGuidanceSpec, config_base: SeldonianConfig,
                       task: PredictionTask, split_params: SplitParams = SplitParams(),
                       seed: int = 0, init_seed: int | None = None) -> AutoOutcome:
    """Search the epsilon grid (ascending) for the first certified model whose
    safety-set RMSE is within ``performance_requirement`` of the unconstrained
    baseline's."""
    init_seed = seed if init_seed is None else init_seed
    data_split = split_params.apply(data, seed)
    baseline = train_baseline(data_split, config_base, task, init_seed)
    base_rmse = _safety_rmse(baseline, data_split, task)
    trace = []
    for eps in spec.epsilon_grid:
        outcome = direct_guidance(data, [spec.guidance(eps)], config_base, task, split_params,
                                  seed, init_seed)
        if outcome.certified:
            guided = _safety_rmse(outcome.model, data_split, task)
            ratio = guided / base_rmse if base_rmse > 0 else (1.0 if guided == 0 else math.inf)
        else:
            ratio = math.nan
        trace.append(TraceEntry(eps, outcome.certified, ratio, outcome.safety_bound))
        if outcome.certified and ratio <= spec.performance_requirement:
            return AutoOutcome(FOUND, eps, outcome.model, trace, outcome, baseline, base_rmse,
                               data_split, outcome.metadata)
    meta = {"week_index": task.week_index, "epiweek": task.epiweek, "seed": seed,
            "init_seed": init_seed, "split": data_split.describe()}
    return AutoOutcome(NSF, None, None, trace, None, baseline, base_rmse, data_split, meta)


def recheck_grid(model: ForecastModel, data_split: DataSplit, guidance: Guidance,
                 grid: Sequence[float], task: PredictionTask) -> list[tuple[float, bool, float]]:
    """Safety-test one fixed model against each epsilon in ``grid``.

    Test hook: with the model held fixed, certification is monotone in
    epsilon.
    """
    z = collect_z(model, guidance, data_split.safety, task, data_split.training)
    bound = upper_bound(z, guidance.delta)
    return [(eps, bound <= eps, bound) for eps in grid]


# ---------------------------------------------------------------- weekly sweep


@dataclass
class WeekResult:
    week_index: int
    epiweek: int
    outcome: RunOutcome | AutoOutcome | None
    baseline: ForecastModel | None = None
    error: str | None = None

    @property
    def status(self) -> str:
        if self.error is not None:
            return "error"
        if isinstance(self.outcome, AutoOutcome):
            return self.outcome.status
        return self.outcome.status

    @property
    def model(self) -> ForecastModel | None:
        return None if self.outcome is None else self.outcome.model

    def to_dict(self) -> dict:
        out = {"week_index": self.week_index, "epiweek": self.epiweek, "status": self.status}
        if self.error is not None:
            out["error"] = self.error
        else:
            out["outcome"] = self.outcome.to_dict()
        return out


def _run_week(args) -> WeekResult:
    data, target, config, week_index, mode, split_params, seed, with_baseline = args
    task = PredictionTask(week_index)
    init_seed = week_seed(seed, week_index)
    try:
        if mode == "auto":
            outcome = automatic_guidance(data, target, config, task, split_params, seed, init_seed)
            baseline = outcome.baseline
        else:
            outcome = direct_guidance(data, target, config, task, split_params, seed, init_seed)
            baseline = None
            if with_baseline:
                baseline = train_baseline(outcome.split, config, task, init_seed)
    except GuidedForecastError as exc:
        logger.warning("week %d failed: %s", week_index, exc)
        return WeekResult(week_index, task.epiweek, None, None, f"{type(exc).__name__}: {exc}")
    return WeekResult(week_index, task.epiweek, outcome, baseline)


def weekly_sweep(data: SeasonSet, target: Sequence[Guidance] | AutoGuidanceSpec,
                 config: SeldonianConfig, weeks: Sequence[int], mode: str = "direct",
                 split_params: SplitParams = SplitParams(), seed: int = 0,
                 with_baseline: bool = True, jobs: int = 1) -> list[WeekResult]:
    """Run one mode independently for every task week (``week_index`` values).

    The split is shared across weeks (it depends on ``seed`` only); each
    week's model seed is :func:`week_seed`. Errors in one week are recorded
    and do not stop the others.
    """
    if mode not in ("direct", "auto"):
        raise ValidationError(f"mode must be 'direct' or 'auto', got {mode!r}")
    if mode == "auto" and not isinstance(target, AutoGuidanceSpec):
        raise ValidationError("auto mode needs an AutoGuidanceSpec")
    if mode == "direct" and isinstance(target, AutoGuidanceSpec):
        raise ValidationError("direct mode needs a list of guidances")
    weeks = list(weeks)
    for w in weeks:
        PredictionTask(w)
    if mode == "direct":
        target = tuple(target)
    jobs_args = [(data, target, config, w, mode, split_params, seed, with_baseline)
                 for w in weeks]
    if jobs > 1 and len(weeks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_week, jobs_args))
    else:
        results = [_run_week(a) for a in jobs_args]
    return sorted(results, key=lambda r: r.week_index)


def parse_weeks(spec: str) -> list[int]:
    """Turn ``"40:16"`` (epiweeks of the last observation, inclusive) into
    task week indices.

    Week 17 closes the season and has no following week to forecast, so an
    end of 17 is read as 16; ``"40:17"`` therefore covers the whole season.
    """
    try:
        first, last = (int(p) for p in spec.split(":"))
    except ValueError:
        raise ValidationError(f"weeks must look like 40:16, got {spec!r}") from None
    if last == 17:
        logger.info("week 17 has no following week to forecast; sweeping to week 16")
        last = 16
    try:
        start = PredictionTask.from_epiweek(first).week_index
        stop = PredictionTask.from_epiweek(last).week_index
    except (IndexError, ValidationError) as exc:
        raise ValidationError(f"bad week range {spec!r}: {exc}") from None
    if stop < start:
        raise ValidationError(f"week range {spec!r} runs backwards")
    return list(range(start, stop + 1))
