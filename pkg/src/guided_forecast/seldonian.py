"""Seldonian training: switched candidate loss, confidence bounds, safety test.

Training data is split into a candidate part, used to pick a model with a
loss that penalizes predicted constraint violations, and a held-out safety
part on which a one-sided Student-t upper bound of ``E[Z]`` must not exceed
``epsilon``. Otherwise the run returns NSF ("No Solution Found").
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DataSplit, PredictionTask, SeasonSet
from .errors import GuidedForecastError, SizingError, ValidationError
from .forecaster import (
    Arch,
    ForecastModel,
    TaskObjective,
    TrainConfig,
    backward_batch,
    fit_normalizer,
    init_model,
    make_batch,
    train,
)
from .guidance import REGIONAL_EQUITY, Guidance, SmoothnessZ, _values, collect_z, z_builder

logger = logging.getLogger(__name__)

CERTIFIED = "certified"
NSF = "nsf"

WARMUP_EPOCHS = 5
U_LOSS_FACTOR = 2.0


# ------------------------------------------------------------------ t quantile


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 500):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: float) -> float:
    x = dof / (dof + t * t)
    tail = 0.5 * betainc(dof / 2.0, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


@functools.lru_cache(maxsize=4096)
def t_quantile(p: float, dof: int) -> float:
    """Student-t quantile by bisection on the incomplete beta function.

    Solves ``I_x(dof/2, 1/2) = 2 (1 - p)`` for ``x`` to 1e-10 (relative to
    the nearer end of [0, 1], which keeps both the far tail and quantiles
    near the median accurate), then maps
    ``x`` back to ``t = sqrt(dof (1 - x) / x)``.
    """
    if not 0 < p < 1:
        raise ValidationError(f"quantile level must be in (0, 1), got {p}")
    if dof < 1:
        raise ValidationError(f"degrees of freedom must be >= 1, got {dof}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, dof)
    target = 2.0 * (1.0 - p)
    lo, hi = 0.0, 1.0
    for _ in range(400):
        if hi - lo <= 1e-10 * min(hi, 1.0 - lo):
            break
        mid = 0.5 * (lo + hi)
        if betainc(dof / 2.0, 0.5, mid) < target:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    return math.sqrt(dof * (1.0 - x) / x)


# --------------------------------------------------------------------- bounds


@dataclass(frozen=True)
class BoundParams:
    delta: float
    safety_size: int
    inflation: float = 2.0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValidationError(f"delta must be in (0, 1), got {self.delta}")
        if self.safety_size < 2:
            raise SizingError(f"safety set must yield >= 2 Z samples, got {self.safety_size}")
        if self.inflation < 1:
            raise ValidationError(f"inflation must be >= 1, got {self.inflation}")


def _bound_and_grad(z: np.ndarray, delta: float, size: int, inflation: float):
    """``mean + inflation * s / sqrt(size) * t_{1-delta, size-1}`` and its gradient in z."""
    m = z.size
    if m < 2:
        raise SizingError(f"need at least 2 Z samples for a bound, got {m}")
    mean = float(z.mean())
    s = float(z.std(ddof=1))
    g = np.full(m, 1.0 / m)
    if s == 0.0:
        return mean, g
    scale = inflation * t_quantile(1.0 - delta, size - 1) / math.sqrt(size)
    g += scale * (z - mean) / ((m - 1) * s)
    return mean + scale * s, g


def upper_bound(z: Sequence, delta: float) -> float:
    """One-sided (1 - delta) Student-t upper confidence bound on E[Z]."""
    values = _values(z)
    return _bound_and_grad(values, delta, values.size, 1.0)[0]


def predicted_bound(z: Sequence, params: BoundParams) -> float:
    """Anticipated safety-test bound from candidate-set samples.

    Uses the safety set's size in the interval and widens it by
    ``params.inflation``.
    """
    values = _values(z)
    return _bound_and_grad(values, params.delta, params.safety_size, params.inflation)[0]


# ---------------------------------------------------------------------- config


@dataclass(frozen=True)
class SeldonianConfig:
    """``u_loss=None`` estimates U_L from a short unconstrained warmup."""

    guidances: tuple[Guidance, ...] = ()
    lam: float = 1.0
    u_loss: float | None = None
    inflation: float = 2.0
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: Arch = field(default_factory=Arch)

    def __post_init__(self):
        object.__setattr__(self, "guidances", tuple(self.guidances))
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.u_loss is not None and not self.u_loss > 0:
            raise ValidationError("u_loss must be > 0")
        if self.inflation < 1:
            raise ValidationError("inflation must be >= 1")

    def replace(self, **changes) -> "SeldonianConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class GuidanceReport:
    guidance: Guidance
    bound: float
    candidate_bound: float | None = None
    suggestions: list[str] = field(default_factory=list)

    @property
    def epsilon(self) -> float:
        return self.guidance.epsilon

    @property
    def margin(self) -> float:
        return self.bound - self.guidance.epsilon

    @property
    def passed(self) -> bool:
        return self.bound <= self.guidance.epsilon

    def to_dict(self) -> dict:
        return {
            "guidance": self.guidance.label(),
            "bound": self.bound,
            "candidate_bound": self.candidate_bound,
            "epsilon": self.epsilon,
            "delta": self.guidance.delta,
            "margin": self.margin,
            "suggestions": list(self.suggestions),
        }


@dataclass
class RunOutcome:
    status: str
    model: ForecastModel | None
    safety_bound: float | None
    candidate_bound: float | None
    reports: list[GuidanceReport]
    metadata: dict = field(default_factory=dict)
    split: DataSplit | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.status == CERTIFIED:
            if self.model is None or not all(r.passed for r in self.reports):
                raise GuidedForecastError("certified outcome without a passing model")
        elif self.status == NSF:
            if self.model is not None:
                raise GuidedForecastError("NSF outcome must not carry a model")
            if not self.feedback:
                raise GuidedForecastError("NSF outcome needs feedback")
        else:
            raise ValidationError(f"unknown status {self.status!r}")

    @property
    def certified(self) -> bool:
        return self.status == CERTIFIED

    @property
    def feedback(self) -> list[dict]:
        """Per-guidance bound/epsilon/margin records; suggestions only on NSF."""
        return [r.to_dict() for r in self.reports]

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "safety_bound": self.safety_bound,
            "candidate_bound": self.candidate_bound,
            "feedback": self.feedback,
            "metadata": self.metadata,
        }


# -------------------------------------------------------------- candidate loss


def z_count(guidance: Guidance, data: SeasonSet) -> int:
    """How many Z samples ``data`` yields for ``guidance``."""
    if guidance.kind == REGIONAL_EQUITY:
        r1, r2 = guidance.regions
        return len({s.year_label for s in data if s.region == r1}
                   & {s.year_label for s in data if s.region == r2})
    return len(data)


class CandidateObjective:
    """Switched candidate loss over the candidate set.

    If every predicted bound is within its epsilon the loss is the task loss
    plus ``lam`` times the mean Z (averaged per guidance, then across
    guidances). Otherwise it is ``u_loss + U_hat + (lam - 1) * epsilon`` for
    the worst violated guidance.
    """

    def __init__(self, model: ForecastModel, d_c: SeasonSet, config: SeldonianConfig,
                 task: PredictionTask, historical: SeasonSet, safety_sizes: Sequence[int],
                 u_loss: float):
        if len(d_c) == 0:
            raise GuidedForecastError("candidate set is empty")
        self.config = config
        self.arch = model.arch
        batch = make_batch(d_c, task.week_index, historical, model.normalizer)
        self.task_objective = TaskObjective(batch, model.arch, config.train.beta_weight)
        self.builders = [z_builder(model, g, d_c, task, historical) for g in config.guidances]
        self.params = [BoundParams(g.delta, n, config.inflation)
                       for g, n in zip(config.guidances, safety_sizes)]
        self.u_loss = u_loss
        self.last_branch = None
        self.last_bounds: list[float] = []

    def evaluate(self, theta: np.ndarray, need_grad: bool = True):
        out, task_value, g_y, g_beta = self.task_objective.parts(theta)
        zs, vjps, bounds, bound_grads = [], [], [], []
        for g, builder, params in zip(self.config.guidances, self.builders, self.params):
            share = out if isinstance(builder, SmoothnessZ) else None
            z, vjp = builder(theta, share)
            b, gb = _bound_and_grad(z, params.delta, params.safety_size, params.inflation)
            zs.append(z)
            vjps.append(vjp)
            bounds.append(b)
            bound_grads.append(gb)
        self.last_bounds = bounds
        violated = [i for i, g in enumerate(self.config.guidances) if bounds[i] > g.epsilon]
        lam = self.config.lam
        if not violated:
            self.last_branch = "task"
            n_g = len(zs)
            value = task_value + (lam * sum(float(z.mean()) for z in zs) / n_g if n_g else 0.0)
            if not need_grad:
                return value, None
            tb = self.task_objective.batch
            grad = backward_batch(theta, self.arch, tb, out, g_y, g_beta)
            if lam > 0:
                for z, vjp in zip(zs, vjps):
                    grad += vjp(np.full(z.size, lam / (n_g * z.size)))
            return value, grad
        self.last_branch = "penalty"
        worst = max(violated, key=lambda i: bounds[i])
        eps = self.config.guidances[worst].epsilon
        value = self.u_loss + bounds[worst] + (lam - 1.0) * eps
        if not need_grad:
            return value, None
        return value, vjps[worst](bound_grads[worst])

    def __call__(self, theta: np.ndarray):
        return self.evaluate(theta)


def candidate_loss(model: ForecastModel, d_c: SeasonSet, config: SeldonianConfig,
                   task: PredictionTask, historical: SeasonSet,
                   safety_sizes: Sequence[int] | None = None,
                   u_loss: float | None = None) -> float:
    """Value of the switched candidate loss at ``model``.

    ``safety_sizes`` defaults to the candidate set's own Z counts and
    ``u_loss`` to ``config.u_loss``.
    """
    if safety_sizes is None:
        safety_sizes = [z_count(g, d_c) for g in config.guidances]
    u = config.u_loss if u_loss is None else u_loss
    if u is None:
        raise ValidationError("u_loss must be given when the config does not fix it")
    objective = CandidateObjective(model, d_c, config, task, historical, safety_sizes, u)
    return objective.evaluate(model.theta, need_grad=False)[0]


# ----------------------------------------------------------- candidate search


@dataclass
class CandidateRun:
    model: ForecastModel
    u_loss: float
    losses: list[float]
    candidate_bounds: list[float]
    branch: str


def _historical(split: DataSplit) -> SeasonSet:
    return split.training


def estimate_u_loss(model: ForecastModel, objective: TaskObjective, config: TrainConfig) -> float:
    """Twice the largest task loss seen in a short unconstrained warmup."""
    warm = dataclasses.replace(config, epochs=WARMUP_EPOCHS)
    _, history = train(model, objective, warm)
    return U_LOSS_FACTOR * max(history)


def train_candidate(split: DataSplit, config: SeldonianConfig, task: PredictionTask,
                    arch: Arch | None = None, seed: int | None = None) -> CandidateRun:
    """Minimize the candidate loss on the candidate set, keeping the best epoch."""
    arch = config.arch if arch is None else arch
    seed = config.train.seed if seed is None else seed
    historical = _historical(split)
    model = init_model(arch, seed, normalizer=fit_normalizer(split.training))
    safety_sizes = [z_count(g, split.safety) for g in config.guidances]
    for g, n in zip(config.guidances, safety_sizes):
        if n < 2:
            raise SizingError(f"safety set yields {n} Z samples for {g.label()}, need >= 2")
    task_batch = make_batch(split.candidate, task.week_index, historical, model.normalizer)
    task_objective = TaskObjective(task_batch, arch, config.train.beta_weight)
    u_loss = config.u_loss if config.u_loss is not None else estimate_u_loss(
        model, task_objective, config.train)
    objective = CandidateObjective(model, split.candidate, config, task, historical,
                                   safety_sizes, u_loss)
    best, losses = train(model, objective, config.train)
    objective.evaluate(best.theta, need_grad=False)
    return CandidateRun(best, u_loss, losses, list(objective.last_bounds), objective.last_branch)


def select_candidate(split: DataSplit, config: SeldonianConfig, task: PredictionTask,
                     arch: Arch | None = None, seed: int | None = None) -> ForecastModel:
    return train_candidate(split, config, task, arch, seed).model


# ----------------------------------------------------------------- safety test


def _suggestions(report: GuidanceReport, safety_n: int) -> list[str]:
    out = [f"raise epsilon to at least {report.bound:.4f}"]
    if report.guidance.delta < 0.5:
        out.append(f"raise delta above {report.guidance.delta:g} (accept lower confidence)")
    out.append(f"enlarge the safety set (currently {safety_n} Z samples)")
    if report.candidate_bound is not None and report.candidate_bound > report.epsilon:
        out.append("change the model or exclude historical seasons: the candidate "
                   "already violates the constraint on the candidate set")
    return out


def safety_test(candidate: ForecastModel, split: DataSplit, config: SeldonianConfig,
                task: PredictionTask, candidate_bounds: Sequence[float] | None = None) -> RunOutcome:
    """Certify ``candidate`` on the safety set or return NSF with feedback."""
    if len(split.safety) == 0:
        raise SizingError("safety set is empty")
    historical = _historical(split)
    reports = []
    for i, g in enumerate(config.guidances):
        z = collect_z(candidate, g, split.safety, task, historical)
        if len(z) < 2:
            raise SizingError(f"safety set yields {len(z)} Z samples for {g.label()}, need >= 2")
        cb = None if candidate_bounds is None else candidate_bounds[i]
        reports.append(GuidanceReport(g, upper_bound(z, g.delta), cb))
    certified = all(r.passed for r in reports)
    if not certified:
        for r in reports:
            if not r.passed:
                r.suggestions = _suggestions(r, z_count(r.guidance, split.safety))
    worst = max(reports, key=lambda r: r.margin) if reports else None
    return RunOutcome(
        status=CERTIFIED if certified else NSF,
        model=candidate if certified else None,
        safety_bound=None if worst is None else worst.bound,
        candidate_bound=None if worst is None else worst.candidate_bound,
        reports=reports,
    )
