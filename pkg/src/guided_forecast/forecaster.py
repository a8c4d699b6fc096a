"""Recurrent next-week forecaster with a season-similarity embedding.

The network has three parts:

* an Elman encoder ``r_t = tanh(W x_t + U r_{t-1} + b)`` over the normalized
  history of the current season;
* a similarity module: historical seasons and the current history are each
  summarized by four statistics (mean, max, argmax/length, last value) and
  mapped affinely into an embedding space; the current embedding attends
  (softmax over negative squared distance) to its ``k`` nearest historical
  embeddings;
* a linear decoder over ``[r_w ; e]``.

The internal loss ``beta`` is the squared distance between the current
embedding and the attended one.

Everything is batched over rows that share a prefix length, with a
hand-written backward pass. Losses are callables ``theta -> (value, grad)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import PredictionTask, Season, SeasonSet
from .errors import DivergenceError, GuidedForecastError, ValidationError

logger = logging.getLogger(__name__)

N_STATS = 4
CHECKPOINT_HEADER = "guided-forecast-model v1"

LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass(frozen=True)
class Arch:
    hidden: int = 8
    embed: int = 4
    k: int = 5

    def __post_init__(self):
        if self.hidden < 1 or self.embed < 1 or self.k < 1:
            raise ValidationError(f"hidden, embed and k must be >= 1, got {self}")

    @property
    def n_params(self) -> int:
        h, d = self.hidden, self.embed
        return h * h + 3 * h + 11 * d + 1

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``theta`` by parameter name."""
        h, d = self.hidden, self.embed
        shapes = [
            ("W_in", (h,)), ("W_rec", (h, h)), ("b_rec", (h,)),
            ("A_hist", (d, N_STATS)), ("a_hist", (d,)),
            ("A_cur", (d, N_STATS)), ("a_cur", (d,)),
            ("w_out", (h + d,)), ("b_out", ()),
        ]
        out, pos = {}, 0
        for name, shape in shapes:
            size = int(np.prod(shape)) if shape else 1
            out[name] = theta[pos:pos + size].reshape(shape)
            pos += size
        return out


def _fan_ins(arch: Arch) -> dict[str, int]:
    h, d = arch.hidden, arch.embed
    return {"W_in": 1, "W_rec": h, "b_rec": h, "A_hist": N_STATS, "a_hist": N_STATS,
            "A_cur": N_STATS, "a_cur": N_STATS, "w_out": h + d, "b_out": h + d}


@dataclass(frozen=True, eq=False)
class ForecastModel:
    theta: np.ndarray
    arch: Arch
    normalizer: float = 1.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if theta.shape != (self.arch.n_params,):
            raise ValidationError(
                f"theta has {theta.size} entries, arch {self.arch} needs {self.arch.n_params}"
            )
        if not self.normalizer > 0:
            raise ValidationError(f"normalizer must be > 0, got {self.normalizer}")

    def with_theta(self, theta: np.ndarray) -> "ForecastModel":
        return replace(self, theta=theta)

    def params(self) -> dict[str, np.ndarray]:
        return self.arch.unpack(self.theta)

    def __eq__(self, other):
        if not isinstance(other, ForecastModel):
            return NotImplemented
        return (self.arch == other.arch and self.normalizer == other.normalizer
                and np.array_equal(self.theta, other.theta))


@dataclass(frozen=True)
class TrainConfig:
    """Full-batch training options.

    ``optimizer`` is ``"adam"`` (default) or ``"sgd"``; both clip the
    gradient to ``grad_clip`` in L2 norm first.
    """

    learning_rate: float = 0.01
    epochs: int = 300
    beta_weight: float = 0.1
    seed: int = 0
    grad_clip: float = 5.0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.beta_weight < 0:
            raise ValidationError("beta_weight must be >= 0")
        if not self.grad_clip > 0:
            raise ValidationError("grad_clip must be > 0")


@dataclass(frozen=True)
class Prediction:
    value: float
    week_index: int
    season_ref: tuple[str, str] | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DivergenceError(f"non-finite prediction for {self.season_ref}")


def init_model(arch: Arch, seed: int = 0, normalizer: float = 1.0) -> ForecastModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization per weight block."""
    rng = np.random.default_rng(seed)
    theta = np.empty(arch.n_params)
    views = arch.unpack(theta)
    for name, fan_in in _fan_ins(arch).items():
        bound = 1.0 / math.sqrt(fan_in)
        views[name][...] = rng.uniform(-bound, bound, size=views[name].shape)
    return ForecastModel(theta, arch, normalizer)


def fit_normalizer(training: SeasonSet) -> float:
    """Scale used to map raw wILI into [0, 1]: the training maximum."""
    top = training.max_value()
    return top if top > 0 else 1.0


# ------------------------------------------------------------------ batching


def season_stats(values: np.ndarray) -> np.ndarray:
    """Rows of (mean, max, argmax/length, last) for a 2-D array of series."""
    values = np.atleast_2d(values)
    n = values.shape[1]
    return np.stack([
        values.mean(axis=1),
        values.max(axis=1),
        values.argmax(axis=1) / n,
        values[:, -1],
    ], axis=1)


@dataclass
class Batch:
    """Rows sharing one prefix length, prepared for a fixed normalizer.

    ``x`` holds normalized histories, ``target`` the normalized next value
    (NaN when unknown), ``last_raw`` the last observed raw value.
    """

    x: np.ndarray
    target: np.ndarray
    last_raw: np.ndarray
    pool_stats: np.ndarray
    exclude: np.ndarray
    refs: list[tuple[str, str]]
    pool_refs: list[tuple[str, str]]
    normalizer: float
    week_index: int

    @property
    def size(self) -> int:
        return self.x.shape[0]


def make_pool(historical: SeasonSet, normalizer: float) -> tuple[np.ndarray, list]:
    seasons = list(historical)  # already sorted by (year_label, region)
    if not seasons:
        return np.zeros((0, N_STATS)), []
    length = min(len(s) for s in seasons)
    arr = np.array([s.values[:length] for s in seasons]) / normalizer
    return season_stats(arr), [s.key for s in seasons]


def make_batch(seasons: SeasonSet | Sequence[Season], week_index: int, historical: SeasonSet,
               normalizer: float, with_target: bool = True) -> Batch:
    """Build a batch forecasting position ``week_index`` of each season.

    A season never attends to itself: its own key is masked out of the pool.
    """
    seasons = list(seasons)
    if not seasons:
        raise GuidedForecastError("cannot build a batch from no seasons")
    for s in seasons:
        needed = week_index + 1 if with_target else week_index
        if len(s) < needed:
            raise IndexError(f"season {s.key} too short for week index {week_index}")
    pool_stats, pool_refs = make_pool(historical, normalizer)
    refs = [s.key for s in seasons]
    exclude = np.array([[p == r for p in pool_refs] for r in refs], dtype=bool).reshape(
        len(refs), len(pool_refs))
    if pool_stats.shape[0] == 0 or exclude.all(axis=1).any():
        raise GuidedForecastError("historical pool is empty for at least one season")
    raw = np.array([s.values[:week_index] for s in seasons], dtype=float)
    target = np.array(
        [s.values[week_index] if len(s) > week_index else np.nan for s in seasons], dtype=float)
    return Batch(
        x=raw / normalizer,
        target=target / normalizer,
        last_raw=raw[:, -1].copy(),
        pool_stats=pool_stats,
        exclude=exclude,
        refs=refs,
        pool_refs=pool_refs,
        normalizer=normalizer,
        week_index=week_index,
    )


# ------------------------------------------------------------- forward/backward


@dataclass
class Outputs:
    y: np.ndarray          # normalized predictions, shape (n,)
    cur: np.ndarray        # current-history embeddings (n, d)
    att: np.ndarray        # attended embeddings (n, d)
    beta: np.ndarray       # per-row ||cur - att||^2
    cache: dict = field(repr=False, default_factory=dict)

    def raw(self, normalizer: float) -> np.ndarray:
        return self.y * normalizer


def forward_batch(theta: np.ndarray, arch: Arch, batch: Batch) -> Outputs:
    p = arch.unpack(theta)
    n, w = batch.x.shape
    h = arch.hidden

    states = np.zeros((w + 1, n, h))
    for t in range(w):
        pre = np.outer(batch.x[:, t], p["W_in"]) + states[t] @ p["W_rec"].T + p["b_rec"]
        states[t + 1] = np.tanh(pre)
    r = states[w]

    hist = batch.pool_stats @ p["A_hist"].T + p["a_hist"]          # (P, d)
    f_cur = season_stats(batch.x)
    cur = f_cur @ p["A_cur"].T + p["a_cur"]                          # (n, d)
    diff = cur[:, None, :] - hist[None, :, :]                        # (n, P, d)
    dist = np.einsum("npd,npd->np", diff, diff)
    masked = np.where(batch.exclude, np.inf, dist)
    k = min(arch.k, int((~batch.exclude).sum(axis=1).min()))
    # stable sort keeps the pool's (year_label, region) order on ties
    idx = np.argsort(masked, axis=1, kind="stable")[:, :k]          # (n, k)
    d_sel = np.take_along_axis(dist, idx, axis=1)
    logits = -(d_sel - d_sel.min(axis=1, keepdims=True))
    wts = np.exp(logits)
    wts /= wts.sum(axis=1, keepdims=True)
    h_sel = hist[idx]                                                 # (n, k, d)
    att = np.einsum("nk,nkd->nd", wts, h_sel)

    z = np.concatenate([r, att], axis=1)
    y = z @ p["w_out"] + p["b_out"]
    gap = cur - att
    beta = np.einsum("nd,nd->n", gap, gap)
    cache = dict(states=states, hist=hist, f_cur=f_cur, cur=cur, idx=idx, wts=wts,
                 h_sel=h_sel, z=z, gap=gap)
    return Outputs(y, cur, att, beta, cache)


def backward_batch(theta: np.ndarray, arch: Arch, batch: Batch, out: Outputs,
                   g_y: np.ndarray, g_beta: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``sum(g_y * y) + sum(g_beta * beta)`` with respect to theta."""
    p = arch.unpack(theta)
    grad = np.zeros_like(theta)
    g = arch.unpack(grad)
    c = out.cache
    h = arch.hidden
    n, w = batch.x.shape
    if g_beta is None:
        g_beta = np.zeros(n)

    g["w_out"][...] = c["z"].T @ g_y
    g["b_out"][...] = g_y.sum()
    g_z = np.outer(g_y, p["w_out"])
    g_r = g_z[:, :h]
    g_att = g_z[:, h:] - 2.0 * g_beta[:, None] * c["gap"]
    g_cur = 2.0 * g_beta[:, None] * c["gap"]

    # attention: att = sum_j a_j H_j, a = softmax(-||cur - H_j||^2)
    wts, h_sel = c["wts"], c["h_sel"]
    g_a = np.einsum("nd,nkd->nk", g_att, h_sel)
    g_logit = wts * (g_a - (wts * g_a).sum(axis=1, keepdims=True))
    g_dist = -g_logit
    diff_sel = c["cur"][:, None, :] - h_sel                          # (n, k, d)
    g_cur += 2.0 * np.einsum("nk,nkd->nd", g_dist, diff_sel)
    g_hsel = wts[:, :, None] * g_att[:, None, :] - 2.0 * g_dist[:, :, None] * diff_sel
    g_hist = np.zeros_like(c["hist"])
    np.add.at(g_hist, c["idx"], g_hsel)

    g["A_hist"][...] = g_hist.T @ batch.pool_stats
    g["a_hist"][...] = g_hist.sum(axis=0)
    g["A_cur"][...] = g_cur.T @ c["f_cur"]
    g["a_cur"][...] = g_cur.sum(axis=0)

    states = c["states"]
    for t in range(w, 0, -1):
        g_pre = g_r * (1.0 - states[t] ** 2)
        g["W_in"] += g_pre.T @ batch.x[:, t - 1]
        g["W_rec"] += g_pre.T @ states[t - 1]
        g["b_rec"] += g_pre.sum(axis=0)
        g_r = g_pre @ p["W_rec"]
    return grad


# ------------------------------------------------------------------- public ops


def forward(model: ForecastModel, history: Sequence[float], historical: SeasonSet,
            season_ref: tuple[str, str] | None = None) -> Prediction:
    """Predict the raw wILI value following ``history``.

    ``season_ref`` names the season the history belongs to so it is excluded
    from the historical pool.
    """
    history = [float(v) for v in history]
    if not history:
        raise GuidedForecastError("history must contain at least one week")
    if len(history) > 31:
        raise IndexError(f"history of {len(history)} weeks is longer than a season")
    if len(historical) == 0:
        raise GuidedForecastError("historical seasons must be non-empty")
    pool_stats, pool_refs = make_pool(historical, model.normalizer)
    exclude = np.array([[r == season_ref for r in pool_refs]], dtype=bool)
    if exclude.all():
        raise GuidedForecastError("historical pool is empty once the season itself is removed")
    x = np.array([history]) / model.normalizer
    batch = Batch(x, np.array([np.nan]), x[:, -1] * model.normalizer, pool_stats, exclude,
                  [season_ref], pool_refs, model.normalizer, len(history))
    out = forward_batch(model.theta, model.arch, batch)
    return Prediction(float(out.y[0] * model.normalizer), len(history), season_ref)


def predict(model: ForecastModel, seasons: SeasonSet, task: PredictionTask,
            historical: SeasonSet) -> list[Prediction]:
    """Forecast ``task`` for every season; returns predictions in season order."""
    batch = make_batch(seasons, task.week_index, historical, model.normalizer, with_target=False)
    out = forward_batch(model.theta, model.arch, batch)
    return [Prediction(float(v), task.week_index, ref)
            for v, ref in zip(out.raw(model.normalizer), batch.refs)]


class TaskObjective:
    """``sum_seasons |y_hat - s_{w+1}| + beta_weight * mean(beta)`` on the normalized scale."""

    def __init__(self, batch: Batch, arch: Arch, beta_weight: float):
        self.batch = batch
        self.arch = arch
        self.beta_weight = beta_weight

    def parts(self, theta: np.ndarray) -> tuple[Outputs, float, np.ndarray, np.ndarray]:
        out = forward_batch(theta, self.arch, self.batch)
        err = out.y - self.batch.target
        n = self.batch.size
        value = float(np.abs(err).sum() + self.beta_weight * out.beta.mean())
        g_y = np.sign(err)
        g_beta = np.full(n, self.beta_weight / n)
        return out, value, g_y, g_beta

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        out, value, g_y, g_beta = self.parts(theta)
        return value, backward_batch(theta, self.arch, self.batch, out, g_y, g_beta)


def task_loss(model: ForecastModel, split_part: SeasonSet, task: PredictionTask,
              historical: SeasonSet | None = None, beta_weight: float = 0.0) -> float:
    """Absolute next-week error summed over seasons plus the weighted embedding loss.

    ``historical`` defaults to ``split_part`` itself (each season excluded
    from its own pool).
    """
    if len(split_part) == 0:
        raise GuidedForecastError("task_loss needs at least one season")
    for s in split_part:
        if len(s) <= task.week_index:
            raise IndexError(f"season {s.key} has no week after index {task.week_index}")
    historical = split_part if historical is None else historical
    batch = make_batch(split_part, task.week_index, historical, model.normalizer)
    objective = TaskObjective(batch, model.arch, beta_weight)
    return objective.parts(model.theta)[1]


def grad(model: ForecastModel, loss_fn: LossFn) -> np.ndarray:
    """Reverse-mode gradient of ``loss_fn`` at ``model.theta``.

    ``loss_fn`` maps a parameter vector to ``(value, gradient)``.

    Raises:
        DivergenceError: the loss or its gradient is not finite.
    """
    value, g = loss_fn(model.theta)
    g = np.asarray(g, dtype=float)
    if not math.isfinite(value) or not np.all(np.isfinite(g)):
        raise DivergenceError(f"loss diverged (value {value})")
    if g.shape != model.theta.shape:
        raise GuidedForecastError(f"gradient shape {g.shape} != theta shape {model.theta.shape}")
    return g


def clip_by_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


def train_step(model: ForecastModel, loss_fn: LossFn, config: TrainConfig) -> ForecastModel:
    """One clipped gradient-descent step; returns a new model."""
    g = clip_by_norm(grad(model, loss_fn), config.grad_clip)
    return model.with_theta(model.theta - config.learning_rate * g)


class Adam:
    """Adam update rule over a flat parameter vector."""

    def __init__(self, size: int, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(model: ForecastModel, loss_fn: LossFn, config: TrainConfig,
          keep_best: bool = True) -> tuple[ForecastModel, list[float]]:
    """Run ``config.epochs`` full-batch steps.

    Returns the model with the lowest recorded loss (or the final one when
    ``keep_best`` is false) and the per-epoch loss history. The history holds
    the loss of the parameters *before* each step plus the final loss.
    """
    history = []
    best, best_loss = model, math.inf
    adam = Adam(model.theta.size, config.learning_rate) if config.optimizer == "adam" else None
    for epoch in range(config.epochs + 1):
        value, g = loss_fn(model.theta)
        if not math.isfinite(value) or not np.all(np.isfinite(g)):
            raise DivergenceError("loss diverged", epoch=epoch)
        history.append(value)
        if value < best_loss:
            best, best_loss = model, value
        if epoch == config.epochs:
            break
        g = clip_by_norm(g, config.grad_clip)
        update = adam.step(g) if adam is not None else config.learning_rate * g
        model = model.with_theta(model.theta - update)
    return (best if keep_best else model), history


# ------------------------------------------------------------------ checkpoints


def save_model(model: ForecastModel, path: str | Path) -> None:
    lines = [
        CHECKPOINT_HEADER,
        f"hidden {model.arch.hidden}",
        f"embed {model.arch.embed}",
        f"k {model.arch.k}",
        f"normalizer {model.normalizer!r}",
        f"theta {model.theta.size}",
    ]
    lines += [repr(float(v)) for v in model.theta]
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: str | Path) -> ForecastModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise GuidedForecastError(f"{path}: not a {CHECKPOINT_HEADER!r} checkpoint")
    meta = {}
    for line in lines[1:6]:
        key, value = line.split()
        meta[key] = value
    arch = Arch(int(meta["hidden"]), int(meta["embed"]), int(meta["k"]))
    theta = np.array([float(v) for v in lines[6:6 + int(meta["theta"])]])
    return ForecastModel(theta, arch, float(meta["normalizer"]))
