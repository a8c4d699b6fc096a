import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guided_forecast.data import PredictionTask, Season, SeasonSet, synth_seasons
from guided_forecast.errors import DivergenceError, ValidationError
from guided_forecast.forecaster import (
    Arch,
    ForecastModel,
    Prediction,
    TaskObjective,
    TrainConfig,
    fit_normalizer,
    forward,
    grad,
    init_model,
    load_model,
    make_batch,
    predict,
    save_model,
    task_loss,
    train,
    train_step,
)

from oracles import assert_grad_close, central_diff, tiny_forward

TINY = Arch(hidden=2, embed=2, k=2)


def tiny_params():
    return {
        "W_in": [0.5, -0.3],
        "W_rec": [[0.1, 0.2], [-0.4, 0.3]],
        "b_rec": [0.05, -0.1],
        "A_hist": [[0.2, -0.1, 0.3, 0.4], [-0.2, 0.5, 0.1, 0.0]],
        "a_hist": [0.1, -0.05],
        "A_cur": [[0.3, 0.1, -0.2, 0.2], [0.1, 0.4, 0.2, -0.3]],
        "a_cur": [0.0, 0.1],
        "w_out": [0.7, -0.2, 0.4, 0.3],
        "b_out": 0.15,
    }


def model_from(params, arch=TINY, normalizer=1.0):
    theta = np.zeros(arch.n_params)
    views = arch.unpack(theta)
    for name, value in params.items():
        views[name][...] = value
    return ForecastModel(theta, arch, normalizer)


def pool_fixture():
    return SeasonSet(tuple(
        Season("r", f"{2000 + i}/{(1 + i) % 100:02d}", tuple(vals))
        for i, vals in enumerate([
            [0.1 * (j % 7) + 0.2 for j in range(30)],
            [0.5 + 0.02 * j for j in range(30)],
            [0.9 - 0.01 * j for j in range(30)],
        ])
    ))


# ------------------------------------------------------------- structure


def test_param_count_closed_form():
    # Elman cell: h (input) + h*h (recurrent) + h (bias); two affine maps 4->d
    # with bias: 2*(4d + d); decoder over [r; e]: h + d weights + 1 bias.
    h, d = 8, 4
    by_hand = h + h * h + h + 2 * (4 * d + d) + (h + d) + 1
    assert Arch(8, 4, 3).n_params == by_hand == 133
    assert init_model(Arch(8, 4, 3), seed=1).theta.size == 133


def test_init_deterministic_and_bounded():
    a = init_model(Arch(8, 4, 3), seed=1)
    b = init_model(Arch(8, 4, 3), seed=1)
    assert a == b
    assert a != init_model(Arch(8, 4, 3), seed=2)
    p = a.params()
    assert np.all(np.abs(p["W_rec"]) <= 1 / math.sqrt(8))
    assert np.all(np.abs(p["W_in"]) <= 1.0)
    assert np.all(np.abs(p["A_cur"]) <= 0.5)


def test_invalid_arch():
    with pytest.raises(ValidationError):
        Arch(hidden=0)
    with pytest.raises(ValidationError):
        ForecastModel(np.zeros(5), Arch(), 1.0)
    with pytest.raises(ValidationError):
        ForecastModel(np.zeros(133), Arch(), 0.0)


def test_model_is_immutable():
    m = init_model(Arch(), seed=0)
    with pytest.raises(ValueError):
        m.theta[0] = 1.0


# --------------------------------------------------------------- forward


def test_tiny_forward_matches_hand_computation():
    params = tiny_params()
    model = model_from(params)
    pool = pool_fixture()
    history = [0.3, 0.45, 0.4]
    expected, _ = tiny_forward(params, history, [list(s.values) for s in pool], k=2)
    got = forward(model, history, pool)
    assert got.value == pytest.approx(expected, abs=1e-12)


def test_tiny_forward_scaled_normalizer():
    params = tiny_params()
    pool = pool_fixture()
    history = [0.3, 0.45, 0.4]
    norm = 2.5
    scaled_pool = [[v / norm for v in s.values] for s in pool]
    expected, _ = tiny_forward(params, [v / norm for v in history], scaled_pool, k=2)
    got = forward(model_from(params, normalizer=norm), history, pool)
    assert got.value == pytest.approx(expected * norm, abs=1e-12)


def test_history_of_one_week_is_finite():
    m = init_model(Arch(), seed=0)
    assert math.isfinite(forward(m, [1.2], synth_seasons(3)).value)


def test_zero_decoder_gives_zero():
    m = init_model(Arch(), seed=0)
    theta = m.theta.copy()
    views = m.arch.unpack(theta)
    views["w_out"][...] = 0
    views["b_out"][...] = 0
    assert forward(m.with_theta(theta), [1.0, 2.0], synth_seasons(3)).value == 0.0


def test_history_longer_than_season():
    with pytest.raises(IndexError):
        forward(init_model(Arch(), 0), [1.0] * 32, synth_seasons(3))


def test_nonfinite_prediction_rejected():
    with pytest.raises(DivergenceError):
        Prediction(math.nan, 3)


def test_season_excluded_from_own_pool():
    data = synth_seasons(4, noise_sd=0.2, seed=5, jitter=1.0)
    m = init_model(Arch(4, 2, 5), seed=0, normalizer=fit_normalizer(data))
    task = PredictionTask(8)
    first = data.seasons[0]
    others = SeasonSet(data.seasons[1:])
    via_predict = predict(m, SeasonSet((first,)), task, data)[0].value
    via_forward = forward(m, first.values[:8], others).value
    assert via_predict == pytest.approx(via_forward, abs=1e-12)


def test_forward_deterministic():
    data = synth_seasons(5, noise_sd=0.1, seed=2)
    m = init_model(Arch(), seed=4, normalizer=3.0)
    a = [p.value for p in predict(m, data, PredictionTask(10), data)]
    b = [p.value for p in predict(m, data, PredictionTask(10), data)]
    assert a == b


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 28), st.floats(0.1, 10.0))
def test_scale_contract(seed, week, factor):
    data = synth_seasons(6, noise_sd=0.2, seed=seed, jitter=1.0)
    scaled = SeasonSet(tuple(Season(s.region, s.year_label, tuple(v * factor for v in s.values))
                             for s in data))
    m = init_model(Arch(4, 2, 3), seed=seed, normalizer=fit_normalizer(data))
    ms = ForecastModel(m.theta, m.arch, m.normalizer * factor)
    task = PredictionTask(week)
    base = [p.value for p in predict(m, data, task, data)]
    big = [p.value for p in predict(ms, scaled, task, scaled)]
    np.testing.assert_allclose(big, np.array(base) * factor, rtol=1e-9, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.permutations(range(6)))
def test_order_invariance_of_pool(seed, perm):
    data = synth_seasons(6, noise_sd=0.3, seed=seed, jitter=1.0)
    m = init_model(Arch(4, 2, 3), seed=seed, normalizer=fit_normalizer(data))
    history = data.seasons[0].values[:9]
    pool = SeasonSet(data.seasons[1:])
    reordered = SeasonSet(tuple(pool.seasons[i] for i in perm if i < len(pool)))
    assert forward(m, history, pool).value == forward(m, history, reordered).value


# ------------------------------------------------------------- task loss


def test_task_loss_perfect_prediction_is_zero():
    data = synth_seasons(3, noise_sd=0.0, seed=0)
    task = PredictionTask(10)
    m = init_model(Arch(), seed=0, normalizer=fit_normalizer(data))
    theta = m.theta.copy()
    views = m.arch.unpack(theta)
    views["w_out"][...] = 0
    views["b_out"][...] = data.seasons[0].values[10] / m.normalizer  # identical seasons
    assert task_loss(m.with_theta(theta), data, task) == pytest.approx(0.0, abs=1e-12)


def test_task_loss_single_offset():
    data = synth_seasons(3, noise_sd=0.0, seed=0)
    task = PredictionTask(10)
    m = init_model(Arch(), seed=0, normalizer=fit_normalizer(data))
    theta = m.theta.copy()
    views = m.arch.unpack(theta)
    views["w_out"][...] = 0
    views["b_out"][...] = data.seasons[0].values[10] / m.normalizer + 0.1
    one = SeasonSet(data.seasons[:1])
    assert task_loss(m.with_theta(theta), one, task, historical=data) == pytest.approx(0.1)


def test_task_loss_tiny_fixture_with_beta():
    params = tiny_params()
    model = model_from(params)
    pool = pool_fixture()
    target_season = Season("q", "1999/00", tuple([0.3, 0.45, 0.4, 0.7] + [0.5] * 26))
    y, beta = tiny_forward(params, [0.3, 0.45, 0.4], [list(s.values) for s in pool], k=2)
    got = task_loss(model, SeasonSet((target_season,)), PredictionTask(3), pool, beta_weight=1.0)
    assert got == pytest.approx(abs(y - 0.7) + beta, abs=1e-12)


def test_task_loss_errors():
    m = init_model(Arch(), seed=0)
    with pytest.raises(Exception):
        task_loss(m, SeasonSet(), PredictionTask(3))


# --------------------------------------------------------------- gradient


def objective_for(seed, arch, week=7, beta_weight=0.5):
    data = synth_seasons(6, noise_sd=0.3, seed=seed, jitter=1.0)
    m = init_model(arch, seed=seed, normalizer=fit_normalizer(data))
    batch = make_batch(data, week, data, m.normalizer)
    return m, TaskObjective(batch, arch, beta_weight)


@pytest.mark.parametrize("seed", range(10))
def test_task_gradient_matches_finite_differences(seed):
    arch = Arch(3, 2, 3)
    m, obj = objective_for(seed, arch, week=3 + seed)
    analytic = grad(m, obj)
    numeric = central_diff(lambda th: obj(th)[0], m.theta)
    assert_grad_close(analytic, numeric)


def test_constant_loss_zero_gradient():
    m = init_model(Arch(), 0)
    g = grad(m, lambda th: (3.0, np.zeros_like(th)))
    assert not g.any()


def test_quadratic_gradient_is_theta():
    m = init_model(Arch(), 0)
    g = grad(m, lambda th: (0.5 * float(th @ th), th.copy()))
    np.testing.assert_array_equal(g, m.theta)


def test_grad_rejects_nonfinite():
    m = init_model(Arch(), 0)
    with pytest.raises(DivergenceError):
        grad(m, lambda th: (math.inf, np.zeros_like(th)))


# ------------------------------------------------------------------ training


def quadratic(th):
    return 0.5 * float(th @ th), th.copy()


def test_train_step_quadratic_scales_by_point_nine():
    m = init_model(Arch(2, 1, 1), seed=0)
    cfg = TrainConfig(learning_rate=0.1, grad_clip=100.0, optimizer="sgd")
    out = train_step(m, quadratic, cfg)
    np.testing.assert_allclose(out.theta, 0.9 * m.theta)
    assert out is not m


def test_train_step_noops():
    m = init_model(Arch(), 0)
    zero = train_step(m, lambda th: (1.0, np.zeros_like(th)), TrainConfig())
    assert zero == m
    still = train_step(m, quadratic, TrainConfig(learning_rate=0.0))
    assert still == m


def test_train_step_clips():
    m = init_model(Arch(), 0).with_theta(np.full(133, 10.0))
    out = train_step(m, quadratic, TrainConfig(learning_rate=1.0, grad_clip=1.0))
    assert np.linalg.norm(out.theta - m.theta) == pytest.approx(1.0)


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(learning_rate=-1), dict(grad_clip=0),
                dict(beta_weight=-1), dict(optimizer="rmsprop")):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def test_train_history_and_best():
    m = init_model(Arch(2, 1, 1), seed=0)
    best, hist = train(m, quadratic, TrainConfig(learning_rate=0.05, epochs=20))
    assert len(hist) == 21
    assert quadratic(best.theta)[0] == min(hist)


def test_train_divergence_raises():
    m = init_model(Arch(2, 1, 1), seed=0)
    with pytest.raises(DivergenceError):
        train(m, lambda th: (math.nan, th), TrainConfig(epochs=3))


def test_training_monotonicity():
    # noiseless synthetic set, 200 steps, >= 50% loss drop in >= 9/10 seeds
    data = synth_seasons(8, noise_sd=0.0, seed=0, jitter=1.0)
    task = PredictionTask(12)
    wins = 0
    for seed in range(10):
        m = init_model(Arch(), seed=seed, normalizer=fit_normalizer(data))
        obj = TaskObjective(make_batch(data, task.week_index, data, m.normalizer), m.arch, 0.1)
        trained, hist = train(m, obj, TrainConfig(epochs=200, seed=seed))
        wins += task_loss(trained, data, task, beta_weight=0.1) <= 0.5 * hist[0]
    assert wins >= 9


# --------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    m = init_model(Arch(5, 3, 2), seed=9, normalizer=4.321)
    path = tmp_path / "m.txt"
    save_model(m, path)
    text = path.read_text().splitlines()
    assert text[0] == "guided-forecast-model v1"
    assert len(text) == 6 + m.arch.n_params
    assert load_model(path) == m


def test_checkpoint_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("nope\n")
    with pytest.raises(Exception, match="checkpoint"):
        load_model(path)
