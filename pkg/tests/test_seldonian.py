import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from guided_forecast.data import DataSplit, PredictionTask, Season, SeasonSet, split, synth_seasons
from guided_forecast.errors import GuidedForecastError, SizingError, ValidationError
from guided_forecast.forecaster import (
    Arch,
    ForecastModel,
    TaskObjective,
    TrainConfig,
    fit_normalizer,
    init_model,
    make_batch,
    task_loss,
    train,
)
from guided_forecast.guidance import Guidance, collect_z
from guided_forecast.seldonian import (
    CERTIFIED,
    NSF,
    BoundParams,
    CandidateObjective,
    GuidanceReport,
    RunOutcome,
    SeldonianConfig,
    candidate_loss,
    predicted_bound,
    safety_test,
    select_candidate,
    t_quantile,
    train_candidate,
    upper_bound,
    z_count,
)

from oracles import assert_grad_close, central_diff, t_upper

ARCH = Arch(3, 2, 2)


def constant_model(value, normalizer=1.0, arch=ARCH):
    theta = np.zeros(arch.n_params)
    arch.unpack(theta)["b_out"][...] = value / normalizer
    return ForecastModel(theta, arch, normalizer)


def flat(last, year, region="r", week=5, target=None):
    """Season equal to ``last`` up to and including week index ``week - 1``."""
    values = [last] * 30
    if target is not None:
        values[week] = target
    return Season(region, f"{year}/{(year + 1) % 100:02d}", tuple(values))


def split_with_safety_lasts(lasts, week=5):
    safety = SeasonSet(tuple(flat(v, 2000 + i, week=week) for i, v in enumerate(lasts)))
    cand = SeasonSet((flat(1.0, 1990, week=week), flat(1.0, 1991, week=week)))
    test = SeasonSet((flat(1.0, 1980, week=week),))
    return DataSplit(cand, safety, test, seed=0)


# ----------------------------------------------------------------- t quantile


@pytest.mark.parametrize("delta,m,table", [
    (0.1, 2, 3.078),    # t_{0.90, 1}
    (0.05, 9, 1.860),   # t_{0.95, 8}
    (0.2, 29, 0.855),   # t_{0.80, 28}
    (0.1, 3, 1.886),    # t_{0.90, 2}
])
def test_t_quantile_published_table(delta, m, table):
    assert t_quantile(1 - delta, m - 1) == pytest.approx(table, abs=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.51, 0.999), st.integers(1, 200))
def test_t_quantile_matches_scipy(p, dof):
    assert t_quantile(p, dof) == pytest.approx(sps.t.ppf(p, dof), rel=1e-7, abs=1e-8)


def test_t_quantile_symmetry_and_median():
    assert t_quantile(0.5, 7) == 0.0
    assert t_quantile(0.1, 7) == pytest.approx(-t_quantile(0.9, 7))
    with pytest.raises(ValidationError):
        t_quantile(1.0, 3)
    with pytest.raises(ValidationError):
        t_quantile(0.9, 0)


# --------------------------------------------------------------------- bounds


def fixed_arrays():
    rng = np.random.default_rng(2024)
    arrays = [[0.1, 0.2, 0.3], [0.0, 1.0], [0.5, 0.5, 0.5, 0.6]]
    for i in range(20):
        arrays.append(list(np.round(rng.gamma(2.0, 0.2, size=2 + i % 9), 4)))
    return arrays


@pytest.mark.parametrize("z", fixed_arrays())
@pytest.mark.parametrize("delta", [0.05, 0.1, 0.2])
def test_upper_bound_matches_oracle(z, delta):
    assert upper_bound(z, delta) == pytest.approx(t_upper(z, delta), abs=1e-6)


@pytest.mark.parametrize("z", fixed_arrays())
def test_predicted_bound_matches_hand_formula(z):
    z = np.array(z)
    n_safe, infl, delta = 7, 2.0, 0.1
    by_hand = z.mean() + infl * z.std(ddof=1) / math.sqrt(n_safe) * sps.t.ppf(1 - delta, n_safe - 1)
    got = predicted_bound(z, BoundParams(delta, n_safe, infl))
    assert got == pytest.approx(by_hand, abs=1e-6)


def test_bound_worked_examples():
    z = [0.1, 0.2, 0.3]
    assert upper_bound(z, 0.1) == pytest.approx(0.3089, abs=1e-4)
    assert predicted_bound(z, BoundParams(0.1, 3, 2.0)) == pytest.approx(0.4177, abs=1e-4)
    assert predicted_bound(z, BoundParams(0.1, 3, 1.0)) == pytest.approx(upper_bound(z, 0.1))


def test_bound_degenerate_cases():
    assert upper_bound([0.3] * 5, 0.05) == 0.3
    assert predicted_bound([0.3] * 5, BoundParams(0.05, 4, 3.0)) == 0.3
    assert upper_bound([0.1, 0.2, 0.3], 0.5) == pytest.approx(0.2)
    with pytest.raises(SizingError):
        upper_bound([0.3], 0.1)
    with pytest.raises(SizingError):
        BoundParams(0.1, 1)
    with pytest.raises(ValidationError):
        BoundParams(0.1, 3, inflation=0.5)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=2, max_size=20), st.floats(0.01, 0.49),
       st.floats(1.0, 4.0), st.data())
def test_bound_ordering(z, delta, inflation, data):
    size = data.draw(st.integers(2, len(z)))
    assert predicted_bound(z, BoundParams(delta, size, inflation)) >= upper_bound(z, delta) - 1e-12


# ------------------------------------------------------------- candidate loss


def flat_set(lasts, week=5, target=None):
    return SeasonSet(tuple(flat(v, 2000 + i, week=week, target=target)
                           for i, v in enumerate(lasts)))


def test_candidate_loss_penalty_example():
    # constant 1.6 against last observed 1.0 everywhere: all Z = 0.6, zero variance
    d_c = flat_set([1.0, 1.0, 1.0])
    cfg = SeldonianConfig(guidances=(Guidance("smoothness", 0.25, 0.1),), lam=1.0, u_loss=10.0,
                          arch=ARCH)
    got = candidate_loss(constant_model(1.6), d_c, cfg, PredictionTask(5), d_c)
    assert got == pytest.approx(10.6)


def test_candidate_loss_zero_z_is_task_loss():
    d_c = flat_set([1.0, 1.0, 1.0], target=1.3)
    model = constant_model(1.0)
    cfg = SeldonianConfig(guidances=(Guidance("smoothness", 0.25, 0.1),), u_loss=10.0, arch=ARCH)
    task = PredictionTask(5)
    expected = task_loss(model, d_c, task, d_c, beta_weight=cfg.train.beta_weight)
    assert candidate_loss(model, d_c, cfg, task, d_c) == pytest.approx(expected)


def test_candidate_loss_lambda_zero_is_task_loss():
    data = synth_seasons(5, noise_sd=0.2, seed=1, jitter=1.0)
    m = init_model(ARCH, seed=3, normalizer=fit_normalizer(data))
    cfg = SeldonianConfig(guidances=(Guidance("smoothness", 100.0, 0.1),), lam=0.0,
                          u_loss=50.0, arch=ARCH)
    task = PredictionTask(8)
    expected = task_loss(m, data, task, data, beta_weight=cfg.train.beta_weight)
    assert candidate_loss(m, data, cfg, task, data) == expected


def test_candidate_loss_task_branch_adds_lambda_mean_z():
    data = synth_seasons(5, noise_sd=0.2, seed=2, jitter=1.0)
    m = init_model(ARCH, seed=4, normalizer=fit_normalizer(data))
    g = Guidance("smoothness", 100.0, 0.1)
    task = PredictionTask(9)
    cfg = SeldonianConfig(guidances=(g,), lam=2.5, u_loss=50.0, arch=ARCH)
    mean_z = np.mean([z.value for z in collect_z(m, g, data, task, data)])
    expected = task_loss(m, data, task, data, beta_weight=cfg.train.beta_weight) + 2.5 * mean_z
    assert candidate_loss(m, data, cfg, task, data) == pytest.approx(expected, abs=1e-12)


def test_candidate_loss_worst_violated_guidance():
    d_c = flat_set([1.0, 1.0, 1.0])
    loose = Guidance("smoothness", 0.5, 0.1)    # 0.6 > 0.5: violated
    tight = Guidance("smoothness", 0.25, 0.1)   # 0.6 > 0.25: violated
    cfg = SeldonianConfig(guidances=(loose, tight), lam=2.0, u_loss=10.0, arch=ARCH)
    # both bounds equal 0.6; the first maximal one is taken -> epsilon 0.5
    got = candidate_loss(constant_model(1.6), d_c, cfg, PredictionTask(5), d_c)
    assert got == pytest.approx(10.0 + 0.6 + 1.0 * 0.5)


def test_switch_guard_penalty_dominates():
    data = synth_seasons(6, noise_sd=0.3, seed=5, jitter=1.0)
    task = PredictionTask(10)
    m = init_model(ARCH, seed=1, normalizer=fit_normalizer(data))
    u = 2 * task_loss(m, data, task, data, beta_weight=0.1) + 1.0
    pen = SeldonianConfig(guidances=(Guidance("smoothness", 0.0, 0.1),), u_loss=u, arch=ARCH)
    ok = SeldonianConfig(guidances=(Guidance("smoothness", 1e6, 0.1),), u_loss=u, arch=ARCH)
    p = candidate_loss(m, data, pen, task, data)
    t = candidate_loss(m, data, ok, task, data)
    obj = CandidateObjective(m, data, pen, task, data, [len(data)], u)
    obj.evaluate(m.theta)
    assert obj.last_branch == "penalty"
    assert p <= u + obj.last_bounds[0] + 1e-12
    assert p > t


# ------------------------------------------------------- gradient of the switch


def random_objective(seed, epsilon, lam=1.5):
    data = synth_seasons(6, noise_sd=0.3, seed=100 + seed, jitter=1.0)
    m = init_model(Arch(3, 2, 3), seed=seed, normalizer=fit_normalizer(data))
    cfg = SeldonianConfig(guidances=(Guidance("smoothness", epsilon, 0.1),), lam=lam,
                          u_loss=20.0, arch=m.arch)
    obj = CandidateObjective(m, data, cfg, PredictionTask(4 + seed), data, [6], 20.0)
    return m, obj


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("branch,epsilon", [("task", 1e6), ("penalty", 0.0)])
def test_candidate_gradient_both_branches(seed, branch, epsilon):
    m, obj = random_objective(seed, epsilon)
    value, analytic = obj(m.theta)
    assert obj.last_branch == branch
    numeric = central_diff(lambda th: obj.evaluate(th, need_grad=False)[0], m.theta)
    assert_grad_close(analytic, numeric)


# ---------------------------------------------------------- candidate search


def fast_config(guidances=(), **kw):
    train = TrainConfig(epochs=kw.pop("epochs", 60), seed=0)
    return SeldonianConfig(guidances=tuple(guidances), train=train, arch=Arch(4, 2, 3), **kw)


def test_disabled_constraint_matches_plain_training():
    data = synth_seasons(12, noise_sd=0.1, seed=1, jitter=1.0)
    sp = split(data, 0.2, 0.5, seed=0)
    task = PredictionTask(10)
    cfg = fast_config([Guidance("smoothness", math.inf, 0.1)], lam=0.0)
    guided = select_candidate(sp, cfg, task, seed=3)

    plain = init_model(cfg.arch, 3, normalizer=fit_normalizer(sp.training))
    obj = TaskObjective(make_batch(sp.candidate, 10, sp.training, plain.normalizer), cfg.arch,
                        cfg.train.beta_weight)
    plain, _ = train(plain, obj, cfg.train)
    a = task_loss(guided, sp.candidate, task, sp.training, cfg.train.beta_weight)
    b = task_loss(plain, sp.candidate, task, sp.training, cfg.train.beta_weight)
    assert a == pytest.approx(b, rel=0.05)


def test_candidate_bound_within_epsilon_on_smooth_data():
    task = PredictionTask(10)
    g = Guidance("smoothness", 0.5, 0.1)
    hits = 0
    for seed in range(10):
        data = synth_seasons(20, noise_sd=0.0, seed=seed, jitter=1.0)
        sp = split(data, 0.2, 0.5, seed=seed)
        run = train_candidate(sp, fast_config([g], epochs=100), task, seed=seed)
        hits += run.candidate_bounds[0] <= 0.5
    assert hits >= 9


def test_candidate_selection_is_reproducible():
    data = synth_seasons(12, noise_sd=0.2, seed=1, jitter=1.0)
    sp = split(data, 0.2, 0.5, seed=0)
    cfg = fast_config([Guidance("smoothness", 0.3, 0.1)], epochs=2)
    a = select_candidate(sp, cfg, PredictionTask(7), seed=5)
    b = select_candidate(sp, cfg, PredictionTask(7), seed=5)
    assert np.array_equal(a.theta, b.theta)


def test_safety_set_too_small_for_regional():
    a = synth_seasons(6, seed=1, region="a")
    b = synth_seasons(6, seed=2, region="b", start_year=2000)
    sp = split(a | b, 0.2, 0.5, seed=0)
    g = Guidance("regional_equity", 0.5, 0.1, regions=("a", "b"))
    assert z_count(g, sp.safety) == 0
    with pytest.raises(SizingError):
        train_candidate(sp, fast_config([g], epochs=2), PredictionTask(5))


# ---------------------------------------------------------------- safety test


def test_safety_test_nsf_example():
    # constant 1.0 vs last observed 0.9, 0.8, 0.7 -> Z = 0.1, 0.2, 0.3
    sp = split_with_safety_lasts([0.9, 0.8, 0.7])
    cfg = SeldonianConfig(guidances=(Guidance("smoothness", 0.25, 0.1),), arch=ARCH)
    out = safety_test(constant_model(1.0), sp, cfg, PredictionTask(5))
    assert out.status == NSF and out.model is None
    assert out.safety_bound == pytest.approx(0.3089, abs=1e-4)
    fb = out.feedback[0]
    assert fb["margin"] == pytest.approx(0.3089 - 0.25, abs=1e-4)
    assert any("raise epsilon" in s for s in fb["suggestions"])
    assert any("delta" in s for s in fb["suggestions"])
    assert any("safety set" in s for s in fb["suggestions"])


def test_safety_test_certified_example():
    sp = split_with_safety_lasts([0.9, 0.8, 0.7])
    cfg = SeldonianConfig(guidances=(Guidance("smoothness", 0.5, 0.1),), arch=ARCH)
    model = constant_model(1.0)
    out = safety_test(model, sp, cfg, PredictionTask(5))
    assert out.status == CERTIFIED and out.model is model
    assert out.safety_bound == pytest.approx(0.3089, abs=1e-4)


def test_safety_test_zero_variance():
    sp = split_with_safety_lasts([1.0, 1.0, 1.0, 1.0])
    cfg = SeldonianConfig(guidances=(Guidance("smoothness", 0.4, 0.1),), arch=ARCH)
    out = safety_test(constant_model(1.2), sp, cfg, PredictionTask(5))
    assert out.certified and out.safety_bound == pytest.approx(0.2)


def test_run_outcome_invariants():
    g = Guidance("smoothness", 0.25, 0.1)
    failing = GuidanceReport(g, 0.4)
    with pytest.raises(GuidedForecastError):
        RunOutcome(CERTIFIED, constant_model(1.0), 0.4, None, [failing])
    with pytest.raises(GuidedForecastError):
        RunOutcome(NSF, constant_model(1.0), 0.4, None, [failing])
    with pytest.raises(GuidedForecastError):
        RunOutcome(NSF, None, None, None, [])
    with pytest.raises(ValidationError):
        RunOutcome("maybe", None, None, None, [failing])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=2, max_size=8), st.floats(0.0, 1.0),
       st.floats(0.01, 0.5))
def test_safety_test_totality(lasts, eps, delta):
    sp = split_with_safety_lasts(lasts)
    cfg = SeldonianConfig(guidances=(Guidance("smoothness", eps, delta),), arch=ARCH)
    out = safety_test(constant_model(1.0), sp, cfg, PredictionTask(5))
    z = [abs(1.0 - v) for v in lasts]
    assert out.certified == (upper_bound(z, delta) <= eps)
    assert (out.model is not None) == out.certified
    if not out.certified:
        assert out.feedback and out.feedback[0]["suggestions"]
