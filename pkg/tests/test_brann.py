import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2pdetect.brann import (
    MalformedModelError,
    MissingFeatureError,
    ModelVersionError,
    NetworkModel,
    StepFailure,
    TrainingConfig,
    choose_hidden,
    classify,
    data_error,
    effective_parameters,
    feature_check,
    fit_weights,
    forward,
    init_weights,
    jacobian,
    lm_direction,
    lm_step,
    load_model,
    model_id,
    n_weights,
    predict_scores,
    raw_scores,
    residuals,
    save_model,
    select_hidden,
    train,
    update_hyperparams,
    weight_error,
)
from p2pdetect.dataset import TARGET_NORM, Dataset, NormalizationParams, split
from p2pdetect.flow_meter import FEATURE_NAMES


def random_model(n_in, n_hidden, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return NetworkModel(n_in, n_hidden, rng.normal(scale=scale, size=n_weights(n_in, n_hidden)))


def finite_difference_jacobian(model, X, t, h=1e-6):
    w = model.weights
    J = np.empty((len(X), len(w)))
    for j in range(len(w)):
        up, dn = w.copy(), w.copy()
        up[j] += h
        dn[j] -= h
        J[:, j] = (residuals(model.with_weights(up), X, t) - residuals(model.with_weights(dn), X, t)) / (2 * h)
    return J


# --- forward pass and errors ---------------------------------------------------------


def test_weight_count():
    assert n_weights(15, 5) == 86
    assert random_model(15, 10).k == 171


def test_zero_weights_output_zero():
    m = NetworkModel(3, 4, np.zeros(n_weights(3, 4)))
    assert forward(m, np.array([0.3, -2.0, 9.0])) == 0.0


def test_one_one_one_unit_weights():
    m = NetworkModel(1, 1, np.ones(4))
    assert forward(m, np.array([0.0])) == pytest.approx(math.tanh(math.tanh(1.0) + 1.0), abs=0)
    assert forward(m, np.array([0.0])) == pytest.approx(0.942681, abs=5e-7)


def test_output_strictly_bounded_on_normalized_inputs():
    rng = np.random.default_rng(0)
    for seed in range(1000):
        m = random_model(15, 5, seed)
        assert abs(forward(m, rng.uniform(0.05, 0.95, 15))) < 1


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_output_never_leaves_closed_interval(seed):
    # far outside the normalized range tanh rounds to exactly +-1.0 in floating point
    rng = np.random.default_rng(seed)
    m = random_model(4, 3, seed, scale=rng.uniform(0.1, 50))
    y = forward(m, rng.normal(scale=30, size=(5, 4)))
    assert np.all(np.abs(y) <= 1)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(random_model(3, 2), np.zeros(4))
    with pytest.raises(ValueError):
        NetworkModel(3, 2, np.zeros(5))


def test_data_error_examples():
    m = NetworkModel(1, 1, np.zeros(4))
    assert data_error(m, np.zeros((2, 1)), [0.0, 0.0]) == 0.0
    assert data_error(m, np.zeros((1, 1)), [1.0]) == 0.5  # residual -1
    rng = np.random.default_rng(4)
    m = random_model(3, 4, 1)
    X, t = rng.normal(size=(10, 3)), rng.uniform(0.05, 0.95, 10)
    W1, b1, w2, b2 = m.unpack()
    y = [math.tanh(sum(w2[j] * math.tanh(W1[j] @ x + b1[j]) for j in range(4)) + b2) for x in X]
    assert data_error(m, X, t) == pytest.approx(0.5 * sum((a - b) ** 2 for a, b in zip(y, t)), rel=1e-13)
    with pytest.raises(ValueError):
        data_error(m, np.zeros((0, 3)), [])


def test_weight_error_examples():
    assert weight_error(NetworkModel(1, 1, np.zeros(4))) == 0.0
    assert weight_error(NetworkModel(1, 1, np.array([3.0, 4.0, 0.0, 0.0]))) == 12.5
    m = random_model(5, 3, 9)
    assert weight_error(m) == pytest.approx(0.5 * math.fsum(v * v for v in m.weights), rel=1e-14)


# --- Jacobian ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = random_model(15, 5, seed, scale=0.5)
    X = rng.uniform(0.05, 0.95, (20, 15))
    t = rng.choice([0.05, 0.95], 20)
    J = jacobian(m, X)
    F = finite_difference_jacobian(m, X, t)
    assert np.max(np.abs(J - F) / np.maximum(np.abs(F), 1e-3)) < 1e-5


def test_jacobian_zero_input_and_duplicates():
    m = random_model(3, 2, 1)
    X = np.array([[0.0, 0.0, 0.0], [0.1, 0.2, 0.3], [0.1, 0.2, 0.3]])
    J = jacobian(m, X)
    assert np.all(J[0, :6] == 0)
    assert np.all(J[0, 6:8] != 0)
    assert np.array_equal(J[1], J[2])


def test_batch_order_does_not_matter():
    rng = np.random.default_rng(3)
    m = random_model(4, 3, 2)
    X, t = rng.normal(size=(12, 4)), rng.uniform(0, 1, 12)
    p = rng.permutation(12)
    J, Jp = jacobian(m, X), jacobian(m, X[p])
    r, rp = residuals(m, X, t), residuals(m, X[p], t[p])
    assert data_error(m, X, t) == pytest.approx(data_error(m, X[p], t[p]), rel=1e-14)
    assert np.allclose(J.T @ J, Jp.T @ Jp, rtol=1e-13, atol=1e-15)
    assert np.allclose(J.T @ r, Jp.T @ rp, rtol=1e-13, atol=1e-15)


# --- LM step ------------------------------------------------------------------------


def test_linear_problem_lands_on_least_squares():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(30, 4))
    b = rng.normal(size=30)
    w = rng.normal(size=4)
    delta = lm_direction(A, A @ w - b, w, alpha=0.0, beta=1.0, mu=0.0)
    ls, *_ = np.linalg.lstsq(A, b, rcond=None)
    assert np.allclose(w + delta, ls, rtol=1e-10, atol=1e-12)


def test_large_mu_is_scaled_gradient_descent():
    rng = np.random.default_rng(1)
    J, r, w = rng.normal(size=(20, 6)), rng.normal(size=20), rng.normal(size=6)
    alpha, beta, mu = 0.3, 2.0, 1e8
    delta = lm_direction(J, r, w, alpha, beta, mu)
    gd = -(beta * J.T @ r + alpha * w) / mu
    assert np.allclose(delta, gd, rtol=1e-2)


def test_zero_gradient_gives_zero_step():
    J = np.eye(3)
    w = np.array([1.0, -2.0, 0.5])
    alpha, beta = 2.0, 4.0
    r = -alpha * w / beta  # beta J'r + alpha w = 0
    assert np.allclose(lm_direction(J, r, w, alpha, beta, 0.01), 0.0, atol=1e-15)


def test_step_failure_is_signalled():
    J = np.zeros((2, 2))
    with pytest.raises(StepFailure):
        lm_direction(J, np.zeros(2), np.zeros(2), 0.0, 1.0, 0.0)


def test_lm_step_reports_objective_change():
    rng = np.random.default_rng(5)
    m = random_model(3, 3, 5, scale=0.5)
    X, t = rng.uniform(size=(15, 3)), rng.choice([0.05, 0.95], 15)
    w_new, dF = lm_step(m, X, t, 0.01, 1.0, 0.005)
    f_old = data_error(m, X, t) + 0.01 * weight_error(m)
    m2 = m.with_weights(w_new)
    assert dF == pytest.approx(data_error(m2, X, t) + 0.01 * weight_error(m2) - f_old, rel=1e-12)
    assert dF < 0


# --- evidence updates -------------------------------------------------------------


def test_gamma_alpha_zero_is_rank():
    rng = np.random.default_rng(0)
    J = rng.normal(size=(30, 8))
    assert effective_parameters(J.T @ J, 0.0, 1.0) == 8
    J[:, 3] = J[:, 2]
    assert effective_parameters(J.T @ J, 0.0, 1.0) == 7


def test_gamma_isotropic_hessian():
    # beta J'J + alpha I = 2 I, i.e. c = 4 in the sum-of-squares Hessian convention
    assert effective_parameters(np.eye(10), 1.0, 1.0) == 5.0


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1e3), st.floats(1e-3, 1e3))
def test_gamma_in_range(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(int(rng.integers(1, 20)), 6)) * rng.uniform(0, 10)
    g = effective_parameters(J.T @ J, alpha, beta)
    assert 0.0 <= g <= 6.0


def test_gamma_matches_trace_formula():
    rng = np.random.default_rng(2)
    J = rng.normal(size=(40, 7))
    alpha, beta = 0.7, 3.0
    H = beta * J.T @ J + alpha * np.eye(7)
    assert effective_parameters(J.T @ J, alpha, beta) == pytest.approx(7 - alpha * np.trace(np.linalg.inv(H)), rel=1e-12)


def test_update_hyperparams_formulas():
    rng = np.random.default_rng(3)
    m = random_model(3, 2, 3, scale=0.4)
    X, t = rng.uniform(size=(25, 3)), rng.choice([0.05, 0.95], 25)
    u = update_hyperparams(m, X, t, 0.2, 5.0)
    J = jacobian(m, X)
    g = effective_parameters(J.T @ J, 0.2, 5.0)
    assert u.gamma == g
    assert u.alpha == pytest.approx(g / (2 * weight_error(m)))
    assert u.beta == pytest.approx((25 - g) / (2 * data_error(m, X, t)))
    assert not u.perfect_fit


def test_update_hyperparams_degenerate():
    m = NetworkModel(1, 1, np.zeros(4))
    u = update_hyperparams(m, np.zeros((3, 1)), [0.0, 0.0, 0.0], 0.0, 1.0)
    assert u.alpha == 0.0 and u.perfect_fit and u.beta == 1e10


def test_overparameterized_net_on_five_points():
    rng = np.random.default_rng(0)
    X, t = rng.uniform(0.05, 0.95, (5, 15)), rng.choice([0.05, 0.95], 5)
    m = NetworkModel(15, 10, init_weights(15, 10, rng))
    m, rep = fit_weights(m, X, t, TrainingConfig())
    assert rep.gamma < m.k / 2


# --- training ------------------------------------------------------------------------


def separable(n=500, n_features=15, seed=0):
    rng = np.random.default_rng(seed)
    y = np.tile([0, 1], n // 2)
    X = rng.normal(size=(n, n_features))
    X[:, 0] += np.where(y == 1, 3.0, -3.0)
    X[:, 1] += np.where(y == 1, 2.0, -2.0)
    return Dataset([f"f{i}" for i in range(n_features)], X, y)


def test_training_invariants_and_determinism():
    ds = separable(200, 6, seed=1)
    cfg = TrainingConfig(seed=4, max_epochs=60)
    m1, r1 = train(ds, ds.feature_names, cfg, n_hidden=4)
    m2, r2 = train(ds, ds.feature_names, cfg, n_hidden=4)
    assert np.array_equal(m1.weights, m2.weights)
    assert [e.f for e in r1.trace] == [e.f for e in r2.trace]
    for e in r1.trace:
        assert 0 <= e.gamma <= m1.k
        assert e.alpha >= 0 and e.beta >= 0
        assert e.f <= e.f_before
    assert r1.stop_reason in ("max_epochs", "objective", "gradient", "mu_max")


def test_separable_data_is_learned():
    ds = separable()
    tr, te = split(ds, 0.9, 0)
    m, rep = train(tr, ds.feature_names, TrainingConfig(seed=0), n_hidden=10, holdout=te)
    acc = np.mean((predict_scores(m, te.X) >= 0.5) == te.y)
    assert acc >= 0.99 and rep.heldout_r > 0.99


def test_train_rejects_bad_input():
    from p2pdetect.dataset import DatasetError
    ds = separable(8, 2)
    with pytest.raises(DatasetError):
        train(ds, ds.feature_names, n_hidden=2)
    with pytest.raises(DatasetError):
        train(Dataset(("a",), np.zeros((20, 1))), ["a"], n_hidden=2)


def test_choose_hidden_rules():
    assert choose_hidden({3: 0.5}) == 3
    assert choose_hidden({2: 0.9, 5: 0.9, 7: 0.8}) == 2
    assert choose_hidden({2: float("nan"), 4: 0.1}) == 4
    from p2pdetect.brann import TrainingError
    with pytest.raises(TrainingError):
        choose_hidden({2: float("nan")})


def test_select_hidden_singleton_and_xor():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (300, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    ds = Dataset(("a", "b"), X, y)
    h, sweep = select_hidden(ds, ("a", "b"), TrainingConfig(hidden_range=(3, 3)))
    assert h == 3
    h, sweep = select_hidden(ds, ("a", "b"), TrainingConfig(hidden_range=(1, 8), max_epochs=150, workers=4))
    assert h >= 2
    assert sweep[1] < max(sweep[k] for k in range(2, 9))


# --- classification and persistence -------------------------------------------------


def flow_model(names=("duration", "fpsh_cnt"), weights=None):
    k = n_weights(len(names), 2)
    w = np.zeros(k) if weights is None else weights
    return NetworkModel(len(names), 2, w, names, NormalizationParams((0.0,) * len(names), (10.0,) * len(names)), TARGET_NORM)


def test_zero_weight_classify():
    m = flow_model()
    score, label = classify(m, {"duration": 3.0, "fpsh_cnt": 1.0})
    assert raw_scores(m, np.array([3.0, 1.0]))[0] == pytest.approx(-0.05 / 0.9, abs=1e-15)
    assert (score, label) == (0.0, 0)


def test_threshold_extremes():
    m = flow_model()
    assert classify(m, {"duration": 3.0, "fpsh_cnt": 1.0}, threshold=0.0)[1] == 1
    m = flow_model(weights=np.array([0, 0, 0, 0, 0, 0, 0, 0, 5.0]))
    score, label = classify(m, {"duration": 3.0, "fpsh_cnt": 1.0}, threshold=1.0 + 1e-9)
    assert score == 1.0 and label == 0


def test_missing_feature():
    m = flow_model()
    with pytest.raises(MissingFeatureError):
        classify(m, {"duration": 3.0})
    with pytest.raises(MissingFeatureError):
        feature_check(flow_model(("duration", "not_a_feature")))
    feature_check(m, FEATURE_NAMES)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = flow_model(weights=rng.normal(size=9) / 3)
    m = NetworkModel(m.n_in, m.n_hidden, m.weights, m.feature_names,
                     NormalizationParams((0.1, -3.0), (1 / 3, 7e5)), TARGET_NORM, alpha=0.123, beta=45.6)
    p = tmp_path / "m.brann"
    save_model(m, p)
    back = load_model(p)
    X = rng.uniform(-1, 8e5, (100, 2))
    assert np.array_equal(predict_scores(m, X), predict_scores(back, X))
    assert np.array_equal(back.weights, m.weights)
    assert (back.alpha, back.beta, back.feature_names) == (m.alpha, m.beta, m.feature_names)
    assert model_id(back) == model_id(m)
    save_model(back, tmp_path / "again.brann")
    assert (tmp_path / "again.brann").read_bytes() == p.read_bytes()
    assert p.read_text().splitlines()[0] == "brann-model/1"


def test_model_file_errors(tmp_path):
    p = tmp_path / "m.brann"
    save_model(flow_model(weights=np.arange(9.0)), p)
    text = p.read_text()
    (tmp_path / "cut.brann").write_text(text[: len(text) // 2])
    with pytest.raises(MalformedModelError):
        load_model(tmp_path / "cut.brann")
    (tmp_path / "edit.brann").write_text(text.replace('"beta": 1.0', '"beta": 2.0'))
    with pytest.raises(MalformedModelError):
        load_model(tmp_path / "edit.brann")
    (tmp_path / "future.brann").write_text(text.replace("brann-model/1", "brann-model/2", 1))
    with pytest.raises(ModelVersionError):
        load_model(tmp_path / "future.brann")
    (tmp_path / "junk.brann").write_text("hello\n")
    with pytest.raises(MalformedModelError):
        load_model(tmp_path / "junk.brann")
