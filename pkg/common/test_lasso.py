import math

import numpy as np
import pytest

from . import lasso


def random_problem(rng, S=30, D=8, noise=0.1):
    X = rng.normal(size=(S, D))
    beta = rng.normal(size=D) * (rng.uniform(size=D) < 0.5)
    y = X @ beta + noise * rng.normal(size=S)
    return X, y


def fista(Xs, ys, lam, iterations=3000):
    """Accelerated proximal gradient on the same objective."""
    Xc = Xs - Xs.mean(axis=0)
    yc = ys - ys.mean()
    S = len(ys)
    step = S / np.linalg.eigvalsh(Xc.T @ Xc).max()
    beta = z = np.zeros(Xs.shape[1])
    t = 1.0
    for _ in range(iterations):
        grad = Xc.T @ (Xc @ z - yc) / S
        nxt = lasso.soft_threshold(z - step * grad, step * lam)
        t_next = (1 + math.sqrt(1 + 4 * t * t)) / 2
        z = nxt + (t - 1) / t_next * (nxt - beta)
        beta, t = nxt, t_next
    return beta


def test_standardize_examples():
    X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])

    Xs, ys, params = lasso.standardize(X, [1.0, 2.0, 3.0])

    np.testing.assert_allclose(Xs[:, 0], [-1 / math.sqrt(2), 0, 1 / math.sqrt(2)], atol=1e-15)
    np.testing.assert_array_equal(Xs[:, 1], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(ys, [-1.0, 0.0, 1.0])
    assert params.mu_y == 2.0
    assert params.constant_columns == (1,)
    assert params.std_x[1] == 1.0


def test_standardized_columns_have_unit_norm():
    X, y = random_problem(np.random.default_rng(1), S=50, D=6)

    Xs, ys, params = lasso.standardize(X, y)

    np.testing.assert_allclose(Xs.sum(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose((Xs ** 2).sum(axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(params.inverse(Xs), X, atol=1e-12)
    np.testing.assert_allclose(params.transform(X), Xs, atol=1e-12)


@pytest.mark.parametrize("X, y", [
    ([[1.0, 2.0]], [1.0]),
    ([[1.0], [np.nan]], [1.0, 2.0]),
    ([1.0, 2.0], [1.0, 2.0]),
])
def test_standardize_rejects(X, y):
    with pytest.raises(lasso.StandardizationError):
        lasso.standardize(X, y)


@pytest.mark.parametrize("z, gamma, expected", [(0.5, 1.0, 0.0), (2.0, 1.0, 1.0), (-3.0, 1.0, -2.0)])
def test_soft_threshold(z, gamma, expected):
    assert lasso.soft_threshold(z, gamma) == expected


def test_lambda_max_zeroes_everything():
    X, y = random_problem(np.random.default_rng(2))
    Xs, ys, params = lasso.standardize(X, y)
    path = lasso.lambda_path(Xs, ys)

    result = lasso.ccd_fit(Xs, ys, path.values[0])

    assert not np.any(result.coefficients)
    model = lasso.fit_lasso(X, y, path.values[0] * 2)
    assert lasso.predict(model, X[0]) == pytest.approx(y.mean())


def test_orthonormal_design_closed_form():
    rng = np.random.default_rng(3)
    S, D = 40, 5
    A = rng.normal(size=(S, D))
    Xs, _ = np.linalg.qr(A - A.mean(axis=0))
    ys = rng.normal(size=S)
    ys -= ys.mean()
    lam = 0.02

    result = lasso.ccd_fit(Xs, ys, lam, tol=1e-12)

    expected = S * lasso.soft_threshold(Xs.T @ ys / S, lam)
    np.testing.assert_allclose(result.coefficients, expected, atol=1e-10)


def test_zero_lambda_matches_least_squares():
    X, y = random_problem(np.random.default_rng(4), S=100, D=5)
    Xs, ys, _ = lasso.standardize(X, y)

    result = lasso.ccd_fit(Xs, ys, 0.0, tol=1e-12)

    expected = np.linalg.solve(Xs.T @ Xs, Xs.T @ ys)
    np.testing.assert_allclose(result.coefficients, expected, atol=1e-8)
    assert result.converged


def test_ccd_matches_proximal_gradient():
    rng = np.random.default_rng(5)
    for _ in range(100):
        X, y = random_problem(rng)
        Xs, ys, _ = lasso.standardize(X, y)
        lam = lasso.lambda_path(Xs, ys).values[0] * rng.uniform(0.05, 0.9)

        result = lasso.ccd_fit(Xs, ys, lam, tol=1e-12)
        reference = lasso.objective(Xs, ys, fista(Xs, ys, lam), lam)

        assert result.objective <= reference + 1e-8
        assert lasso.kkt_residual(Xs, ys, result.coefficients, lam) <= 1e-6


def test_objective_never_increases():
    X, y = random_problem(np.random.default_rng(6), S=60, D=12)
    Xs, ys, _ = lasso.standardize(X, y)

    result = lasso.ccd_fit(Xs, ys, 1e-3, tol=1e-12)

    trace = np.array(result.objective_trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) <= 1e-12)


def test_sweep_limit_reports_not_converged():
    X, y = random_problem(np.random.default_rng(7), S=60, D=12)
    Xs, ys, _ = lasso.standardize(X, y)

    result = lasso.ccd_fit(Xs, ys, 0.0, tol=1e-15, max_sweeps=2)

    assert not result.converged
    assert result.sweeps == 2


def test_ccd_rejects_bad_input():
    Xs = np.array([[1.0, np.inf], [0.0, 1.0]])
    with pytest.raises(ValueError):
        lasso.ccd_fit(Xs, [1.0, 2.0], 0.1)
    with pytest.raises(ValueError):
        lasso.ccd_fit(np.eye(2), [1.0, 2.0], -0.1)


def test_infinite_weight_pins_coefficient():
    X, y = random_problem(np.random.default_rng(8))
    Xs, ys, _ = lasso.standardize(X, y)
    weights = np.ones(Xs.shape[1])
    weights[0] = np.inf

    result = lasso.ccd_fit(Xs, ys, 0.0, weights)

    assert result.coefficients[0] == 0


def test_lambda_path_shape():
    X, y = random_problem(np.random.default_rng(9))
    Xs, ys, _ = lasso.standardize(X, y)

    single = lasso.lambda_path(Xs, ys, count=1).values
    path = lasso.lambda_path(Xs, ys).values

    assert single.tolist() == [path[0]]
    assert len(path) == 100
    assert np.all(np.diff(path) < 0)
    ratios = path[1:] / path[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)
    assert path[-1] == pytest.approx(1e-3 * path[0], rel=1e-12)


def test_lambda_path_for_constant_response():
    X, _ = random_problem(np.random.default_rng(10))

    assert lasso.lambda_path(X, np.zeros(len(X))).values.tolist() == [0.0]


def test_path_l1_norm_and_warm_start():
    X, y = random_problem(np.random.default_rng(11), S=80, D=10)
    Xs, ys, _ = lasso.standardize(X, y)
    path = lasso.lambda_path(Xs, ys, count=30).values

    beta = None
    norms = []
    for lam in path:
        warm = lasso.ccd_fit(Xs, ys, lam, tol=1e-12, init=beta)
        cold = lasso.ccd_fit(Xs, ys, lam, tol=1e-12)
        beta = warm.coefficients
        norms.append(np.abs(beta).sum())
        np.testing.assert_allclose(warm.coefficients, cold.coefficients, atol=1e-6)
        assert warm.objective == pytest.approx(cold.objective, abs=1e-10)

    assert np.all(np.diff(norms) >= -1e-9)


def test_uniform_weights_rescale_lambda():
    X, y = random_problem(np.random.default_rng(12))
    Xs, ys, _ = lasso.standardize(X, y)
    weights = np.full(Xs.shape[1], 4.0)

    plain = lasso.lambda_path(Xs, ys, count=10).values
    weighted = lasso.lambda_path(Xs, ys, count=10, weights=weights).values

    np.testing.assert_allclose(weighted, plain / 4, rtol=1e-12)
    for lam_plain, lam_weighted in zip(plain, weighted):
        a = lasso.ccd_fit(Xs, ys, lam_plain, tol=1e-12).coefficients
        b = lasso.ccd_fit(Xs, ys, lam_weighted, weights, tol=1e-12).coefficients
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_msa_recovers_sparse_support():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(200, 20))
    truth = np.zeros(20)
    truth[[2, 7, 15]] = [3.0, -2.0, 1.5]

    model = lasso.msa_lasso_fit(X, X @ truth, steps=3, seed=1)

    assert model.support == (2, 7, 15)
    assert len(model.diagnostics["steps"]) == 3
    np.testing.assert_allclose(lasso.predict(model, X[:5]), X[:5] @ truth, atol=5e-2)


def test_single_step_is_plain_lasso():
    X, y = random_problem(np.random.default_rng(14), S=60, D=8)

    model = lasso.msa_lasso_fit(X, y, steps=1, seed=3)

    Xs, ys, _ = lasso.standardize(X, y)
    train, val = lasso.validation_split(len(y), 0.2, 3)
    lam, _, _, _ = lasso.select_lambda(Xs, ys, train, val, np.ones(8))
    plain = lasso.ccd_fit(Xs, ys, lam)
    assert model.lam == lam
    np.testing.assert_array_equal(model.coefficients, plain.coefficients)
    np.testing.assert_array_equal(model.adaptive_weights, np.ones(8))


def test_select_lambda_on_constant_response():
    Xs, ys, _ = lasso.standardize(np.array([[0.0], [1.0], [2.0], [3.0], [4.0]]), np.zeros(5))

    lam, mse, path, errors = lasso.select_lambda(Xs, ys, np.arange(4), np.array([4]), np.ones(1), count=5)

    assert path.values.tolist() == [0.0]
    assert (lam, mse, errors) == (0.0, 0.0, [0.0])


def test_select_lambda_minimizes_validation_error():
    X, y = random_problem(np.random.default_rng(21), S=60, D=8)
    Xs, ys, _ = lasso.standardize(X, y)
    train, val = lasso.validation_split(60, 0.2, 0)

    lam, mse, path, errors = lasso.select_lambda(Xs, ys, train, val, np.ones(8), count=20)

    assert len(val) == 12
    assert mse == min(errors)
    assert lam == path.values[errors.index(mse)]


def test_degenerate_validation_fold():
    with pytest.raises(lasso.ValidationFoldError):
        lasso.msa_lasso_fit([[1.0], [2.0]], [1.0, 2.0])


def test_exact_fit_reproduces_training_rows():
    rng = np.random.default_rng(15)
    X = rng.normal(size=(30, 6))
    y = X @ rng.normal(size=6) + 1.0

    model = lasso.fit_lasso(X, y, 0.0, tol=1e-12)

    np.testing.assert_allclose(lasso.predict(model, X), y, atol=1e-6)


def test_prediction_ignores_feature_scaling():
    X, y = random_problem(np.random.default_rng(16))
    scaled = X.copy()
    scaled[:, 0] *= 7.0

    a = lasso.fit_lasso(X, y, 0.01, tol=1e-12)
    b = lasso.fit_lasso(scaled, y, 0.01, tol=1e-12)

    np.testing.assert_allclose(lasso.predict(a, X), lasso.predict(b, scaled), atol=1e-8)


def test_zero_model_predicts_mean():
    X, y = random_problem(np.random.default_rng(17))

    model = lasso.fit_lasso(X, y, 1e6)

    assert model.support == ()
    assert lasso.predict(model, np.full(X.shape[1], 123.0)) == pytest.approx(y.mean())


def test_predict_rejects_bad_input():
    X, y = random_problem(np.random.default_rng(18))
    model = lasso.fit_lasso(X, y, 0.01)

    with pytest.raises(ValueError):
        lasso.predict(model, np.ones(X.shape[1] + 1))
    with pytest.raises(ValueError):
        lasso.predict(model, np.full(X.shape[1], np.nan))


def test_model_file_round_trip(tmp_path):
    X, y = random_problem(np.random.default_rng(19), S=60)
    model = lasso.msa_lasso_fit(X, y, steps=2, zero_weight_exclusion=True, layout_fingerprint="abc")
    path = tmp_path / "model.json"

    lasso.save_model(path, model)
    loaded = lasso.load_model(path, expected_fingerprint="abc")

    np.testing.assert_array_equal(loaded.coefficients, model.coefficients)
    np.testing.assert_array_equal(loaded.adaptive_weights, model.adaptive_weights)
    assert loaded.lam == model.lam
    assert lasso.predict(loaded, X[3]) == lasso.predict(model, X[3])


def test_model_file_errors(tmp_path):
    X, y = random_problem(np.random.default_rng(20))
    data = lasso.model_to_dict(lasso.fit_lasso(X, y, 0.01))
    data["layout_fingerprint"] = "abc"

    with pytest.raises(lasso.FingerprintMismatchError):
        lasso.model_from_dict(data, expected_fingerprint="def")
    data["schema_version"] = 2
    with pytest.raises(lasso.SchemaVersionError):
        lasso.model_from_dict(data)


def test_lasso_config_validation():
    with pytest.raises(ValueError):
        lasso.LassoConfig(steps=0)
    with pytest.raises(ValueError):
        lasso.LassoConfig(validation_fraction=1.0)
