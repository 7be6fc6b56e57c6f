"""
Lasso regression by cyclic coordinate descent, with a multi-step adaptive
wrapper that reweights the L1 penalty from the previous step's coefficients.

Features are standardized so each centered column has unit sum of squares,
and the objective is

    (1/2S) * ||y - s0 - X s||^2 + lambda * sum_k w_k |s_k|
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from common.helpers import decode_float, read_json, write_json

MODEL_SCHEMA_VERSION = 1


class StandardizationError(ValueError):
    pass


class ValidationFoldError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


class FingerprintMismatchError(ModelFileError):
    pass


class SchemaVersionError(ModelFileError):
    pass


@dataclass(frozen=True)
class LassoConfig:
    steps: int = 3
    lambda_count: int = 100
    lambda_eps: float = 1e-3
    penalty_scale: float = 1.0
    validation_fraction: float = 0.2
    adaptive_delta: float = 1e-6
    zero_weight_exclusion: bool = False
    tol: float = 1e-7
    max_sweeps: int = 10000

    def __post_init__(self):
        if self.steps < 1 or self.lambda_count < 1:
            raise ValueError("steps and lambda_count must be at least 1")
        if not 0 < self.lambda_eps < 1:
            raise ValueError(f"lambda_eps must be in (0, 1), got {self.lambda_eps}")
        if not self.penalty_scale > 0 or not self.adaptive_delta > 0 or not self.tol > 0:
            raise ValueError("penalty_scale, adaptive_delta and tol must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")


@dataclass(frozen=True)
class StandardizationParams:
    mu_x: np.ndarray
    std_x: np.ndarray
    mu_y: float
    constant_columns: tuple = ()

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mu_x) / self.std_x

    def inverse(self, Xs):
        return np.asarray(Xs, dtype=float) * self.std_x + self.mu_x


@dataclass(frozen=True)
class CCDResult:
    coefficients: np.ndarray
    intercept: float
    objective: float
    sweeps: int
    converged: bool
    objective_trace: tuple = ()


@dataclass(frozen=True)
class LambdaPath:
    values: np.ndarray

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class LassoModel:
    intercept: float
    coefficients: np.ndarray
    lam: float
    adaptive_weights: np.ndarray
    standardization: StandardizationParams
    diagnostics: dict = field(default_factory=dict)
    layout_fingerprint: str = None
    feature_names: tuple = ()

    @property
    def support(self):
        return tuple(int(k) for k in np.flatnonzero(self.coefficients))


def standardize(X, y):
    """Center and scale X columns to sum 0 / sum of squares 1; center y."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise StandardizationError(f"incompatible shapes X{X.shape} y{y.shape}")
    if X.shape[0] < 2:
        raise StandardizationError(f"need at least 2 observations, got {X.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise StandardizationError("observations contain non-finite values")

    mu_x = X.mean(axis=0)
    centered = X - mu_x
    constant = np.ptp(X, axis=0) == 0
    centered[:, constant] = 0.0
    std_x = np.sqrt(np.sum(centered ** 2, axis=0))
    std_x[constant] = 1.0
    mu_y = float(y.mean())

    params = StandardizationParams(
        mu_x=mu_x,
        std_x=std_x,
        mu_y=mu_y,
        constant_columns=tuple(int(k) for k in np.flatnonzero(constant)),
    )
    return centered / std_x, y - mu_y, params


def soft_threshold(z, gamma):
    if np.any(np.asarray(gamma) < 0):
        raise ValueError("threshold must be non-negative")
    return np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)


def _penalty(coefficients, lam, weights):
    nonzero = coefficients != 0
    return lam * float(np.sum(weights[nonzero] * np.abs(coefficients[nonzero])))


def objective(Xs, ys, coefficients, lam, weights=None, intercept=None):
    Xs = np.asarray(Xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    coefficients = np.asarray(coefficients, dtype=float)
    weights = np.ones(Xs.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    if intercept is None:
        intercept = float(ys.mean() - Xs.mean(axis=0) @ coefficients)
    residual = ys - intercept - Xs @ coefficients
    return float(residual @ residual) / (2 * len(ys)) + _penalty(coefficients, lam, weights)


def kkt_residual(Xs, ys, coefficients, lam, weights=None):
    """Largest violation of the Lasso optimality conditions."""
    Xs = np.asarray(Xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    coefficients = np.asarray(coefficients, dtype=float)
    weights = np.ones(Xs.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    Xc = Xs - Xs.mean(axis=0)
    yc = ys - ys.mean()
    grad = Xc.T @ (yc - Xc @ coefficients) / len(ys)

    active = coefficients != 0
    violation = np.zeros_like(grad)
    bound = np.where(np.isfinite(weights), lam * np.where(np.isfinite(weights), weights, 0.0), np.inf)
    violation[~active] = np.maximum(np.abs(grad[~active]) - bound[~active], 0.0)
    violation[active] = np.abs(grad[active] - bound[active] * np.sign(coefficients[active]))
    return float(np.max(violation, initial=0.0))


def ccd_fit(Xs, ys, lam, weights=None, tol=1e-7, max_sweeps=10000, init=None):
    """
    Minimize the weighted Lasso objective by cyclic coordinate descent.

    Works on the covariance form (G = X'X/S, c = X'y/S) and alternates full
    sweeps with sweeps over the active set. Convergence is a full sweep whose
    largest coefficient change is below `tol`.
    """
    Xs = np.asarray(Xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if not (np.all(np.isfinite(Xs)) and np.all(np.isfinite(ys))):
        raise ValueError("ccd_fit inputs contain non-finite values")
    if lam < 0 or not math.isfinite(lam):
        raise ValueError(f"lambda must be a finite non-negative number, got {lam}")
    S, D = Xs.shape
    weights = np.ones(D) if weights is None else np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("penalty weights must be non-negative")

    x_mean = Xs.mean(axis=0)
    y_mean = float(ys.mean())
    Xc = Xs - x_mean
    yc = ys - y_mean
    G = Xc.T @ Xc / S
    c = Xc.T @ yc / S
    diag = np.diag(G).copy()
    usable = diag > 0
    # infinite weight pins a coefficient at zero, even at lambda = 0
    thresholds = np.where(np.isinf(weights), np.inf, lam * np.where(np.isinf(weights), 0.0, weights))

    beta = np.zeros(D) if init is None else np.where(usable, np.asarray(init, dtype=float), 0.0)
    grad = c - G @ beta

    def sweep(indices):
        largest = 0.0
        for k in indices:
            old = beta[k]
            new = soft_threshold(grad[k] + diag[k] * old, thresholds[k]) / diag[k]
            if new != old:
                grad[:] -= G[:, k] * (new - old)
                beta[k] = new
                largest = max(largest, abs(new - old))
        return largest

    everything = np.flatnonzero(usable)
    trace = []
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        change = sweep(everything)
        sweeps += 1
        trace.append(objective(Xs, ys, beta, lam, weights, y_mean - x_mean @ beta))
        if change < tol:
            converged = True
            break
        active = np.flatnonzero(beta != 0)
        while sweeps < max_sweeps:
            sweeps += 1
            if sweep(active) < tol:
                break

    intercept = float(y_mean - x_mean @ beta)
    if not converged:
        logging.warning(f"CCD stopped after {sweeps} sweeps without reaching tol {tol:g} (lambda {lam:.4g})")
    return CCDResult(
        coefficients=beta,
        intercept=intercept,
        objective=trace[-1] if trace else objective(Xs, ys, beta, lam, weights, intercept),
        sweeps=sweeps,
        converged=converged,
        objective_trace=tuple(trace),
    )


def lambda_path(Xs, ys, count=100, eps=1e-3, weights=None):
    """Geometric sequence from lambda_max down to eps * lambda_max."""
    Xs = np.asarray(Xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if count < 1:
        raise ValueError("path needs at least one value")
    weights = np.ones(Xs.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    S = len(ys)
    c = np.abs((Xs - Xs.mean(axis=0)).T @ (ys - ys.mean()) / S)
    penalized = np.isfinite(weights) & (weights > 0)
    lam_max = float(np.max(c[penalized] / weights[penalized], initial=0.0))
    if lam_max == 0.0:
        return LambdaPath(values=np.array([0.0]))
    if count == 1:
        return LambdaPath(values=np.array([lam_max]))
    values = lam_max * np.power(eps, np.linspace(0.0, 1.0, count))
    values[0] = lam_max
    return LambdaPath(values=values)


def _build_model(result, lam, weights, params, diagnostics, layout_fingerprint=None, feature_names=()):
    return LassoModel(
        intercept=result.intercept,
        coefficients=result.coefficients,
        lam=float(lam),
        adaptive_weights=np.asarray(weights, dtype=float),
        standardization=params,
        diagnostics={
            "objective": result.objective,
            "sweeps": result.sweeps,
            "converged": result.converged,
            **diagnostics,
        },
        layout_fingerprint=layout_fingerprint,
        feature_names=tuple(feature_names),
    )


def fit_lasso(X, y, lam, weights=None, tol=1e-7, max_sweeps=10000):
    """Standardize and fit at a single lambda."""
    Xs, ys, params = standardize(X, y)
    weights = np.ones(Xs.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    result = ccd_fit(Xs, ys, lam, weights, tol=tol, max_sweeps=max_sweeps)
    return _build_model(result, lam, weights, params, {})


def validation_split(S, fraction, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(S)
    n_val = int(math.floor(fraction * S + 0.5))
    if n_val < 1 or S - n_val < 2:
        raise ValidationFoldError(f"validation fraction {fraction} leaves no usable fold among {S} rows")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def select_lambda(Xs, ys, train, val, weights, count=100, eps=1e-3, tol=1e-7, max_sweeps=10000):
    """
    Fit along the path on the training rows and pick the lambda with the
    smallest validation MSE. Ties go to the larger lambda.
    """
    path = lambda_path(Xs[train], ys[train], count, eps, weights)
    best_lam, best_mse = None, math.inf
    beta = None
    errors = []
    for lam in path.values:
        result = ccd_fit(Xs[train], ys[train], lam, weights, tol=tol, max_sweeps=max_sweeps, init=beta)
        beta = result.coefficients
        residual = ys[val] - result.intercept - Xs[val] @ beta
        mse = float(residual @ residual) / len(val)
        errors.append(mse)
        logging.debug(f"  lambda {lam:.4g}: {np.count_nonzero(beta)} nonzero, validation MSE {mse:.4g}")
        if mse < best_mse:
            best_lam, best_mse = float(lam), mse
    return best_lam, best_mse, path, errors


def msa_lasso_fit(
    X,
    y,
    steps=3,
    lambda_count=100,
    lambda_eps=1e-3,
    penalty_scale=1.0,
    validation_fraction=0.2,
    adaptive_delta=1e-6,
    zero_weight_exclusion=False,
    tol=1e-7,
    max_sweeps=10000,
    seed=0,
    layout_fingerprint=None,
    feature_names=(),
):
    """
    Multi-step adaptive Lasso.

    Step 1 uses unit weights; every later step reweights with
    w_k = 1 / (|s_k| + delta) from the previous step. Each step selects lambda
    on a held-out fold and refits on all rows.
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    Xs, ys, params = standardize(X, y)
    S, D = Xs.shape
    train, val = validation_split(S, validation_fraction, seed)

    weights = np.ones(D)
    result, lam, history = None, None, []
    for step in range(1, steps + 1):
        scaled = penalty_scale * weights
        lam, mse, path, _ = select_lambda(
            Xs, ys, train, val, scaled, lambda_count, lambda_eps, tol=tol, max_sweeps=max_sweeps
        )
        result = ccd_fit(Xs, ys, lam, scaled, tol=tol, max_sweeps=max_sweeps)
        nonzero = int(np.count_nonzero(result.coefficients))
        history.append({"step": step, "lambda": lam, "validation_mse": mse, "nonzero": nonzero})
        logging.info(f"MSA step {step}/{steps}: lambda {lam:.4g}, {nonzero}/{D} nonzero, validation MSE {mse:.4g}")

        if step < steps:
            previous = np.abs(result.coefficients)
            weights = 1.0 / (previous + adaptive_delta)
            if zero_weight_exclusion:
                weights[previous == 0] = np.inf

    return _build_model(
        result,
        lam,
        penalty_scale * weights,
        params,
        {"steps": history, "validation_rows": int(len(val))},
        layout_fingerprint=layout_fingerprint,
        feature_names=feature_names,
    )


def predict(model, x_raw):
    """Response estimate for one feature vector or a matrix of them."""
    x = np.asarray(x_raw, dtype=float)
    dims = len(model.coefficients)
    if x.shape[-1:] != (dims,) or x.ndim > 2:
        raise ValueError(f"expected {dims} features, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature vector contains non-finite values")
    xs = model.standardization.transform(x)
    estimate = model.standardization.mu_y + model.intercept + xs @ model.coefficients
    return float(estimate) if x.ndim == 1 else estimate


def model_to_dict(model):
    params = model.standardization
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "intercept": model.intercept,
        "coefficients": model.coefficients.tolist(),
        "lambda": model.lam,
        "weights": model.adaptive_weights.tolist(),
        "mu_x": params.mu_x.tolist(),
        "std_x": params.std_x.tolist(),
        "mu_y": params.mu_y,
        "constant_columns": list(params.constant_columns),
        "diagnostics": model.diagnostics,
        "layout_fingerprint": model.layout_fingerprint,
        "feature_names": list(model.feature_names),
    }


def model_from_dict(data, expected_fingerprint=None):
    if data.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"model schema version {data.get('schema_version')} is not supported (expected {MODEL_SCHEMA_VERSION})"
        )
    if expected_fingerprint is not None and data.get("layout_fingerprint") != expected_fingerprint:
        raise FingerprintMismatchError("model was trained on a different feature layout")
    params = StandardizationParams(
        mu_x=np.array(data["mu_x"], dtype=float),
        std_x=np.array(data["std_x"], dtype=float),
        mu_y=float(data["mu_y"]),
        constant_columns=tuple(data["constant_columns"]),
    )
    return LassoModel(
        intercept=float(data["intercept"]),
        coefficients=np.array(data["coefficients"], dtype=float),
        lam=float(data["lambda"]),
        adaptive_weights=np.array([decode_float(w) for w in data["weights"]], dtype=float),
        standardization=params,
        diagnostics=data.get("diagnostics", {}),
        layout_fingerprint=data.get("layout_fingerprint"),
        feature_names=tuple(data.get("feature_names", ())),
    )


def save_model(path, model):
    return write_json(path, model_to_dict(model))


def load_model(path, expected_fingerprint=None):
    return model_from_dict(read_json(path), expected_fingerprint)
