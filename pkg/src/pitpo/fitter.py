"""Coefficient fitting for equation skeletons.

Two paths: skeletons that are linear in their placeholders (every
placeholder is the leading coefficient of exactly one term and none hides
inside a term body) are solved exactly through ridge-regularized normal
equations; everything else goes through multi-restart quasi-Newton
minimization of the mean squared error with an analytic gradient from
reverse-mode differentiation of the expression tree.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .expr import EquationSkeleton, eval_node, eval_with_coeff_grad
from .expr.nodes import Coeff, collect

log = logging.getLogger(__name__)

RIDGE = 1e-10
# Fraction of training rows allowed to evaluate non-finite before the
# candidate is written off with mse = +Inf.
NONFINITE_ROW_TOLERANCE = 1e-3


@dataclass
class Dataset:
    """Columns of named inputs, a target vector and split masks.

    Masks select rows; they must be pairwise disjoint. When no masks are
    given every row is training data.
    """

    X: np.ndarray
    y: np.ndarray
    variables: tuple[str, ...]
    units: dict | None = None
    target_unit: object | None = None
    train_mask: np.ndarray | None = None
    id_test_mask: np.ndarray | None = None
    ood_test_mask: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y row counts differ")
        if self.X.shape[1] != len(self.variables):
            raise ValueError("X column count does not match variable names")
        n = self.y.shape[0]
        if self.train_mask is None:
            self.train_mask = np.ones(n, dtype=bool)
        masks = [self.train_mask, self.id_test_mask, self.ood_test_mask]
        masks = [np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool) for m in masks]
        self.train_mask, self.id_test_mask, self.ood_test_mask = masks
        for m in masks:
            if m.shape != (n,):
                raise ValueError("split mask length does not match row count")
        if np.any(self.train_mask & self.id_test_mask) or np.any(
            self.train_mask & self.ood_test_mask
        ) or np.any(self.id_test_mask & self.ood_test_mask):
            raise ValueError("split masks overlap")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise ValueError("dataset contains non-finite values")

    def env_for(self, X: np.ndarray) -> dict[str, np.ndarray]:
        """Column lookup by variable name for an (N, n_vars) slice."""
        return {name: X[:, i] for i, name in enumerate(self.variables)}

    @property
    def train_X(self) -> np.ndarray:
        return self.X[self.train_mask]

    @property
    def train_y(self) -> np.ndarray:
        return self.y[self.train_mask]


@dataclass(frozen=True)
class FitBudget:
    restarts: int = 8
    max_iters: int = 200
    grad_tol: float = 1e-10


@dataclass(frozen=True)
class FitResult:
    coeffs: np.ndarray
    mse: float
    n_iters: int
    converged: bool


def mse(pred: np.ndarray, y: np.ndarray) -> float:
    """Mean squared residual; +Inf when any element is non-finite."""
    pred = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {y.shape}")
    if pred.size == 0:
        raise ValueError("empty prediction")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(y))):
        return float("inf")
    diff = pred - y
    return float(np.mean(diff * diff))


def _is_linear(skeleton: EquationSkeleton) -> bool:
    """True when every placeholder is the support coefficient of exactly one
    term and no placeholder appears inside any term body."""
    seen: list[int] = []
    for term in skeleton.terms:
        if collect(term.phi, Coeff):
            return False
        if term.coeff_ordinal is not None:
            seen.append(term.coeff_ordinal)
    return len(seen) == len(set(seen)) == skeleton.coeff_count


def _masked_mse(pred: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """MSE over rows with finite predictions; +Inf above the tolerance.

    Returns (mse, finite_row_mask). Rows lost to non-finite predictions are
    excluded from the mean as long as they stay at or below the 0.1%
    tolerance; fully finite candidates reduce to the plain mean.
    """
    finite = np.isfinite(pred)
    n = pred.shape[0]
    bad = n - int(np.count_nonzero(finite))
    if bad > NONFINITE_ROW_TOLERANCE * n or bad == n:
        return float("inf"), finite
    diff = pred[finite] - y[finite]
    # finite-but-huge predictions may square to inf; that is the correct
    # score for such a candidate, not an error
    with np.errstate(over="ignore"):
        return float(np.mean(diff * diff)), finite


def _fit_linear(
    skeleton: EquationSkeleton, env: dict[str, np.ndarray], y: np.ndarray, n: int
) -> FitResult:
    dummy = np.zeros(skeleton.coeff_count)
    columns = np.zeros((n, skeleton.coeff_count))
    offset = np.zeros(n)
    for term in skeleton.terms:
        vals = np.broadcast_to(eval_node(term.phi, env, dummy), (n,))
        if term.coeff_ordinal is None:
            offset = offset + vals
        else:
            columns[:, term.coeff_ordinal] = vals
    finite = np.all(np.isfinite(columns), axis=1) & np.isfinite(offset) & np.isfinite(y)
    bad = n - int(np.count_nonzero(finite))
    if bad > NONFINITE_ROW_TOLERANCE * n or bad == n:
        return FitResult(np.zeros(skeleton.coeff_count), float("inf"), 0, False)
    phi = columns[finite]
    resid = y[finite] - offset[finite]
    m = phi.shape[0]
    gram = phi.T @ phi / m + RIDGE * np.eye(skeleton.coeff_count)
    rhs = phi.T @ resid / m
    try:
        coeffs = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        coeffs, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
    with np.errstate(over="ignore"):
        pred = phi @ coeffs + offset[finite]
        diff = pred - y[finite]
        return FitResult(coeffs, float(np.mean(diff * diff)), 1, True)


def _restart_points(k: int, budget: FitBudget, rng: np.random.Generator) -> list[np.ndarray]:
    grid = [
        np.zeros(k),
        np.ones(k),
        -np.ones(k),
        np.full(k, 0.1),
        np.full(k, -0.1),
    ]
    points = grid[: budget.restarts]
    while len(points) < budget.restarts:
        points.append(rng.standard_normal(k))
    return points


def fit(
    skeleton: EquationSkeleton,
    dataset: Dataset,
    budget: FitBudget | None = None,
    seed: int = 0,
) -> FitResult:
    """Fit placeholder coefficients on the training split.

    Deterministic for a given seed: the random restarts come from a local
    generator and the deterministic grid (zeros, +-1, +-0.1) always runs
    first, so the reported mse never exceeds the zero-vector mse.
    """
    budget = budget or FitBudget()
    if budget.restarts < 1:
        raise ValueError("budget.restarts must be at least 1")
    X = dataset.train_X
    y = dataset.train_y
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training split")
    env = dataset.env_for(X)
    k = skeleton.coeff_count
    if k == 0:
        value, _ = _masked_mse(_predict(skeleton, env, np.zeros(0), n), y)
        return FitResult(np.zeros(0), value, 0, True)
    if _is_linear(skeleton):
        return _fit_linear(skeleton, env, y, n)

    def objective(c: np.ndarray) -> tuple[float, np.ndarray]:
        with np.errstate(all="ignore"):
            pred, jac = eval_with_coeff_grad(skeleton.ast, env, c, k)
            finite = np.isfinite(pred) & np.all(np.isfinite(jac), axis=1)
            bad = n - int(np.count_nonzero(finite))
            if bad > NONFINITE_ROW_TOLERANCE * n or bad == n:
                return 1e300, np.zeros(k)
            resid = pred[finite] - y[finite]
            value = float(np.mean(resid * resid))
            grad = 2.0 * jac[finite].T @ resid / resid.shape[0]
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return 1e300, np.zeros(k)
        return value, grad

    rng = np.random.default_rng(seed)
    best: FitResult | None = None
    total_iters = 0
    for x0 in _restart_points(k, budget, rng):
        with warnings.catch_warnings():
            # the sentinel 1e300 objective value makes scipy's line search
            # emit overflow noise in hopeless regions; the restart loop is
            # how those regions get abandoned
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(
                objective,
                x0,
                jac=True,
                method="BFGS",
                options={"maxiter": budget.max_iters, "gtol": budget.grad_tol},
            )
        total_iters += int(res.nit)
        value, _ = _masked_mse(_predict(skeleton, env, res.x, n), y)
        candidate = FitResult(np.asarray(res.x), value, total_iters, True)
        if best is None or candidate.mse < best.mse:
            best = candidate
        if best.mse == 0.0:
            break
    assert best is not None
    if not np.isfinite(best.mse):
        best = FitResult(best.coeffs, best.mse, total_iters, False)
    else:
        best = FitResult(best.coeffs, best.mse, total_iters, True)
    return best


def _predict(skeleton, env, coeffs, n) -> np.ndarray:
    return np.broadcast_to(eval_node(skeleton.ast, env, np.asarray(coeffs, dtype=float)), (n,))


def predictions(skeleton: EquationSkeleton, coeffs: np.ndarray, dataset: Dataset, split: str = "train") -> np.ndarray:
    """Evaluate a fitted skeleton on a named split of the dataset."""
    mask = {
        "train": dataset.train_mask,
        "id_test": dataset.id_test_mask,
        "ood_test": dataset.ood_test_mask,
        "all": np.ones(dataset.y.shape[0], dtype=bool),
    }[split]
    X = dataset.X[mask]
    return _predict(skeleton, coeffs=coeffs, env=dataset.env_for(X), n=X.shape[0])


def predict_on(
    skeleton: EquationSkeleton,
    coeffs: np.ndarray,
    X: np.ndarray,
    variables: tuple[str, ...],
) -> np.ndarray:
    """Evaluate a fitted skeleton on arbitrary rows whose columns follow
    ``variables`` (a superset of the skeleton's variables is fine)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(variables):
        raise ValueError("X column count does not match variable names")
    env = {name: X[:, i] for i, name in enumerate(variables)}
    return _predict(skeleton, env=env, coeffs=coeffs, n=X.shape[0])


def nmse(pred: np.ndarray, y: np.ndarray) -> float:
    """MSE normalized by the population variance of the target.

    The constant mean predictor scores exactly 1.0. A zero-variance target
    gives 0.0 for an exact fit and +Inf otherwise.
    """
    value = mse(pred, y)
    var = float(np.asarray(y, dtype=float).var())
    if var == 0.0:
        return 0.0 if value == 0.0 else float("inf")
    return value / var
