"""Epsilon-insensitive support vector regression.

The dual is solved by sequential minimal optimization on the doubled
variable vector (alpha, alpha*), picking the maximal-KKT-violating pair
each iteration. Prediction follows sum_i beta_i K(sv_i, x) + b with
beta_i = alpha_i - alpha*_i.

``KernelSvr`` wraps the solver in a scikit-learn estimator (fit/predict,
get_params) with optional feature standardization fitted on the training
data only. Grid search uses contiguous-block cross-validation folds so
time-ordered data never leaks across the fold boundary, scored by MAE.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .metrics import mae

KERNEL_KINDS = ("linear", "polynomial", "rbf")


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    gamma: float = 1.0
    degree: int = 3
    coef0: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and self.gamma <= 0:
            raise ValueError(f"rbf gamma must be positive, got {self.gamma}")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValueError(f"polynomial degree must be >= 1, got {self.degree}")


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"kernel arguments differ in dimension: {x.shape} vs {y.shape}")
    return float(kernel_matrix(spec, x[None, :], y[None, :])[0, 0])


def kernel_matrix(spec: KernelSpec, X, Y=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = X if Y is None else np.asarray(Y, dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"kernel arguments differ in dimension: {X.shape[1]} vs {Y.shape[1]}")
    if spec.kind == "linear":
        return X @ Y.T
    if spec.kind == "polynomial":
        return (X @ Y.T + spec.coef0) ** spec.degree
    sq = (X * X).sum(axis=1)[:, None] + (Y * Y).sum(axis=1)[None, :] - 2.0 * (X @ Y.T)
    return np.exp(-spec.gamma * np.maximum(sq, 0.0))


@dataclass
class SvrModel:
    support_vectors: np.ndarray  # [m, d]
    dual_coefs: np.ndarray  # [m], beta_i = alpha_i - alpha*_i
    bias: float
    kernel: KernelSpec
    epsilon: float
    C: float
    converged: bool = True
    iterations: int = 0
    # Dual coefficients over the full training set (zeros included); kept for
    # KKT audits, not serialized.
    full_dual: np.ndarray | None = field(default=None, repr=False)


def _smo_solve(K: np.ndarray, y: np.ndarray, C: float, epsilon: float, tol: float,
               max_iter: int) -> tuple[np.ndarray, float, bool, int]:
    """SMO on the doubled (alpha, alpha*) variables.

    The first working-set index is the maximal KKT violator; the second is
    picked by the second-order rule (largest guaranteed objective decrease),
    which avoids the zigzagging the plain maximal-pair rule exhibits at
    small epsilon. Returns (beta, bias, converged, iterations).
    """
    n = len(y)
    s = np.concatenate([np.ones(n), -np.ones(n)])
    alpha = np.zeros(2 * n)
    grad = np.concatenate([epsilon - y, epsilon + y])
    diag2 = np.concatenate([np.diag(K)] * 2)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        vals = -s * grad
        up = np.where(s > 0, alpha < C, alpha > 0)
        low = np.where(s > 0, alpha > 0, alpha < C)
        up_vals = np.where(up, vals, -np.inf)
        low_vals = np.where(low, vals, np.inf)
        i = int(np.argmax(up_vals))
        m_up = up_vals[i]
        m_low = float(np.min(low_vals))
        if m_up - m_low < tol:
            converged = True
            break
        ip = i % n
        krow = np.concatenate([K[ip]] * 2)
        b_vec = m_up - vals
        eligible = low & (b_vec > 0)
        eta_vec = np.maximum(diag2[i] + diag2 - 2.0 * krow, 1e-12)
        gain = np.where(eligible, b_vec * b_vec / eta_vec, -np.inf)
        j = int(np.argmax(gain))
        jp = j % n
        eta = max(diag2[i] + diag2[j] - 2.0 * K[ip, jp], 1e-12)
        delta = (m_up - vals[j]) / eta
        cap_i = C - alpha[i] if s[i] > 0 else alpha[i]
        cap_j = alpha[j] if s[j] > 0 else C - alpha[j]
        delta = min(delta, cap_i, cap_j)
        if delta <= 0:
            break
        alpha[i] = min(max(alpha[i] + s[i] * delta, 0.0), C)
        alpha[j] = min(max(alpha[j] - s[j] * delta, 0.0), C)
        kcol = np.concatenate([K[:, ip] - K[:, jp]] * 2)
        grad += s * kcol * delta

    vals = -s * grad
    ridge = 1e-8 * C
    free = (alpha > ridge) & (alpha < C - ridge)
    if free.any():
        bias = float(vals[free].mean())
    else:
        up = np.where(s > 0, alpha < C, alpha > 0)
        low = np.where(s > 0, alpha > 0, alpha < C)
        hi = np.max(np.where(up, vals, -np.inf))
        lo = np.min(np.where(low, vals, np.inf))
        bias = float((hi + lo) / 2.0)
    beta = alpha[:n] - alpha[n:]
    return beta, bias, converged, it


def fit_svr(
    X,
    y,
    kernel: KernelSpec,
    C: float = 1.0,
    epsilon: float = 0.1,
    tol: float = 1e-3,
    max_iter: int | None = None,
) -> SvrModel:
    """Train on (X, y) as given (no scaling); keeps only the support vectors.

    ``max_iter`` counts two-variable updates; the default allows ten sweeps
    of n updates each (10 * n^2, capped at 5e6). On iteration exhaustion the
    partially-converged model is still returned, flagged, with a warning
    carrying the residual KKT-violation count.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X is {X.shape}, y is {y.shape}")
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if C <= 0 or epsilon < 0:
        raise ValueError(f"require C > 0 and epsilon >= 0, got C={C}, epsilon={epsilon}")
    if max_iter is None:
        max_iter = min(max(10 * n * n, 100_000), 5_000_000)
    K = kernel_matrix(kernel, X)
    beta, bias, converged, iterations = _smo_solve(K, y, C, epsilon, tol, max_iter)
    keep = np.abs(beta) > 1e-12
    model = SvrModel(
        support_vectors=X[keep].copy(),
        dual_coefs=beta[keep].copy(),
        bias=bias,
        kernel=kernel,
        epsilon=epsilon,
        C=C,
        converged=converged,
        iterations=iterations,
        full_dual=beta,
    )
    if not converged:
        bad = kkt_violations(model, X, y, tol)
        warnings.warn(
            f"SMO stopped after {iterations} iterations with {bad} KKT violations",
            RuntimeWarning,
            stacklevel=2,
        )
    return model


def predict(model: SvrModel, x) -> float | np.ndarray:
    """Sum of kernel responses against the support set plus bias.

    Accepts one vector (returns a float) or a matrix of rows.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    d = model.support_vectors.shape[1] if model.support_vectors.size else rows.shape[1]
    if rows.shape[1] != d:
        raise ValueError(
            f"query dimension {rows.shape[1]} does not match support vectors {d}"
        )
    out = np.full(rows.shape[0], model.bias, dtype=np.float64)
    if model.support_vectors.size:
        out += kernel_matrix(model.kernel, rows, model.support_vectors) @ model.dual_coefs
    return float(out[0]) if single else out


def kkt_violations(model: SvrModel, X, y, tol: float) -> int:
    """Count training samples whose (residual, coefficient) pairing breaks
    the epsilon-tube optimality conditions beyond tol."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if model.full_dual is None or len(model.full_dual) != len(y):
        raise ValueError("model carries no dual coefficients for this training set")
    err = predict(model, X) - y
    beta = model.full_dual
    bad = 0
    c_edge = model.C * (1 - 1e-8)
    for e, b in zip(err, beta):
        sign_ok = abs(e) <= tol or np.sign(-e) == np.sign(b)
        if abs(b) <= 1e-12:
            ok = abs(e) <= model.epsilon + tol
        elif abs(b) >= c_edge:
            ok = abs(e) >= model.epsilon - tol and sign_ok
        else:
            ok = abs(abs(e) - model.epsilon) <= tol and sign_ok
        bad += not ok
    return bad


class KernelSvr(BaseEstimator, RegressorMixin):
    """Epsilon-SVR estimator over the SMO solver.

    Parameters
    ----------
    kernel : 'linear', 'polynomial' or 'rbf'
    C : box constraint on the dual coefficients
    epsilon : half-width of the insensitive tube
    gamma : RBF width; 'auto' resolves to 1/n_features at fit time
    degree, coef0 : polynomial kernel parameters
    tol : KKT tolerance for the solver stopping rule
    max_iter : SMO iteration cap; None means 10 * n_samples
    standardize : z-score features using statistics of the fit data
    """

    def __init__(self, kernel="rbf", C=1.0, epsilon=0.1, gamma="auto", degree=3,
                 coef0=1.0, tol=1e-3, max_iter=None, standardize=True):
        self.kernel = kernel
        self.C = C
        self.epsilon = epsilon
        self.gamma = gamma
        self.degree = degree
        self.coef0 = coef0
        self.tol = tol
        self.max_iter = max_iter
        self.standardize = standardize

    def _spec(self, n_features: int) -> KernelSpec:
        gamma = 1.0 / n_features if self.gamma == "auto" else float(self.gamma)
        return KernelSpec(kind=self.kernel, gamma=gamma, degree=self.degree, coef0=self.coef0)

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            std = X.std(axis=0)
            self.scale_ = np.where(std > 1e-12, std, 1.0)
            X = (X - self.mean_) / self.scale_
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        self.model_ = fit_svr(
            X, y, self._spec(X.shape[1]), C=self.C, epsilon=self.epsilon,
            tol=self.tol, max_iter=self.max_iter,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return predict(self.model_, (X - self.mean_) / self.scale_)


@dataclass(frozen=True)
class SvrParams:
    kind: str
    C: float
    epsilon: float
    gamma: float | None = None
    degree: int | None = None
    coef0: float = 1.0

    def make_estimator(self, tol: float, standardize: bool, max_iter=None) -> KernelSvr:
        return KernelSvr(
            kernel=self.kind,
            C=self.C,
            epsilon=self.epsilon,
            gamma=self.gamma if self.gamma is not None else "auto",
            degree=self.degree if self.degree is not None else 3,
            coef0=self.coef0,
            tol=tol,
            max_iter=max_iter,
            standardize=standardize,
        )


@dataclass(frozen=True)
class SvrGrid:
    """Hyperparameter grid; gamma candidates are factors of 1/n_features."""

    kernels: tuple[str, ...] = ("linear", "rbf")
    C: tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)
    epsilon: tuple[float, ...] = (0.001, 0.01, 0.1)
    gamma_factors: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    degrees: tuple[int, ...] = (2, 3)
    coef0: float = 1.0

    def points(self, n_features: int) -> list[SvrParams]:
        pts = []
        for kind in self.kernels:
            for c in self.C:
                for eps in self.epsilon:
                    if kind == "linear":
                        pts.append(SvrParams(kind, c, eps))
                    elif kind == "rbf":
                        for f in self.gamma_factors:
                            pts.append(SvrParams(kind, c, eps, gamma=f / n_features))
                    else:
                        for d in self.degrees:
                            pts.append(SvrParams(kind, c, eps, degree=d, coef0=self.coef0))
        return pts


@dataclass
class GridSearchReport:
    tried: list[tuple[SvrParams, float, list[float]]]  # (point, mean MAE, fold MAEs)
    best: SvrParams
    best_mae: float

    def as_rows(self) -> list[str]:
        rows = []
        for params, mean_mae, fold_maes in self.tried:
            folds = ";".join(f"{m:.12g}" for m in fold_maes)
            rows.append(
                f"{params.kind},{params.C:g},{params.epsilon:g},"
                f"{'' if params.gamma is None else format(params.gamma, 'g')},"
                f"{'' if params.degree is None else params.degree},"
                f"{mean_mae:.12g},{folds}"
            )
        return rows


def contiguous_folds(n: int, folds: int) -> list[np.ndarray]:
    """Index blocks in time order; no shuffling across the time axis."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if n < folds:
        raise ValueError(f"{n} samples cannot fill {folds} folds")
    return np.array_split(np.arange(n), folds)


def cross_val_mae(X, y, params: SvrParams, folds: int, tol: float = 1e-3,
                  standardize: bool = True, max_iter=None) -> list[float]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    maes = []
    for block in contiguous_folds(len(y), folds):
        mask = np.ones(len(y), dtype=bool)
        mask[block] = False
        est = params.make_estimator(tol, standardize, max_iter)
        est.fit(X[mask], y[mask])
        maes.append(mae(est.predict(X[block]), y[block]))
    return maes


def grid_search(
    X,
    y,
    grid: SvrGrid = SvrGrid(),
    folds: int = 5,
    seed: int = 0,
    tol: float = 1e-3,
    standardize: bool = True,
    max_iter=None,
) -> tuple[GridSearchReport, KernelSvr]:
    """Mean held-out MAE over contiguous folds per grid point; the best point
    (ties to the first in scan order) is refit on all rows.

    ``seed`` is part of the operation contract but the solver and the fold
    arithmetic are deterministic, so it currently selects nothing.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    points = grid.points(X.shape[1])
    if not points:
        raise ValueError("empty hyperparameter grid")
    tried = []
    best_idx, best_mean = 0, np.inf
    for idx, params in enumerate(points):
        fold_maes = cross_val_mae(X, y, params, folds, tol, standardize, max_iter)
        mean_mae = float(np.mean(fold_maes))
        tried.append((params, mean_mae, fold_maes))
        if mean_mae < best_mean:
            best_idx, best_mean = idx, mean_mae
    best = points[best_idx]
    final = best.make_estimator(tol, standardize, max_iter).fit(X, y)
    return GridSearchReport(tried=tried, best=best, best_mae=best_mean), final


def select_feature_length(
    ranked_indices,
    X,
    y,
    lengths,
    folds: int = 5,
    grid: SvrGrid = SvrGrid(),
    seed: int = 0,
    tol: float = 1e-3,
    max_iter=None,
) -> tuple[int, list[tuple[int, GridSearchReport]]]:
    """Grid-search the SVR on each top-L ranked prefix; pick the L with the
    lowest best CV MAE (ties toward the smaller L)."""
    ranked_indices = np.asarray(ranked_indices)
    X = np.asarray(X, dtype=np.float64)
    lengths = sorted(int(l) for l in lengths)
    if not lengths:
        raise ValueError("empty lengths grid")
    if lengths[0] < 1 or lengths[-1] > X.shape[1]:
        raise ValueError(f"lengths must lie in [1, {X.shape[1]}]")
    if lengths[-1] > len(ranked_indices):
        raise ValueError(
            f"asked for top {lengths[-1]} features but ranking holds {len(ranked_indices)}"
        )
    reports = []
    best_len, best_mae_val = lengths[0], np.inf
    for length in lengths:
        cols = ranked_indices[:length]
        report, _ = grid_search(
            X[:, cols], y, grid, folds=folds, seed=seed, tol=tol, max_iter=max_iter
        )
        reports.append((length, report))
        if report.best_mae < best_mae_val:
            best_len, best_mae_val = length, report.best_mae
    return best_len, reports
