"""scikit-learn style wrappers around the fitting routines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .mm import SolverConfig, fit, fit_reml, fit_two_vc
from .model import VarCompProblem
from .multivariate import MultiVarCompProblem, fit_mvt, fit_mvt_two_vc
from .path import default_grid, entry_ranking, lambda_max, solution_path


def _design(X, n, fit_intercept):
    cols = []
    if fit_intercept:
        cols.append(np.ones((n, 1)))
    if X is not None:
        X = np.asarray(X, dtype=float)
        cols.append(X.reshape(n, -1))
    return np.hstack(cols) if cols else None


def _split(coef, fit_intercept):
    coef = np.asarray(coef, dtype=float)
    if fit_intercept:
        return coef[0], coef[1:]
    return np.zeros(coef.shape[1:]), coef


class VarianceComponentsRegressor(RegressorMixin, BaseEstimator):
    """Linear model with covariance ``sum_i sigma2[i] * V[i]``.

    Parameters
    ----------
    method : {"mm", "em", "fs", "hybrid"}
    accelerate : bool
    reml : bool
        Estimate variance components by restricted likelihood.
    fast_two_components : bool
        Use the eigendecomposition shortcut when exactly two bases are given.
    fit_intercept : bool
    tol, max_iter : solver tolerances.
    penalty : PenaltySpec, optional

    Attributes
    ----------
    coef_, intercept_ : mean coefficients.
    sigma2_ : ndarray of variance components.
    loglik_, n_iter_, converged_, kkt_residual_ : fit diagnostics.
    result_ : FitResult
    """

    def __init__(self, method="mm", accelerate=False, reml=False, fast_two_components=False,
                 fit_intercept=True, tol=1e-6, max_iter=5000, penalty=None):
        self.method = method
        self.accelerate = accelerate
        self.reml = reml
        self.fast_two_components = fast_two_components
        self.fit_intercept = fit_intercept
        self.tol = tol
        self.max_iter = max_iter
        self.penalty = penalty

    def fit(self, X, y, covariances):
        y = np.asarray(y, dtype=float).ravel()
        problem = VarCompProblem(y, _design(X, y.shape[0], self.fit_intercept), tuple(covariances))
        config = SolverConfig(strategy=self.method, accelerate=self.accelerate, rel_tol=self.tol,
                              max_iter=self.max_iter, penalty=self.penalty)
        if self.reml:
            res = fit_reml(problem, config)
        elif self.fast_two_components and problem.m == 2:
            res = fit_two_vc(problem, config)
        else:
            res = fit(problem, config)
        self.result_ = res
        self.intercept_, self.coef_ = _split(res.params.beta, self.fit_intercept)
        self.sigma2_ = res.params.sigma2
        self.loglik_ = res.loglik
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        self.kkt_residual_ = res.trace.kkt_residual
        self.n_features_in_ = 0 if X is None else np.asarray(X).reshape(y.shape[0], -1).shape[1]
        return self

    def predict(self, X):
        """Mean prediction ``intercept_ + X @ coef_``."""
        check_is_fitted(self, "coef_")
        if X is None:
            raise ValueError("X is required for prediction; pass an (n, 0) array for intercept-only models")
        X = np.asarray(X, dtype=float).reshape(np.shape(X)[0], -1)
        return self.intercept_ + X @ self.coef_


class MultivariateVarianceComponents(RegressorMixin, BaseEstimator):
    """Matrix-response model with covariance ``sum_i Gamma[i] (x) V[i]``.

    Attributes
    ----------
    coef_ : (p, d) ndarray
    intercept_ : (d,) ndarray
    gamma_ : list of (d, d) covariance components.
    """

    def __init__(self, fast_two_components=False, fit_intercept=True, tol=1e-6,
                 max_iter=5000, penalty=None):
        self.fast_two_components = fast_two_components
        self.fit_intercept = fit_intercept
        self.tol = tol
        self.max_iter = max_iter
        self.penalty = penalty

    def fit(self, X, Y, covariances):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        n, d = Y.shape
        problem = MultiVarCompProblem(Y, _design(X, n, self.fit_intercept), tuple(covariances))
        config = SolverConfig(rel_tol=self.tol, max_iter=self.max_iter, penalty=self.penalty)
        runner = fit_mvt_two_vc if self.fast_two_components and problem.m == 2 else fit_mvt
        res = runner(problem, config)
        self.result_ = res
        B = np.zeros((0, d)) if res.params.B is None else np.asarray(res.params.B).reshape(-1, d)
        self.intercept_, self.coef_ = _split(B, self.fit_intercept)
        self.gamma_ = res.params.Gamma
        self.loglik_ = res.loglik
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=float).reshape(np.shape(X)[0], -1)
        return self.intercept_ + X @ self.coef_


class LassoVarianceComponentsPath(BaseEstimator):
    """Lasso solution path over variance components with entry ranking.

    Identity bases are left unpenalized unless ``penalized`` says otherwise.

    Attributes
    ----------
    lambda_max_ : float or None
        Smallest penalty with every penalized component at zero (auto grid only).
    lambdas_ : ndarray
    path_ : list of PathRecord
    ranking_ : list of dict
    """

    def __init__(self, n_lambda=50, lambda_ratio=1e-3, lambda_grid=None, penalized=None,
                 fit_intercept=True, tol=1e-6, max_iter=5000):
        self.n_lambda = n_lambda
        self.lambda_ratio = lambda_ratio
        self.lambda_grid = lambda_grid
        self.penalized = penalized
        self.fit_intercept = fit_intercept
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, covariances):
        y = np.asarray(y, dtype=float).ravel()
        problem = VarCompProblem(y, _design(X, y.shape[0], self.fit_intercept), tuple(covariances))
        config = SolverConfig(rel_tol=self.tol, max_iter=self.max_iter)
        self.lambda_max_ = None
        grid = self.lambda_grid
        if grid is None:
            self.lambda_max_ = lambda_max(problem, config, self.penalized)
            grid = default_grid(self.lambda_max_, self.n_lambda, self.lambda_ratio)
        self.path_ = solution_path(problem, grid, config, self.penalized)
        self.lambdas_ = np.array([r.lam for r in self.path_])
        self.ranking_ = entry_ranking(self.path_, problem, self.penalized, config)
        return self

    @property
    def sigma2_path_(self) -> np.ndarray:
        """(n_lambda, m) array of variance components along the path."""
        check_is_fitted(self, "path_")
        return np.vstack([r.sigma2 for r in self.path_])
