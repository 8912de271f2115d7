"""Reference predictors: OLS, cross-validated LASSO and a PCA factor model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import to_matrix
from .errors import DimensionMismatch, GridEmpty, NonConvergence, SingularDesign

SCHEMA_VERSION = "1.0"


def _xy(X, Y):
    X = to_matrix(X)
    Y = to_matrix(Y)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("X and Y must be finite")
    return X, Y


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OlsModel:
    coefficients: np.ndarray  # p x q
    intercept: np.ndarray  # q
    singular: bool = False

    def predict(self, X) -> np.ndarray:
        X = to_matrix(X)
        if X.shape[1] != self.coefficients.shape[0]:
            raise DimensionMismatch(f"X has {X.shape[1]} columns, model expects {self.coefficients.shape[0]}")
        return X @ self.coefficients + self.intercept

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "ols",
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept.tolist(),
            "singular": self.singular,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OlsModel":
        icpt = np.asarray(d["intercept"], dtype=float)
        coef = np.asarray(d["coefficients"], dtype=float).reshape(-1, icpt.shape[0])
        return cls(coef, icpt, bool(d.get("singular", False)))


def fit_ols(X, Y) -> OlsModel:
    """Least squares with intercept, solved by SVD on centred data.

    A rank-deficient design yields the minimum-norm solution and a
    :class:`SingularDesign` warning.
    """
    X, Y = _xy(X, Y)
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    coef, _, rank, sv = np.linalg.lstsq(X - xm, Y - ym, rcond=None)
    singular = bool(rank < X.shape[1])
    if singular:
        warnings.warn(f"design has rank {rank} < {X.shape[1]}; minimum-norm solution", SingularDesign, stacklevel=2)
    return OlsModel(coef, ym - xm @ coef, singular)


# ---------------------------------------------------------------------------
# LASSO
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LassoModel:
    coefficients: np.ndarray  # p, raw scale
    intercept: float
    lam: float
    cv_mse: tuple = ()
    lambda_path: tuple = ()
    converged: bool = True

    def predict(self, X) -> np.ndarray:
        X = to_matrix(X)
        if X.shape[1] != self.coefficients.shape[0]:
            raise DimensionMismatch(f"X has {X.shape[1]} columns, model expects {self.coefficients.shape[0]}")
        return X @ self.coefficients + self.intercept

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "lasso",
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "lambda": self.lam,
            "cv_mse": list(self.cv_mse),
            "lambda_path": list(self.lambda_path),
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LassoModel":
        return cls(
            np.asarray(d["coefficients"], dtype=float),
            float(d["intercept"]),
            float(d["lambda"]),
            tuple(d.get("cv_mse", ())),
            tuple(d.get("lambda_path", ())),
            bool(d.get("converged", True)),
        )


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _lasso_standardize(X, y):
    xm = X.mean(axis=0)
    xs = X.std(axis=0)  # population sd: x_j' x_j / n == 1
    xs = np.where(xs > 0, xs, 1.0)
    ym = float(y.mean())
    return (X - xm) / xs, y - ym, xm, xs, ym


def lambda_max(X, y) -> float:
    """Smallest penalty with an all-zero solution, on the standardized scale."""
    X, Y = _xy(X, y)
    Xs, yc, *_ = _lasso_standardize(X, Y[:, 0])
    return float(np.max(np.abs(Xs.T @ yc)) / Xs.shape[0])


def default_lambda_path(X, y, n_lambdas: int = 50, ratio: float = 1e-3) -> np.ndarray:
    lmax = lambda_max(X, y)
    if lmax == 0:
        return np.zeros(1)
    return np.geomspace(lmax, lmax * ratio, int(n_lambdas))


def _cd_path(Xs, yc, path, max_sweeps, tol):
    """Cyclic coordinate descent with warm starts for ``(1/2n)|y - Xb|^2 + lam |b|_1``.

    Works on the Gram matrix and alternates full sweeps with sweeps over the
    active set until a full sweep changes nothing by more than ``tol``.
    """
    n, p = Xs.shape
    G = Xs.T @ Xs / n
    diag = np.diag(G).copy()
    grad = Xs.T @ yc / n  # X'(y - X beta) / n, kept current
    beta = np.zeros(p)
    out = np.zeros((len(path), p))
    converged = True

    def sweep(coords, lam):
        change = 0.0
        for j in coords:
            if diag[j] == 0:
                continue
            old = beta[j]
            z = grad[j] + diag[j] * old
            new = (z - lam if z > lam else z + lam if z < -lam else 0.0) / diag[j]
            if new != old:
                grad[:] -= G[:, j] * (new - old)
                beta[j] = new
                change = max(change, abs(new - old))
        return change

    all_coords = range(p)
    for li, lam in enumerate(path):
        sweeps = 0
        while True:
            sweeps += 1
            if sweep(all_coords, lam) < tol:
                break
            active = np.flatnonzero(beta).tolist()
            while sweeps < max_sweeps:
                sweeps += 1
                if sweep(active, lam) < tol:
                    break
            if sweeps >= max_sweeps:
                converged = False
                break
        out[li] = beta
    return out, converged


def fit_lasso(X, y, lam: float, max_sweeps: int = 10_000, tol: float = 1e-7) -> LassoModel:
    """LASSO at one penalty on internally standardized predictors; raw-scale output."""
    X, Y = _xy(X, y)
    if Y.shape[1] != 1:
        raise DimensionMismatch("LASSO needs a univariate response")
    Xs, yc, xm, xs, ym = _lasso_standardize(X, Y[:, 0])
    lmax = float(np.max(np.abs(Xs.T @ yc)) / Xs.shape[0])
    if lam <= 0 < lmax:
        path = list(np.geomspace(lmax, lmax * 1e-4, 20)) + [0.0]
    elif lam < lmax:
        path = list(np.geomspace(lmax, lam, 20))
    else:
        path = [lam]
    betas, ok = _cd_path(Xs, yc, path, max_sweeps, tol)
    if not ok:
        warnings.warn("coordinate descent hit the sweep limit", NonConvergence, stacklevel=2)
    coef = betas[-1] / xs
    return LassoModel(coef, ym - xm @ coef, float(lam), converged=ok)


def kkt_violation(X, y, model: LassoModel) -> float:
    """Largest KKT violation on the standardized scale (0 at an exact optimum)."""
    X, Y = _xy(X, y)
    Xs, yc, xm, xs, ym = _lasso_standardize(X, Y[:, 0])
    b = model.coefficients * xs
    grad = Xs.T @ (yc - Xs @ b) / Xs.shape[0]
    lam = model.lam
    active = b != 0
    viol = np.zeros_like(b)
    viol[active] = np.abs(grad[active] - lam * np.sign(b[active]))
    viol[~active] = np.maximum(np.abs(grad[~active]) - lam, 0.0)
    return float(viol.max()) if viol.size else 0.0


def fit_lasso_cv(
    X,
    y,
    lambda_path: Sequence[float] | None = None,
    folds: int = 5,
    seed: int = 0,
    one_se: bool = False,
    max_sweeps: int = 10_000,
    tol: float = 1e-7,
) -> LassoModel:
    """Choose the penalty by K-fold CV along a descending path, then refit on all rows.

    The default path has 50 geometric points from ``lambda_max`` down to
    ``1e-3 * lambda_max``.  With ``one_se`` the largest penalty whose CV error
    is within one standard error of the minimum is taken.
    """
    X, Y = _xy(X, y)
    if Y.shape[1] != 1:
        raise DimensionMismatch("LASSO needs a univariate response")
    path = np.asarray(default_lambda_path(X, Y) if lambda_path is None else lambda_path, dtype=float)
    if path.size == 0:
        raise GridEmpty("empty lambda path")
    if np.any(np.diff(path) > 0):
        raise ValueError("lambda path must be descending")
    if int(folds) < 2 or folds > X.shape[0]:
        raise GridEmpty(f"invalid fold count {folds}")
    perm = np.random.default_rng([int(seed), 0x1A55]).permutation(X.shape[0])
    errs = np.zeros((int(folds), path.size))
    ok = True
    for f, test in enumerate(np.array_split(perm, int(folds))):
        mask = np.ones(X.shape[0], dtype=bool)
        mask[test] = False
        Xs, yc, xm, xs, ym = _lasso_standardize(X[mask], Y[mask, 0])
        betas, conv = _cd_path(Xs, yc, path, max_sweeps, tol)
        ok &= conv
        coefs = betas / xs
        icpt = ym - coefs @ xm
        pred = X[test] @ coefs.T + icpt
        errs[f] = np.mean((Y[test, 0][:, None] - pred) ** 2, axis=0)
    mse = errs.mean(axis=0)
    best = int(np.argmin(mse))
    if one_se:
        se = errs.std(axis=0, ddof=1) / np.sqrt(errs.shape[0])
        best = int(np.flatnonzero(mse <= mse[best] + se[best])[0])
    Xs, yc, xm, xs, ym = _lasso_standardize(X, Y[:, 0])
    betas, conv = _cd_path(Xs, yc, path[: best + 1], max_sweeps, tol)
    ok &= conv
    if not ok:
        warnings.warn("coordinate descent hit the sweep limit", NonConvergence, stacklevel=2)
    coef = betas[-1] / xs
    return LassoModel(
        coef, ym - xm @ coef, float(path[best]), tuple(mse.tolist()), tuple(path.tolist()), ok
    )


# ---------------------------------------------------------------------------
# PCA factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaFactorModel:
    """``R - mean ~= factors @ loadings`` for a T x N return panel."""

    loadings: np.ndarray  # K x N
    factors: np.ndarray  # T x K
    mean: np.ndarray  # N
    K: int
    explained_variance: np.ndarray  # all components, descending

    def reconstruct(self) -> np.ndarray:
        return self.factors @ self.loadings + self.mean

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "pca",
            "loadings": self.loadings.tolist(),
            "factors": self.factors.tolist(),
            "mean": self.mean.tolist(),
            "K": self.K,
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PcaFactorModel":
        K = int(d["K"])
        mean = np.asarray(d["mean"], dtype=float)
        return cls(
            np.asarray(d["loadings"], dtype=float).reshape(K, mean.shape[0]),
            np.asarray(d["factors"], dtype=float).reshape(-1, K),
            mean,
            K,
            np.asarray(d["explained_variance"], dtype=float),
        )


def fit_pca_factors(returns_panel, K: int) -> PcaFactorModel:
    """Plain SVD-PCA of the column-demeaned T x N panel.

    Factors are ``U_K S_K`` and loadings ``V_K^T``; ``explained_variance`` are
    the ratios ``s_k^2 / sum s^2``.
    """
    R = to_matrix(returns_panel)
    T, N = R.shape
    if not 1 <= int(K) <= min(T, N):
        raise DimensionMismatch(f"K={K} outside [1, min(T, N)] = [1, {min(T, N)}]")
    mean = R.mean(axis=0)
    U, s, Vt = np.linalg.svd(R - mean, full_matrices=False)
    total = np.sum(s**2)
    ratio = s**2 / total if total > 0 else np.zeros_like(s)
    K = int(K)
    return PcaFactorModel(Vt[:K].copy(), U[:, :K] * s[:K], mean, K, ratio)
