"""Linear partial least squares.

Two independent routes to the PLS coefficient vector are provided: the
component-by-component NIPALS fit (:func:`fit_nipals`) and the Krylov closed
form (:func:`helland_coefficients`).  :func:`scale_factors` expresses the
PLS fit as per-eigendirection multipliers of the OLS fit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Standardizer, apply_standardizer, fit_standardizer, to_matrix
from .errors import (
    DegenerateEigenvalue,
    DimensionMismatch,
    GridEmpty,
    RankDeficient,
    SingularKrylov,
)

SCHEMA_VERSION = "1.0"

# relative tolerance for a vanishing X^T Y cross-product
RANK_TOL = 1e-10
# relative tolerance for pseudo-inverses
PINV_RCOND = 1e-12


def _pinv(A: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(A, rcond=PINV_RCOND)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlsModel:
    """A fitted PLS model on standardized X and centred Y.

    ``X_std ~= V P`` and ``Y_c ~= V B Q`` with orthonormal x-scores ``V``.
    New rows are scored with ``X_std @ rotation`` where
    ``rotation = W (P W)^-1`` reproduces the training scores exactly.
    ``U = Y_c Q^+`` are the y-scores: a least-squares map from ``V`` to ``U``
    composed with ``Q`` recovers the linear PLS fit.
    """

    P: np.ndarray  # K x p x-loadings
    Q: np.ndarray  # K x q unit y-loadings
    W: np.ndarray  # p x K weights (unit, deflated-space directions)
    B: np.ndarray  # K x K diagonal inner coefficients
    x_standardizer: Standardizer
    y_center: np.ndarray  # q
    V: np.ndarray | None = field(default=None, repr=False)  # N x K
    U: np.ndarray | None = field(default=None, repr=False)  # N x K
    rank_deficient: bool = False
    n_requested: int | None = None

    @property
    def K(self) -> int:
        return self.P.shape[0]

    @property
    def p(self) -> int:
        return self.W.shape[0]

    @property
    def q(self) -> int:
        return self.Q.shape[1]

    @property
    def rotation(self) -> np.ndarray:
        """Score map ``R_proj`` (p x K): ``V = X_std @ R_proj``."""
        if self.K == 0:
            return np.zeros((self.p, 0))
        return self.W @ np.linalg.inv(self.P @ self.W)

    def truncate(self, k: int) -> "PlsModel":
        """The model built from the first ``k`` components (NIPALS is sequential)."""
        k = min(int(k), self.K)
        return PlsModel(
            P=self.P[:k],
            Q=self.Q[:k],
            W=self.W[:, :k],
            B=self.B[:k, :k],
            x_standardizer=self.x_standardizer,
            y_center=self.y_center,
            V=None if self.V is None else self.V[:, :k],
            U=None if self.U is None else self.U[:, :k],
            rank_deficient=self.rank_deficient,
            n_requested=k,
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "pls",
            "K": self.K,
            "P": self.P.tolist(),
            "Q": self.Q.tolist(),
            "B_diag": np.diag(self.B).tolist(),
            "W": self.W.tolist(),
            "standardizer": self.x_standardizer.to_dict(),
            "y_center": self.y_center.tolist(),
            "rank_deficient": self.rank_deficient,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlsModel":
        K = int(d["K"])
        std = Standardizer.from_dict(d["standardizer"])
        p = std.means.shape[0]
        y_center = np.asarray(d["y_center"], dtype=float)
        q = y_center.shape[0]
        return cls(
            P=np.asarray(d["P"], dtype=float).reshape(K, p),
            Q=np.asarray(d["Q"], dtype=float).reshape(K, q),
            W=np.asarray(d["W"], dtype=float).reshape(p, K),
            B=np.diag(np.asarray(d["B_diag"], dtype=float)).reshape(K, K),
            x_standardizer=std,
            y_center=y_center,
            rank_deficient=bool(d.get("rank_deficient", False)),
        )


def _check_xy(X, Y) -> tuple[np.ndarray, np.ndarray]:
    X = to_matrix(X)
    Y = to_matrix(Y)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("X and Y must be finite")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    return X, Y


def _x_standardizer(X: np.ndarray, scale_x: bool) -> Standardizer:
    if scale_x:
        return fit_standardizer(X, on_zero_variance="unit")
    return Standardizer(X.mean(axis=0), np.ones(X.shape[1]))


def _first_nonzero_sign(w: np.ndarray) -> float:
    idx = np.flatnonzero(np.abs(w) > 1e-12 * np.max(np.abs(w)))
    return -1.0 if w[idx[0]] < 0 else 1.0


def fit_nipals(X, Y, K: int, scale_x: bool = True) -> PlsModel:
    """Fit ``K`` PLS components by NIPALS with score deflation.

    Each component takes the dominant singular pair ``(w, q)`` of the current
    cross-product ``X_k^T Y_k``, scores ``t = X_k w``, and removes the rank-one
    parts of ``X_k`` and ``Y_k`` explained by ``t``.  Scores are then scaled to
    unit norm so ``V^T V = I``.

    Parameters
    ----------
    X : array (N, p)
    Y : array (N,) or (N, q)
    K : int
        Requested components, ``1 <= K <= min(p, N - 1)``.
    scale_x : bool
        Standardize X columns (default).  With ``False`` X is only centred,
        matching the covariance-based estimator used in consistency studies.

    Returns
    -------
    PlsModel
        If the cross-product vanishes before ``K`` components are found, a
        :class:`RankDeficient` warning is emitted and the model holds the
        components achieved (possibly zero), with ``rank_deficient=True``.
    """
    X, Y = _check_xy(X, Y)
    N, p = X.shape
    q = Y.shape[1]
    K = int(K)
    if K < 1 or K > min(p, N - 1):
        raise ValueError(f"K={K} outside [1, min(p, N-1)] = [1, {min(p, N - 1)}]")

    std = _x_standardizer(X, scale_x)
    Xk = apply_standardizer(std, X)
    y_center = Y.mean(axis=0)
    Yc = Y - y_center
    Yk = Yc.copy()
    Xk = Xk.copy()

    x_norm = np.linalg.norm(Xk)
    cov_scale = x_norm * np.linalg.norm(Yc)
    ws, loads, ts, qs, bs = [], [], [], [], []
    rank_deficient = False
    for k in range(K):
        C = Xk.T @ Yk
        if q == 1:
            s = np.linalg.norm(C)
            w = C[:, 0] / s if s > 0 else np.zeros(p)
            qv = np.ones(1)
        else:
            Uc, Sc, Vtc = np.linalg.svd(C, full_matrices=False)
            s, w, qv = Sc[0], Uc[:, 0], Vtc[0]
        if not s > RANK_TOL * cov_scale:
            rank_deficient = True
            break
        sign = _first_nonzero_sign(w)
        w, qv = sign * w, sign * qv
        t = Xk @ w
        tt = t @ t
        if not tt > (1e-12 * x_norm) ** 2:
            rank_deficient = True
            break
        t_norm = np.sqrt(tt)
        v = t / t_norm
        b = float(v @ (Yk @ qv))
        load = Xk.T @ t / tt
        Xk -= np.outer(t, load)
        Yk -= np.outer(v, Yk.T @ v)
        ws.append(w)
        loads.append(load * t_norm)
        ts.append(v)
        qs.append(qv)
        bs.append(b)

    if rank_deficient:
        warnings.warn(
            f"X^T Y vanished after {len(ws)} of {K} components", RankDeficient, stacklevel=2
        )
    k_got = len(ws)
    W = np.array(ws).T.reshape(p, k_got)
    P = np.array(loads).reshape(k_got, p)
    V = np.array(ts).T.reshape(N, k_got)
    Qm = np.array(qs).reshape(k_got, q)
    B = np.diag(np.array(bs, dtype=float)).reshape(k_got, k_got)
    U = Yc @ _pinv(Qm) if k_got else np.zeros((N, 0))
    return PlsModel(
        P=P,
        Q=Qm,
        W=W,
        B=B,
        x_standardizer=std,
        y_center=y_center,
        V=V,
        U=U,
        rank_deficient=rank_deficient,
        n_requested=K,
    )


def pls_coefficients(m: PlsModel) -> np.ndarray:
    """Coefficients on the standardized X scale: ``R_proj B Q`` (p x q)."""
    if m.K == 0:
        return np.zeros((m.p, m.q))
    return m.rotation @ m.B @ m.Q


def raw_coefficients(m: PlsModel) -> tuple[np.ndarray, np.ndarray]:
    """``(coef, intercept)`` such that ``predict(m, X) == X @ coef + intercept``."""
    coef = pls_coefficients(m) / m.x_standardizer.sds[:, None]
    intercept = m.y_center - m.x_standardizer.means @ coef
    return coef, intercept


def transform(m: PlsModel, X_new, scoring: str = "rotation") -> np.ndarray:
    """x-scores of new rows.  ``scoring="pinv"`` uses ``P^+`` instead of the rotation."""
    Xs = apply_standardizer(m.x_standardizer, X_new)
    if scoring == "rotation":
        return Xs @ m.rotation
    if scoring == "pinv":
        return Xs @ _pinv(m.P)
    raise ValueError(f"unknown scoring {scoring!r}")


def predict(m: PlsModel, X_new, scoring: str = "rotation") -> np.ndarray:
    V = transform(m, X_new, scoring)
    return V @ m.B @ m.Q + m.y_center


# ---------------------------------------------------------------------------
# closed form
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KrylovBasis:
    R: np.ndarray  # p x K (or p x K*q for matrix S_xy)
    S_xx: np.ndarray
    S_xy: np.ndarray


def _moments(X: np.ndarray, Y: np.ndarray, scale_x: bool):
    std = _x_standardizer(X, scale_x)
    Xs = apply_standardizer(std, X)
    y_center = Y.mean(axis=0)
    Yc = Y - y_center
    n = X.shape[0]
    S_xx = Xs.T @ Xs / (n - 1)
    S_xy = Xs.T @ Yc / (n - 1)
    return std, y_center, S_xx, S_xy


def krylov_basis(X, Y, K: int, scale_x: bool = True) -> KrylovBasis:
    """The power basis ``[S_xy, S_xx S_xy, ..., S_xx^(K-1) S_xy]``."""
    X, Y = _check_xy(X, Y)
    _, _, S_xx, S_xy = _moments(X, Y, scale_x)
    blocks = [S_xy]
    for _ in range(int(K) - 1):
        blocks.append(S_xx @ blocks[-1])
    R = np.hstack(blocks)
    if Y.shape[1] == 1:
        S_xy = S_xy[:, 0]
    return KrylovBasis(R, S_xx, S_xy)


def _krylov_orthobasis(S: np.ndarray, s: np.ndarray, K: int) -> tuple[np.ndarray, bool]:
    """Orthonormal basis of span{s, Ss, ..., S^(K-1)s} by Arnoldi with reorthogonalisation.

    Returns the basis and whether the Krylov space became invariant early.
    """
    norm0 = np.linalg.norm(s)
    if norm0 == 0:
        return np.zeros((S.shape[0], 0)), True
    basis = [s / norm0]
    for _ in range(K - 1):
        z = S @ basis[-1]
        z_norm = np.linalg.norm(z)
        Qb = np.array(basis).T
        for _ in range(2):
            z = z - Qb @ (Qb.T @ z)
        if not np.linalg.norm(z) > 1e-10 * max(z_norm, 1e-300):
            return np.array(basis).T, True
        basis.append(z / np.linalg.norm(z))
    return np.array(basis).T, False


@dataclass(frozen=True)
class HellandResult:
    coef: np.ndarray  # p x q on the working (standardized) scale
    raw_coef: np.ndarray  # p x q on the raw X scale
    intercept: np.ndarray  # q
    singular: bool
    krylov_dims: tuple


def helland_coefficients(X, Y, K: int, scale_x: bool = True) -> HellandResult:
    """PLS coefficients from the Krylov closed form ``R (R^T S R)^-1 R^T s``.

    Each response column is treated as a univariate PLS problem.  The basis
    is built by Arnoldi so that ill-conditioned power columns do not degrade
    the projection; the projector is invariant to the choice of basis for the
    same subspace.  When the Krylov space is exhausted before ``K`` steps (or
    the projected matrix is singular) a :class:`SingularKrylov` warning is
    raised and the pseudo-inverse solution is returned.
    """
    X, Y = _check_xy(X, Y)
    std, y_center, S_xx, S_xy = _moments(X, Y, scale_x)
    p, q = S_xy.shape
    coef = np.zeros((p, q))
    singular = False
    dims = []
    for j in range(q):
        Rb, early = _krylov_orthobasis(S_xx, S_xy[:, j], int(K))
        dims.append(Rb.shape[1])
        if Rb.shape[1] == 0:
            singular = True
            continue
        M = Rb.T @ S_xx @ Rb
        evals = np.linalg.eigvalsh(M)
        if early or evals[0] <= PINV_RCOND * evals[-1]:
            singular = True
        coef[:, j] = Rb @ (_pinv(M) @ (Rb.T @ S_xy[:, j]))
    if singular:
        warnings.warn("Krylov system singular; pseudo-inverse used", SingularKrylov, stacklevel=2)
    raw = coef / std.sds[:, None]
    intercept = y_center - std.means @ raw
    return HellandResult(coef, raw, intercept, singular, tuple(dims))


# ---------------------------------------------------------------------------
# shrinkage diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleFactorReport:
    eigenvalues: np.ndarray  # e_j^2, descending, length R
    factors: np.ndarray  # eigenbasis ratio; NaN where undefined
    defined: np.ndarray  # bool mask
    closed_form: np.ndarray  # sum_k theta_k e_j^(2k)
    theta: np.ndarray
    alpha_ols: np.ndarray
    K: int
    degenerate: np.ndarray  # bool mask of eigenvalues with multiplicity > 1

    def to_rows(self) -> list[dict]:
        return [
            {
                "j": j + 1,
                "eigenvalue": float(self.eigenvalues[j]),
                "f_j": float(self.factors[j]),
                "f_j_closed_form": float(self.closed_form[j]),
                "defined": bool(self.defined[j]),
                "degenerate": bool(self.degenerate[j]),
            }
            for j in range(self.eigenvalues.shape[0])
        ]


def scale_factors(
    X, y, K: int, rank_tol: float = 1e-10, alpha_tol: float = 1e-8, gap_tol: float = 1e-8
) -> ScaleFactorReport:
    """PLS shrinkage factors along the eigendirections of the predictor correlation matrix.

    ``f_j = (v_j . b_pls) / (v_j . b_ols)`` for every eigenvector ``v_j`` whose
    OLS projection ``alpha_j`` exceeds ``alpha_tol * max|alpha|``.  The
    polynomial form ``f_j = sum_k theta_k e_j^(2k)`` is computed independently,
    with ``theta`` the solution of the moment system
    ``w_kl = sum_j alpha_j^2 e_j^(2(k+l+1))``, ``eta_k = sum_j alpha_j^2 e_j^(2(k+1))``.
    Any ``f_j > 1`` means PLS expands rather than shrinks that direction.
    """
    X, Y = _check_xy(X, y)
    if Y.shape[1] != 1:
        raise DimensionMismatch("scale factors need a univariate response")
    _, _, S_xx, S_xy = _moments(X, Y, True)
    s = S_xy[:, 0]
    evals, evecs = np.linalg.eigh(S_xx)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = evals > rank_tol * evals[0]
    e2, Vj = evals[keep], evecs[:, keep]
    R = e2.shape[0]
    K = int(K)
    if K < 1 or K > R:
        raise ValueError(f"K={K} outside [1, rank={R}]")

    degenerate = np.zeros(R, dtype=bool)
    close = np.abs(np.diff(e2)) <= gap_tol * e2[0]
    degenerate[:-1] |= close
    degenerate[1:] |= close
    if degenerate.any():
        warnings.warn(
            "repeated eigenvalues: scale factors in those eigenspaces are not identified",
            DegenerateEigenvalue,
            stacklevel=2,
        )

    alpha = (Vj.T @ s) / e2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularKrylov)
        b_pls = helland_coefficients(X, Y, K).coef[:, 0]
    proj_pls = Vj.T @ b_pls
    defined = (np.abs(alpha) > alpha_tol * np.max(np.abs(alpha))) & ~degenerate
    factors = np.full(R, np.nan)
    factors[defined] = proj_pls[defined] / alpha[defined]

    # theta = w^-1 eta is the weighted least-squares fit of 1 by sum_k theta_k lam^k
    # with weights alpha^2 lam; eigenvalues are rescaled by the largest for conditioning
    lam = e2 / e2[0]
    A = lam[:, None] ** np.arange(1, K + 1)[None, :]
    sw = np.abs(alpha) * np.sqrt(lam)
    theta_scaled, *_ = np.linalg.lstsq(sw[:, None] * A, sw, rcond=PINV_RCOND)
    closed = A @ theta_scaled
    theta = theta_scaled / e2[0] ** np.arange(1, K + 1)
    return ScaleFactorReport(e2, factors, defined, closed, theta, alpha, K, degenerate)


def moment_system(alpha: np.ndarray, e2: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """The raw ``(w, eta)`` moment matrices, for inspection and small-K checks."""
    k = np.arange(1, K + 1)
    w = np.einsum("j,jkl->kl", alpha**2, e2[:, None, None] ** (k[None, :, None] + k[None, None, :] + 1))
    eta = np.einsum("j,jk->k", alpha**2, e2[:, None] ** (k[None, :] + 1))
    return w, eta


# ---------------------------------------------------------------------------
# component selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CvResult:
    k_star: int
    k_grid: tuple
    cv_mse: tuple


def kfold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, 0xF01D]).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def select_k_cv(
    X, Y, k_grid: Sequence[int], folds: int = 5, seed: int = 0, tie_rtol: float = 1e-9
) -> CvResult:
    """Choose the component count minimising mean out-of-fold MSE.

    One model with the largest admissible ``k`` is fitted per fold and
    truncated for the smaller ones.  Scores within ``tie_rtol`` times the
    response variance of the minimum count as ties and resolve to the
    smaller ``k``.  Grid values exceeding ``min(p, smallest training fold - 1)``
    are dropped.
    """
    X, Y = _check_xy(X, Y)
    if int(folds) < 2:
        raise GridEmpty(f"need at least 2 folds, got {folds}")
    if folds > X.shape[0]:
        raise GridEmpty(f"{folds} folds for {X.shape[0]} rows")
    split = kfold_indices(X.shape[0], int(folds), seed)
    min_train = X.shape[0] - max(len(s) for s in split)
    limit = min(X.shape[1], min_train - 1)
    grid = sorted({int(k) for k in k_grid if 1 <= int(k) <= limit})
    if not grid:
        raise GridEmpty(f"no admissible k in {list(k_grid)} (limit {limit})")
    k_max = grid[-1]
    sse = np.zeros(len(grid))
    for test_idx in split:
        mask = np.ones(X.shape[0], dtype=bool)
        mask[test_idx] = False
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficient)
            m = fit_nipals(X[mask], Y[mask], k_max)
        Vt = transform(m, X[test_idx])
        for i, k in enumerate(grid):
            kk = min(k, m.K)
            pred = Vt[:, :kk] @ m.B[:kk, :kk] @ m.Q[:kk] + m.y_center
            sse[i] += np.sum((Y[test_idx] - pred) ** 2)
    mse = sse / Y.size
    tol = tie_rtol * np.mean((Y - Y.mean(axis=0)) ** 2)
    k_star = grid[int(np.flatnonzero(mse <= mse.min() + tol)[0])]
    return CvResult(k_star, tuple(grid), tuple(float(v) for v in mse))
