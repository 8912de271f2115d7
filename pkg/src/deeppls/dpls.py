"""PLS projections composed with a deep score regression.

A :class:`DplsModel` scores standardized predictors with the PLS rotation,
maps x-scores to y-scores with a network ``G`` and returns ``G(V) Q`` plus
the response centre.  Sensitivities are chain-rule products of the net's
input derivatives with the rotation ``R`` and the y-loadings ``Q``.
"""

from __future__ import annotations

import csv
import io
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import deepnet, pls
from .data import SynthConfig, apply_link, apply_standardizer, generate_synthetic, to_matrix
from .deepnet import Layer, Network, TrainConfig
from .errors import (
    DimensionMismatch,
    DplsError,
    InvalidConfig,
    InvalidLink,
    NonPsdInput,
    RankDeficient,
)

SCHEMA_VERSION = "1.0"


@dataclass(frozen=True)
class DplsModel:
    pls: pls.PlsModel
    net: Network
    trained_on: Mapping | None = None
    loss_curve: tuple = field(default=(), repr=False)

    def __post_init__(self):
        K = self.pls.K
        if self.net.input_dim != K or self.net.output_dim != K:
            raise DimensionMismatch(
                f"network maps {self.net.input_dim} -> {self.net.output_dim}, PLS has K={K}"
            )

    @property
    def K(self) -> int:
        return self.pls.K

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "dpls",
            "pls": self.pls.to_dict(),
            "net": self.net.to_dict(),
            "trained_on": dict(self.trained_on) if self.trained_on else None,
            "loss_curve": list(self.loss_curve),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DplsModel":
        return cls(
            pls=pls.PlsModel.from_dict(d["pls"]),
            net=Network.from_dict(d["net"]),
            trained_on=d.get("trained_on"),
            loss_curve=tuple(d.get("loss_curve", ())),
        )


def _column_scale(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = A.mean(axis=0)
    sd = A.std(axis=0, ddof=1) if A.shape[0] > 1 else np.ones(A.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd


def _fold_scaling(net: Network, v_mu, v_sd, u_mu, u_sd) -> Network:
    """Rewrite a net trained on standardized scores as a map between raw scores."""
    layers = list(net.layers)
    first = layers[0]
    W1 = first.weight / v_sd[None, :]
    b1 = first.bias - W1 @ v_mu
    layers[0] = Layer(W1, b1, first.activation)
    last = layers[-1]
    layers[-1] = Layer(u_sd[:, None] * last.weight, u_sd * last.bias + u_mu, last.activation)
    return Network(tuple(layers))


def _train_score_map(V, U, net_layers, train_cfg, activation, B_diag=None):
    v_mu, v_sd = _column_scale(V)
    u_mu, u_sd = _column_scale(U)
    K = V.shape[1]
    warm = None
    if train_cfg.init == "pls_warm_start" and B_diag is not None:
        warm = B_diag * v_sd / u_sd
    net0 = deepnet.init_network(
        K, list(net_layers) + [K], activation=activation, seed=train_cfg.seed, warm_start=warm
    )
    res = deepnet.train_adam(net0, (V - v_mu) / v_sd, (U - u_mu) / u_sd, train_cfg)
    return _fold_scaling(res.net, v_mu, v_sd, u_mu, u_sd), res.loss_curve


def fit_dpls(
    X,
    Y,
    K: int,
    net_layers: Sequence[int] = (100, 100),
    train_cfg: TrainConfig | None = None,
    activation: str = "softplus",
    trained_on: Mapping | None = None,
    pls_model: pls.PlsModel | None = None,
) -> DplsModel:
    """Fit PLS, then train a network from x-scores to y-scores with the projection frozen.

    ``net_layers`` are the hidden widths; the output width is ``K``.  Scores
    are standardized for training and the scaling is folded back into the
    first and last layers, so the stored net maps raw scores to raw scores.
    Pass ``pls_model`` to reuse an existing projection.  If PLS finds no
    components the model carries an empty network and predicts the centre.
    """
    train_cfg = train_cfg or TrainConfig()
    m = pls_model if pls_model is not None else pls.fit_nipals(X, Y, K)
    if m.K == 0:
        # no covariance with the response: the model is the response centre
        empty = Network((Layer(np.zeros((0, 0)), np.zeros(0), "linear"),))
        return DplsModel(m, empty, trained_on, ())
    if m.V is None or m.U is None:
        raise InvalidConfig("PLS model carries no training scores")
    net, curve = _train_score_map(
        m.V, m.U, net_layers, train_cfg, activation, B_diag=np.diag(m.B)
    )
    return DplsModel(m, net, trained_on, curve)


def refit_network(
    model: DplsModel,
    net_layers: Sequence[int] = (100, 100),
    train_cfg: TrainConfig | None = None,
    activation: str = "softplus",
) -> DplsModel:
    """Retrain only the score map; the PLS projection object is reused unchanged."""
    return fit_dpls(
        None, None, model.K, net_layers, train_cfg, activation, model.trained_on, model.pls
    )


def predict_scores(m: DplsModel, V) -> np.ndarray:
    return deepnet.forward(m.net, V) @ m.pls.Q + m.pls.y_center


def predict_dpls(m: DplsModel, X_new) -> np.ndarray:
    return predict_scores(m, pls.transform(m.pls, X_new))


def predict_standardized(m: DplsModel, X_std) -> np.ndarray:
    """Prediction from already-standardized predictors."""
    return predict_scores(m, to_matrix(X_std) @ m.pls.rotation)


# ---------------------------------------------------------------------------
# sensitivities
# ---------------------------------------------------------------------------


def covariate_jacobian(m: DplsModel, x_std=None) -> np.ndarray:
    """``dY/dx`` (q x p) at a standardized point; defaults to the origin."""
    R = m.pls.rotation
    x = np.zeros(m.pls.p) if x_std is None else np.asarray(x_std, dtype=float).reshape(-1)
    if x.shape[0] != m.pls.p:
        raise DimensionMismatch(f"point has {x.shape[0]} entries, model expects {m.pls.p}")
    J = deepnet.jacobian(m.net, x @ R)
    return m.pls.Q.T @ J @ R.T


def covariate_hessian_all(m: DplsModel, x_std=None) -> np.ndarray:
    """Hessians of every response: array (q, p, p)."""
    R = m.pls.rotation
    x = np.zeros(m.pls.p) if x_std is None else np.asarray(x_std, dtype=float).reshape(-1)
    if x.shape[0] != m.pls.p:
        raise DimensionMismatch(f"point has {x.shape[0]} entries, model expects {m.pls.p}")
    H = deepnet.hessian_all(m.net, x @ R)
    Hx = np.einsum("ka,ij,kjl,ml->aim", m.pls.Q, R, H, R)
    return 0.5 * (Hx + np.swapaxes(Hx, 1, 2))


def covariate_hessian(m: DplsModel, x_std=None, output_index: int = 0) -> np.ndarray:
    a = int(output_index)
    if not 0 <= a < m.pls.q:
        raise DimensionMismatch(f"output index {a} outside [0, {m.pls.q})")
    return covariate_hessian_all(m, x_std)[a]


@dataclass(frozen=True)
class SensitivityReport:
    jacobian_mean: np.ndarray  # q x p
    jacobian_at_zero: np.ndarray  # q x p
    hessian_at_zero: np.ndarray  # q x p x p
    bootstrap_quantiles: dict | None = None  # {"q05", "q50", "q95"} -> q x p
    n_resamples: int = 0
    n_failed: int = 0

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "jacobian_mean": self.jacobian_mean.tolist(),
            "jacobian_at_zero": self.jacobian_at_zero.tolist(),
            "hessian_at_zero": self.hessian_at_zero.tolist(),
            "n_resamples": self.n_resamples,
            "n_failed": self.n_failed,
        }
        if self.bootstrap_quantiles is not None:
            d["bootstrap_quantiles"] = {k: v.tolist() for k, v in self.bootstrap_quantiles.items()}
        return d

    def to_csv(self, feature_names: Sequence[str] | None = None, period="") -> str:
        """Long format ``period,entity,component,value``; entity is ``y<a>:<feature>``."""
        q, p = self.jacobian_at_zero.shape
        names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["period", "entity", "component", "value"])
        blocks = [("jacobian_mean", self.jacobian_mean), ("jacobian_at_zero", self.jacobian_at_zero)]
        if self.bootstrap_quantiles is not None:
            blocks += [(k, v) for k, v in sorted(self.bootstrap_quantiles.items())]
        for comp, M in blocks:
            for a in range(q):
                for j in range(p):
                    w.writerow([period, f"y{a}:{names[j]}", comp, repr(float(M[a, j]))])
        for a in range(q):
            for i in range(p):
                for j in range(i, p):
                    w.writerow(
                        [period, f"y{a}:{names[i]}*{names[j]}", "hessian_at_zero",
                         repr(float(self.hessian_at_zero[a, i, j]))]
                    )
        return buf.getvalue()


def sensitivity_report(m: DplsModel, X_eval_std=None) -> SensitivityReport:
    """Jacobian at the origin, averaged over evaluation rows, and Hessians at the origin."""
    J0 = covariate_jacobian(m)
    if X_eval_std is None:
        J_mean = J0
    else:
        Xe = to_matrix(X_eval_std)
        R = m.pls.rotation
        Jv = deepnet.jacobian_batch(m.net, Xe @ R).mean(axis=0)
        J_mean = m.pls.Q.T @ Jv @ R.T
    return SensitivityReport(J_mean, J0, covariate_hessian_all(m))


def _resample_seed(seed: int, b: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(b)]).generate_state(1)[0])


def _bootstrap_one(args):
    X, Y, K, net_layers, train_cfg, activation, seed, b = args
    idx = np.random.default_rng([int(seed), int(b)]).integers(0, X.shape[0], X.shape[0])
    cfg = train_cfg.replace(seed=_resample_seed(seed, b))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = fit_dpls(X[idx], Y[idx], K, net_layers, cfg, activation)
        if model.K != K:
            return None
        return covariate_jacobian(model)
    except (DplsError, FloatingPointError, np.linalg.LinAlgError):
        return None


def bootstrap_sensitivities(
    X,
    Y,
    K: int,
    B: int,
    seed: int = 0,
    net_layers: Sequence[int] = (100, 100),
    train_cfg: TrainConfig | None = None,
    activation: str = "softplus",
    n_jobs: int = 1,
) -> SensitivityReport:
    """Row-bootstrap distribution of the sensitivities at the origin.

    Resample ``b`` draws rows with ``default_rng([seed, b])`` and trains with
    a seed derived from ``(seed, b)``; results do not depend on ``n_jobs``.
    Fits that fail or lose components are dropped and counted.
    """
    if int(B) < 2:
        raise InvalidConfig("bootstrap needs B >= 2 resamples")
    X = to_matrix(X)
    Y = to_matrix(Y)
    train_cfg = train_cfg or TrainConfig()
    full = fit_dpls(X, Y, K, net_layers, train_cfg, activation)
    tasks = [(X, Y, K, tuple(net_layers), train_cfg, activation, seed, b) for b in range(int(B))]
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=int(n_jobs)) as ex:
            results = list(ex.map(_bootstrap_one, tasks))
    else:
        results = [_bootstrap_one(t) for t in tasks]
    ok = [r for r in results if r is not None]
    if not ok:
        raise DplsError("every bootstrap resample failed")
    stack = np.stack(ok)
    quant = {
        name: np.quantile(stack, level, axis=0)
        for name, level in (("q05", 0.05), ("q50", 0.50), ("q95", 0.95))
    }
    base = sensitivity_report(full)
    return SensitivityReport(
        base.jacobian_mean,
        base.jacobian_at_zero,
        base.hessian_at_zero,
        quant,
        n_resamples=len(ok),
        n_failed=len(results) - len(ok),
    )


# ---------------------------------------------------------------------------
# factor attribution
# ---------------------------------------------------------------------------


def latent_factors(m: DplsModel) -> np.ndarray:
    """``grad g(0) Q`` (K x q): row k is the return per unit of score k."""
    J0 = deepnet.jacobian(m.net, np.zeros(m.K))
    return J0.T @ m.pls.Q


@dataclass(frozen=True)
class Attribution:
    """Second-order expansion of predictions about the score origin, per row (M x q)."""

    alpha: np.ndarray
    linear: np.ndarray
    quadratic: np.ndarray
    hot: np.ndarray
    total: np.ndarray
    linear_by_factor: np.ndarray  # M x K x q

    def residual(self) -> np.ndarray:
        return self.alpha + self.linear + self.quadratic + self.hot - self.total

    def scale(self) -> np.ndarray:
        parts = np.stack([self.alpha, self.linear, self.quadratic, self.hot, self.total])
        return np.abs(parts).max(axis=0)

    def aggregate(self, weights=None) -> "Attribution":
        """Weighted row average (equal weights by default), e.g. a portfolio."""
        M = self.total.shape[0]
        w = np.full(M, 1.0 / M) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (M,):
            raise DimensionMismatch(f"{w.shape[0]} weights for {M} rows")

        def avg(a):
            return np.tensordot(w, a, axes=1)[None]

        return Attribution(
            avg(self.alpha), avg(self.linear), avg(self.quadratic), avg(self.hot),
            avg(self.total), avg(self.linear_by_factor),
        )

    def factor_split(self, top: int = 3, output_index: int = 0) -> dict:
        """Per-row linear term split into the ``top`` factors by |average contribution| plus the rest."""
        contrib = self.linear_by_factor[:, :, output_index]
        order = np.argsort(-np.abs(contrib.mean(axis=0)), kind="stable")
        chosen = order[:top]
        out = {f"factor_{k + 1}": contrib[:, k] for k in chosen}
        out["factor_other"] = contrib[:, order[top:]].sum(axis=1)
        return out

    def to_rows(self, periods=None, entities=None, top: int = 3) -> list[dict]:
        M, q = self.total.shape
        periods = [""] * M if periods is None else list(periods)
        entities = [str(i) for i in range(M)] if entities is None else list(entities)
        rows = []
        for a in range(q):
            split = self.factor_split(top, a)
            for i in range(M):
                ent = entities[i] if q == 1 else f"{entities[i]}:y{a}"
                vals = [
                    ("alpha", self.alpha[i, a]),
                    *[(k, v[i]) for k, v in split.items()],
                    ("linear", self.linear[i, a]),
                    ("quadratic", self.quadratic[i, a]),
                    ("hot", self.hot[i, a]),
                    ("total", self.total[i, a]),
                ]
                rows += [
                    {"period": periods[i], "entity": ent, "component": c, "value": float(v)}
                    for c, v in vals
                ]
        return rows

    def to_csv(self, periods=None, entities=None, top: int = 3) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["period", "entity", "component", "value"], lineterminator="\n")
        w.writeheader()
        for row in self.to_rows(periods, entities, top):
            w.writerow({**row, "value": repr(row["value"])})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            **{
                k: getattr(self, k).tolist()
                for k in ("alpha", "linear", "quadratic", "hot", "total", "linear_by_factor")
            },
        }


def taylor_attribution(m: DplsModel, V_rows) -> Attribution:
    """Expand predictions about the score origin: intercept, linear, quadratic and remainder.

    The intercept includes the response centre, so ``total`` is the model's
    prediction.  ``hot`` is defined as the residual and closes the identity.
    """
    V = to_matrix(V_rows)
    if V.shape[1] != m.K:
        raise DimensionMismatch(f"scores have {V.shape[1]} columns, model has K={m.K}")
    Q = m.pls.Q
    zero = np.zeros(m.K)
    alpha_row = deepnet.forward(m.net, zero[None, :])[0] @ Q + m.pls.y_center
    F = latent_factors(m)
    by_factor = V[:, :, None] * F[None, :, :]
    linear = by_factor.sum(axis=1)
    H0 = deepnet.hessian_all(m.net, zero)
    quad_scores = 0.5 * np.einsum("mi,kij,mj->mk", V, H0, V)
    quadratic = quad_scores @ Q
    total = predict_scores(m, V)
    alpha = np.broadcast_to(alpha_row, total.shape).copy()
    hot = total - ((alpha + linear) + quadratic)
    return Attribution(alpha, linear, quadratic, hot, total, by_factor)


def expected_return_attribution(loadings, factor_mean=None, factor_history=None) -> np.ndarray:
    """Per-asset expected returns ``v_i . E[f]``.

    Give either the factor mean (length K) or a history (T x K) to average.
    """
    Vl = to_matrix(loadings)
    if factor_mean is None:
        if factor_history is None:
            raise InvalidConfig("need factor_mean or factor_history")
        factor_mean = to_matrix(factor_history).mean(axis=0)
    mu = np.asarray(factor_mean, dtype=float).reshape(-1)
    if mu.shape[0] != Vl.shape[1]:
        raise DimensionMismatch(f"{mu.shape[0]} factor means for K={Vl.shape[1]} loadings")
    return Vl @ mu


@dataclass(frozen=True)
class VarianceAttribution:
    systematic: np.ndarray
    idiosyncratic: np.ndarray
    total: np.ndarray
    clipped: bool


def conditional_variance_attribution(loadings, factor_cov, resid_var) -> VarianceAttribution:
    """``v_i' Sigma_f v_i + resid_var_i`` with ``Sigma_f`` projected onto the PSD cone."""
    Vl = to_matrix(loadings)
    S = np.asarray(factor_cov, dtype=float).reshape(Vl.shape[1], Vl.shape[1])
    S = 0.5 * (S + S.T)
    evals, evecs = np.linalg.eigh(S)
    tol = 1e-12 * max(1.0, np.abs(evals).max())
    clipped = bool(evals.min() < -tol)
    if clipped:
        warnings.warn("factor covariance not PSD; negative eigenvalues clipped", NonPsdInput, stacklevel=2)
        S = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
    resid = np.broadcast_to(np.asarray(resid_var, dtype=float), (Vl.shape[0],))
    if np.any(resid < 0):
        raise ValueError("residual variances must be non-negative")
    systematic = np.clip(np.einsum("ik,kl,il->i", Vl, S, Vl), 0.0, None)
    return VarianceAttribution(systematic, resid.copy(), systematic + resid, clipped)


# ---------------------------------------------------------------------------
# consistency of linear PLS under nonlinear links
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConsistencyReport:
    cosine_similarities: np.ndarray  # q
    kappa_estimates: np.ndarray  # q
    sample_size: int
    link: str
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "cosine_similarities": self.cosine_similarities.tolist(),
            "kappa_estimates": self.kappa_estimates.tolist(),
            "sample_size": self.sample_size,
            "link": self.link,
            "seed": self.seed,
        }


def _abs_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(min(1.0, abs(a @ b) / (na * nb)))


def composability_check(cfg: SynthConfig, K: int) -> ConsistencyReport:
    """Compare linear PLS coefficient directions with the truth ``P' B Q`` on one draw."""
    if cfg.regime != "gaussian":
        raise InvalidLink("consistency under a nonlinear link requires Gaussian scores")
    draw = generate_synthetic(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficient)
        m = pls.fit_nipals(draw.X, draw.Y, K, scale_x=False)
    beta = pls.pls_coefficients(m)
    truth = draw.truth
    target = truth.coefficients()
    W = draw.latent @ truth.B_true
    G = apply_link(cfg.link, W)
    cos = np.array([_abs_cosine(beta[:, j], target[:, j]) for j in range(cfg.q)])
    kappa = np.empty(cfg.q)
    for j in range(cfg.q):
        lin = W @ truth.Q_true[:, j]
        g = G @ truth.Q_true[:, j]
        var = np.var(lin, ddof=1)
        kappa[j] = np.cov(g, lin)[0, 1] / var if var > 0 else np.nan
    return ConsistencyReport(cos, kappa, cfg.n, cfg.link, cfg.seed)


def verify_composability(
    cfg: SynthConfig, K: int, n_grid: Sequence[int] = (500, 5000, 50000)
) -> list[ConsistencyReport]:
    """One :class:`ConsistencyReport` per sample size in ``n_grid``."""
    return [composability_check(cfg.replace(n=int(n)), K) for n in n_grid]


def composability_study(
    cfg: SynthConfig, K: int, n_grid: Sequence[int], seeds: Sequence[int]
) -> dict:
    """Median per-column cosine over seeds for each sample size."""
    medians = {}
    kappas = {}
    for n in n_grid:
        reps = [composability_check(cfg.replace(n=int(n), seed=int(s)), K) for s in seeds]
        medians[int(n)] = np.median([r.cosine_similarities for r in reps], axis=0)
        kappas[int(n)] = np.median([r.kappa_estimates for r in reps], axis=0)
    return {"median_cosine": medians, "median_kappa": kappas}
