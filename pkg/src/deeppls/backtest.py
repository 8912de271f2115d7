"""Period-by-period cross-sectional backtests.

Each :class:`~deeppls.data.CrossSection` pairs the characteristics known at
the start of a period with the return realised over it.  The model fitted on
cross-section ``t`` is applied to the characteristics of cross-section
``t + 1``; its predictions there are the out-of-sample forecasts.  Features
are standardized with statistics from the training cross-section only.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import baselines, dpls, pls
from .data import PanelDataset, apply_standardizer, fit_standardizer
from .deepnet import TrainConfig, forward
from .errors import (
    DimensionMismatch,
    DplsError,
    InsufficientAssets,
    InvalidConfig,
    TooFewObservations,
    TooFewPeriods,
    ZeroVolatility,
)

SCHEMA_VERSION = "1.0"
METHODS = ("ols", "lasso", "pls", "dpls", "pca_insample_only")
KSWEEP_METHODS = ("pls", "dpls", "pca_insample_only")
KSWEEP_MIN_OBS = 100


def derive_seed(seed: int, *labels: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, labels)]).generate_state(1)[0])


@dataclass(frozen=True)
class BacktestConfig:
    method: str = "pls"
    K: int | None = None  # None: choose by cross-validation
    k_grid: tuple = tuple(range(1, 11))
    cv_folds: int = 5
    cv_stride: int | str = 10  # an int >= 1, or "first"
    net_layers: tuple = (100, 100)
    activation: str = "softplus"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100, batch_size=32, learning_rate=1e-2))
    portfolio_sizes: tuple = (10, 50)
    seed: int = 0
    annualize: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.cv_stride != "first" and (not isinstance(self.cv_stride, int) or self.cv_stride < 1):
            raise InvalidConfig("cv_stride must be an integer >= 1 or 'first'")
        if any(int(n) < 1 for n in self.portfolio_sizes):
            raise InvalidConfig("portfolio sizes must be >= 1")
        if self.K is not None and int(self.K) < 1:
            raise InvalidConfig("K must be >= 1")
        if not self.k_grid:
            raise InvalidConfig("k_grid is empty")
        object.__setattr__(self, "k_grid", tuple(int(k) for k in self.k_grid))
        object.__setattr__(self, "net_layers", tuple(int(w) for w in self.net_layers))
        object.__setattr__(self, "portfolio_sizes", tuple(int(n) for n in self.portfolio_sizes))
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig(**self.train))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def replace(self, **changes) -> "BacktestConfig":
        d = {**self.__dict__, **changes}
        return BacktestConfig(**d)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def linf_error(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape:
        raise DimensionMismatch(f"{pred.shape[0]} predictions for {actual.shape[0]} observations")
    if pred.size == 0:
        raise DimensionMismatch("empty input")
    return float(np.max(np.abs(pred - actual)))


def _flatten(panel) -> np.ndarray:
    if isinstance(panel, np.ndarray):
        return panel.ravel().astype(float)
    parts = [np.asarray(p, dtype=float).ravel() for p in panel]
    return np.concatenate(parts) if parts else np.zeros(0)


def total_r2(pred_panel, actual_panel, min_obs: int = 1) -> float:
    """Pooled ``1 - sum (r - r_hat)^2 / sum r^2`` (uncentered denominator)."""
    pred = _flatten(pred_panel)
    actual = _flatten(actual_panel)
    if pred.shape != actual.shape:
        raise DimensionMismatch(f"{pred.size} predictions for {actual.size} observations")
    if actual.size < max(1, int(min_obs)):
        raise TooFewObservations(f"{actual.size} observations, need {min_obs}")
    denom = float(np.sum(actual**2))
    if denom == 0:
        return float("nan")
    return 1.0 - float(np.sum((actual - pred) ** 2)) / denom


def _period_metrics(pred, actual) -> dict:
    err = actual - pred
    return {
        "linf": float(np.max(np.abs(err))),
        "mse": float(np.mean(err**2)),
        "r2": total_r2(pred, actual),
    }


# ---------------------------------------------------------------------------
# per-period fits
# ---------------------------------------------------------------------------


@dataclass
class _PeriodFit:
    pred_in: np.ndarray
    pred_out: np.ndarray | None
    k_used: int | None
    failed: str | None = None
    score_terms_in: tuple | None = None  # (S, model) with pred = S @ Q + centre, for K sweeps
    score_terms_out: tuple | None = None


def _component_terms(model, Xs_in, Xs_out):
    """Prediction building blocks ``S`` (n x K) with ``pred = S @ Q + center``."""
    if isinstance(model, dpls.DplsModel):
        m = model.pls
        S_in = forward(model.net, pls.transform(m, Xs_in))
        S_out = None if Xs_out is None else forward(model.net, pls.transform(m, Xs_out))
    else:
        m = model
        S_in = pls.transform(m, Xs_in) @ m.B
        S_out = None if Xs_out is None else pls.transform(m, Xs_out) @ m.B
    return m, S_in, S_out


def _truncated(S, m, K):
    return (S[:, :K] @ m.Q[:K] + m.y_center)[:, 0]


def fit_period_model(panel: PanelDataset, cfg: BacktestConfig, t: int, K: int | None = None):
    """Standardizer and model fitted on cross-section ``t`` alone."""
    cs = panel.cross_sections[t]
    std = fit_standardizer(cs.features, on_zero_variance="unit")
    Xs = apply_standardizer(std, cs.features)
    r = cs.returns
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if cfg.method == "ols":
            return std, baselines.fit_ols(Xs, r)
        if cfg.method == "lasso":
            return std, baselines.fit_lasso_cv(Xs, r, folds=cfg.cv_folds, seed=derive_seed(cfg.seed, t, 1))
        if cfg.method not in ("pls", "dpls"):
            raise InvalidConfig(f"method {cfg.method!r} has no per-period model")
        K = min(int(K if K is not None else _choose_k(panel, cfg, t)), Xs.shape[1], Xs.shape[0] - 1)
        if cfg.method == "pls":
            return std, pls.fit_nipals(Xs, r, K)
        tc = cfg.train.replace(seed=derive_seed(cfg.seed, t, 2))
        return std, dpls.fit_dpls(Xs, r, K, cfg.net_layers, tc, cfg.activation)


def _fit_one(panel: PanelDataset, cfg: BacktestConfig, t: int, K: int | None, keep_terms: bool):
    cs = panel.cross_sections[t]
    nxt = panel.cross_sections[t + 1] if t + 1 < panel.n_periods else None
    try:
        std, model = fit_period_model(panel, cfg, t, K)
        Xs = apply_standardizer(std, cs.features)
        Xn = None if nxt is None else apply_standardizer(std, nxt.features)
        if cfg.method in ("ols", "lasso"):
            pred_out = None if Xn is None else model.predict(Xn).ravel()
            return _PeriodFit(model.predict(Xs).ravel(), pred_out, None)
        m, S_in, S_out = _component_terms(model, Xs, Xn)
        pred_in = _truncated(S_in, m, m.K)
        pred_out = None if S_out is None else _truncated(S_out, m, m.K)
        fit = _PeriodFit(pred_in, pred_out, m.K)
        if keep_terms:
            fit.score_terms_in = (S_in, m)
            fit.score_terms_out = None if S_out is None else (S_out, m)
        return fit
    except (DplsError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _PeriodFit(
            np.full(cs.n_assets, np.nan),
            None if nxt is None else np.full(nxt.n_assets, np.nan),
            None,
            failed=f"{type(exc).__name__}: {exc}",
        )


def _choose_k(panel: PanelDataset, cfg: BacktestConfig, t: int) -> int:
    cs = panel.cross_sections[t]
    Xs = apply_standardizer(fit_standardizer(cs.features, on_zero_variance="unit"), cs.features)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return pls.select_k_cv(Xs, cs.returns, cfg.k_grid, cfg.cv_folds, derive_seed(cfg.seed, t, 0)).k_star


def k_schedule(panel: PanelDataset, cfg: BacktestConfig) -> list:
    """Component count per period; re-tuned every ``cv_stride`` periods (or only at the first)."""
    T = panel.n_periods
    if cfg.method not in ("pls", "dpls", "pca_insample_only"):
        return [None] * T
    if cfg.K is not None:
        return [int(cfg.K)] * T
    if cfg.method == "pca_insample_only":
        return [max(cfg.k_grid)] * T
    tune = [0] if cfg.cv_stride == "first" else list(range(0, T, int(cfg.cv_stride)))
    chosen = {t: _choose_k(panel, cfg, t) for t in tune}
    out, current = [], None
    for t in range(T):
        current = chosen.get(t, current)
        out.append(current)
    return out


# ---------------------------------------------------------------------------
# portfolios
# ---------------------------------------------------------------------------


def _top_n(pred: np.ndarray, asset_ids: Sequence, n: int) -> np.ndarray:
    id_rank = np.argsort(np.asarray(asset_ids, dtype=object).astype(str), kind="stable")
    rank_of = np.empty_like(id_rank)
    rank_of[id_rank] = np.arange(id_rank.size)
    order = np.lexsort((rank_of, -pred))
    return np.sort(order[:n])


def build_portfolio(
    predictions: Sequence, realized: Sequence, n: int, asset_ids: Sequence | None = None,
    mode: str = "top", seed: int = 0, period_ids: Sequence | None = None,
) -> tuple[np.ndarray, list]:
    """Equal-weight long-only portfolio returns and the selected indices per period.

    ``mode="top"`` takes the ``n`` highest predictions, ties broken by
    ascending asset id; ``mode="random"`` samples ``n`` assets uniformly with
    ``default_rng([seed, t])``.
    """
    n = int(n)
    rets, picks = [], []
    for t, (pred, real) in enumerate(zip(predictions, realized)):
        pred = np.asarray(pred, dtype=float)
        real = np.asarray(real, dtype=float)
        if pred.shape != real.shape:
            raise DimensionMismatch(f"period {t}: {pred.size} predictions for {real.size} returns")
        if real.size < n:
            raise InsufficientAssets(period_ids[t] if period_ids is not None else t, real.size, n)
        ids = asset_ids[t] if asset_ids is not None else [f"{i:08d}" for i in range(real.size)]
        if mode == "top":
            sel = _top_n(pred, ids, n)
        elif mode == "random":
            sel = np.sort(np.random.default_rng([int(seed), t]).choice(real.size, n, replace=False))
        else:
            raise InvalidConfig(f"unknown portfolio mode {mode!r}")
        weights = np.full(n, 1.0 / n)
        rets.append(float(weights @ real[sel]))
        picks.append(sel)
    return np.array(rets), picks


def information_ratio(portfolio_returns, benchmark_returns, annualize: bool = False) -> float:
    """Mean over sample sd (n-1) of the excess returns; monthly unless annualized by sqrt(12)."""
    p = np.asarray(portfolio_returns, dtype=float).ravel()
    b = np.asarray(benchmark_returns, dtype=float).ravel()
    if p.shape != b.shape:
        raise DimensionMismatch(f"{p.size} portfolio returns vs {b.size} benchmark returns")
    if p.size < 2:
        raise TooFewPeriods(f"information ratio needs >= 2 periods, got {p.size}")
    ex = p - b
    sd = float(np.std(ex, ddof=1))
    scale = max(np.max(np.abs(p)), np.max(np.abs(b)), np.finfo(float).tiny)
    if sd <= 1e-14 * scale:
        raise ZeroVolatility("excess returns have zero volatility")
    ir = float(np.mean(ex)) / sd
    return ir * np.sqrt(12.0) if annualize else ir


def _group_columns(panel: PanelDataset) -> list[int]:
    cols = []
    for j in range(panel.n_features):
        vals = np.concatenate([cs.features[:, j] for cs in panel.cross_sections])
        if np.all((vals == 0) | (vals == 1)):
            cols.append(j)
    return cols


def tilt_summary(selections: Sequence, panel: PanelDataset, period_index: Sequence[int] | None = None,
                 group_columns: Sequence[int] | None = None) -> dict:
    """Time-averaged characteristics of the selected portfolios.

    Feature tilts are portfolio means of each period's cross-sectionally
    standardized characteristics.  Binary dummy columns are treated as groups:
    their tilts are membership fractions rescaled to sum to one.
    """
    idx = list(range(len(selections))) if period_index is None else list(period_index)
    groups = _group_columns(panel) if group_columns is None else list(group_columns)
    plain = [j for j in range(panel.n_features) if j not in groups]
    feat, memb = [], []
    for sel, t in zip(selections, idx):
        F = panel.cross_sections[t].features
        Z = apply_standardizer(fit_standardizer(F, on_zero_variance="unit"), F)
        feat.append(Z[np.asarray(sel)][:, plain].mean(axis=0))
        if groups:
            memb.append(F[np.asarray(sel)][:, groups].mean(axis=0))
    names = panel.feature_names
    out = {"features": {names[j]: float(v) for j, v in zip(plain, np.mean(feat, axis=0))}, "groups": {}}
    if groups:
        m = np.mean(memb, axis=0)
        tot = m.sum()
        out["groups"] = {names[j]: float(v / tot if tot > 0 else 0.0) for j, v in zip(groups, m)}
    return out


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class BacktestReport:
    method: str
    period_ids: list
    metrics: dict  # per-period lists: linf_in, linf_out, r2_in, r2_out, mse_in, mse_out, k_used
    totals: dict
    portfolio: dict  # size -> {"returns": [...], "benchmark": [...], "information_ratio": x}
    tilts: dict
    failed: dict
    config: dict
    ksweep: list = field(default_factory=list)
    predictions_in: list = field(default_factory=list, repr=False)
    predictions_out: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "period_ids": self.period_ids,
            "metrics": self.metrics,
            "totals": self.totals,
            "portfolio": {str(k): v for k, v in self.portfolio.items()},
            "tilts": {str(k): v for k, v in self.tilts.items()},
            "failed": {str(k): v for k, v in self.failed.items()},
            "config": self.config,
            "ksweep": self.ksweep,
        }


def _pca_panel(panel: PanelDataset) -> np.ndarray:
    ids0 = list(panel.cross_sections[0].asset_ids)
    rows = []
    for cs in panel.cross_sections:
        if list(cs.asset_ids) != ids0:
            raise InvalidConfig("PCA factors need the same assets in every period")
        rows.append(cs.returns)
    return np.array(rows)


def run_backtest(panel: PanelDataset, cfg: BacktestConfig) -> BacktestReport:
    """Fit on every cross-section and forecast the next one."""
    T = panel.n_periods
    if T < 2:
        raise TooFewPeriods(f"backtest needs >= 2 periods, got {T}")
    ks = k_schedule(panel, cfg)
    fits = _run_fits(panel, cfg, ks, keep_terms=False)
    return _assemble(panel, cfg, fits)


def _run_fits(panel, cfg, ks, keep_terms):
    T = panel.n_periods
    if cfg.method == "pca_insample_only":
        R = _pca_panel(panel)
        K = min(int(ks[0]), *R.shape)
        model = baselines.fit_pca_factors(R, K)
        rec = model.reconstruct()
        fits = []
        for t in range(T):
            f = _PeriodFit(rec[t], None, K)
            if keep_terms:
                f.score_terms_in = (model, t)
            fits.append(f)
        return fits
    args = [(panel, cfg, t, ks[t], keep_terms) for t in range(T)]
    if cfg.n_jobs and cfg.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=int(cfg.n_jobs)) as ex:
            return list(ex.map(_fit_one_star, args))
    return [_fit_one(*a) for a in args]


def _fit_one_star(a):
    return _fit_one(*a)


def _assemble(panel: PanelDataset, cfg: BacktestConfig, fits) -> BacktestReport:
    T = panel.n_periods
    css = panel.cross_sections
    metrics = {k: [] for k in ("linf_in", "linf_out", "r2_in", "r2_out", "mse_in", "mse_out", "k_used")}
    failed = {}
    for t, f in enumerate(fits):
        if f.failed:
            failed[css[t].period_id] = f.failed
        mi = _period_metrics(f.pred_in, css[t].returns) if not f.failed else dict(linf=np.nan, mse=np.nan, r2=np.nan)
        if f.pred_out is not None and not f.failed:
            mo = _period_metrics(f.pred_out, css[t + 1].returns)
        else:
            mo = dict(linf=np.nan, mse=np.nan, r2=np.nan)
        for side, mm in (("in", mi), ("out", mo)):
            for key in ("linf", "mse", "r2"):
                metrics[f"{key}_{side}"].append(float(mm[key]))
        metrics["k_used"].append(f.k_used)

    ok_in = [t for t, f in enumerate(fits) if not f.failed]
    ok_out = [t for t in ok_in if fits[t].pred_out is not None]
    totals = {
        "r2_total_in": total_r2([fits[t].pred_in for t in ok_in], [css[t].returns for t in ok_in])
        if ok_in else float("nan"),
        "r2_total_out": total_r2([fits[t].pred_out for t in ok_out], [css[t + 1].returns for t in ok_out])
        if ok_out else float("nan"),
    }

    portfolio, tilts = {}, {}
    if ok_out:
        preds = [fits[t].pred_out for t in ok_out]
        real = [css[t + 1].returns for t in ok_out]
        ids = [css[t + 1].asset_ids for t in ok_out]
        bench = np.array([float(np.mean(r)) for r in real])
        for n in cfg.portfolio_sizes:
            try:
                rets, sel = build_portfolio(preds, real, n, ids, period_ids=[css[t + 1].period_id for t in ok_out])
            except InsufficientAssets as exc:
                portfolio[n] = {"error": str(exc)}
                continue
            try:
                ir = information_ratio(rets, bench, cfg.annualize)
            except (ZeroVolatility, TooFewPeriods):
                ir = float("nan")
            portfolio[n] = {
                "periods": [css[t + 1].period_id for t in ok_out],
                "returns": rets.tolist(),
                "benchmark": bench.tolist(),
                "information_ratio": ir,
            }
            tilts[n] = tilt_summary(sel, panel, [t + 1 for t in ok_out])

    return BacktestReport(
        method=cfg.method,
        period_ids=[cs.period_id for cs in css],
        metrics=metrics,
        totals=totals,
        portfolio=portfolio,
        tilts=tilts,
        failed=failed,
        config=cfg.to_dict(),
        predictions_in=[f.pred_in for f in fits],
        predictions_out=[f.pred_out for f in fits],
    )


def k_sweep(panel: PanelDataset, method: str = "pls", k_max: int = 10, cfg: BacktestConfig | None = None,
            min_obs: int = KSWEEP_MIN_OBS) -> list[dict]:
    """Pooled total R^2 when predictions use only the first ``K`` components.

    Per period the model is fitted with its cross-validated ``K*_t`` (capped
    at ``k_max``); a period contributes to every ``K <= K*_t``.  Entries with
    fewer than ``min_obs`` pooled observations, and all out-of-sample entries
    for the in-sample-only PCA model, are ``None``.
    """
    if method not in KSWEEP_METHODS:
        raise InvalidConfig(f"k_sweep supports {KSWEEP_METHODS}, not {method!r}")
    cfg = (cfg or BacktestConfig()).replace(method=method, k_grid=tuple(range(1, int(k_max) + 1)))
    if panel.n_periods < 2:
        raise TooFewPeriods(f"k_sweep needs >= 2 periods, got {panel.n_periods}")
    css = panel.cross_sections
    ks = k_schedule(panel, cfg)
    fits = _run_fits(panel, cfg, ks, keep_terms=True)
    rows = []
    for K in range(1, int(k_max) + 1):
        pin, ain, pout, aout = [], [], [], []
        for t, f in enumerate(fits):
            if f.failed or f.k_used is None or f.k_used < K:
                continue
            if method == "pca_insample_only":
                model, tt = f.score_terms_in
                pin.append(model.factors[tt, :K] @ model.loadings[:K] + model.mean)
                ain.append(css[t].returns)
                continue
            S_in, m = f.score_terms_in
            pin.append(_truncated(S_in, m, K))
            ain.append(css[t].returns)
            if f.score_terms_out is not None:
                S_out, m = f.score_terms_out
                pout.append(_truncated(S_out, m, K))
                aout.append(css[t + 1].returns)
        n_in = int(sum(a.size for a in ain))
        n_out = int(sum(a.size for a in aout))
        r_in = total_r2(pin, ain) if n_in >= max(1, min_obs) else None
        r_out = total_r2(pout, aout) if n_out >= max(1, min_obs) and method != "pca_insample_only" else None
        rows.append({"K": K, "r2_total_in": r_in, "r2_total_out": r_out, "n_in": n_in, "n_out": n_out})
    return rows


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return "NA" if not np.isfinite(v) else repr(v)
    return str(v)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def write_report(report: BacktestReport, outdir) -> list[str]:
    """Write report.json, metrics.csv, portfolio.csv, tilts.csv and ksweep.csv."""
    os.makedirs(outdir, exist_ok=True)
    paths = []

    def path(name):
        p = os.path.join(outdir, name)
        paths.append(p)
        return p

    with open(path("report.json"), "w") as fh:
        json.dump(_json_safe(report.to_dict()), fh, sort_keys=True, indent=2)
        fh.write("\n")

    with open(path("metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "period", "metric", "value"])
        for i, pid in enumerate(report.period_ids):
            for key in ("linf_in", "linf_out", "r2_in", "r2_out", "mse_in", "mse_out", "k_used"):
                w.writerow([report.method, pid, key, _fmt(report.metrics[key][i])])
        for key, val in report.totals.items():
            w.writerow([report.method, "ALL", key, _fmt(val)])

    with open(path("portfolio.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "size", "period", "portfolio_return", "benchmark_return", "excess_return"])
        for size, rec in report.portfolio.items():
            for pid, r, b in zip(rec.get("periods", []), rec.get("returns", []), rec.get("benchmark", [])):
                w.writerow([report.method, size, pid, _fmt(r), _fmt(b), _fmt(r - b)])
        for size, rec in report.portfolio.items():
            if "information_ratio" in rec:
                w.writerow([report.method, size, "IR", _fmt(rec["information_ratio"]), "NA", "NA"])

    with open(path("tilts.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "size", "kind", "name", "tilt"])
        for size, rec in report.tilts.items():
            for kind in ("features", "groups"):
                for name, val in rec[kind].items():
                    w.writerow([report.method, size, kind[:-1], name, _fmt(val)])

    with open(path("ksweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "K", "r2_total_in", "r2_total_out", "n_in", "n_out"])
        for row in report.ksweep:
            w.writerow([report.method, row["K"], _fmt(row["r2_total_in"]), _fmt(row["r2_total_out"]),
                        row["n_in"], row["n_out"]])
    return paths
