"""Command-line front end: ``deeppls <subcommand> [options]``.

Configuration resolves as built-in defaults < ``--config`` JSON file <
``--set key=value`` < explicit flags.  Every run writes ``run_manifest.json``
into its output directory; ``deeppls replay <manifest>`` re-executes it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import backtest as bt
from . import baselines, deepnet, dpls, pls
from . import verify as vf
from .data import SynthConfig, apply_standardizer, generate_panel, load_panel, save_panel
from .deepnet import TrainConfig
from .errors import (
    DimensionMismatch,
    EmptyPanel,
    GridEmpty,
    InsufficientAssets,
    InvalidConfig,
    InvalidLink,
    MissingColumn,
    NonNumericCell,
    TooFewObservations,
    TooFewPeriods,
    ZeroVarianceColumn,
)

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

VALIDATION_ERRORS = (
    InvalidConfig,
    InvalidLink,
    DimensionMismatch,
    MissingColumn,
    EmptyPanel,
    NonNumericCell,
    ZeroVarianceColumn,
    GridEmpty,
    TooFewPeriods,
    TooFewObservations,
    InsufficientAssets,
    FileNotFoundError,
    IsADirectoryError,
    json.JSONDecodeError,
    ValueError,
    KeyError,
)


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def split_seed(seed: int, label: str) -> int:
    """32-bit child seed: first four bytes of ``sha256("<seed>:<label>")``."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


# ---------------------------------------------------------------------------
# value parsers
# ---------------------------------------------------------------------------


def int_list(text) -> list[int]:
    """``"100,100"`` or ``"0..9"`` (inclusive) or a JSON list."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    if isinstance(text, int):
        return [text]
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok.strip()]


def str_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [tok.strip() for tok in str(text).split(",") if tok.strip()]


def _set_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ---------------------------------------------------------------------------
# subcommand registry
# ---------------------------------------------------------------------------

COMMON_DEFAULTS = {"seed": 0, "jobs": 1, "out": "out"}

TRAIN_DEFAULTS = {
    "layers": [100, 100],
    "activation": "softplus",
    "epochs": 100,
    "batch_size": 32,
    "learning_rate": 1e-2,
    "l1_penalty": 0.0,
    "init": "uniform_glorot",
}

DEFAULTS: dict[str, dict] = {
    "synthesize": {
        "n": 300, "p": 15, "q": 1, "k_true": 3, "link": "tanh", "noise_sd": 0.1,
        "regime": "gaussian", "signal_scale": 1.0, "periods": 20, "intercept": 0.0,
    },
    "fit": {
        "panel": None, "method": "pls", "k": None, "k_max": 10, "cv_folds": 5,
        "period": -1, "lam": None, **TRAIN_DEFAULTS,
    },
    "predict": {"model": None, "panel": None, "period": None},
    "backtest": {
        "panel": None, "methods": ["pls"], "seeds": None, "k": None, "k_max": 10,
        "cv_folds": 5, "cv_stride": 10, "portfolio_sizes": [10, 50], "annualize": False,
        "ksweep": False, **TRAIN_DEFAULTS,
    },
    "attribute": {"model": None, "panel": None, "period": -1, "top": 3},
    "sensitivities": {
        "model": None, "panel": None, "period": -1, "k": None, "k_max": 10, "cv_folds": 5,
        "bootstrap": 0, **TRAIN_DEFAULTS,
    },
    "diagnose": {"panel": None, "matrix": None, "period": -1, "k": 1},
    "verify": {
        "check": None, "n": [500, 5000, 50000], "link": "tanh", "p": 10, "k": 2,
        "n_seeds": 10, "pairs": 100, "hessian_pairs": 50, "rows": 1000,
    },
}

LIST_KEYS = {"layers": int_list, "portfolio_sizes": int_list, "seeds": int_list, "n": int_list,
             "methods": str_list}


def _add_common(sp: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    sp.add_argument("--config", default=S, help="JSON file of option values")
    sp.add_argument("--set", dest="overrides", action="append", default=S, metavar="KEY=VALUE",
                    help="override one option (repeatable)")
    sp.add_argument("--seed", type=int, default=S, help="master seed (default 0)")
    sp.add_argument("--jobs", type=int, default=S, help="worker processes (default 1)")
    sp.add_argument("--out", default=S, help="output directory (default ./out)")


def _add_train(sp: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    sp.add_argument("--layers", default=S, help="hidden widths, e.g. 100,100")
    sp.add_argument("--activation", default=S)
    sp.add_argument("--epochs", type=int, default=S)
    sp.add_argument("--batch-size", type=int, default=S)
    sp.add_argument("--learning-rate", "--lr", type=float, default=S)
    sp.add_argument("--l1-penalty", type=float, default=S)
    sp.add_argument("--init", default=S, choices=["uniform_glorot", "pls_warm_start"])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(prog="deeppls", description="Deep partial least squares toolkit.")
    p.add_argument("--version", action="version", version=f"deeppls {__version__}")
    sub = p.add_subparsers(dest="subcommand", parser_class=_Parser)

    sp = sub.add_parser("synthesize", help="generate a synthetic panel")
    for flag, typ in (("--n", int), ("--p", int), ("--q", int), ("--k-true", int), ("--noise-sd", float),
                      ("--signal-scale", float), ("--periods", int), ("--intercept", float)):
        sp.add_argument(flag, type=typ, default=S)
    sp.add_argument("--link", default=S)
    sp.add_argument("--regime", default=S)
    _add_common(sp)

    sp = sub.add_parser("fit", help="fit one model on one period")
    sp.add_argument("--panel", default=S)
    sp.add_argument("--method", default=S, help="ols, lasso, pls or dpls")
    sp.add_argument("--k", type=int, default=S, help="components (default: cross-validated)")
    sp.add_argument("--k-max", type=int, default=S)
    sp.add_argument("--cv-folds", type=int, default=S)
    sp.add_argument("--period", type=int, default=S, help="period index, negative counts from the end")
    sp.add_argument("--lam", type=float, default=S, help="LASSO penalty (default: cross-validated)")
    _add_train(sp)
    _add_common(sp)

    sp = sub.add_parser("predict", help="apply a saved model to a panel")
    sp.add_argument("--model", default=S)
    sp.add_argument("--panel", default=S)
    sp.add_argument("--period", type=int, default=S)
    _add_common(sp)

    sp = sub.add_parser("backtest", help="period-by-period out-of-sample backtest")
    sp.add_argument("--panel", default=S)
    sp.add_argument("--methods", "--method", dest="methods", default=S)
    sp.add_argument("--seeds", default=S, help="seed list, e.g. 0..9 or 1,2,3")
    sp.add_argument("--k", type=int, default=S)
    sp.add_argument("--k-max", type=int, default=S)
    sp.add_argument("--cv-folds", type=int, default=S)
    sp.add_argument("--cv-stride", default=S)
    sp.add_argument("--portfolio-sizes", default=S)
    sp.add_argument("--annualize", action="store_true", default=S)
    sp.add_argument("--ksweep", action="store_true", default=S)
    _add_train(sp)
    _add_common(sp)

    sp = sub.add_parser("attribute", help="Taylor attribution of DPLS predictions")
    sp.add_argument("--model", default=S)
    sp.add_argument("--panel", default=S)
    sp.add_argument("--period", type=int, default=S)
    sp.add_argument("--top", type=int, default=S)
    _add_common(sp)

    sp = sub.add_parser("sensitivities", help="covariate Jacobians and Hessians")
    sp.add_argument("--model", default=S)
    sp.add_argument("--panel", default=S)
    sp.add_argument("--period", type=int, default=S)
    sp.add_argument("--k", type=int, default=S)
    sp.add_argument("--k-max", type=int, default=S)
    sp.add_argument("--cv-folds", type=int, default=S)
    sp.add_argument("--bootstrap", type=int, default=S, help="number of resamples (0: none)")
    _add_train(sp)
    _add_common(sp)

    sp = sub.add_parser("diagnose", help="PLS shrinkage factors")
    sp.add_argument("--panel", default=S)
    sp.add_argument("--matrix", default=S, help="CSV with header; last column is the response")
    sp.add_argument("--period", type=int, default=S)
    sp.add_argument("--k", type=int, default=S)
    _add_common(sp)

    sp = sub.add_parser("verify", help="built-in numerical checks")
    sp.add_argument("check", choices=["consistency", "gradcheck", "attribution"])
    sp.add_argument("--n", default=S, help="sample sizes for consistency, e.g. 500,5000,50000")
    sp.add_argument("--link", default=S)
    sp.add_argument("--p", type=int, default=S)
    sp.add_argument("--k", type=int, default=S)
    sp.add_argument("--n-seeds", type=int, default=S)
    sp.add_argument("--pairs", type=int, default=S)
    sp.add_argument("--hessian-pairs", type=int, default=S)
    sp.add_argument("--rows", type=int, default=S)
    _add_common(sp)

    sp = sub.add_parser("replay", help="re-run from a run_manifest.json")
    sp.add_argument("manifest")
    sp.add_argument("--out", default=S, help="write to this directory instead")
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file, ``--set`` pairs and explicit flags."""
    cmd = args.subcommand
    allowed = {**COMMON_DEFAULTS, **DEFAULTS[cmd]}
    cfg = dict(allowed)
    flags = vars(args).copy()
    flags.pop("subcommand")
    layers = []
    if "config" in flags:
        with open(flags.pop("config"), encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise InvalidConfig("config file must hold a JSON object")
        layers.append(file_cfg)
    if "overrides" in flags:
        pairs = {}
        for item in flags.pop("overrides"):
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            pairs[key.strip().replace("-", "_")] = _set_value(value)
        layers.append(pairs)
    layers.append(flags)
    for layer in layers:
        unknown = sorted(set(layer) - set(allowed))
        if unknown:
            raise InvalidConfig(f"unknown option(s) for {cmd}: {', '.join(unknown)}")
        cfg.update(layer)
    for key, parse in LIST_KEYS.items():
        if key == "n" and cmd != "verify":
            continue
        if key in cfg and cfg[key] is not None:
            cfg[key] = parse(cfg[key])
    if cmd == "backtest" and cfg["cv_stride"] != "first":
        cfg["cv_stride"] = int(cfg["cv_stride"])
    if int(cfg["jobs"]) < 1:
        raise InvalidConfig("--jobs must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require(cfg: dict, key: str):
    if cfg.get(key) in (None, ""):
        raise InvalidConfig(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _period(panel, index: int):
    n = panel.n_periods
    if not -n <= int(index) < n:
        raise InvalidConfig(f"period index {index} out of range for {n} periods")
    return panel.cross_sections[int(index)]


def _train_cfg(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        l1_penalty=float(cfg["l1_penalty"]),
        init=str(cfg["init"]),
        seed=seed,
    )


def _dump_json(path: Path, obj) -> None:
    text = json.dumps(bt._json_safe(obj), sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _choose_k(cfg: dict, X, Y) -> int:
    if cfg.get("k") is not None:
        return int(cfg["k"])
    k_max = min(int(cfg["k_max"]), X.shape[1])
    res = pls.select_k_cv(X, Y, range(1, k_max + 1), folds=int(cfg["cv_folds"]),
                          seed=split_seed(cfg["seed"], "cv"))
    return int(res.k_star)


def _load_model(path) -> tuple[str, Any, list]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    kind = d.get("type")
    loaders = {
        "pls": pls.PlsModel.from_dict,
        "dpls": dpls.DplsModel.from_dict,
        "ols": baselines.OlsModel.from_dict,
        "lasso": baselines.LassoModel.from_dict,
    }
    if kind not in loaders:
        raise InvalidConfig(f"model file has unknown type {kind!r}")
    return kind, loaders[kind](d["model"]), list(d.get("feature_names", []))


def _predict(kind: str, model, X) -> np.ndarray:
    if kind == "pls":
        out = pls.predict(model, X)
    elif kind == "dpls":
        out = dpls.predict_dpls(model, X)
    else:
        out = model.predict(X)
    return np.asarray(out).reshape(len(X), -1)[:, 0]


# ---------------------------------------------------------------------------
# subcommands: each returns (exit code, list of written file names)
# ---------------------------------------------------------------------------


def cmd_synthesize(cfg: dict, out: Path):
    sc = SynthConfig(
        n=int(cfg["n"]), p=int(cfg["p"]), q=int(cfg["q"]), k_true=int(cfg["k_true"]),
        link=cfg["link"], noise_sd=float(cfg["noise_sd"]), regime=cfg["regime"],
        seed=split_seed(cfg["seed"], "synthesize"), signal_scale=float(cfg["signal_scale"]),
    )
    panel, draws = generate_panel(sc, int(cfg["periods"]), intercept=float(cfg["intercept"]))
    save_panel(panel, out / "panel.csv")
    truth = draws[0].truth.to_dict()
    _dump_json(out / "truth.json", {"schema_version": SCHEMA_VERSION, "synth_seed": sc.seed, **truth})
    print(f"wrote {panel.n_periods} periods x {sc.n} assets to {out / 'panel.csv'}")
    return EXIT_OK, ["panel.csv", "truth.json"]


def cmd_fit(cfg: dict, out: Path):
    method = cfg["method"]
    if method not in ("ols", "lasso", "pls", "dpls"):
        raise InvalidConfig(f"unknown method {method!r}; choose ols, lasso, pls or dpls")
    panel = load_panel(_require(cfg, "panel"))
    cs = _period(panel, cfg["period"])
    X, y = cs.features, cs.returns
    summary: dict = {"method": method, "period": cs.period_id, "n_obs": int(X.shape[0]),
                     "K": None, "loss_curve": None, "parameter_count": None}
    if method == "ols":
        model = baselines.fit_ols(X, y)
    elif method == "lasso":
        if cfg["lam"] is None:
            model = baselines.fit_lasso_cv(X, y, folds=int(cfg["cv_folds"]), seed=split_seed(cfg["seed"], "cv"))
        else:
            model = baselines.fit_lasso(X, y, float(cfg["lam"]))
        summary["lambda"] = float(model.lam)
    else:
        K = _choose_k(cfg, X, y)
        if method == "pls":
            model = pls.fit_nipals(X, y, K)
        else:
            model = dpls.fit_dpls(X, y, K, cfg["layers"], _train_cfg(cfg, split_seed(cfg["seed"], "train")),
                                  cfg["activation"])
            summary["loss_curve"] = list(model.loss_curve)
            summary["parameter_count"] = deepnet.count_parameters(model.net)
        summary["K"] = int(model.K)
    doc = {"schema_version": SCHEMA_VERSION, "type": method, "feature_names": list(panel.feature_names),
           "model": model.to_dict()}
    _dump_json(out / "model.json", doc)
    _dump_json(out / "fit_summary.json", {"schema_version": SCHEMA_VERSION, **summary})
    print(f"fitted {method} (K={summary['K']}) on period {cs.period_id}")
    return EXIT_OK, ["fit_summary.json", "model.json"]


def cmd_predict(cfg: dict, out: Path):
    kind, model, names = _load_model(_require(cfg, "model"))
    panel = load_panel(_require(cfg, "panel"))
    if names and list(panel.feature_names) != names:
        raise DimensionMismatch("panel features differ from the model's training features")
    sections = panel.cross_sections if cfg["period"] is None else [_period(panel, cfg["period"])]
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "asset", "prediction"])
        for cs in sections:
            for a, v in zip(cs.asset_ids, _predict(kind, model, cs.features)):
                w.writerow([cs.period_id, a, repr(float(v))])
    print(f"wrote predictions for {len(sections)} period(s)")
    return EXIT_OK, ["predictions.csv"]


def _backtest_job(args):
    panel, bcfg, ksweep, kmax = args
    report = bt.run_backtest(panel, bcfg)
    if ksweep and bcfg.method in bt.KSWEEP_METHODS:
        report.ksweep = bt.k_sweep(panel, bcfg.method, kmax, bcfg)
    return report


def cmd_backtest(cfg: dict, out: Path):
    panel = load_panel(_require(cfg, "panel"))
    methods = cfg["methods"]
    seeds = cfg["seeds"] if cfg["seeds"] is not None else [cfg["seed"]]
    if not methods or not seeds:
        raise InvalidConfig("need at least one method and one seed")
    multi = len(seeds) > 1
    jobs = int(cfg["jobs"])
    runs = [(m, s) for m in methods for s in seeds]
    inner_jobs = 1 if (len(runs) > 1 and jobs > 1) else jobs
    tasks = []
    for m, s in runs:
        bcfg = bt.BacktestConfig(
            method=m, K=cfg["k"], k_grid=tuple(range(1, int(cfg["k_max"]) + 1)), cv_folds=int(cfg["cv_folds"]),
            cv_stride=cfg["cv_stride"], net_layers=tuple(cfg["layers"]), activation=cfg["activation"],
            train=_train_cfg(cfg, 0), portfolio_sizes=tuple(cfg["portfolio_sizes"]),
            seed=split_seed(s, "backtest"), annualize=bool(cfg["annualize"]), n_jobs=inner_jobs,
        )
        tasks.append((panel, bcfg, bool(cfg["ksweep"]), int(cfg["k_max"])))
    if len(tasks) > 1 and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_backtest_job, tasks))
    else:
        reports = [_backtest_job(t) for t in tasks]
    written = []
    rows = []
    for (m, s), rep in zip(runs, reports):
        sub = Path(m) / f"seed{s}" if multi else Path(m)
        for p in bt.write_report(rep, out / sub):
            written.append(str(Path(p).relative_to(out)))
        linf = [v for v in rep.metrics["linf_out"] if v is not None and np.isfinite(v)]
        rows.append((m, s, rep.totals.get("r2_total_out"), rep.totals.get("r2_total_in"),
                     float(np.median(linf)) if linf else None))
        print(f"{m} seed={s}: r2_total_out={bt._fmt(rep.totals.get('r2_total_out'))}")
    if len(runs) > 1:
        with open(out / "aggregate.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "n_seeds", "median_r2_total_out", "median_r2_total_in", "median_linf_out"])
            for m in methods:
                mine = [r for r in rows if r[0] == m]

                def med(i):
                    vals = [r[i] for r in mine if r[i] is not None and np.isfinite(r[i])]
                    return float(np.median(vals)) if vals else None

                w.writerow([m, len(mine), bt._fmt(med(2)), bt._fmt(med(3)), bt._fmt(med(4))])
                print(f"{m}: median r2_total_out={bt._fmt(med(2))} over {len(mine)} seed(s)")
        written.append("aggregate.csv")
    return EXIT_OK, sorted(written)


def cmd_attribute(cfg: dict, out: Path):
    kind, model, names = _load_model(_require(cfg, "model"))
    if kind != "dpls":
        raise InvalidConfig("attribution needs a dpls model")
    panel = load_panel(_require(cfg, "panel"))
    cs = _period(panel, cfg["period"])
    V = pls.transform(model.pls, cs.features)
    att = dpls.taylor_attribution(model, V)
    top = int(cfg["top"])
    periods = [cs.period_id] * len(cs.asset_ids)
    (out / "attribution.csv").write_text(att.to_csv(periods, list(cs.asset_ids), top), encoding="utf-8")
    doc = {"schema_version": SCHEMA_VERSION, "period": cs.period_id, **att.to_dict(),
           "aggregate": att.aggregate().to_dict(), "factor_split": att.aggregate().factor_split(top)}
    _dump_json(out / "attribution.json", doc)
    rel = float(np.max(np.abs(att.residual()) / att.scale()))
    print(f"attributed {len(cs.asset_ids)} rows; max relative residual {rel:.3e}")
    return EXIT_OK, ["attribution.csv", "attribution.json"]


def cmd_sensitivities(cfg: dict, out: Path):
    panel = load_panel(_require(cfg, "panel"))
    cs = _period(panel, cfg["period"])
    X, y = cs.features, cs.returns
    if cfg.get("model"):
        kind, model, _ = _load_model(cfg["model"])
        if kind != "dpls":
            raise InvalidConfig("sensitivities need a dpls model")
        if int(cfg["bootstrap"]) > 0:
            raise InvalidConfig("--bootstrap refits models; omit --model to use it")
        report = dpls.sensitivity_report(model, apply_standardizer(model.pls.x_standardizer, X))
    else:
        K = _choose_k(cfg, X, y)
        tcfg = _train_cfg(cfg, split_seed(cfg["seed"], "train"))
        if int(cfg["bootstrap"]) > 0:
            report = dpls.bootstrap_sensitivities(
                X, y, K, int(cfg["bootstrap"]), seed=split_seed(cfg["seed"], "bootstrap"),
                net_layers=cfg["layers"], train_cfg=tcfg, activation=cfg["activation"], n_jobs=int(cfg["jobs"]),
            )
        else:
            model = dpls.fit_dpls(X, y, K, cfg["layers"], tcfg, cfg["activation"])
            report = dpls.sensitivity_report(model, apply_standardizer(model.pls.x_standardizer, X))
    (out / "sensitivities.csv").write_text(report.to_csv(panel.feature_names, cs.period_id), encoding="utf-8")
    _dump_json(out / "sensitivities.json",
               {**report.to_dict(), "period": cs.period_id, "feature_names": list(panel.feature_names)})
    print(f"wrote sensitivities for {len(panel.feature_names)} features")
    return EXIT_OK, ["sensitivities.csv", "sensitivities.json"]


def _read_matrix(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or len(rows[0]) < 2:
        raise InvalidConfig("matrix CSV needs a header, >= 2 rows and >= 2 columns")
    width = len(rows[0])
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise NonNumericCell(f"non-numeric cell in {path}: {exc}") from None
    if body.ndim != 2 or body.shape[1] != width:
        raise InvalidConfig("ragged matrix CSV")
    if not np.all(np.isfinite(body)):
        raise NonNumericCell("matrix CSV has non-finite values")
    return body[:, :-1], body[:, -1]


def cmd_diagnose(cfg: dict, out: Path):
    if cfg.get("matrix"):
        X, y = _read_matrix(cfg["matrix"])
    elif cfg.get("panel"):
        cs = _period(load_panel(cfg["panel"]), cfg["period"])
        X, y = cs.features, cs.returns
    else:
        raise InvalidConfig("diagnose needs --panel or --matrix")
    rep = pls.scale_factors(X, y, int(cfg["k"]))
    with open(out / "shrinkage.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "eigenvalue", "f_j", "f_j_closed_form", "defined", "degenerate"])
        for r in rep.to_rows():
            w.writerow([r["j"], repr(r["eigenvalue"]), bt._fmt(r["f_j"]), bt._fmt(r["f_j_closed_form"]),
                        int(r["defined"]), int(r["degenerate"])])
    n_big = int(np.sum(rep.factors[rep.defined] > 1))
    print(f"K={rep.K}: {int(rep.defined.sum())} defined factors, {n_big} above 1")
    return EXIT_OK, ["shrinkage.csv"]


def cmd_verify(cfg: dict, out: Path):
    check = cfg["check"]
    seed = split_seed(cfg["seed"], f"verify:{check}")
    if check == "consistency":
        seeds = [split_seed(cfg["seed"], f"verify:consistency:{i}") for i in range(int(cfg["n_seeds"]))]
        res = vf.consistency(cfg["n"], cfg["link"], int(cfg["p"]), int(cfg["k"]), seeds)
    elif check == "gradcheck":
        res = vf.gradcheck(int(cfg["pairs"]), int(cfg["hessian_pairs"]), seed=seed)
    else:
        res = vf.attribution(int(cfg["rows"]), seed=seed)
    for line in res.lines():
        print(line)
    _dump_json(out / "verify.json", {"schema_version": SCHEMA_VERSION, "check": check,
                                     "passed": res.passed, "metrics": res.metrics})
    if not res.passed:
        failing = ", ".join(f"{k}={v}" for k, v in sorted(res.metrics.items()))
        raise CheckFailed(f"{check} failed: {failing}")
    return EXIT_OK, ["verify.json"]


COMMANDS: dict[str, Callable] = {
    "synthesize": cmd_synthesize,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "backtest": cmd_backtest,
    "attribute": cmd_attribute,
    "sensitivities": cmd_sensitivities,
    "diagnose": cmd_diagnose,
    "verify": cmd_verify,
}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def execute(cmd: str, cfg: dict) -> int:
    """Run a resolved config and write its manifest."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "subcommand": cmd,
        "seed": int(cfg["seed"]),
        "config": cfg,
    }
    # written first so failed runs can be replayed too
    _dump_json(out / "run_manifest.json", {**manifest, "outputs": []})
    code, outputs = COMMANDS[cmd](cfg, out)
    _dump_json(out / "run_manifest.json", {**manifest, "outputs": sorted(outputs)})
    return code


def replay(manifest_path, out=None) -> int:
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cmd = manifest.get("subcommand")
    if cmd not in COMMANDS:
        raise InvalidConfig(f"manifest names unknown subcommand {cmd!r}")
    cfg = dict(manifest["config"])
    if out is not None:
        cfg["out"] = str(out)
    return execute(cmd, cfg)


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error: code={exc.__class__.__name__} message={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.subcommand is None:
            raise UsageError("a subcommand is required")
        if args.subcommand == "replay":
            return replay(args.manifest, getattr(args, "out", None))
        cfg = resolve_config(args)
        return execute(args.subcommand, cfg)
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    except CheckFailed as exc:
        return _fail(exc, EXIT_RUNTIME)
    except VALIDATION_ERRORS as exc:
        return _fail(exc, EXIT_USAGE)
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        return _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
