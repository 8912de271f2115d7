"""Panel ingestion, train-only standardization and synthetic data generation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import (
    DimensionMismatch,
    EmptyPanel,
    InvalidConfig,
    MissingColumn,
    NonNumericCell,
    ZeroVarianceColumn,
)

MISSING_TOKENS = frozenset({"", "na", "nan", "n/a", "null", "none", "."})

DEFAULT_SCHEMA = {"period": "period", "asset": "asset", "return": "ret_excess"}

LINKS = ("linear", "tanh", "cubic", "softplus_mix")
REGIMES = ("gaussian", "skewed")


# ---------------------------------------------------------------------------
# panel types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossSection:
    """One period: excess returns and the lagged characteristics that predict them.

    Row ``i`` pairs the return realised over period ``period_id`` with the
    characteristics observed at the end of the previous period.
    """

    period_id: object
    asset_ids: tuple
    returns: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        returns = np.asarray(self.returns, dtype=float).reshape(-1)
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            raise DimensionMismatch("features must be a 2-d matrix")
        if features.shape[0] != returns.shape[0] or len(self.asset_ids) != returns.shape[0]:
            raise DimensionMismatch(
                f"period {self.period_id!r}: {returns.shape[0]} returns, "
                f"{features.shape[0]} feature rows, {len(self.asset_ids)} asset ids"
            )
        if not (np.all(np.isfinite(returns)) and np.all(np.isfinite(features))):
            raise ValueError(f"period {self.period_id!r} contains non-finite values")
        returns.setflags(write=False)
        features.setflags(write=False)
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "asset_ids", tuple(self.asset_ids))

    @property
    def n_assets(self) -> int:
        return self.returns.shape[0]


@dataclass(frozen=True)
class PanelDataset:
    cross_sections: tuple
    feature_names: tuple
    drop_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cross_sections", tuple(self.cross_sections))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        p = len(self.feature_names)
        prev = None
        for cs in self.cross_sections:
            if cs.features.shape[1] != p:
                raise DimensionMismatch(
                    f"period {cs.period_id!r} has {cs.features.shape[1]} features, expected {p}"
                )
            if prev is not None and not _period_key(prev) < _period_key(cs.period_id):
                raise ValueError("periods must be strictly increasing")
            prev = cs.period_id

    @property
    def periods(self) -> list:
        return [cs.period_id for cs in self.cross_sections]

    @property
    def n_periods(self) -> int:
        return len(self.cross_sections)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def replace_period(self, index: int, cross_section: CrossSection) -> "PanelDataset":
        sections = list(self.cross_sections)
        sections[index] = cross_section
        return PanelDataset(sections, self.feature_names, self.drop_count)


def _period_key(value):
    # ints sort numerically, anything else lexicographically (ISO dates work)
    if isinstance(value, (int, np.integer)):
        return (0, int(value), "")
    return (1, 0, str(value))


def _parse_period(token: str):
    try:
        return int(token)
    except ValueError:
        return token


def load_panel(path, schema: Mapping[str, str] | None = None) -> PanelDataset:
    """Read a CSV panel with header ``period,asset,ret_excess,<features...>``.

    ``schema`` maps the roles ``period``, ``asset`` and ``return`` to column
    names and may list ``features`` explicitly; by default every remaining
    column is a feature.  Rows with a missing or non-finite value in any used
    field are dropped and counted in ``PanelDataset.drop_count``.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyPanel(f"{path}: file is empty") from None
        for role in ("period", "asset", "return"):
            if schema[role] not in header:
                raise MissingColumn(f"{path}: missing {role} column {schema[role]!r}")
        if "features" in schema:
            feature_names = list(schema["features"])
            for name in feature_names:
                if name not in header:
                    raise MissingColumn(f"{path}: missing feature column {name!r}")
        else:
            used = {schema["period"], schema["asset"], schema["return"]}
            feature_names = [h for h in header if h not in used]
        if not feature_names:
            raise MissingColumn(f"{path}: no feature columns")

        i_period = header.index(schema["period"])
        i_asset = header.index(schema["asset"])
        i_ret = header.index(schema["return"])
        i_feat = [header.index(name) for name in feature_names]

        groups: dict = {}
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise NonNumericCell(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            period_tok = row[i_period].strip()
            asset_tok = row[i_asset].strip()
            if period_tok.lower() in MISSING_TOKENS or asset_tok.lower() in MISSING_TOKENS:
                dropped += 1
                continue
            values = []
            missing = False
            for col, idx in zip([schema["return"], *feature_names], [i_ret, *i_feat]):
                tok = row[idx].strip()
                if tok.lower() in MISSING_TOKENS:
                    missing = True
                    continue
                try:
                    val = float(tok)
                except ValueError:
                    raise NonNumericCell(
                        f"{path}:{lineno}: column {col!r} has non-numeric value {tok!r}"
                    ) from None
                if not math.isfinite(val):
                    missing = True
                values.append(val)
            if missing:
                dropped += 1
                continue
            groups.setdefault(_parse_period(period_tok), []).append((asset_tok, values))

    if not groups:
        raise EmptyPanel(f"{path}: no usable rows")
    sections = []
    for period in sorted(groups, key=_period_key):
        rows = groups[period]
        sections.append(
            CrossSection(
                period_id=period,
                asset_ids=[a for a, _ in rows],
                returns=np.array([v[0] for _, v in rows]),
                features=np.array([v[1:] for _, v in rows]).reshape(len(rows), -1),
            )
        )
    return PanelDataset(sections, feature_names, dropped)


def save_panel(panel: PanelDataset, path, schema: Mapping[str, str] | None = None) -> None:
    """Write ``panel`` as CSV; floats use 17 significant digits so values round-trip."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([schema["period"], schema["asset"], schema["return"], *panel.feature_names])
        for cs in panel.cross_sections:
            for i, asset in enumerate(cs.asset_ids):
                writer.writerow(
                    [cs.period_id, asset, f"{cs.returns[i]:.17g}"]
                    + [f"{v:.17g}" for v in cs.features[i]]
                )


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    sds: np.ndarray
    target_mean: float = 0.0
    target_sd: float = 1.0

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
            "target_mean": float(self.target_mean),
            "target_sd": float(self.target_sd),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardizer":
        return cls(
            np.asarray(d["means"], dtype=float),
            np.asarray(d["sds"], dtype=float),
            float(d.get("target_mean", 0.0)),
            float(d.get("target_sd", 1.0)),
        )


def fit_standardizer(features, target=None, on_zero_variance: str = "raise") -> Standardizer:
    """Column means and unbiased (n-1) standard deviations of ``features``.

    Parameters
    ----------
    features : array (n, p)
    target : array (n,), optional
        Response whose mean and sd are recorded alongside.
    on_zero_variance : {"raise", "unit"}
        ``"raise"`` raises :class:`ZeroVarianceColumn`; ``"unit"`` keeps the
        column with sd 1 so it standardizes to a constant zero.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit a standardizer")
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1)
    scale = np.maximum(np.abs(means), 1.0)
    degenerate = sds <= 1e-14 * scale
    if np.any(degenerate):
        if on_zero_variance == "raise":
            raise ZeroVarianceColumn(int(np.flatnonzero(degenerate)[0]))
        sds = np.where(degenerate, 1.0, sds)
    t_mean, t_sd = 0.0, 1.0
    if target is not None:
        y = np.asarray(target, dtype=float).reshape(-1)
        t_mean = float(y.mean())
        t_sd = float(y.std(ddof=1)) if y.shape[0] > 1 else 1.0
        if not t_sd > 0:
            t_sd = 1.0
    return Standardizer(means, sds, t_mean, t_sd)


def apply_standardizer(s: Standardizer, features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if X.shape[0] == s.means.shape[0] else X[:, None]
    if X.shape[1] != s.means.shape[0]:
        raise DimensionMismatch(
            f"standardizer has {s.means.shape[0]} columns, input has {X.shape[1]}"
        )
    return (X - s.means) / s.sds


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _lognormal_shape_for_skewness(target: float) -> float:
    # skewness of exp(N(0, s^2)) is (e^{s^2}+2) sqrt(e^{s^2}-1)
    f = lambda s: (math.exp(s * s) + 2.0) * math.sqrt(math.expm1(s * s)) - target
    return brentq(f, 1e-6, 3.0, xtol=1e-14)


SKEW_TARGET = 1.0
SKEW_SHAPE = _lognormal_shape_for_skewness(SKEW_TARGET)


@dataclass(frozen=True)
class SynthConfig:
    """Settings for :func:`generate_synthetic`.

    ``signal_scale`` multiplies the orthogonal inner matrix so every latent
    index ``v @ B_true[:, m]`` has standard deviation ``signal_scale``;
    larger values push the nonlinear links further from linear.
    """

    n: int = 1000
    p: int = 10
    q: int = 1
    k_true: int = 2
    link: str = "linear"
    noise_sd: float = 0.1
    regime: str = "gaussian"
    seed: int = 0
    signal_scale: float = 1.0

    def __post_init__(self):
        for name in ("n", "p", "q", "k_true"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
        if self.k_true > self.p:
            raise InvalidConfig(f"k_true={self.k_true} exceeds p={self.p}")
        if self.link not in LINKS:
            raise InvalidConfig(f"unknown link {self.link!r}; choose from {LINKS}")
        if self.regime not in REGIMES:
            raise InvalidConfig(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if not self.noise_sd >= 0:
            raise InvalidConfig("noise_sd must be >= 0")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        if not self.signal_scale > 0:
            raise InvalidConfig("signal_scale must be > 0")

    def replace(self, **changes) -> "SynthConfig":
        return SynthConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class SynthTruth:
    P_true: np.ndarray  # k x p, orthonormal rows
    B_true: np.ndarray  # k x k, signal_scale * orthogonal
    Q_true: np.ndarray  # k x q

    def coefficients(self) -> np.ndarray:
        """Linear-index coefficients ``P^T B Q`` (p x q) mapping clean x to the link input."""
        return self.P_true.T @ self.B_true @ self.Q_true

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}


@dataclass(frozen=True)
class SynthData:
    X: np.ndarray
    Y: np.ndarray
    truth: SynthTruth
    latent: np.ndarray  # n x k latent x-scores v
    X_clean: np.ndarray  # v @ P_true before noise and skew transform
    cfg: SynthConfig = field(repr=False)

    def truth_json(self) -> str:
        return json.dumps({**self.truth.to_dict(), "cfg": asdict(self.cfg)}, sort_keys=True)


def apply_link(link: str, W: np.ndarray) -> np.ndarray:
    if link == "linear":
        return W.copy()
    if link == "tanh":
        return np.tanh(W)
    if link == "cubic":
        return W**3
    if link == "softplus_mix":
        # softplus on even latent components, tanh on odd ones; softplus centred at 0
        out = np.tanh(W)
        out[:, ::2] = np.logaddexp(0.0, W[:, ::2]) - math.log(2.0)
        return out
    raise InvalidConfig(f"unknown link {link!r}")


def _truth_matrices(cfg: SynthConfig, rng: np.random.Generator) -> SynthTruth:
    k, p, q = cfg.k_true, cfg.p, cfg.q
    P, _ = np.linalg.qr(rng.standard_normal((p, k)))
    B, _ = np.linalg.qr(rng.standard_normal((k, k)))
    Q = rng.standard_normal((k, q)) / math.sqrt(k)
    return SynthTruth(P.T.copy(), cfg.signal_scale * B, Q)


def _skew_transform(X: np.ndarray, truth: SynthTruth, noise_sd: float) -> np.ndarray:
    sigma = np.sqrt(np.sum(truth.P_true**2, axis=0) + noise_sd**2)
    s2 = SKEW_SHAPE**2
    mean = math.exp(s2 / 2.0)
    sd = math.sqrt(math.expm1(s2) * math.exp(s2))
    return (np.exp(X * (SKEW_SHAPE / sigma)) - mean) / sd


def _draw(cfg: SynthConfig, truth: SynthTruth, rng: np.random.Generator) -> SynthData:
    V = rng.standard_normal((cfg.n, cfg.k_true))
    X_clean = V @ truth.P_true
    X = X_clean + cfg.noise_sd * rng.standard_normal(X_clean.shape)
    U = apply_link(cfg.link, V @ truth.B_true)
    Y = U @ truth.Q_true + cfg.noise_sd * rng.standard_normal((cfg.n, cfg.q))
    if cfg.regime == "skewed":
        X = _skew_transform(X, truth, cfg.noise_sd)
    return SynthData(X=X, Y=Y, truth=truth, latent=V, X_clean=X_clean, cfg=cfg)


def generate_synthetic(cfg: SynthConfig) -> SynthData:
    """Draw ``(X, Y)`` from the latent-score mechanism.

    ``v ~ N(0, I_k)``, ``x = v P + e_x``, ``u = link(v B)``, ``y = u Q + e_y``
    with both noise terms ``N(0, noise_sd^2)``.  In the skewed regime each x
    column is pushed through a recentred exponential whose population
    skewness is ``SKEW_TARGET``.  Output is a pure function of ``cfg``.
    """
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    truth = _truth_matrices(cfg, rng)
    return _draw(cfg, truth, rng)


def generate_panel(
    cfg: SynthConfig, n_periods: int, intercept: float = 0.0, feature_prefix: str = "z"
) -> tuple[PanelDataset, list[SynthData]]:
    """A panel of independent cross-sections sharing one set of truth matrices.

    Each period draws fresh latent scores for ``cfg.n`` assets; the features
    in period ``t`` play the role of characteristics observed at ``t-1`` and
    the returns are ``y[:, 0] + intercept``.
    """
    if n_periods < 1:
        raise InvalidConfig("n_periods must be >= 1")
    truth = _truth_matrices(cfg, np.random.default_rng([cfg.seed, 0x5EED]))
    sections, draws = [], []
    for t in range(n_periods):
        draw = _draw(cfg, truth, np.random.default_rng([cfg.seed, 0xBA5E, t]))
        draws.append(draw)
        sections.append(
            CrossSection(
                period_id=t,
                asset_ids=[f"A{i:05d}" for i in range(cfg.n)],
                returns=draw.Y[:, 0] + intercept,
                features=draw.X,
            )
        )
    names = [f"{feature_prefix}{j}" for j in range(cfg.p)]
    return PanelDataset(sections, names), draws


def sample_skewness(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = x - x.mean(axis=0)
    return (d**3).mean(axis=0) / (d**2).mean(axis=0) ** 1.5


def to_matrix(values: Sequence | np.ndarray) -> np.ndarray:
    """Coerce a vector or matrix to a 2-d float array (vectors become columns)."""
    A = np.asarray(values, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise DimensionMismatch(f"expected a vector or matrix, got shape {A.shape}")
    return A
