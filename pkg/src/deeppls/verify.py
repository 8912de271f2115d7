"""Self-contained numerical checks used by ``deeppls verify``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import deepnet as dn
from . import dpls, pls
from .data import SynthConfig


@dataclass
class CheckResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [f"{status} {self.name}"]
        out += [f"  {k} = {v}" for k, v in sorted(self.metrics.items())]
        return out


def random_network(rng, dims, activation) -> dn.Network:
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        act = "linear" if i == len(dims) - 2 else activation
        layers.append(dn.Layer(rng.uniform(-1, 1, (b, a)), rng.uniform(-1, 1, b), act))
    return dn.Network(tuple(layers))


def _random_dpls(rng, p=6, K=3, q=2, activation="softplus") -> dpls.DplsModel:
    X = rng.normal(size=(80, p))
    Y = X[:, :q] @ rng.normal(size=(q, q)) + 0.3 * rng.normal(size=(80, q))
    m = pls.fit_nipals(X, Y, K)
    return dpls.DplsModel(m, random_network(rng, (K, 8, 6, K), activation))


def consistency(
    n_grid=(500, 5000, 50000), link="tanh", p=10, K=2, seeds=range(10), threshold=0.99
) -> CheckResult:
    cfg = SynthConfig(n=int(n_grid[0]), p=p, k_true=K, link=link)
    study = dpls.composability_study(cfg, K, n_grid, list(seeds))
    med = study["median_cosine"]
    ns = sorted(med)
    final_ok = bool(np.all(med[ns[-1]] >= threshold))
    mono = all(np.all(med[b] >= med[a]) for a, b in zip(ns, ns[1:]))
    metrics = {f"median_cosine_n{n}": [round(float(c), 8) for c in med[n]] for n in ns}
    metrics.update({f"median_kappa_n{n}": [round(float(c), 6) for c in study["median_kappa"][n]] for n in ns})
    metrics["non_decreasing"] = mono
    return CheckResult("consistency", final_ok and mono, metrics)


def gradcheck(pairs=100, hessian_pairs=50, seed=0) -> CheckResult:
    rng = np.random.default_rng([seed, 0x96AD])
    worst_j = worst_h = worst_asym = worst_e2e = 0.0
    for i in range(pairs):
        act = "softplus" if i % 2 == 0 else "tanh"
        dims = tuple(rng.integers(1, 7, size=rng.integers(2, 5)))
        net = random_network(rng, dims, act)
        v = rng.normal(size=dims[0])
        J = dn.jacobian(net, v)
        h = 1e-5
        Jf = np.stack(
            [(dn.forward(net, v + h * e)[0] - dn.forward(net, v - h * e)[0]) / (2 * h) for e in np.eye(dims[0])],
            axis=1,
        )
        worst_j = max(worst_j, float(np.max(np.abs(J - Jf)) / max(np.max(np.abs(Jf)), 1e-8)))
        if i < hessian_pairs:
            h = 1e-4
            raw = dn.hessian_all(net, v, symmetrize=False)
            fd = np.stack(
                [(dn.jacobian(net, v + h * e) - dn.jacobian(net, v - h * e)) / (2 * h) for e in np.eye(dims[0])],
                axis=2,
            )
            worst_h = max(worst_h, float(np.max(np.abs(raw - fd))))
            sym = dn.hessian_all(net, v)
            worst_asym = max(worst_asym, float(np.max(np.abs(sym - np.swapaxes(sym, 1, 2)))))
    for _ in range(10):
        model = _random_dpls(rng)
        x = rng.normal(size=model.pls.p)
        h = 1e-5
        J = dpls.covariate_jacobian(model, x)
        Jf = np.stack(
            [
                (dpls.predict_standardized(model, (x + h * e)[None]) - dpls.predict_standardized(model, (x - h * e)[None]))[0]
                / (2 * h)
                for e in np.eye(model.pls.p)
            ],
            axis=1,
        )
        worst_e2e = max(worst_e2e, float(np.max(np.abs(J - Jf)) / max(np.max(np.abs(Jf)), 1e-8)))
    passed = worst_j <= 1e-4 and worst_h <= 1e-3 and worst_asym == 0.0 and worst_e2e <= 1e-4
    return CheckResult(
        "gradcheck",
        passed,
        {
            "max_jacobian_rel_error": worst_j,
            "max_hessian_abs_error": worst_h,
            "max_hessian_asymmetry": worst_asym,
            "max_covariate_jacobian_rel_error": worst_e2e,
        },
    )


def attribution(rows=1000, seed=0) -> CheckResult:
    rng = np.random.default_rng([seed, 0xA771])
    model = _random_dpls(rng)
    att = dpls.taylor_attribution(model, rng.normal(size=(rows, model.K)))
    rel = float(np.max(np.abs(att.residual()) / att.scale()))
    lin = _random_dpls(rng, activation="linear")
    att_lin = dpls.taylor_attribution(lin, rng.normal(size=(rows, lin.K)))
    curv = float(max(np.max(np.abs(att_lin.quadratic)), np.max(np.abs(att_lin.hot))))
    return CheckResult(
        "attribution",
        rel <= 1e-12 and curv <= 1e-10,
        {"max_relative_residual": rel, "linear_net_max_quadratic_or_hot": curv},
    )
