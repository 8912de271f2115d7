import json
import warnings

import numpy as np
import pytest

from deeppls import deepnet as dn
from deeppls import dpls, pls
from deeppls.data import SynthConfig, generate_panel, generate_synthetic
from deeppls.errors import DimensionMismatch, InvalidConfig, InvalidLink, NonPsdInput


def small_data(seed=0, link="tanh", n=300, p=6, k=2, q=1, noise=0.05):
    return generate_synthetic(SynthConfig(n=n, p=p, q=q, k_true=k, link=link, noise_sd=noise, seed=seed))


def quick_cfg(seed=0, epochs=20, lr=1e-2):
    return dn.TrainConfig(epochs=epochs, learning_rate=lr, seed=seed)


@pytest.fixture(scope="module")
def softplus_model():
    d = small_data(1, q=2, k=3)
    return dpls.fit_dpls(d.X, d.Y, 3, (8, 6), quick_cfg(1)), d


def random_model(seed, p=5, K=3, q=2, activation="softplus"):
    """A DPLS model with a random (untrained) score network on top of a real PLS fit."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, p))
    Y = X[:, :q] + 0.3 * rng.normal(size=(60, q))
    m = pls.fit_nipals(X, Y, K)
    dims = (K, 6, 5, K)
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        act = "linear" if i == len(dims) - 2 else activation
        layers.append(dn.Layer(rng.uniform(-1, 1, (b, a)), rng.uniform(-1, 1, b), act))
    return dpls.DplsModel(m, dn.Network(tuple(layers)))


def test_linear_net_matches_pls():
    d = small_data(2, link="linear", noise=0.1)
    model = dpls.fit_dpls(d.X, d.Y, 2, (), dn.TrainConfig(epochs=200, learning_rate=1e-2), activation="linear")
    diff = dpls.predict_dpls(model, d.X) - pls.predict(model.pls, d.X)
    assert np.mean(diff**2) <= 1e-3


def test_exact_linear_score_map_reproduces_pls():
    d = small_data(3, link="linear")
    m = pls.fit_nipals(d.X, d.Y, 2)
    W = np.linalg.lstsq(m.V, m.U, rcond=None)[0].T
    net = dn.Network((dn.Layer(W, np.zeros(2), "linear"),))
    model = dpls.DplsModel(m, net)
    assert np.max(np.abs(dpls.predict_dpls(model, d.X) - pls.predict(m, d.X))) <= 1e-10


def test_mismatched_net_rejected():
    m = pls.fit_nipals(*[small_data().X, small_data().Y], 2)
    with pytest.raises(DimensionMismatch):
        dpls.DplsModel(m, dn.init_network(3, [4, 3]))


def test_zero_net_constant_prediction():
    d = small_data(4)
    m = pls.fit_nipals(d.X, d.Y, 2)
    u0 = np.array([0.3, -0.2])
    net = dn.Network((dn.Layer(np.zeros((2, 2)), u0, "linear"),))
    pred = dpls.predict_dpls(dpls.DplsModel(m, net), d.X)
    assert np.allclose(pred, u0 @ m.Q + m.y_center, atol=1e-15)


def test_row_permutation(softplus_model, rng):
    model, d = softplus_model
    perm = rng.permutation(d.X.shape[0])
    assert np.allclose(dpls.predict_dpls(model, d.X[perm]), dpls.predict_dpls(model, d.X)[perm], atol=1e-14)


def test_decoupling_keeps_pls_bitwise(softplus_model):
    model, _ = softplus_model
    refit = dpls.refit_network(model, (5,), quick_cfg(7))
    for name in ("P", "Q", "V", "U"):
        assert getattr(refit.pls, name).tobytes() == getattr(model.pls, name).tobytes()


def test_fit_is_deterministic():
    d = small_data(5)
    a = dpls.fit_dpls(d.X, d.Y, 2, (6,), quick_cfg(3))
    b = dpls.fit_dpls(d.X, d.Y, 2, (6,), quick_cfg(3))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_json_round_trip(softplus_model):
    model, d = softplus_model
    back = dpls.DplsModel.from_dict(json.loads(json.dumps(model.to_dict())))
    assert np.max(np.abs(dpls.predict_dpls(back, d.X) - dpls.predict_dpls(model, d.X))) <= 1e-12


# -- sensitivities ----------------------------------------------------------------


def fd_covariate_jacobian(model, x, h=1e-5):
    cols = [
        (dpls.predict_standardized(model, (x + h * e)[None]) - dpls.predict_standardized(model, (x - h * e)[None]))[0]
        / (2 * h)
        for e in np.eye(x.size)
    ]
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("seed", range(10))
def test_covariate_jacobian_fd(seed):
    model = random_model(seed, activation="tanh" if seed % 2 else "softplus")
    x = np.random.default_rng(seed + 50).normal(size=5)
    J = dpls.covariate_jacobian(model, x)
    Jf = fd_covariate_jacobian(model, x)
    assert J.shape == (2, 5)
    assert np.max(np.abs(J - Jf)) / np.max(np.abs(Jf)) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_covariate_hessian_fd(seed):
    model = random_model(seed)
    x = np.random.default_rng(seed + 70).normal(size=5)
    h = 1e-4
    fd = np.stack(
        [(dpls.covariate_jacobian(model, x + h * e) - dpls.covariate_jacobian(model, x - h * e)) / (2 * h) for e in np.eye(5)],
        axis=2,
    )
    for a in range(2):
        H = dpls.covariate_hessian(model, x, a)
        assert np.array_equal(H, H.T)
        assert np.max(np.abs(H - fd[a])) <= 1e-3


def test_linear_net_sensitivities():
    model = random_model(1, activation="linear")
    M, _ = dn.collapse_linear(model.net)
    R = model.pls.rotation
    expected = model.pls.Q.T @ M @ R.T
    for x in (np.zeros(5), np.ones(5)):
        assert np.allclose(dpls.covariate_jacobian(model, x), expected, atol=1e-14)
    assert np.all(dpls.covariate_hessian(model, np.ones(5), 0) == 0)


def test_rank_one_hessian_for_single_component(rng):
    X = rng.normal(size=(50, 4))
    m = pls.fit_nipals(X, X[:, 0] + 0.1 * rng.normal(size=50), 1)
    net = dn.init_network(1, [5, 1], activation="softplus", seed=2)
    H = dpls.covariate_hessian(dpls.DplsModel(m, net), rng.normal(size=4))
    assert np.linalg.matrix_rank(H, tol=1e-10 * max(np.abs(H).max(), 1e-300)) <= 1


def test_sensitivity_report_shapes(softplus_model):
    model, d = softplus_model
    rep = dpls.sensitivity_report(model, np.zeros((3, 6)))
    assert rep.jacobian_at_zero.shape == (2, 6)
    assert np.allclose(rep.jacobian_mean, rep.jacobian_at_zero)
    assert rep.hessian_at_zero.shape == (2, 6, 6)
    assert "hessian_at_zero" in rep.to_csv()


def test_bootstrap_deterministic_and_validated():
    d = small_data(6, n=120)
    cfg = quick_cfg(0, epochs=5)
    a = dpls.bootstrap_sensitivities(d.X, d.Y, 2, 2, seed=3, net_layers=(4,), train_cfg=cfg)
    b = dpls.bootstrap_sensitivities(d.X, d.Y, 2, 2, seed=3, net_layers=(4,), train_cfg=cfg)
    for k in ("q05", "q50", "q95"):
        assert a.bootstrap_quantiles[k].tobytes() == b.bootstrap_quantiles[k].tobytes()
    with pytest.raises(InvalidConfig):
        dpls.bootstrap_sensitivities(d.X, d.Y, 2, 1)


def test_bootstrap_parallel_matches_serial():
    d = small_data(6, n=120)
    cfg = quick_cfg(0, epochs=3)
    a = dpls.bootstrap_sensitivities(d.X, d.Y, 2, 3, seed=1, net_layers=(4,), train_cfg=cfg)
    b = dpls.bootstrap_sensitivities(d.X, d.Y, 2, 3, seed=1, net_layers=(4,), train_cfg=cfg, n_jobs=2)
    assert a.bootstrap_quantiles["q50"].tobytes() == b.bootstrap_quantiles["q50"].tobytes()


def test_bootstrap_noiseless_linear_is_tight():
    # a linear score map on noiseless data: resampling noise vanishes
    d = generate_synthetic(SynthConfig(n=20000, p=4, k_true=1, link="linear", noise_sd=0.0, seed=2))
    cfg = dn.TrainConfig(epochs=2, learning_rate=1e-3, batch_size=256, init="pls_warm_start")
    rep = dpls.bootstrap_sensitivities(d.X, d.Y, 1, 5, seed=0, net_layers=(), train_cfg=cfg, activation="linear")
    q = rep.bootstrap_quantiles
    assert np.all(np.abs(q["q95"] - q["q05"]) <= 0.05 * np.abs(q["q50"]))


# -- attribution -------------------------------------------------------------


def test_attribution_at_origin():
    model = random_model(3)
    att = dpls.taylor_attribution(model, np.zeros((1, 3)))
    assert np.all(att.linear == 0) and np.all(att.quadratic == 0)
    assert np.max(np.abs(att.hot)) <= 1e-15
    assert np.allclose(att.total, att.alpha, atol=1e-15)


def test_attribution_linear_net_has_no_curvature(rng):
    model = random_model(4, activation="linear")
    att = dpls.taylor_attribution(model, rng.normal(size=(50, 3)))
    assert np.max(np.abs(att.quadratic)) <= 1e-10
    assert np.max(np.abs(att.hot)) <= 1e-10


def test_attribution_identity(rng):
    model = random_model(5)
    V = rng.normal(size=(200, 3))
    att = dpls.taylor_attribution(model, V)
    assert np.array_equal(att.total, dpls.predict_scores(model, V))
    assert np.all(np.abs(att.residual()) <= 1e-12 * att.scale())


def test_attribution_factor_split_and_csv(rng):
    model = random_model(6)
    att = dpls.taylor_attribution(model, rng.normal(size=(20, 3)))
    split = att.factor_split(top=2)
    assert len(split) == 3
    assert np.allclose(sum(split.values()), att.linear[:, 0])
    agg = att.aggregate()
    assert agg.total.shape == (1, 2)
    assert np.allclose(agg.total[0], att.total.mean(axis=0))
    text = att.to_csv(periods=[0] * 20)
    assert text.splitlines()[0] == "period,entity,component,value"


def test_latent_factors_linear_reduction():
    model = random_model(7)
    m = model.pls
    net = dn.Network((dn.Layer(m.B, np.zeros(m.K), "linear"),))
    lin = dpls.DplsModel(m, net)
    assert np.max(np.abs(dpls.latent_factors(lin) - m.B @ m.Q)) <= 1e-10
    zero = dpls.DplsModel(m, dn.Network((dn.Layer(np.zeros((m.K, m.K)), np.ones(m.K), "tanh"), dn.Layer(np.eye(m.K), np.zeros(m.K)))))
    assert np.all(dpls.latent_factors(zero) == 0)


def test_latent_factors_fd():
    model = random_model(8)
    h = 1e-5
    zero = np.zeros(model.K)
    fd = np.stack(
        [(dpls.predict_scores(model, (zero + h * e)[None]) - dpls.predict_scores(model, (zero - h * e)[None]))[0] / (2 * h)
         for e in np.eye(model.K)]
    )
    assert np.max(np.abs(dpls.latent_factors(model) - fd)) <= 1e-6


def test_expected_return_attribution():
    V = np.random.default_rng(0).normal(size=(5, 2))
    assert np.all(dpls.expected_return_attribution(V, np.zeros(2)) == 0)
    assert np.allclose(dpls.expected_return_attribution(np.ones((4, 1)), [0.3]), 0.3)
    F = np.array([[0.1, -0.2], [0.3, 0.4]])
    brute = np.mean([V @ f for f in F], axis=0)
    assert np.allclose(dpls.expected_return_attribution(V, factor_history=F), brute, atol=1e-15)
    with pytest.raises(DimensionMismatch):
        dpls.expected_return_attribution(V, [1.0])


def test_conditional_variance():
    V = np.array([[1.0, 0.0], [0.5, 2.0]])
    out = dpls.conditional_variance_attribution(V, np.zeros((2, 2)), [0.1, 0.2])
    assert np.allclose(out.total, [0.1, 0.2])
    out = dpls.conditional_variance_attribution([[1.0, 0.0]], np.eye(2), 0.0)
    assert out.total[0] == 1.0
    with pytest.warns(NonPsdInput):
        out = dpls.conditional_variance_attribution(V, [[1.0, 2.0], [2.0, 1.0]], 0.0)
    assert out.clipped and np.all(out.total >= 0)


def test_conditional_variance_monte_carlo():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 3))
    S = A @ A.T
    v = rng.normal(size=3)
    draws = rng.multivariate_normal(np.zeros(3), S, size=1_000_000) @ v + rng.normal(0, 0.5, 1_000_000)
    out = dpls.conditional_variance_attribution(v[None], S, 0.25)
    assert abs(out.total[0] - draws.var()) <= 0.01 * out.total[0]


# -- composability -----------------------------------------------------------


def test_composability_linear_exact():
    rep = dpls.composability_check(SynthConfig(n=10000, p=10, k_true=2, link="linear", noise_sd=0.0), 2)
    assert np.all(rep.cosine_similarities >= 1 - 1e-6)


def test_composability_tanh_large_n():
    rep = dpls.composability_check(SynthConfig(n=50000, p=10, k_true=2, link="tanh", seed=1), 2)
    assert np.all(rep.cosine_similarities >= 0.99)
    assert np.all(np.isfinite(rep.kappa_estimates))
    assert np.all((rep.cosine_similarities >= 0) & (rep.cosine_similarities <= 1))


def test_composability_refuses_skewed():
    with pytest.raises(InvalidLink):
        dpls.verify_composability(SynthConfig(regime="skewed"), 2, [500])


def test_dpls_beats_pls_on_tanh():
    gains = []
    for seed in range(10):
        cfg = SynthConfig(n=5000, p=10, k_true=2, link="tanh", seed=seed, signal_scale=2.0)
        _, (train, test) = generate_panel(cfg, 2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = dpls.fit_dpls(train.X, train.Y, 2, (32, 32), dn.TrainConfig(epochs=15, batch_size=64, learning_rate=1e-2, seed=seed))
        mse_d = np.mean((dpls.predict_dpls(model, test.X) - test.Y) ** 2)
        mse_p = np.mean((pls.predict(model.pls, test.X) - test.Y) ** 2)
        gains.append(mse_p - mse_d)
    assert np.median(gains) >= 0
