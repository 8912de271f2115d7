import math

import numpy as np
import pytest

from deeppls.data import (
    CrossSection,
    PanelDataset,
    SKEW_SHAPE,
    Standardizer,
    SynthConfig,
    apply_standardizer,
    fit_standardizer,
    generate_panel,
    generate_synthetic,
    load_panel,
    sample_skewness,
    save_panel,
)
from deeppls.errors import (
    DimensionMismatch,
    EmptyPanel,
    InvalidConfig,
    MissingColumn,
    NonNumericCell,
    ZeroVarianceColumn,
)

CSV6 = """period,asset,ret_excess,size,value
1,A,0.01,1.0,2.0
1,B,-0.02,0.5,1.0
1,C,0.03,0.2,0.1
2,A,0.00,1.1,2.1
2,B,0.01,0.4,1.2
2,C,-0.01,0.3,0.0
"""


def write(tmp_path, text, name="panel.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_six_rows(tmp_path):
    panel = load_panel(write(tmp_path, CSV6))
    assert panel.n_periods == 2
    assert panel.n_features == 2
    assert [cs.n_assets for cs in panel.cross_sections] == [3, 3]
    assert panel.drop_count == 0
    assert list(panel.feature_names) == ["size", "value"]


def test_missing_value_row_dropped(tmp_path):
    text = CSV6.replace("2,B,0.01,0.4,1.2", "2,B,0.01,NA,1.2")
    panel = load_panel(write(tmp_path, text))
    assert panel.drop_count == 1
    assert panel.cross_sections[1].n_assets == 2


def test_missing_return_column(tmp_path):
    text = CSV6.replace("ret_excess", "ret")
    with pytest.raises(MissingColumn):
        load_panel(write(tmp_path, text))


def test_non_numeric_cell_names_location(tmp_path):
    text = CSV6.replace("0.5,1.0", "big,1.0")
    with pytest.raises(NonNumericCell, match="size"):
        load_panel(write(tmp_path, text))


def test_empty_panel(tmp_path):
    with pytest.raises(EmptyPanel):
        load_panel(write(tmp_path, "period,asset,ret_excess,size\n"))


def test_periods_sorted_after_load(tmp_path):
    lines = CSV6.strip().splitlines()
    text = "\n".join([lines[0]] + lines[4:] + lines[1:4]) + "\n"
    panel = load_panel(write(tmp_path, text))
    assert panel.periods == [1, 2]


def test_save_load_round_trip(tmp_path, rng):
    panel, _ = generate_panel(SynthConfig(n=20, p=3, seed=4), 3)
    path = tmp_path / "rt.csv"
    save_panel(panel, path)
    back = load_panel(path)
    for a, b in zip(panel.cross_sections, back.cross_sections):
        assert np.array_equal(a.returns, b.returns)
        assert np.array_equal(a.features, b.features)
        assert list(a.asset_ids) == list(b.asset_ids)


def test_standardizer_two_points():
    s = fit_standardizer([[1.0], [3.0]])
    assert s.means[0] == 2.0
    assert s.sds[0] == pytest.approx(math.sqrt(2.0), abs=1e-15)


def test_standardizer_idempotent_on_standardized(rng):
    A = rng.normal(size=(100, 3))
    A = (A - A.mean(0)) / A.std(0, ddof=1)
    out = apply_standardizer(fit_standardizer(A), A)
    assert np.max(np.abs(out - A)) <= 1e-10


def test_constant_column_rejected():
    with pytest.raises(ZeroVarianceColumn) as info:
        fit_standardizer([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
    assert info.value.index == 0


def test_apply_standardizer_examples():
    assert apply_standardizer(Standardizer(np.zeros(1), np.ones(1)), [[2.0]]).tolist() == [[2.0]]
    out = apply_standardizer(Standardizer(np.array([2.0]), np.array([2.0])), [[4.0], [0.0]])
    assert out.tolist() == [[1.0], [-1.0]]
    with pytest.raises(DimensionMismatch):
        apply_standardizer(Standardizer(np.zeros(1), np.ones(1)), np.zeros((2, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_standardize_own_training_block(seed):
    A = np.random.default_rng(seed).normal(3.0, 5.0, size=(50, 4))
    Z = apply_standardizer(fit_standardizer(A), A)
    assert np.max(np.abs(Z.mean(0))) <= 1e-10
    assert np.max(np.abs(Z.std(0, ddof=1) - 1)) <= 1e-10


def test_noiseless_linear_is_exact():
    d = generate_synthetic(SynthConfig(n=100, p=4, q=1, k_true=1, link="linear", noise_sd=0.0, seed=7))
    Xa = np.column_stack([np.ones(100), d.X])
    coef, *_ = np.linalg.lstsq(Xa, d.Y, rcond=None)
    assert np.linalg.norm(d.Y - Xa @ coef) < 1e-8
    mech = d.X_clean @ d.truth.coefficients()
    assert np.max(np.abs(d.Y - mech)) <= 1e-8


def test_synthetic_determinism():
    cfg = SynthConfig(n=30, p=5, seed=11, link="tanh")
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a.X.tobytes() == b.X.tobytes()
    assert a.Y.tobytes() == b.Y.tobytes()


def test_skewed_regime_positive_skew():
    # population skewness of the transform is 1 by construction of SKEW_SHAPE
    s2 = SKEW_SHAPE**2
    assert (math.exp(s2) + 2) * math.sqrt(math.expm1(s2)) == pytest.approx(1.0, abs=1e-12)
    d = generate_synthetic(SynthConfig(n=50000, p=5, regime="skewed", seed=3))
    skew = sample_skewness(d.X)
    assert np.all(skew > 0.5)


@pytest.mark.parametrize(
    "kwargs",
    [dict(n=0), dict(p=2, k_true=3), dict(link="relu"), dict(regime="heavy"), dict(noise_sd=-1.0)],
)
def test_invalid_config(kwargs):
    with pytest.raises(InvalidConfig):
        SynthConfig(**kwargs)


def test_cross_section_rejects_nonfinite():
    with pytest.raises(ValueError):
        CrossSection(0, ["a"], np.array([np.nan]), np.zeros((1, 1)))


def test_panel_requires_increasing_periods():
    cs = CrossSection(1, ["a", "b"], np.zeros(2), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        PanelDataset([cs, cs], ["x"])


def test_truth_json_contains_matrices():
    import json

    d = generate_synthetic(SynthConfig(n=10, p=3, seed=1))
    payload = json.loads(d.truth_json())
    assert set(payload) == {"P_true", "B_true", "Q_true", "cfg"}
