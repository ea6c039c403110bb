import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dummy_ols, hdfe_instance
from mmc_lab.hdfe import (EstimationError, RegressionSpec, absorbed_dof, fe_codes, fit_hdfe, group_means,
                          linear_combination_test, parse_spec_text, within_transform)


def test_single_dim_is_one_pass():
    x = np.array([1.0, 3.0, 10.0, 20.0, 30.0])
    codes = np.array([0, 0, 1, 1, 1])
    out, it, ok = within_transform(x, [codes])
    np.testing.assert_array_equal(out, [-1.0, 1.0, -10.0, 0.0, 10.0])
    assert it == 1 and ok


def test_balanced_two_way_closed_form():
    rng = np.random.default_rng(0)
    ni, nj = 7, 5
    i, j = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
    i, j = i.ravel(), j.ravel()
    x = rng.normal(size=ni * nj)
    m = x.reshape(ni, nj)
    expect = (m - m.mean(1, keepdims=True) - m.mean(0, keepdims=True) + m.mean()).ravel()
    out, _, ok = within_transform(x, [i, j], tol=1e-13)
    assert ok
    np.testing.assert_allclose(out, expect, atol=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_demeaned_orthogonal_to_every_group(seed):
    df, names, dims = hdfe_instance(seed)
    fe = [fe_codes(df, d) for d in dims] or [np.zeros(len(df), np.int64)]
    out, _, ok = within_transform(df[names].to_numpy(), fe, tol=1e-8)
    assert ok
    for codes in fe:
        for col in out.T:
            assert np.abs(group_means(col, codes)).max() <= 1e-7


@pytest.mark.parametrize("seed", range(12))
def test_matches_dummy_variable_ols(seed):
    df, names, dims = hdfe_instance(seed)
    if not dims:
        df["const"] = 1.0
        names = names + ["const"]
    fit = fit_hdfe(df, RegressionSpec("y", names, dims))
    ref, _ = dummy_ols(df["y"].to_numpy(), df[names].to_numpy(), [fe_codes(df, d) for d in dims])
    got = np.array([fit.coef[n] for n in names])
    assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300)) <= 1e-8


def test_exact_line_without_fe():
    x = np.arange(10, dtype=float)
    df = pd.DataFrame({"y": 2 * x + 1, "x": x, "one": 1.0})
    fit = fit_hdfe(df, RegressionSpec("y", ["x", "one"]))
    assert fit.coef["x"] == pytest.approx(2.0, abs=1e-12)
    assert fit.coef["one"] == pytest.approx(1.0, abs=1e-12)
    fit2 = fit_hdfe(df, RegressionSpec("y", ["x"]))
    assert fit2.coef["x"] != pytest.approx(2.0)  # no intercept unless provided


def test_robust_and_classical_covariance_against_oracle():
    df, names, dims = hdfe_instance(3, n=800)
    dims = dims[:2] if len(dims) > 2 else dims
    fe = [fe_codes(df, d) for d in dims]
    n_abs, exact = absorbed_dof(fe)
    assert exact
    y, X = df["y"].to_numpy(), df[names].to_numpy()
    coef, Z = dummy_ols(y, X, fe)
    full, *_ = np.linalg.lstsq(Z, y, rcond=None)
    e = y - Z @ full
    zinv = np.linalg.pinv(Z.T @ Z)
    k = len(names)
    df_resid = len(y) - k - n_abs
    assert np.linalg.matrix_rank(Z) == k + n_abs
    classical = zinv * (e @ e) / df_resid
    meat = (Z * e[:, None]).T @ (Z * e[:, None])
    robust = len(y) / df_resid * zinv @ meat @ zinv
    for kind, ref in (("classical", classical), ("robust", robust)):
        fit = fit_hdfe(df, RegressionSpec("y", names, dims, se_kind=kind))
        got = fit.cov.loc[names, names].to_numpy()
        np.testing.assert_allclose(got, ref[:k, :k], rtol=1e-7, atol=1e-12)
        w = np.arange(1, k + 1, dtype=float)
        lc = linear_combination_test(fit, dict(zip(names, w)))
        assert lc.estimate == pytest.approx(w @ coef, rel=1e-8)
        assert lc.se == pytest.approx(np.sqrt(w @ ref[:k, :k] @ w), rel=1e-7)
        assert lc.ci_lo < lc.estimate < lc.ci_hi
        assert (lc.ci_hi - lc.estimate) / lc.se == pytest.approx(1.959963984540054, rel=1e-12)


def test_adj_r2_uses_full_fitted_values():
    df, names, dims = hdfe_instance(5, n=600)
    dims = ["a", "b"]
    fe = [fe_codes(df, d) for d in dims]
    y = df["y"].to_numpy()
    _, Z = dummy_ols(y, df[names].to_numpy(), fe)
    full, *_ = np.linalg.lstsq(Z, y, rcond=None)
    rss = ((y - Z @ full) ** 2).sum()
    tss = ((y - y.mean()) ** 2).sum()
    p = np.linalg.matrix_rank(Z)
    fit = fit_hdfe(df, RegressionSpec("y", names, dims))
    assert fit.r2 == pytest.approx(1 - rss / tss, rel=1e-9)
    assert fit.adj_r2 == pytest.approx(1 - (rss / (len(y) - p)) / (tss / (len(y) - 1)), rel=1e-9)


def test_absorbed_dof_connected_components():
    a = np.array([0, 0, 1, 1, 2, 2])
    b = np.array([0, 1, 0, 1, 2, 2])  # levels {0,1} x {0,1} and a separate island
    dof, exact = absorbed_dof([a, b])
    assert (dof, exact) == (3 + 3 - 2, True)
    dof3, exact3 = absorbed_dof([a, b, np.array([0, 1, 0, 1, 0, 1])])
    assert not exact3 and dof3 >= dof


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 1000).filter(lambda c: abs(c - 1) > 1e-3),
       st.booleans())
def test_covariate_scaling(seed, c, negate):
    c = -c if negate else c
    df, names, dims = hdfe_instance(seed, n=400)
    dims = dims or ["a"]
    base = fit_hdfe(df, RegressionSpec("y", names, dims))
    scaled = fit_hdfe(df.assign(**{names[0]: df[names[0]] * c}), RegressionSpec("y", names, dims))
    assert scaled.coef[names[0]] == pytest.approx(base.coef[names[0]] / c, rel=1e-10)
    assert scaled.se[names[0]] == pytest.approx(base.se[names[0]] / abs(c), rel=1e-10)
    for n in names[1:]:
        assert scaled.coef[n] == pytest.approx(base.coef[n], rel=1e-10)


def test_invariant_to_row_order_and_threads():
    df, names, dims = hdfe_instance(9, n=1500)
    dims = ["a", "b", "c*d"]
    spec = RegressionSpec("y", names, dims)
    base = fit_hdfe(df, spec)
    shuffled = df.sample(frac=1.0, random_state=4)
    other = fit_hdfe(shuffled, spec, threads=4)
    for n in names:
        assert other.coef[n] == pytest.approx(base.coef[n], rel=1e-10)
    again = fit_hdfe(df, spec, threads=4)
    assert again.coef == base.coef and again.se == base.se


def test_collinear_covariate_dropped():
    df, names, dims = hdfe_instance(1, n=500)
    df["dup"] = df["a"] * 2.0  # absorbed by FE a
    fit = fit_hdfe(df, RegressionSpec("y", names + ["dup"], ["a"]))
    assert fit.dropped == ["dup"] and "dup" not in fit.coef


def test_errors():
    with pytest.raises(EstimationError, match="empty panel"):
        fit_hdfe(pd.DataFrame({"y": [], "x": []}), RegressionSpec("y", ["x"]))
    with pytest.raises(KeyError):
        fit_hdfe(pd.DataFrame({"y": [1.0]}), RegressionSpec("y", ["x"]))
    with pytest.raises(EstimationError, match="too few"):
        fit_hdfe(pd.DataFrame({"y": [1.0, 2.0], "x": [1.0, 3.0], "g": [0, 1]}), RegressionSpec("y", ["x"], ["g"]))
    with pytest.raises(ValueError):
        RegressionSpec("y", ["x"], se_kind="hc7")


def test_missing_rows_dropped_and_counted():
    df, names, dims = hdfe_instance(2, n=400)
    df.loc[:9, names[0]] = np.nan
    fit = fit_hdfe(df, RegressionSpec("y", names, ["a"]))
    assert fit.n_missing == 10 and fit.n_obs == 390


def test_lincom_unknown_name():
    df, names, _ = hdfe_instance(2, n=300)
    fit = fit_hdfe(df, RegressionSpec("y", names, ["a"]))
    with pytest.raises(KeyError):
        linear_combination_test(fit, {"nope": 1.0})


def test_parse_spec_text():
    spec, extras = parse_spec_text("""
        # price differences
        response = dp
        covariates = mmc_ek, nonstop, tp, cs, rs
        fe = year, quarter, city_pair, carrier_pair
        se = robust
        mmc = ek
    """)
    assert spec.covariates == ["mmc_ek", "nonstop", "tp", "cs", "rs"]
    assert spec.fe_dims == ["year", "quarter", "city_pair", "carrier_pair"]
    assert extras == {"mmc": "ek"}
    with pytest.raises(ValueError):
        parse_spec_text("covariates = x")


def test_interaction_codes():
    df = pd.DataFrame({"year": [1, 1, 2, 2], "city_pair": ["A", "B", "A", "A"]})
    assert fe_codes(df, "year*city_pair").tolist() == [0, 1, 2, 2]
