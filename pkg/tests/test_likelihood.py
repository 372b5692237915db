import math

import numpy as np
import pytest
from scipy.special import ndtr, softmax

from choicecast.likelihood import (
    Engine, NumericalError, class_allocation_probs, ll_lc, ll_mixed, ll_plain, point_probs, coefficients_at,
)
from choicecast.mixing import DrawMatrix, mlhs_draws
from choicecast.model import compile_model
from choicecast.prediction import predict_plain, predict_unconditional

from conftest import make_dataset, model_config, spec

BINARY = {"utilities": {"a": [], "b": ["asc_b"]}}


def lc_model(intercepts, covariates=()):
    S = len(intercepts)
    ds = make_dataset(("a", "b"), [["a"]], covs={c: [1.0] for c in covariates})
    d = dict(BINARY, classes=S)
    if covariates:
        d["class_allocation"] = {"covariates": list(covariates)}
    m = compile_model(spec(d), ds.schema)
    theta = m.start_values.copy()
    for s in range(1, S):
        theta[m.alloc_params[s, 0]] = intercepts[s]
    return m, theta, ds


def test_class_allocation_single_class():
    m, theta, ds = lc_model([0.0])
    assert class_allocation_probs(m, theta, ds.arrays.z).tolist() == [[1.0]]


def test_class_allocation_published_shares():
    m, theta, ds = lc_model([0.0, -0.5493, -1.1075])
    pi = class_allocation_probs(m, theta, ds.arrays.z)[0]
    np.testing.assert_allclose(100 * pi, [52.42, 30.26, 17.32], atol=0.01)
    np.testing.assert_allclose(pi, softmax([0.0, -0.5493, -1.1075]), atol=1e-15)


def test_class_allocation_symmetric():
    m, theta, ds = lc_model([0.0, 0.0, 0.0])
    np.testing.assert_allclose(class_allocation_probs(m, theta, ds.arrays.z), [[1 / 3] * 3], atol=1e-15)


def test_class_allocation_covariates():
    ds = make_dataset(("a", "b"), [["a"], ["b"]], covs={"female": [0.0, 1.0]})
    m = compile_model(spec(dict(BINARY, classes=2, class_allocation={"covariates": ["female"]})), ds.schema)
    theta = m.parameters({"delta_class2": 0.3, "delta_class2_female": -1.0}).values
    pi = class_allocation_probs(m, theta, ds.arrays.z)
    np.testing.assert_allclose(pi[:, 1], [1 / (1 + math.exp(-0.3)), 1 / (1 + math.exp(0.7))], atol=1e-15)
    np.testing.assert_allclose(pi.sum(axis=1), 1, atol=1e-15)


def test_ll_plain_certain_choice():
    ds = make_dataset(("a", "b"), [["a", "a"]], avail=[[[1, 0], [1, 0]]])
    assert ll_plain(spec(BINARY), {"asc_b": 0.3}, ds) == 0.0


def test_ll_plain_hand_arithmetic():
    alts = ("a", "b", "c", "d")
    ds = make_dataset(alts, [["a", "b"]], avail=[[[1, 1, 0, 0], [1, 1, 1, 1]]])
    s = spec({"utilities": {a: [] for a in alts}})
    assert ll_plain(s, {}, ds) == pytest.approx(math.log(0.5) + math.log(0.25), abs=1e-14)
    assert ll_plain(s, {}, ds) == pytest.approx(-2.0794, abs=5e-5)


def test_ll_plain_equals_prediction_sum():
    rng = np.random.default_rng(1)
    N, T = 20, 4
    ds = make_dataset(("a", "b", "c"), rng.choice(["a", "b", "c"], (N, T)).tolist(),
                      attrs={"x": rng.normal(size=(N, T, 3))})
    s = spec({"utilities": {"a": ["bx * x"], "b": ["asc_b", "bx * x"], "c": ["asc_c", "bx * x"]}})
    params = {"asc_b": 0.2, "asc_c": -0.4, "bx": 0.7}
    P = predict_plain(s, params, ds)
    a = ds.arrays
    assert ll_plain(s, params, ds) == pytest.approx(np.log(P[np.arange(a.n_obs), a.chosen]).sum(), abs=1e-10)


def test_ll_plain_rejects_mixture():
    ds = make_dataset(("a", "b"), [["a"]])
    with pytest.raises(Exception):
        ll_plain(spec(dict(BINARY, coefficients={"asc_b": "normal"})), {}, ds)


def two_point_draws(ids):
    # standard-normal values +1 and -1 for every individual
    base = np.tile(np.array([[ndtr(1.0)], [ndtr(-1.0)]]), (len(ids), 1, 1))
    return DrawMatrix(base, tuple(ids), 0, ("asc_b",))


def test_ll_mixed_hand_arithmetic():
    ds = make_dataset(("a", "b"), [["b", "b"]])
    s = spec(dict(BINARY, coefficients={"asc_b": "normal"}))
    ll = ll_mixed(s, {"asc_b_mu": 0.0, "asc_b_sigma": math.log(4)}, ds, draws=two_point_draws(ds.ids))
    assert ll == pytest.approx(math.log(0.34), abs=1e-12)
    assert ll == pytest.approx(-1.0788, abs=5e-5)


def test_ll_mixed_single_draw_is_plain():
    rng = np.random.default_rng(2)
    ds = make_dataset(("a", "b"), rng.choice(["a", "b"], (6, 3)).tolist(), attrs={"x": rng.normal(size=(6, 3, 2))})
    mixed = spec({"utilities": {"a": ["bx * x"], "b": ["asc_b", "bx * x"]}, "coefficients": {"asc_b": "normal"}})
    m = compile_model(mixed, ds.schema)
    draws = mlhs_draws(6, 1, 1, seed=5, keys=ds.ids, dims=m.dims)
    theta = m.parameters({"asc_b_mu": 0.4, "asc_b_sigma": 1.1, "bx": -0.6}).values
    eng = Engine(m, ds.arrays, draws=draws)
    B, lam = coefficients_at(m, theta, draws.base[:, 0, :], None, 6)
    P = point_probs(m, ds.arrays, B, lam)
    a = ds.arrays
    assert eng.loglik(theta) == pytest.approx(np.log(P[np.arange(a.n_obs), a.chosen]).sum(), abs=1e-12)


def test_ll_mixed_single_observation_panels():
    rng = np.random.default_rng(3)
    ds = make_dataset(("a", "b"), rng.choice(["a", "b"], (30, 1)).tolist(), attrs={"x": rng.normal(size=(30, 1, 2))})
    s = spec({"utilities": {"a": ["bx * x"], "b": ["asc_b", "bx * x"]}, "coefficients": {"asc_b": "normal"}})
    params = {"asc_b_mu": 0.4, "asc_b_sigma": 1.5, "bx": -0.6}
    Pbar = predict_unconditional(s, params, ds, n_draws=200, seed=1)
    a = ds.arrays
    expected = np.log(Pbar[np.arange(a.n_obs), a.chosen]).sum()
    assert ll_mixed(s, params, ds, n_draws=200, seed=1) == pytest.approx(expected, abs=1e-12)


def test_ll_lc_hand_arithmetic():
    ds = make_dataset(("a", "b"), [["b", "b"]])
    s = spec(dict(BINARY, classes=2))
    ll = ll_lc(s, {"asc_b_class1": math.log(4), "asc_b_class2": -math.log(4), "delta_class2": 0.0}, ds)
    assert ll == pytest.approx(math.log(0.34), abs=1e-12)


def test_ll_lc_reductions():
    rng = np.random.default_rng(4)
    ds = make_dataset(("a", "b"), rng.choice(["a", "b"], (10, 4)).tolist())
    one = spec(dict(BINARY, classes=1))
    assert ll_lc(one, {"asc_b": 0.3}, ds) == ll_plain(spec(BINARY), {"asc_b": 0.3}, ds)
    two = spec(dict(BINARY, classes=2))
    degenerate = ll_lc(two, {"asc_b_class1": 0.3, "asc_b_class2": -2.0, "delta_class2": -1000.0}, ds)
    assert degenerate == ll_plain(spec(BINARY), {"asc_b": 0.3}, ds)


@pytest.fixture(scope="module")
def panel():
    rng = np.random.default_rng(5)
    N, T = 40, 5
    return make_dataset(("a", "b", "c"), rng.choice(["a", "b", "c"], (N, T)).tolist(),
                        attrs={"x": rng.normal(size=(N, T, 3))}, covs={"f": rng.integers(0, 2, N)})


MIXED = {"utilities": {"a": ["bx * x"], "b": ["asc_b", "bx * x", "g * f"], "c": ["asc_c", "bx * x"]},
         "coefficients": {"asc_b": "normal", "bx": "neglogunif"}}
PLAIN = {"utilities": MIXED["utilities"]}


def test_spread_zero_equals_plain(panel):
    loc = {"asc_b_mu": 0.3, "asc_b_sigma": 0.0, "bx_a": -0.5, "bx_b": 0.0, "asc_c": -0.2, "g": 0.4}
    plain = {"asc_b": 0.3, "bx": -math.exp(-0.5), "asc_c": -0.2, "g": 0.4}
    assert ll_mixed(spec(MIXED), loc, panel, n_draws=50) == pytest.approx(ll_plain(spec(PLAIN), plain, panel), abs=1e-10)


def test_panel_likelihood_differs_from_product_of_means(panel):
    s = spec(MIXED)
    m = compile_model(s, panel.schema)
    for sigma, differs in ((1.5, True), (0.0, False)):
        params = {"asc_b_mu": 0.3, "asc_b_sigma": sigma, "bx_a": -0.5, "bx_b": 0.0, "asc_c": -0.2, "g": 0.4}
        eng = Engine(m, panel.arrays, n_draws=100, seed=2)
        lnl = eng.contributions(m.parameters(params).values)
        Pbar = predict_unconditional(s, params, panel, n_draws=100, seed=2)
        a = panel.arrays
        per_obs = np.log(Pbar[np.arange(a.n_obs), a.chosen])
        product = np.add.reduceat(per_obs, a.start[:-1])
        if differs:
            assert np.all(np.abs(lnl - product) > 1e-10)
        else:
            np.testing.assert_allclose(lnl, product, atol=1e-12, rtol=0)


def test_draw_count_sensitivity(acceptance_data, dgp):
    ds = acceptance_data[0]
    a = ll_mixed(dgp.model, dgp.params, ds, n_draws=500, seed=3)
    b = ll_mixed(dgp.model, dgp.params, ds, n_draws=1000, seed=3)
    assert abs(a - b) / abs(a) < 1e-3


@pytest.mark.parametrize("name, d", [
    ("mnl", PLAIN),
    ("mixed", MIXED),
    ("nested", dict(PLAIN, nests={"bc": {"alternatives": ["b", "c"]}})),
    ("mixed_nested", dict(MIXED, nests={"bc": {"alternatives": ["b", "c"]}})),
    ("lc", dict(PLAIN, classes=3, coefficients={"g": {"generic": True}})),
    ("lc_alloc", {"utilities": {"a": ["bx * x"], "b": ["asc_b", "bx * x"], "c": ["asc_c", "bx * x"]},
                  "classes": 2, "class_allocation": {"covariates": ["f"]}}),
    ("lc_nested", dict(PLAIN, classes=2, nests={"bc": {"alternatives": ["b", "c"]}})),
])
def test_analytic_scores_match_finite_differences(panel, name, d):
    m = compile_model(spec(d), panel.schema)
    rng = np.random.default_rng(7)
    theta = m.start_values + rng.normal(0, 0.2, len(m.start_values))
    for i, n in enumerate(m.param_names):
        if n.startswith("lambda"):
            theta[i] = 0.7
    eng = Engine(m, panel.arrays, n_draws=50, seed=3)
    _, G = eng.scores(theta)
    Gn = eng.numeric_scores(theta)
    assert np.max(np.abs(G - Gn)) < 1e-6


def test_thread_count_invariance(panel):
    m = compile_model(spec(MIXED), panel.schema)
    theta = m.start_values + 0.1
    one = Engine(m, panel.arrays, n_draws=100, seed=1, threads=1, chunk_elems=2000)
    eight = Engine(m, panel.arrays, n_draws=100, seed=1, threads=8, chunk_elems=2000)
    assert len(one.chunks) > 1
    assert one.loglik(theta) == eight.loglik(theta)
    np.testing.assert_array_equal(one.scores(theta)[1], eight.scores(theta)[1])
    whole = Engine(m, panel.arrays, n_draws=100, seed=1)
    np.testing.assert_array_equal(one.contributions(theta), whole.contributions(theta))


def test_draws_follow_individual_ids(panel):
    m = compile_model(spec(MIXED), panel.schema)
    theta = m.start_values + 0.1
    full = Engine(m, panel.arrays, n_draws=60, seed=4).contributions(theta)
    ids = list(panel.ids[10:20])
    part = Engine(m, panel.subset(ids).arrays, n_draws=60, seed=4).contributions(theta)
    np.testing.assert_array_equal(part, full[10:20])


def test_underflow_flagged():
    ds = make_dataset(("a", "b"), [["a", "b"]])
    with pytest.warns(UserWarning, match="floor"):
        ll = ll_plain(spec(BINARY), {"asc_b": 1000.0}, ds)
    assert np.isfinite(ll)


def test_non_finite_likelihood_names_individual():
    ds = make_dataset(("a", "b"), [["a"], ["b"]], ids=["alice", "bob"])
    m = compile_model(spec(BINARY), ds.schema)
    with pytest.raises(NumericalError, match="alice"):
        Engine(m, ds.arrays).loglik(np.array([np.nan]))


def test_cross_sectional_mixing():
    rng = np.random.default_rng(8)
    ds = make_dataset(("a", "b"), rng.choice(["a", "b"], (5, 3)).tolist())
    d = dict(BINARY, coefficients={"asc_b": "normal"})
    params = {"asc_b_mu": 0.2, "asc_b_sigma": 1.0}
    cross = ll_mixed(spec(dict(d, panel=False)), params, ds, n_draws=100)
    panel_ll = ll_mixed(spec(d), params, ds, n_draws=100)
    assert np.isfinite(cross) and cross != panel_ll


def test_acceptance_model_configs_compile(acceptance_split):
    for name in ("mnl", "mnl_socios", "mmnl", "mmnl_socios", "lc", "lc_socios_utility", "lc_socios_alloc"):
        m = compile_model(model_config(name), acceptance_split.estimation.schema)
        assert np.all(np.isfinite(m.start_values))
