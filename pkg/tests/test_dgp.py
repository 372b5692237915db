import csv

import numpy as np
import pytest

from choicecast.data import split_dataset
from choicecast.dgp import DgpSpec, oracle_choice_probs, simulate_dataset
from choicecast.estimation import EstimateOptions, maximize_ll
from choicecast.evaluation import avg_chosen_probability
from choicecast.likelihood import Engine
from choicecast.model import compile_model
from choicecast.prediction import PredictionRequest, posterior_draw_weights, predict_case, predict_plain

from conftest import CONFIGS

ATTRS = {"x": {"a": [0, 1], "b": [0, 1]}}


def dgp(model, params, **kw):
    d = {"model": model, "true_params": params, "alternatives": ["a", "b"], "attributes": ATTRS,
         "n_individuals": 50, "n_tasks": 4, "seed": 3}
    d.update(kw)
    return DgpSpec.from_dict(d)


PLAIN = {"utilities": {"a": ["bx * x"], "b": ["asc_b", "bx * x"]}}


def choices(ds):
    return ds.arrays.chosen


def test_binomial_share():
    g = dgp(PLAIN, {"asc_b": 0.0, "bx": 0.0}, n_individuals=10_000, n_tasks=10)
    ds, _ = simulate_dataset(g)
    share_a = np.mean(choices(ds) == 0)
    assert ds.n_obs == 100_000
    assert abs(share_a - 0.5) < 0.005


def test_zero_spread_matches_plain():
    mixed = dict(PLAIN, coefficients={"bx": "normal"})
    ds_m, _ = simulate_dataset(dgp(mixed, {"asc_b": 0.3, "bx_mu": -1.0, "bx_sigma": 0.0}))
    ds_p, _ = simulate_dataset(dgp(PLAIN, {"asc_b": 0.3, "bx": -1.0}))
    np.testing.assert_array_equal(choices(ds_m), choices(ds_p))
    np.testing.assert_array_equal(ds_m.arrays.x, ds_p.arrays.x)


def test_degenerate_class_shares():
    lc = dict(PLAIN, classes=2)
    params = {"asc_b_class1": 0.3, "bx_class1": -1.0, "asc_b_class2": -2.0, "bx_class2": 3.0, "delta_class2": -800.0}
    ds_lc, truth = simulate_dataset(dgp(lc, params))
    ds_p, _ = simulate_dataset(dgp(PLAIN, {"asc_b": 0.3, "bx": -1.0}))
    assert np.all(truth.classes == 0)
    np.testing.assert_array_equal(choices(ds_lc), choices(ds_p))


def test_oracle_equals_plain_prediction():
    g = dgp(PLAIN, {"asc_b": 0.3, "bx": -1.0})
    ds, truth = simulate_dataset(g)
    P = oracle_choice_probs(g, ds, truth)
    np.testing.assert_allclose(P, predict_plain(g.model, g.params, ds), atol=1e-15)
    assert np.max(np.abs(P.sum(axis=1) - 1)) < 1e-12


def test_truth_recorded(acceptance_data, dgp, tmp_path):
    ds, truth = acceptance_data
    q = truth.coef_names.index("asc_b")
    # normal asc_b with mean 0.5 and sd 2
    assert abs(truth.coefficients[:, q].mean() - 0.5) < 0.3
    assert abs(truth.coefficients[:, q].std() - 2.0) < 0.3
    c = truth.coefficients[:, truth.coef_names.index("b_cost")]
    assert np.all((c < 0) & (c >= -np.exp(0.0)) & (c <= -np.exp(-1.5)))
    path = tmp_path / "truth.csv"
    truth.write(path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["indiv_id", "class"] and len(rows) == ds.n_individuals + 1


def test_simulation_deterministic(dgp):
    a, _ = simulate_dataset(dgp)
    b, _ = simulate_dataset(dgp)
    np.testing.assert_array_equal(a.arrays.x, b.arrays.x)
    np.testing.assert_array_equal(choices(a), choices(b))


def test_posterior_mean_tracks_truth(true_model_fit, acceptance_data):
    ds, truth = acceptance_data
    r = true_model_fit
    params = r.params()
    model = compile_model(r.spec, ds.schema)
    eng = Engine(model, ds.arrays, n_draws=r.n_draws, seed=r.seed)
    W = posterior_draw_weights(r.spec, params, ds, n_draws=r.n_draws, seed=r.seed)
    d = model.dims.index("asc_b")
    draws = params["asc_b_mu"] + params["asc_b_sigma"] * eng.z[:, :, d]
    post_mean = (W * draws).sum(axis=1)
    true = truth.coefficients[:, truth.coef_names.index("asc_b")]
    assert np.corrcoef(post_mean, true)[0, 1] > 0.7


@pytest.mark.slow
def test_oracle_upper_bounds_case3():
    g = DgpSpec.load(CONFIGS / "dgp.yaml")
    g.n_individuals = 1000
    g.seed = 21
    ds, truth = simulate_dataset(g)
    split = split_dataset(ds, 0.2, 5)
    last = split.last_choices
    oracle = oracle_choice_probs(g, last, truth)
    bound = float(np.mean(oracle[np.arange(last.n_obs), last.arrays.chosen]))
    r = maximize_ll(g.model, split.estimation, EstimateOptions(n_draws=200, seed=1))
    for cond in ("none", "posterior"):
        pt = predict_case(g.model, r.params(), split, PredictionRequest("case3", cond), n_draws=200, seed=1)
        assert avg_chosen_probability(pt) <= bound + 0.01
