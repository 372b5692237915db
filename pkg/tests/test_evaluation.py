import json

import numpy as np
import pytest

from choicecast.estimation import maximize_ll
from choicecast.evaluation import (
    GAP, Cell, EvaluationError, assemble_report, avg_chosen_probability, avg_chosen_probability_by_individual, grid,
    observed_shares, rmse_shares, tpr,
)
from choicecast.prediction import PredictionRequest, PredictionTable, predict_case

from conftest import model_config


def table(probs, chosen, ids=None, alts=("a", "b", "c")):
    probs = np.asarray(probs, dtype=float)
    n = len(probs)
    return PredictionTable(tuple(alts), list(ids or [f"p{i}" for i in range(n)]), np.ones(n, dtype=np.int64),
                           probs, np.asarray(chosen, dtype=np.intp), "case1", "none")


def test_avg_chosen_examples():
    assert avg_chosen_probability(table(np.full((4, 3), 1 / 3), [0, 1, 2, 0])) == pytest.approx(1 / 3)
    assert avg_chosen_probability(table([[0.6, 0.3, 0.1], [0.1, 0.8, 0.1]], [0, 1])) == pytest.approx(0.7)
    assert avg_chosen_probability(table(np.eye(3), [0, 1, 2])) == 1.0
    with pytest.raises(EvaluationError):
        avg_chosen_probability(table(np.zeros((0, 3)), []))


def test_avg_by_individual():
    pt = table([[0.6, 0.4, 0.0], [0.2, 0.8, 0.0], [1.0, 0.0, 0.0]], [0, 1, 0], ids=["x", "x", "y"])
    assert avg_chosen_probability_by_individual(pt) == pytest.approx((0.7 + 1.0) / 2)
    assert avg_chosen_probability(pt) == pytest.approx(2.4 / 3)


def test_rmse_examples():
    pt = table([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]], [0, 1])
    assert rmse_shares(pt) == 0.0
    pt2 = table([[0.6, 0.4], [0.6, 0.4]], [0, 1], alts=("a", "b"))
    assert rmse_shares(pt2) == pytest.approx(0.1, abs=1e-15)
    assert rmse_shares(pt2, truth={"a": 0.6, "b": 0.4}) == pytest.approx(0.0, abs=1e-15)


def test_rmse_invariances():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(4), 30)
    ch = rng.integers(0, 4, 30)
    pt = table(P, ch, alts="abcd")
    perm = [2, 0, 3, 1]
    inv = np.argsort(perm)
    pt_perm = table(P[:, perm], inv[ch], alts=[("abcd")[j] for j in perm])
    assert rmse_shares(pt_perm) == pytest.approx(rmse_shares(pt), abs=1e-15)
    agg = {"g1": ["a", "c"], "g2": ["b", "d"]}
    relabelled = {"other": ["d", "b"], "first": ["c", "a"]}
    assert rmse_shares(pt, aggregation=agg) == pytest.approx(rmse_shares(pt, aggregation=relabelled), abs=1e-15)
    assert rmse_shares(pt_perm, aggregation=agg) == pytest.approx(rmse_shares(pt, aggregation=agg), abs=1e-15)


@pytest.mark.parametrize("agg", [{"g": ["a", "b"]}, {"g": ["a", "b"], "h": ["b", "c"]}, {"g": ["a", "z"], "h": ["b", "c"]}])
def test_rmse_requires_partition(agg):
    pt = table(np.full((2, 3), 1 / 3), [0, 1])
    with pytest.raises(EvaluationError):
        rmse_shares(pt, aggregation=agg)


def test_tpr_examples():
    assert tpr(table(np.eye(3), [0, 1, 2])) == {"a": 1.0, "b": 1.0, "c": 1.0}
    uni = tpr(table(np.full((3, 3), 1 / 3), [0, 1, 2]))
    assert all(v == pytest.approx(1 / 3) for v in uni.values())
    t = tpr(table([[0.6, 0.4, 0.0], [0.8, 0.1, 0.1], [0.3, 0.7, 0.0]], [0, 0, 1]))
    assert t["a"] == pytest.approx(0.7) and t["c"] is None


def test_weighted_identity():
    rng = np.random.default_rng(5)
    for _ in range(50):
        J = int(rng.integers(2, 7))
        n = int(rng.integers(1, 40))
        P = rng.dirichlet(np.ones(J), n)
        ch = rng.integers(0, J, n)
        pt = table(P, ch, alts=[f"j{k}" for k in range(J)])
        t = tpr(pt)
        share = observed_shares(pt)
        total = sum(share[j] * t[a] for j, a in enumerate(pt.alternatives) if t[a] is not None)
        assert abs(avg_chosen_probability(pt) - total) < 1e-12


def test_grid_shape():
    models = [("mnl", False), ("mnl_s", False), ("mmnl", True), ("mmnl_s", True), ("lc", True), ("lc_u", True),
              ("lc_a", True)]
    cells = grid(models)
    assert len(cells) == 7 * 3 + 5
    assert cells[:3] == [Cell("mnl", c, "none") for c in ("case1", "case2", "case3")]
    assert Cell("mmnl", "case3", "posterior") in cells
    assert len(grid(models[:3] + [("lc", True)])) == 4 * 3 + 2


def test_report_deterministic_with_gaps(tmp_path):
    pt = table([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1]], [0, 1])
    models = [("m1", False), ("m2", True)]
    tables = {Cell("m1", "case1", "none"): pt, Cell("m2", "case3", "posterior"): pt,
              Cell("m1", "case2", "none"): table(np.zeros((0, 3)), [])}
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        assemble_report(models, tables).write(d)
        outs.append(((d / "metrics.csv").read_bytes(), (d / "report.json").read_bytes()))
    assert outs[0] == outs[1]
    rep = json.loads(outs[0][1])
    assert rep["rmse_denominator"] == "G"
    status = {(c["model"], c["case"], c["conditioning"]): c["status"] for c in rep["cells"]}
    assert status[("m1", "case2", "none")] == "missing"
    assert status[("m2", "case3", "posterior")] == "ok"
    lines = outs[0][0].decode().splitlines()
    assert f"m1,case2,none,all,,{GAP},0" in lines
    assert any(line.startswith("m1,case1,none,tpr,c,NA") for line in lines)


def test_report_metrics_recomputable(tmp_path):
    pt = table([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1], [0.5, 0.25, 0.25]], [0, 1, 2])
    path = tmp_path / "p.csv"
    pt.write(path)
    rep = assemble_report([("m", False)], {Cell("m", "case1", "none"): PredictionTable.read(path)})
    c = rep.cell("m", "case1")
    assert c["avg_chosen_prob"] == avg_chosen_probability(pt)
    assert c["rmse_shares"] == rmse_shares(pt)


def test_full_asc_mnl_recovers_shares(acceptance_split):
    s = model_config("mnl")
    r = maximize_ll(s, acceptance_split.estimation)
    pt = predict_case(s, r.params(), acceptance_split, PredictionRequest("case1"))
    assert rmse_shares(pt) < 1e-4
