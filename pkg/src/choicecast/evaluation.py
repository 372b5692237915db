"""Prediction metrics and the model x case comparison report."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .prediction import CASES, NONE, POSTERIOR, PredictionTable

GAP = "NA"
RMSE_DENOMINATOR = "G"  # number of share groups, not G - 1


class EvaluationError(ValueError):
    pass


def _require_rows(pt: PredictionTable) -> None:
    if len(pt) == 0:
        raise EvaluationError("empty prediction table")
    if not pt.has_choices:
        raise EvaluationError("prediction table lacks observed choices")


def avg_chosen_probability(pt: PredictionTable) -> float:
    """Mean over rows of the probability given to the chosen alternative."""
    _require_rows(pt)
    return float(np.mean(pt.chosen_probs()))


def avg_chosen_probability_by_individual(pt: PredictionTable) -> float:
    """Mean over individuals of each person's mean chosen probability."""
    _require_rows(pt)
    _, inv = np.unique(np.asarray(pt.ids, dtype=object), return_inverse=True)
    sums = np.bincount(inv, weights=pt.chosen_probs())
    counts = np.bincount(inv)
    return float(np.mean(sums / counts))


def observed_shares(pt: PredictionTable) -> np.ndarray:
    _require_rows(pt)
    counts = np.bincount(pt.chosen, minlength=len(pt.alternatives)).astype(float)
    return counts / counts.sum()


def predicted_shares(pt: PredictionTable) -> np.ndarray:
    if len(pt) == 0:
        raise EvaluationError("empty prediction table")
    return pt.probs.mean(axis=0)


def _groups(alternatives: Sequence[str], aggregation: Mapping[str, Sequence[str]] | None) -> list[list[int]]:
    if not aggregation:
        return [[j] for j in range(len(alternatives))]
    index = {a: j for j, a in enumerate(alternatives)}
    groups, seen = [], []
    for name, members in aggregation.items():
        unknown = [m for m in members if m not in index]
        if unknown:
            raise EvaluationError(f"group {name!r} names unknown alternative(s) {unknown}")
        groups.append([index[m] for m in members])
        seen += members
    if sorted(seen) != sorted(alternatives):
        raise EvaluationError("share groups must partition the alternatives")
    return groups


def rmse_shares(pt: PredictionTable, truth=None, aggregation: Mapping[str, Sequence[str]] | None = None) -> float:
    """Root mean squared error between predicted and true (grouped) market shares.

    ``truth`` is a share vector or ``{alternative: share}``; it defaults to the
    observed shares of the table's own rows.  The mean runs over the G groups.
    """
    if truth is None:
        true = observed_shares(pt)
    elif isinstance(truth, Mapping):
        true = np.array([float(truth[a]) for a in pt.alternatives])
    else:
        true = np.asarray(truth, dtype=float)
    pred = predicted_shares(pt)
    groups = _groups(pt.alternatives, aggregation)
    err = np.array([pred[g].sum() - true[g].sum() for g in groups])
    return float(math.sqrt(np.mean(err ** 2)))


def tpr(pt: PredictionTable) -> dict[str, float | None]:
    """Probabilistic true positive rate per alternative; None if never chosen."""
    _require_rows(pt)
    out: dict[str, float | None] = {}
    for j, alt in enumerate(pt.alternatives):
        hit = pt.chosen == j
        out[alt] = float(pt.probs[hit, j].sum() / hit.sum()) if hit.any() else None
    return out


# -- report -----------------------------------------------------------------------
@dataclass(frozen=True)
class Cell:
    model: str
    case: str
    conditioning: str


def grid(models: Sequence[tuple[str, bool]]) -> list[Cell]:
    """Comparison cells: every model in every case, plus conditional case 3 for mixtures.

    ``models`` holds ``(model_id, has_heterogeneity)`` pairs in display order.
    """
    cells = []
    for model, mixture in models:
        cells += [Cell(model, case, NONE) for case in CASES]
        if mixture:
            cells.append(Cell(model, "case3", POSTERIOR))
    return cells


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    aggregation: dict[str, list[str]] | None = None

    def cell(self, model: str, case: str, conditioning: str = NONE) -> dict:
        for r in self.rows:
            if (r["model"], r["case"], r["conditioning"]) == (model, case, conditioning):
                return r
        raise KeyError((model, case, conditioning))

    def to_json(self) -> str:
        doc = {
            "rmse_denominator": RMSE_DENOMINATOR,
            "share_aggregation": self.aggregation,
            "average_probability_over": "observations",
            "cells": self.rows,
        }
        return json.dumps(doc, indent=2) + "\n"

    def long_rows(self) -> list[list[str]]:
        out = []
        for r in self.rows:
            key = [r["model"], r["case"], r["conditioning"]]
            if r["status"] != "ok":
                out.append(key + ["all", "", GAP, "0"])
                continue
            n = str(r["n_obs"])
            out.append(key + ["avg_chosen_prob", "", _fmt(r["avg_chosen_prob"]), n])
            out.append(key + ["avg_chosen_prob_by_individual", "", _fmt(r["avg_chosen_prob_by_individual"]), n])
            out.append(key + ["rmse_shares", "", _fmt(r["rmse_shares"]), n])
            for alt, v in r["tpr"].items():
                out.append(key + ["tpr", alt, GAP if v is None else _fmt(v), n])
            for alt, v in r["predicted_shares"].items():
                out.append(key + ["predicted_share", alt, _fmt(v), n])
            for alt, v in r["observed_shares"].items():
                out.append(key + ["observed_share", alt, _fmt(v), n])
        return out

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        with (out_dir / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "case", "conditioning", "metric", "alternative", "value", "n_obs"])
            w.writerows(self.long_rows())
        (out_dir / "report.json").write_text(self.to_json(), encoding="utf-8")


def _fmt(v: float) -> str:
    return repr(float(v))


def cell_metrics(pt: PredictionTable, aggregation=None) -> dict:
    return {
        "status": "ok",
        "n_obs": len(pt),
        "n_individuals": len(set(pt.ids)),
        "avg_chosen_prob": avg_chosen_probability(pt),
        "avg_chosen_prob_by_individual": avg_chosen_probability_by_individual(pt),
        "rmse_shares": rmse_shares(pt, aggregation=aggregation),
        "tpr": tpr(pt),
        "predicted_shares": dict(zip(pt.alternatives, map(float, predicted_shares(pt)))),
        "observed_shares": dict(zip(pt.alternatives, map(float, observed_shares(pt)))),
    }


def assemble_report(models: Sequence[tuple[str, bool]], tables: Mapping[Cell, PredictionTable | None],
                    aggregation: Mapping[str, Sequence[str]] | None = None) -> MetricReport:
    """Metrics for every grid cell; absent or empty tables become gap rows."""
    agg = {k: list(v) for k, v in aggregation.items()} if aggregation else None
    report = MetricReport(aggregation=agg)
    for c in grid(models):
        row = {"model": c.model, "case": c.case, "conditioning": c.conditioning}
        pt = tables.get(c)
        if pt is None or len(pt) == 0:
            row["status"] = "missing"
        else:
            row.update(cell_metrics(pt, agg))
        report.rows.append(row)
    return report
