"""Synthetic data generating process used as the ground-truth oracle."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .data import ChoiceDataset, DataSchema, Individual, Observation, PanelArrays
from .likelihood import class_allocation_probs, coefficients_at, point_probs
from .model import CompiledModel, ModelSpec, compile_model

# independent random streams per individual
_COVARIATES, _HETEROGENEITY, _ATTRIBUTES, _CHOICES, _AVAILABILITY = range(5)


@dataclass
class DgpSpec:
    model: ModelSpec
    params: dict[str, float]
    alternatives: tuple[str, ...]
    attributes: dict[str, dict[str, tuple[float, float]]]
    covariates: dict[str, float] = field(default_factory=dict)
    n_individuals: int = 500
    n_tasks: int = 8
    seed: int = 0
    availability: dict[str, float] = field(default_factory=dict)

    @property
    def schema(self) -> DataSchema:
        return DataSchema(
            alternatives=tuple(self.alternatives),
            attributes={
                a: tuple(alt for alt in self.alternatives if alt in ranges)
                for a, ranges in self.attributes.items()
            },
            covariates=tuple(self.covariates),
        )

    def compiled(self) -> CompiledModel:
        return compile_model(self.model, self.schema)

    def theta(self) -> np.ndarray:
        return self.compiled().parameters(self.params).values

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: Path | None = None) -> "DgpSpec":
        d = dict(d)
        model = d.pop("model")
        if isinstance(model, str):
            path = Path(model) if base is None else base / model
            model = ModelSpec.load(path)
        else:
            model = ModelSpec.from_dict(model)
        return cls(
            model=model,
            params={str(k): float(v) for k, v in d.pop("true_params").items()},
            alternatives=tuple(d.pop("alternatives")),
            attributes={a: {alt: tuple(r) for alt, r in ranges.items()} for a, ranges in d.pop("attributes").items()},
            covariates={k: float(v) for k, v in (d.pop("covariates", None) or {}).items()},
            n_individuals=int(d.pop("n_individuals", 500)),
            n_tasks=int(d.pop("n_tasks", 8)),
            seed=int(d.pop("seed", 0)),
            availability={k: float(v) for k, v in (d.pop("availability", None) or {}).items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "DgpSpec":
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh), base=path.parent)


@dataclass
class Truth:
    """Each simulated person's true coefficients (and class, for latent class DGPs)."""

    ids: tuple[str, ...]
    coef_names: tuple[str, ...]
    coefficients: np.ndarray  # (N, Q)
    lambdas: np.ndarray  # (N, M)
    classes: np.ndarray  # (N,) 0-based, zeros without classes
    xi: np.ndarray  # (N, D)

    def write(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["indiv_id", "class", *self.coef_names])
            for i, ind in enumerate(self.ids):
                w.writerow([ind, int(self.classes[i]) + 1, *(repr(float(v)) for v in self.coefficients[i])])


def _rng(seed: int, stream: int, n: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, n])


def simulate_dataset(dgp: DgpSpec) -> tuple[ChoiceDataset, Truth]:
    """Draw each person's coefficients once, then their attributes and choices."""
    model = dgp.compiled()
    theta = dgp.theta()
    schema = dgp.schema
    N, T = dgp.n_individuals, dgp.n_tasks
    J = len(schema.alternatives)
    attr_names = list(schema.attributes)
    D = len(model.dims)
    S = model.n_classes

    z = np.zeros((N, len(schema.covariates)))
    xi = np.zeros((N, D))
    u_class = np.zeros(N)
    x = np.zeros((N * T, J, len(attr_names)))
    avail = np.ones((N * T, J), dtype=bool)
    u_choice = np.zeros(N * T)
    for n in range(N):
        rc = _rng(dgp.seed, _COVARIATES, n)
        z[n] = [rc.random() < rate for rate in dgp.covariates.values()]
        rh = _rng(dgp.seed, _HETEROGENEITY, n)
        u_class[n] = rh.random()
        xi[n] = rh.random(D)
        ra = _rng(dgp.seed, _ATTRIBUTES, n)
        rv = _rng(dgp.seed, _AVAILABILITY, n)
        rows = slice(n * T, (n + 1) * T)
        for k, attr in enumerate(attr_names):
            for alt in schema.attributes[attr]:
                lo, hi = dgp.attributes[attr][alt]
                x[rows, schema.alternatives.index(alt), k] = ra.uniform(lo, hi, T)
        for j, alt in enumerate(schema.alternatives):
            rate = dgp.availability.get(alt, 1.0)
            avail[rows, j] = rv.random(T) < rate
        u_choice[rows] = _rng(dgp.seed, _CHOICES, n).random(T)
    # keep at least one alternative available
    empty = ~avail.any(axis=1)
    avail[empty, 0] = True

    if S > 1:
        pi = class_allocation_probs(model, theta, z)
        classes = np.minimum((np.cumsum(pi, axis=1) <= u_class[:, None]).sum(axis=1), S - 1)
    else:
        classes = np.zeros(N, dtype=np.intp)
    B, lam = coefficients_at(model, theta, xi, classes, N)

    ind = np.repeat(np.arange(N), T)
    arrays = PanelArrays(
        ids=tuple(str(n + 1) for n in range(N)),
        ind=ind,
        task=np.tile(np.arange(1, T + 1), N),
        avail=avail,
        x=x,
        chosen=np.zeros(N * T, dtype=np.intp),
        z=z,
        start=np.arange(0, N * T + 1, T),
    )
    P = point_probs(model, arrays, B, lam)
    cum = np.cumsum(P, axis=1)
    chosen = np.minimum((cum <= (u_choice * cum[:, -1])[:, None]).sum(axis=1), J - 1)

    individuals = []
    for n in range(N):
        obs = []
        for t in range(T):
            o = n * T + t
            obs.append(Observation(t + 1, tuple(bool(v) for v in avail[o]), x[o].copy(),
                                   schema.alternatives[chosen[o]]))
        individuals.append(Individual(arrays.ids[n], tuple(obs), dict(zip(schema.covariates, map(float, z[n])))))
    truth = Truth(arrays.ids, model.coef_names, B, lam, classes, xi)
    return ChoiceDataset(schema, tuple(individuals)), truth


def oracle_choice_probs(dgp: DgpSpec, ds: ChoiceDataset, truth: Truth) -> np.ndarray:
    """Kernel probabilities (O, J) at each person's true coefficients."""
    model = compile_model(dgp.model, ds.schema)
    rows = {k: i for i, k in enumerate(truth.ids)}
    idx = np.array([rows[i] for i in ds.ids], dtype=np.intp)
    return point_probs(model, ds.arrays, truth.coefficients[idx], truth.lambdas[idx])
