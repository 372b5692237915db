"""Choice data: panel containers, wide-CSV ingestion and the three-way split.

A dataset is a panel of individuals, each with an ordered list of choice
observations.  The on-disk format is a wide CSV with one row per observation::

    indiv_id, task, choice, avail_<alt>..., <attr>_<alt>..., <covariate>...

Alternatives are read from the ``avail_`` columns (in column order),
attributes from ``<attr>_<alt>`` columns and every remaining column is an
individual-level covariate.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

ID_COL = "indiv_id"
TASK_COL = "task"
CHOICE_COL = "choice"
AVAIL_PREFIX = "avail_"


class DataError(ValueError):
    """Raised for malformed or inconsistent choice data."""


class Alternative(NamedTuple):
    id: str
    index: int


@dataclass(frozen=True)
class DataSchema:
    """Column layout of a wide choice CSV.

    ``attributes`` maps each attribute name to the alternatives it is
    defined for, in alternative order.
    """

    alternatives: tuple[str, ...]
    attributes: dict[str, tuple[str, ...]] = field(default_factory=dict)
    covariates: tuple[str, ...] = ()
    units: dict[str, str] = field(default_factory=dict)

    def columns(self) -> list[str]:
        cols = [ID_COL, TASK_COL, CHOICE_COL]
        cols += [AVAIL_PREFIX + a for a in self.alternatives]
        for attr, alts in self.attributes.items():
            cols += [f"{attr}_{a}" for a in alts]
        cols += list(self.covariates)
        return cols

    @classmethod
    def infer(cls, header: Sequence[str]) -> "DataSchema":
        """Recover the schema from a CSV header."""
        for col in (ID_COL, TASK_COL, CHOICE_COL):
            if col not in header:
                raise DataError(f"missing column {col!r}")
        alts = tuple(c[len(AVAIL_PREFIX):] for c in header if c.startswith(AVAIL_PREFIX))
        if not alts:
            raise DataError(f"missing availability columns ({AVAIL_PREFIX}<alt>)")
        # longest alternative first so that suffix matching is unambiguous
        by_len = sorted(alts, key=len, reverse=True)
        attributes: dict[str, list[str]] = {}
        covariates = []
        for col in header:
            if col in (ID_COL, TASK_COL, CHOICE_COL) or col.startswith(AVAIL_PREFIX):
                continue
            for alt in by_len:
                if col.endswith("_" + alt) and len(col) > len(alt) + 1:
                    attributes.setdefault(col[: -len(alt) - 1], []).append(alt)
                    break
            else:
                covariates.append(col)
        order = {a: i for i, a in enumerate(alts)}
        return cls(
            alternatives=alts,
            attributes={k: tuple(sorted(v, key=order.__getitem__)) for k, v in attributes.items()},
            covariates=tuple(covariates),
        )


@dataclass(frozen=True, eq=False)
class Observation:
    """One choice situation: availability, attribute matrix (alt x attr), choice."""

    task_index: int
    availability: tuple[bool, ...]
    attributes: np.ndarray
    chosen: str

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.task_index == other.task_index
            and self.availability == other.availability
            and self.chosen == other.chosen
            and np.array_equal(self.attributes, other.attributes)
        )


@dataclass(frozen=True)
class Individual:
    id: str
    observations: tuple[Observation, ...]
    covariates: dict[str, float] = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class PanelArrays:
    """Dense, observation-major view of a dataset used by the numerical code.

    Observations are sorted by individual, then task; ``start[n]:start[n+1]``
    is the slice of rows belonging to individual ``n``.
    """

    ids: tuple[str, ...]
    ind: np.ndarray  # (O,) individual index of each row
    task: np.ndarray  # (O,)
    avail: np.ndarray  # (O, J) bool
    x: np.ndarray  # (O, J, A)
    chosen: np.ndarray  # (O,) alternative index
    z: np.ndarray  # (N, C)
    start: np.ndarray  # (N + 1,)

    @property
    def n_obs(self) -> int:
        return len(self.ind)

    @property
    def n_individuals(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class ChoiceDataset:
    schema: DataSchema
    individuals: tuple[Individual, ...]

    def __post_init__(self):
        validate(self)

    @property
    def alternatives(self) -> tuple[str, ...]:
        return self.schema.alternatives

    @property
    def alternative_list(self) -> list[Alternative]:
        return [Alternative(a, i) for i, a in enumerate(self.schema.alternatives)]

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(self.schema.attributes)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.schema.covariates

    @property
    def n_individuals(self) -> int:
        return len(self.individuals)

    @property
    def n_obs(self) -> int:
        return sum(ind.n_obs for ind in self.individuals)

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(ind.id for ind in self.individuals)

    def individual(self, ind_id: str) -> Individual:
        return self._by_id[ind_id]

    @cached_property
    def _by_id(self) -> dict[str, Individual]:
        return {ind.id: ind for ind in self.individuals}

    def subset(self, ids: Sequence[str]) -> "ChoiceDataset":
        return ChoiceDataset(self.schema, tuple(self._by_id[i] for i in ids))

    @cached_property
    def arrays(self) -> PanelArrays:
        J = len(self.alternatives)
        A = len(self.schema.attributes)
        alt_idx = {a: j for j, a in enumerate(self.alternatives)}
        O = self.n_obs
        ind = np.empty(O, dtype=np.intp)
        task = np.empty(O, dtype=np.int64)
        avail = np.zeros((O, J), dtype=bool)
        x = np.zeros((O, J, A))
        chosen = np.empty(O, dtype=np.intp)
        z = np.zeros((self.n_individuals, len(self.covariate_names)))
        start = np.zeros(self.n_individuals + 1, dtype=np.intp)
        row = 0
        for n, person in enumerate(self.individuals):
            z[n] = [person.covariates[c] for c in self.covariate_names]
            for obs in person.observations:
                ind[row] = n
                task[row] = obs.task_index
                avail[row] = obs.availability
                x[row] = obs.attributes
                chosen[row] = alt_idx[obs.chosen]
                row += 1
            start[n + 1] = row
        return PanelArrays(self.ids, ind, task, avail, x, chosen, z, start)


def validate(ds: ChoiceDataset) -> None:
    schema = ds.schema
    J = len(schema.alternatives)
    A = len(schema.attributes)
    if not ds.individuals:
        raise DataError("dataset has no individuals")
    if len(set(schema.alternatives)) != J:
        raise DataError("alternative ids must be unique")
    seen = set()
    for person in ds.individuals:
        if person.id in seen:
            raise DataError(f"duplicate individual id {person.id!r}")
        seen.add(person.id)
        if not person.observations:
            raise DataError(f"individual {person.id!r} has no observations")
        missing = set(schema.covariates) - set(person.covariates)
        if missing:
            raise DataError(f"individual {person.id!r} lacks covariates {sorted(missing)}")
        last = None
        for obs in person.observations:
            where = f"individual {person.id!r}, task {obs.task_index}"
            if last is not None and obs.task_index <= last:
                raise DataError(f"{where}: task indices must be strictly increasing")
            last = obs.task_index
            if len(obs.availability) != J or obs.attributes.shape != (J, A):
                raise DataError(f"{where}: observation does not conform to schema")
            if not any(obs.availability):
                raise DataError(f"{where}: no alternative available")
            if obs.chosen not in schema.alternatives:
                raise DataError(f"{where}: unknown alternative {obs.chosen!r}")
            if not obs.availability[schema.alternatives.index(obs.chosen)]:
                raise DataError(f"{where}: chosen alternative unavailable")
            if not np.all(np.isfinite(obs.attributes)):
                raise DataError(f"{where}: non-finite attribute value")


def _parse_float(value: str, col: str, where: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise DataError(f"{where}: non-numeric value {value!r} in column {col!r}") from None
    if not math.isfinite(out):
        raise DataError(f"{where}: non-finite value in column {col!r}")
    return out


def load_dataset(path: str | Path, schema: DataSchema | None = None) -> ChoiceDataset:
    """Read a wide choice CSV.

    When ``schema`` is omitted it is inferred from the header.  Rows are
    grouped by individual (in order of first appearance) and sorted by task.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if schema is None:
            schema = DataSchema.infer(header)
        for col in schema.columns():
            if col not in header:
                raise DataError(f"missing column {col!r}")
        rows = list(reader)

    alts = schema.alternatives
    attr_names = list(schema.attributes)
    grouped: dict[str, list] = {}
    covs: dict[str, dict[str, float]] = {}
    for lineno, row in enumerate(rows, start=2):
        where = f"{path.name}:{lineno}"
        ind_id = row[ID_COL]
        try:
            task = int(row[TASK_COL])
        except ValueError:
            raise DataError(f"{where}: non-integer task {row[TASK_COL]!r}") from None
        avail = []
        for a in alts:
            v = row[AVAIL_PREFIX + a].strip()
            if v not in ("0", "1"):
                raise DataError(f"{where}: availability must be 0 or 1, got {v!r}")
            avail.append(v == "1")
        x = np.zeros((len(alts), len(attr_names)))
        for k, attr in enumerate(attr_names):
            for a in schema.attributes[attr]:
                col = f"{attr}_{a}"
                x[alts.index(a), k] = _parse_float(row[col], col, where)
        chosen = row[CHOICE_COL]
        if chosen not in alts:
            raise DataError(f"{where}: unknown alternative {chosen!r}")
        if not avail[alts.index(chosen)]:
            raise DataError(f"{where}: chosen alternative unavailable")
        z = {c: _parse_float(row[c], c, where) for c in schema.covariates}
        if ind_id in covs and covs[ind_id] != z:
            raise DataError(f"{where}: covariates vary within individual {ind_id!r}")
        covs[ind_id] = z
        grouped.setdefault(ind_id, []).append(Observation(task, tuple(avail), x, chosen))

    individuals = []
    for ind_id, obs in grouped.items():
        obs.sort(key=lambda o: o.task_index)
        tasks = [o.task_index for o in obs]
        if len(set(tasks)) != len(tasks):
            raise DataError(f"duplicate (individual, task) key for individual {ind_id!r}")
        individuals.append(Individual(ind_id, tuple(obs), covs[ind_id]))
    if not individuals:
        raise DataError(f"{path}: no observations")
    return ChoiceDataset(schema, tuple(individuals))


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(ds: ChoiceDataset, path: str | Path) -> None:
    schema = ds.schema
    alts = schema.alternatives
    attr_names = list(schema.attributes)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.columns())
        for person in ds.individuals:
            cov = [_fmt(person.covariates[c]) for c in schema.covariates]
            for obs in person.observations:
                row = [person.id, str(obs.task_index), obs.chosen]
                row += ["1" if a else "0" for a in obs.availability]
                for k, attr in enumerate(attr_names):
                    row += [_fmt(obs.attributes[alts.index(a), k]) for a in schema.attributes[attr]]
                w.writerow(row + cov)


@dataclass(frozen=True)
class SplitDataset:
    estimation: ChoiceDataset | None
    new_individuals: ChoiceDataset | None
    last_choices: ChoiceDataset | None
    split_seed: int


def split_dataset(ds: ChoiceDataset, holdout_fraction: float, seed: int) -> SplitDataset:
    """Hold out a fraction of individuals (case 2) and, for the rest, their final
    observation (case 3).

    ``ceil((1 - holdout_fraction) * N)`` individuals are retained, sampled
    uniformly without replacement.  Empty parts are returned as ``None``.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    short = [p.id for p in ds.individuals if p.n_obs < 2]
    if short:
        raise DataError(
            f"{len(short)} individual(s) have a single observation and cannot contribute "
            f"a future choice, e.g. {short[0]!r}"
        )
    N = ds.n_individuals
    # rounding guards against 0.8 * 10 = 8.000000000000002 style ceilings
    n_keep = math.ceil(round((1.0 - holdout_fraction) * N, 9))
    rng = np.random.default_rng(seed)
    keep = np.zeros(N, dtype=bool)
    keep[rng.permutation(N)[:n_keep]] = True

    est, last, held = [], [], []
    for person, k in zip(ds.individuals, keep):
        if k:
            est.append(Individual(person.id, person.observations[:-1], person.covariates))
            last.append(Individual(person.id, person.observations[-1:], person.covariates))
        else:
            held.append(person)

    def make(people):
        return ChoiceDataset(ds.schema, tuple(people)) if people else None

    return SplitDataset(make(est), make(held), make(last), seed)


def observed_shares(ds: ChoiceDataset) -> np.ndarray:
    """Share of observations choosing each alternative."""
    arr = ds.arrays
    if arr.n_obs == 0:
        raise DataError("empty dataset")
    counts = np.bincount(arr.chosen, minlength=len(ds.alternatives)).astype(float)
    return counts / counts.sum()
