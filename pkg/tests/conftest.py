from pathlib import Path

import numpy as np
import pytest

from choicecast.data import ChoiceDataset, DataSchema, Individual, Observation, split_dataset
from choicecast.dgp import DgpSpec, simulate_dataset
from choicecast.model import ModelSpec

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# (number, line) pairs filled by the acceptance suite, printed after the run
ACCEPTANCE: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def make_dataset(alternatives, choices, attrs=None, covs=None, avail=None, ids=None):
    """Build a dataset in memory.

    choices: per individual, the list of chosen alternatives.
    attrs: {name: array (N, T, J)}; covs: {name: array (N,)}; avail: bool (N, T, J).
    """
    attrs = attrs or {}
    covs = covs or {}
    alts = tuple(alternatives)
    schema = DataSchema(alts, {a: alts for a in attrs}, tuple(covs))
    people = []
    for n, seq in enumerate(choices):
        obs = []
        for t, ch in enumerate(seq):
            x = np.array([[np.asarray(attrs[a])[n, t, j] for a in attrs] for j in range(len(alts))],
                         dtype=float).reshape(len(alts), len(attrs))
            av = tuple(bool(v) for v in (avail[n][t] if avail is not None else [1] * len(alts)))
            obs.append(Observation(t + 1, av, x, ch))
        pid = ids[n] if ids else f"p{n + 1}"
        people.append(Individual(pid, tuple(obs), {c: float(v[n]) for c, v in covs.items()}))
    return ChoiceDataset(schema, tuple(people))


def spec(d):
    return ModelSpec.from_dict(d)


@pytest.fixture(scope="session")
def dgp():
    return DgpSpec.load(CONFIGS / "dgp.yaml")


@pytest.fixture(scope="session")
def acceptance_data(dgp):
    return simulate_dataset(dgp)


@pytest.fixture(scope="session")
def acceptance_split(acceptance_data):
    return split_dataset(acceptance_data[0], 0.2, 42)


def model_config(name):
    return ModelSpec.load(CONFIGS / "models" / f"{name}.yaml")


@pytest.fixture(scope="session")
def true_model_fit(dgp, acceptance_data):
    """The DGP's own model family estimated on the full acceptance sample."""
    from choicecast.estimation import EstimateOptions, maximize_ll
    return maximize_ll(dgp.model, acceptance_data[0], EstimateOptions(n_draws=500, seed=7))
