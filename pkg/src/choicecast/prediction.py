"""Choice probabilities for the three prediction cases.

Every model is evaluated at a set of support points: one point for plain
models, R simulation draws for continuous mixtures, S classes for latent
class models.  An unconditional prediction averages the support-point
probabilities with prior weights (1/R or the class allocation
probabilities); a conditional prediction uses posterior weights proportional
to prior weight times the likelihood of the person's observed choices.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import ChoiceDataset, SplitDataset
from .likelihood import Engine, NumericalError, _logsumexp
from .mixing import DrawMatrix, mlhs_draws
from .model import CompiledModel, ModelError, ModelSpec, ParameterVector, compile_model

CASES = ("case1", "case2", "case3")
NONE = "none"
POSTERIOR = "posterior"
CONDITIONING = (NONE, POSTERIOR)


class PredictionError(ValueError):
    """Invalid prediction request."""


@dataclass(frozen=True)
class PredictionRequest:
    case: str
    conditioning: str = NONE

    def __post_init__(self):
        if self.case not in CASES:
            raise PredictionError(f"unknown case {self.case!r}; expected one of {', '.join(CASES)}")
        if self.conditioning not in CONDITIONING:
            raise PredictionError(f"unknown conditioning {self.conditioning!r}")
        if self.case == "case2" and self.conditioning == POSTERIOR:
            raise PredictionError(
                "case2 predicts for individuals outside the estimation sample, who have no "
                "choice history to condition on; use conditioning 'none'")


@dataclass
class PredictionTable:
    """One row per predicted observation, in (individual, task) order of the source data."""

    alternatives: tuple[str, ...]
    ids: list[str]
    tasks: np.ndarray
    probs: np.ndarray  # (O, J)
    chosen: np.ndarray  # (O,) alternative index, -1 if unknown
    case: str
    conditioning: str
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_choices(self) -> bool:
        return len(self) > 0 and bool(np.all(self.chosen >= 0))

    def chosen_probs(self) -> np.ndarray:
        if not self.has_choices:
            raise PredictionError("chosen alternatives unknown")
        return self.probs[np.arange(len(self)), self.chosen]

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["indiv_id", "task", "case", "conditioning",
                        *(f"p_{a}" for a in self.alternatives), "chosen"])
            for i in range(len(self)):
                c = self.chosen[i]
                w.writerow([self.ids[i], int(self.tasks[i]), self.case, self.conditioning,
                            *(repr(float(p)) for p in self.probs[i]),
                            self.alternatives[c] if c >= 0 else ""])
        meta = {"case": self.case, "conditioning": self.conditioning, **self.meta}
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "PredictionTable":
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        alts = tuple(h[2:] for h in header[4:-1])
        index = {a: j for j, a in enumerate(alts)}
        mp = meta_path(path)
        meta = json.loads(mp.read_text(encoding="utf-8")) if mp.exists() else {}
        case = meta.pop("case", body[0][2] if body else "")
        conditioning = meta.pop("conditioning", body[0][3] if body else NONE)
        return cls(
            alternatives=alts,
            ids=[r[0] for r in body],
            tasks=np.array([int(r[1]) for r in body], dtype=np.int64),
            probs=np.array([[float(v) for v in r[4:-1]] for r in body], dtype=float).reshape(len(body), len(alts)),
            chosen=np.array([index[r[-1]] if r[-1] else -1 for r in body], dtype=np.intp),
            case=case,
            conditioning=conditioning,
            meta=meta,
        )


def meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


# -- support-point weights ---------------------------------------------------
def posterior_weights(log_seq_lik, log_prior=None) -> np.ndarray:
    """Normalised posterior weights over support points (last axis).

    ``w_k ∝ prior_k * L_k``, evaluated in log space.
    """
    ell = np.asarray(log_seq_lik, dtype=float)
    lw = ell if log_prior is None else ell + np.asarray(log_prior, dtype=float)
    total = _logsumexp(lw, axis=-1)
    if np.any(~np.isfinite(total)):
        raise NumericalError("history likelihood underflows at every support point")
    return np.exp(lw - total[..., None])


def mix(P: np.ndarray, weights: np.ndarray, ind: np.ndarray) -> np.ndarray:
    """Support-point probabilities (O, K, J) averaged with per-individual weights (N, K)."""
    return np.einsum("okj,ok->oj", P, weights[ind])


# -- evaluation helpers -------------------------------------------------------
def _model(spec, ds: ChoiceDataset) -> CompiledModel:
    if isinstance(spec, CompiledModel):
        return spec
    if isinstance(spec, ModelSpec):
        return compile_model(spec, ds.schema)
    raise TypeError("expected a ModelSpec or CompiledModel")


def _theta(model: CompiledModel, params) -> np.ndarray:
    if isinstance(params, ParameterVector):
        return model.parameters(params.as_dict()).values
    if isinstance(params, dict):
        return model.parameters(params).values
    return np.asarray(params, dtype=float)


def shared_draws(ds: ChoiceDataset, n_dims: int, n_draws: int, seed: int, dims=()) -> DrawMatrix:
    """One draw block reused for every individual."""
    one = mlhs_draws(1, n_dims, n_draws, seed, keys=["__shared__"], dims=dims)
    base = np.broadcast_to(one.base, (ds.n_individuals,) + one.base.shape[1:]).copy()
    return DrawMatrix(base, ds.ids, seed, tuple(dims))


def _engine(model, ds, n_draws, seed, threads, shared=False) -> Engine:
    draws = None
    if shared and model.is_mixed:
        draws = shared_draws(ds, len(model.dims), n_draws, seed, model.dims)
    return Engine(model, ds.arrays, draws=draws, n_draws=n_draws, seed=seed, threads=threads)


def _conditional_ok(model: CompiledModel) -> None:
    if not model.spec.panel:
        raise PredictionError("posterior conditioning needs a panel model")


# -- unconditional ------------------------------------------------------------
def predict_unconditional(spec, params, ds: ChoiceDataset, n_draws: int = 500, seed: int = 0,
                          threads: int | None = None, shared: bool = False) -> np.ndarray:
    """Prior-weighted support-point probabilities, (O, J)."""
    model = _model(spec, ds)
    eng = _engine(model, ds, n_draws, seed, threads, shared)
    theta = _theta(model, params)
    P, logw = eng.support_probs(theta)
    return mix(P, np.exp(logw), eng.arrays.ind)


def predict_plain(spec, params, ds: ChoiceDataset) -> np.ndarray:
    """Kernel probabilities at the point estimates."""
    model = _model(spec, ds)
    if model.is_mixed or model.n_classes > 1:
        raise ModelError("predict_plain needs a model without random heterogeneity")
    return predict_unconditional(model, params, ds)


def predict_mixed_unconditional(spec, params, ds: ChoiceDataset, n_draws: int = 500, seed: int = 0,
                                threads: int | None = None, shared: bool = False) -> np.ndarray:
    """Draw-averaged probabilities; ``shared=True`` gives every person the same draws."""
    model = _model(spec, ds)
    if not model.is_mixed:
        raise ModelError("predict_mixed_unconditional needs a random coefficient")
    return predict_unconditional(model, params, ds, n_draws, seed, threads, shared)


def predict_lc_unconditional(spec, params, ds: ChoiceDataset) -> np.ndarray:
    """Class-probability-weighted kernel probabilities (covariates enter through pi_ns)."""
    model = _model(spec, ds)
    if model.is_mixed:
        raise ModelError("predict_lc_unconditional does not handle continuous mixing")
    return predict_unconditional(model, params, ds)


# -- conditional --------------------------------------------------------------
def support_posterior(spec, params, history: ChoiceDataset, n_draws: int = 500, seed: int = 0,
                      threads: int | None = None) -> np.ndarray:
    """Posterior support-point weights (N_history, K) given each person's history."""
    model = _model(spec, history)
    _conditional_ok(model)
    eng = _engine(model, history, n_draws, seed, threads)
    ell, logw = eng.sequence_loglik(_theta(model, params))
    return posterior_weights(ell, logw)


def posterior_draw_weights(spec, params, history: ChoiceDataset, n_draws: int = 500, seed: int = 0,
                           threads: int | None = None) -> np.ndarray:
    """w_nr = L_n(beta_r) / sum_r' L_n(beta_r'), one row per individual."""
    if not _model(spec, history).is_mixed:
        raise ModelError("posterior_draw_weights needs a random coefficient")
    return support_posterior(spec, params, history, n_draws, seed, threads)


def posterior_class_probs(spec, params, history: ChoiceDataset, threads: int | None = None) -> np.ndarray:
    """Posterior class membership probabilities, one row per individual."""
    if _model(spec, history).is_mixed:
        raise ModelError("posterior_class_probs does not handle continuous mixing")
    return support_posterior(spec, params, history, threads=threads)


def predict_conditional(spec, params, target: ChoiceDataset, history: ChoiceDataset,
                        n_draws: int = 500, seed: int = 0, threads: int | None = None) -> np.ndarray:
    """Posterior-weighted probabilities for ``target`` rows given each person's ``history``.

    Draws are keyed by individual id, so target and history share them.
    """
    model = _model(spec, target)
    _conditional_ok(model)
    theta = _theta(model, params)
    w_hist = support_posterior(model, theta, history, n_draws, seed, threads)
    row = {k: i for i, k in enumerate(history.ids)}
    missing = [k for k in target.ids if k not in row]
    if missing:
        raise PredictionError(f"no choice history for individual(s) {', '.join(missing[:5])}")
    eng = _engine(model, target, n_draws, seed, threads)
    P, _ = eng.support_probs(theta)
    W = w_hist[[row[k] for k in target.ids]]
    return mix(P, W, eng.arrays.ind)


def predict_mixed_conditional(spec, params, target: ChoiceDataset, history: ChoiceDataset,
                              n_draws: int = 500, seed: int = 0, threads: int | None = None) -> np.ndarray:
    if not _model(spec, target).is_mixed:
        raise ModelError("predict_mixed_conditional needs a random coefficient")
    return predict_conditional(spec, params, target, history, n_draws, seed, threads)


def predict_lc_conditional(spec, params, target: ChoiceDataset, history: ChoiceDataset,
                           threads: int | None = None) -> np.ndarray:
    if _model(spec, target).is_mixed:
        raise ModelError("predict_lc_conditional does not handle continuous mixing")
    return predict_conditional(spec, params, target, history, threads=threads)


def predict_leave_one_out(spec, params, ds: ChoiceDataset, n_draws: int = 500, seed: int = 0,
                          threads: int | None = None) -> np.ndarray:
    """Conditional prediction of every row given the person's other rows."""
    model = _model(spec, ds)
    _conditional_ok(model)
    theta = _theta(model, params)
    eng = _engine(model, ds, n_draws, seed, threads)
    P, logw = eng.support_probs(theta)
    ell, _ = eng.sequence_loglik(theta)
    a = eng.arrays
    own = np.log(np.maximum(P[np.arange(a.n_obs), :, a.chosen], 1e-300))  # (O, K)
    W = posterior_weights(ell[a.ind] - own, logw[a.ind])
    return np.einsum("okj,ok->oj", P, W)


# -- case routing ---------------------------------------------------------------
def predict_case(spec, params, split: SplitDataset, request: PredictionRequest, n_draws: int = 500,
                 seed: int = 0, threads: int | None = None, model_id: str | None = None) -> PredictionTable | None:
    """Route a request to the right operation; None when the case has no observations.

    case1 predicts the estimation sample (conditioning leaves the predicted
    row out of the history); case2 the held-out individuals; case3 the held-out
    last choice of each estimation individual, conditioning on their
    estimation-sample choices.
    """
    est = split.estimation
    if request.case == "case1":
        target = est
    elif request.case == "case2":
        target = split.new_individuals
    else:
        target = split.last_choices
    if target is None:
        return None
    model = _model(spec, target)
    if request.conditioning == NONE:
        P = predict_unconditional(model, params, target, n_draws, seed, threads)
    elif not model.spec.has_heterogeneity:
        # a point-mass posterior equals the prior
        P = predict_unconditional(model, params, target, n_draws, seed, threads)
    elif request.case == "case1":
        P = predict_leave_one_out(model, params, target, n_draws, seed, threads)
    else:
        P = predict_conditional(model, params, target, est.subset(target.ids), n_draws, seed, threads)
    a = target.arrays
    meta = {"model": model_id or model.spec.name}
    if model.is_mixed:
        meta.update(draws=n_draws, seed=seed)
    return PredictionTable(
        alternatives=target.alternatives,
        ids=[a.ids[i] for i in a.ind],
        tasks=np.asarray(a.task),
        probs=P,
        chosen=np.asarray(a.chosen),
        case=request.case,
        conditioning=request.conditioning,
        meta=meta,
    )
