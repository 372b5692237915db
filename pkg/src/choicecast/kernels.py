"""Per-observation choice probabilities: linear utilities, MNL and two-level NL.

All probability functions broadcast over leading axes; the last axis indexes
alternatives.  Unavailable alternatives receive probability zero.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

CONST = "const"
ATTRIBUTE = "attr"
COVARIATE = "cov"


class ModelError(ValueError):
    """Raised for invalid or unresolvable model specifications."""


@dataclass(frozen=True)
class Term:
    """``coef * var`` in one alternative's utility; ``var`` is None for a constant."""

    coef: str
    var: str | None = None
    kind: str = CONST


@dataclass(frozen=True)
class UtilitySpec:
    """Linear-in-parameters utilities, one term list per alternative."""

    alternatives: tuple[str, ...]
    terms: Mapping[str, tuple[Term, ...]]

    def coefficients(self) -> list[str]:
        seen: dict[str, None] = {}
        for alt in self.alternatives:
            for t in self.terms.get(alt, ()):
                seen.setdefault(t.coef)
        return list(seen)


@dataclass(frozen=True)
class NestSpec:
    """Partition of alternatives into nests; unlisted alternatives are singletons."""

    alternatives: tuple[str, ...]
    nests: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    lambdas: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        listed = [a for members in self.nests.values() for a in members]
        if len(listed) != len(set(listed)) or not set(listed) <= set(self.alternatives):
            raise ModelError("nests must partition the alternatives")

    @property
    def names(self) -> list[str]:
        singles = [a for a in self.alternatives if not any(a in m for m in self.nests.values())]
        return list(self.nests) + [f"_{a}" for a in singles]

    def nest_index(self) -> np.ndarray:
        """Nest number of every alternative (singleton nests come last)."""
        names = self.names
        out = np.empty(len(self.alternatives), dtype=np.intp)
        for j, a in enumerate(self.alternatives):
            for m, members in self.nests.items():
                if a in members:
                    out[j] = names.index(m)
                    break
            else:
                out[j] = names.index(f"_{a}")
        return out

    def lambda_vector(self) -> np.ndarray:
        lam = np.array([float(self.lambdas.get(m, 1.0)) for m in self.names])
        if np.any(lam <= 0):
            raise ModelError("nesting parameters must be positive")
        if np.any(lam > 1):
            warnings.warn("nesting parameter above 1; model may be inconsistent with utility maximisation")
        return lam


def utilities(
    spec: UtilitySpec,
    coeffs: Mapping[str, float],
    attributes: Mapping[str, Mapping[str, float]] | np.ndarray,
    covariates: Mapping[str, float],
    availability: Sequence[bool] | None = None,
    attribute_names: Sequence[str] = (),
) -> np.ndarray:
    """Systematic utilities of one observation.

    ``attributes`` is either ``{attr: {alt: value}}`` or an (alt x attr) matrix
    whose columns follow ``attribute_names``.  Unavailable alternatives get
    ``-inf``.
    """
    J = len(spec.alternatives)
    V = np.zeros(J)
    for j, alt in enumerate(spec.alternatives):
        for t in spec.terms.get(alt, ()):
            if t.coef not in coeffs:
                raise ModelError(f"unresolved coefficient {t.coef!r}")
            if t.kind == CONST:
                value = 1.0
            elif t.kind == COVARIATE:
                value = covariates[t.var]
            elif isinstance(attributes, np.ndarray):
                value = attributes[j, list(attribute_names).index(t.var)]
            else:
                value = attributes[t.var][alt]
            V[j] += coeffs[t.coef] * value
    if availability is not None:
        V = np.where(np.asarray(availability, dtype=bool), V, -np.inf)
    return V


def _masked(V, avail):
    V = np.asarray(V, dtype=float)
    if avail is None:
        return V
    return np.where(avail, V, -np.inf)


def mnl_logprobs(V, avail=None) -> np.ndarray:
    Vm = _masked(V, avail)
    return Vm - logsumexp(Vm, axis=-1, keepdims=True)


def mnl_probs(V, avail=None) -> np.ndarray:
    """Logit probabilities via max-shifted exponentials."""
    Vm = _masked(V, avail)
    Vmax = np.max(Vm, axis=-1, keepdims=True)
    e = np.exp(Vm - Vmax)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class NLParts:
    """Intermediate quantities of a nested logit evaluation."""

    logp: np.ndarray  # (..., J)
    lam_alt: np.ndarray  # (..., J) lambda of each alternative's nest
    cond: np.ndarray  # (..., J) P(j | nest of j)
    inclusive: np.ndarray  # (..., M) I_m, -inf for empty nests
    nest_prob: np.ndarray  # (..., M) P(m)


def nl_parts(V, nest_of: np.ndarray, lam, avail=None) -> NLParts:
    """Two-level nested logit with the scale of the upper level fixed to one.

    ``I_m = ln sum_{j in m} exp(V_j / lam_m)``, ``P(m) ∝ exp(lam_m I_m)``,
    ``P(j|m) = exp(V_j / lam_m - I_m)``.
    """
    V = np.asarray(V, dtype=float)
    lam = np.asarray(lam, dtype=float)
    M = lam.shape[-1]
    lam_alt = lam[..., nest_of]
    y = _masked(V / lam_alt, avail)
    shape = np.broadcast_shapes(y.shape[:-1], lam.shape[:-1])
    inc = np.empty(shape + (M,))
    for m in range(M):
        members = nest_of == m
        with np.errstate(divide="ignore"):
            inc[..., m] = logsumexp(y[..., members], axis=-1)
    with np.errstate(invalid="ignore"):
        top = np.where(np.isneginf(inc), -np.inf, lam * inc)
    iv = logsumexp(top, axis=-1, keepdims=True)
    if np.any(np.isneginf(iv)):
        raise ModelError("no alternative available in any nest")
    nest_prob = np.exp(top - iv)
    inc_alt = inc[..., nest_of]
    with np.errstate(invalid="ignore"):
        log_cond = np.where(np.isneginf(y), -np.inf, y - inc_alt)
        logp = np.where(np.isneginf(y), -np.inf, log_cond + top[..., nest_of] - iv)
    return NLParts(logp, np.broadcast_to(lam_alt, y.shape), np.exp(log_cond), inc, nest_prob)


def nl_logprobs(V, nest_of, lam, avail=None) -> np.ndarray:
    return nl_parts(V, nest_of, lam, avail).logp


def nl_probs(V, nests: NestSpec, avail=None) -> np.ndarray:
    return np.exp(nl_logprobs(V, nests.nest_index(), nests.lambda_vector(), avail))
