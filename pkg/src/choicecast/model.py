"""Declarative model specifications and their compilation into index tables.

A model is written as nested key-value text (YAML)::

    name: mmnl
    utilities:
      car: []
      bus: [asc_bus, b_cost * cost, asc_bus_female * female]
    coefficients:
      asc_bus: normal                       # params asc_bus_mu, asc_bus_sigma
      b_cost: {dist: neglogunif, a: cost_a, b: cost_b, draws: cost}
    nests:
      pt: {alternatives: [bus, rail], lambda: lambda_pt}
    classes: 3
    class_allocation: {covariates: [female]}
    start: {asc_bus_mu: 0.5}
    fixed: {}

A term is ``coef`` (an alternative-specific constant) or ``coef * var`` where
``var`` is an attribute of that alternative or an individual covariate.
Coefficients not listed under ``coefficients`` are plain (non-random)
parameters named after the coefficient.  With ``classes > 1`` every
parameter gets one copy per class (``<param>_class<s>``) unless its
coefficient or nest is marked ``generic: true``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .data import DataSchema
from .kernels import ATTRIBUTE, CONST, COVARIATE, ModelError, Term, UtilitySpec
from .mixing import FIXED, KINDS, NORMAL, RANDOM_KINDS

_TERM = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(?:\*\s*([A-Za-z_][\w.]*))?\s*$")

# start values for parameters the user does not set
START_SIGMA = 0.1
START_LOGUNIF_A = -3.0
START_LOGUNIF_B = 0.1
LC_START_STEP = 0.1


@dataclass(frozen=True)
class CoefDef:
    dist: str = FIXED
    params: tuple[str, ...] = ()
    draws: str | None = None
    generic: bool = False


@dataclass(frozen=True)
class NestDef:
    alternatives: tuple[str, ...]
    lam: str
    generic: bool = False


@dataclass(frozen=True)
class ModelSpec:
    name: str
    utilities: dict[str, tuple[tuple[str, str | None], ...]]
    coefficients: dict[str, CoefDef] = field(default_factory=dict)
    nests: dict[str, NestDef] = field(default_factory=dict)
    classes: int = 1
    allocation_covariates: tuple[str, ...] = ()
    start: dict[str, float] = field(default_factory=dict)
    fixed: dict[str, float] = field(default_factory=dict)
    panel: bool = True

    @property
    def is_mixed(self) -> bool:
        return any(c.dist in RANDOM_KINDS for c in self.coefficients.values())

    @property
    def is_latent_class(self) -> bool:
        return self.classes > 1

    @property
    def has_heterogeneity(self) -> bool:
        return self.is_mixed or self.is_latent_class

    def coef(self, name: str) -> CoefDef:
        return self.coefficients.get(name) or CoefDef(FIXED, (name,))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelSpec":
        return parse_model(d)

    @classmethod
    def load(cls, path: str | Path) -> "ModelSpec":
        with Path(path).open(encoding="utf-8") as fh:
            return parse_model(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "utilities": {}}
        for alt, terms in self.utilities.items():
            out["utilities"][alt] = [c if v is None else f"{c} * {v}" for c, v in terms]
        coefs = {}
        for name, cd in self.coefficients.items():
            entry: dict[str, Any] = {"dist": cd.dist}
            keys = {FIXED: ("param",), NORMAL: ("mu", "sigma")}.get(cd.dist, ("a", "b"))
            entry.update(zip(keys, cd.params))
            if cd.draws is not None:
                entry["draws"] = cd.draws
            if cd.generic:
                entry["generic"] = True
            coefs[name] = entry
        if coefs:
            out["coefficients"] = coefs
        if self.nests:
            out["nests"] = {
                m: {"alternatives": list(n.alternatives), "lambda": n.lam, **({"generic": True} if n.generic else {})}
                for m, n in self.nests.items()
            }
        if self.classes > 1:
            out["classes"] = self.classes
        if self.allocation_covariates:
            out["class_allocation"] = {"covariates": list(self.allocation_covariates)}
        if self.start:
            out["start"] = dict(self.start)
        if self.fixed:
            out["fixed"] = dict(self.fixed)
        if not self.panel:
            out["panel"] = False
        return out

    def dump(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _parse_term(text: str) -> tuple[str, str | None]:
    m = _TERM.match(str(text))
    if not m:
        raise ModelError(f"cannot parse utility term {text!r}")
    return m.group(1), m.group(2)


def _parse_coef(name: str, raw) -> CoefDef:
    if isinstance(raw, str):
        raw = {"dist": raw}
    raw = dict(raw or {})
    dist = raw.pop("dist", FIXED)
    if dist not in KINDS:
        raise ModelError(f"coefficient {name!r}: unknown distribution {dist!r}")
    if dist == FIXED:
        params = (raw.pop("param", name),)
    elif dist == NORMAL:
        params = (raw.pop("mu", f"{name}_mu"), raw.pop("sigma", f"{name}_sigma"))
    else:
        params = (raw.pop("a", f"{name}_a"), raw.pop("b", f"{name}_b"))
    draws = raw.pop("draws", name if dist in RANDOM_KINDS else None)
    generic = bool(raw.pop("generic", False))
    if raw:
        raise ModelError(f"coefficient {name!r}: unknown keys {sorted(raw)}")
    return CoefDef(dist, tuple(params), draws, generic)


def parse_model(d: Mapping[str, Any]) -> ModelSpec:
    d = dict(d)
    known = {"name", "utilities", "coefficients", "nests", "classes", "class_allocation", "start", "fixed", "panel"}
    unknown = set(d) - known
    if unknown:
        raise ModelError(f"unknown model keys {sorted(unknown)}")
    if "utilities" not in d:
        raise ModelError("model has no utilities")
    utilities = {str(alt): tuple(_parse_term(t) for t in (terms or ())) for alt, terms in d["utilities"].items()}
    coefficients = {str(k): _parse_coef(str(k), v) for k, v in (d.get("coefficients") or {}).items()}
    used = {c for terms in utilities.values() for c, _ in terms}
    extra = set(coefficients) - used
    if extra:
        raise ModelError(f"coefficients never used in a utility: {sorted(extra)}")
    nests = {}
    for m, nd in (d.get("nests") or {}).items():
        nd = dict(nd)
        nests[str(m)] = NestDef(
            tuple(nd["alternatives"]), str(nd.get("lambda", f"lambda_{m}")), bool(nd.get("generic", False))
        )
    classes = int(d.get("classes", 1))
    if classes < 1:
        raise ModelError("classes must be at least 1")
    alloc = tuple((d.get("class_allocation") or {}).get("covariates", ()))
    if alloc and classes == 1:
        raise ModelError("class allocation covariates need more than one class")
    spec = ModelSpec(
        name=str(d.get("name", "model")),
        utilities=utilities,
        coefficients=coefficients,
        nests=nests,
        classes=classes,
        allocation_covariates=alloc,
        start={str(k): float(v) for k, v in (d.get("start") or {}).items()},
        fixed={str(k): float(v) for k, v in (d.get("fixed") or {}).items()},
        panel=bool(d.get("panel", True)),
    )
    if spec.is_mixed and spec.is_latent_class:
        raise ModelError("continuous mixing inside latent classes is not supported")
    return spec


@dataclass
class ParameterVector:
    """Named parameters with a free/fixed flag per entry."""

    names: tuple[str, ...]
    values: np.ndarray
    free: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.free = np.asarray(self.free, dtype=bool)
        if len(set(self.names)) != len(self.names):
            raise ModelError("parameter names must be unique")

    @property
    def free_names(self) -> list[str]:
        return [n for n, f in zip(self.names, self.free) if f]

    @property
    def free_values(self) -> np.ndarray:
        return self.values[self.free].copy()

    def with_free(self, theta) -> "ParameterVector":
        values = self.values.copy()
        values[self.free] = theta
        return ParameterVector(self.names, values, self.free.copy())

    def with_values(self, updates: Mapping[str, float]) -> "ParameterVector":
        values = self.values.copy()
        index = {n: i for i, n in enumerate(self.names)}
        for k, v in updates.items():
            if k not in index:
                raise ModelError(f"unknown parameter {k!r}")
            values[index[k]] = v
        return ParameterVector(self.names, values, self.free.copy())

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])


@dataclass(frozen=True)
class Link:
    """Coefficient ``q`` in class ``k`` (None: every class) is driven by ``params``."""

    q: int
    k: int | None
    dist: str
    params: tuple[int, ...]
    dim: int | None


@dataclass(frozen=True)
class TermIndex:
    q: int
    j: int
    kind: str
    col: int  # attribute or covariate column; unused for constants


@dataclass(frozen=True)
class CompiledModel:
    """A model spec resolved against a data schema into integer index tables."""

    spec: ModelSpec
    schema: DataSchema
    param_names: tuple[str, ...]
    start_values: np.ndarray
    free: np.ndarray
    coef_names: tuple[str, ...]
    links: tuple[Link, ...]
    terms: tuple[TermIndex, ...]
    dims: tuple[str, ...]
    nest_of: np.ndarray
    lambda_params: np.ndarray  # (S, M) parameter index, -1 where lambda is fixed at 1
    alloc_params: np.ndarray  # (S, 1 + C_alloc) parameter index, -1 for the base class
    alloc_cols: tuple[int, ...]
    utility: UtilitySpec

    @property
    def n_classes(self) -> int:
        return self.spec.classes

    @property
    def is_mixed(self) -> bool:
        return bool(self.dims)

    @property
    def is_nested(self) -> bool:
        return bool(np.any(self.lambda_params >= 0))

    def parameters(self, values: Mapping[str, float] | None = None) -> ParameterVector:
        pv = ParameterVector(self.param_names, self.start_values.copy(), self.free.copy())
        return pv.with_values(values) if values else pv

    def class_of(self, name: str) -> int | None:
        m = re.search(r"_class(\d+)$", name)
        return int(m.group(1)) if m and self.spec.classes > 1 else None


def compile_model(spec: ModelSpec, schema: DataSchema) -> CompiledModel:
    alts = schema.alternatives
    for alt in spec.utilities:
        if alt not in alts:
            raise ModelError(f"utility given for unknown alternative {alt!r}")
    S = spec.classes

    # resolve terms
    terms_by_alt: dict[str, list[Term]] = {}
    coef_names: list[str] = []
    raw_terms = []
    for j, alt in enumerate(alts):
        for coef, var in spec.utilities.get(alt, ()):
            if var is None:
                kind, col = CONST, -1
            elif var in schema.attributes:
                if alt not in schema.attributes[var]:
                    raise ModelError(f"attribute {var!r} is not defined for alternative {alt!r}")
                kind, col = ATTRIBUTE, list(schema.attributes).index(var)
            elif var in schema.covariates:
                kind, col = COVARIATE, schema.covariates.index(var)
            else:
                raise ModelError(f"unknown variable {var!r} in utility of {alt!r}")
            if coef not in coef_names:
                coef_names.append(coef)
            raw_terms.append(TermIndex(coef_names.index(coef), j, kind, col))
            terms_by_alt.setdefault(alt, []).append(Term(coef, var, kind))

    # ASC normalisation: at least one alternative must lack a free constant
    fixed_names = set(spec.fixed)
    free_const = {
        alts[t.j] for t in raw_terms
        if t.kind == CONST and not (spec.coef(coef_names[t.q]).dist == FIXED
                                    and spec.coef(coef_names[t.q]).params[0] in fixed_names)
    }
    if len(alts) > 1 and len(free_const) == len(alts):
        raise ModelError("every alternative has a free constant; normalise one to zero")

    # parameter registry
    base_params: list[str] = []
    param_role: dict[str, str] = {}
    param_generic: dict[str, bool] = {}

    def register(p: str, role: str, generic: bool):
        if p in param_generic and param_generic[p] != generic:
            raise ModelError(f"parameter {p!r} is used both class-specifically and generically")
        if p not in base_params:
            base_params.append(p)
            param_role[p] = role
        param_generic[p] = generic

    const_coefs = {coef_names[t.q] for t in raw_terms if t.kind == CONST}
    for q, coef in enumerate(coef_names):
        cd = spec.coef(coef)
        generic = cd.generic or S == 1
        if cd.dist == FIXED:
            register(cd.params[0], "const" if coef in const_coefs else "coef", generic)
        elif cd.dist == NORMAL:
            register(cd.params[0], "mu", generic)
            register(cd.params[1], "sigma", generic)
        else:
            register(cd.params[0], "logunif_a", generic)
            register(cd.params[1], "logunif_b", generic)
    nest_names = list(spec.nests)
    for m in nest_names:
        nd = spec.nests[m]
        for a in nd.alternatives:
            if a not in alts:
                raise ModelError(f"nest {m!r} lists unknown alternative {a!r}")
        register(nd.lam, "lambda", nd.generic or S == 1)
    alloc_cols = []
    for c in spec.allocation_covariates:
        if c not in schema.covariates:
            raise ModelError(f"unknown class allocation covariate {c!r}")
        alloc_cols.append(schema.covariates.index(c))

    names: list[str] = []
    start: list[float] = []
    index: dict[tuple[str, int | None], int] = {}

    def default_start(p: str, role: str, k: int | None) -> float:
        base = spec.start.get(p, {"sigma": START_SIGMA, "logunif_a": START_LOGUNIF_A,
                                  "logunif_b": START_LOGUNIF_B, "lambda": 1.0}.get(role, 0.0))
        # break label symmetry between classes
        if k is not None and role in ("const", "coef", "mu", "logunif_a"):
            base += LC_START_STEP * k * (-1) ** k
        return base

    for p in base_params:
        if param_generic[p]:
            index[(p, None)] = len(names)
            names.append(p)
            start.append(default_start(p, param_role[p], None))
        else:
            for k in range(1, S + 1):
                name = f"{p}_class{k}"
                index[(p, k)] = len(names)
                names.append(name)
                start.append(spec.start.get(name, default_start(p, param_role[p], k)))
    alloc = -np.ones((S, 1 + len(alloc_cols)), dtype=np.intp)
    for k in range(2, S + 1):
        for i, label in enumerate(["intercept"] + list(spec.allocation_covariates)):
            name = f"delta_class{k}" if label == "intercept" else f"delta_class{k}_{label}"
            alloc[k - 1, i] = len(names)
            names.append(name)
            start.append(spec.start.get(name, 0.0))

    free = np.ones(len(names), dtype=bool)
    for p, v in spec.fixed.items():
        hits = [i for (b, k), i in index.items() if b == p] or ([names.index(p)] if p in names else [])
        if not hits:
            raise ModelError(f"fixed value given for unknown parameter {p!r}")
        for i in hits:
            free[i] = False
            start[i] = v
    for p, v in spec.start.items():
        if p not in names and not any(b == p for b, _ in index):
            raise ModelError(f"start value given for unknown parameter {p!r}")

    def pidx(p: str, k: int) -> int:
        return index[(p, None)] if (p, None) in index else index[(p, k)]

    # coefficient links and simulation dimensions
    dims: list[str] = []
    links = []
    for q, coef in enumerate(coef_names):
        cd = spec.coef(coef)
        dim = None
        if cd.dist in RANDOM_KINDS:
            if cd.draws not in dims:
                dims.append(cd.draws)
            dim = dims.index(cd.draws)
        for k in range(1, S + 1):
            links.append(Link(q, k - 1 if S > 1 else None, cd.dist, tuple(pidx(p, k) for p in cd.params), dim))

    nest_of_names = []
    for a in alts:
        owner = [m for m in nest_names if a in spec.nests[m].alternatives]
        nest_of_names.append(owner[0] if owner else f"_{a}")
    all_nests = nest_names + [n for n in nest_of_names if n not in nest_names]
    nest_of = np.array([all_nests.index(n) for n in nest_of_names], dtype=np.intp)
    lam = -np.ones((S, len(all_nests)), dtype=np.intp)
    for m_i, m in enumerate(nest_names):
        for k in range(1, S + 1):
            lam[k - 1, m_i] = pidx(spec.nests[m].lam, k)

    utility = UtilitySpec(alts, {a: tuple(ts) for a, ts in terms_by_alt.items()})
    return CompiledModel(
        spec=spec,
        schema=schema,
        param_names=tuple(names),
        start_values=np.array(start, dtype=float),
        free=free,
        coef_names=tuple(coef_names),
        links=tuple(links),
        terms=tuple(raw_terms),
        dims=tuple(dims),
        nest_of=nest_of,
        lambda_params=lam,
        alloc_params=alloc,
        alloc_cols=tuple(alloc_cols),
        utility=utility,
    )
