"""Mixing distributions and MLHS simulation draws."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np
from scipy.special import ndtri

FIXED = "fixed"
NORMAL = "normal"
NEG_LOG_UNIFORM = "neglogunif"
POS_LOG_UNIFORM = "poslogunif"
KINDS = (FIXED, NORMAL, NEG_LOG_UNIFORM, POS_LOG_UNIFORM)
RANDOM_KINDS = (NORMAL, NEG_LOG_UNIFORM, POS_LOG_UNIFORM)


@dataclass(frozen=True)
class MixingSpec:
    """Distribution of one coefficient.

    ``params`` holds ``(value,)`` for fixed, ``(mu, sigma)`` for normal and
    ``(a, b)`` for the log-uniform kinds, where the coefficient is
    ``-exp(a + b * xi)`` (negative) or ``exp(a + b * xi)`` (positive).
    Coefficients with the same ``shared_base_id`` consume the same uniform draw.
    """

    kind: str
    params: tuple[float, ...]
    shared_base_id: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mixing kind {self.kind!r}")
        want = 1 if self.kind == FIXED else 2
        if len(self.params) != want:
            raise ValueError(f"{self.kind} takes {want} parameter(s)")

    @property
    def is_random(self) -> bool:
        return self.kind != FIXED


def _key_entropy(key: Hashable) -> list[int]:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return [0, int(key)]
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return [1, int.from_bytes(digest, "little")]


def mlhs_block(seed: int, key: Hashable, dim: int, n_draws: int) -> np.ndarray:
    """MLHS draws for one (individual, dimension) pair.

    A lattice ``{0, 1/R, ..., (R-1)/R}`` shifted by one uniform offset in
    ``(0, 1/R)`` and randomly permuted.  Depends only on (seed, key, dim).
    """
    rng = np.random.default_rng([int(seed), *_key_entropy(key), int(dim)])
    shift = 0.0
    while shift == 0.0:
        shift = rng.random() / n_draws
    values = np.arange(n_draws) / n_draws + shift
    rng.shuffle(values)
    return values


@dataclass(frozen=True)
class DrawMatrix:
    """Uniform base draws, shape (individual, draw, dimension)."""

    base: np.ndarray
    keys: tuple
    seed: int
    dims: tuple[str, ...] = ()

    @property
    def n_draws(self) -> int:
        return self.base.shape[1]

    @cached_property
    def normal(self) -> np.ndarray:
        return ndtri(self.base)

    @cached_property
    def _row(self) -> dict:
        return {k: i for i, k in enumerate(self.keys)}

    def rows(self, keys: Sequence[Hashable]) -> np.ndarray:
        return np.array([self._row[k] for k in keys], dtype=np.intp)


def mlhs_draws(
    n_individuals: int,
    n_dims: int,
    n_draws: int,
    seed: int,
    keys: Sequence[Hashable] | None = None,
    dims: Sequence[str] = (),
) -> DrawMatrix:
    """Generate an MLHS draw matrix.

    Each individual is identified by ``keys`` (defaults to its index); its
    block is the same whether generated alone or in a batch.
    """
    if n_individuals < 1 or n_draws < 1 or n_dims < 0:
        raise ValueError("need at least one individual and one draw")
    if keys is None:
        keys = range(n_individuals)
    keys = tuple(keys)
    if len(keys) != n_individuals:
        raise ValueError("one key per individual required")
    base = np.empty((n_individuals, n_draws, n_dims))
    for n, key in enumerate(keys):
        for d in range(n_dims):
            base[n, :, d] = mlhs_block(seed, key, d, n_draws)
    return DrawMatrix(base, keys, seed, tuple(dims))


def transform(kind: str, params: Sequence, xi, z=None):
    """Vectorised draw transform; ``z`` may carry a precomputed ``ndtri(xi)``."""
    if kind == FIXED:
        return params[0] + 0.0 * np.asarray(xi)
    p, q = params
    if kind == NORMAL:
        return p + q * (ndtri(xi) if z is None else z)
    if kind == NEG_LOG_UNIFORM:
        return -np.exp(p + q * xi)
    if kind == POS_LOG_UNIFORM:
        return np.exp(p + q * xi)
    raise ValueError(f"unknown mixing kind {kind!r}")


def transform_draw(spec: MixingSpec, xi: float) -> float:
    """Map one uniform draw to a coefficient value.

    The normal inverse CDF needs ``xi`` strictly inside (0, 1); the log-uniform
    kinds are defined on the closed unit interval.
    """
    closed = spec.kind in (NEG_LOG_UNIFORM, POS_LOG_UNIFORM)
    if not (0.0 <= xi <= 1.0 if closed else 0.0 < xi < 1.0):
        raise ValueError(f"draw {xi} outside the support of a {spec.kind} transform")
    if spec.kind == FIXED:
        return float(spec.params[0])
    return float(transform(spec.kind, spec.params, xi))


def mixture_mean(spec: MixingSpec) -> float:
    if spec.kind == FIXED:
        return float(spec.params[0])
    if spec.kind == NORMAL:
        return float(spec.params[0])
    a, b = spec.params
    sign = -1.0 if spec.kind == NEG_LOG_UNIFORM else 1.0
    if b == 0.0:
        return sign * float(np.exp(a))
    return sign * float(np.exp(a) * np.expm1(b) / b)
