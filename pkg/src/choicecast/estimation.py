"""Maximum (simulated) likelihood estimation, covariance matrices and fit statistics."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.optimize import minimize
from scipy.stats import chi2

from .data import ChoiceDataset
from .likelihood import Engine, NumericalError, class_allocation_probs
from .mixing import NORMAL, RANDOM_KINDS
from .model import CompiledModel, ModelSpec, compile_model

log = logging.getLogger(__name__)


@dataclass
class EstimateOptions:
    start: dict[str, float] = field(default_factory=dict)
    n_draws: int = 500
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 500
    threads: int | None = None
    null_ll: float | None = None
    covariance: bool = True


@dataclass
class EstimationResult:
    spec: ModelSpec
    param_names: tuple[str, ...]
    estimates: np.ndarray
    free: np.ndarray
    ll: float
    gradient_norm: float
    iterations: int
    converged: bool
    message: str
    n_obs: int
    n_individuals: int
    null_ll: float
    n_draws: int | None = None
    seed: int | None = None
    cov_classical: np.ndarray | None = None
    cov_robust: np.ndarray | None = None
    flagged: int = 0

    @property
    def k(self) -> int:
        return int(self.free.sum())

    @property
    def free_names(self) -> list[str]:
        return [n for n, f in zip(self.param_names, self.free) if f]

    @property
    def bic(self) -> float:
        return bic(self.ll, self.k, self.n_obs)

    @property
    def adj_rho2(self) -> float:
        return adjusted_rho2(self.ll, self.k, self.null_ll)

    def params(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.param_names, self.estimates)}

    def _se(self, cov):
        out = np.full(len(self.param_names), np.nan)
        if cov is not None:
            out[self.free] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        return out

    @property
    def se(self) -> np.ndarray:
        return self._se(self.cov_classical)

    @property
    def robust_se(self) -> np.ndarray:
        return self._se(self.cov_robust)

    @property
    def robust_t(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.estimates / self.robust_se

    def reported(self) -> np.ndarray:
        """Estimates in canonical sign.

        A normal spread is shown as its magnitude; a log-uniform pair with
        negative width ``b`` is shown as the equivalent ``(a + b, -b)``.
        """
        out = self.estimates.copy()
        for kind, i_loc, i_spread in _spread_pairs(self.spec, self.param_names):
            if kind == NORMAL:
                out[i_spread] = abs(out[i_spread])
            elif out[i_spread] < 0:
                out[i_loc] += out[i_spread]
                out[i_spread] = -out[i_spread]
        return out

    def to_dict(self) -> dict[str, Any]:
        se, rse = self.se, self.robust_se
        rep = self.reported()
        rows = []
        for i, name in enumerate(self.param_names):
            row = {"name": name, "estimate": float(self.estimates[i]), "reported": float(rep[i]),
                   "fixed": not bool(self.free[i])}
            if self.free[i] and self.cov_robust is not None:
                row.update(se=_num(se[i]), t_ratio=_ratio(self.estimates[i], se[i]),
                           rob_se=_num(rse[i]), rob_t_ratio=_ratio(self.estimates[i], rse[i]))
            rows.append(row)
        out = {
            "model": self.spec.to_dict(),
            "parameters": rows,
            "fit": {
                "ll": self.ll,
                "k": self.k,
                "n_obs": self.n_obs,
                "n_individuals": self.n_individuals,
                "null_ll": self.null_ll,
                "bic": self.bic,
                "adj_rho2": self.adj_rho2,
            },
            "convergence": {
                "converged": bool(self.converged),
                "gradient_norm": self.gradient_norm,
                "iterations": self.iterations,
                "message": self.message,
                "flagged_observations": self.flagged,
            },
            "simulation": {"draws": self.n_draws, "seed": self.seed},
        }
        if self.cov_robust is not None:
            out["covariance"] = {
                "names": self.free_names,
                "classical": self.cov_classical.tolist(),
                "robust": self.cov_robust.tolist(),
            }
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EstimationResult":
        rows = d["parameters"]
        cov = d.get("covariance")
        fit, conv, sim = d["fit"], d["convergence"], d.get("simulation", {})
        return cls(
            spec=ModelSpec.from_dict(d["model"]),
            param_names=tuple(r["name"] for r in rows),
            estimates=np.array([r["estimate"] for r in rows], dtype=float),
            free=np.array([not r["fixed"] for r in rows], dtype=bool),
            ll=float(fit["ll"]),
            gradient_norm=float(conv["gradient_norm"]),
            iterations=int(conv["iterations"]),
            converged=bool(conv["converged"]),
            message=str(conv.get("message", "")),
            n_obs=int(fit["n_obs"]),
            n_individuals=int(fit["n_individuals"]),
            null_ll=float(fit["null_ll"]),
            n_draws=sim.get("draws"),
            seed=sim.get("seed"),
            cov_classical=None if cov is None else np.array(cov["classical"], dtype=float),
            cov_robust=None if cov is None else np.array(cov["robust"], dtype=float),
            flagged=int(conv.get("flagged_observations", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "EstimationResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def table(self) -> str:
        """Plain-text parameter table: estimate and robust t-ratio against zero."""
        rep = self.reported()
        t = self.robust_t
        width = max(len(n) for n in self.param_names)
        lines = [f"Model: {self.spec.name}",
                 f"{'':{width}}  {'estimate':>11}  {'rob.t-rat.(0)':>13}"]
        for i, name in enumerate(self.param_names):
            tr = "fixed" if not self.free[i] else ("" if not np.isfinite(t[i]) else f"{t[i]:.2f}")
            lines.append(f"{name:{width}}  {rep[i]:11.4f}  {tr:>13}")
        lines += [
            "",
            f"LL              {self.ll:.2f}",
            f"parameters      {self.k}",
            f"observations    {self.n_obs}",
            f"individuals     {self.n_individuals}",
            f"null LL         {self.null_ll:.2f}",
            f"adj. rho2       {self.adj_rho2:.4f}",
            f"BIC             {self.bic:.2f}",
            f"converged       {str(self.converged).lower()} ({self.iterations} iterations, "
            f"max |gradient| {self.gradient_norm:.2e})",
        ]
        if self.n_draws:
            lines.append(f"draws           {self.n_draws} MLHS, seed {self.seed}")
        return "\n".join(lines) + "\n"


def _num(v) -> float | None:
    v = float(v)
    return v if math.isfinite(v) else None


def _ratio(est, se) -> float | None:
    return _num(est / se) if se > 0 else None


def _spread_pairs(spec: ModelSpec, names) -> list[tuple[str, int, int]]:
    """(kind, location index, spread index) for every random coefficient copy."""
    index = {n: i for i, n in enumerate(names)}
    out = []
    for cd in spec.coefficients.values():
        if cd.dist not in RANDOM_KINDS:
            continue
        loc, spread = cd.params[:2]
        for suffix in [""] + [f"_class{k}" for k in range(1, spec.classes + 1)]:
            if loc + suffix in index and spread + suffix in index:
                out.append((cd.dist, index[loc + suffix], index[spread + suffix]))
    return out


# -- fit statistics ----------------------------------------------------------
def bic(ll: float, k: int, n_obs: int) -> float:
    return k * math.log(n_obs) - 2.0 * ll


def adjusted_rho2(ll: float, k: int, null_ll: float) -> float:
    if null_ll >= 0:
        raise ValueError("null log-likelihood must be negative")
    return 1.0 - (ll - k) / null_ll


def equal_share_null_ll(ds: ChoiceDataset) -> float:
    """Log-likelihood of equal probabilities among available alternatives."""
    return float(-np.sum(np.log(ds.arrays.avail.sum(axis=1))))


@dataclass(frozen=True)
class FitStats:
    ll: float
    k: int
    n_obs: int
    null_ll: float
    bic: float
    adj_rho2: float


def fit_stats(result: EstimationResult, null_ll: float | None = None) -> FitStats:
    null = result.null_ll if null_ll is None else null_ll
    return FitStats(result.ll, result.k, result.n_obs, null,
                    bic(result.ll, result.k, result.n_obs), adjusted_rho2(result.ll, result.k, null))


@dataclass(frozen=True)
class LRTest:
    statistic: float
    df: int
    p_value: float

    def rejects(self, alpha: float) -> bool:
        return self.p_value < alpha


def lr_test(restricted, general) -> LRTest:
    """Likelihood ratio test; arguments are results or ``(ll, k)`` pairs."""
    ll_r, k_r = (restricted.ll, restricted.k) if isinstance(restricted, EstimationResult) else restricted
    ll_g, k_g = (general.ll, general.k) if isinstance(general, EstimationResult) else general
    stat = 2.0 * (ll_g - ll_r)
    df = int(k_g - k_r)
    if df <= 0:
        raise ValueError("general model must have more parameters than the restricted one")
    if stat < 0:
        raise ValueError("negative LR statistic: models not nested or not converged")
    return LRTest(stat, df, float(chi2.sf(stat, df)))


# -- gradient, Hessian, covariance --------------------------------------------
def _engine(spec, ds: ChoiceDataset, opts: EstimateOptions) -> Engine:
    model = spec if isinstance(spec, CompiledModel) else compile_model(spec, ds.schema)
    return Engine(model, ds.arrays, n_draws=opts.n_draws, seed=opts.seed, threads=opts.threads)


def gradient(spec, params, ds: ChoiceDataset, method: str = "numeric",
             options: EstimateOptions | None = None) -> np.ndarray:
    """Gradient of the log-likelihood over the free parameters.

    ``numeric`` uses central differences with h = 1e-5 * max(1, |theta|);
    ``analytic`` uses the closed-form scores.
    """
    eng = _engine(spec, ds, options or EstimateOptions())
    model = eng.model
    theta = model.parameters(params).values if isinstance(params, dict) else np.asarray(params, dtype=float)
    if method == "analytic":
        G = eng.scores(theta)[1]
    elif method == "numeric":
        G = eng.numeric_scores(theta)
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    return G.sum(axis=0)[model.free]


def numerical_hessian(eng: Engine, theta: np.ndarray, free: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the analytic gradient over the free parameters."""
    idx = np.flatnonzero(free)
    H = np.zeros((len(idx), len(idx)))
    for c, i in enumerate(idx):
        h = step * max(1.0, abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        gu = eng.scores(up)[1].sum(axis=0)[idx]
        gd = eng.scores(dn)[1].sum(axis=0)[idx]
        H[:, c] = (gu - gd) / (2 * h)
    return 0.5 * (H + H.T)


def sandwich(H: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Classical (-H)^-1 and robust (-H)^-1 B (-H)^-1 with B = sum_n g_n g_n'."""
    A = -np.asarray(H, dtype=float)
    try:
        if np.linalg.cond(A) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        warnings.warn("singular Hessian; using the pseudo-inverse")
        inv = np.linalg.pinv(A)
    inv = 0.5 * (inv + inv.T)
    Bmat = scores.T @ scores
    robust = inv @ Bmat @ inv
    return inv, 0.5 * (robust + robust.T)


def covariance(spec, result: EstimationResult, ds: ChoiceDataset,
               options: EstimateOptions | None = None) -> tuple[np.ndarray, np.ndarray]:
    opts = options or EstimateOptions(n_draws=result.n_draws or 500, seed=result.seed or 0)
    eng = _engine(spec, ds, opts)
    theta = eng.model.parameters(result.params()).values
    H = numerical_hessian(eng, theta, result.free)
    G = eng.scores(theta)[1][:, result.free]
    return sandwich(H, G)


# -- estimation --------------------------------------------------------------
def _relabel_classes(model: CompiledModel, theta: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Reorder latent classes by descending average membership probability."""
    S = model.n_classes
    share = class_allocation_probs(model, theta, z).mean(axis=0)
    perm = np.argsort(-share, kind="stable")
    if np.array_equal(perm, np.arange(S)):
        return theta
    out = theta.copy()
    index = {n: i for i, n in enumerate(model.param_names)}
    for i, name in enumerate(model.param_names):
        k = model.class_of(name)
        if k is None or name.startswith("delta_class"):
            continue
        base = name.rsplit("_class", 1)[0]
        out[i] = theta[index[f"{base}_class{perm[k - 1] + 1}"]]
    # allocation coefficients, renormalised to the new first class
    def alloc(k, col):
        return 0.0 if k == 0 else theta[model.alloc_params[k, col]]
    for s in range(1, S):
        for col in range(model.alloc_params.shape[1]):
            out[model.alloc_params[s, col]] = alloc(perm[s], col) - alloc(perm[0], col)
    return out


def maximize_ll(spec, ds: ChoiceDataset, options: EstimateOptions | None = None) -> EstimationResult:
    """BFGS ascent on the (simulated) log-likelihood with draws held fixed.

    Converged when the largest absolute gradient entry falls below
    ``tol * sqrt(N_obs)``.
    """
    opts = options or EstimateOptions()
    eng = _engine(spec, ds, opts)
    model = eng.model
    theta0 = model.parameters(opts.start).values
    free = model.free
    n_obs = ds.n_obs
    threshold = opts.tol * math.sqrt(n_obs)

    ll0 = eng.loglik(theta0)
    if not math.isfinite(ll0):
        raise NumericalError("log-likelihood is not finite at the start values")

    cache: dict[bytes, tuple[float, np.ndarray]] = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in cache:
            theta = theta0.copy()
            theta[free] = x
            try:
                lnl, G = eng.scores(theta)
                val = float(np.sum(lnl))
                grad = G.sum(axis=0)[free]
            except NumericalError:
                val, grad = -np.inf, np.zeros(int(free.sum()))
            if not math.isfinite(val):
                val, grad = -1e300, np.zeros(int(free.sum()))
            cache.clear()
            cache[key] = (val, grad)
        return cache[key]

    def fun(x):
        return -evaluate(x)[0] / n_obs

    def jac(x):
        return -evaluate(x)[1] / n_obs

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(fun, theta0[free], jac=jac, method="BFGS",
                       options={"gtol": threshold / n_obs, "maxiter": opts.max_iter, "norm": np.inf})
    theta = theta0.copy()
    theta[free] = res.x
    iterations = int(res.nit)

    # BFGS may stop on line-search precision loss short of the gradient target;
    # finish with a few Newton steps on the numerical Hessian.
    grad = evaluate(res.x)[1]
    newton = 0
    while np.max(np.abs(grad)) >= threshold and newton < 10 and iterations < opts.max_iter:
        H = numerical_hessian(eng, theta, free)
        try:
            step = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError:
            break
        ll_old = evaluate(theta[free])[0]
        t = 1.0
        while t > 1e-4:
            cand = theta[free] + t * step
            if evaluate(cand)[0] >= ll_old - 1e-9:
                break
            t *= 0.5
        else:
            break
        theta[free] = cand
        grad = evaluate(cand)[1]
        newton += 1
        iterations += 1

    if model.n_classes > 1:
        theta = _relabel_classes(model, theta, ds.arrays.z)
    lnl, G = eng.scores(theta)
    ll = float(np.sum(lnl))
    gfree = G.sum(axis=0)[free]
    gnorm = float(np.max(np.abs(gfree))) if gfree.size else 0.0
    converged = gnorm < threshold
    message = str(res.message) + (f"; {newton} Newton step(s)" if newton else "")
    if not converged:
        log.warning("%s: not converged (max |gradient| %.3g)", model.spec.name, gnorm)

    result = EstimationResult(
        spec=model.spec,
        param_names=model.param_names,
        estimates=theta,
        free=free.copy(),
        ll=ll,
        gradient_norm=gnorm,
        iterations=iterations,
        converged=bool(converged),
        message=message,
        n_obs=n_obs,
        n_individuals=ds.n_individuals,
        null_ll=opts.null_ll if opts.null_ll is not None else equal_share_null_ll(ds),
        n_draws=opts.n_draws if model.is_mixed else None,
        seed=opts.seed if model.is_mixed else None,
        flagged=eng.flagged(theta),
    )
    if opts.covariance:
        H = numerical_hessian(eng, theta, free)
        result.cov_classical, result.cov_robust = sandwich(H, G[:, free])
    return result
