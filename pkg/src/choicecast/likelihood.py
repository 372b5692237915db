"""Log-likelihood of plain, panel mixed logit and latent class models.

Every model is evaluated as a finite mixture over support points ``k``: the
R simulation draws of a continuous mixture (weight 1/R each), the S classes
of a latent class model (weights pi_ns) or a single point for models without
random heterogeneity.  For individual n

    ln L_n = logsumexp_k( ln w_nk + sum_t ln P_{Y_nt}(beta_nk) ),

with the per-person sequence likelihood accumulated as a sum of logs.
Scores are analytic; ``numeric_scores`` gives the finite-difference check.
"""
from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import ChoiceDataset, PanelArrays
from .kernels import ATTRIBUTE, CONST, ModelError, nl_parts
from .mixing import FIXED, NEG_LOG_UNIFORM, NORMAL, POS_LOG_UNIFORM, DrawMatrix, mlhs_draws, transform
from .model import CompiledModel, ModelSpec, ParameterVector, compile_model

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300
LOG_FLOOR = float(np.log(PROB_FLOOR))
THREADS_ENV = "CHOICECAST_THREADS"
DEFAULT_CHUNK = 1_500_000


class NumericalError(ArithmeticError):
    """Raised when a likelihood cannot be evaluated."""


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _log_softmax(eta: np.ndarray) -> np.ndarray:
    m = eta.max(axis=-1, keepdims=True)
    return eta - (m + np.log(np.exp(eta - m).sum(axis=-1, keepdims=True)))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def class_allocation_probs(model: CompiledModel, theta: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Class membership probabilities, shape (N, S); logit in covariates, class 1 base."""
    return np.exp(_class_logprobs(model, np.asarray(theta, dtype=float), np.atleast_2d(z)))


def _class_logprobs(model: CompiledModel, theta: np.ndarray, z: np.ndarray) -> np.ndarray:
    S = model.n_classes
    eta = np.zeros((z.shape[0], S))
    for s in range(1, S):
        idx = model.alloc_params[s]
        eta[:, s] = theta[idx[0]]
        for i, col in enumerate(model.alloc_cols, start=1):
            eta[:, s] += theta[idx[i]] * z[:, col]
    return _log_softmax(eta)


@dataclass
class ChunkResult:
    lnl: np.ndarray  # (n,)
    ell: np.ndarray  # (n, K) sum_t ln P(chosen) per support point
    logw: np.ndarray  # (n, K)
    grad: np.ndarray | None  # (n, P)
    flagged: int


class Engine:
    """Likelihood machinery for one compiled model on one panel.

    Draws are keyed by individual id so the same person always receives the
    same simulated coefficients, whichever dataset they appear in.
    """

    def __init__(
        self,
        model: CompiledModel,
        arrays: PanelArrays,
        draws: DrawMatrix | None = None,
        n_draws: int = 500,
        seed: int = 0,
        threads: int | None = None,
        chunk_elems: int = DEFAULT_CHUNK,
    ):
        if not model.spec.panel:
            arrays = _cross_sectional(arrays)
        self.model = model
        self.arrays = arrays
        self.threads = threads or default_threads()
        self.J = len(model.schema.alternatives)
        if model.is_mixed:
            if draws is None:
                draws = mlhs_draws(arrays.n_individuals, len(model.dims), n_draws, seed,
                                   keys=arrays.ids, dims=model.dims)
            if draws.base.shape[2] < len(model.dims):
                raise ModelError("draw matrix does not cover every random dimension")
            rows = draws.rows(arrays.ids)
            self.xi = draws.base[rows]
            self.z = draws.normal[rows]
            self.K = draws.n_draws
        else:
            self.xi = self.z = None
            self.K = model.n_classes
        self.draws = draws
        self.chunks = self._make_chunks(chunk_elems)
        self.n_params = len(model.param_names)

    def _make_chunks(self, chunk_elems: int) -> list[tuple[int, int]]:
        a = self.arrays
        per_row = self.K * self.J
        chunks, n0 = [], 0
        N = a.n_individuals
        while n0 < N:
            n1 = n0 + 1
            while n1 < N and (a.start[n1 + 1] - a.start[n0]) * per_row <= chunk_elems:
                n1 += 1
            chunks.append((n0, n1))
            n0 = n1
        return chunks

    # -- building blocks -------------------------------------------------
    def coef_tensor(self, theta: np.ndarray, n0: int, n1: int):
        """Coefficient values (n or 1, K, Q) plus per-link derivative factors."""
        m = self.model
        Q = len(m.coef_names)
        nb = n1 - n0 if m.is_mixed else 1
        B = np.zeros((nb, self.K, Q))
        for link in m.links:
            ks = slice(None) if link.k is None else slice(link.k, link.k + 1)
            p = theta[list(link.params)]
            if link.dist == FIXED:
                B[:, ks, link.q] = p[0]
            elif link.dist == NORMAL:
                B[:, :, link.q] = p[0] + p[1] * self.z[n0:n1, :, link.dim]
            elif link.dist == NEG_LOG_UNIFORM:
                B[:, :, link.q] = -np.exp(p[0] + p[1] * self.xi[n0:n1, :, link.dim])
            elif link.dist == POS_LOG_UNIFORM:
                B[:, :, link.q] = np.exp(p[0] + p[1] * self.xi[n0:n1, :, link.dim])
        return B

    def _term_values(self, r0: int, r1: int, ind_local: np.ndarray) -> list[np.ndarray]:
        a = self.arrays
        out = []
        for t in self.model.terms:
            if t.kind == CONST:
                out.append(np.ones(r1 - r0))
            elif t.kind == ATTRIBUTE:
                out.append(a.x[r0:r1, t.j, t.col])
            else:
                out.append(a.z[a.ind[r0:r1], t.col])
        return out

    def utilities(self, B: np.ndarray, n0: int, n1: int) -> np.ndarray:
        a = self.arrays
        r0, r1 = a.start[n0], a.start[n1]
        ind_local = a.ind[r0:r1] - n0
        V = np.zeros((r1 - r0, B.shape[1], self.J))
        mixed = B.shape[0] > 1 or self.model.is_mixed
        for t, x in zip(self.model.terms, self._term_values(r0, r1, ind_local)):
            coef = B[ind_local, :, t.q] if mixed else B[0, :, t.q][None, :]
            V[:, :, t.j] += coef * x[:, None]
        return V

    def lambdas(self, theta: np.ndarray) -> np.ndarray:
        lp = self.model.lambda_params
        lam = np.where(lp >= 0, theta[np.maximum(lp, 0)], 1.0)
        if np.any(lam <= 0):
            raise NumericalError("nesting parameter must be positive")
        return lam  # (S, M)

    def logw(self, theta: np.ndarray, n0: int, n1: int) -> np.ndarray:
        m = self.model
        if m.is_mixed:
            return np.full((n1 - n0, self.K), -np.log(self.K))
        if m.n_classes > 1:
            return _class_logprobs(m, theta, self.arrays.z[n0:n1])
        return np.zeros((n1 - n0, 1))

    def kernel(self, V: np.ndarray, avail: np.ndarray, theta: np.ndarray):
        """Log probabilities (o, K, J) and, for NL, the intermediate parts."""
        if self.model.is_nested:
            lam = self.lambdas(theta)
            parts = nl_parts(V, self.model.nest_of, lam[None, :, :], avail[:, None, :])
            return parts.logp, parts
        Vm = np.where(avail[:, None, :], V, -np.inf)
        return Vm - _logsumexp(Vm, axis=2)[..., None], None

    # -- evaluation ------------------------------------------------------
    def _chunk(self, theta: np.ndarray, n0: int, n1: int, want_grad: bool) -> ChunkResult:
        a = self.arrays
        r0, r1 = a.start[n0], a.start[n1]
        B = self.coef_tensor(theta, n0, n1)
        V = self.utilities(B, n0, n1)
        avail = a.avail[r0:r1]
        chosen = a.chosen[r0:r1]
        logp, parts = self.kernel(V, avail, theta)
        rows = np.arange(r1 - r0)
        lp = logp[rows, :, chosen]
        low = lp < LOG_FLOOR
        flagged = int(np.count_nonzero(low.any(axis=1)))
        if flagged:
            lp = np.maximum(lp, LOG_FLOOR)
        seg = a.start[n0:n1] - r0
        ell = np.add.reduceat(lp, seg, axis=0)
        logw = self.logw(theta, n0, n1)
        lnl = _logsumexp(logw + ell, axis=1)
        bad = ~np.isfinite(lnl)
        if np.any(bad):
            who = a.ids[n0 + int(np.argmax(bad))]
            raise NumericalError(f"likelihood underflow for every support point of individual {who!r}")
        grad = None
        if want_grad:
            grad = self._gradient(theta, B, V, logp, parts, lp, low, chosen, avail, seg, logw, ell, lnl, n0, n1)
        return ChunkResult(lnl, ell, logw, grad, flagged)

    def _gradient(self, theta, B, V, logp, parts, lp, low, chosen, avail, seg, logw, ell, lnl, n0, n1):
        a, m = self.arrays, self.model
        r0, r1 = a.start[n0], a.start[n1]
        n = n1 - n0
        post = np.exp(logw + ell - lnl[:, None])  # (n, K)
        P = np.exp(logp)
        rows = np.arange(r1 - r0)
        # d ln P(chosen) / d V_j
        if parts is None:
            SV = -P
            SV[rows, :, chosen] += 1.0
        else:
            nest_c = m.nest_of[chosen]
            in_nest = (m.nest_of[None, :] == nest_c[:, None])[:, None, :]
            lam_c = parts.lam_alt[rows, :, chosen]
            SV = np.where(in_nest, parts.cond * (1.0 - 1.0 / lam_c[..., None]), 0.0) - P
            SV[rows, :, chosen] += 1.0 / lam_c
        SV[low] = 0.0  # floored observations carry no gradient

        g = np.zeros((n, self.n_params))
        ind_local = a.ind[r0:r1] - n0
        Q = len(m.coef_names)
        Cq = [None] * Q
        for t, x in zip(m.terms, self._term_values(r0, r1, ind_local)):
            contrib = SV[:, :, t.j] * x[:, None]
            Cq[t.q] = contrib if Cq[t.q] is None else Cq[t.q] + contrib
        for link in m.links:
            if Cq[link.q] is None:
                continue
            Cn = np.add.reduceat(Cq[link.q], seg, axis=0)  # (n, K)
            w = post * Cn
            if link.dist == FIXED:
                if link.k is None:
                    g[:, link.params[0]] += w.sum(axis=1)
                else:
                    g[:, link.params[0]] += w[:, link.k]
            elif link.dist == NORMAL:
                g[:, link.params[0]] += w.sum(axis=1)
                g[:, link.params[1]] += (w * self.z[n0:n1, :, link.dim]).sum(axis=1)
            else:
                wb = w * B[:, :, link.q]
                g[:, link.params[0]] += wb.sum(axis=1)
                g[:, link.params[1]] += (wb * self.xi[n0:n1, :, link.dim]).sum(axis=1)

        if parts is not None:
            lam = self.lambdas(theta)
            M = lam.shape[1]
            nest_c = m.nest_of[chosen]
            Vc = V[rows, :, chosen]
            for mi in range(M):
                if not np.any(m.lambda_params[:, mi] >= 0):
                    continue
                members = m.nest_of == mi
                lam_m = lam[None, :, mi]
                vbar = np.where(avail[:, None, members], parts.cond[:, :, members] * V[:, :, members], 0.0).sum(axis=2)
                inc = parts.inclusive[:, :, mi]
                pm = parts.nest_prob[:, :, mi]
                D = np.where(np.isfinite(inc), inc - vbar / lam_m, 0.0)
                d = -pm * D
                own = nest_c == mi
                d[own] += ((vbar - Vc) / lam_m ** 2 + D)[own]
                d[low] = 0.0
                Dn = post * np.add.reduceat(d, seg, axis=0)
                for k in range(m.n_classes):
                    p = m.lambda_params[k, mi]
                    if p >= 0:
                        g[:, p] += Dn[:, k] if m.n_classes > 1 else Dn.sum(axis=1)

        if m.n_classes > 1:
            prior = np.exp(logw)
            z = a.z[n0:n1]
            for s in range(1, m.n_classes):
                idx = m.alloc_params[s]
                diff = post[:, s] - prior[:, s]
                g[:, idx[0]] += diff
                for i, col in enumerate(m.alloc_cols, start=1):
                    g[:, idx[i]] += z[:, col] * diff
        return g

    def run(self, theta, want_grad: bool = False) -> list[ChunkResult]:
        theta = np.asarray(theta, dtype=float)
        jobs = [(theta, n0, n1, want_grad) for n0, n1 in self.chunks]
        if self.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(lambda j: self._chunk(*j), jobs))
        return [self._chunk(*j) for j in jobs]

    def contributions(self, theta) -> np.ndarray:
        """ln L_n for every individual."""
        return np.concatenate([c.lnl for c in self.run(theta)])

    def loglik(self, theta) -> float:
        # fixed summation order over individuals, independent of chunking
        return float(np.sum(self.contributions(theta)))

    def scores(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """(ln L_n, d ln L_n / d theta) over all parameters, free and fixed."""
        res = self.run(theta, want_grad=True)
        flagged = sum(c.flagged for c in res)
        if flagged:
            log.warning("%d observation(s) with chosen probability below %g", flagged, PROB_FLOOR)
        return np.concatenate([c.lnl for c in res]), np.concatenate([c.grad for c in res])

    def flagged(self, theta) -> int:
        return sum(c.flagged for c in self.run(theta))

    def sequence_loglik(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """(ell, ln w): per-support-point history log-likelihood and log prior weights."""
        res = self.run(theta)
        return np.concatenate([c.ell for c in res]), np.concatenate([c.logw for c in res])

    def support_probs(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Choice probabilities (O, K, J) at every support point and log weights (N, K)."""
        theta = np.asarray(theta, dtype=float)
        probs, logws = [], []
        for n0, n1 in self.chunks:
            r0, r1 = self.arrays.start[n0], self.arrays.start[n1]
            V = self.utilities(self.coef_tensor(theta, n0, n1), n0, n1)
            logp, _ = self.kernel(V, self.arrays.avail[r0:r1], theta)
            probs.append(np.exp(logp))
            logws.append(self.logw(theta, n0, n1))
        return np.concatenate(probs), np.concatenate(logws)

    def numeric_scores(self, theta, step: float = 1e-5) -> np.ndarray:
        """Central finite-difference scores, h = step * max(1, |theta_i|)."""
        theta = np.asarray(theta, dtype=float)
        G = np.zeros((self.arrays.n_individuals, self.n_params))
        for i in range(self.n_params):
            h = step * max(1.0, abs(theta[i]))
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fu, fd = self.contributions(up), self.contributions(dn)
            if not (np.all(np.isfinite(fu)) and np.all(np.isfinite(fd))):
                raise NumericalError(f"non-finite likelihood when perturbing {self.model.param_names[i]!r}")
            G[:, i] = (fu - fd) / (2 * h)
        return G


def _cross_sectional(a: PanelArrays) -> PanelArrays:
    """Treat every observation as its own person (mixing per choice)."""
    O = a.n_obs
    ids = tuple(f"{a.ids[a.ind[o]]}#{a.task[o]}" for o in range(O))
    return PanelArrays(ids, np.arange(O), a.task, a.avail, a.x, a.chosen, a.z[a.ind],
                       np.arange(O + 1))


# -- convenience wrappers --------------------------------------------------
def _resolve(spec, ds: ChoiceDataset) -> CompiledModel:
    if isinstance(spec, CompiledModel):
        return spec
    if isinstance(spec, ModelSpec):
        return compile_model(spec, ds.schema)
    raise TypeError("expected a ModelSpec or CompiledModel")


def _theta(model: CompiledModel, params) -> np.ndarray:
    if isinstance(params, ParameterVector):
        if tuple(params.names) != model.param_names:
            params = model.parameters(params.as_dict())
        return params.values
    if params is None:
        return model.start_values.copy()
    if isinstance(params, dict):
        return model.parameters(params).values
    return np.asarray(params, dtype=float)


def ll_plain(spec, params, ds: ChoiceDataset) -> float:
    """Sum over observations of ln P(chosen) for a model without random heterogeneity."""
    model = _resolve(spec, ds)
    if model.is_mixed or model.n_classes > 1:
        raise ModelError("ll_plain needs a model without random heterogeneity")
    eng = Engine(model, ds.arrays)
    theta = _theta(model, params)
    flagged = eng.flagged(theta)
    if flagged:
        warnings.warn(f"{flagged} observation(s) hit the probability floor")
    return eng.loglik(theta)


def ll_mixed(spec, params, ds: ChoiceDataset, draws: DrawMatrix | None = None,
             n_draws: int = 500, seed: int = 0, threads: int | None = None) -> float:
    """Simulated panel log-likelihood of a continuous mixture."""
    model = _resolve(spec, ds)
    if not model.is_mixed:
        raise ModelError("ll_mixed needs at least one random coefficient")
    return Engine(model, ds.arrays, draws, n_draws, seed, threads).loglik(_theta(model, params))


def ll_lc(spec, params, ds: ChoiceDataset, threads: int | None = None) -> float:
    """Latent class log-likelihood."""
    model = _resolve(spec, ds)
    if model.is_mixed:
        raise ModelError("ll_lc does not handle continuous mixing")
    return Engine(model, ds.arrays, threads=threads).loglik(_theta(model, params))


def coefficients_at(model: CompiledModel, theta, xi: np.ndarray | None, classes: np.ndarray | None,
                    n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-person coefficients (n, Q) and nesting parameters (n, M).

    ``xi`` holds each person's uniform base draws (n, D) for continuous
    mixtures; ``classes`` their 0-based class for latent class models.
    """
    theta = np.asarray(theta, dtype=float)
    Q = len(model.coef_names)
    cls = np.zeros(n, dtype=np.intp) if classes is None else np.asarray(classes, dtype=np.intp)
    B = np.zeros((n, Q))
    for link in model.links:
        p = theta[list(link.params)]
        rows = slice(None) if link.k is None else cls == link.k
        if link.dist == FIXED:
            B[rows, link.q] = p[0]
        else:
            B[:, link.q] = transform(link.dist, p, xi[:, link.dim])
    lp = model.lambda_params
    lam = np.where(lp >= 0, theta[np.maximum(lp, 0)], 1.0)[cls]
    return B, lam


def point_probs(model: CompiledModel, arrays: PanelArrays, B: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Kernel probabilities (O, J) at per-person coefficients ``B`` (N, Q)."""
    J = len(model.schema.alternatives)
    V = np.zeros((arrays.n_obs, J))
    for t in model.terms:
        if t.kind == CONST:
            x = 1.0
        elif t.kind == ATTRIBUTE:
            x = arrays.x[:, t.j, t.col]
        else:
            x = arrays.z[arrays.ind, t.col]
        V[:, t.j] += B[arrays.ind, t.q] * x
    if model.is_nested:
        logp = nl_parts(V, model.nest_of, lam[arrays.ind], arrays.avail).logp
    else:
        Vm = np.where(arrays.avail, V, -np.inf)
        logp = Vm - _logsumexp(Vm, axis=1)[:, None]
    return np.exp(logp)
