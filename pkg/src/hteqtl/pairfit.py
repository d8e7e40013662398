"""Direct small-K mixture fitting by generalized EM on the pseudo-
likelihood: exact posterior E-step, closed-form prior update, and a
bounded quasi-Newton step for the covariance parameters that is accepted
only when it improves the expected complete-data log-likelihood."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .datamodel import (Configuration, FullModel, PairwiseModel, TissueSet,
                        all_configurations)
from .errors import InputError

log = logging.getLogger(__name__)

K_DIRECT_MAX = 4
LOG_2PI = math.log(2.0 * math.pi)
ASCENT_SLACK = 1e-9

DELTA_BOUND = 0.999
SIGMA_VAR_LO = 1e-6
SIGMA_VAR_HI = 100.0
SIGMA_CORR_BOUND = 0.999


@dataclass(frozen=True)
class EmOptions:
    max_iters: int = 500
    rel_tol: float = 1e-6
    subsample: Optional[int] = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise InputError("rel_tol must be positive")


@dataclass(frozen=True)
class MixtureParams:
    """Small-K mixture parameters: configuration prior p over all 2^k
    configurations in canonical order, null correlation Delta, and effect
    covariance Sigma."""

    p: np.ndarray
    Delta: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))
        object.__setattr__(self, "Delta", np.asarray(self.Delta, dtype=np.float64))
        object.__setattr__(self, "Sigma", np.asarray(self.Sigma, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.Delta.shape[0]


@dataclass(frozen=True)
class DirectFit(MixtureParams):
    loglik: float = np.nan
    iters: int = 0
    converged: bool = False
    trace: tuple = field(default_factory=tuple)

    def to_pairwise(self, tissue_i: int, tissue_j: int) -> PairwiseModel:
        if self.k != 2:
            raise ValueError("to_pairwise requires a 2-tissue fit")
        return PairwiseModel(
            tissue_i=tissue_i, tissue_j=tissue_j,
            p=tuple(self.p), delta=float(self.Delta[0, 1]),
            sigma=self.Sigma, loglik=float(self.loglik),
            iters=self.iters, converged=self.converged)


def _config_bits(k: int) -> np.ndarray:
    return np.array([c.bits for c in all_configurations(k)], dtype=np.float64)


def component_arrays(params: MixtureParams) -> Tuple[np.ndarray, np.ndarray]:
    """Per-configuration precision matrices and log-constants
    (log prior + Gaussian normalizer) in canonical configuration order."""
    k = params.k
    bits = _config_bits(k)
    nc = bits.shape[0]
    precisions = np.empty((nc, k, k))
    logconsts = np.empty(nc)
    for j in range(nc):
        cov = params.Delta + params.Sigma * np.outer(bits[j], bits[j])
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            cfg = "".join(str(int(b)) for b in bits[j])
            raise ValueError(
                f"component covariance for configuration {cfg} is not positive definite")
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        inv_chol = np.linalg.inv(chol)
        precisions[j] = inv_chol.T @ inv_chol
        pj = params.p[j]
        logconsts[j] = (math.log(pj) if pj > 0 else -np.inf) \
            - 0.5 * k * LOG_2PI - 0.5 * logdet
    return precisions, logconsts


def estep(Z: np.ndarray, params: MixtureParams) -> np.ndarray:
    """Posterior configuration responsibilities, one row-stochastic row per
    observation, computed in log space."""
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    k = params.k
    if k > K_DIRECT_MAX:
        raise InputError(f"direct E-step supports k <= {K_DIRECT_MAX}")
    if Z.ndim != 2 or Z.shape[1] != k:
        raise ValueError(f"Z has shape {Z.shape}, parameters are for k={k}")
    precisions, logconsts = component_arrays(params)
    nc = logconsts.shape[0]
    out = np.empty((Z.shape[0], nc))
    step = 1 << 17
    for lo in range(0, Z.shape[0], step):
        zc = Z[lo:lo + step]
        t = np.empty((zc.shape[0], nc))
        for j in range(nc):
            t[:, j] = logconsts[j] - 0.5 * np.einsum("ia,ia->i", zc @ precisions[j], zc)
        t -= t.max(axis=1, keepdims=True)
        np.exp(t, out=t)
        t /= t.sum(axis=1, keepdims=True)
        out[lo:lo + step] = t
    return out


def pseudo_loglik(Z: np.ndarray, params: MixtureParams) -> float:
    """Sum over rows of the log mixture density."""
    precisions, logconsts = component_arrays(params)
    total, _, _ = _kernels.mixture_suffstats(
        np.ascontiguousarray(Z, dtype=np.float64), precisions, logconsts)
    return float(total)


# ---------------------------------------------------------------------------
# Generalized EM
# ---------------------------------------------------------------------------

def _pack(Delta: np.ndarray, Sigma: np.ndarray) -> Tuple[np.ndarray, list]:
    k = Delta.shape[0]
    iu = np.triu_indices(k, 1)
    sig_var = np.clip(np.diag(Sigma), SIGMA_VAR_LO, SIGMA_VAR_HI)
    denom = np.sqrt(np.outer(sig_var, sig_var))
    sig_corr = np.clip(Sigma / denom, -SIGMA_CORR_BOUND, SIGMA_CORR_BOUND)
    x = np.concatenate([
        np.clip(Delta[iu], -DELTA_BOUND, DELTA_BOUND),
        sig_var,
        sig_corr[iu],
    ])
    m = iu[0].size
    bounds = ([(-DELTA_BOUND, DELTA_BOUND)] * m
              + [(SIGMA_VAR_LO, SIGMA_VAR_HI)] * k
              + [(-SIGMA_CORR_BOUND, SIGMA_CORR_BOUND)] * m)
    return x, bounds


def _unpack(x: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(k, 1)
    m = iu[0].size
    Delta = np.eye(k)
    Delta[iu] = x[:m]
    Delta.T[iu] = x[:m]
    var = x[m:m + k]
    corr = np.eye(k)
    corr[iu] = x[m + k:]
    corr.T[iu] = x[m + k:]
    scale = np.sqrt(var)
    Sigma = corr * np.outer(scale, scale)
    return Delta, Sigma


def _expected_q(Delta: np.ndarray, Sigma: np.ndarray, bits: np.ndarray,
                ngamma: np.ndarray, scatter: np.ndarray) -> float:
    """Gaussian part of the expected complete-data log-likelihood given the
    responsibility sums and weighted scatters; -inf when any component
    covariance (or Sigma's correlation part) fails to be PD."""
    k = Delta.shape[0]
    if k > 2:
        # Sigma itself must stay PSD; for k=2 the box bounds guarantee it.
        w = np.linalg.eigvalsh(Sigma)
        if w.min() < -1e-12 * max(1.0, abs(w.max())):
            return -np.inf
    q = 0.0
    for j in range(bits.shape[0]):
        if ngamma[j] <= 0 and not np.any(scatter[j]):
            continue
        cov = Delta + Sigma * np.outer(bits[j], bits[j])
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return -np.inf
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        sol = np.linalg.solve(cov, scatter[j])
        q += -0.5 * ngamma[j] * (k * LOG_2PI + logdet) - 0.5 * float(np.trace(sol))
    return q


def _mstep_cov(Delta: np.ndarray, Sigma: np.ndarray, bits: np.ndarray,
               ngamma: np.ndarray, scatter: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bounded quasi-Newton ascent on (Delta, Sigma); the step is accepted
    only if it does not decrease the objective (generalized EM)."""
    k = Delta.shape[0]
    n = max(float(ngamma.sum()), 1.0)
    x0, bounds = _pack(Delta, Sigma)
    q0 = _expected_q(*_unpack(x0, k), bits, ngamma, scatter)

    def neg_q(x):
        q = _expected_q(*_unpack(x, k), bits, ngamma, scatter)
        if not np.isfinite(q):
            return 1e10
        return -q / n

    res = minimize(neg_q, x0, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 60, "ftol": 1e-12, "gtol": 1e-10})
    q1 = _expected_q(*_unpack(res.x, k), bits, ngamma, scatter)
    if np.isfinite(q1) and q1 >= q0:
        return _unpack(res.x, k)
    return _unpack(x0, k)


def default_init(Z: np.ndarray) -> MixtureParams:
    """Data-driven starting point: null correlation from the |z| < 1 core,
    effect covariance from the joint |z| > 3 tails, and a mildly
    informative configuration prior."""
    n, k = Z.shape
    core = np.abs(Z) < 1.0
    tail = np.abs(Z) > 3.0
    Delta0 = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            sel = core[:, i] & core[:, j]
            if sel.sum() >= 100:
                d0 = float(np.corrcoef(Z[sel, i], Z[sel, j])[0, 1])
            else:
                d0 = float(np.corrcoef(Z[:, i], Z[:, j])[0, 1])
            d0 = float(np.clip(d0, -0.95, 0.95))
            Delta0[i, j] = Delta0[j, i] = d0
    from .mvn import pd_repair

    Delta0 = pd_repair(Delta0)
    Sigma0 = np.empty((k, k))
    for i in range(k):
        sel = tail[:, i]
        Sigma0[i, i] = (float(np.var(Z[sel, i])) - 1.0) if sel.sum() >= 20 else 4.0
        for j in range(i + 1, k):
            both = tail[:, i] & tail[:, j]
            if both.sum() >= 20:
                c0 = float(np.cov(Z[both, i], Z[both, j])[0, 1]) - Delta0[i, j]
            else:
                c0 = 0.5 * math.sqrt(max(Sigma0[i, i], 1e-3))
            Sigma0[i, j] = Sigma0[j, i] = c0
    diag = np.clip(np.diag(Sigma0).copy(), 0.5, SIGMA_VAR_HI)
    np.fill_diagonal(Sigma0, diag)
    w, v = np.linalg.eigh(0.5 * (Sigma0 + Sigma0.T))
    Sigma0 = (v * np.maximum(w, 1e-3)) @ v.T
    nc = 1 << k
    if k == 1:
        p0 = np.array([0.9, 0.1])
    else:
        p0 = np.full(nc, 0.08 / (nc - 2))
        p0[0] = 0.85
        p0[-1] = 0.07
    return MixtureParams(p=p0, Delta=Delta0, Sigma=Sigma0)


def fit_em(Z: np.ndarray, init: Optional[MixtureParams] = None,
           opts: EmOptions = EmOptions()) -> DirectFit:
    """Fit the small-K mixture by generalized EM on the pseudo-likelihood.

    The per-iteration pseudo-log-likelihood trace is monotone
    non-decreasing (within 1e-9); `converged` reflects the relative change
    criterion, not the iteration cap."""
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise InputError("Z must be 2-D")
    n, k = Z.shape
    if k > K_DIRECT_MAX:
        raise InputError(
            f"direct fitting supports k <= {K_DIRECT_MAX} (got k={k}); "
            "fit pairs and assemble instead")
    nc = 1 << k
    if n < nc * 10:
        raise InputError(f"refusing to fit on {n} rows (need >= {nc * 10})")
    if not np.isfinite(Z).all():
        raise InputError("Z contains non-finite values")

    if opts.subsample is not None and n > opts.subsample:
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=int(opts.seed), spawn_key=(0xF17,))))
        rows = np.sort(rng.choice(n, size=int(opts.subsample), replace=False))
        Zfit = np.ascontiguousarray(Z[rows])
    else:
        Zfit = Z

    params = init if init is not None else default_init(Zfit)
    if params.k != k:
        raise InputError(f"init is for k={params.k}, data has k={k}")
    bits = _config_bits(k)

    trace = []
    prev = None
    converged = False
    p, Delta, Sigma = params.p.copy(), params.Delta.copy(), params.Sigma.copy()
    best = (p, Delta, Sigma)
    for it in range(opts.max_iters):
        precisions, logconsts = component_arrays(MixtureParams(p, Delta, Sigma))
        ll, ngamma, scatter = _kernels.mixture_suffstats(Zfit, precisions, logconsts)
        trace.append(float(ll))
        best = (p, Delta, Sigma)
        if prev is not None:
            if ll < prev - ASCENT_SLACK:
                raise RuntimeError(
                    f"EM ascent violated at iteration {it}: {prev} -> {ll}")
            if abs(ll - prev) <= opts.rel_tol * abs(prev):
                converged = True
                break
        prev = ll
        p = ngamma / ngamma.sum()
        Delta, Sigma = _mstep_cov(Delta, Sigma, bits, ngamma, scatter)
    p, Delta, Sigma = best
    return DirectFit(p=p, Delta=Delta, Sigma=Sigma, loglik=float(trace[-1]),
                     iters=len(trace), converged=converged, trace=tuple(trace))


def fit_pair(Z: np.ndarray, tissue_i: int, tissue_j: int,
             opts: EmOptions = EmOptions()) -> PairwiseModel:
    """Fit one two-tissue model from the corresponding z-matrix columns."""
    fit = fit_em(Z, opts=opts)
    return fit.to_pairwise(tissue_i, tissue_j)


def fit_direct_model(Z: np.ndarray, tissues: TissueSet,
                     opts: EmOptions = EmOptions(),
                     prior_threshold: float = 1e-5) -> FullModel:
    """Direct K<=4 fit packaged as a full model. The configuration prior is
    truncated/renormalized exactly like the assembled path; the latent
    probit fields are placeholders (identity, zero) since no probit
    construction is involved."""
    fit = fit_em(Z, opts=opts)
    k = fit.k
    configs = all_configurations(k)
    entries = {cfg: float(pj) for cfg, pj in zip(configs, fit.p)}
    from .assemble import truncate_prior

    prior = truncate_prior(entries, k, threshold=prior_threshold)
    return FullModel(
        tissues=tissues,
        Delta=fit.Delta,
        Sigma=fit.Sigma,
        Omega=np.eye(k),
        tau=np.zeros(k),
        prior=prior,
    )
