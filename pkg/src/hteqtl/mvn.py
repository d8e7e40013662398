"""Multivariate-normal kernel: Cholesky log-densities, bivariate orthant
probabilities, positive-definite repair, and configuration masses of the
latent-probit prior (exact for K <= 4, Monte Carlo above)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.linalg import solve_triangular
from scipy.special import ndtr

from . import _kernels
from .datamodel import Configuration
from .errors import InputError

LOG_2PI = math.log(2.0 * math.pi)

MC_DEFAULT_DRAWS = 10_000_000
MC_DEFAULT_SEED = 20170401
_MC_CHUNK = 1 << 20
EXACT_K_MAX = 4


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular factor of a covariance matrix with cached log-det."""

    L: np.ndarray
    log_det: float

    @classmethod
    def from_cov(cls, cov: np.ndarray, name: str = "covariance") -> "CholFactor":
        cov = np.asarray(cov, dtype=np.float64)
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError(f"{name} is not positive definite")
        return cls(L=L, log_det=2.0 * float(np.sum(np.log(np.diag(L)))))


def logpdf(z: np.ndarray, factor: CholFactor) -> float:
    """Centered Gaussian log-density at z for the factored covariance."""
    z = np.asarray(z, dtype=np.float64)
    k = factor.L.shape[0]
    if z.shape != (k,):
        raise ValueError(f"dimension mismatch: z has shape {z.shape}, factor is {k}x{k}")
    w = solve_triangular(factor.L, z, lower=True)
    return float(-0.5 * k * LOG_2PI - 0.5 * factor.log_det - 0.5 * np.dot(w, w))


def bvn_upper(tau1: float, tau2: float, omega: float) -> float:
    """P(W1 >= tau1, W2 >= tau2) for standard bivariate normal correlation
    omega; absolute accuracy well under 1e-12."""
    if not abs(omega) < 1.0:
        raise ValueError(f"correlation must satisfy |omega| < 1, got {omega}")
    return _kernels.bvn_upper_scalar(float(tau1), float(tau2), float(omega))


def pd_repair(M: np.ndarray, floor: float = 0.01) -> np.ndarray:
    """Make a symmetric matrix a valid correlation matrix: floor
    non-positive eigenvalues, reconstruct, and rescale to unit diagonal.
    Already-valid input is returned unchanged."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected square matrix, got shape {M.shape}")
    if np.max(np.abs(M - M.T)) > 1e-10:
        raise ValueError("matrix is not symmetric within 1e-10")
    vals = np.linalg.eigvalsh(M)
    if vals.min() > 0 and np.max(np.abs(np.diag(M) - 1.0)) <= 1e-12:
        return M.copy()
    vals, vecs = np.linalg.eigh(M)
    vals = np.where(vals <= 0, floor, vals)
    R = (vecs * vals) @ vecs.T
    d = np.sqrt(np.diag(R))
    R = R / np.outer(d, d)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return R


def _block_rng(seed: int, block: int) -> np.random.Generator:
    # Counter-based streams: one Philox child per fixed-size block, so the
    # draw sequence is independent of any parallel scheduling.
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def mc_config_counts(Omega: np.ndarray, tau: Sequence[float], draws: int,
                     seed: int) -> Dict[int, int]:
    """Monte-Carlo classification counts per configuration code (bit 0 is
    the first tissue, MSB-first). Counts sum exactly to `draws`."""
    Omega = np.asarray(Omega, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    k = tau.shape[0]
    if Omega.shape != (k, k):
        raise ValueError(f"Omega shape {Omega.shape} does not match tau length {k}")
    try:
        L = np.linalg.cholesky(Omega)
    except np.linalg.LinAlgError:
        raise ValueError("Omega is not positive definite (Cholesky failed)")
    pow2 = (1 << np.arange(k - 1, -1, -1)).astype(np.int64)
    counts: Dict[int, int] = {}
    block = 0
    remaining = int(draws)
    while remaining > 0:
        m = min(_MC_CHUNK, remaining)
        rng = _block_rng(seed, block)
        x = rng.standard_normal((m, k))
        w = x @ L.T
        codes = (w > tau).astype(np.int64) @ pow2
        uniq, cnt = np.unique(codes, return_counts=True)
        for code, n in zip(uniq.tolist(), cnt.tolist()):
            counts[code] = counts.get(code, 0) + n
        block += 1
        remaining -= m
    return counts


def mc_config_mass(Omega: np.ndarray, tau: Sequence[float],
                   draws: int = MC_DEFAULT_DRAWS,
                   seed: int = MC_DEFAULT_SEED) -> Dict[Configuration, float]:
    """Empirical configuration frequencies from `draws` latent-normal
    samples classified by threshold exceedance."""
    tau = np.asarray(tau, dtype=np.float64)
    k = tau.shape[0]
    counts = mc_config_counts(Omega, tau, draws, seed)
    out = {}
    for code, n in sorted(counts.items()):
        bits = tuple((code >> (k - 1 - j)) & 1 for j in range(k))
        out[Configuration(bits)] = n / draws
    return out


# ---------------------------------------------------------------------------
# Exact small-K rectangle probabilities
# ---------------------------------------------------------------------------

def _phi2_lower(b1: float, b2: float, rho: float) -> float:
    # P(X <= b1, Y <= b2); infinities reduce to univariate terms.
    if b1 == -np.inf or b2 == -np.inf:
        return 0.0
    if b1 == np.inf and b2 == np.inf:
        return 1.0
    if b1 == np.inf:
        return float(ndtr(b2))
    if b2 == np.inf:
        return float(ndtr(b1))
    return _kernels.bvn_upper_scalar(-b1, -b2, rho)


def _rect_prob_corr(R: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                    epsabs: float) -> float:
    k = lower.shape[0]
    if k == 1:
        return float(ndtr(upper[0]) - ndtr(lower[0]))
    if k == 2:
        rho = float(np.clip(R[0, 1], -1 + 1e-14, 1 - 1e-14))
        return (_phi2_lower(upper[0], upper[1], rho)
                - _phi2_lower(lower[0], upper[1], rho)
                - _phi2_lower(upper[0], lower[1], rho)
                + _phi2_lower(lower[0], lower[1], rho))

    # Condition on the last coordinate and integrate it out.
    rho_last = R[:-1, -1]
    s = np.sqrt(np.maximum(1.0 - rho_last ** 2, 1e-14))
    R_cond = (R[:-1, :-1] - np.outer(rho_last, rho_last)) / np.outer(s, s)
    R_cond = np.clip(R_cond, -1 + 1e-14, 1 - 1e-14)
    np.fill_diagonal(R_cond, 1.0)

    def integrand(t: float) -> float:
        lo = (lower[:-1] - rho_last * t) / s
        hi = (upper[:-1] - rho_last * t) / s
        inner = _rect_prob_corr(R_cond, lo, hi, epsabs * 0.1)
        return math.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi) * inner

    val, _ = integrate.quad(integrand, lower[-1], upper[-1],
                            epsabs=epsabs, epsrel=epsabs, limit=200)
    return float(val)


def rect_prob_exact(Omega: np.ndarray, tau: Sequence[float],
                    gamma: Configuration) -> float:
    """Exact probability of the configuration rectangle under the latent
    normal N(0, Omega): coordinate k lies below tau_k where gamma_k = 0 and
    above it where gamma_k = 1. Supported for K <= 4."""
    Omega = np.asarray(Omega, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    k = tau.shape[0]
    if k > EXACT_K_MAX:
        raise InputError(
            f"rect_prob_exact supports K <= {EXACT_K_MAX} (got K={k}); "
            "use mc_config_mass for larger K")
    if Omega.shape != (k, k):
        raise ValueError(f"Omega shape {Omega.shape} does not match tau length {k}")
    bits = np.asarray(gamma.bits)
    if bits.shape != (k,):
        raise ValueError("configuration length does not match tau")
    lower = np.where(bits == 1, tau, -np.inf)
    upper = np.where(bits == 1, np.inf, tau)
    p = _rect_prob_corr(Omega, lower, upper, 1e-11)
    return min(max(p, 0.0), 1.0)
