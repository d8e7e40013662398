"""Assemble the K-tissue model from all two-tissue fits: place pairwise
null correlations and effect covariances, solve the latent-probit
threshold/correlation for every pair, aggregate thresholds, and build the
truncated configuration prior."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .datamodel import Configuration, FullModel, PairwiseModel, TissueSet
from .errors import InfeasibleError, InputError
from .mvn import (EXACT_K_MAX, MC_DEFAULT_DRAWS, MC_DEFAULT_SEED, bvn_upper,
                  mc_config_mass, pd_repair, rect_prob_exact)

log = logging.getLogger(__name__)

PRIOR_THRESHOLD = 1e-5
OMEGA_BOUND = 0.999
PROBIT_RESIDUAL_TOL = 1e-10
PROBIT_ROUNDTRIP_TOL = 1e-8


@dataclass(frozen=True)
class ProbitPair:
    """Latent bivariate-probit representation of one pairwise prior."""

    tau1: float
    tau2: float
    omega: float
    tissue_i: int
    tissue_j: int


def probit_cells(tau1: float, tau2: float, omega: float) -> tuple:
    """Forward map: the four cell probabilities (p00, p01, p10, p11)
    implied by thresholds and latent correlation."""
    p11 = bvn_upper(tau1, tau2, omega)
    p1_ = float(ndtr(-tau1))
    p_1 = float(ndtr(-tau2))
    p10 = p1_ - p11
    p01 = p_1 - p11
    p00 = 1.0 - p10 - p01 - p11
    return (p00, p01, p10, p11)


def probit_solve(p: Sequence[float], tissue_i: int = 0, tissue_j: int = 1) -> ProbitPair:
    """Invert the bivariate probit: thresholds from the margins, latent
    correlation by bracketed root-finding on the joint cell."""
    p = tuple(float(x) for x in p)
    if len(p) != 4:
        raise InputError("probit_solve needs a 4-cell probability vector")
    if min(p) <= 0:
        raise InputError(f"cell probabilities must be strictly positive, got {p}")
    if abs(sum(p) - 1.0) > 1e-9:
        raise InputError(f"cell probabilities must sum to 1, got sum {sum(p)!r}")
    p00, p01, p10, p11 = p
    tau1 = float(ndtri(1.0 - (p10 + p11)))
    tau2 = float(ndtri(1.0 - (p01 + p11)))

    def f(w: float) -> float:
        return bvn_upper(tau1, tau2, w) - p11

    lo, hi = f(-OMEGA_BOUND), f(OMEGA_BOUND)
    if lo > 0 or hi < 0:
        reachable = (p11 + lo, p11 + hi)
        raise InfeasibleError(
            f"joint cell p11={p11!r} outside the range {reachable!r} reachable "
            f"for margins (p1.={p10 + p11!r}, p.1={p01 + p11!r}) with "
            f"|omega| <= {OMEGA_BOUND}")
    if lo == 0.0:
        omega = -OMEGA_BOUND
    elif hi == 0.0:
        omega = OMEGA_BOUND
    else:
        omega = float(brentq(f, -OMEGA_BOUND, OMEGA_BOUND,
                             xtol=1e-15, rtol=8.9e-16, maxiter=200))
    if abs(f(omega)) > PROBIT_RESIDUAL_TOL:
        raise RuntimeError(
            f"probit root residual {f(omega)!r} exceeds {PROBIT_RESIDUAL_TOL}")
    cells = probit_cells(tau1, tau2, omega)
    err = max(abs(a - b) for a, b in zip(cells, p))
    if err > PROBIT_ROUNDTRIP_TOL:
        raise RuntimeError(
            f"probit roundtrip error {err!r} exceeds {PROBIT_ROUNDTRIP_TOL}")
    if omega < 0:
        log.warning("pair (%d,%d): negative latent correlation %.4f",
                    tissue_i, tissue_j, omega)
    return ProbitPair(tau1=tau1, tau2=tau2, omega=omega,
                      tissue_i=tissue_i, tissue_j=tissue_j)


def _pair_index(models: Sequence[PairwiseModel], K: Optional[int]) -> Dict[tuple, PairwiseModel]:
    if not models:
        raise InputError("no pairwise models given")
    k = K if K is not None else max(m.tissue_j for m in models) + 1
    by_pair: Dict[tuple, PairwiseModel] = {}
    for m in models:
        key = (m.tissue_i, m.tissue_j)
        if key in by_pair:
            raise InputError(f"duplicate pairwise model for pair {key}")
        by_pair[key] = m
    missing = [(i, j) for i in range(k) for j in range(i + 1, k)
               if (i, j) not in by_pair]
    if missing:
        raise InputError(f"missing pairwise models for pairs: {missing}")
    return by_pair


def assemble_delta(models: Sequence[PairwiseModel], K: Optional[int] = None) -> np.ndarray:
    """Null correlation matrix from the pairwise off-diagonals, repaired to
    positive definiteness when necessary."""
    by_pair = _pair_index(models, K)
    k = max(j for _, j in by_pair) + 1
    D = np.eye(k)
    for (i, j), m in by_pair.items():
        D[i, j] = D[j, i] = m.delta
    return pd_repair(D)


def assemble_sigma(models: Sequence[PairwiseModel], K: Optional[int] = None) -> np.ndarray:
    """Effect covariance: per-tissue variance as the minimum over the K-1
    pairwise estimates, correlation part repaired like Delta."""
    by_pair = _pair_index(models, K)
    k = max(j for _, j in by_pair) + 1
    var = np.full(k, np.inf)
    corr = np.eye(k)
    for (i, j), m in by_pair.items():
        s11, s22, s12 = m.sigma[0, 0], m.sigma[1, 1], m.sigma[0, 1]
        if s11 <= 0 or s22 <= 0:
            raise InputError(
                f"pair ({i},{j}): non-positive effect variance ({s11!r}, {s22!r})")
        var[i] = min(var[i], s11)
        var[j] = min(var[j], s22)
        corr[i, j] = corr[j, i] = s12 / math.sqrt(s11 * s22)
    corr = pd_repair(corr)
    scale = np.sqrt(var)
    return corr * np.outer(scale, scale)


def aggregate_tau(probit_pairs: Sequence[ProbitPair], K: Optional[int] = None) -> np.ndarray:
    """Per-tissue aggregate threshold: the minimum over every pairwise
    threshold component referring to that tissue."""
    if not probit_pairs:
        raise InputError("no probit pairs given")
    k = K if K is not None else max(pp.tissue_j for pp in probit_pairs) + 1
    incident: List[List[float]] = [[] for _ in range(k)]
    for pp in probit_pairs:
        incident[pp.tissue_i].append(pp.tau1)
        incident[pp.tissue_j].append(pp.tau2)
    empty = [t for t, lst in enumerate(incident) if not lst]
    if empty:
        raise InputError(f"no pairwise thresholds incident to tissues {empty}")
    return np.array([min(lst) for lst in incident])


def assemble_omega(probit_pairs: Sequence[ProbitPair], K: Optional[int] = None) -> np.ndarray:
    if not probit_pairs:
        raise InputError("no probit pairs given")
    k = K if K is not None else max(pp.tissue_j for pp in probit_pairs) + 1
    W = np.eye(k)
    seen = set()
    for pp in probit_pairs:
        key = (pp.tissue_i, pp.tissue_j)
        if key in seen:
            raise InputError(f"duplicate probit pair {key}")
        seen.add(key)
        W[pp.tissue_i, pp.tissue_j] = W[pp.tissue_j, pp.tissue_i] = pp.omega
    return pd_repair(W)


def truncate_prior(masses: Dict[Configuration, float], k: int,
                   threshold: float = PRIOR_THRESHOLD) -> tuple:
    """Drop configurations below the threshold, force-retain the all-zero
    and all-one anchors, renormalize, and sort canonically."""
    anchors = (Configuration.zeros(k), Configuration.ones(k))
    kept: Dict[Configuration, float] = {
        cfg: m for cfg, m in masses.items() if m >= threshold and m > 0}
    for a in anchors:
        m = masses.get(a, 0.0)
        if m <= 0.0:
            m = max(threshold, 1e-12)
            log.warning(
                "anchor configuration %s has zero estimated mass; floored at %g",
                a.to_string(), m)
        kept[a] = m
    total = sum(kept.values())
    items = sorted(((cfg, m / total) for cfg, m in kept.items()),
                   key=lambda it: it[0].sort_key())
    return tuple(items)


def build_prior(Omega: np.ndarray, tau: Sequence[float],
                threshold: float = PRIOR_THRESHOLD,
                draws: int = MC_DEFAULT_DRAWS,
                seed: int = MC_DEFAULT_SEED) -> tuple:
    """Configuration prior from the latent probit model: exact rectangle
    probabilities for K <= 4, Monte-Carlo classification above."""
    tau = np.asarray(tau, dtype=np.float64)
    k = tau.shape[0]
    if k <= EXACT_K_MAX:
        from .datamodel import all_configurations

        masses = {cfg: rect_prob_exact(Omega, tau, cfg)
                  for cfg in all_configurations(k)}
    else:
        masses = mc_config_mass(Omega, tau, draws=draws, seed=seed)
    return truncate_prior(masses, k, threshold=threshold)


def assemble_full(models: Sequence[PairwiseModel], tissues: TissueSet,
                  threshold: float = PRIOR_THRESHOLD,
                  draws: int = MC_DEFAULT_DRAWS,
                  seed: int = MC_DEFAULT_SEED) -> FullModel:
    """Compose the full assembly pipeline and validate the result."""
    k = tissues.K

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (InputError, InfeasibleError, RuntimeError) as e:
            raise type(e)(f"assembly stage {name!r}: {e}") from e
        except ValueError as e:
            raise ValueError(f"assembly stage {name!r}: {e}") from e

    by_pair = stage("pairwise-index", _pair_index, models, k)
    Delta = stage("delta", assemble_delta, models, k)
    Sigma = stage("sigma", assemble_sigma, models, k)
    probit_pairs = [
        stage(f"probit({i},{j})", probit_solve, by_pair[(i, j)].p, i, j)
        for i in range(k) for j in range(i + 1, k)
    ]
    Omega = stage("omega", assemble_omega, probit_pairs, k)
    tau = stage("tau", aggregate_tau, probit_pairs, k)
    prior = stage("prior", build_prior, Omega, tau,
                  threshold=threshold, draws=draws, seed=seed)
    model = FullModel(tissues=tissues, Delta=Delta, Sigma=Sigma,
                      Omega=Omega, tau=tau, prior=prior)
    from .datamodel import validate

    violations = validate(model)
    if violations:
        from .errors import ModelValidationError

        raise ModelValidationError([f"assembly stage 'validate': {v}"
                                    for v in violations])
    return model


# ---------------------------------------------------------------------------
# Pairwise result files
# ---------------------------------------------------------------------------

def pair_filename(i: int, j: int) -> str:
    return f"pair_{i:03d}_{j:03d}.json"


def save_pairwise(model: PairwiseModel, dirpath) -> str:
    from .datamodel import dumps_json17

    path = os.path.join(dirpath, pair_filename(model.tissue_i, model.tissue_j))
    with open(path, "wt", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json17(model.to_dict()) + "\n")
    return path


def load_pairwise_dir(dirpath) -> List[PairwiseModel]:
    if not os.path.isdir(dirpath):
        raise InputError(f"not a directory: {dirpath}")
    out = []
    for fname in sorted(os.listdir(dirpath)):
        if not (fname.startswith("pair_") and fname.endswith(".json")):
            continue
        path = os.path.join(dirpath, fname)
        try:
            with open(path, "rt", encoding="utf-8") as fh:
                out.append(PairwiseModel.from_dict(json.load(fh)))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise InputError(f"bad pairwise file {path}: {e}")
    if not out:
        raise InputError(f"no pairwise files found in {dirpath}")
    return out
