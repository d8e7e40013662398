"""Posterior inference: local false discovery rates for configuration
families, adaptive FDR thresholding, and model summaries (Hamming-class
mass, tissue clustering)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.cluster.hierarchy import linkage, to_tree

from . import _kernels
from .datamodel import (ConfigFamily, Configuration, DiscoverySet, FullModel,
                        TissueSet, ZMatrix, fmt17)
from .errors import DegenerateFamilyError, InputError

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_CHUNK = 65536


def config_cov(gamma: Configuration, Delta: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """Component covariance for one configuration: Delta plus Sigma masked
    by the active-tissue outer product."""
    bits = np.asarray(gamma.bits, dtype=np.float64)
    return Delta + Sigma * np.outer(bits, bits)


@dataclass(frozen=True)
class ComponentCache:
    """Precomputed per-configuration precision matrices and log-weights for
    the retained prior; immutable and shared across scan chunks."""

    configs: tuple
    precisions: np.ndarray
    logconsts: np.ndarray

    @classmethod
    def from_model(cls, model: FullModel) -> "ComponentCache":
        k = model.K
        cfgs = model.configs()
        probs = model.prior_probs()
        nc = len(cfgs)
        precisions = np.empty((nc, k, k))
        logconsts = np.empty(nc)
        for j, (cfg, pj) in enumerate(zip(cfgs, probs)):
            cov = config_cov(cfg, model.Delta, model.Sigma)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValueError(
                    f"component covariance for configuration {cfg} "
                    "is not positive definite")
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            inv_chol = np.linalg.inv(chol)
            precisions[j] = inv_chol.T @ inv_chol
            logconsts[j] = math.log(pj) - 0.5 * k * LOG_2PI - 0.5 * logdet
        precisions.setflags(write=False)
        logconsts.setflags(write=False)
        return cls(configs=tuple(cfgs), precisions=precisions, logconsts=logconsts)


def null_mask(cache: ComponentCache, family: ConfigFamily) -> np.ndarray:
    """Membership of each retained configuration in the null side S^c.

    Raises if the family fails to split the retained set into two
    non-empty parts (the test is impossible under this prior)."""
    alt = family.mask(cache.configs)
    if not alt.any():
        raise DegenerateFamilyError(
            f"family {family.label()} contains no retained configuration")
    if alt.all():
        raise DegenerateFamilyError(
            f"family {family.label()} leaves no retained null configuration")
    return ~alt


def lfdr_chunk(values: np.ndarray, cache: ComponentCache,
               is_null: np.ndarray) -> np.ndarray:
    return _kernels.lfdr_rows(values, cache.precisions, cache.logconsts, is_null)


def lfdr(z: np.ndarray, model: FullModel, family: ConfigFamily,
         cache: Optional[ComponentCache] = None) -> float:
    """Posterior probability that the configuration lies outside the
    family, given one z-vector."""
    if cache is None:
        cache = ComponentCache.from_model(model)
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != model.K:
        raise ValueError(f"z has length {z.shape[1]}, model has K={model.K}")
    is_null = null_mask(cache, family)
    return float(lfdr_chunk(z, cache, is_null)[0])


def adaptive_reject(lfdrs: np.ndarray, alpha: float) -> Tuple[int, np.ndarray, float]:
    """Reject the longest ascending-lfdr prefix whose running mean stays
    below alpha (ties broken by original index). Returns
    (n_reject, rejected mask, achieved mean lfdr)."""
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must be in (0,1), got {alpha}")
    lfdrs = np.asarray(lfdrs, dtype=np.float64)
    n = lfdrs.shape[0]
    rejected = np.zeros(n, dtype=bool)
    if n == 0:
        return 0, rejected, 0.0
    order = np.argsort(lfdrs, kind="stable")
    means = np.cumsum(lfdrs[order]) / np.arange(1, n + 1)
    below = np.nonzero(means < alpha)[0]
    n_reject = int(below[-1] + 1) if below.size else 0
    rejected[order[:n_reject]] = True
    achieved = float(means[n_reject - 1]) if n_reject else 0.0
    return n_reject, rejected, achieved


def test_family(Z: Union[ZMatrix, object], model: FullModel, family: ConfigFamily,
                alpha: float, chunk_size: int = DEFAULT_CHUNK) -> DiscoverySet:
    """Streamed lfdr scan plus adaptive thresholding. Z may be an in-memory
    ZMatrix or any reader exposing iter_chunks()."""
    tissues = getattr(Z, "tissues", None)
    if tissues is not None and tuple(tissues.names) != tuple(model.tissues.names):
        raise InputError(
            f"z matrix tissues {tissues.names} do not match model tissues "
            f"{model.tissues.names}")
    cache = ComponentCache.from_model(model)
    is_null = null_mask(cache, family)
    parts = []
    for _, values in Z.iter_chunks(chunk_size):
        if values.shape[1] != model.K:
            raise InputError(
                f"z chunk has {values.shape[1]} columns, model has K={model.K}")
        parts.append(lfdr_chunk(values, cache, is_null))
    lfdrs = np.concatenate(parts) if parts else np.empty(0)
    n_reject, rejected, achieved = adaptive_reject(lfdrs, alpha)
    return DiscoverySet(family=family, alpha=alpha, lfdrs=lfdrs,
                        n_reject=n_reject, rejected=rejected,
                        achieved_mean_lfdr=achieved)


def hamming_mass(model: FullModel) -> np.ndarray:
    """Total prior mass per Hamming class (number of active tissues)."""
    out = np.zeros(model.K + 1)
    for cfg, p in model.prior:
        out[cfg.hamming] += p
    return out


def tissue_cluster(Sigma: np.ndarray, names: Optional[Sequence[str]] = None) -> str:
    """Single-linkage clustering of tissues under the effect-correlation
    distance 1 - corr(Sigma); returns a Newick string with merge heights."""
    Sigma = np.asarray(Sigma, dtype=np.float64)
    k = Sigma.shape[0]
    if Sigma.shape != (k, k):
        raise ValueError(f"Sigma must be square, got {Sigma.shape}")
    d = np.diag(Sigma)
    if np.any(d <= 0):
        raise ValueError("Sigma has a non-positive diagonal entry")
    if names is None:
        names = [f"t{i + 1:02d}" for i in range(k)]
    if len(names) != k:
        raise ValueError(f"{len(names)} names for {k} tissues")
    scale = np.sqrt(d)
    corr = Sigma / np.outer(scale, scale)
    dist = 1.0 - corr
    iu = np.triu_indices(k, 1)
    condensed = dist[iu]
    tree = to_tree(linkage(condensed, method="single"))

    def newick(node, parent_height: float) -> str:
        length = fmt17(max(parent_height - node.dist, 0.0))
        if node.is_leaf():
            return f"{names[node.id]}:{length}"
        left = newick(node.left, node.dist)
        right = newick(node.right, node.dist)
        return f"({left},{right}):{length}"

    if tree.is_leaf():
        return f"{names[tree.id]};"
    left = newick(tree.left, tree.dist)
    right = newick(tree.right, tree.dist)
    return f"({left},{right});"


# ---------------------------------------------------------------------------
# Discoveries file
# ---------------------------------------------------------------------------

def write_discoveries(path, ids_iter, disc: DiscoverySet,
                      tissues: Optional[TissueSet] = None,
                      model_hash: str = "") -> None:
    """TSV with one row per pair plus header comments recording the test."""
    with open(path, "wt", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# family: {disc.family.label(tissues)}\n")
        fh.write(f"# alpha: {fmt17(disc.alpha)}\n")
        fh.write(f"# n_reject: {disc.n_reject}\n")
        fh.write(f"# achieved_mean_lfdr: {fmt17(disc.achieved_mean_lfdr)}\n")
        fh.write(f"# model_hash: {model_hash}\n")
        fh.write("pair_id\tlfdr\trejected\n")
        i = 0
        for pid in ids_iter:
            fh.write(f"{pid}\t{fmt17(disc.lfdrs[i])}\t{1 if disc.rejected[i] else 0}\n")
            i += 1
        if i != disc.lfdrs.shape[0]:
            raise InputError(
                f"id stream yielded {i} ids for {disc.lfdrs.shape[0]} lfdrs")
