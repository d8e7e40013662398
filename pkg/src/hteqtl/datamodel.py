"""Core domain types: tissues, z-statistic matrices, eQTL configurations,
fitted models, and their (de)serialization.

All types are immutable after construction and safe to share across
threads. Model files are UTF-8 JSON with every real printed at 17
significant digits, which round-trips float64 losslessly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import InputError, ModelValidationError

MODEL_FILE_VERSION = "1"
PROB_SUM_TOL = 1e-12


def fmt17(x: float) -> str:
    """Format a real with 17 significant digits (lossless for float64)."""
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        raise ValueError(f"non-finite value not representable in file: {x}")
    return format(float(x), ".17g")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TissueSet:
    """Tissue labels with sample sizes, covariate counts, and the effective
    degrees of freedom d_k = n_k - c_k - 3 used for variance stabilization."""

    names: tuple
    n: tuple
    c: tuple
    d: tuple

    @classmethod
    def create(cls, names: Sequence[str], n: Sequence[int], c: Sequence[int],
               d: Optional[Sequence[float]] = None) -> "TissueSet":
        names = tuple(str(x) for x in names)
        n = tuple(int(x) for x in n)
        c = tuple(int(x) for x in c)
        if d is None:
            d = tuple(float(nn - cc - 3) for nn, cc in zip(n, c))
        else:
            d = tuple(float(x) for x in d)
        ts = cls(names=names, n=n, c=c, d=d)
        problems = ts.check()
        if problems:
            raise InputError("invalid tissue set: " + "; ".join(problems))
        return ts

    @property
    def K(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InputError(f"unknown tissue name {name!r}; known: {list(self.names)}")

    def check(self) -> list:
        out = []
        k = len(self.names)
        if k < 1:
            out.append("tissues: need at least one tissue")
        if not (len(self.n) == len(self.c) == len(self.d) == k):
            out.append("tissues: names/n/c/d lengths differ")
            return out
        if len(set(self.names)) != k:
            out.append("tissues: names are not unique")
        for i in range(k):
            if self.n[i] <= 0:
                out.append(f"tissues: n[{i}] must be positive")
            if self.c[i] < 0:
                out.append(f"tissues: c[{i}] must be non-negative")
            if abs(self.d[i] - (self.n[i] - self.c[i] - 3)) > 1e-9:
                out.append(f"tissues: d[{i}] != n - c - 3")
            if self.d[i] < 1:
                out.append(f"tissues: d[{i}] < 1")
        return out


@dataclass(frozen=True)
class Configuration:
    """Binary per-tissue eQTL indicator vector."""

    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"configuration bits must be 0/1: {self.bits}")

    @classmethod
    def from_string(cls, s: str) -> "Configuration":
        if not s or any(ch not in "01" for ch in s):
            raise InputError(f"bad configuration bit string {s!r}")
        return cls(tuple(int(ch) for ch in s))

    @classmethod
    def zeros(cls, k: int) -> "Configuration":
        return cls((0,) * k)

    @classmethod
    def ones(cls, k: int) -> "Configuration":
        return cls((1,) * k)

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def hamming(self) -> int:
        return sum(self.bits)

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    def sort_key(self) -> tuple:
        # Canonical total order: lexicographic on the bit vector.
        return self.bits

    def __str__(self) -> str:
        return self.to_string()


def all_configurations(k: int) -> list:
    """All 2^k configurations in canonical (lexicographic) order."""
    if k > 25:
        raise ValueError(f"refusing to enumerate 2^{k} configurations")
    out = []
    for code in range(1 << k):
        bits = tuple((code >> (k - 1 - j)) & 1 for j in range(k))
        out.append(Configuration(bits))
    return out


@dataclass(frozen=True)
class ZMatrix:
    """Variance-stabilized z-statistics, one row per gene-SNP pair."""

    pair_ids: tuple
    values: np.ndarray
    tissues: TissueSet

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise InputError("z matrix must be 2-D")
        if v.shape[1] != self.tissues.K:
            raise InputError(
                f"z matrix has {v.shape[1]} columns but {self.tissues.K} tissues")
        if len(self.pair_ids) != v.shape[0]:
            raise InputError("pair_ids length does not match z matrix rows")
        if not np.isfinite(v).all():
            raise InputError("z matrix contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "pair_ids", tuple(self.pair_ids))

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    def iter_chunks(self, chunk_size: int = 65536) -> Iterator:
        for lo in range(0, self.N, chunk_size):
            hi = min(lo + chunk_size, self.N)
            yield self.pair_ids[lo:hi], self.values[lo:hi]


@dataclass(frozen=True)
class PairwiseModel:
    """Fitted two-tissue mixture: cell prior p, null correlation delta,
    effect covariance sigma, plus fit diagnostics."""

    tissue_i: int
    tissue_j: int
    p: tuple
    delta: float
    sigma: np.ndarray
    loglik: float
    iters: int
    converged: bool

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(float(x) for x in self.p))
        object.__setattr__(self, "sigma", _frozen(self.sigma))
        problems = self.check()
        if problems:
            raise ModelValidationError(problems)

    def check(self) -> list:
        out = []
        if not (0 <= self.tissue_i < self.tissue_j):
            out.append("pairwise: tissue indices must satisfy 0 <= i < j")
        if len(self.p) != 4:
            out.append("pairwise: p must have four cells")
            return out
        if min(self.p) < 0:
            out.append("pairwise: p has a negative cell")
        if abs(sum(self.p) - 1.0) > PROB_SUM_TOL:
            out.append("pairwise: p does not sum to 1")
        if not abs(self.delta) < 1:
            out.append("pairwise: |delta| must be < 1")
        s = self.sigma
        if s.shape != (2, 2) or abs(s[0, 1] - s[1, 0]) > 1e-10:
            out.append("pairwise: sigma must be symmetric 2x2")
        elif s[0, 0] < 0 or s[1, 1] < 0 or s[0, 1] ** 2 > s[0, 0] * s[1, 1] * (1 + 1e-12) + 1e-15:
            out.append("pairwise: sigma not positive semidefinite")
        return out

    def to_dict(self) -> dict:
        return {
            "i": self.tissue_i,
            "j": self.tissue_j,
            "p": list(self.p),
            "delta": self.delta,
            "sigma": [[self.sigma[0, 0], self.sigma[0, 1]],
                      [self.sigma[1, 0], self.sigma[1, 1]]],
            "loglik": self.loglik,
            "iters": self.iters,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairwiseModel":
        return cls(
            tissue_i=int(d["i"]), tissue_j=int(d["j"]),
            p=tuple(float(x) for x in d["p"]),
            delta=float(d["delta"]),
            sigma=np.array(d["sigma"], dtype=np.float64),
            loglik=float(d["loglik"]), iters=int(d["iters"]),
            converged=bool(d["converged"]),
        )


@dataclass(frozen=True)
class FullModel:
    """K-tissue mixture model: null correlation Delta, effect covariance
    Sigma, latent-probit correlation Omega with thresholds tau, and the
    retained configuration prior."""

    tissues: TissueSet
    Delta: np.ndarray
    Sigma: np.ndarray
    Omega: np.ndarray
    tau: np.ndarray
    prior: tuple  # of (Configuration, float), canonically ordered
    mu: np.ndarray = None

    def __post_init__(self):
        k = self.tissues.K
        object.__setattr__(self, "Delta", _frozen(self.Delta))
        object.__setattr__(self, "Sigma", _frozen(self.Sigma))
        object.__setattr__(self, "Omega", _frozen(self.Omega))
        object.__setattr__(self, "tau", _frozen(self.tau))
        mu = self.mu if self.mu is not None else np.zeros(k)
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(
            self, "prior",
            tuple((cfg, float(p)) for cfg, p in self.prior))

    @property
    def K(self) -> int:
        return self.tissues.K

    def configs(self) -> list:
        return [cfg for cfg, _ in self.prior]

    def config_matrix(self) -> np.ndarray:
        return np.array([cfg.bits for cfg, _ in self.prior], dtype=np.float64)

    def prior_probs(self) -> np.ndarray:
        return np.array([p for _, p in self.prior])

    def prior_prob(self, cfg: Configuration) -> float:
        for c, p in self.prior:
            if c == cfg:
                return p
        return 0.0


def validate(model: FullModel) -> list:
    """Check every FullModel invariant; returns violation strings (empty
    means the model is safe for all downstream operations)."""
    out = list(model.tissues.check())
    k = model.tissues.K

    def _corr_checks(M: np.ndarray, name: str):
        if M.shape != (k, k):
            out.append(f"{name}: wrong shape {M.shape}")
            return
        if not np.allclose(M, M.T, atol=1e-10, rtol=0):
            out.append(f"{name}: not symmetric")
            return
        if np.max(np.abs(np.diag(M) - 1.0)) > 1e-12:
            out.append(f"{name}: diagonal not unit")
        if np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
            out.append(f"{name}: not positive definite")

    _corr_checks(model.Delta, "Delta")
    _corr_checks(model.Omega, "Omega")

    S = model.Sigma
    if S.shape != (k, k):
        out.append(f"Sigma: wrong shape {S.shape}")
    elif not np.allclose(S, S.T, atol=1e-10, rtol=0):
        out.append("Sigma: not symmetric")
    else:
        scale = max(1.0, float(np.abs(np.diag(S)).max()))
        if np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-10 * scale:
            out.append("Sigma PSD: negative eigenvalue")

    if model.tau.shape != (k,) or not np.isfinite(model.tau).all():
        out.append("tau: must be a finite K-vector")
    if model.mu.shape != (k,) or np.any(model.mu != 0.0):
        out.append("mu: must be identically zero")

    if not model.prior:
        out.append("prior: empty")
    else:
        probs = model.prior_probs()
        cfgs = model.configs()
        if any(cfg.K != k for cfg in cfgs):
            out.append("prior: configuration length != K")
        if len(set(cfgs)) != len(cfgs):
            out.append("prior: duplicate configurations")
        if np.any(probs <= 0):
            out.append("prior normalization: non-positive probability")
        if abs(probs.sum() - 1.0) > PROB_SUM_TOL:
            out.append(f"prior normalization: sum {probs.sum()!r} != 1")
        keys = [cfg.sort_key() for cfg in cfgs]
        if keys != sorted(keys):
            out.append("prior: not in canonical order")
    return out


# ---------------------------------------------------------------------------
# Configuration families (test alternatives)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfigFamily:
    """A set S of configurations defining the alternative hypothesis."""

    kind: str  # any | all | tissue-specific | in-tissue | single-tissue | custom
    tissue: Optional[int] = None
    custom: Optional[frozenset] = None

    _KINDS = ("any", "all", "tissue-specific", "in-tissue", "single-tissue", "custom")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise InputError(f"unknown family kind {self.kind!r}")
        if self.kind in ("in-tissue", "single-tissue") and self.tissue is None:
            raise InputError(f"family {self.kind!r} needs a tissue index")
        if self.kind == "custom":
            if not self.custom:
                raise InputError("custom family must be non-empty")

    @classmethod
    def any_eqtl(cls) -> "ConfigFamily":
        return cls("any")

    @classmethod
    def all_tissues(cls) -> "ConfigFamily":
        return cls("all")

    @classmethod
    def tissue_specific(cls) -> "ConfigFamily":
        return cls("tissue-specific")

    @classmethod
    def in_tissue(cls, k: int) -> "ConfigFamily":
        return cls("in-tissue", tissue=int(k))

    @classmethod
    def single_tissue(cls, k: int) -> "ConfigFamily":
        return cls("single-tissue", tissue=int(k))

    @classmethod
    def custom_set(cls, configs: Iterable, k: int) -> "ConfigFamily":
        cfgs = frozenset(configs)
        if not cfgs:
            raise InputError("custom family must be non-empty")
        if any(c.K != k for c in cfgs):
            raise InputError("custom family configuration length != K")
        if len(cfgs) >= (1 << k):
            raise InputError("custom family must be a strict subset of all configurations")
        return cls("custom", custom=cfgs)

    def matches(self, cfg: Configuration) -> bool:
        h = cfg.hamming
        if self.kind == "any":
            return h > 0
        if self.kind == "all":
            return h == cfg.K
        if self.kind == "tissue-specific":
            return 0 < h < cfg.K
        if self.kind == "in-tissue":
            return cfg.bits[self.tissue] == 1
        if self.kind == "single-tissue":
            return cfg.bits[self.tissue] == 1 and h == 1
        return cfg in self.custom

    def mask(self, configs: Sequence) -> np.ndarray:
        """Boolean membership vector over an ordered configuration list."""
        return np.array([self.matches(c) for c in configs], dtype=bool)

    def label(self, tissues: Optional[TissueSet] = None) -> str:
        if self.kind in ("in-tissue", "single-tissue"):
            t = (tissues.names[self.tissue] if tissues is not None
                 else str(self.tissue))
            return f"{self.kind}:{t}"
        if self.kind == "custom":
            return "custom:" + ",".join(sorted(c.to_string() for c in self.custom))
        return self.kind


@dataclass(frozen=True)
class DiscoverySet:
    """Result of one family test: per-pair lfdrs and the adaptive cut."""

    family: ConfigFamily
    alpha: float
    lfdrs: np.ndarray
    n_reject: int
    rejected: np.ndarray
    achieved_mean_lfdr: float

    def __post_init__(self):
        object.__setattr__(self, "lfdrs", _frozen(self.lfdrs))
        r = np.array(self.rejected, dtype=bool)
        r.setflags(write=False)
        object.__setattr__(self, "rejected", r)


# ---------------------------------------------------------------------------
# Model file format
# ---------------------------------------------------------------------------

def _json_escape(s: str) -> str:
    out = []
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return "".join(out)


def _emit(obj, parts: list) -> None:
    # Minimal JSON writer so reals are printed at exactly 17 significant
    # digits (the stdlib encoder offers no float-format hook).
    if isinstance(obj, str):
        parts.append('"' + _json_escape(obj) + '"')
    elif isinstance(obj, bool):
        parts.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(fmt17(float(obj)))
    elif isinstance(obj, dict):
        parts.append("{")
        for i, (key, val) in enumerate(obj.items()):
            if i:
                parts.append(",")
            parts.append('"' + _json_escape(str(key)) + '":')
            _emit(val, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        parts.append("[")
        for i, val in enumerate(obj):
            if i:
                parts.append(",")
            _emit(val, parts)
        parts.append("]")
    elif obj is None:
        parts.append("null")
    else:
        raise TypeError(f"cannot serialize {type(obj)!r}")


def dumps_json17(obj) -> str:
    parts = []
    _emit(obj, parts)
    return "".join(parts)


def serialize_model(model: FullModel) -> bytes:
    violations = validate(model)
    if violations:
        raise ModelValidationError(violations)
    doc = {
        "version": MODEL_FILE_VERSION,
        "tissues": {
            "names": list(model.tissues.names),
            "n": list(model.tissues.n),
            "c": list(model.tissues.c),
            "d": [float(x) for x in model.tissues.d],
        },
        "delta": model.Delta,
        "sigma": model.Sigma,
        "omega": model.Omega,
        "tau": model.tau,
        "mu": model.mu,
        "prior": [{"bits": cfg.to_string(), "prob": p} for cfg, p in model.prior],
    }
    return (dumps_json17(doc) + "\n").encode("utf-8")


def deserialize_model(data: bytes) -> FullModel:
    import json

    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InputError(f"unparseable model file: {e}")
    try:
        t = doc["tissues"]
        tissues = TissueSet.create(t["names"], t["n"], t["c"], t.get("d"))
        prior = tuple(
            (Configuration.from_string(e["bits"]), float(e["prob"]))
            for e in doc["prior"])
        model = FullModel(
            tissues=tissues,
            Delta=np.array(doc["delta"], dtype=np.float64),
            Sigma=np.array(doc["sigma"], dtype=np.float64),
            Omega=np.array(doc["omega"], dtype=np.float64),
            tau=np.array(doc["tau"], dtype=np.float64),
            prior=prior,
            mu=np.array(doc["mu"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, InputError):
            raise
        raise InputError(f"malformed model file: {e}")
    violations = validate(model)
    if violations:
        raise ModelValidationError(violations)
    return model


def save_model(model: FullModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> FullModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise InputError(f"cannot read model file {path}: {e}")
    return deserialize_model(data)
