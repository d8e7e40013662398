"""Data ingestion: covariate residualization, Fisher-transformed
variance-stabilized z-statistics, and the z-matrix file formats (TSV and
the packed HTZ1 binary used on the genome-scale path)."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .datamodel import TissueSet, ZMatrix, fmt17
from .errors import InputError

CORR_CLAMP = 1e-12
BINARY_MAGIC = b"HTZ1"


@dataclass(frozen=True)
class TissueData:
    """One tissue's aligned expression, genotype, and covariate matrices
    (features x samples), with row/column identifiers for lookup."""

    expression: np.ndarray
    genotype: np.ndarray
    covariates: np.ndarray
    sample_ids: tuple
    gene_ids: tuple
    snp_ids: tuple

    def __post_init__(self):
        n = len(self.sample_ids)
        for name, m in (("expression", self.expression),
                        ("genotype", self.genotype),
                        ("covariates", self.covariates)):
            if m.ndim != 2 or m.shape[1] != n:
                raise InputError(
                    f"{name} matrix has {m.shape} but {n} sample ids")
        if self.expression.shape[0] != len(self.gene_ids):
            raise InputError("expression rows != gene ids")
        if self.genotype.shape[0] != len(self.snp_ids):
            raise InputError("genotype rows != snp ids")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[0]


def residualize(Y: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Remove the least-squares projection of each row of Y onto the row
    space of [intercept; C], via a QR decomposition."""
    Y = np.asarray(Y, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if C.size == 0:
        C = C.reshape(0, Y.shape[1])
    n = Y.shape[1]
    c = C.shape[0]
    if C.shape[1] != n:
        raise InputError(f"covariates have {C.shape[1]} samples, data has {n}")
    if n <= c:
        raise InputError(f"need more samples than covariates (n={n}, c={c})")
    X = np.vstack([np.ones((1, n)), C])
    q, r = np.linalg.qr(X.T)
    diag = np.abs(np.diag(r))
    bad = np.nonzero(diag <= 1e-10 * max(diag.max(), 1e-300))[0]
    if bad.size:
        raise InputError(
            f"rank-deficient covariates: row {bad[0] - 1} is linearly "
            "dependent on earlier rows (index -1 = intercept)")
    return Y - (Y @ q) @ q.T


def corr_to_z(r, d):
    """Fisher-transformed correlation scaled to unit null variance:
    atanh(r) * sqrt(d), with r clamped away from +-1."""
    r = np.clip(r, -1.0 + CORR_CLAMP, 1.0 - CORR_CLAMP)
    return np.arctanh(r) * np.sqrt(d)


def compute_z_matrix(data: Sequence[TissueData], pairs: Sequence[Tuple[str, str]],
                     tissues: TissueSet) -> ZMatrix:
    """Residualize expression and genotype per tissue, correlate each
    requested gene-SNP pair, and Fisher-transform into z-statistics."""
    if len(data) != tissues.K:
        raise InputError(f"{len(data)} tissue data sets for {tissues.K} tissues")
    n_pairs = len(pairs)
    values = np.empty((n_pairs, tissues.K))
    for k, td in enumerate(data):
        if td.n_samples != tissues.n[k]:
            raise InputError(
                f"tissue {tissues.names[k]}: {td.n_samples} samples, expected {tissues.n[k]}")
        if td.n_covariates != tissues.c[k]:
            raise InputError(
                f"tissue {tissues.names[k]}: {td.n_covariates} covariates, expected {tissues.c[k]}")
        e_res = residualize(td.expression, td.covariates)
        g_res = residualize(td.genotype, td.covariates)
        e_norm = np.linalg.norm(e_res, axis=1)
        g_norm = np.linalg.norm(g_res, axis=1)
        gene_idx = {g: i for i, g in enumerate(td.gene_ids)}
        snp_idx = {s: i for i, s in enumerate(td.snp_ids)}
        rows_e = np.empty(n_pairs, dtype=np.intp)
        rows_g = np.empty(n_pairs, dtype=np.intp)
        for i, (gene, snp) in enumerate(pairs):
            if gene not in gene_idx:
                raise InputError(f"gene {gene!r} not found in tissue {tissues.names[k]}")
            if snp not in snp_idx:
                raise InputError(f"snp {snp!r} not found in tissue {tissues.names[k]}")
            rows_e[i] = gene_idx[gene]
            rows_g[i] = snp_idx[snp]
        scale_e = np.maximum(1.0, np.linalg.norm(td.expression, axis=1))
        scale_g = np.maximum(1.0, np.linalg.norm(td.genotype, axis=1))
        for i in range(n_pairs):
            if e_norm[rows_e[i]] <= 1e-10 * scale_e[rows_e[i]]:
                raise InputError(
                    f"zero-variance expression residual for pair "
                    f"{pairs[i][0]}:{pairs[i][1]} in tissue {tissues.names[k]}")
            if g_norm[rows_g[i]] <= 1e-10 * scale_g[rows_g[i]]:
                raise InputError(
                    f"zero-variance genotype residual for pair "
                    f"{pairs[i][0]}:{pairs[i][1]} in tissue {tissues.names[k]}")
        num = np.einsum("ij,ij->i", e_res[rows_e], g_res[rows_g])
        r = num / (e_norm[rows_e] * g_norm[rows_g])
        values[:, k] = corr_to_z(r, tissues.d[k])
    pair_ids = tuple(f"{g}:{s}" for g, s in pairs)
    return ZMatrix(pair_ids=pair_ids, values=values, tissues=tissues)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_feature_tsv(path) -> Tuple[tuple, np.ndarray, tuple]:
    """Read a features-x-samples TSV: header of sample ids, first column of
    feature ids. Returns (feature_ids, matrix, sample_ids)."""
    try:
        fh = open(path, "rt", encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}")
    with fh:
        header = fh.readline().rstrip("\n")
        if not header:
            raise InputError(f"{path}: empty file")
        sample_ids = tuple(header.split("\t")[1:])
        ids: List[str] = []
        rows: List[np.ndarray] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(sample_ids) + 1:
                raise InputError(
                    f"{path}:{lineno}: expected {len(sample_ids) + 1} columns, got {len(parts)}")
            ids.append(parts[0])
            try:
                rows.append(np.array(parts[1:], dtype=np.float64))
            except ValueError as e:
                raise InputError(f"{path}:{lineno}: {e}")
    mat = np.array(rows) if rows else np.empty((0, len(sample_ids)))
    return tuple(ids), mat, sample_ids


def read_tissue_dir(dirpath, name: str) -> TissueData:
    def p(fname):
        full = os.path.join(dirpath, fname)
        if not os.path.exists(full):
            raise InputError(f"missing input file: {full}")
        return full

    gene_ids, expr, samp_e = read_feature_tsv(p("expression.tsv"))
    snp_ids, geno, samp_g = read_feature_tsv(p("genotype.tsv"))
    _, cov, samp_c = read_feature_tsv(p("covariates.tsv"))
    if samp_e != samp_g or samp_e != samp_c:
        raise InputError(f"tissue {name}: sample id columns differ across files")
    return TissueData(expression=expr, genotype=geno, covariates=cov,
                      sample_ids=samp_e, gene_ids=gene_ids, snp_ids=snp_ids)


def read_pairs_file(path) -> List[Tuple[str, str]]:
    try:
        fh = open(path, "rt", encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}")
    with fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["gene_id", "snp_id"]:
            raise InputError(f"{path}: expected header 'gene_id<TAB>snp_id'")
        out = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise InputError(f"{path}:{lineno}: expected two columns")
            out.append((parts[0], parts[1]))
    return out


def write_z_tsv(path, z: ZMatrix) -> None:
    with open(path, "wt", encoding="utf-8", newline="\n") as fh:
        fh.write("pair_id\t" + "\t".join(z.tissues.names) + "\n")
        for pid, row in zip(z.pair_ids, z.values):
            fh.write(pid + "\t" + "\t".join(fmt17(v) for v in row) + "\n")


def read_z_tsv(path, tissues: Optional[TissueSet] = None) -> ZMatrix:
    reader = TsvZReader(path, tissues)
    ids: List[str] = []
    chunks = []
    for cid, cvals in reader.iter_chunks():
        ids.extend(cid)
        chunks.append(cvals)
    values = np.vstack(chunks) if chunks else np.empty((0, reader.K))
    return ZMatrix(pair_ids=tuple(ids), values=values, tissues=reader.tissues)


def write_z_binary(path, values_iter, n_rows: int, n_cols: int) -> None:
    """Write the packed little-endian z matrix: magic, u32 N, u32 K, then
    N*K float64. `values_iter` yields row-major float64 chunks."""
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", n_rows, n_cols))
        written = 0
        for chunk in values_iter:
            chunk = np.ascontiguousarray(chunk, dtype="<f8")
            fh.write(chunk.tobytes())
            written += chunk.shape[0]
    if written != n_rows:
        raise InputError(f"binary writer got {written} rows, declared {n_rows}")


class TsvZReader:
    """Streaming reader for the z-matrix TSV format."""

    def __init__(self, path, tissues: Optional[TissueSet] = None):
        self.path = path
        try:
            with open(path, "rt", encoding="utf-8") as fh:
                header = fh.readline().rstrip("\n").split("\t")
        except OSError as e:
            raise InputError(f"cannot read {path}: {e}")
        if len(header) < 2 or header[0] != "pair_id":
            raise InputError(f"{path}: bad z-matrix header")
        names = tuple(header[1:])
        if tissues is not None:
            if tuple(tissues.names) != names:
                raise InputError(
                    f"{path}: tissue columns {names} do not match expected {tissues.names}")
            self.tissues = tissues
        else:
            # Placeholder metadata: sample sizes are not part of this format.
            self.tissues = TissueSet.create(
                names, n=[4] * len(names), c=[0] * len(names))
        self.n_rows: Optional[int] = None

    @property
    def K(self) -> int:
        return self.tissues.K

    def iter_chunks(self, chunk_size: int = 65536) -> Iterator:
        with open(self.path, "rt", encoding="utf-8") as fh:
            fh.readline()
            ids: List[str] = []
            rows: List[List[float]] = []
            total = 0
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != self.K + 1:
                    raise InputError(
                        f"{self.path}:{lineno}: expected {self.K + 1} columns")
                ids.append(parts[0])
                rows.append([float(x) for x in parts[1:]])
                if len(ids) >= chunk_size:
                    total += len(ids)
                    yield tuple(ids), np.array(rows, dtype=np.float64)
                    ids, rows = [], []
            if ids:
                total += len(ids)
                yield tuple(ids), np.array(rows, dtype=np.float64)
            self.n_rows = total


class BinaryZReader:
    """Streaming (memory-mapped) reader for the HTZ1 binary format.

    The binary format carries values only; pair ids are synthesized as
    r<row index> and tissue metadata must be supplied by the caller."""

    def __init__(self, path, tissues: Optional[TissueSet] = None):
        self.path = path
        try:
            with open(path, "rb") as fh:
                magic = fh.read(4)
                if magic != BINARY_MAGIC:
                    raise InputError(f"{path}: bad magic {magic!r}")
                n, k = struct.unpack("<II", fh.read(8))
        except OSError as e:
            raise InputError(f"cannot read {path}: {e}")
        if tissues is not None and tissues.K != k:
            raise InputError(f"{path}: file has K={k}, expected K={tissues.K}")
        self.tissues = tissues if tissues is not None else TissueSet.create(
            [f"t{i + 1:02d}" for i in range(k)], n=[4] * k, c=[0] * k)
        self.n_rows = int(n)
        self._mm = np.memmap(path, dtype="<f8", mode="r", offset=12,
                             shape=(self.n_rows, k))

    @property
    def K(self) -> int:
        return self._mm.shape[1]

    def iter_chunks(self, chunk_size: int = 65536) -> Iterator:
        for lo in range(0, self.n_rows, chunk_size):
            hi = min(lo + chunk_size, self.n_rows)
            ids = tuple(f"r{i:08d}" for i in range(lo, hi))
            yield ids, np.array(self._mm[lo:hi], dtype=np.float64)


def open_z_reader(path, tissues: Optional[TissueSet] = None):
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}")
    if magic == BINARY_MAGIC:
        return BinaryZReader(path, tissues)
    return TsvZReader(path, tissues)


def write_tissues_json(path, tissues: TissueSet) -> None:
    from .datamodel import dumps_json17

    doc = {"names": list(tissues.names), "n": list(tissues.n),
           "c": list(tissues.c), "d": [float(x) for x in tissues.d]}
    with open(path, "wt", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json17(doc) + "\n")


def read_tissues_json(path) -> TissueSet:
    import json

    try:
        with open(path, "rt", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: {e}")
    return TissueSet.create(doc["names"], doc["n"], doc["c"], doc.get("d"))
