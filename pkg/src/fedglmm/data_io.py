"""TSV readers and writers for genotypes, phenotypes, loadings, covariates and results.

Every reader rejects malformed input with a :class:`DataFormatError` that
names the file and line. Lines starting with ``#`` are comments. Floats are
written with 17 significant digits so every writer/reader pair round-trips
exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .containers import CovariateMatrix, GenotypeMatrix, ReferencePanel
from .exceptions import DataFormatError, ParameterError
from .projection import PcLoadings

DEFAULT_MISSING_CAP = 0.1
MISSING = "NA"
_DOSAGE = {"0": 0.0, "1": 1.0, "2": 2.0, MISSING: math.nan}


def fmt_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return MISSING
    return format(x, ".17g")


def parse_float(tok: str, path=None, line=None) -> float:
    if tok == MISSING:
        return math.nan
    try:
        return float(tok)
    except ValueError:
        raise DataFormatError(f"bad numeric token {tok!r}", path, line) from None


def _records(path):
    """Yield ``(line_number, fields)`` for non-comment, non-blank lines."""
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataFormatError(f"cannot open: {exc.strerror}", path) from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def _comments(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.startswith("#"):
                yield lineno, raw.rstrip("\n")


def _write_lines(path, lines: Iterable[str]):
    path = Path(path)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for ln in lines:
                fh.write(ln)
                fh.write("\n")
    except OSError as exc:
        raise DataFormatError(f"cannot write: {exc.strerror}", path) from None


# genotypes -----------------------------------------------------------------

def load_genotypes(path, missing_cap: float = DEFAULT_MISSING_CAP) -> GenotypeMatrix:
    """Read ``ID [CHR POS] sample...`` rows with dosages in {0, 1, 2, NA}."""
    if not 0.0 <= missing_cap <= 1.0:
        raise ParameterError(f"missing_cap must be in [0, 1], got {missing_cap}")
    rows = _records(path)
    try:
        hline, header = next(rows)
    except StopIteration:
        raise DataFormatError("empty genotype file", path) from None
    if header[0] != "ID":
        raise DataFormatError("header must start with ID", path, hline)
    has_pos = header[1:3] == ["CHR", "POS"]
    first = 3 if has_pos else 1
    samples = header[first:]
    if not samples:
        raise DataFormatError("no sample columns", path, hline)
    if len(set(samples)) != len(samples):
        raise DataFormatError("duplicate sample id in header", path, hline)
    width = len(header)

    ids, chroms, poss, data = [], [], [], []
    seen = set()
    too_missing = []
    for lineno, toks in rows:
        if len(toks) != width:
            raise DataFormatError(
                f"expected {width} columns, found {len(toks)}", path, lineno
            )
        vid = toks[0]
        if vid in seen:
            raise DataFormatError(f"duplicate variant id {vid!r}", path, lineno)
        seen.add(vid)
        try:
            vals = [_DOSAGE[t] for t in toks[first:]]
        except KeyError as exc:
            raise DataFormatError(
                f"dosage token {exc.args[0]!r} not in {{0,1,2,NA}}", path, lineno
            ) from None
        arr = np.array(vals)
        if np.isnan(arr).mean() > missing_cap:
            too_missing.append(vid)
        ids.append(vid)
        if has_pos:
            chroms.append(toks[1])
            poss.append(toks[2])
        data.append(arr)
    if too_missing:
        raise DataFormatError(
            f"{len(too_missing)} variants exceed missing fraction {missing_cap}: "
            + ", ".join(too_missing[:10]),
            path,
        )
    D = np.vstack(data) if data else np.empty((0, len(samples)))
    return GenotypeMatrix(
        ids, samples, D, chroms if has_pos else None, poss if has_pos else None
    )


def write_genotypes(G: GenotypeMatrix, path):
    has_pos = G.chromosomes is not None and G.positions is not None
    head = ["ID"] + (["CHR", "POS"] if has_pos else []) + list(G.sample_ids)

    def row(i):
        extra = [str(G.chromosomes[i]), str(G.positions[i])] if has_pos else []
        vals = [fmt_float(v) for v in G.dosages[i]]
        return "\t".join([G.variant_ids[i]] + extra + vals)

    _write_lines(path, ["\t".join(head)] + [row(i) for i in range(G.n_variants)])


def load_reference_panel(path) -> ReferencePanel:
    G = load_genotypes(path, missing_cap=0.0)
    try:
        return ReferencePanel(G.variant_ids, G.dosages, G.sample_ids)
    except ParameterError as exc:
        raise DataFormatError(str(exc), path) from None


def impute_missing(G: GenotypeMatrix) -> GenotypeMatrix:
    """Replace each missing dosage with the variant's observed mean."""
    if not G.has_missing:
        return G
    D = G.dosages.copy()
    miss = np.isnan(D)
    counts = (~miss).sum(axis=1)
    if np.any(counts == 0):
        bad = G.variant_ids[int(np.argmax(counts == 0))]
        raise ParameterError(f"variant {bad!r} has no observed dosages")
    means = np.nansum(D, axis=1) / counts
    D[miss] = np.broadcast_to(means[:, None], D.shape)[miss]
    return GenotypeMatrix(G.variant_ids, G.sample_ids, D, G.chromosomes, G.positions)


def load_plink_raw(path, missing_cap: float = DEFAULT_MISSING_CAP):
    """Read a PLINK ``--recode A`` ``.raw`` export.

    Returns the genotypes and the PHENOTYPE column (NaN where PLINK wrote
    ``NA`` or ``-9``). Variant ids have the trailing ``_<allele>`` removed.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [(i, ln.split()) for i, ln in enumerate(fh, start=1) if ln.strip()]
    if not lines:
        raise DataFormatError("empty .raw file", path)
    hline, header = lines[0]
    fixed = ["FID", "IID", "PAT", "MAT", "SEX", "PHENOTYPE"]
    if header[:6] != fixed:
        raise DataFormatError("header must start with " + " ".join(fixed), path, hline)
    vids = [h.rsplit("_", 1)[0] if "_" in h else h for h in header[6:]]
    samples, pheno, cols = [], [], []
    for lineno, toks in lines[1:]:
        if len(toks) != len(header):
            raise DataFormatError(
                f"expected {len(header)} columns, found {len(toks)}", path, lineno
            )
        samples.append(toks[1])
        ph = toks[5]
        pheno.append(math.nan if ph in ("NA", "-9") else parse_float(ph, path, lineno))
        try:
            cols.append([_DOSAGE[t] for t in toks[6:]])
        except KeyError as exc:
            raise DataFormatError(
                f"dosage token {exc.args[0]!r} not in {{0,1,2,NA}}", path, lineno
            ) from None
    D = np.array(cols, dtype=np.float64).T if cols else np.empty((len(vids), 0))
    over = [v for v, f in zip(vids, np.isnan(D).mean(axis=1)) if f > missing_cap]
    if over:
        raise DataFormatError(
            f"{len(over)} variants exceed missing fraction {missing_cap}: " + ", ".join(over[:10]),
            path,
        )
    try:
        G = GenotypeMatrix(vids, samples, D)
    except ParameterError as exc:
        raise DataFormatError(str(exc), path) from None
    return G, np.array(pheno)


# phenotypes and covariates --------------------------------------------------

def load_phenotypes(path) -> tuple[list, np.ndarray]:
    rows = _records(path)
    try:
        hline, header = next(rows)
    except StopIteration:
        raise DataFormatError("empty phenotype file", path) from None
    if header != ["SAMPLE", "PHENO"]:
        raise DataFormatError("header must be SAMPLE<TAB>PHENO", path, hline)
    ids, vals = [], []
    for lineno, toks in rows:
        if len(toks) != 2:
            raise DataFormatError(f"expected 2 columns, found {len(toks)}", path, lineno)
        if toks[0] in ids:
            raise DataFormatError(f"duplicate sample {toks[0]!r}", path, lineno)
        ids.append(toks[0])
        vals.append(parse_float(toks[1], path, lineno))
    return ids, np.array(vals, dtype=np.float64)


def write_phenotypes(sample_ids, values, path):
    _write_lines(
        path,
        ["SAMPLE\tPHENO"]
        + [f"{s}\t{_fmt_pheno(v)}" for s, v in zip(sample_ids, values)],
    )


def _fmt_pheno(v):
    v = float(v)
    if v.is_integer():
        return str(int(v))
    return fmt_float(v)


def write_covariates(cov: CovariateMatrix, path):
    head = ["SAMPLE"] + [f"PC{k + 1}" for k in range(cov.n_components)]
    lines = ["\t".join(head)]
    for j, s in enumerate(cov.sample_ids):
        lines.append("\t".join([s] + [fmt_float(v) for v in cov.values[:, j]]))
    _write_lines(path, lines)


def load_covariates(path) -> CovariateMatrix:
    rows = _records(path)
    try:
        hline, header = next(rows)
    except StopIteration:
        raise DataFormatError("empty covariate file", path) from None
    k = len(header) - 1
    if header[0] != "SAMPLE" or header[1:] != [f"PC{i + 1}" for i in range(k)]:
        raise DataFormatError("header must be SAMPLE<TAB>PC1..PCk", path, hline)
    ids, vals = [], []
    for lineno, toks in rows:
        if len(toks) != k + 1:
            raise DataFormatError(f"expected {k + 1} columns, found {len(toks)}", path, lineno)
        row = [parse_float(t, path, lineno) for t in toks[1:]]
        if any(math.isnan(v) for v in row):
            raise DataFormatError("missing covariate value", path, lineno)
        ids.append(toks[0])
        vals.append(row)
    try:
        return CovariateMatrix(ids, np.array(vals, dtype=np.float64).reshape(len(ids), k).T)
    except ParameterError as exc:
        raise DataFormatError(str(exc), path) from None


# loadings -------------------------------------------------------------------

EIGEN_TAG = "#EIGENVALUES:"


def write_loadings(loadings: PcLoadings, path):
    k = loadings.n_components
    head = ["VARIANT", "MEAN"] + [f"PC{i + 1}" for i in range(k)]
    lines = [EIGEN_TAG + "\t" + "\t".join(fmt_float(v) for v in loadings.eigenvalues)]
    lines.append("\t".join(head))
    for i, vid in enumerate(loadings.variant_ids):
        vals = [loadings.variant_means[i], *loadings.loadings[i]]
        lines.append("\t".join([vid] + [fmt_float(v) for v in vals]))
    _write_lines(path, lines)


def load_loadings(path) -> PcLoadings:
    eig = None
    for lineno, ln in _comments(path):
        if ln.startswith(EIGEN_TAG):
            toks = [t for t in ln[len(EIGEN_TAG):].split("\t") if t.strip()]
            eig = [parse_float(t.strip(), path, lineno) for t in toks]
    if eig is None:
        raise DataFormatError(f"missing {EIGEN_TAG} comment line", path)
    rows = _records(path)
    try:
        hline, header = next(rows)
    except StopIteration:
        raise DataFormatError("empty loadings file", path) from None
    k = len(header) - 2
    if header[:2] != ["VARIANT", "MEAN"] or header[2:] != [f"PC{i + 1}" for i in range(k)]:
        raise DataFormatError("header must be VARIANT<TAB>MEAN<TAB>PC1..PCk", path, hline)
    if len(eig) != k:
        raise DataFormatError(f"{len(eig)} eigenvalues for {k} components", path)
    ids, means, L = [], [], []
    for lineno, toks in rows:
        if len(toks) != k + 2:
            raise DataFormatError(f"expected {k + 2} columns, found {len(toks)}", path, lineno)
        ids.append(toks[0])
        vals = [parse_float(t, path, lineno) for t in toks[1:]]
        means.append(vals[0])
        L.append(vals[1:])
    if len(set(ids)) != len(ids):
        raise DataFormatError("duplicate variant id", path)
    return PcLoadings(ids, np.array(L).reshape(len(ids), k), np.array(eig), np.array(means))


# results --------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    snp_id: str
    chromosome: str
    position: str
    beta: float
    se: float
    z: float
    p_value: float
    n_iterations: int
    converged: bool
    sigma2: float
    status: str

    def _key(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append("nan" if isinstance(v, float) and math.isnan(v) else v)
        return tuple(out)


RESULT_COLUMNS = ["SNP", "CHR", "POS", "BETA", "SE", "Z", "P", "N_ITER",
                  "CONVERGED", "SIGMA2", "STATUS"]


class ResultsTable:
    """Per-SNP association results in input SNP order."""

    def __init__(self, rows=()):
        self.rows = list(rows)

    @classmethod
    def from_results(cls, results, chromosomes=None, positions=None):
        """Build from AssocResult objects; ``chromosomes`` maps snp_id -> CHR."""
        chromosomes = chromosomes or {}
        positions = positions or {}
        rows = []
        for r in results:
            rows.append(ResultRow(
                r.snp_id,
                str(chromosomes.get(r.snp_id, MISSING)),
                str(positions.get(r.snp_id, MISSING)),
                r.beta, r.se, r.z, r.p_value,
                int(r.n_iterations), bool(r.converged), r.sigma2, r.status,
            ))
        return cls(rows)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __eq__(self, other):
        if not isinstance(other, ResultsTable):
            return NotImplemented
        return [r._key() for r in self.rows] == [r._key() for r in other.rows]

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])


def write_results(table: ResultsTable, path):
    lines = ["\t".join(RESULT_COLUMNS)]
    for r in table.rows:
        lines.append("\t".join([
            r.snp_id, r.chromosome, r.position,
            fmt_float(r.beta), fmt_float(r.se), fmt_float(r.z), fmt_float(r.p_value),
            str(r.n_iterations), "1" if r.converged else "0",
            fmt_float(r.sigma2), r.status,
        ]))
    _write_lines(path, lines)


def load_results(path) -> ResultsTable:
    rows = _records(path)
    try:
        hline, header = next(rows)
    except StopIteration:
        raise DataFormatError("empty results file", path) from None
    if header != RESULT_COLUMNS:
        raise DataFormatError("unexpected results header", path, hline)
    out = []
    for lineno, t in rows:
        if len(t) != len(RESULT_COLUMNS):
            raise DataFormatError(
                f"expected {len(RESULT_COLUMNS)} columns, found {len(t)}", path, lineno)
        if t[8] not in ("0", "1"):
            raise DataFormatError(f"CONVERGED must be 0 or 1, got {t[8]!r}", path, lineno)
        try:
            n_iter = int(t[7])
        except ValueError:
            raise DataFormatError(f"bad N_ITER {t[7]!r}", path, lineno) from None
        f = lambda s: parse_float(s, path, lineno)  # noqa: E731
        out.append(ResultRow(t[0], t[1], t[2], f(t[3]), f(t[4]), f(t[5]), f(t[6]),
                             n_iter, t[8] == "1", f(t[9]), t[10]))
    return ResultsTable(out)


LINEAR_COLUMNS = ["SNP", "BETA", "SE", "T", "P", "STATUS"]


def write_linear_results(scan, path):
    """Write a :class:`~fedglmm.linear.LinearScanResult`."""
    lines = ["\t".join(LINEAR_COLUMNS)]
    for i, vid in enumerate(scan.variant_ids):
        lines.append("\t".join([
            vid, fmt_float(scan.beta[i]), fmt_float(scan.se[i]),
            fmt_float(scan.t[i]), fmt_float(scan.p_value[i]), scan.status[i],
        ]))
    _write_lines(path, lines)


def write_sample_assignment(sample_ids, labels, path):
    _write_lines(path, ["SAMPLE\tSITE"] + [f"{s}\t{int(l)}" for s, l in zip(sample_ids, labels)])


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        os.makedirs(p, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create directory: {exc.strerror}", p) from None
    return p
