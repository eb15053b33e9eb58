"""SNP quality control: missingness, imputation, MAF and exact HWE filtering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .types import MISSING, GenotypeMatrix


class EmptyColumn(ValueError):
    pass


class AllMissing(ValueError):
    pass


class NegativeCount(ValueError):
    pass


@dataclass(frozen=True)
class QcThresholds:
    missingness_max: float = 0.95
    maf_min: float = 0.05
    hwe_p_min: float = 1e-6

    def __post_init__(self):
        for name in ("missingness_max", "maf_min", "hwe_p_min"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class QcReport:
    dropped: list[tuple[str, str, float]] = field(default_factory=list)  # (snp_id, reason, statistic)
    n_input: int = 0
    n_kept: int = 0

    def reasons(self) -> dict[str, str]:
        return {snp: reason for snp, reason, _ in self.dropped}


def column_missingness(col) -> float:
    col = np.asarray(col)
    if col.size == 0:
        raise EmptyColumn("empty genotype column")
    return float(np.count_nonzero(col == MISSING)) / col.size


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def impute_column(col) -> np.ndarray:
    """Fill missing calls with round(2 * p_alt) from the observed calls."""
    col = np.asarray(col, dtype=np.int8)
    observed = col[col != MISSING]
    if observed.size == 0:
        raise AllMissing("cannot impute a column with no observed genotypes")
    fill = _round_half_away(int(observed.sum()) / observed.size)  # 2 * p_alt
    out = col.copy()
    out[out == MISSING] = fill
    return out


def alt_allele_frequency(col) -> float:
    col = np.asarray(col)
    if col.size == 0:
        raise EmptyColumn("empty genotype column")
    return float(col.sum()) / (2 * col.size)


def column_maf(col) -> float:
    col = np.asarray(col)
    if col.size == 0:
        raise EmptyColumn("empty genotype column")
    if np.any(col == MISSING):
        raise ValueError("MAF requires an imputed column")
    p = alt_allele_frequency(col)
    return min(p, 1.0 - p)


def hwe_het_distribution(n_minor: int, n_total: int) -> dict[int, float]:
    """Conditional distribution of heterozygote counts given allele counts.

    Uses the ratio recurrence between neighbouring heterozygote counts,
    starting from the mode, then normalises.
    """
    if n_total <= 0:
        raise ValueError("need at least one genotype")
    if not 0 <= n_minor <= n_total:
        raise ValueError("minor allele count must be in [0, N]")
    n_major = 2 * n_total - n_minor
    mid = n_minor * n_major // (2 * n_total)
    if (mid % 2) != (n_minor % 2):
        mid += 1
    mid = min(mid, n_minor)

    probs = {mid: 1.0}
    # walk down: P(h-2) = P(h) * h (h-1) / (4 (hom_r + 1)(hom_c + 1))
    h = mid
    hom_r = (n_minor - mid) // 2
    hom_c = n_total - mid - hom_r
    p = 1.0
    while h >= 2:
        p = p * h * (h - 1) / (4.0 * (hom_r + 1) * (hom_c + 1))
        h -= 2
        hom_r += 1
        hom_c += 1
        probs[h] = p
    # walk up: P(h+2) = P(h) * 4 hom_r hom_c / ((h+2)(h+1))
    h = mid
    hom_r = (n_minor - mid) // 2
    hom_c = n_total - mid - hom_r
    p = 1.0
    while h <= n_minor - 2:
        p = p * 4.0 * hom_r * hom_c / ((h + 2.0) * (h + 1.0))
        h += 2
        hom_r -= 1
        hom_c -= 1
        probs[h] = p
    total = math.fsum(probs.values())
    return {k: probs[k] / total for k in sorted(probs)}


def hwe_exact_p(n_aa: int, n_ab: int, n_bb: int) -> float:
    """Two-sided exact HWE p-value for genotype counts (hom, het, hom)."""
    if min(n_aa, n_ab, n_bb) < 0:
        raise NegativeCount("genotype counts must be non-negative")
    n_total = n_aa + n_ab + n_bb
    if n_total == 0:
        raise ValueError("need at least one genotype")
    n_a = 2 * n_aa + n_ab
    n_minor = min(n_a, 2 * n_total - n_a)
    dist = hwe_het_distribution(n_minor, n_total)
    p_obs = dist[n_ab]
    p = math.fsum(v for v in dist.values() if v <= p_obs + 1e-12)
    return min(1.0, p)


def genotype_counts(col) -> tuple[int, int, int]:
    col = np.asarray(col)
    return (int(np.count_nonzero(col == 0)), int(np.count_nonzero(col == 1)), int(np.count_nonzero(col == 2)))


def run_qc(m: GenotypeMatrix, t: QcThresholds) -> tuple[GenotypeMatrix, QcReport]:
    """Missingness filter, imputation, MAF filter, then HWE filter."""
    report = QcReport(n_input=m.n_snps)
    snps = m.panel.snp_ids
    cells = m.cells.copy()
    keep = np.ones(len(snps), dtype=bool)

    for j, snp in enumerate(snps):
        miss = column_missingness(cells[:, j])
        if miss > t.missingness_max:
            keep[j] = False
            report.dropped.append((snp, "missingness", miss))
            continue
        cells[:, j] = impute_column(cells[:, j])

    for j, snp in enumerate(snps):
        if not keep[j]:
            continue
        maf = column_maf(cells[:, j])
        if maf < t.maf_min:
            keep[j] = False
            report.dropped.append((snp, "maf", maf))

    for j, snp in enumerate(snps):
        if not keep[j]:
            continue
        p = hwe_exact_p(*genotype_counts(cells[:, j]))
        if p < t.hwe_p_min:
            keep[j] = False
            report.dropped.append((snp, "hwe", p))

    kept = [s for s, k in zip(snps, keep) if k]
    report.n_kept = len(kept)
    panel = m.panel.restrict(kept)
    return GenotypeMatrix(list(m.subjects), list(m.stages), panel, cells[:, keep]), report


def write_qc_report(report: QcReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("snp_id\treason\tstatistic\n")
        for snp, reason, stat in report.dropped:
            fh.write(f"{snp}\t{reason}\t{stat:.17g}\n")


def read_qc_report(path) -> list[tuple[str, str, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "snp_id\treason\tstatistic":
            raise ValueError(f"{path}: bad QC report header")
        for line in fh:
            if line.strip():
                snp, reason, stat = line.rstrip("\n").split("\t")
                rows.append((snp, reason, float(stat)))
    return rows


__all__ = [
    "QcThresholds",
    "QcReport",
    "column_missingness",
    "impute_column",
    "column_maf",
    "hwe_het_distribution",
    "hwe_exact_p",
    "genotype_counts",
    "run_qc",
    "write_qc_report",
    "read_qc_report",
]
