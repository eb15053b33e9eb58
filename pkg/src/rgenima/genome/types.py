"""Gene panels, genotype matrices and their TSV formats."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MISSING = -1
STAGES = ("NC", "SMC", "MCI", "AD")


class GenotypeParseError(ValueError):
    pass


@dataclass(frozen=True)
class GenePanel:
    """Ordered gene blocks; SNP order inside a block never changes."""

    genes: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        genes = tuple((str(g), tuple(str(s) for s in snps)) for g, snps in self.genes)
        names = [g for g, _ in genes]
        if len(set(names)) != len(names):
            raise ValueError("gene names must be unique")
        flat = [s for _, snps in genes for s in snps]
        if len(set(flat)) != len(flat):
            raise ValueError("SNP ids must be globally unique")
        object.__setattr__(self, "genes", genes)

    @property
    def gene_names(self) -> list[str]:
        return [g for g, _ in self.genes]

    @property
    def snp_ids(self) -> list[str]:
        return [s for _, snps in self.genes for s in snps]

    def gene_of(self) -> dict[str, str]:
        return {s: g for g, snps in self.genes for s in snps}

    def restrict(self, keep) -> "GenePanel":
        keep = set(keep)
        out = []
        for g, snps in self.genes:
            kept = tuple(s for s in snps if s in keep)
            if kept:
                out.append((g, kept))
        return GenePanel(tuple(out))


@dataclass
class GenotypeMatrix:
    """Subjects x SNPs alternate-allele counts; ``MISSING`` marks no call."""

    subjects: list[str]
    stages: list[str | None]
    panel: GenePanel
    cells: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.shape != (len(self.subjects), len(self.panel.snp_ids)):
            raise ValueError(
                f"cells shape {self.cells.shape} does not match "
                f"{len(self.subjects)} subjects x {len(self.panel.snp_ids)} SNPs"
            )
        bad = ~np.isin(self.cells, (MISSING, 0, 1, 2))
        if bad.any():
            raise ValueError("genotype cells must be 0, 1, 2 or missing")

    @property
    def n_snps(self) -> int:
        return self.cells.shape[1]

    def stage_of(self) -> dict[str, str | None]:
        return dict(zip(self.subjects, self.stages))

    def genome(self, subject_id: str) -> "SubjectGenome":
        row = self.cells[self.subjects.index(subject_id)]
        blocks, j = [], 0
        for g, snps in self.panel.genes:
            blocks.append(GeneBlock(g, snps, tuple(int(v) for v in row[j:j + len(snps)])))
            j += len(snps)
        return SubjectGenome(tuple(blocks))


@dataclass(frozen=True)
class GeneBlock:
    gene: str
    snps: tuple[str, ...]
    values: tuple[int, ...]


@dataclass(frozen=True)
class SubjectGenome:
    blocks: tuple[GeneBlock, ...]


def write_panel(panel: GenePanel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("gene_name\tsnp_id\n")
        for g, snps in panel.genes:
            for s in snps:
                fh.write(f"{g}\t{s}\n")


def read_panel(path) -> GenePanel:
    order: list[str] = []
    members: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "gene_name\tsnp_id":
            raise GenotypeParseError(f"{path}: expected header 'gene_name\\tsnp_id'")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise GenotypeParseError(f"{path}:{lineno}: expected 2 columns")
            g, s = parts
            if g not in members:
                order.append(g)
                members[g] = []
            members[g].append(s)
    return GenePanel(tuple((g, tuple(members[g])) for g in order))


_CELL_TEXT = {MISSING: "NA", 0: "0", 1: "1", 2: "2"}
_TEXT_CELL = {v: k for k, v in _CELL_TEXT.items()}


def write_genotypes(m: GenotypeMatrix, path) -> None:
    gene_of = m.panel.gene_of()
    cols = [f"{gene_of[s]}:{s}" for s in m.panel.snp_ids]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(["subject_id", "stage", *cols]) + "\n")
        for sid, stage, row in zip(m.subjects, m.stages, m.cells):
            cells = [_CELL_TEXT[int(v)] for v in row]
            fh.write("\t".join([sid, stage or "NA", *cells]) + "\n")


def read_genotypes(path) -> GenotypeMatrix:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise GenotypeParseError(f"{path}: empty genotype file")
    header = lines[0].split("\t")
    if header[:2] != ["subject_id", "stage"]:
        raise GenotypeParseError(f"{path}: header must start with subject_id, stage")
    order: list[str] = []
    members: dict[str, list[str]] = {}
    for col in header[2:]:
        if col.count(":") != 1:
            raise GenotypeParseError(f"{path}: SNP column {col!r} is not GENE:RSID")
        g, s = col.split(":")
        if g not in members:
            order.append(g)
            members[g] = []
        elif order[-1] != g:
            raise GenotypeParseError(f"{path}: SNPs of gene {g} are not contiguous")
        members[g].append(s)
    panel = GenePanel(tuple((g, tuple(members[g])) for g in order))

    subjects, stages, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise GenotypeParseError(f"{path}:{lineno}: expected {len(header)} columns, got {len(parts)}")
        subjects.append(parts[0])
        stage = parts[1]
        if stage != "NA" and stage not in STAGES:
            raise GenotypeParseError(f"{path}:{lineno}: unknown stage {stage!r}")
        stages.append(None if stage == "NA" else stage)
        try:
            rows.append([_TEXT_CELL[c] for c in parts[2:]])
        except KeyError as exc:
            raise GenotypeParseError(f"{path}:{lineno}: bad genotype cell {exc.args[0]!r}") from None
    cells = np.array(rows, dtype=np.int8).reshape(len(subjects), len(panel.snp_ids))
    return GenotypeMatrix(subjects, stages, panel, cells)


def read_gene_set(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def write_gene_set(genes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in genes:
            fh.write(f"{g}\n")
