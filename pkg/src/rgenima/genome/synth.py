"""Synthetic imaging-genetics cohorts with planted stage/ROI/gene signal.

Stands in for restricted clinical data. Genotypes are drawn allele by allele
(so each stage group is in Hardy-Weinberg equilibrium), and each planted
(stage, roi, gene, effect) does two things for subjects of that stage:

* raises the alternate-allele frequency of every SNP in ``gene`` by
  ``gene_shift * effect``;
* raises the mean intensity inside ``roi`` by ``effect`` and adds an
  intensity gradient of amplitude ``gradient_gain * effect`` across it (along the first
  axis, zero mean over the ROI's cell), both scaled per subject by that
  subject's risk-allele dosage in ``gene`` (factor
  ``0.5 + 0.5 * dosage / mean_dosage``), which couples the ROI to the gene.

The gradient is there because ROI tokens are standardised per patch, which
cancels most of a uniform shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..seeding import derive_seed, rng_for
from ..volume_io import LabelVolume, RoiTable, Volume
from .types import MISSING, STAGES, GenePanel, GenotypeMatrix

DEFAULT_GENE_NAMES = (
    "APOE", "BIN1", "CLU", "PICALM", "CR1", "ABCA7", "SORL1", "TREM2", "CD33", "MS4A6A",
    "CD2AP", "EPHA1", "PTK2B", "CASS4", "FERMT2", "SLC24A4", "ZCWPW1", "MEF2C", "NME8", "INPP5D",
)

DEFAULT_ROI_NAMES = (
    "Left-Cerebellum-Cortex", "Left-Thalamus", "Left-Caudate", "Left-Putamen",
    "ctx-rh-insula", "ctx-rh-transversetemporal", "ctx-rh-temporalpole", "ctx-rh-frontalpole",
    "Left-Hippocampus", "Right-Hippocampus", "Left-Amygdala", "Right-Amygdala",
)


class UnknownPlantTarget(ValueError):
    pass


@dataclass(frozen=True)
class Plant:
    stage: str
    roi_id: int
    gene: str
    effect: float


@dataclass
class CohortSpec:
    n_per_stage: dict[str, int]
    panel: GenePanel
    roi_table: RoiTable
    planted: list[Plant] = field(default_factory=list)
    cell_size: int = 12
    base_intensity: float = 1.0
    subject_roi_sd: float = 0.3
    noise_sd: float = 0.4
    gradient_gain: float = 3.0
    noise_smoothing: float = 1.0
    gain_range: tuple[float, float] = (0.8, 1.2)
    gene_shift: float = 0.1
    maf_range: tuple[float, float] = (0.2, 0.5)
    missing_rate: float = 0.01


@dataclass
class Cohort:
    genotypes: GenotypeMatrix
    roi_table: RoiTable
    atlas: LabelVolume
    volumes: dict[str, Volume]
    planted: list[Plant]

    @property
    def subjects(self) -> list[str]:
        return self.genotypes.subjects


def default_panel(n_genes: int, n_snps: int) -> GenePanel:
    names = list(DEFAULT_GENE_NAMES[:n_genes])
    names += [f"GENE{i:03d}" for i in range(len(names), n_genes)]
    genes, k = [], 0
    for g in names:
        genes.append((g, tuple(f"rs{1000 + k + i}" for i in range(n_snps))))
        k += n_snps
    return GenePanel(tuple(genes))


def default_roi_table(n_rois: int) -> RoiTable:
    names = list(DEFAULT_ROI_NAMES[:n_rois]) + [f"ROI-{i}" for i in range(len(DEFAULT_ROI_NAMES), n_rois)]
    return RoiTable(tuple((i + 1, names[i]) for i in range(n_rois)))


def default_plants(panel: GenePanel, table: RoiTable, per_stage: int = 3, effect: float = 2.0) -> list[Plant]:
    """Risk genes shared by the disease stages, each coupled to a stage-specific ROI.

    The genes are spread evenly over the panel rather than taken from its
    head, so a bias toward early or late prompt positions cannot pass for
    recovered signal.
    """
    names = panel.gene_names
    if per_stage > len(names):
        raise ValueError(f"{per_stage} plants per stage but only {len(names)} genes")
    step = len(names) / per_stage
    genes = [names[int(i * step + step / 2)] for i in range(per_stage)]
    plants, r = [], 0
    for stage in STAGES[1:]:
        for g in genes:
            plants.append(Plant(stage, table.ids[r % len(table)], g, effect))
            r += 1
    return plants


def _grid_shape(n: int) -> tuple[int, int, int]:
    best = None
    for a in range(1, n + 1):
        for b in range(1, a + 1):
            c = -(-n // (a * b))
            if c > b:
                continue
            key = (a * b * c - n, a - c)
            if best is None or key < best[0]:
                best = (key, (a, b, c))
    return best[1]


def _roi_shape(k: int, cell: int) -> np.ndarray:
    """Union of two ellipsoids at offsets fixed by the ROI's index, so ROIs differ in shape."""
    rng = np.random.default_rng(derive_seed(0, "roi-shape", k))
    xx, yy, zz = np.meshgrid(np.arange(cell), np.arange(cell), np.arange(cell), indexing="ij")
    grid = np.stack([xx, yy, zz], axis=-1).astype(np.float64)
    inside = np.zeros((cell,) * 3, dtype=bool)
    for _ in range(2):
        centre = rng.uniform(0.3, 0.7, size=3) * (cell - 1)
        radii = rng.uniform(0.2, 0.35, size=3) * cell
        inside |= (((grid - centre) / radii) ** 2).sum(axis=-1) <= 1.0
    return inside


def make_atlas(table: RoiTable, cell: int = 12) -> LabelVolume:
    """One ROI per grid cell, each a two-lobed blob with its own shape."""
    gx, gy, gz = _grid_shape(len(table))
    lab = np.zeros((gx * cell, gy * cell, gz * cell), dtype=np.uint32)
    for k, roi_id in enumerate(table.ids):
        i, j, l = k // (gy * gz), (k // gz) % gy, k % gz
        sl = (slice(i * cell, (i + 1) * cell), slice(j * cell, (j + 1) * cell), slice(l * cell, (l + 1) * cell))
        lab[sl][_roi_shape(k, cell)] = roi_id
    return LabelVolume(lab)


def synth_cohort(spec: CohortSpec, seed: int) -> Cohort:
    panel, table = spec.panel, spec.roi_table
    gene_names = set(panel.gene_names)
    for p in spec.planted:
        if p.stage not in STAGES:
            raise UnknownPlantTarget(f"unknown stage {p.stage!r}")
        if p.roi_id not in table.ids:
            raise UnknownPlantTarget(f"unknown ROI {p.roi_id}")
        if p.gene not in gene_names:
            raise UnknownPlantTarget(f"unknown gene {p.gene!r}")

    subjects, stages = [], []
    for stage in STAGES:
        for _ in range(spec.n_per_stage.get(stage, 0)):
            subjects.append(f"S{len(subjects):04d}")
            stages.append(stage)

    snps = panel.snp_ids
    gene_cols = {}
    j = 0
    for g, members in panel.genes:
        gene_cols[g] = slice(j, j + len(members))
        j += len(members)
    base_freq = rng_for(seed, "snp-frequencies").uniform(*spec.maf_range, size=len(snps))

    stage_freq = {}
    for stage in STAGES:
        f = base_freq.copy()
        for p in spec.planted:
            if p.stage == stage:
                f[gene_cols[p.gene]] = np.clip(f[gene_cols[p.gene]] + spec.gene_shift * p.effect, 0.0, 0.95)
        stage_freq[stage] = f

    cells = np.empty((len(subjects), len(snps)), dtype=np.int8)
    for i, (sid, stage) in enumerate(zip(subjects, stages)):
        rng = rng_for(seed, "genotype", sid)
        alleles = rng.random((2, len(snps))) < stage_freq[stage]
        row = alleles.sum(axis=0).astype(np.int8)
        row[rng.random(len(snps)) < spec.missing_rate] = MISSING
        cells[i] = row
    genotypes = GenotypeMatrix(subjects, stages, panel, cells)

    atlas = make_atlas(table, spec.cell_size)
    masks = {roi_id: atlas.data == roi_id for roi_id in table.ids}
    ramp = (np.arange(atlas.dims[0]) % spec.cell_size) / (spec.cell_size - 1) - 0.5
    ramp = np.broadcast_to(ramp[:, None, None], atlas.dims)
    volumes = {}
    for i, (sid, stage) in enumerate(zip(subjects, stages)):
        rng = rng_for(seed, "volume", sid)
        noise = ndimage.gaussian_filter(rng.standard_normal(atlas.dims), spec.noise_smoothing, mode="reflect")
        noise /= noise.std()
        gain = rng.uniform(*spec.gain_range)
        level = spec.base_intensity + spec.subject_roi_sd * rng.standard_normal(len(table))
        slope = np.zeros(len(table))
        for p in spec.planted:
            if p.stage != stage:
                continue
            row = cells[i, gene_cols[p.gene]]
            dosage = float(np.where(row == MISSING, 0, row).sum())
            expected = 2.0 * float(stage_freq[stage][gene_cols[p.gene]].sum())
            scaled = p.effect * (0.5 + 0.5 * dosage / expected)
            level[table.index(p.roi_id)] += scaled
            slope[table.index(p.roi_id)] += spec.gradient_gain * scaled
        img = np.zeros(atlas.dims)
        for k, roi_id in enumerate(table.ids):
            m = masks[roi_id]
            img[m] = gain * (level[k] + slope[k] * ramp[m] + spec.noise_sd * noise[m])
        volumes[sid] = Volume(img.astype(np.float32))
    return Cohort(genotypes, table, atlas, volumes, list(spec.planted))


def roi_mean_intensity(cohort: Cohort, roi_id: int) -> dict[str, float]:
    m = cohort.atlas.data == roi_id
    return {sid: float(v.data[m].mean()) for sid, v in cohort.volumes.items()}


def synth_qc_fixture(n_subjects: int = 200, n_clean: int = 40, n_bad: int = 10, seed: int = 0):
    """Genotype matrix with ``n_bad`` planted failures of each QC kind.

    Returns ``(matrix, expected)`` where ``expected`` maps every planted SNP
    to the reason QC must report for it.
    """
    rng = np.random.default_rng(derive_seed(seed, "qc-fixture"))
    cols, names, expected = [], [], {}

    def hwe_col(p):
        return (rng.random((2, n_subjects)) < p).sum(axis=0)

    for k in range(n_clean):
        cols.append(hwe_col(rng.uniform(0.25, 0.5)))
        names.append(f"rs{k}")
    for k in range(n_bad):
        c = hwe_col(rng.uniform(0.25, 0.5)).astype(np.int64)
        n_miss = int(np.ceil(0.96 * n_subjects))
        c[rng.permutation(n_subjects)[:n_miss]] = MISSING
        cols.append(c)
        names.append(f"rsmiss{k}")
        expected[names[-1]] = "missingness"
    for k in range(n_bad):
        c = np.zeros(n_subjects, dtype=np.int64)
        c[rng.permutation(n_subjects)[: k % 3]] = 1  # MAF at most 1/n
        cols.append(c)
        names.append(f"rsmaf{k}")
        expected[names[-1]] = "maf"
    for k in range(n_bad):
        c = np.ones(n_subjects, dtype=np.int64)  # all heterozygous: extreme HWE excess
        c[rng.permutation(n_subjects)[: k]] = 0
        cols.append(c)
        names.append(f"rshwe{k}")
        expected[names[-1]] = "hwe"

    order = rng.permutation(len(names))
    names = [names[i] for i in order]
    cells = np.stack([cols[i] for i in order], axis=1).astype(np.int8)
    genes = tuple((f"G{i // 5}", tuple(names[i:i + 5])) for i in range(0, len(names), 5))
    panel = GenePanel(tuple((g, s) for g, s in genes))
    subjects = [f"Q{i:04d}" for i in range(n_subjects)]
    stages = [STAGES[i % 4] for i in range(n_subjects)]
    return GenotypeMatrix(subjects, stages, panel, cells), expected
