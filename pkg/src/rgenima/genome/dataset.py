"""Prompt datasets in the three configurations: gene_only, image_gene, mixture."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..seeding import derive_seed, rng_for
from .prompt import build_prompt, permute_gene_blocks, serialize_genome
from .types import STAGES, GenotypeMatrix

MODES = ("gene_only", "image_gene", "mixture")


class InsufficientSubjects(ValueError):
    pass


class MissingPatchSet(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    mode: str = "image_gene"
    train_count: int = 720
    test_count: int = 60
    seed: int = 0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.train_count < 0 or self.test_count < 0:
            raise ValueError("record counts must be non-negative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class DatasetRecord:
    subject_id: str
    prompt: str
    target: str
    anchor: bool
    patch_path: str | None
    stage: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        d = json.loads(line)
        return cls(d["subject_id"], d["prompt"], d["target"], bool(d["anchor"]), d["patch_path"], d["stage"])


@dataclass
class Dataset:
    train: list[DatasetRecord] = field(default_factory=list)
    test: list[DatasetRecord] = field(default_factory=list)
    train_subjects: list[str] = field(default_factory=list)
    test_subjects: list[str] = field(default_factory=list)


def split_subjects(subjects, stages, test_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Stage-stratified subject-level split; each stage contributes floor(f * n + 0.5) test subjects."""
    train, test = [], []
    for stage in STAGES:
        members = sorted(s for s, st in zip(subjects, stages) if st == stage)
        if not members:
            continue
        order = rng_for(seed, "split", stage).permutation(len(members))
        n_test = math.floor(test_fraction * len(members) + 0.5)
        if len(members) > 1:
            n_test = min(max(n_test, 1), len(members) - 1)
        test += [members[i] for i in order[:n_test]]
        train += [members[i] for i in order[n_test:]]
    return sorted(train), sorted(test)


def _records(genotypes: GenotypeMatrix, subjects: list[str], count: int, mode: str,
             patch_paths: dict[str, str], seed: int, split: str) -> list[DatasetRecord]:
    if count == 0:
        return []
    if not subjects:
        raise InsufficientSubjects(f"no subjects available for the {split} split")
    stage_of = genotypes.stage_of()
    rng = rng_for(seed, "records", split)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    slots = []  # (subject, copy index)
    copies: dict[str, int] = {}
    for k in range(count):
        sid = order[k % len(order)]
        slots.append((sid, copies.get(sid, 0)))
        copies[sid] = copies.get(sid, 0) + 1

    if mode == "gene_only":
        paired = [False] * count
    elif mode == "image_gene":
        paired = [True] * count
    else:
        n_paired = math.ceil(count / 2)
        flags = np.zeros(count, dtype=bool)
        flags[rng.permutation(count)[:n_paired]] = True
        paired = [bool(f) for f in flags]

    seen: dict[str, set] = {}
    records = []
    for (sid, copy), anchored in zip(slots, paired):
        if anchored and sid not in patch_paths:
            raise MissingPatchSet(f"subject {sid} has no patch set")
        genome = genotypes.genome(sid)
        n_orders = math.factorial(len(genome.blocks))
        used = seen.setdefault(sid, set())
        attempt = 0
        while True:
            permuted = permute_gene_blocks(genome, derive_seed(seed, "permute", split, sid, copy, attempt))
            key = tuple(b.gene for b in permuted.blocks)
            if key not in used or len(used) >= n_orders:
                break
            attempt += 1
        used.add(key)
        prompt = build_prompt(serialize_genome(permuted), anchored, stage_of[sid], sid)
        records.append(DatasetRecord(sid, prompt.text, prompt.target, anchored,
                                     patch_paths.get(sid) if anchored else None, stage_of[sid]))
    return [records[i] for i in rng.permutation(count)]


def build_dataset(genotypes: GenotypeMatrix, patch_paths: dict[str, str], config: DatasetConfig) -> Dataset:
    """Augmented prompt records with a subject-level train/test split.

    ``genotypes`` must be post-QC (no missing calls). ``patch_paths`` maps
    subject ids to patch-set files; anchored records need one.
    """
    labelled = [(s, st) for s, st in zip(genotypes.subjects, genotypes.stages) if st is not None]
    if config.mode == "image_gene":
        labelled = [(s, st) for s, st in labelled if s in patch_paths]
    if len(labelled) < 2:
        raise InsufficientSubjects("need at least two labelled subjects")
    subjects, stages = zip(*labelled)
    train_ids, test_ids = split_subjects(subjects, stages, config.test_fraction, config.seed)
    if config.mode != "gene_only":
        missing = [s for s in train_ids + test_ids if s not in patch_paths]
        if missing and config.mode == "mixture":
            raise MissingPatchSet(f"subject {missing[0]} has no patch set")
    return Dataset(
        _records(genotypes, train_ids, config.train_count, config.mode, patch_paths, config.seed, "train"),
        _records(genotypes, test_ids, config.test_count, config.mode, patch_paths, config.seed, "test"),
        train_ids,
        test_ids,
    )


def write_records(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord.from_json(line) for line in fh if line.strip()]
