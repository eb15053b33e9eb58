"""Gene-block permutation, genome serialization and the instruction prompt.

Genome text grammar::

    GENE <name> : <snp> = <v> ; <snp> = <v> | GENE <name> : ...

All prompt text is whitespace-tokenisable: punctuation is split into
separate words so the word-level tokenizer sees a closed vocabulary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..seeding import derive_seed
from .types import STAGES, GeneBlock, SubjectGenome

IMG_TOKEN = "<IMG>"
GENETIC_SLOT = "{genetic}"

_HEAD = (
    "A chat between a curious user and an artificial intelligence assistant . "
    "The assistant gives helpful , detailed , and polite answers . "
    "Genome Information : {genetic}"
)
_IMAGE_LINE = " Brain Image : <IMG> ."
_TAIL = (
    " Your task is to classify the disease of the subject based on their "
    "Brain Image and Genome Information . "
    "Choose one of the following labels : [ NC , SMC , MCI , AD ] ."
)
MULTIMODAL_TEMPLATE = _HEAD + _IMAGE_LINE + _TAIL
GENE_ONLY_TEMPLATE = _HEAD + _TAIL
TARGET_TEMPLATE = "This subject is {label} ."


class MissingGenotype(ValueError):
    pass


class UnknownLabel(ValueError):
    pass


class GenomeParseError(ValueError):
    pass


@dataclass(frozen=True)
class PromptRecord:
    text: str
    anchor_pos: int | None
    target: str | None
    subject_id: str | None = None


def permute_gene_blocks(g: SubjectGenome, seed: int) -> SubjectGenome:
    """Reorder whole gene blocks with a seeded Fisher-Yates shuffle."""
    order = list(range(len(g.blocks)))
    rng = np.random.default_rng(derive_seed(seed, "gene-blocks"))
    for i in range(len(order) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return SubjectGenome(tuple(g.blocks[i] for i in order))


def serialize_genome(g: SubjectGenome) -> str:
    clauses = []
    for block in g.blocks:
        if any(v not in (0, 1, 2) for v in block.values):
            raise MissingGenotype(f"gene {block.gene} has a missing or invalid genotype")
        snps = " ; ".join(f"{s} = {v}" for s, v in zip(block.snps, block.values))
        clauses.append(f"GENE {block.gene} : {snps}")
    return " | ".join(clauses)


def parse_genome(text: str) -> SubjectGenome:
    """Inverse of :func:`serialize_genome`."""
    blocks = []
    for clause in text.split(" | "):
        words = clause.split(" ")
        if len(words) < 6 or words[0] != "GENE" or words[2] != ":":
            raise GenomeParseError(f"malformed gene clause {clause!r}")
        body = words[3:]
        if (len(body) + 1) % 4 != 0:
            raise GenomeParseError(f"malformed SNP list in {clause!r}")
        snps, values = [], []
        for k in range(0, len(body), 4):
            snp, eq, v = body[k:k + 3]
            if eq != "=" or v not in ("0", "1", "2"):
                raise GenomeParseError(f"malformed SNP entry {' '.join(body[k:k + 3])!r}")
            if k + 3 < len(body) and body[k + 3] != ";":
                raise GenomeParseError(f"expected ';' in {clause!r}")
            snps.append(snp)
            values.append(int(v))
        blocks.append(GeneBlock(words[1], tuple(snps), tuple(values)))
    return SubjectGenome(tuple(blocks))


def build_prompt(genome_text: str, multimodal: bool, label: str | None = None,
                 subject_id: str | None = None) -> PromptRecord:
    if not genome_text.strip():
        raise ValueError("genome text is empty")
    template = MULTIMODAL_TEMPLATE if multimodal else GENE_ONLY_TEMPLATE
    text = template.replace(GENETIC_SLOT, genome_text)
    anchor = text.split(" ").index(IMG_TOKEN) if multimodal else None
    target = None
    if label is not None:
        if label not in STAGES:
            raise UnknownLabel(f"unknown label {label!r}; expected one of {STAGES}")
        target = TARGET_TEMPLATE.format(label=label)
    return PromptRecord(text, anchor, target, subject_id)


def template_words() -> list[str]:
    """Every fixed word the prompts and targets can contain, in first-use order."""
    words: list[str] = []
    text = (MULTIMODAL_TEMPLATE.replace(GENETIC_SLOT, "") + " " + TARGET_TEMPLATE.replace("{label}", ""))
    for w in text.split():
        if w not in words and w != IMG_TOKEN:
            words.append(w)
    return words


GENOME_GRAMMAR_WORDS = ["GENE", ":", "=", ";", "|", "0", "1", "2"]
