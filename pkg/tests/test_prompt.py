import itertools
import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgenima.genome.prompt import (
    IMG_TOKEN,
    GenomeParseError,
    MissingGenotype,
    UnknownLabel,
    build_prompt,
    parse_genome,
    permute_gene_blocks,
    serialize_genome,
)
from rgenima.genome.synth import default_panel
from rgenima.genome.types import GeneBlock, SubjectGenome
from rgenima.model.vocab import build_vocab, tokenize


def genome(n_genes, n_snps=2, fill=1):
    return SubjectGenome(tuple(
        GeneBlock(f"G{g}", tuple(f"rs{g}_{k}" for k in range(n_snps)), tuple((fill + g + k) % 3 for k in range(n_snps)))
        for g in range(n_genes)))


@st.composite
def genomes(draw):
    n_genes = draw(st.integers(1, 6))
    blocks = []
    for g in range(n_genes):
        n = draw(st.integers(1, 5))
        vals = tuple(draw(st.lists(st.integers(0, 2), min_size=n, max_size=n)))
        blocks.append(GeneBlock(f"GENE{g}", tuple(f"rs{g}x{k}" for k in range(n)), vals))
    return SubjectGenome(tuple(blocks))


class TestPermute:
    def test_single_gene_fixed(self):
        g = genome(1, 4)
        for seed in range(20):
            assert permute_gene_blocks(g, seed) == g

    def test_deterministic(self):
        g = genome(6)
        assert permute_gene_blocks(g, 11) == permute_gene_blocks(g, 11)

    @settings(max_examples=60, deadline=None)
    @given(genomes(), st.integers(0, 2**32))
    def test_blocks_preserved(self, g, seed):
        out = permute_gene_blocks(g, seed)
        key = lambda b: (b.gene, b.snps, b.values)  # noqa: E731
        assert sorted(map(key, out.blocks)) == sorted(map(key, g.blocks))

    def test_uniform_over_orderings(self):
        g = genome(4)
        n = 10_000
        counts = Counter(tuple(b.gene for b in permute_gene_blocks(g, s).blocks) for s in range(n))
        assert set(counts) == set(itertools.permutations([b.gene for b in g.blocks]))
        p = 1 / 24
        sigma = math.sqrt(n * p * (1 - p))
        for c in counts.values():
            assert abs(c - n * p) <= 5 * sigma


class TestSerialize:
    def test_single_clause(self):
        g = SubjectGenome((GeneBlock("G1", ("rs1",), (2,)),))
        assert serialize_genome(g) == "GENE G1 : rs1 = 2"

    def test_two_genes_panel_order(self):
        g = SubjectGenome((GeneBlock("A", ("rs1", "rs2"), (0, 1)), GeneBlock("B", ("rs3",), (2,))))
        assert serialize_genome(g) == "GENE A : rs1 = 0 ; rs2 = 1 | GENE B : rs3 = 2"

    def test_missing_rejected(self):
        with pytest.raises(MissingGenotype):
            serialize_genome(SubjectGenome((GeneBlock("A", ("rs1",), (-1,)),)))

    @settings(max_examples=100, deadline=None)
    @given(genomes())
    def test_round_trip(self, g):
        assert parse_genome(serialize_genome(g)) == g

    @pytest.mark.parametrize("text", ["GENE A rs1 = 0", "GENE A : rs1 = 3", "GENE A : rs1 = 0 rs2 = 1", "GEN A : rs1 = 0"])
    def test_parse_errors(self, text):
        with pytest.raises(GenomeParseError):
            parse_genome(text)


class TestPrompt:
    def test_gene_only_has_no_anchor(self):
        r = build_prompt("GENE G1 : rs1 = 2", multimodal=False)
        assert IMG_TOKEN not in r.text.split()
        assert r.anchor_pos is None

    def test_multimodal_single_anchor(self):
        r = build_prompt("GENE G1 : rs1 = 2", multimodal=True)
        words = r.text.split()
        assert words.count(IMG_TOKEN) == 1
        assert words[r.anchor_pos] == IMG_TOKEN

    def test_template_text(self):
        r = build_prompt("GENE G1 : rs1 = 2", multimodal=True)
        assert r.text.startswith("A chat between a curious user and an artificial intelligence assistant .")
        assert "Genome Information : GENE G1 : rs1 = 2 Brain Image : <IMG> ." in r.text
        assert r.text.endswith("Choose one of the following labels : [ NC , SMC , MCI , AD ] .")

    def test_target_tokens(self):
        panel = default_panel(2, 2)
        vocab = build_vocab(panel)
        r = build_prompt("GENE G1 : rs1 = 2", multimodal=False, label="AD")
        assert vocab.words(tokenize(r.target, vocab))[-5:] == ["This", "subject", "is", "AD", "."]

    def test_unknown_label(self):
        with pytest.raises(UnknownLabel):
            build_prompt("GENE G1 : rs1 = 2", multimodal=False, label="XX")

    def test_empty_genome_text(self):
        with pytest.raises(ValueError):
            build_prompt("  ", multimodal=False)
