"""Closed word-level vocabulary over the prompt grammar."""
from __future__ import annotations

import numpy as np

from ..genome.prompt import GENOME_GRAMMAR_WORDS, template_words
from ..genome.types import STAGES, GenePanel

PAD, BOS, EOS, IMG = "<PAD>", "<BOS>", "<EOS>", "<IMG>"
RESERVED = (PAD, BOS, EOS, IMG)
PAD_ID, BOS_ID, EOS_ID, IMG_ID = 0, 1, 2, 3


class UnknownToken(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"word {self.word!r} is not in the vocabulary"


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {w: i for i, w in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise UnknownToken(word) from None

    def ids(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def words(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def build_vocab(panel: GenePanel) -> Vocab:
    tokens = list(RESERVED)
    for w in template_words() + list(STAGES) + GENOME_GRAMMAR_WORDS + panel.gene_names + panel.snp_ids:
        if w not in tokens:
            tokens.append(w)
    return Vocab(tokens)


def tokenize(text: str, vocab: Vocab, eos: bool = False) -> np.ndarray:
    ids = vocab.ids(text.split())
    if eos:
        ids.append(EOS_ID)
    return np.array(ids, dtype=np.int64)


def detokenize(ids, vocab: Vocab) -> str:
    return " ".join(w for w in vocab.words(ids) if w not in (PAD, BOS, EOS))


def position_spans(words, roi_ids, target_start: int | None = None) -> list[tuple[str, object]]:
    """Label each position of the expanded sequence.

    ``words`` is the text sequence with a single ``<IMG>`` word standing for
    the whole image; it expands to one ``("image", roi_id)`` per ROI. Gene
    clauses become ``("gene", name)``; words from ``target_start`` (a text
    index) onward are ``("target", None)``; the rest are template.
    """
    n = len(words)
    text_spans: list[tuple[str, object]] = [("template", None)] * n
    k = 0
    while k < n:
        if words[k] == "GENE" and k + 2 < n and words[k + 2] == ":":
            gene = words[k + 1]
            end = k + 3
            while end + 2 < n and words[end + 1] == "=" and words[end + 2] in ("0", "1", "2"):
                end += 3
                if end < n and words[end] == ";":
                    end += 1
                else:
                    break
            for j in range(k, end):
                text_spans[j] = ("gene", gene)
            k = end
        else:
            k += 1
    if target_start is not None:
        for j in range(target_start, n):
            text_spans[j] = ("target", None)
    out = []
    for w, span in zip(words, text_spans):
        if w == IMG:
            out.extend(("image", r) for r in roi_ids)
        else:
            out.append(span)
    return out
