"""One-sided hypergeometric (Fisher "greater") enrichment of a gene selection."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass


class InvalidTable(ValueError):
    pass


class NotInUniverse(ValueError):
    def __init__(self, gene):
        super().__init__(f"gene {gene!r} is not in the universe")
        self.gene = gene


@dataclass(frozen=True)
class ContingencyTable:
    a: int  # selected and reference
    b: int  # selected only
    c: int  # reference only
    d: int  # neither


@dataclass(frozen=True)
class EnrichmentResult:
    p: float
    odds_ratio: float
    table: ContingencyTable
    corrected: bool

    def to_json(self) -> str:
        t = self.table
        return json.dumps({"a": t.a, "b": t.b, "c": t.c, "d": t.d, "p": self.p,
                           "odds_ratio": self.odds_ratio, "corrected_flag": self.corrected},
                          sort_keys=True, separators=(",", ":"))


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def hypergeom_pmf(k: int, K: int, n: int, N: int) -> float:
    """P(X = k): k reference hits in a draw of n from N items holding K references."""
    if k < max(0, n - (N - K)) or k > min(K, n):
        return 0.0
    return math.exp(_log_comb(K, k) + _log_comb(N - K, n - k) - _log_comb(N, n))


def hypergeom_tail(a: int, K: int, n: int, N: int) -> float:
    """P(X >= a) by exact summation of log-factorial point masses."""
    if min(a, K, n, N) < 0 or K > N or n > N or a > min(K, n):
        raise InvalidTable(f"invalid hypergeometric arguments a={a}, K={K}, n={n}, N={N}")
    lo = max(a, n - (N - K), 0)
    if lo == max(0, n - (N - K)):
        return 1.0
    terms = [hypergeom_pmf(k, K, n, N) for k in range(lo, min(K, n) + 1)]
    return min(1.0, math.fsum(terms))


def contingency(selected, reference, universe) -> ContingencyTable:
    sel, ref, uni = set(selected), set(reference), set(universe)
    for g in sorted(sel | ref):
        if g not in uni:
            raise NotInUniverse(g)
    a = len(sel & ref)
    b = len(sel) - a
    c = len(ref) - a
    return ContingencyTable(a, b, c, len(uni) - a - b - c)


def odds_ratio(t: ContingencyTable) -> tuple[float, bool]:
    """Sample cross-product odds ratio; +0.5 on every cell when any cell is zero."""
    if min(t.a, t.b, t.c, t.d) == 0:
        return ((t.a + 0.5) * (t.d + 0.5)) / ((t.b + 0.5) * (t.c + 0.5)), True
    return (t.a * t.d) / (t.b * t.c), False


def fisher_enrichment(selected, reference, universe) -> EnrichmentResult:
    t = contingency(selected, reference, universe)
    n_ref, n_sel = t.a + t.c, t.a + t.b
    p = hypergeom_tail(t.a, n_ref, n_sel, t.a + t.b + t.c + t.d)
    ratio, corrected = odds_ratio(t)
    return EnrichmentResult(p, ratio, t, corrected)
