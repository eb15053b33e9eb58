"""Bootstrap stability of ROI-gene attention and stable-feature selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..seeding import derive_seed


class EmptySample(ValueError):
    pass


class TopKExceedsFeatures(ValueError):
    pass


@dataclass(frozen=True)
class StabilityConfig:
    n_bootstrap: int = 1000
    ci_lo: float = 2.5
    ci_hi: float = 97.5
    selection_threshold: float = 0.5
    top_k_genes: int = 45
    top_k_rois: int = 10
    epsilon_width: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ci_lo < self.ci_hi < 100.0:
            raise ValueError("need 0 < ci_lo < ci_hi < 100")
        if self.n_bootstrap < 1:
            raise ValueError("n_bootstrap must be at least 1")
        if not 0.0 < self.selection_threshold < 1.0:
            raise ValueError("selection_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class StabilityRecord:
    roi_id: int
    gene: str
    boot_mean: float
    ci_lo_value: float
    ci_hi_value: float
    stability: float


def bootstrap_indices(n: int, n_boot: int, seed: int) -> np.ndarray:
    """(B, n) resampling indices; row b comes from its own stream seeded by (seed, b)."""
    if n < 1:
        raise EmptySample("cannot resample an empty sample")
    out = np.empty((n_boot, n), dtype=np.int64)
    for b in range(n_boot):
        out[b] = np.random.default_rng(derive_seed(seed, "bootstrap", b)).integers(0, n, size=n)
    return out


def bootstrap_means(x, n_boot: int, seed: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptySample("cannot resample an empty sample")
    return x[bootstrap_indices(x.size, n_boot, seed)].mean(axis=1)


def percentile(values, p: float) -> float:
    """Linear interpolation between order statistics at rank (n - 1) * p / 100."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise EmptySample("percentile of an empty sample")
    if not 0.0 <= p <= 100.0:
        raise ValueError("p must lie in [0, 100]")
    h = (v.size - 1) * p / 100.0
    lo = int(math.floor(h))
    if lo >= v.size - 1:
        return float(v[-1])
    return float(v[lo] + (h - lo) * (v[lo + 1] - v[lo]))


def stability_score(boot_mean: float, ci_lo_value: float, ci_hi_value: float, eps: float = 1e-12) -> float:
    """Bootstrap mean over CI width; ``eps`` floors the width."""
    return boot_mean / max(ci_hi_value - ci_lo_value, eps)


def _percentile_rows(sorted_rows: np.ndarray, p: float) -> np.ndarray:
    n = sorted_rows.shape[-1]
    h = (n - 1) * p / 100.0
    lo = int(math.floor(h))
    if lo >= n - 1:
        return sorted_rows[..., -1]
    return sorted_rows[..., lo] + (h - lo) * (sorted_rows[..., lo + 1] - sorted_rows[..., lo])


def stability_records(samples: dict[tuple[int, str], np.ndarray], cfg: StabilityConfig) -> list[StabilityRecord]:
    """Stability of every pair for one group, sorted by descending stability.

    All pairs in a group share the subjects, so they share one resampling
    matrix; each pair's replicate means are exactly what
    ``bootstrap_means(x, B, seed)`` returns for it.
    """
    if not samples:
        return []
    keys = sorted(samples)
    x = np.stack([np.asarray(samples[k], dtype=np.float64) for k in keys])
    if x.shape[1] == 0:
        raise EmptySample("empty group sample")
    idx = bootstrap_indices(x.shape[1], cfg.n_bootstrap, cfg.seed)
    reps = np.stack([x[i][idx].mean(axis=1) for i in range(len(keys))])  # (pairs, B)
    boot_mean = reps.mean(axis=1)
    srt = np.sort(reps, axis=1)
    lo = _percentile_rows(srt, cfg.ci_lo)
    hi = _percentile_rows(srt, cfg.ci_hi)
    recs = [StabilityRecord(k[0], k[1], float(m), float(a), float(b),
                            stability_score(float(m), float(a), float(b), cfg.epsilon_width))
            for k, m, a, b in zip(keys, boot_mean, lo, hi)]
    recs.sort(key=lambda r: (-r.stability, r.roi_id, r.gene))
    return recs


def stability_table(groups: dict[str, dict[tuple[int, str], np.ndarray]], cfg: StabilityConfig
                    ) -> dict[str, list[StabilityRecord]]:
    return {stage: stability_records(samples, cfg) for stage, samples in groups.items()}


def replicate_feature_scores(weights: np.ndarray, axis: str, n_boot: int, seed: int) -> np.ndarray:
    """Per-replicate importance of each gene or ROI.

    ``weights`` is (subjects, rois, genes). Each replicate resamples subjects
    and scores a feature by its mean weight over the resampled subjects and
    the other axis. Returns (B, features).
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] == 0:
        raise EmptySample("no subjects")
    per_subject = w.mean(axis=1) if axis == "gene" else w.mean(axis=2)
    idx = bootstrap_indices(w.shape[0], n_boot, seed)
    return per_subject[idx].mean(axis=1)


def select_stable_features(per_iteration_scores, names, top_k: int, threshold: float
                           ) -> tuple[list[str], dict[str, float]]:
    """Features in the per-iteration top-k in more than ``threshold`` of iterations.

    Ties within an iteration go to the lexicographically smaller name.
    Returns (selected names in name order, appearance frequency of every feature).
    """
    scores = np.asarray(per_iteration_scores, dtype=np.float64)
    names = list(names)
    n_iter, n_feat = scores.shape
    if top_k > n_feat:
        raise TopKExceedsFeatures(f"top_k={top_k} exceeds {n_feat} features")
    name_rank = np.argsort(np.argsort(np.array(names, dtype=object)))
    counts = np.zeros(n_feat, dtype=np.int64)
    for row in scores:
        order = np.lexsort((name_rank, -row))
        counts[order[:top_k]] += 1
    freq = {n: counts[i] / n_iter for i, n in enumerate(names)}
    selected = sorted(n for i, n in enumerate(names) if counts[i] > threshold * n_iter)
    return selected, freq


def write_stability(table: dict[str, list[StabilityRecord]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("stage\troi_id\tgene\tboot_mean\tci_lo\tci_hi\tstability\trank\n")
        for stage in table:
            for rank, r in enumerate(table[stage], start=1):
                fh.write(f"{stage}\t{r.roi_id}\t{r.gene}\t{r.boot_mean:.17g}\t{r.ci_lo_value:.17g}\t"
                         f"{r.ci_hi_value:.17g}\t{r.stability:.17g}\t{rank}\n")


def read_stability(path) -> dict[str, list[StabilityRecord]]:
    out: dict[str, list[StabilityRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["stage", "roi_id", "gene", "boot_mean", "ci_lo", "ci_hi", "stability", "rank"]:
            raise ValueError(f"{path}: bad stability header")
        for line in fh:
            if not line.strip():
                continue
            st, roi, gene, m, lo, hi, s, _ = line.rstrip("\n").split("\t")
            out.setdefault(st, []).append(StabilityRecord(int(roi), gene, float(m), float(lo), float(hi), float(s)))
    return out
