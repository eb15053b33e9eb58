"""Attention rollout and per-subject ROI-gene attention weights.

Rollout averages heads, mixes each layer with the identity to account for
the residual path (0.5 A + 0.5 I, rows renormalised) and multiplies the
layers from the last down to the first. The weight of (ROI r, gene g) is the
mean rollout entry over rows at r's image position and columns inside g's
prompt clause.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyTrace(ValueError):
    pass


class MissingSpan(ValueError):
    pass


class EmptyGroup(ValueError):
    pass


@dataclass
class RoiGeneAttentionMap:
    subject_id: str
    stage: str | None
    roi_ids: list[int]
    genes: list[str]
    weights: np.ndarray  # (n_rois, n_genes)

    def get(self, roi_id: int, gene: str) -> float:
        return float(self.weights[self.roi_ids.index(roi_id), self.genes.index(gene)])


def residual_normalize(a: np.ndarray) -> np.ndarray:
    r = 0.5 * a + 0.5 * np.eye(a.shape[-1])
    return r / r.sum(axis=-1, keepdims=True)


def attention_rollout(attentions, row: int = 0) -> np.ndarray:
    """Rollout over layers of head-resolved attention.

    ``attentions`` is a list of (H, T, T) or (B, H, T, T) arrays (batch row
    ``row`` is used) or a ForwardTrace.
    """
    layers = getattr(attentions, "attentions", attentions)
    if not layers:
        raise EmptyTrace("trace holds no attention layers")
    out = None
    for a in layers:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 4:
            a = a[row]
        r = residual_normalize(a.mean(axis=0))
        out = r if out is None else r @ out
    return out


def roi_gene_weights(rollout: np.ndarray, spans, roi_ids, genes, subject_id: str = "",
                     stage: str | None = None) -> RoiGeneAttentionMap:
    """Block means of rollout rows of each ROI over columns of each gene clause."""
    rows: dict[int, list[int]] = {}
    cols: dict[str, list[int]] = {}
    if len(spans) != rollout.shape[0]:
        raise MissingSpan(f"{len(spans)} spans for a {rollout.shape[0]}-position rollout")
    for pos, (kind, value) in enumerate(spans):
        if kind == "image":
            rows.setdefault(value, []).append(pos)
        elif kind == "gene":
            cols.setdefault(value, []).append(pos)
    for r in roi_ids:
        if r not in rows:
            raise MissingSpan(f"no image position for ROI {r}")
    for g in genes:
        if g not in cols:
            raise MissingSpan(f"no prompt positions for gene {g!r}")
    w = np.empty((len(roi_ids), len(genes)))
    for i, r in enumerate(roi_ids):
        sub = rollout[rows[r]]
        for j, g in enumerate(genes):
            w[i, j] = sub[:, cols[g]].mean()
    return RoiGeneAttentionMap(subject_id, stage, list(roi_ids), list(genes), w)


def aggregate_group(maps: list[RoiGeneAttentionMap], stage: str) -> dict[tuple[int, str], np.ndarray]:
    """Per-pair samples over the subjects of ``stage``, in subject-id order."""
    chosen = sorted((m for m in maps if m.stage == stage), key=lambda m: m.subject_id)
    if not chosen:
        raise EmptyGroup(f"no subjects in stage {stage!r}")
    roi_ids, genes = chosen[0].roi_ids, chosen[0].genes
    stack = np.stack([m.weights for m in chosen])
    return {(r, g): stack[:, i, j].copy() for i, r in enumerate(roi_ids) for j, g in enumerate(genes)}


def write_attention(maps: list[RoiGeneAttentionMap], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("subject_id\tstage\troi_id\tgene\tweight\n")
        for m in maps:
            for i, r in enumerate(m.roi_ids):
                for j, g in enumerate(m.genes):
                    fh.write(f"{m.subject_id}\t{m.stage or 'NA'}\t{r}\t{g}\t{m.weights[i, j]:.17g}\n")


def read_attention(path) -> list[RoiGeneAttentionMap]:
    """Inverse of ``write_attention``; ROI and gene order follow first appearance."""
    cells: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["subject_id", "stage", "roi_id", "gene", "weight"]:
            raise ValueError(f"{path}: bad attention header")
        for line in fh:
            if not line.strip():
                continue
            sid, stage, roi, gene, w = line.rstrip("\n").split("\t")
            entry = cells.setdefault(sid, {"stage": None if stage == "NA" else stage, "rois": [], "genes": [], "w": {}})
            roi = int(roi)
            if roi not in entry["rois"]:
                entry["rois"].append(roi)
            if gene not in entry["genes"]:
                entry["genes"].append(gene)
            entry["w"][roi, gene] = float(w)
    out = []
    for sid, e in cells.items():
        w = np.array([[e["w"][r, g] for g in e["genes"]] for r in e["rois"]])
        out.append(RoiGeneAttentionMap(sid, e["stage"], e["rois"], e["genes"], w))
    return out


def weights_tensor(maps: list[RoiGeneAttentionMap]) -> np.ndarray:
    """(subjects, rois, genes) stack in the given map order."""
    return np.stack([m.weights for m in maps])
