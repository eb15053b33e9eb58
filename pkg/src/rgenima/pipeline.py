"""Pipeline stages over a run directory.

Each stage reads its inputs from the run directory (or the paths given in
the config), writes its artifacts under ``<out>/<stage>/`` and returns the
written paths. Paths stored inside artifacts are relative to ``<out>`` so
two runs in different directories produce identical bytes.
"""
from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import attribution as attr
from .config import ConfigError, RunConfig
from .genome import synth
from .genome.dataset import DatasetConfig, build_dataset, read_records, write_records
from .genome.prompt import build_prompt, serialize_genome
from .genome.qc import QcThresholds, run_qc, write_qc_report
from .genome.types import STAGES, read_gene_set, read_genotypes, read_panel, write_gene_set, write_genotypes
from .model import core
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.train import (ImageStore, TrainConfig, confusion_from_predictions, encode_record, predict, train)
from .model.vocab import Vocab, build_vocab
from .roi import patch_set_from_volume, read_patch_set, write_patch_set
from .seeding import derive_seed
from .stats.bootstrap import (StabilityConfig, read_stability, replicate_feature_scores, select_stable_features,
                              stability_records, write_stability)
from .stats.enrichment import fisher_enrichment
from .stats.metrics import classification_metrics, write_confusion, write_metrics
from .volume_io import read_labels, read_roi_table, read_volume, write_labels, write_roi_table, write_volume

log = logging.getLogger(__name__)


class EmptyResult(RuntimeError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


class UnknownRoiInFilter(ConfigError):
    pass


def _out(cfg: RunConfig) -> Path:
    return Path(cfg["run"]["out"])


def _stage_dir(cfg: RunConfig, name: str) -> Path:
    d = _out(cfg) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing input {p}")
    return p


def _path(cfg: RunConfig, key: str, default: str) -> Path:
    given = cfg["paths"][key]
    return Path(given) if given else _out(cfg) / default


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------- synth

def run_synth(cfg: RunConfig) -> dict[str, Path]:
    s = cfg["synth"]
    seed = cfg["run"]["seed"]
    panel = synth.default_panel(s["n_genes"], s["snps_per_gene"])
    table = synth.default_roi_table(s["n_rois"])
    plants = synth.default_plants(panel, table, s["plants_per_stage"], s["effect"])
    spec = synth.CohortSpec({st: s["n_per_stage"] for st in STAGES}, panel, table, plants,
                            cell_size=s["cell_size"], noise_sd=s["noise_sd"], gene_shift=s["gene_shift"],
                            missing_rate=s["missing_rate"])
    cohort = synth.synth_cohort(spec, seed)
    d = _stage_dir(cfg, "synth")
    (d / "volumes").mkdir(exist_ok=True)
    write_genotypes(cohort.genotypes, d / "genotypes.tsv")
    write_roi_table(table, d / "roi_table.tsv")
    write_labels(cohort.atlas, d / "atlas.rvol")
    for sid in cohort.subjects:
        write_volume(cohort.volumes[sid], d / "volumes" / f"{sid}.rvol")
    with open(d / "planted.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.write("stage\troi_id\tgene\teffect\n")
        for p in plants:
            fh.write(f"{p.stage}\t{p.roi_id}\t{p.gene}\t{_fmt(p.effect)}\n")
    write_gene_set(sorted({p.gene for p in plants}), d / "reference_genes.txt")
    return {"genotypes": d / "genotypes.tsv", "planted": d / "planted.tsv"}


def read_planted(path) -> list[synth.Plant]:
    out = []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            if line.strip():
                st, roi, gene, eff = line.rstrip("\n").split("\t")
                out.append(synth.Plant(st, int(roi), gene, float(eff)))
    return out


# ---------------------------------------------------------------- qc

def run_qc_stage(cfg: RunConfig) -> dict[str, Path]:
    q = cfg["qc"]
    try:
        thresholds = QcThresholds(q["missingness_max"], q["maf_min"], q["hwe_p_min"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    m = read_genotypes(_need(_path(cfg, "genotypes", "synth/genotypes.tsv")))
    if cfg["paths"]["panel"]:
        panel = read_panel(_need(cfg["paths"]["panel"])).restrict(m.panel.snp_ids)
        cols = [m.panel.snp_ids.index(s) for s in panel.snp_ids]
        m = type(m)(m.subjects, m.stages, panel, m.cells[:, cols])
    kept, report = run_qc(m, thresholds)
    d = _stage_dir(cfg, "qc")
    write_qc_report(report, d / "qc_report.tsv")
    if report.n_kept == 0:
        raise EmptyResult("no SNPs survive quality control")
    write_genotypes(kept, d / "genotypes.qc.tsv")
    log.info("qc kept %d of %d SNPs", report.n_kept, report.n_input)
    return {"report": d / "qc_report.tsv", "genotypes": d / "genotypes.qc.tsv"}


# ---------------------------------------------------------------- dataset

def _roi_table(cfg):
    return read_roi_table(_need(_path(cfg, "roi_table", "synth/roi_table.tsv")))


def _pmap(cfg: RunConfig, fn, items) -> list:
    """``[fn(x) for x in items]`` on ``[run] threads`` workers; results keep input order."""
    items = list(items)
    n = cfg["run"]["threads"]
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def run_dataset(cfg: RunConfig) -> dict[str, Path]:
    dc = cfg["dataset"]
    out = _out(cfg)
    geno = read_genotypes(_need(out / "qc" / "genotypes.qc.tsv"))
    d = _stage_dir(cfg, "dataset")
    patch_paths: dict[str, str] = {}
    if dc["mode"] != "gene_only":
        table = _roi_table(cfg)
        atlas = read_labels(_need(_path(cfg, "atlas", "synth/atlas.rvol")))
        vol_dir = _path(cfg, "volumes", "synth/volumes")
        (d / "patches").mkdir(exist_ok=True)
        present = [sid for sid in geno.subjects if (vol_dir / f"{sid}.rvol").exists()]

        def extract(sid):
            ps = patch_set_from_volume(read_volume(vol_dir / f"{sid}.rvol"), atlas, table, dc["patch_size"], sid)
            write_patch_set(ps, out / f"dataset/patches/{sid}.rpat")

        _pmap(cfg, extract, present)
        patch_paths = {sid: f"dataset/patches/{sid}.rpat" for sid in present}
    ds = build_dataset(geno, patch_paths, DatasetConfig(dc["mode"], dc["train_count"], dc["test_count"],
                                                         derive_seed(cfg["run"]["seed"], "dataset"),
                                                         dc["test_fraction"]))
    write_records(ds.train, d / "train.jsonl")
    write_records(ds.test, d / "test.jsonl")
    with open(d / "split.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.write("subject_id\tsplit\n")
        for sid in sorted(ds.train_subjects + ds.test_subjects):
            fh.write(f"{sid}\t{'test' if sid in set(ds.test_subjects) else 'train'}\n")
    return {"train": d / "train.jsonl", "test": d / "test.jsonl"}


# ---------------------------------------------------------------- train / eval

def _model_config(cfg: RunConfig, vocab: Vocab, n_rois: int, max_len: int) -> core.ModelConfig:
    m = cfg["model"]
    return core.ModelConfig(vocab_size=len(vocab), d_model=m["d_model"], n_heads=m["n_heads"],
                            n_layers_text=m["n_layers_text"], n_layers_rit=m["n_layers_rit"],
                            patch_size=cfg["dataset"]["patch_size"], n_rois=n_rois, max_seq_len=max_len)


def _store(out: Path) -> ImageStore:
    return ImageStore(lambda rel: read_patch_set(_need(out / rel)))


def _encode_all(records, vocab, table):
    return [encode_record(r.prompt, r.target, vocab, len(table), table.ids, r.subject_id, r.stage, r.patch_path)
            for r in records]


def run_train(cfg: RunConfig) -> dict[str, Path]:
    out = _out(cfg)
    t = cfg["train"]
    geno = read_genotypes(_need(out / "qc" / "genotypes.qc.tsv"))
    records = read_records(_need(out / "dataset" / "train.jsonl"))
    if not records:
        raise EmptyResult("training set is empty")
    table = _roi_table(cfg)
    vocab = build_vocab(geno.panel)
    enc = _encode_all(records, vocab, table)
    longest = max(len(e.labels) for e in enc)
    mcfg = _model_config(cfg, vocab, len(table), longest + 16)
    tcfg = TrainConfig(lr=t["lr"], betas=(t["beta1"], t["beta2"]), eps=t["adam_eps"], epochs=t["epochs"],
                       batch_size=t["batch_size"], seed=derive_seed(cfg["run"]["seed"], "train"),
                       rit_lr=t["rit_lr"], rit_epochs=t["rit_epochs"], rit_batch_size=t["rit_batch_size"],
                       max_steps=t["max_steps"])
    result = train(enc, mcfg, tcfg, _store(out))
    d = _stage_dir(cfg, "train")
    save_checkpoint(d / "model.rgma", result.params, mcfg)
    vocab.save(d / "vocab.txt")
    with open(d / "loss.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.write("stage\tstep\tloss\n")
        for name, curve in (("encoder", result.stage1_curve), ("generative", result.stage2_curve)):
            for i, v in enumerate(curve):
                fh.write(f"{name}\t{i}\t{_fmt(v)}\n")
    return {"checkpoint": d / "model.rgma", "vocab": d / "vocab.txt", "loss": d / "loss.tsv"}


def load_model(out: Path):
    params, mcfg = load_checkpoint(_need(out / "train" / "model.rgma"))
    vocab = Vocab.load(_need(out / "train" / "vocab.txt"))
    return params, mcfg, vocab


def run_eval(cfg: RunConfig) -> dict[str, Path]:
    out = _out(cfg)
    params, mcfg, vocab = load_model(out)
    records = read_records(_need(out / "dataset" / "test.jsonl"))
    if not records:
        raise EmptyResult("test set is empty")
    table = _roi_table(cfg)
    enc = _encode_all(records, vocab, table)
    preds = predict(params, mcfg, vocab, enc, _store(out), max_len=cfg["eval"]["max_len"],
                    map_fn=lambda fn, xs: _pmap(cfg, fn, xs))
    conf, unparsed = confusion_from_predictions([r.stage for r in records], preds)
    report = classification_metrics(conf, STAGES, unparsed)
    d = _stage_dir(cfg, "eval")
    with open(d / "predictions.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.write("record\tsubject_id\tstage\tanchor\tpredicted\n")
        for i, (r, p) in enumerate(zip(records, preds)):
            fh.write(f"{i}\t{r.subject_id}\t{r.stage}\t{int(r.anchor)}\t{p}\n")
    write_confusion(conf, d / "confusion.tsv", STAGES, unparsed)
    write_metrics(report, d / "metrics.tsv")
    log.info("held-out accuracy %.4f, macro-F1 %.4f", report.accuracy, report.macro_f1)
    return {"metrics": d / "metrics.tsv", "confusion": d / "confusion.tsv", "predictions": d / "predictions.tsv"}


def read_accuracy(path) -> float:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("summary\t"):
                return float(line.split("\t")[1].split("=")[1])
    raise ValueError(f"{path}: no summary row")


# ---------------------------------------------------------------- attribution

def subject_attention(params, mcfg, vocab, genome, std_patches, roi_ids, subject_id, stage):
    """ROI-gene rollout weights for one subject's prompt in panel gene order."""
    prompt = build_prompt(serialize_genome(genome), True, None, subject_id)
    e = encode_record(prompt.text, None, vocab, len(roi_ids), roi_ids, subject_id, stage)
    trace = core.forward(params, mcfg, e.ids, e.anchor, std_patches=std_patches[None], keep_cache=False)
    rollout = attr.attention_rollout(trace)
    return attr.roi_gene_weights(rollout, e.spans, list(roi_ids), [b.gene for b in genome.blocks],
                                 subject_id, stage)


def run_attribute(cfg: RunConfig) -> dict[str, Path]:
    out = _out(cfg)
    params, mcfg, vocab = load_model(out)
    geno = read_genotypes(_need(out / "qc" / "genotypes.qc.tsv"))
    table = _roi_table(cfg)
    store = _store(out)
    todo = [(sid, stage) for sid, stage in zip(geno.subjects, geno.stages)
            if stage is not None and (out / f"dataset/patches/{sid}.rpat").exists()]
    maps = _pmap(cfg, lambda job: subject_attention(params, mcfg, vocab, geno.genome(job[0]),
                                                     store.std(f"dataset/patches/{job[0]}.rpat"),
                                                     table.ids, job[0], job[1]), todo)
    if not maps:
        raise EmptyResult("no subject has both a label and a patch set")
    d = _stage_dir(cfg, "attribute")
    attr.write_attention(maps, d / "attention.tsv")
    return {"attention": d / "attention.tsv"}


# ---------------------------------------------------------------- stability

def _groups(cfg) -> list[str]:
    groups = [g.strip() for g in cfg["stability"]["groups"].split(",") if g.strip()]
    for g in groups:
        if g not in STAGES:
            raise ConfigError(f"[stability] groups: unknown stage {g!r}")
    return groups


def stability_config(cfg: RunConfig, stage: str) -> StabilityConfig:
    s = cfg["stability"]
    try:
        return StabilityConfig(s["n_bootstrap"], s["ci_lo"], s["ci_hi"], s["selection_threshold"],
                               s["top_k_genes"], s["top_k_rois"], s["epsilon_width"],
                               derive_seed(cfg["run"]["seed"], "stability", stage))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_stability(cfg: RunConfig) -> dict[str, Path]:
    out = _out(cfg)
    maps = attr.read_attention(_need(out / "attribute" / "attention.tsv"))
    table: dict = {}
    features = []  # (stage, kind, name, frequency, selected)
    for stage in _groups(cfg):
        scfg = stability_config(cfg, stage)
        try:
            samples = attr.aggregate_group(maps, stage)
        except attr.EmptyGroup as exc:
            raise EmptyResult(str(exc)) from None
        table[stage] = stability_records(samples, scfg)
        group = sorted((m for m in maps if m.stage == stage), key=lambda m: m.subject_id)
        w = attr.weights_tensor(group)
        for kind, names, k in (("gene", group[0].genes, scfg.top_k_genes),
                               ("roi", [str(r) for r in group[0].roi_ids], scfg.top_k_rois)):
            scores = replicate_feature_scores(w, kind, scfg.n_bootstrap, scfg.seed)
            selected, freq = select_stable_features(scores, names, k, scfg.selection_threshold)
            for n in names:
                features.append((stage, kind, n, freq[n], n in selected))
    d = _stage_dir(cfg, "stability")
    write_stability(table, d / "stability.tsv")
    with open(d / "features.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.write("stage\tkind\tname\tfrequency\tselected\n")
        for stage, kind, n, f, sel in features:
            fh.write(f"{stage}\t{kind}\t{n}\t{_fmt(f)}\t{int(sel)}\n")
    genes = sorted({n for _, kind, n, _, sel in features if sel and kind == "gene"})
    write_gene_set(genes, d / "stable_genes.txt")
    return {"stability": d / "stability.tsv", "features": d / "features.tsv", "stable_genes": d / "stable_genes.txt"}


def read_features(path) -> list[tuple[str, str, str, float, bool]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            if line.strip():
                st, kind, n, f, sel = line.rstrip("\n").split("\t")
                rows.append((st, kind, n, float(f), sel == "1"))
    return rows


# ---------------------------------------------------------------- enrichment

def run_enrich(cfg: RunConfig) -> dict[str, Path]:
    out = _out(cfg)
    selected = read_gene_set(_need(out / "stability" / "stable_genes.txt"))
    reference = read_gene_set(_need(_path(cfg, "reference_genes", "synth/reference_genes.txt")))
    universe = read_genotypes(_need(out / "qc" / "genotypes.qc.tsv")).panel.gene_names
    if not universe:
        raise EmptyResult("empty gene universe")
    reference = [g for g in reference if g in set(universe)]
    result = fisher_enrichment(selected, reference, universe)
    d = _stage_dir(cfg, "enrich")
    with open(d / "enrichment.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.to_json() + "\n")
    return {"enrichment": d / "enrichment.json"}


# ---------------------------------------------------------------- plot data

def plot_rows(table, roi_order, rois_by_stage, annotate_per_roi=2):
    """Rows (block, roi_id, gene, stability, stage, annotate) with ROIs as contiguous blocks.

    ``rois_by_stage[stage]`` lists the ROIs to keep; blocks follow
    ``roi_order``. In each ROI the ``annotate_per_roi`` most stable genes are
    flagged (ties to the smaller gene name).
    """
    rows = []
    for stage, recs in table.items():
        keep = set(rois_by_stage.get(stage, ()))
        block = 0
        for roi in roi_order:
            if roi not in keep:
                continue
            mine = sorted((r for r in recs if r.roi_id == roi), key=lambda r: r.gene)
            if not mine:
                continue
            top = sorted(mine, key=lambda r: (-r.stability, r.gene))[:annotate_per_roi]
            flagged = {r.gene for r in top}
            for r in mine:
                rows.append((block, roi, r.gene, r.stability, stage, r.gene in flagged))
            block += 1
    return rows


def write_plot_rows(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("roi_block_index,roi_id,gene,stability,stage,annotate_flag\n")
        for block, roi, gene, s, stage, flag in rows:
            fh.write(f"{block},{roi},{gene},{_fmt(s)},{stage},{'true' if flag else 'false'}\n")


def run_plotdata(cfg: RunConfig) -> dict[str, Path]:
    out = _out(cfg)
    table = read_stability(_need(out / "stability" / "stability.tsv"))
    roi_table = _roi_table(cfg)
    spec = cfg["plotdata"]["rois"].strip()
    if spec == "stable":
        feats = read_features(_need(out / "stability" / "features.tsv"))
        by_stage = {st: [int(n) for s2, kind, n, _, sel in feats if s2 == st and kind == "roi" and sel]
                    for st in table}
    else:
        ids = [int(x) for x in spec.split(",") if x.strip()] if spec else []
        for r in ids:
            if r not in roi_table.ids:
                raise UnknownRoiInFilter(f"[plotdata] rois: ROI {r} is not in the ROI table")
        by_stage = {st: ids for st in table}
    rows = plot_rows(table, roi_table.ids, by_stage, cfg["plotdata"]["annotate_per_roi"])
    d = _stage_dir(cfg, "plotdata")
    write_plot_rows(rows, d / "plotdata.csv")
    return {"plotdata": d / "plotdata.csv"}


STAGE_FUNCS = {
    "synth": run_synth,
    "qc": run_qc_stage,
    "dataset": run_dataset,
    "train": run_train,
    "eval": run_eval,
    "attribute": run_attribute,
    "stability": run_stability,
    "enrich": run_enrich,
    "plotdata": run_plotdata,
}

PIPELINE = tuple(STAGE_FUNCS)


def artifact_digest(out) -> dict[str, str]:
    """Relative path -> sha256 of every file under ``out``."""
    digests = {}
    root = Path(out)
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            p = Path(dirpath) / f
            digests[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return digests
