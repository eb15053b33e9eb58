"""Two-stage training, greedy decoding and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..genome.types import STAGES
from ..seeding import rng_for
from . import core
from .vocab import BOS, EOS, EOS_ID, IMG, IMG_ID, Vocab, position_spans

log = logging.getLogger(__name__)

UNPARSEABLE = "Unparseable"


class DivergedLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    rit_lr: float = 3e-3
    rit_epochs: int = 30
    rit_batch_size: int = 16
    max_steps: int = 0  # 0 = no cap; otherwise stop stage 2 after this many steps


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, names, shapes, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros(shapes[k]) for k in names}
        self.v = {k: np.zeros(shapes[k]) for k in names}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in self.m:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class Encoded:
    """One record as model input."""

    subject_id: str
    stage: str
    ids: np.ndarray  # text ids incl. <BOS>, <IMG>, target and <EOS>
    anchor: int | None  # text index of <IMG>
    labels: np.ndarray  # over the expanded sequence; -1 where no target
    prompt_len: int  # text length up to and excluding the target
    patch_path: str | None
    spans: list = field(default_factory=list)


def encode_record(prompt: str, target: str | None, vocab: Vocab, n_rois: int, roi_ids=None,
                  subject_id="", stage="", patch_path=None) -> Encoded:
    words = [BOS] + prompt.split()
    prompt_len = len(words)
    if target is not None:
        words += target.split() + [EOS]
    ids = np.array(vocab.ids(words), dtype=np.int64)
    anchor = words.index(IMG) if IMG in words else None
    shift = n_rois - 1 if anchor is not None else 0
    total = len(words) + shift
    labels = -np.ones(total, dtype=np.int64)
    if target is not None:
        for j in range(prompt_len, len(words)):
            labels[j + shift - 1] = ids[j]
    roi_ids = list(roi_ids) if roi_ids is not None else list(range(1, n_rois + 1))
    spans = position_spans(words, roi_ids, prompt_len if target is not None else None)
    return Encoded(subject_id, stage, ids, anchor, labels, prompt_len, patch_path, spans)


def group_key(e: Encoded):
    return (len(e.ids), e.anchor)


def make_batches(encoded: list[Encoded], batch_size: int, rng: np.random.Generator | None):
    """Index batches whose members share length and anchor column."""
    groups: dict = {}
    for i, e in enumerate(encoded):
        groups.setdefault(group_key(e), []).append(i)
    batches = []
    for key in sorted(groups, key=lambda k: (k[0], -1 if k[1] is None else k[1])):
        idx = np.array(groups[key])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        batches += [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


class ImageStore:
    """Standardised patches (and, once the encoder is frozen, its states) per patch file."""

    def __init__(self, loader):
        self._loader = loader
        self._std: dict[str, np.ndarray] = {}
        self.hidden: dict[str, np.ndarray] = {}

    def std(self, path: str) -> np.ndarray:
        if path not in self._std:
            self._std[path] = core.standardize_patches(self._loader(path).patches)
        return self._std[path]

    def freeze(self, params, cfg, paths):
        for p in sorted(set(paths)):
            h, _, _ = core.rit_forward(self.std(p)[None], params, cfg)
            self.hidden[p] = h[0]


def _batch_inputs(encoded, idx, store: ImageStore | None, use_hidden: bool):
    rows = [encoded[i] for i in idx]
    ids = np.stack([r.ids for r in rows])
    labels = np.stack([r.labels for r in rows])
    anchor = rows[0].anchor
    kw = {}
    if anchor is not None:
        if use_hidden:
            kw["rit_hidden"] = np.stack([store.hidden[r.patch_path] for r in rows])
        else:
            kw["std_patches"] = np.stack([store.std(r.patch_path) for r in rows])
    return ids, anchor, labels, kw


def train_stage1(params, cfg, subjects: list[tuple[str, str]], store: ImageStore, tcfg: TrainConfig):
    """Pre-train the ROI encoder on 4-way stage classification from patches alone.

    ``subjects`` is a list of (patch_path, stage). Returns the loss curve.
    """
    head = core.init_stage1_head(cfg, tcfg.seed)
    names = [k for k in params if core.is_rit_param(k)]
    opt = Adam(names, {k: params[k].shape for k in names}, tcfg.rit_lr, tcfg.betas, tcfg.eps)
    hopt = Adam(list(head), {k: v.shape for k, v in head.items()}, tcfg.rit_lr, tcfg.betas, tcfg.eps)
    x_all = np.stack([store.std(p) for p, _ in subjects])
    y_all = np.array([STAGES.index(s) for _, s in subjects])
    rng = rng_for(tcfg.seed, "stage1-batches")
    curve = []
    for epoch in range(tcfg.rit_epochs):
        order = rng.permutation(len(subjects))
        for i in range(0, len(order), tcfg.rit_batch_size):
            idx = order[i:i + tcfg.rit_batch_size]
            logits, cache = core.stage1_forward(x_all[idx], params, head, cfg)
            loss, dlogits = core.nll_loss(logits, y_all[idx])
            if not np.isfinite(loss):
                raise DivergedLoss(f"stage-1 loss became {loss}")
            grads, hgrads = core.stage1_backward(dlogits, cache, params, head, cfg)
            opt.step(params, grads)
            hopt.step(head, hgrads)
            curve.append(loss)
    return curve


def train_stage2(params, cfg, encoded: list[Encoded], store: ImageStore | None, tcfg: TrainConfig,
                 frozen: bool = True):
    """Generative NLL training of connector, embeddings and decoder."""
    names = [k for k in params if not (frozen and core.is_rit_param(k))]
    opt = Adam(names, {k: params[k].shape for k in names}, tcfg.lr, tcfg.betas, tcfg.eps)
    rng = rng_for(tcfg.seed, "stage2-batches")
    curve = []
    for epoch in range(tcfg.epochs):
        for idx in make_batches(encoded, tcfg.batch_size, rng):
            ids, anchor, labels, kw = _batch_inputs(encoded, idx, store, use_hidden=frozen)
            trace = core.forward(params, cfg, ids, anchor, **kw)
            loss, dlogits = core.nll_loss(trace.logits, labels)
            if not np.isfinite(loss):
                raise DivergedLoss(f"loss became {loss}")
            grads = core.backward(trace, dlogits, params, cfg)
            opt.step(params, grads)
            curve.append(loss)
            if tcfg.max_steps and len(curve) >= tcfg.max_steps:
                return curve
        log.debug("stage-2 epoch %d mean loss %.4f", epoch, np.mean(curve[-len(encoded) // tcfg.batch_size or 1:]))
    return curve


@dataclass
class TrainResult:
    params: dict
    stage1_curve: list[float]
    stage2_curve: list[float]


def train(encoded: list[Encoded], cfg: core.ModelConfig, tcfg: TrainConfig, store: ImageStore | None = None,
          params=None) -> TrainResult:
    """Stage 1 (encoder on ROI classification) then stage 2 (generative) with the encoder frozen."""
    if not encoded:
        raise ValueError("dataset is empty")
    params = core.init_params(cfg, tcfg.seed) if params is None else params
    stage1 = []
    anchored = [e for e in encoded if e.anchor is not None]
    if anchored:
        subjects = sorted({(e.patch_path, e.stage) for e in anchored})
        stage1 = train_stage1(params, cfg, subjects, store, tcfg)
        store.freeze(params, cfg, [p for p, _ in subjects])
    snapshot = {k: v.copy() for k, v in params.items() if core.is_rit_param(k)}
    stage2 = train_stage2(params, cfg, encoded, store, tcfg, frozen=True)
    for k, v in snapshot.items():
        assert np.array_equal(v, params[k]), f"frozen encoder tensor {k} changed during stage 2"
    return TrainResult(params, stage1, stage2)


# ---------------------------------------------------------------- decoding

def parse_label(words: list[str]) -> str:
    if len(words) == 5 and words[:3] == ["This", "subject", "is"] and words[4] == "." and words[3] in STAGES:
        return words[3]
    return UNPARSEABLE


def greedy_decode_batch(params, cfg, vocab: Vocab, ids, anchor=None, image_kw=None, max_len=8):
    """Argmax decoding for a batch of equal-length prompts (ending before the target).

    Ties go to the lowest token id. Returns one (label, generated words) per row.
    """
    image_kw = image_kw or {}
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    b = ids.shape[0]
    out = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    cur = ids
    n_img = cfg.n_rois - 1 if anchor is not None else 0
    for _ in range(max_len):
        if cur.shape[1] + n_img >= cfg.max_seq_len:
            break
        trace = core.forward(params, cfg, cur, anchor, keep_cache=False, **image_kw)
        nxt = np.argmax(trace.logits[:, -1], axis=-1)
        for i in range(b):
            if not done[i]:
                if nxt[i] == EOS_ID:
                    done[i] = True
                else:
                    out[i].append(vocab.tokens[int(nxt[i])])
        if done.all():
            break
        cur = np.concatenate([cur, nxt[:, None]], axis=1)
    return [(parse_label(w) if done[i] else UNPARSEABLE, w) for i, w in enumerate(out)]


def greedy_decode(params, cfg, vocab, prompt_ids, anchor=None, std_patches=None, rit_hidden=None, max_len=8):
    kw = {}
    if std_patches is not None:
        kw["std_patches"] = std_patches[None] if std_patches.ndim == 2 else std_patches
    if rit_hidden is not None:
        kw["rit_hidden"] = rit_hidden[None] if rit_hidden.ndim == 2 else rit_hidden
    return greedy_decode_batch(params, cfg, vocab, prompt_ids, anchor, kw, max_len)[0][0]


def predict(params, cfg, vocab, encoded: list[Encoded], store: ImageStore | None, batch_size=64, max_len=8,
            map_fn=map):
    """Decoded label for every record, in input order.

    ``map_fn`` runs the independent batches; any order-preserving map works.
    """
    prompts = [Encoded(e.subject_id, e.stage, e.ids[:e.prompt_len], e.anchor, e.labels, e.prompt_len,
                       e.patch_path) for e in encoded]
    batches = make_batches(prompts, batch_size, None)

    def decode(idx):
        rows = [prompts[i] for i in idx]
        ids = np.stack([r.ids for r in rows])
        kw = {}
        if rows[0].anchor is not None:
            kw["std_patches"] = np.stack([store.std(r.patch_path) for r in rows])
        return greedy_decode_batch(params, cfg, vocab, ids, rows[0].anchor, kw, max_len)

    preds = [None] * len(encoded)
    for idx, decoded in zip(batches, map_fn(decode, batches)):
        for i, (label, _) in zip(idx, decoded):
            preds[i] = label
    return preds


def confusion_from_predictions(truth, preds):
    """4x4 counts (rows true, columns predicted) plus per-class unparseable counts."""
    conf = np.zeros((len(STAGES), len(STAGES)), dtype=np.int64)
    unparsed = np.zeros(len(STAGES), dtype=np.int64)
    for t, p in zip(truth, preds):
        if p == UNPARSEABLE:
            unparsed[STAGES.index(t)] += 1
        else:
            conf[STAGES.index(t), STAGES.index(p)] += 1
    return conf, unparsed
