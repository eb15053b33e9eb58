"""Micro R-GenIMA: ROI-wise image encoder fused into a causal text decoder.

Parameters live in a flat ``dict[str, np.ndarray]`` (float64). Names:

``rit.patch.w/b``    per-ROI projection of a flattened S^3 patch (a 3D conv
                     whose kernel covers the whole patch is exactly this)
``rit.pos``          learned ROI position embeddings
``rit.{l}.*``        bidirectional pre-norm blocks
``connector.w/b``    linear map into the decoder embedding space
``tok_emb``, ``pos_emb``, ``dec.{l}.*``, ``ln_f.g/b``, ``lm_head.w/b``
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..seeding import rng_for
from . import layers as L
from .vocab import IMG_ID

STD_EPS = 1e-6


class ShapeMismatch(ValueError):
    pass


class AnchorMismatch(ValueError):
    pass


class EmptyTarget(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_layers_text: int = 2
    n_layers_rit: int = 1
    patch_size: int = 8
    n_rois: int = 12
    max_seq_len: int = 512
    d_ff: int = 0  # 0 means 4 * d_model
    n_classes: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "patch_size", "n_rois", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_layers_text < 0 or self.n_layers_rit < 0:
            raise ValueError("layer counts must be non-negative")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


RIT_PREFIXES = ("rit.",)


def is_rit_param(name: str) -> bool:
    return name.startswith("rit.")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "rit.patch.w": (cfg.patch_size**3, d),
        "rit.patch.b": (d,),
        "rit.pos": (cfg.n_rois, d),
    }

    def block(prefix):
        shapes.update({
            prefix + "ln1.g": (d,), prefix + "ln1.b": (d,),
            prefix + "attn.wq": (d, d), prefix + "attn.wk": (d, d), prefix + "attn.wv": (d, d),
            prefix + "attn.wo": (d, d), prefix + "attn.bo": (d,),
            prefix + "ln2.g": (d,), prefix + "ln2.b": (d,),
            prefix + "ffn.w1": (d, f), prefix + "ffn.b1": (f,),
            prefix + "ffn.w2": (f, d), prefix + "ffn.b2": (d,),
        })

    for l in range(cfg.n_layers_rit):
        block(f"rit.{l}.")
    shapes["connector.w"] = (d, d)
    shapes["connector.b"] = (d,)
    shapes["tok_emb"] = (cfg.vocab_size, d)
    shapes["pos_emb"] = (cfg.max_seq_len, d)
    for l in range(cfg.n_layers_text):
        block(f"dec.{l}.")
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["lm_head.w"] = (d, cfg.vocab_size)
    shapes["lm_head.b"] = (cfg.vocab_size,)
    return shapes


def _init_tensor(name, shape, rng):
    leaf = name.rsplit(".", 1)[-1]
    if name in ("tok_emb", "pos_emb", "rit.pos"):
        return 0.02 * rng.standard_normal(shape)
    if leaf == "g":
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform projections, N(0, 0.02) embeddings, zero biases, unit LN gains."""
    return {name: _init_tensor(name, shape, rng_for(seed, "init", name))
            for name, shape in param_shapes(cfg).items()}


def init_stage1_head(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Temporary linear ROI-classification head used only while pre-training the encoder."""
    return {"head.w": _init_tensor("head.w", (cfg.d_model, cfg.n_classes), rng_for(seed, "init", "head.w")),
            "head.b": np.zeros(cfg.n_classes)}


# ---------------------------------------------------------------- image path

def standardize_patches(patches) -> np.ndarray:
    """Flatten each patch and scale it to zero mean, unit variance.

    Constant patches (including absent, all-zero ROIs) map to zeros.
    Shape (..., N, S, S, S) -> (..., N, S^3).
    """
    p = np.asarray(patches, dtype=np.float64)
    flat = p.reshape(*p.shape[:-3], -1)
    mu = flat.mean(axis=-1, keepdims=True)
    centred = flat - mu
    sd = np.sqrt((centred * centred).mean(axis=-1, keepdims=True))
    return centred / np.maximum(sd, STD_EPS)


def roi_patch_embed(std_patches, params) -> np.ndarray:
    return std_patches @ params["rit.patch.w"] + params["rit.patch.b"]


def rit_forward(std_patches, params, cfg: ModelConfig):
    """Standardised patches (B, N, S^3) -> refined ROI states (B, N, d), pre-connector."""
    if std_patches.shape[-2:] != (cfg.n_rois, cfg.patch_size**3):
        raise ShapeMismatch(f"patches {std_patches.shape[-2:]} do not match "
                            f"(n_rois={cfg.n_rois}, S^3={cfg.patch_size**3})")
    z = roi_patch_embed(std_patches, params)
    x = z + params["rit.pos"]
    caches, attns = [], []
    for l in range(cfg.n_layers_rit):
        x, a, c = L.block_fwd(x, params, f"rit.{l}.", cfg.n_heads, causal=False)
        caches.append(c)
        attns.append(a)
    return x, (std_patches, caches), attns


def rit_backward(dh, cache, params, cfg: ModelConfig, grads):
    std_patches, caches = cache
    for l in reversed(range(cfg.n_layers_rit)):
        dh, g = L.block_bwd(dh, caches[l], params, f"rit.{l}.")
        _accumulate(grads, g)
    _accumulate(grads, {"rit.pos": dh.reshape(-1, *dh.shape[-2:]).sum(axis=0)})
    _, dw, db = L.linear_bwd(dh, std_patches, params["rit.patch.w"])
    _accumulate(grads, {"rit.patch.w": dw, "rit.patch.b": db})


def connector_forward(h, params):
    return h @ params["connector.w"] + params["connector.b"]


def rit_encode(std_patches, params, cfg: ModelConfig) -> np.ndarray:
    """H_image: connector(RiT(patch embeddings)); (N, d) or (B, N, d)."""
    single = std_patches.ndim == 2
    x = std_patches[None] if single else std_patches
    h, _, _ = rit_forward(x, params, cfg)
    out = connector_forward(h, params)
    return out[0] if single else out


# ---------------------------------------------------------------- decoder

@dataclass
class ForwardTrace:
    """Outputs of one decoder pass.

    ``attentions[l]`` is (B, H, T, T); ``spans`` labels positions of row 0
    (batches share one layout).
    """

    logits: np.ndarray
    attentions: list[np.ndarray]
    spans: list | None = None
    rit_attentions: list[np.ndarray] = field(default_factory=list)
    cache: tuple | None = None


def _accumulate(grads, g):
    for k, v in g.items():
        if k in grads:
            grads[k] += v
        else:
            grads[k] = v.copy() if isinstance(v, np.ndarray) else v


def forward(params, cfg: ModelConfig, ids, anchor=None, std_patches=None, rit_hidden=None,
            keep_cache=True, spans=None) -> ForwardTrace:
    """Run the decoder over a batch of equal-length text sequences.

    ``ids`` is (B, L) and may contain one ``<IMG>`` id per row at column
    ``anchor`` (shared by the batch). That position is replaced by the N
    connector outputs, giving T = L - 1 + N positions. Image input is either
    standardised patches (B, N, S^3) or frozen RiT states (B, N, d).
    """
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    b, n_text = ids.shape
    has_img = (ids == IMG_ID).any(axis=1)
    if anchor is None:
        if has_img.any():
            raise AnchorMismatch("sequence holds <IMG> but no anchor position was given")
    else:
        if not np.all(ids[:, anchor] == IMG_ID) or (ids == IMG_ID).sum() != b:
            raise AnchorMismatch(f"expected exactly one <IMG> per row at column {anchor}")
        if std_patches is None and rit_hidden is None:
            raise AnchorMismatch("anchored prompt needs image input")
    if anchor is None and (std_patches is not None or rit_hidden is not None):
        raise AnchorMismatch("image input supplied for a prompt without an anchor")

    x_text = params["tok_emb"][ids]
    rit_cache, rit_attn, h = None, [], None
    if anchor is not None:
        if rit_hidden is not None:
            h = np.asarray(rit_hidden, dtype=np.float64)
            if h.ndim == 2:
                h = h[None]
        else:
            sp = np.asarray(std_patches, dtype=np.float64)
            if sp.ndim == 2:
                sp = sp[None]
            h, rit_cache, rit_attn = rit_forward(sp, params, cfg)
        if h.shape[0] != b:
            h = np.broadcast_to(h, (b, *h.shape[1:]))
        img = connector_forward(h, params)
        x = np.concatenate([x_text[:, :anchor], img, x_text[:, anchor + 1:]], axis=1)
    else:
        x = x_text
    t = x.shape[1]
    if t > cfg.max_seq_len:
        raise ShapeMismatch(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    x = x + params["pos_emb"][:t]

    caches, attns = [], []
    for l in range(cfg.n_layers_text):
        x, a, c = L.block_fwd(x, params, f"dec.{l}.", cfg.n_heads, causal=True)
        caches.append(c)
        attns.append(a)
    xf, c_lnf = L.layer_norm_fwd(x, params["ln_f.g"], params["ln_f.b"])
    logits = xf @ params["lm_head.w"] + params["lm_head.b"]
    cache = (ids, anchor, h, rit_cache, caches, c_lnf, xf, t) if keep_cache else None
    return ForwardTrace(logits, attns, spans, rit_attn, cache)


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def nll_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over positions with ``labels >= 0``.

    ``labels[b, t]`` is the token expected after position t. Returns the loss
    and d loss / d logits.
    """
    labels = np.asarray(labels)
    mask = labels >= 0
    n = int(mask.sum())
    if n == 0:
        raise EmptyTarget("no target positions")
    lp = log_softmax(logits[mask])
    y = labels[mask]
    loss = -lp[np.arange(n), y].sum() / n
    dsel = np.exp(lp)
    dsel[np.arange(n), y] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[mask] = dsel / n
    return float(loss), dlogits


def backward(trace: ForwardTrace, dlogits, params, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Exact gradient of a scalar loss w.r.t. every parameter, given d loss / d logits.

    Tensors the loss does not touch get zero gradients. When the forward
    pass used frozen ``rit_hidden`` the encoder gradients are zero.
    """
    ids, anchor, h, rit_cache, caches, c_lnf, xf, t = trace.cache
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dxf, dw, db = L.linear_bwd(dlogits, xf, params["lm_head.w"])
    _accumulate(grads, {"lm_head.w": dw, "lm_head.b": db})
    dx, dg, dbb = L.layer_norm_bwd(dxf, c_lnf)
    _accumulate(grads, {"ln_f.g": dg, "ln_f.b": dbb})
    for l in reversed(range(cfg.n_layers_text)):
        dx, g = L.block_bwd(dx, caches[l], params, f"dec.{l}.")
        _accumulate(grads, g)
    grads["pos_emb"][:t] += dx.sum(axis=0)

    if anchor is not None:
        n = cfg.n_rois
        d_img = dx[:, anchor:anchor + n]
        dx_text = np.concatenate([dx[:, :anchor], dx[:, anchor + n:]], axis=1)
        ids_text = np.concatenate([ids[:, :anchor], ids[:, anchor + 1:]], axis=1)
        dh, dw, db = L.linear_bwd(d_img, h, params["connector.w"])
        _accumulate(grads, {"connector.w": dw, "connector.b": db})
        if rit_cache is not None:
            rit_backward(dh, rit_cache, params, cfg, grads)
    else:
        dx_text, ids_text = dx, ids
    np.add.at(grads["tok_emb"], ids_text.ravel(), dx_text.reshape(-1, cfg.d_model))
    return grads


def stage1_forward(std_patches, params, head, cfg: ModelConfig):
    """ROI-classification logits from mean-pooled RiT states."""
    h, cache, _ = rit_forward(std_patches, params, cfg)
    pooled = h.mean(axis=1)
    return pooled @ head["head.w"] + head["head.b"], (cache, pooled, h.shape[1])


def stage1_backward(dlogits, cache, params, head, cfg: ModelConfig):
    rit_cache, pooled, n = cache
    dpooled, dw, db = L.linear_bwd(dlogits, pooled, head["head.w"])
    head_grads = {"head.w": dw, "head.b": db}
    grads = {k: np.zeros_like(v) for k, v in params.items() if is_rit_param(k)}
    dh = np.repeat(dpooled[:, None, :] / n, n, axis=1)
    rit_backward(dh, rit_cache, params, cfg, grads)
    return grads, head_grads
