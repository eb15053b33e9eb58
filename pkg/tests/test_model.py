import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_oracle, finite_difference_check, nll_oracle
from rgenima.genome.prompt import build_prompt, serialize_genome
from rgenima.genome.synth import default_panel
from rgenima.genome.types import GeneBlock, SubjectGenome
from rgenima.model import core
from rgenima.model import layers as L
from rgenima.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from rgenima.model.train import (
    UNPARSEABLE,
    ImageStore,
    TrainConfig,
    encode_record,
    greedy_decode,
    parse_label,
    train,
    train_stage2,
)
from rgenima.model.vocab import (
    BOS,
    EOS_ID,
    IMG_ID,
    UnknownToken,
    Vocab,
    build_vocab,
    detokenize,
    tokenize,
)
from rgenima.roi import RoiPatchSet

PANEL = default_panel(3, 2)
VOCAB = build_vocab(PANEL)


def small_cfg(**kw):
    base = dict(vocab_size=len(VOCAB), d_model=8, n_heads=2, n_layers_text=2, n_layers_rit=1,
                patch_size=2, n_rois=3, max_seq_len=160)
    base.update(kw)
    return core.ModelConfig(**base)


def jitter(params, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}


def attn_params(d, rng, with_out=True):
    p = {"wq": rng.standard_normal((d, d)), "wk": rng.standard_normal((d, d)), "wv": rng.standard_normal((d, d))}
    if with_out:
        p["wo"] = rng.standard_normal((d, d))
        p["bo"] = rng.standard_normal(d)
    return p


def sample_record(label="AD", multimodal=True, values=(0, 1, 2, 1, 0, 2)):
    blocks, k = [], 0
    for g, snps in PANEL.genes:
        blocks.append(GeneBlock(g, snps, tuple(values[k:k + len(snps)])))
        k += len(snps)
    return build_prompt(serialize_genome(SubjectGenome(tuple(blocks))), multimodal, label)


class TestVocab:
    def test_target_ids(self):
        ids = tokenize("This subject is AD .", VOCAB, eos=True)
        assert len(ids) == 6 and ids[-1] == EOS_ID
        assert all(i > 3 for i in ids[:5])

    def test_img_reserved(self):
        assert tokenize("<IMG>", VOCAB).tolist() == [IMG_ID] == [3]

    def test_round_trip_corpus(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            r = sample_record(str(rng.choice(["NC", "SMC", "MCI", "AD"])), bool(rng.integers(2)),
                              tuple(rng.integers(0, 3, 6)))
            for text in (r.text, r.target):
                assert detokenize(tokenize(text, VOCAB), VOCAB) == text

    def test_unknown(self):
        with pytest.raises(UnknownToken):
            tokenize("This subject is XYZ .", VOCAB)

    def test_file_round_trip(self, tmp_path):
        VOCAB.save(tmp_path / "v.txt")
        back = Vocab.load(tmp_path / "v.txt")
        assert back.tokens == VOCAB.tokens
        assert (tmp_path / "v.txt").read_text().splitlines()[:4] == ["<PAD>", "<BOS>", "<EOS>", "<IMG>"]


class TestPatchEmbed:
    def setup_method(self):
        self.cfg = small_cfg()
        self.params = jitter(core.init_params(self.cfg, 1))

    def test_zero_patch_gives_bias(self):
        std = core.standardize_patches(np.zeros((3, 2, 2, 2)))
        tok = core.roi_patch_embed(std, self.params)
        np.testing.assert_array_equal(tok, np.broadcast_to(self.params["rit.patch.b"], tok.shape))

    def test_scale_and_shift_invariant(self):
        p = np.random.default_rng(2).standard_normal((3, 2, 2, 2))
        a = core.roi_patch_embed(core.standardize_patches(p), self.params)
        np.testing.assert_allclose(core.roi_patch_embed(core.standardize_patches(2 * p), self.params), a, atol=1e-12)
        np.testing.assert_allclose(core.roi_patch_embed(core.standardize_patches(p + 7.5), self.params), a, atol=1e-12)

    def test_matches_explicit_product(self):
        rng = np.random.default_rng(3)
        p = rng.standard_normal((3, 2, 2, 2))
        tok = core.roi_patch_embed(core.standardize_patches(p), self.params)
        w, b = self.params["rit.patch.w"], self.params["rit.patch.b"]
        for i in range(3):
            flat = p[i].ravel()
            z = (flat - flat.mean()) / max(flat.std(), 1e-6)
            ref = [math.fsum(z[k] * w[k, j] for k in range(8)) + b[j] for j in range(8)]
            np.testing.assert_allclose(tok[i], ref, atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(core.ShapeMismatch):
            core.rit_encode(np.zeros((4, 8)), self.params, self.cfg)


class TestAttention:
    def test_length_one(self):
        rng = np.random.default_rng(0)
        _, a = L.self_attention(rng.standard_normal((1, 4)), attn_params(4, rng), 2)
        np.testing.assert_array_equal(a, np.ones((2, 1, 1)))

    def test_equal_keys_uniform(self):
        rng = np.random.default_rng(1)
        p = attn_params(4, rng)
        p["wk"] = np.zeros((4, 4))
        _, a = L.self_attention(rng.standard_normal((5, 4)), p, 2)
        np.testing.assert_allclose(a, np.full((2, 5, 5), 0.2), atol=1e-15)

    def test_self_matches_oracle(self):
        rng = np.random.default_rng(2)
        for causal in (False, True):
            x, p = rng.standard_normal((3, 4)), attn_params(4, rng)
            y, a = L.self_attention(x, p, 2, causal=causal)
            ry, ra = attention_oracle(x, x, p["wq"], p["wk"], p["wv"], 2, p["wo"], p["bo"], causal=causal)
            np.testing.assert_allclose(y, ry, atol=1e-10)
            np.testing.assert_allclose(a, ra, atol=1e-10)

    def test_causal_upper_triangle_zero(self):
        rng = np.random.default_rng(3)
        _, a = L.self_attention(rng.standard_normal((6, 4)), attn_params(4, rng), 2, causal=True)
        assert np.all(a[:, np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0.0)

    def test_cross_single_key(self):
        rng = np.random.default_rng(4)
        _, a = L.cross_attention(rng.standard_normal((3, 4)), rng.standard_normal((1, 4)), attn_params(4, rng, False), 2)
        np.testing.assert_array_equal(a, np.ones((2, 3, 1)))

    def test_cross_equals_unmasked_self(self):
        rng = np.random.default_rng(5)
        x, p = rng.standard_normal((4, 4)), attn_params(4, rng)
        ys, as_ = L.self_attention(x, p, 2)
        yc, ac = L.cross_attention(x, x, p, 2)
        np.testing.assert_array_equal(ys, yc)
        np.testing.assert_array_equal(as_, ac)

    def test_cross_matches_oracle(self):
        rng = np.random.default_rng(6)
        fq, fkv, p = rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), attn_params(4, rng, False)
        y, a = L.cross_attention(fq, fkv, p, 2)
        ry, ra = attention_oracle(fq, fkv, p["wq"], p["wk"], p["wv"], 2)
        assert a.shape == (2, 2, 3)
        np.testing.assert_allclose(y, ry, atol=1e-10)
        np.testing.assert_allclose(a, ra, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 7), st.sampled_from([1, 2, 4]), st.integers(0, 10**6), st.booleans())
    def test_rows_stochastic(self, tq, tk, heads, seed, causal):
        rng = np.random.default_rng(seed)
        p = attn_params(4, rng)
        if causal:
            tk = tq
        _, a, _ = L.attention_fwd(3 * rng.standard_normal((1, tq, 4)), 3 * rng.standard_normal((1, tk, 4)),
                                  p, heads, causal=causal)
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)

    def test_non_finite(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 3, 4))
        x[0, 1, 2] = np.nan
        with pytest.raises(L.NonFiniteActivation):
            L.attention_fwd(x, x, attn_params(4, rng), 2)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(8)
        p = attn_params(4, rng)
        xq, xkv = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 5, 4))
        up = rng.standard_normal((2, 3, 4))
        y, _, cache = L.attention_fwd(xq, xkv, p, 2)
        _, _, grads = L.attention_bwd(up, cache, p)

        def loss():
            return float((L.attention_fwd(xq, xkv, p, 2)[0] * up).sum())

        worst, name, _ = finite_difference_check(loss, p, grads, n_coords=16)
        assert worst <= 1e-6, name


class TestRit:
    def test_no_layers(self):
        cfg = small_cfg(n_layers_rit=0)
        params = jitter(core.init_params(cfg, 2))
        std = core.standardize_patches(np.random.default_rng(0).standard_normal((3, 2, 2, 2)))
        ref = (std @ params["rit.patch.w"] + params["rit.patch.b"] + params["rit.pos"]) @ params["connector.w"] \
            + params["connector.b"]
        np.testing.assert_allclose(core.rit_encode(std, params, cfg), ref, atol=1e-12)

    def test_token_count_all_absent(self):
        cfg = small_cfg()
        out = core.rit_encode(core.standardize_patches(np.zeros((3, 2, 2, 2))), core.init_params(cfg, 0), cfg)
        assert out.shape == (3, cfg.d_model)

    def test_roi_perturbation(self):
        cfg = small_cfg()
        params = jitter(core.init_params(cfg, 4))
        rng = np.random.default_rng(5)
        p = rng.standard_normal((3, 2, 2, 2))
        a = core.rit_encode(core.standardize_patches(p), params, cfg)
        for k in range(3):
            q = p.copy()
            q[k] = rng.standard_normal((2, 2, 2))
            b = core.rit_encode(core.standardize_patches(q), params, cfg)
            assert not np.allclose(a[k], b[k])


class TestForward:
    def setup_method(self):
        self.cfg = small_cfg(n_rois=12)
        self.params = jitter(core.init_params(self.cfg, 5))
        self.std = core.standardize_patches(np.random.default_rng(6).standard_normal((12, 2, 2, 2)))

    def test_gene_only_length(self):
        e = encode_record(sample_record(multimodal=False).text, None, VOCAB, 12)
        tr = core.forward(self.params, self.cfg, e.ids)
        assert tr.logits.shape[1] == len(e.ids)
        assert all(kind != "image" for kind, _ in e.spans)

    def test_anchor_expands(self):
        e = encode_record(sample_record().text, None, VOCAB, 12)
        tr = core.forward(self.params, self.cfg, e.ids, e.anchor, std_patches=self.std)
        assert tr.logits.shape[1] == len(e.ids) - 1 + 12
        assert len(e.spans) == tr.logits.shape[1]
        assert [v for kind, v in e.spans if kind == "image"] == list(range(1, 13))
        assert {v for kind, v in e.spans if kind == "gene"} == set(PANEL.gene_names)

    def test_spans_with_target(self):
        r = sample_record()
        e = encode_record(r.text, r.target, VOCAB, 12)
        kinds = [kind for kind, _ in e.spans]
        assert kinds[-6:] == ["target"] * 6
        assert (e.labels >= 0).sum() == 6

    @pytest.mark.parametrize("multimodal", [False, True])
    def test_causality(self, multimodal):
        e = encode_record(sample_record(multimodal=multimodal).text, None, VOCAB, 12)
        kw = {"std_patches": self.std} if multimodal else {}
        base = core.forward(self.params, self.cfg, e.ids, e.anchor, **kw).logits
        shift = 11 if multimodal else 0
        for j in (5, 20, len(e.ids) - 1):
            ids = e.ids.copy()
            ids[j] = VOCAB.id("AD") if ids[j] != VOCAB.id("AD") else VOCAB.id("NC")
            out = core.forward(self.params, self.cfg, ids, e.anchor, **kw).logits
            t = j + (shift if e.anchor is not None and j > e.anchor else 0)
            assert out[:, :t].tobytes() == base[:, :t].tobytes()
            assert not np.array_equal(out[:, t], base[:, t])

    def test_image_tokens_causal(self):
        e = encode_record(sample_record().text, None, VOCAB, 12)
        base = core.forward(self.params, self.cfg, e.ids, e.anchor, rit_hidden=np.zeros((12, 8))).logits
        h = np.zeros((12, 8))
        h[7] = 1.0
        out = core.forward(self.params, self.cfg, e.ids, e.anchor, rit_hidden=h).logits
        t = e.anchor + 7
        assert out[:, :t].tobytes() == base[:, :t].tobytes()

    def test_anchor_mismatch(self):
        e = encode_record(sample_record().text, None, VOCAB, 12)
        with pytest.raises(core.AnchorMismatch):
            core.forward(self.params, self.cfg, e.ids)
        with pytest.raises(core.AnchorMismatch):
            core.forward(self.params, self.cfg, e.ids, e.anchor)
        g = encode_record(sample_record(multimodal=False).text, None, VOCAB, 12)
        with pytest.raises(core.AnchorMismatch):
            core.forward(self.params, self.cfg, g.ids, std_patches=self.std)

    def test_attention_rows(self):
        e = encode_record(sample_record().text, None, VOCAB, 12)
        tr = core.forward(self.params, self.cfg, e.ids, e.anchor, std_patches=self.std)
        for a in tr.attentions + tr.rit_attentions:
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)


class TestNll:
    def test_uniform(self):
        loss, _ = core.nll_loss(np.zeros((1, 3, 8)), np.array([[1, -1, 5]]))
        assert loss == pytest.approx(math.log(8), abs=1e-12)

    def test_saturated(self):
        z = np.zeros((1, 2, 8))
        z[0, :, 3] = 50.0
        loss, _ = core.nll_loss(z, np.array([[3, 3]]))
        assert loss < 1e-20

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = 3 * rng.standard_normal((2, 5, 7))
            y = rng.integers(-1, 7, size=(2, 5))
            y[0, 0] = 2
            assert core.nll_loss(z, y)[0] == pytest.approx(nll_oracle(z, y), abs=1e-10)

    def test_empty(self):
        with pytest.raises(core.EmptyTarget):
            core.nll_loss(np.zeros((1, 2, 4)), -np.ones((1, 2), dtype=int))


class TestBackward:
    def _setup(self, anchored=True, seed=0):
        cfg = small_cfg()
        params = jitter(core.init_params(cfg, seed), seed)
        r = sample_record(multimodal=anchored)
        e = encode_record(r.text, r.target, VOCAB, cfg.n_rois)
        std = core.standardize_patches(np.random.default_rng(seed).standard_normal((1, 3, 2, 2, 2)))
        kw = {"std_patches": std} if anchored else {}
        return cfg, params, e, kw

    def test_finite_differences(self):
        cfg, params, e, kw = self._setup()
        tr = core.forward(params, cfg, e.ids[None], e.anchor, **kw)
        _, dl = core.nll_loss(tr.logits, e.labels[None])
        grads = core.backward(tr, dl, params, cfg)

        def loss():
            t = core.forward(params, cfg, e.ids[None], e.anchor, keep_cache=False, **kw)
            return core.nll_loss(t.logits, e.labels[None])[0]

        worst, name, _ = finite_difference_check(loss, params, grads, n_coords=10)
        assert worst <= 1e-4, name

    def test_unused_embedding_rows_zero(self):
        cfg, params, e, kw = self._setup(anchored=False)
        tr = core.forward(params, cfg, e.ids[None], None)
        _, dl = core.nll_loss(tr.logits, e.labels[None])
        g = core.backward(tr, dl, params, cfg)
        unused = sorted(set(range(len(VOCAB))) - set(e.ids.tolist()))
        assert unused
        assert not g["tok_emb"][unused].any()
        assert not any(g[k].any() for k in g if core.is_rit_param(k) or k.startswith("connector."))

    def test_duplicated_batch_same_mean_gradient(self):
        cfg, params, e, kw = self._setup()
        one = core.forward(params, cfg, e.ids[None], e.anchor, **kw)
        g1 = core.backward(one, core.nll_loss(one.logits, e.labels[None])[1], params, cfg)
        kw2 = {"std_patches": np.concatenate([kw["std_patches"]] * 2)}
        two = core.forward(params, cfg, np.stack([e.ids] * 2), e.anchor, **kw2)
        g2 = core.backward(two, core.nll_loss(two.logits, np.stack([e.labels] * 2))[1], params, cfg)
        for k in g1:
            np.testing.assert_allclose(g2[k], g1[k], atol=1e-13)


def tiny_store(rng, n_rois=3, s=2):
    sets = {}

    def loader(path):
        if path not in sets:
            sets[path] = RoiPatchSet(path, s, rng.standard_normal((n_rois, s, s, s)), np.ones(n_rois, dtype=bool))
        return sets[path]

    return ImageStore(loader)


class TestTrain:
    def _encoded(self, n=1, anchored=True):
        out = []
        for i in range(n):
            r = sample_record(["NC", "AD"][i % 2], anchored, tuple((i + k) % 3 for k in range(6)))
            out.append(encode_record(r.text, r.target, VOCAB, 3, subject_id=f"S{i}", stage=["NC", "AD"][i % 2],
                                     patch_path=f"S{i}" if anchored else None))
        return out

    def test_lr_zero(self):
        cfg = small_cfg()
        params = core.init_params(cfg, 0)
        before = {k: v.copy() for k, v in params.items()}
        train(self._encoded(2), cfg, TrainConfig(lr=0.0, rit_lr=0.0, epochs=3, rit_epochs=3, batch_size=1),
              tiny_store(np.random.default_rng(0)), params)
        for k in before:
            np.testing.assert_array_equal(params[k], before[k])

    def test_memorize_one_subject(self):
        cfg = small_cfg(d_model=16)
        res = train(self._encoded(1), cfg, TrainConfig(lr=1e-2, epochs=200, batch_size=1, rit_epochs=5),
                    tiny_store(np.random.default_rng(1)))
        assert len(res.stage2_curve) == 200
        assert res.stage2_curve[-1] < 0.05

    def test_deterministic_curve(self):
        cfg = small_cfg()
        tc = TrainConfig(epochs=3, batch_size=2, rit_epochs=3, seed=4)
        a = train(self._encoded(4), cfg, tc, tiny_store(np.random.default_rng(2)))
        b = train(self._encoded(4), cfg, tc, tiny_store(np.random.default_rng(2)))
        assert a.stage1_curve == b.stage1_curve
        assert a.stage2_curve == b.stage2_curve

    def test_encoder_frozen_in_stage2(self):
        cfg = small_cfg()
        store = tiny_store(np.random.default_rng(3))
        enc = self._encoded(2)
        params = core.init_params(cfg, 0)
        res = train(enc, cfg, TrainConfig(epochs=0, rit_epochs=2), store, params)
        after1 = {k: v.copy() for k, v in res.params.items()}
        train_stage2(res.params, cfg, enc, store, TrainConfig(epochs=2, batch_size=1), frozen=True)
        for k in after1:
            if core.is_rit_param(k):
                np.testing.assert_array_equal(res.params[k], after1[k])
        assert not np.array_equal(res.params["lm_head.w"], after1["lm_head.w"])

    def test_max_steps(self):
        cfg = small_cfg()
        res = train(self._encoded(4, anchored=False), cfg, TrainConfig(epochs=50, batch_size=1, max_steps=7))
        assert len(res.stage2_curve) == 7 and res.stage1_curve == []


class TestDecode:
    def _rigged(self):
        """Identity decoder blocks and a position-keyed LM head emitting a fixed target."""
        cfg = core.ModelConfig(vocab_size=len(VOCAB), d_model=16, n_heads=2, n_layers_text=2, n_layers_rit=0,
                               patch_size=2, n_rois=3, max_seq_len=16)
        params = core.init_params(cfg, 0)
        for k in params:
            if k.endswith(("attn.wo", "attn.bo", "ffn.w2", "ffn.b2", "lm_head.b")) or k in ("tok_emb", "lm_head.w"):
                params[k][...] = 0.0
        params["pos_emb"][...] = np.eye(16)
        prompt = tokenize(f"{BOS} Genome", VOCAB)
        for i, w in enumerate(["This", "subject", "is", "MCI", "."]):
            params["lm_head.w"][len(prompt) - 1 + i, VOCAB.id(w)] = 1.0
        params["lm_head.w"][len(prompt) + 4, EOS_ID] = 1.0
        return cfg, params, prompt

    def test_rigged_head(self):
        cfg, params, prompt = self._rigged()
        assert greedy_decode(params, cfg, VOCAB, prompt) == "MCI"

    def test_max_len_zero(self):
        cfg, params, prompt = self._rigged()
        assert greedy_decode(params, cfg, VOCAB, prompt, max_len=0) == UNPARSEABLE

    def test_truncated_is_unparseable(self):
        cfg, params, prompt = self._rigged()
        assert greedy_decode(params, cfg, VOCAB, prompt, max_len=5) == UNPARSEABLE

    def test_repeatable(self):
        cfg = small_cfg()
        params = jitter(core.init_params(cfg, 9))
        e = encode_record(sample_record(multimodal=False).text, None, VOCAB, 3)
        assert greedy_decode(params, cfg, VOCAB, e.ids) == greedy_decode(params, cfg, VOCAB, e.ids)

    def test_parse_label(self):
        assert parse_label(["This", "subject", "is", "AD", "."]) == "AD"
        assert parse_label(["This", "subject", "is", "XX", "."]) == UNPARSEABLE
        assert parse_label(["This", "subject", "AD", "."]) == UNPARSEABLE


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_cfg()
        params = jitter(core.init_params(cfg, 1))
        save_checkpoint(tmp_path / "m.rgma", params, cfg)
        back, cfg2 = load_checkpoint(tmp_path / "m.rgma")
        assert cfg2 == cfg
        assert sorted(back) == sorted(params)
        for k in params:
            assert back[k].tobytes() == params[k].tobytes()
        assert (tmp_path / "m.rgma").read_bytes()[:4] == b"RGMA"

    def test_truncated(self, tmp_path):
        cfg = small_cfg()
        save_checkpoint(tmp_path / "m.rgma", core.init_params(cfg, 1), cfg)
        raw = (tmp_path / "m.rgma").read_bytes()
        (tmp_path / "t.rgma").write_bytes(raw[:-3])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.rgma")
        (tmp_path / "x.rgma").write_bytes(raw + b"\x00")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.rgma")
        (tmp_path / "m2.rgma").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m2.rgma")
