"""Decoder layers, centerness/score fusion semantics, postprocessing."""

import math

import numpy as np
import pytest

from fusedet import tensor as T
from fusedet.attention import AttentionConfig
from fusedet.backbone import FeatureMap
from fusedet.decoder import (DecoderConfig, Detection, apply_heads,
                             compute_centerness, decoder_forward, decoder_layer,
                             init_decoder, location_aware_score, postprocess,
                             sine_position_encoding)
from fusedet.params import ParamStore
from fusedet.tensor import Tape, Tensor


def make_decoder(layers=2, n=4, c=8, heads=2, scales=1, refs=True, seed=0,
                 beta=0.05, centerness=True):
    cfg = DecoderConfig(layers=layers, n_queries=n, width=c, heads=heads,
                        expansion=2.0, alpha=0.45, beta=beta,
                        centerness=centerness, n_classes=2)
    store = ParamStore(seed=seed)
    params = init_decoder(store, cfg, n_memory_scales=scales, with_refs=refs)
    return cfg, store, params


def memory_map(rng, h, w, c, stride=32, idx=4):
    return FeatureMap(idx, stride, h, w, c, Tensor(rng.standard_normal((h * w, c))))


class TestDecoderLayer:
    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        _, store, params = make_decoder()
        lp = params.layers[0]
        cfg = AttentionConfig(8, 2)
        q = rng.standard_normal((4, 8))
        qpos = rng.standard_normal((4, 8))
        mem = Tensor(rng.standard_normal((6, 8)))
        mpos = Tensor(rng.standard_normal((6, 8)))
        out = decoder_layer(Tensor(q), mem, Tensor(qpos), mpos, lp, cfg)
        perm = [2, 0, 3, 1]
        out_p = decoder_layer(Tensor(q[perm]), mem, Tensor(qpos[perm]), mpos, lp, cfg)
        assert np.allclose(out.data[perm], out_p.data, atol=1e-12)

    def test_zero_weights_identity(self):
        rng = np.random.default_rng(1)
        _, store, params = make_decoder(seed=2)
        lp = params.layers[0]
        for attn in (lp.self_attn, lp.cross_attn):
            attn.wv.data = np.zeros_like(attn.wv.data)
            attn.bv.data = np.zeros_like(attn.bv.data)
            attn.wo.data = np.zeros_like(attn.wo.data)
            attn.bo.data = np.zeros_like(attn.bo.data)
        lp.ffn.w2.data = np.zeros_like(lp.ffn.w2.data)
        lp.ffn.b2.data = np.zeros_like(lp.ffn.b2.data)
        q = rng.standard_normal((4, 8))
        out = decoder_layer(Tensor(q), Tensor(rng.standard_normal((5, 8))),
                            Tensor(rng.standard_normal((4, 8))),
                            Tensor(rng.standard_normal((5, 8))),
                            lp, AttentionConfig(8, 2))
        assert np.allclose(out.data, q, atol=1e-12)

    def test_cross_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        _, store, params = make_decoder(seed=4)
        rec = []
        decoder_layer(Tensor(rng.standard_normal((4, 8))),
                      Tensor(rng.standard_normal((7, 8))),
                      Tensor(rng.standard_normal((4, 8))),
                      Tensor(rng.standard_normal((7, 8))),
                      params.layers[0], AttentionConfig(8, 2), recorder=rec)
        assert np.max(np.abs(rec[0].sum(axis=-1) - 1.0)) < 1e-10

    def test_empty_memory_rejected(self):
        _, store, params = make_decoder(seed=5)
        with pytest.raises(ValueError):
            decoder_layer(Tensor(np.zeros((2, 8))), Tensor(np.zeros((0, 8))),
                          Tensor(np.zeros((2, 8))), Tensor(np.zeros((0, 8))),
                          params.layers[0], AttentionConfig(8, 2))


class TestDecoderForward:
    def test_single_layer_equals_manual_composition(self):
        rng = np.random.default_rng(6)
        cfg, store, params = make_decoder(layers=1, seed=7)
        mem = memory_map(rng, 2, 2, 8)
        out = decoder_forward([mem], params)
        from fusedet.decoder import build_memory
        from fusedet.attention import norm
        memory, mpos, _ = build_memory([mem], params)
        q = decoder_layer(params.queries.embed, memory, params.queries.pos, mpos,
                          params.layers[0], AttentionConfig(8, 2))
        ref = apply_heads(norm(q, params.out_norm), params.heads[0])
        assert np.array_equal(out.layers[0].cls_logits.data, ref.cls_logits.data)
        assert np.array_equal(out.layers[0].boxes.data, ref.boxes.data)

    def test_layer_count_and_shapes(self):
        rng = np.random.default_rng(8)
        cfg, store, params = make_decoder(layers=3, seed=9)
        out = decoder_forward([memory_map(rng, 2, 3, 8)], params)
        assert len(out.layers) == 3
        for lo in out.layers:
            assert lo.cls_logits.shape == (4, 2)
            assert lo.boxes.shape == (4, 4)
            assert lo.iou_logit.shape == (4,)
            assert np.all((lo.boxes.data > 0) & (lo.boxes.data < 1))

    def test_per_layer_heads_have_distinct_parameters(self):
        rng = np.random.default_rng(10)
        cfg, store, params = make_decoder(layers=2, seed=11)
        mem = memory_map(rng, 2, 2, 8)
        store.zero_grad()
        with Tape() as tape:
            out = decoder_forward([mem], params)
            tape.backward(T.tsum(out.layers[0].boxes))
        g1 = store["decoder.head1.box.w1"].grad
        g2 = store["decoder.head2.box.w1"].grad
        assert g1 is not None and np.abs(g1).max() > 0
        assert g2 is None

    def test_multi_scale_memory_uses_level_embed(self):
        rng = np.random.default_rng(12)
        cfg, store, params = make_decoder(scales=2, seed=13)
        maps = [memory_map(rng, 4, 4, 8, stride=16, idx=3),
                memory_map(rng, 2, 2, 8, stride=32, idx=4)]
        assert params.level_embed is not None
        out = decoder_forward(maps, params)
        assert out.layers[-1].cls_logits.shape == (4, 2)


class TestCenterness:
    def test_center_is_one(self):
        assert compute_centerness((0.5, 0.5), (0.0, 0.0, 1.0, 1.0)) == 1.0

    def test_outside_is_zero(self):
        assert compute_centerness((1.5, 0.5), (0.0, 0.0, 1.0, 1.0)) == 0.0

    def test_formula_oracle(self):
        got = compute_centerness((0.25, 0.5), (0.0, 0.0, 1.0, 1.0))
        assert abs(got - math.sqrt((0.25 / 0.75) * 1.0)) < 1e-12
        assert abs(got - 0.5773502691896258) < 1e-12

    def test_degenerate_box(self):
        assert compute_centerness((0.5, 0.5), (0.5, 0.0, 0.5, 1.0)) == 0.0

    def test_random_inputs_in_unit_interval(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            box = np.sort(rng.uniform(0, 1, 2))
            boy = np.sort(rng.uniform(0, 1, 2))
            ref = rng.uniform(-0.2, 1.2, 2)
            c = compute_centerness(ref, (box[0], boy[0], box[1], boy[1]))
            assert 0.0 <= c <= 1.0


class TestLocationAwareScore:
    def test_alpha_beta_zero_is_cls(self):
        assert location_aware_score(0.7, 0.2, 0.1, 0.0, 0.0) == 0.7

    def test_all_ones(self):
        assert location_aware_score(1.0, 1.0, 1.0, 0.45, 0.05) == 1.0

    def test_pow_oracle(self):
        got = location_aware_score(0.8, 0.9, 1.0, 0.45, 0.05)
        assert abs(got - 0.8 ** 0.5 * 0.9 ** 0.45) < 1e-12
        assert abs(got - 0.85278) < 2e-3

    def test_zero_power_zero_base(self):
        # 0^0 := 1, so beta=0 with ctr=0 must not zero the score
        assert location_aware_score(0.5, 0.5, 0.0, 0.5, 0.0) == 0.5 ** 0.5 * 0.5 ** 0.5

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            location_aware_score(1.0, 1.0, 1.0, 0.8, 0.3)

    def test_monotone(self):
        base = location_aware_score(0.5, 0.5, 0.5, 0.45, 0.05)
        assert location_aware_score(0.6, 0.5, 0.5, 0.45, 0.05) >= base
        assert location_aware_score(0.5, 0.6, 0.5, 0.45, 0.05) >= base
        assert location_aware_score(0.5, 0.5, 0.6, 0.45, 0.05) >= base

    def test_oracle_on_random_inputs(self):
        rng = np.random.default_rng(15)
        for _ in range(1000):
            c, i, t = rng.uniform(0, 1, 3)
            a, b = 0.45, 0.05
            got = location_aware_score(c, i, t, a, b)
            want = math.pow(c, 1 - a - b) * math.pow(i, a) * math.pow(t, b)
            assert abs(got - want) < 1e-12


class TestPostprocess:
    def _forward(self, beta, centerness, seed=16):
        rng = np.random.default_rng(seed)
        cfg, store, params = make_decoder(layers=1, seed=seed, beta=beta,
                                          centerness=centerness, refs=centerness)
        out = decoder_forward([memory_map(rng, 2, 2, 8)], params)
        return cfg, out

    def test_vanilla_beta_zero_drops_centerness(self):
        cfg, out = self._forward(beta=0.0, centerness=False)
        dets = postprocess(out, cfg, image_size=64, top_k=8)
        last = out.layers[-1]
        cls_p = 1 / (1 + np.exp(-last.cls_logits.data))
        iou_p = 1 / (1 + np.exp(-last.iou_logit.data))
        want = cls_p ** (1 - cfg.alpha) * iou_p[:, None] ** cfg.alpha
        got = {(round(d.score, 12)) for d in dets}
        assert got <= {round(float(v), 12) for v in want.ravel()}

    def test_top_k_larger_than_nk_returns_all(self):
        cfg, out = self._forward(beta=0.05, centerness=True)
        dets = postprocess(out, cfg, image_size=64, top_k=1000)
        assert len(dets) == 4 * 2

    def test_zero_alpha_beta_ranking_matches_cls(self):
        cfg0 = DecoderConfig(layers=1, n_queries=4, width=8, heads=2,
                             expansion=2.0, alpha=0.0, beta=0.0,
                             centerness=False, n_classes=2)
        store = ParamStore(seed=17)
        params = init_decoder(store, cfg0, n_memory_scales=1, with_refs=False)
        rng = np.random.default_rng(18)
        out = decoder_forward([memory_map(rng, 2, 2, 8)], params)
        dets = postprocess(out, cfg0, image_size=64, top_k=8)
        cls_p = 1 / (1 + np.exp(-out.layers[-1].cls_logits.data)).ravel()
        assert np.allclose(sorted((d.score for d in dets), reverse=True),
                           np.sort(cls_p)[::-1], atol=1e-12)

    def test_fixed_size_prediction_set(self):
        cfg, out = self._forward(beta=0.05, centerness=True)
        assert out.layers[-1].cls_logits.shape[0] == cfg.n_queries

    def test_score_zero_when_cls_zero(self):
        assert location_aware_score(0.0, 0.9, 0.9, 0.45, 0.05) == 0.0


def test_sine_position_encoding_shape_and_range():
    pos = sine_position_encoding(3, 5, 16)
    assert pos.shape == (15, 16)
    assert np.all(np.abs(pos) <= 1.0 + 1e-12)
    with pytest.raises(ValueError):
        sine_position_encoding(2, 2, 6)
