"""Decoder stages: query init, point refinement, deformable extraction, instance mixing, decoding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qptad.decoder import (ActionDecoder, DecoderConfig, RawPrediction, decode_instances, decoder_forward,
                           refine_points)
from qptad.errors import ConfigError
from qptad.numerics import Tensor, clip, interp_sample, layer_norm
from qptad.pipeline import WindowSpec
from qptad.seqblocks import MambaMhsaConfig


def small_config(**kw) -> DecoderConfig:
    base = dict(L=2, N_q=5, N_s=6, D=8, D_prime=2, num_classes=3, D_in=4,
                mamba=MambaMhsaConfig(M=1, heads=2, N_state=3))
    base.update(kw)
    return DecoderConfig(**base).validate()


def small_model(seed=0, **kw) -> ActionDecoder:
    return ActionDecoder(np.random.default_rng(seed), small_config(**kw))


def _zero(lin):
    lin.W.data[:] = 0.0
    lin.b.data[:] = 0.0


class TestConfig:
    @pytest.mark.parametrize("field,value", [("L", 0), ("N_q", 0), ("N_s", 1), ("D_prime", 0),
                                             ("spread", -0.1), ("s_min", 0.0)])
    def test_rejects(self, field, value):
        with pytest.raises(ConfigError, match=field):
            small_config(**{field: value})

    def test_mamba_width_follows_decoder(self):
        assert small_config(D=12).mamba.D == 12

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            small_config(D=10, mamba=MambaMhsaConfig(M=1, heads=4))


class TestInitQueries:
    def test_pure_midpoint_without_spread(self):
        state = small_model(spread=0.0).init_queries(32)
        np.testing.assert_array_equal(state.points.data, np.full((5, 6), 16.0))

    def test_symmetric_spread(self):
        pts = small_model().init_queries(32).points.data
        assert pts.min() == pytest.approx(16 - 1.6)
        assert pts.max() == pytest.approx(16 + 1.6)
        np.testing.assert_allclose(pts + pts[:, ::-1], 32.0)

    def test_deterministic(self):
        m = small_model()
        a, b = m.init_queries(20), m.init_queries(20)
        np.testing.assert_array_equal(a.points.data, b.points.data)
        np.testing.assert_array_equal(a.vectors.data, b.vectors.data)
        np.testing.assert_array_equal(a.vectors.data, m.query_embed.data)

    def test_needs_two_steps(self):
        with pytest.raises(ValueError):
            small_model().init_queries(1)


class TestRefinePoints:
    def test_zero_offsets(self):
        P = np.random.default_rng(0).normal(size=(3, 4)) * 5
        np.testing.assert_array_equal(refine_points(P, np.zeros((3, 4))).data, P)

    def test_hand_trace(self):
        np.testing.assert_array_equal(refine_points([[10.0, 20.0]], [[1.0, -1.0]]).data, [[15.0, 15.0]])

    def test_span_floor(self):
        out = refine_points(np.full((1, 3), 7.0), [[2.0, -1.0, 0.5]]).data
        np.testing.assert_array_equal(out, [[8.0, 6.5, 7.25]])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_contraction_bound(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.normal(size=(4, 5)) * rng.uniform(0.01, 20)
        dt = rng.normal(size=(4, 5)) * 3
        step = np.abs(refine_points(P, dt).data - P).max(axis=1)
        s = P.max(axis=1) - P.min(axis=1)
        bound = 0.5 * np.maximum(s, 1.0) * np.abs(dt).max(axis=1)
        assert np.all(step <= bound * (1 + 1e-12))


class TestPredictOffsets:
    def test_zero_projection(self):
        m = small_model()
        layer = m.layers[0]
        _zero(layer.point_offset)
        Q = np.random.default_rng(1).normal(size=(5, 8))
        np.testing.assert_array_equal(layer.predict_offsets(Tensor(Q)).data, np.zeros((5, 6)))

    def test_bias_only_constant_across_queries(self):
        layer = small_model().layers[0]
        layer.point_offset.W.data[:] = 0.0
        layer.point_offset.b.data[:] = np.arange(6.0)
        out = layer.predict_offsets(Tensor(np.random.default_rng(2).normal(size=(5, 8)))).data
        np.testing.assert_array_equal(out, np.tile(np.arange(6.0), (5, 1)))

    def test_matmul_oracle(self):
        layer = small_model().layers[0]
        layer.point_offset.W.data[:] = np.random.default_rng(3).normal(size=(8, 6))
        Q = np.random.default_rng(4).normal(size=(5, 8))
        expected = Q @ layer.point_offset.W.data + layer.point_offset.b.data
        np.testing.assert_allclose(layer.predict_offsets(Tensor(Q)).data, expected, atol=1e-14)


class TestFfnPointUpdate:
    def test_zero_weights_identity(self):
        layer = small_model().layers[0]
        P = np.random.default_rng(5).uniform(0, 32, size=(5, 6))
        np.testing.assert_array_equal(layer.ffn_point_update(Tensor(P), 32).data, P)

    def test_bias_only_uniform_shift(self):
        layer = small_model().layers[0]
        _zero(layer.point_ffn1)
        layer.point_ffn2.b.data[:] = 0.25
        P = np.random.default_rng(6).uniform(0, 32, size=(5, 6))
        np.testing.assert_allclose(layer.ffn_point_update(Tensor(P), 32).data, P + 0.25 * 32, atol=1e-12)

    def test_hand_computation(self):
        layer = small_model(N_s=3).layers[0]
        rng = np.random.default_rng(7)
        W1, b1, W2, b2 = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=(3, 3)), rng.normal(size=3)
        layer.point_ffn1.W.data[:], layer.point_ffn1.b.data[:] = W1, b1
        layer.point_ffn2.W.data[:], layer.point_ffn2.b.data[:] = W2, b2
        P = np.array([[2.0, 5.0, 9.0], [1.0, 1.5, 3.0]])
        T = 12
        expected = []
        for row in P:
            z = row / T
            h = [max(0.0, sum(z[i] * W1[i, j] for i in range(3)) + b1[j]) for j in range(3)]
            expected.append([row[j] + T * (sum(h[i] * W2[i, j] for i in range(3)) + b2[j]) for j in range(3)])
        np.testing.assert_allclose(layer.ffn_point_update(Tensor(P), T).data, expected, atol=1e-12)


class TestPointLevelExtract:
    def test_zero_offsets_reduce_to_interpolation(self):
        layer = small_model().layers[0]
        _zero(layer.sub_offset)
        rng = np.random.default_rng(8)
        F, P, Q = rng.normal(size=(10, 8)), rng.uniform(0, 9, size=(5, 6)), rng.normal(size=(5, 8))
        out = layer.point_level_extract(Tensor(F), Tensor(P), Tensor(Q)).data
        np.testing.assert_allclose(out, interp_sample(F, P).data, atol=1e-12)

    def test_constant_features(self):
        layer = small_model().layers[0]
        rng = np.random.default_rng(9)
        row = rng.normal(size=8)
        F = np.tile(row, (10, 1))
        out = layer.point_level_extract(Tensor(F), Tensor(rng.uniform(-5, 15, (5, 6))),
                                        Tensor(rng.normal(size=(5, 8)))).data
        np.testing.assert_allclose(out, np.broadcast_to(row, (5, 6, 8)), atol=1e-12)

    def test_pencil_case(self):
        layer = small_model(N_q=1, N_s=2, D=2, D_prime=1, mamba=MambaMhsaConfig(M=1, heads=1, N_state=2)).layers[0]
        layer.sub_offset.W.data[:] = 0.0
        layer.sub_offset.b.data[:] = [-0.5, 0.0, 0.5, 1.0]
        layer.sub_weight.W.data[:] = 0.0
        layer.sub_weight.b.data[:] = np.log([1.0, 1.0, 1.0, 1.0])
        F = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0], [6.0, 7.0]])
        P = np.array([[1.0, 2.5]])
        # point 1.0: sub-points 0.5, 1.0, 1.5, 2.0 -> rows [1,2], [2,3], [3,4], [4,5]; mean [2.5, 3.5]
        # point 2.5: sub-points 2.0, 2.5, 3.0, 3.5 (clamped to 3) -> [4,5], [5,6], [6,7], [6,7]; mean [5.25, 6.25]
        out = layer.point_level_extract(Tensor(F), Tensor(P), Tensor(np.zeros((1, 2)))).data
        np.testing.assert_allclose(out, [[[2.5, 3.5], [5.25, 6.25]]], atol=1e-12)


class TestInstanceMix:
    def test_zero_output_projection_is_identity(self):
        layer = small_model().layers[0]
        _zero(layer.mix_out)
        rng = np.random.default_rng(10)
        Q = rng.normal(size=(5, 8))
        out = layer.instance_mix(Tensor(rng.normal(size=(5, 6, 8))), Tensor(Q)).data
        np.testing.assert_array_equal(out, Q)

    def test_shape_trace(self):
        layer = small_model(N_s=5, D=8, D_prime=2).layers[0]
        assert layer.mix_out.W.shape == (5 * 16, 8)
        out = layer.instance_mix(Tensor(np.ones((3, 5, 8))), Tensor(np.ones((3, 8))))
        assert out.shape == (3, 8)

    def test_pencil_case(self):
        layer = small_model(N_q=1, N_s=2, D=2, D_prime=1, mamba=MambaMhsaConfig(M=1, heads=1, N_state=2)).layers[0]
        theta_f = np.array([[1.0, 2.0], [0.0, -1.0]])
        theta_c1 = np.array([[1.0], [-2.0]])
        theta_c2 = np.array([[3.0, 1.0]])
        for lin, theta in ((layer.gen_frame, theta_f), (layer.gen_ch1, theta_c1), (layer.gen_ch2, theta_c2)):
            lin.W.data[:] = 0.0
            lin.b.data[:] = theta.ravel()
        W_out = np.random.default_rng(11).normal(size=(8, 2))
        layer.mix_out.W.data[:] = W_out
        layer.mix_out.b.data[:] = 0.0
        X = np.array([[1.0, 2.0], [3.0, 5.0]])
        q = np.array([0.5, -0.5])

        def ln(v):
            v = np.asarray(v, float)
            return (v - v.mean()) / np.sqrt(v.var() + 1e-5)

        relu = lambda v: np.maximum(v, 0.0)
        x_f = np.array([relu(ln(X.T[d] @ theta_f)) for d in range(2)])  # D x N_s
        x_c1 = np.array([relu(ln(X[s] @ theta_c1)) for s in range(2)])  # N_s x D'
        x_c = np.array([relu(ln(x_c1[s] @ theta_c2)) for s in range(2)])  # N_s x D
        mixed = np.concatenate([x_f.T, x_c], axis=1).ravel()
        expected = q + mixed @ W_out
        out = layer.instance_mix(Tensor(X[None]), Tensor(q[None])).data
        np.testing.assert_allclose(out[0], expected, atol=1e-12)


class TestClassify:
    def test_zero_weights_uniform(self):
        m = small_model()
        _zero(m.cls_hidden)
        _zero(m.cls_out)
        out = m.classify(Tensor(np.random.default_rng(12).normal(size=(5, 8)))).data
        np.testing.assert_array_equal(out, np.zeros((5, 3)))

    def test_bias_only_identical_rows(self):
        m = small_model()
        m.cls_out.W.data[:] = 0.0
        m.cls_out.b.data[:] = [0.1, -2.0, 0.7]
        out = m.classify(Tensor(np.random.default_rng(13).normal(size=(5, 8)))).data
        np.testing.assert_array_equal(out, np.tile([0.1, -2.0, 0.7], (5, 1)))

    def test_matmul_oracle(self):
        m = small_model()
        m.cls_out.W.data[:] = np.random.default_rng(14).normal(size=(8, 3))
        Q = np.random.default_rng(15).normal(size=(5, 8))
        h = np.maximum(Q @ m.cls_hidden.W.data + m.cls_hidden.b.data, 0)
        np.testing.assert_allclose(m.classify(Tensor(Q)).data, h @ m.cls_out.W.data + m.cls_out.b.data,
                                   atol=1e-13)


class TestForward:
    def test_one_prediction_per_layer(self):
        m = small_model(L=3)
        preds = decoder_forward(m, np.random.default_rng(16).normal(size=(12, 4)))
        assert [p.layer_index for p in preds] == [0, 1, 2]
        assert all(p.points.shape == (5, 6) and p.class_logits.shape == (5, 3) for p in preds)

    def test_single_layer_equals_manual_composition(self):
        m = small_model(L=1)
        F = np.random.default_rng(17).normal(size=(12, 4))
        pred = m(F)[0]
        layer = m.layers[0]
        Fp = m.input_proj(Tensor(F))
        state = m.init_queries(12)
        Q = layer.mamba_mhsa(state.vectors)
        X = layer.point_level_extract(Fp, state.points, Q)
        Q = layer.instance_mix(X, Q)
        P = refine_points(state.points, layer.predict_offsets(Q), 1.0)
        P = clip(layer.ffn_point_update(P, 12), -12.0, 24.0)
        np.testing.assert_array_equal(pred.points.data, P.data)
        np.testing.assert_array_equal(pred.class_logits.data, m.classify(Q).data)

    def test_residual_reachability(self):
        m = small_model(L=1)
        layer = m.layers[0]
        for blk in layer.mamba_mhsa.blocks:
            blk.C.data[:] = 0.0
        for lin in (layer.mamba_mhsa.mhsa.o, layer.mix_out, layer.point_offset, layer.point_ffn2):
            _zero(lin)
        F = Tensor(np.random.default_rng(18).normal(size=(12, 8)))
        state = m.init_queries(12)
        nxt = m.layer_forward(layer, F, state)
        np.testing.assert_allclose(nxt.vectors.data, layer_norm(state.vectors).data, atol=1e-12)
        np.testing.assert_array_equal(nxt.points.data, state.points.data)

    def test_points_stay_in_clamp_range(self):
        m = small_model()
        m.layers[0].point_offset.b.data[:] = 1e4
        preds = m(np.random.default_rng(19).normal(size=(12, 4)))
        for p in preds:
            assert p.points.data.min() >= -12 and p.points.data.max() <= 24

    def test_rejects_wrong_width(self):
        with pytest.raises(ValueError, match="features"):
            small_model()(np.zeros((12, 5)))

    def test_parameter_names_unique(self):
        names = [n for n, _ in small_model().named_parameters()]
        assert len(names) == len(set(names))
        assert [p.name for p in small_model().parameters()] == names


def _pred(points, logits):
    return RawPrediction(Tensor(np.asarray(points, float)), Tensor(np.asarray(logits, float)), 0)


class TestDecodeInstances:
    def test_stride_and_offset(self):
        pred = _pred([[3.0, 4.0, 5.0]], [[5.0, -5.0]])
        (inst,) = decode_instances(pred, WindowSpec("v", 128), 0.1)
        assert (inst.start_frame, inst.end_frame, inst.class_id) == (140.0, 148.0, 0)
        assert inst.score == pytest.approx(1 / (1 + np.exp(-5.0)))

    def test_below_threshold_empty(self):
        assert decode_instances(_pred([[1.0, 4.0]] * 3, np.full((3, 2), -5.0)), WindowSpec("v", 0), 0.1) == []

    def test_zero_length_dropped(self):
        assert decode_instances(_pred([[2.0, 2.0]], [[5.0, 0.0]]), WindowSpec("v", 0), 0.1) == []

    def test_clamped_to_window(self):
        (inst,) = decode_instances(_pred([[-3.0, 40.0]], [[5.0, 0.0]]), WindowSpec("v", 64), 0.1)
        assert (inst.start_frame, inst.end_frame) == (64.0, 192.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_threshold_monotone(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        pred = _pred(rng.uniform(-2, 34, (8, 4)), rng.normal(size=(8, 3)) * 2)
        lo, hi = sorted((t1, t2))
        w = WindowSpec("v", 0)
        assert set(decode_instances(pred, w, hi)) <= set(decode_instances(pred, w, lo))

    def test_point_order_irrelevant(self):
        rng = np.random.default_rng(20)
        pts, logits = rng.uniform(0, 32, (6, 5)), rng.normal(size=(6, 3))
        w = WindowSpec("v", 256)
        a = decode_instances(_pred(pts, logits), w, 0.0)
        b = decode_instances(_pred(pts[:, rng.permutation(5)], logits), w, 0.0)
        assert a == b
