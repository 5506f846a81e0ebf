import struct
import zlib

import numpy as np
import pytest

from avfusion.errors import BackwardBeforeForward, CorruptFile, InvalidConfig, ShapeMismatch, VersionMismatch
from avfusion.layers import sigmoid
from avfusion.metrics import bce_loss
from avfusion.models import (
    ARCHS,
    REF_ATT,
    REF_FC,
    ModelConfig,
    build,
    decode_weights,
    encode_weights,
    gradcheck_model,
    load_weights,
    param_count,
    save_weights,
)
from avfusion.training import AdamState, adam_step


def tiny(arch="attend_fusion", **kw):
    base = dict(arch=arch, visual_dim=4, audio_dim=2, vocab_size=3, seq_len=2, hidden=(3,), fusion_hidden=())
    base.update(kw)
    return ModelConfig(**base)


def inputs(cfg, B=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, cfg.seq_len, cfg.visual_dim)), rng.normal(size=(B, cfg.seq_len, cfg.audio_dim))


class TestConfig:
    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            tiny(vocab_size=0)
        with pytest.raises(InvalidConfig):
            tiny(arch="early_fusion")
        with pytest.raises(InvalidConfig):
            tiny(hidden=(0,))
        with pytest.raises(InvalidConfig):
            ModelConfig.from_dict({"arch": "attend_fusion", "width": 3})

    def test_dict_round_trip(self):
        cfg = tiny(fusion_hidden=(5, 2))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParamCount:
    def test_single_linear(self):
        # visual_only with no hidden layer and no attention would be a bare 3 -> 2 linear;
        # the closest built model adds the 3x3x3 attention block.
        cfg = ModelConfig(arch="fc_late_fusion", visual_dim=2, audio_dim=1, vocab_size=2, hidden=(), fusion_hidden=())
        assert param_count(cfg) == 3 * 2 + 2 == 8

    def test_hand_ledger(self):
        # visual 4->3 (15), audio 2->3 (9), attention 2*(3*9) (54), out 6->3 (21)
        assert param_count(tiny()) == 15 + 9 + 54 + 21 == 99

    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("fusion", [(), (4,), (4, 2)])
    def test_matches_built_registry(self, arch, fusion):
        cfg = tiny(arch, fusion_hidden=fusion)
        assert build(cfg).num_parameters() == param_count(cfg)

    def test_reference_configs(self):
        fc, att = param_count(REF_FC), param_count(REF_ATT)
        assert abs(fc - 341e6) <= 0.05 * 341e6
        assert abs(att - 72e6) <= 0.05 * 72e6
        assert fc / att >= 4.0


class TestForward:
    def test_build_deterministic(self):
        assert build(tiny(), 3).weights_checksum() == build(tiny(), 3).weights_checksum()
        assert build(tiny(), 3).weights_checksum() != build(tiny(), 4).weights_checksum()

    @pytest.mark.parametrize("arch", ARCHS)
    def test_probabilities_in_open_interval(self, arch):
        cfg = tiny(arch)
        v, a = inputs(cfg)
        p = build(cfg).predict(10 * v, 10 * a)
        assert p.shape == (3, 3)
        assert np.all((p > 0) & (p < 1))

    @pytest.mark.parametrize("arch", ARCHS)
    def test_batch_independence_bitwise(self, arch):
        cfg = tiny(arch, visual_dim=6, hidden=(5,), fusion_hidden=(4,))
        model = build(cfg, 1)
        v, a = inputs(cfg, B=3, seed=1)
        full = model.predict(v, a)
        for i in range(3):
            np.testing.assert_array_equal(full[i], model.predict(v[i : i + 1], a[i : i + 1])[0])

    def test_zero_inputs_give_identical_rows(self):
        cfg = tiny()
        p = build(cfg).predict(np.zeros((4, 2, 4)), np.zeros((4, 2, 2)))
        assert np.all(p == p[0])

    def test_compositional_oracle(self):
        # recompute the tiny AttendFusion by hand from its registry
        cfg = tiny()
        model = build(cfg, 5)
        P = model.parameters()
        v, a = inputs(cfg, B=2, seed=5)

        def branch(x, m):
            h = np.maximum(x @ P[f"{m}.fc0.W"].T + P[f"{m}.fc0.b"], 0)
            Q, K, V = h @ P[f"{m}.attn.Wq"], h @ P[f"{m}.attn.Wk"], h @ P[f"{m}.attn.Wv"]
            S = Q @ K.transpose(0, 2, 1) / np.sqrt(3)
            A = np.exp(S - S.max(axis=-1, keepdims=True))
            A /= A.sum(axis=-1, keepdims=True)
            return (A @ V).mean(axis=1)

        z = np.concatenate([branch(v, "visual"), branch(a, "audio")], axis=1)
        expected = 1 / (1 + np.exp(-(z @ P["out.W"].T + P["out.b"])))
        np.testing.assert_allclose(model.predict(v, a), expected, rtol=1e-12)

    def test_fc_branch_is_mean_then_mlp(self):
        cfg = tiny("fc_late_fusion")
        model = build(cfg, 2)
        P = model.parameters()
        v, a = inputs(cfg, B=2, seed=2)
        hv = np.maximum(v.mean(axis=1) @ P["visual.fc0.W"].T + P["visual.fc0.b"], 0)
        ha = np.maximum(a.mean(axis=1) @ P["audio.fc0.W"].T + P["audio.fc0.b"], 0)
        logits = np.concatenate([hv, ha], axis=1) @ P["out.W"].T + P["out.b"]
        np.testing.assert_allclose(model.predict(v, a), sigmoid(logits), rtol=1e-12)

    @pytest.mark.parametrize("arch,ignored", [("visual_only", "audio"), ("audio_only", "visual")])
    def test_unimodal_ignores_other_modality(self, arch, ignored):
        cfg = tiny(arch)
        model = build(cfg)
        v, a = inputs(cfg)
        base = model.predict(v, a)
        if ignored == "audio":
            np.testing.assert_array_equal(base, model.predict(v, a + 100.0))
            np.testing.assert_array_equal(base, model.predict(v, None))
        else:
            np.testing.assert_array_equal(base, model.predict(v * -3.0, a))

    def test_batch_permutation_permutes_outputs(self):
        cfg = tiny()
        model = build(cfg)
        v, a = inputs(cfg, B=5, seed=8)
        perm = np.random.default_rng(8).permutation(5)
        np.testing.assert_array_equal(model.predict(v, a)[perm], model.predict(v[perm], a[perm]))

    def test_shape_errors(self):
        model = build(tiny())
        with pytest.raises(ShapeMismatch):
            model.predict(np.zeros((2, 2, 5)), np.zeros((2, 2, 2)))
        with pytest.raises(ShapeMismatch):
            model.predict(np.zeros((2, 2, 4)), np.zeros((3, 2, 2)))


class TestBackward:
    def test_before_forward(self):
        with pytest.raises(BackwardBeforeForward):
            build(tiny()).backward(np.zeros((1, 3)))

    def test_zero_upstream_zero_gradients(self):
        cfg = tiny()
        model = build(cfg)
        model.forward(*inputs(cfg))
        model.backward(np.zeros((3, 3)))
        assert all(not g.any() for g in model.gradients().values())

    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck(self, arch, seed):
        report = gradcheck_model(build(tiny(arch), seed), seed=seed, tolerance=1e-5)
        assert report.passed, report.max_error

    def test_gradcheck_with_fusion_mlp(self):
        assert gradcheck_model(build(tiny(fusion_hidden=(3,)), 0), seed=0).passed

    def test_corrupted_gradient_detected(self):
        assert not gradcheck_model(build(tiny()), corrupt=True).passed

    def test_zero_learning_rate_step_is_identity(self):
        cfg = tiny()
        model = build(cfg)
        before = model.weights_checksum()
        v, a = inputs(cfg)
        _, d = bce_loss(model.forward(v, a), [(0,), (1, 2), (2,)])
        model.backward(d)
        adam_step(AdamState.for_model(model, lr=0.0), model)
        assert model.weights_checksum() == before


class TestWeightFiles:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = tiny(fusion_hidden=(4,))
        model = build(cfg, 9)
        path = tmp_path / "w.afw1"
        save_weights(model, path)
        back = load_weights(path, cfg)
        assert back.weights_checksum() == model.weights_checksum()
        assert encode_weights(back.parameters()) == path.read_bytes()
        v, a = inputs(cfg)
        np.testing.assert_array_equal(back.predict(v, a), model.predict(v, a))

    def test_truncated(self):
        blob = encode_weights(build(tiny()).parameters())
        with pytest.raises(CorruptFile):
            decode_weights(blob[:-7])

    def test_bit_flip(self):
        blob = bytearray(encode_weights(build(tiny()).parameters()))
        blob[20] ^= 1
        with pytest.raises(CorruptFile):
            decode_weights(bytes(blob))

    def test_bad_version(self):
        body = bytearray(encode_weights(build(tiny()).parameters())[:-4])
        struct.pack_into("<H", body, 4, 2)
        with pytest.raises(VersionMismatch):
            decode_weights(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))

    def test_wrong_config(self, tmp_path):
        path = tmp_path / "w.afw1"
        save_weights(build(tiny()), path)
        with pytest.raises(ShapeMismatch):
            load_weights(path, tiny(hidden=(5,)))
        with pytest.raises(ShapeMismatch):
            load_weights(path, tiny("fc_late_fusion"))
