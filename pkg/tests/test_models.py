import math

import numpy as np
import pytest

from mergelab.errors import (
    BadMagicError,
    ShapeError,
    StructureError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from mergelab.models import (
    ClassifierHead,
    EncoderArch,
    MlpEncoder,
    ModelParams,
    TaskModel,
    accuracy_from_logits,
    apply_task_vector,
    encoder_part,
    load_checkpoint,
    pack_task_model,
    save_checkpoint,
    task_vector,
    unpack_task_model,
)
from mergelab.numkit import Rng


def small_params(values=(1.0, 2.0)):
    return ModelParams([("w", np.array([values[0], 0.0])), ("b", np.array([values[1]]))])


class TestModelParams:
    def test_duplicate_names_rejected(self):
        with pytest.raises(StructureError):
            ModelParams([("w", np.zeros(2)), ("w", np.zeros(2))])

    def test_non_finite_rejected_in_checked_mode(self):
        with pytest.raises(ValueError):
            ModelParams([("w", np.array([1.0, np.nan]))])
        ModelParams([("w", np.array([1.0, np.nan]))], check=False)  # unchecked passes

    def test_homology_rejects_rename_reshape_reorder(self):
        base = ModelParams([("a", np.zeros((2, 2))), ("b", np.zeros(2))])
        renamed = ModelParams([("a", np.zeros((2, 2))), ("c", np.zeros(2))])
        reshaped = ModelParams([("a", np.zeros((2, 2))), ("b", np.zeros(3))])
        reordered = ModelParams([("b", np.zeros(2)), ("a", np.zeros((2, 2)))])
        for other, fragment in [(renamed, "c"), (reshaped, "shape"), (reordered, "order")]:
            assert not base.is_homologous(other)
            with pytest.raises(StructureError, match=fragment):
                base.check_homologous(other)

    def test_flat_round_trip(self):
        p = ModelParams([("a", np.arange(6.0).reshape(2, 3)), ("b", np.array([7.0]))])
        flat = p.flat()
        assert flat.tolist() == [0, 1, 2, 3, 4, 5, 7]
        q = p.with_flat(flat)
        assert p.equals(q)

    def test_copy_is_independent(self):
        p = small_params()
        q = p.copy()
        q["w"][0] = 99.0
        assert p["w"][0] == 1.0


class TestEncoder:
    def test_zero_network_gives_zero_embeddings(self):
        arch = EncoderArch(3, (4,), 2)
        enc = MlpEncoder.init_random(arch, Rng(0))
        zeros = enc.params.map(np.zeros_like)
        out = MlpEncoder(arch, zeros).encode(np.ones((5, 3)))
        np.testing.assert_array_equal(out, np.zeros((5, 2)))

    def test_identity_single_layer(self):
        arch = EncoderArch(3, (), 3)
        params = ModelParams([("layer0.weight", np.eye(3)), ("layer0.bias", np.zeros(3))])
        enc = MlpEncoder(arch, params)
        x = Rng(1).normal((4, 3))
        np.testing.assert_array_equal(enc.encode(x), x)

    def test_hand_traced_forward(self):
        # 2 -> 2 (tanh) -> 2 (linear) with hand-set weights; oracle traces
        # each scalar through the same arithmetic with math.tanh.
        w0 = np.array([[0.5, -1.0], [0.25, 0.75]])
        b0 = np.array([0.1, -0.2])
        w1 = np.array([[1.0, 2.0], [-0.5, 0.0]])
        b1 = np.array([0.0, 0.3])
        enc = MlpEncoder(
            EncoderArch(2, (2,), 2),
            ModelParams(
                [
                    ("layer0.weight", w0),
                    ("layer0.bias", b0),
                    ("layer1.weight", w1),
                    ("layer1.bias", b1),
                ]
            ),
        )
        x = np.array([[0.3, -0.6]])
        h0 = math.tanh(0.3 * 0.5 + (-0.6) * 0.25 + 0.1)
        h1 = math.tanh(0.3 * (-1.0) + (-0.6) * 0.75 + (-0.2))
        expected = [h0 * 1.0 + h1 * (-0.5) + 0.0, h0 * 2.0 + h1 * 0.0 + 0.3]
        np.testing.assert_allclose(enc.encode(x)[0], expected, rtol=1e-15)

    def test_dimension_mismatch(self):
        enc = MlpEncoder.init_random(EncoderArch(4, (3,), 2), Rng(2))
        with pytest.raises(ShapeError):
            enc.encode(np.ones((5, 3)))

    def test_bounded_inputs_no_nan(self):
        enc = MlpEncoder.init_random(EncoderArch(16, (64, 64), 32), Rng(3))
        x = Rng(4).uniform(-10, 10, (20, 16))
        out = enc.encode(x)
        assert np.isfinite(out).all()

    def test_from_params_round_trip(self):
        arch = EncoderArch(5, (7, 6), 4)
        enc = MlpEncoder.init_random(arch, Rng(5))
        rebuilt = MlpEncoder.from_params(enc.params)
        assert rebuilt.arch == arch


class TestLogits:
    def test_hand_multiplication(self):
        head = ClassifierHead(np.array([[2.0, -1.0], [0.0, 3.0]]), np.zeros(2))
        out = head.logits(np.array([[1.0, 0.0]]))
        np.testing.assert_array_equal(out, [[2.0, -1.0]])
        assert np.argmax(out[0]) == 0

    def test_zero_weight_bias_decides(self):
        head = ClassifierHead(np.zeros((3, 2)), np.array([0.1, 0.2]))
        out = head.logits(Rng(6).normal((4, 3)))
        np.testing.assert_allclose(out, np.tile([0.1, 0.2], (4, 1)))
        assert (np.argmax(out, axis=1) == 1).all()

    def test_positive_scale_argmax_invariance(self):
        rng = Rng(7)
        head = ClassifierHead(rng.normal((4, 3)), None)
        emb = rng.normal((10, 4))
        base = np.argmax(head.logits(emb), axis=1)
        for c in (0.5, 2.0, 17.0):
            np.testing.assert_array_equal(np.argmax(head.logits(c * emb), axis=1), base)

    def test_tie_breaks_to_lowest_index(self):
        logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
        assert accuracy_from_logits(logits, np.array([0, 1])) == 1.0


class TestTaskVector:
    def test_identical_models_zero_delta(self):
        p = small_params()
        tv = task_vector(p, p)
        assert all(np.all(v == 0) for _, v in tv.delta.items())

    def test_elementwise_oracle(self):
        t = ModelParams([("w", np.array([1.0, 0.0])), ("b", np.array([2.0]))])
        b = ModelParams([("w", np.array([0.5, 1.0])), ("b", np.array([0.0]))])
        tv = task_vector(t, b)
        np.testing.assert_array_equal(tv.delta["w"], [0.5, -1.0])
        np.testing.assert_array_equal(tv.delta["b"], [2.0])

    def test_round_trip_bit_exact(self):
        rng = Rng(8)
        base = ModelParams([("w", rng.normal((20, 20)) * 0.15)])
        # emulate drift over many rounded updates, including near-zero crossings
        drifted = base["w"].copy()
        for _ in range(500):
            drifted = drifted + rng.normal((20, 20)) * 1e-3
        theta_t = ModelParams([("w", drifted)])
        tv = task_vector(theta_t, base)
        recovered = apply_task_vector(base, tv)
        assert recovered.equals(theta_t)

    def test_non_homologous_lists_layers(self):
        t = ModelParams([("w", np.zeros(2))])
        b = ModelParams([("w", np.zeros(3))])
        with pytest.raises(StructureError, match="w"):
            task_vector(t, b)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = Rng(9)
        p = ModelParams(
            [
                ("layer0.weight", rng.normal((4, 3))),
                ("layer0.bias", rng.normal(3)),
                ("odd name é", rng.normal((2, 2, 2))),
            ]
        )
        path = tmp_path / "model.ckpt"
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        assert p.equals(q)

    def test_empty_layer_list(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        save_checkpoint(ModelParams([]), path)
        q = load_checkpoint(path)
        assert len(q) == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(small_params(), path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(small_params(), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(small_params(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 5])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(small_params(), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "missing.ckpt")


class TestTaskModelPacking:
    def test_pack_unpack_round_trip(self):
        enc = MlpEncoder.init_random(EncoderArch(4, (5,), 3), Rng(10))
        head = ClassifierHead.init_random(3, 4, Rng(11))
        model = TaskModel(7, enc, head)
        packed = pack_task_model(model)
        restored = unpack_task_model(packed, 7)
        assert restored.task_id == 7
        assert restored.encoder.params.equals(enc.params)
        np.testing.assert_array_equal(restored.head.weight, head.weight)
        np.testing.assert_array_equal(restored.head.bias, head.bias)

    def test_no_bias_mode_round_trip(self):
        enc = MlpEncoder.init_random(EncoderArch(4, (), 3), Rng(12))
        head = ClassifierHead.init_random(3, 2, Rng(13), use_bias=False)
        packed = pack_task_model(TaskModel(0, enc, head))
        restored = unpack_task_model(packed, 0)
        assert restored.head.bias is None

    def test_encoder_part_strips_head(self):
        enc = MlpEncoder.init_random(EncoderArch(4, (5,), 3), Rng(14))
        head = ClassifierHead.init_random(3, 4, Rng(15))
        packed = pack_task_model(TaskModel(0, enc, head))
        stripped = encoder_part(packed)
        assert stripped.equals(enc.params)
