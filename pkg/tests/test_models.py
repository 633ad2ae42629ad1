"""Encoder/head/decoder stack, EMA teacher, checkpoint round trip."""

import numpy as np
import pytest

from spcl.autodiff import GradTape, Tensor, finite_diff_check
from spcl.errors import InvalidConfig, ShapeMismatch
from spcl.models import EmaTeacher, ModelConfig, ParamModel, embed, ema_update, segment

TINY = ModelConfig(
    image_shape=(4, 4), num_classes=2, arch="dense", encoder_widths=(8, 4),
    head_hidden=6, embed_dim=4, decoder_width=6, skip_width=3, seed=3,
)
TINY_CONV = ModelConfig(
    image_shape=(8, 8), num_classes=2, arch="conv", conv_channels=(3, 4),
    head_hidden=8, embed_dim=6, seed=5,
)


class TestEmbed:
    def test_unit_norm(self, rng):
        model = ParamModel(TINY)
        z = embed(model, rng.random((4, 4)))
        assert abs(np.linalg.norm(z.data) - 1.0) < 1e-10

    def test_deterministic(self, rng):
        model = ParamModel(TINY)
        x = rng.random((4, 4))
        assert np.array_equal(embed(model, x).data, embed(model, x).data)

    def test_distinct_inputs_distinct_embeddings(self, rng):
        model = ParamModel(TINY)
        a = embed(model, rng.random((4, 4))).data
        b = embed(model, rng.random((4, 4))).data
        assert float(a @ b) < 1.0 - 1e-6

    def test_batch_matches_single(self, rng):
        model = ParamModel(TINY)
        images = rng.random((3, 4, 4))
        batched = model.embed_batch(images).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], embed(model, images[i]).data, atol=1e-12)


class TestSegment:
    def test_output_shape(self, rng):
        model = ParamModel(ModelConfig(image_shape=(16, 16), num_classes=2))
        logits = segment(model, rng.random((16, 16)))
        assert logits.shape == (16, 16, 2)

    def test_conv_output_shape_and_unit_embedding(self, rng):
        model = ParamModel(TINY_CONV)
        logits = model.segment_batch(rng.random((3, 8, 8)))
        assert logits.shape == (3, 8, 8, 2)
        z = model.embed_batch(rng.random((3, 8, 8)))
        np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-10)

    def test_conv_cross_entropy_gradient_finite_difference(self, rng):
        # seed screened so no pre-activation sits within the FD step of a
        # LeakyReLU kink (central differences are invalid across the kink)
        from spcl.semi_supervised import supervised_loss

        model = ParamModel(TINY_CONV)
        x = rng.random((2, 8, 8))
        target = rng.integers(0, 2, size=(2, 8, 8))
        names = sorted(model.params)

        def f(*tensors):
            probe = ParamModel(TINY_CONV, dict(zip(names, tensors)))
            return supervised_loss(probe.segment_batch(x), target)

        report = finite_diff_check(f, [model.params[n] for n in names], step=1e-5, tolerance=1e-4)
        assert report.passed, report

    def test_zero_final_layer_gives_uniform_softmax(self, rng):
        model = ParamModel(TINY)
        model.params["dec.out.w"] = Tensor(np.zeros(model.params["dec.out.w"].shape), requires_grad=True)
        model.params["dec.out.b"] = Tensor(np.zeros(model.params["dec.out.b"].shape), requires_grad=True)
        logits = segment(model, rng.random((4, 4))).data
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        probs = e / e.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(probs, 0.5, atol=1e-12)

    def test_rejects_wrong_spatial_shape(self, rng):
        model = ParamModel(TINY)
        with pytest.raises(ShapeMismatch):
            segment(model, rng.random((5, 5)))

    def test_cross_entropy_gradient_finite_difference(self, rng):
        from spcl.semi_supervised import supervised_loss

        model = ParamModel(TINY)
        x = rng.random((2, 4, 4))
        target = rng.integers(0, 2, size=(2, 4, 4))
        names = sorted(model.params)

        def f(*tensors):
            probe = ParamModel(TINY, dict(zip(names, tensors)))
            return supervised_loss(probe.segment_batch(x), target)

        report = finite_diff_check(f, [model.params[n] for n in names], step=1e-5, tolerance=1e-4)
        assert report.passed, report


class TestParameterAccounting:
    def test_counts_stable_for_config(self):
        a = ParamModel(TINY).parameter_counts()
        b = ParamModel(TINY).parameter_counts()
        assert a == b
        assert a["encoder_head"] > 0 and a["decoder"] > 0

    def test_all_params_alive_in_combined_loss(self, rng):
        """Generic batch: every parameter block gets some gradient signal."""
        from spcl.contrastive import AugmentedBatch
        from spcl.self_paced import SelfPacedConfig, combined_sp_loss, loss_bounds
        from spcl.semi_supervised import supervised_loss
        from spcl.synth_data import interleaved_pairs

        model = ParamModel(TINY)
        x = rng.random((4, 4, 4))
        target = rng.integers(0, 2, size=(4, 4, 4))
        cfg = SelfPacedConfig(tau=0.5, gamma_start=1.0, gamma_end=loss_bounds(2, 0.5)[1])
        with GradTape() as tape:
            z = model.embed_batch(x)
            batch = AugmentedBatch(z, interleaved_pairs(4), np.array([[0, 0, 1, 1]]))
            loss = supervised_loss(model.segment_batch(x), target) + combined_sp_loss(
                batch, cfg.gamma_end * 0.8, cfg
            )
        names = sorted(model.params)
        grads = tape.gradient(loss, [model.params[n] for n in names])
        for name, g in zip(names, grads):
            assert np.any(g != 0.0), f"dead parameter block {name}"

    def test_reset_decoder_only_touches_decoder(self, rng):
        model = ParamModel(TINY)
        before = {k: v.data.copy() for k, v in model.params.items()}
        model.reset_decoder(seed=99)
        for k, v in model.params.items():
            if k.startswith("dec."):
                if k.endswith(".w"):
                    assert not np.array_equal(v.data, before[k])
            else:
                assert np.array_equal(v.data, before[k])


class TestEmaTeacher:
    def test_scalar_update(self):
        model = ParamModel(TINY)
        teacher = EmaTeacher(model, decay=0.99)
        one = {k: Tensor(np.ones(v.shape), requires_grad=True) for k, v in model.params.items()}
        zero = {k: Tensor(np.zeros(v.shape), requires_grad=True) for k, v in model.params.items()}
        teacher.shadow = {k: np.ones(v.shape) for k, v in model.params.items()}
        ema_update(teacher, ParamModel(TINY, zero), decay=0.99)
        np.testing.assert_allclose(teacher.shadow["enc.0.w"], 0.99)

    def test_decay_zero_copies_student(self, rng):
        model = ParamModel(TINY)
        teacher = EmaTeacher(model, decay=0.0)
        other = ParamModel(ModelConfig(**{**TINY.__dict__, "seed": 11}))
        ema_update(teacher, other)
        for k in teacher.shadow:
            np.testing.assert_array_equal(teacher.shadow[k], other.params[k].data)

    def test_geometric_convergence(self):
        model = ParamModel(TINY)
        teacher = EmaTeacher(model, decay=0.9)
        target = ParamModel(ModelConfig(**{**TINY.__dict__, "seed": 5}))
        d0 = max(np.abs(teacher.shadow[k] - target.params[k].data).max() for k in teacher.shadow)
        for step in range(30):
            ema_update(teacher, target)
        d = max(np.abs(teacher.shadow[k] - target.params[k].data).max() for k in teacher.shadow)
        assert d <= d0 * 0.9**30 + 1e-12

    def test_shape_mismatch_rejected(self):
        model = ParamModel(TINY)
        teacher = EmaTeacher(model)
        bad = ParamModel(ModelConfig(**{**TINY.__dict__, "embed_dim": 5}))
        with pytest.raises(ShapeMismatch):
            ema_update(teacher, bad)

    def test_teacher_forward_has_no_gradient_path(self, rng):
        model = ParamModel(TINY)
        teacher = EmaTeacher(model)
        x = rng.random((2, 4, 4))
        with GradTape() as tape:
            out = teacher.as_model().segment_batch(x).sum()
        assert not tape.nodes  # nothing tracked


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = ParamModel(TINY)
        path = tmp_path / "model.npz"
        model.save(path)
        loaded = ParamModel.load(path)
        assert loaded.config == model.config
        for k in model.params:
            np.testing.assert_array_equal(loaded.params[k].data, model.params[k].data)
        x = rng.random((4, 4))
        np.testing.assert_array_equal(embed(loaded, x).data, embed(model, x).data)

    def test_version_check(self, tmp_path):
        model = ParamModel(TINY)
        path = tmp_path / "model.npz"
        model.save(path)
        import json

        import numpy as np2

        data = dict(np2.load(path))
        meta = json.loads(bytes(data["__meta__"]).decode())
        meta["format_version"] = 999
        data["__meta__"] = np2.frombuffer(json.dumps(meta).encode(), dtype=np2.uint8)
        with open(path, "wb") as fh:
            np2.savez(fh, **data)
        with pytest.raises(InvalidConfig):
            ParamModel.load(path)
