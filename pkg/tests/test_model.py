"""Model config, patching, forward contract, generation, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest

from bnhtr import tensor as T
from bnhtr.codec import Codec
from bnhtr.model import (
    CheckpointError,
    InferenceSession,
    ModelConfig,
    causal_mask,
    count_params,
    expected_shapes,
    extract_patches,
    forward,
    init_params,
    load_checkpoint,
    loss,
    patch_embed,
    save_checkpoint,
)
from bnhtr.tokenizers import BOS_ID, EOS_ID, PAD_ID, build_vocab


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=12,
        image_height=8,
        image_width=16,
        patch_height=4,
        patch_width=8,
        d_model=16,
        n_layers=2,
        n_heads=2,
        max_seq=16,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    config = tiny_config()
    return config, init_params(config, seed=0)


class TestModelConfig:
    def test_paper_scale_image_token_count(self):
        config = ModelConfig(
            vocab_size=1000, image_height=32, image_width=128,
            patch_height=4, patch_width=8,
        )
        assert config.n_img == 128
        assert config.patch_dim == 96
        assert config.d_ff == 4 * config.d_model
        assert config.d_head == config.d_model // config.n_heads

    def test_text_budget(self):
        config = tiny_config(max_seq=16)
        assert config.n_img == 4
        assert config.text_budget == 16 - 4 - 1

    @pytest.mark.parametrize(
        "overrides",
        [
            {"vocab_size": 4},
            {"image_height": 5},
            {"image_width": 9},
            {"d_model": 15},
            {"dropout": 1.0},
            {"dropout": -0.1},
            {"max_seq": 5},  # 4 image slots + BOS leaves nothing
            {"n_layers": 0},
        ],
    )
    def test_invalid_configs_rejected(self, overrides):
        with pytest.raises(ValueError):
            tiny_config(**overrides)

    def test_dict_roundtrip(self):
        config = tiny_config()
        assert ModelConfig.from_dict(config.to_dict()) == config


class TestParams:
    def test_count_params_matches_shapes(self):
        for config in (tiny_config(), tiny_config(d_model=32, n_layers=3)):
            total = sum(
                int(np.prod(s)) for s in expected_shapes(config).values()
            )
            assert count_params(config) == total

    def test_count_params_monotonic_in_vocab(self):
        small = tiny_config(vocab_size=12)
        large = tiny_config(vocab_size=24)
        # vocab rows appear twice: embedding plus untied head
        assert count_params(large) - count_params(small) == 12 * 16 * 2

    def test_init_layout(self, tiny):
        config, params = tiny
        assert set(params) == set(expected_shapes(config))
        for name, tensor in params.items():
            assert tensor.shape == expected_shapes(config)[name]
            assert tensor.requires_grad
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                assert np.all(tensor.data == 1.0)
            elif leaf in ("beta", "bias"):
                assert np.all(tensor.data == 0.0)
            else:
                assert tensor.data.std() == pytest.approx(0.02, rel=0.5)

    def test_init_seeded(self):
        config = tiny_config()
        a = init_params(config, seed=1)
        b = init_params(config, seed=1)
        c = init_params(config, seed=2)
        assert np.array_equal(a["lm_head.weight"].data, b["lm_head.weight"].data)
        assert not np.array_equal(a["lm_head.weight"].data, c["lm_head.weight"].data)


class TestPatches:
    def test_row_major_channel_major_order(self):
        config = tiny_config()  # 8x16 image, 4x8 patches -> 2x2 grid
        images = np.arange(3 * 8 * 16, dtype=np.float64).reshape(1, 3, 8, 16)
        patches = extract_patches(images, config)
        assert patches.shape == (1, 4, 96)
        gw = 16 // 8
        for gi in range(2):
            for gj in range(2):
                expected = [
                    images[0, c, gi * 4 + pr, gj * 8 + pc]
                    for c in range(3)
                    for pr in range(4)
                    for pc in range(8)
                ]
                assert patches[0, gi * gw + gj].tolist() == expected

    def test_single_image_promoted_to_batch(self):
        config = tiny_config()
        one = extract_patches(np.zeros((3, 8, 16)), config)
        assert one.shape == (1, 4, 96)

    def test_wrong_shape_rejected(self):
        config = tiny_config()
        with pytest.raises(ValueError):
            extract_patches(np.zeros((1, 1, 8, 16)), config)
        with pytest.raises(ValueError):
            extract_patches(np.zeros((1, 3, 8, 8)), config)

    def test_patch_embed_zero_projection_leaves_positions(self, tiny):
        config, params = tiny
        params["patch_proj.weight"].data[:] = 0.0
        out = patch_embed(np.ones((2, 3, 8, 16)), params, config)
        expected = params["pos_emb.weight"].data[: config.n_img]
        np.testing.assert_array_equal(out.data[0], expected)
        np.testing.assert_array_equal(out.data[1], expected)


def test_causal_mask_layout():
    mask = causal_mask(4, np.float32)
    assert mask.shape == (1, 1, 4, 4)
    grid = mask[0, 0]
    assert np.all(grid[np.triu_indices(4, k=1)] == -1e9)
    assert np.all(grid[np.tril_indices(4)] == 0.0)


class TestForward:
    def test_logit_shape(self, tiny):
        config, params = tiny
        images = np.zeros((2, 3, 8, 16))
        tokens = np.array([[4, 5, 6], [7, 8, 9]])
        out = forward(images, tokens, params, config)
        assert out.shape == (2, 3 + 1, config.vocab_size)

    def test_sequence_budget_enforced(self, tiny):
        config, params = tiny
        images = np.zeros((1, 3, 8, 16))
        tokens = np.arange(config.text_budget + 1)[None] % config.vocab_size
        with pytest.raises(ValueError, match="max_seq"):
            forward(images, tokens, params, config)

    def test_batch_mismatch_rejected(self, tiny):
        config, params = tiny
        with pytest.raises(ValueError, match="batch"):
            forward(np.zeros((2, 3, 8, 16)), np.array([[4, 5]]), params, config)

    def test_future_tokens_cannot_influence_past_logits(self, tiny):
        config, params = tiny
        rng = np.random.default_rng(0)
        images = rng.random((1, 3, 8, 16))
        tokens = np.array([[4, 5, 6, 7]])
        base = forward(images, tokens, params, config).data
        for k in range(4):
            changed = tokens.copy()
            changed[0, k] = 11
            out = forward(images, changed, params, config).data
            np.testing.assert_array_equal(out[:, : k + 1], base[:, : k + 1])
            assert not np.allclose(out[:, k + 1 :], base[:, k + 1 :])

    def test_image_reaches_every_logit(self, tiny):
        config, params = tiny
        tokens = np.array([[4, 5]])
        a = forward(np.zeros((1, 3, 8, 16)), tokens, params, config).data
        b = forward(np.ones((1, 3, 8, 16)), tokens, params, config).data
        assert not np.allclose(a[:, 0], b[:, 0])
        assert not np.allclose(a[:, -1], b[:, -1])

    def test_fresh_model_is_near_uniform(self):
        config = tiny_config(vocab_size=100, d_model=64, n_heads=4)
        params = init_params(config, seed=0)
        images = np.random.default_rng(0).random((4, 3, 8, 16))
        logits = forward(images, np.array([[4, 5]] * 4), params, config).data
        probs = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        assert probs.max() < 5.0 / config.vocab_size
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)

    def test_dropout_only_with_rng(self, tiny):
        config, params = tiny
        config = tiny_config(dropout=0.5)
        images = np.random.default_rng(0).random((1, 3, 8, 16))
        tokens = np.array([[4, 5]])
        det1 = forward(images, tokens, params, config).data
        det2 = forward(images, tokens, params, config).data
        np.testing.assert_array_equal(det1, det2)
        drop = forward(
            images, tokens, params, config, rng=np.random.default_rng(1)
        ).data
        assert not np.allclose(det1, drop)


class TestLoss:
    def test_pad_positions_ignored(self, tiny):
        config, params = tiny
        images = np.random.default_rng(0).random((2, 3, 8, 16))
        padded = np.array([[4, 5, EOS_ID, PAD_ID], [6, EOS_ID, PAD_ID, PAD_ID]])
        value = loss(images, padded, params, config)
        assert value.data.shape == ()
        # extending the pad tail must not change the mean loss
        wider = np.concatenate([padded, np.full((2, 2), PAD_ID)], axis=1)
        again = loss(images, wider, params, config)
        np.testing.assert_allclose(value.data, again.data, rtol=1e-6)

    def test_empty_labels_rejected(self, tiny):
        config, params = tiny
        with pytest.raises(ValueError):
            loss(np.zeros((1, 3, 8, 16)), np.zeros((1, 0), dtype=int), params, config)

    def test_loss_is_differentiable(self, tiny):
        config, params = tiny
        images = np.random.default_rng(0).random((1, 3, 8, 16))
        labels = np.array([[4, EOS_ID]])
        with T.Tape() as tape:
            value = loss(images, labels, params, config)
            tape.backward(value)
        grads = [p.grad for p in params.values() if p.grad is not None]
        assert len(grads) == len(params)
        assert all(np.isfinite(g).all() for g in grads)


class TestInferenceSession:
    def test_matches_taped_forward(self, tiny):
        config, params = tiny
        rng = np.random.default_rng(3)
        images = rng.random((2, 3, 8, 16))
        tokens = np.array([[4, 5, 6], [7, 8, 9]])
        taped = forward(images, tokens, params, config).data
        cached = InferenceSession(params, config).logits_for(images, tokens)
        np.testing.assert_allclose(cached, taped, rtol=2e-4, atol=2e-5)

    def test_matches_taped_forward_float64(self):
        previous = T.default_dtype()
        T.set_default_dtype("float64")
        try:
            config = tiny_config()
            params = init_params(config, seed=0)
            images = np.random.default_rng(3).random((1, 3, 8, 16))
            tokens = np.array([[4, 5]])
            taped = forward(images, tokens, params, config).data
            cached = InferenceSession(params, config).logits_for(images, tokens)
            np.testing.assert_allclose(cached, taped, rtol=1e-10)
        finally:
            T.set_default_dtype("float32" if previous == np.float32 else "float64")

    def test_generate_deterministic(self, tiny):
        config, params = tiny
        images = np.random.default_rng(4).random((3, 3, 8, 16))
        session = InferenceSession(params, config)
        a = session.generate(images)
        b = session.generate(images)
        assert [s.ids for s in a] == [s.ids for s in b]

    def test_generate_first_step_matches_full_forward(self, tiny):
        config, params = tiny
        images = np.random.default_rng(5).random((2, 3, 8, 16))
        session = InferenceSession(params, config)
        empty = np.zeros((2, 0), dtype=np.int64)
        first_logits = session.logits_for(images, empty)[:, -1]
        expected_first = np.argmax(first_logits, axis=-1)
        generated = session.generate(images, max_new=1)
        for row, seq in enumerate(generated):
            assert seq.ids[1] == expected_first[row]

    def test_generate_max_new_zero(self, tiny):
        config, params = tiny
        session = InferenceSession(params, config)
        (seq,) = session.generate(np.zeros((1, 3, 8, 16)), max_new=0)
        assert seq.ids == [BOS_ID, EOS_ID]
        assert seq.truncated

    @staticmethod
    def rig_constant_output(params, token_id):
        """Force every decode step to emit ``token_id``: zero the final norm
        gain so the head sees a constant vector, then point the head at it."""
        params["ln_f.gamma"].data[:] = 0.0
        params["ln_f.beta"].data[:] = 1.0
        params["lm_head.weight"].data[:] = 0.0
        params["lm_head.weight"].data[:, token_id] = 1.0

    def test_generate_immediate_eos(self, tiny):
        config, params = tiny
        self.rig_constant_output(params, EOS_ID)
        session = InferenceSession(params, config)
        (seq,) = session.generate(np.ones((1, 3, 8, 16)))
        assert seq.ids == [BOS_ID, EOS_ID]
        assert not seq.truncated

    def test_generate_budget_exhaustion_marks_truncated(self, tiny):
        config, params = tiny
        self.rig_constant_output(params, PAD_ID)  # EOS never appears
        session = InferenceSession(params, config)
        (seq,) = session.generate(np.ones((1, 3, 8, 16)))
        assert seq.truncated
        assert seq.ids[0] == BOS_ID and seq.ids[-1] == EOS_ID
        assert len(seq.ids) == 1 + config.text_budget + 1

    def test_generate_respects_max_new(self, tiny):
        config, params = tiny
        self.rig_constant_output(params, 5)  # never EOS
        session = InferenceSession(params, config)
        (seq,) = session.generate(np.ones((1, 3, 8, 16)), max_new=3)
        assert seq.ids == [BOS_ID, 5, 5, 5, EOS_ID]
        assert seq.truncated

    def test_argmax_tie_picks_lowest_id(self, tiny):
        config, params = tiny
        params["lm_head.weight"].data[:] = 0.0  # all logits equal
        session = InferenceSession(params, config)
        (seq,) = session.generate(np.ones((1, 3, 8, 16)), max_new=1)
        assert seq.ids[1] == PAD_ID  # id 0 wins the tie


class TestCheckpoint:
    def make(self, tmp_path, **save_kwargs):
        vocab = build_vocab(["কখগঘঙচছজ"])
        config = tiny_config(vocab_size=len(vocab))
        params = init_params(config, seed=0)
        codec = Codec("grapheme", vocab)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, config, params, codec, **save_kwargs)
        return path, config, params, codec

    def test_roundtrip(self, tmp_path):
        path, config, params, codec = self.make(
            tmp_path, trainer_state={"stage": "pretrain", "epochs_done": 2}
        )
        ckpt = load_checkpoint(path)
        assert ckpt.config == config
        assert ckpt.trainer_state == {"stage": "pretrain", "epochs_done": 2}
        assert ckpt.codec.kind == "grapheme"
        assert len(ckpt.codec) == len(codec)
        for name, tensor in params.items():
            np.testing.assert_array_equal(ckpt.params[name].data, tensor.data)
            assert ckpt.params[name].data.dtype == tensor.data.dtype

    def test_save_is_byte_deterministic(self, tmp_path):
        path_a, config, params, codec = self.make(tmp_path)
        path_b = tmp_path / "again.ckpt"
        save_checkpoint(path_b, config, params, codec)
        assert path_a.read_bytes() == path_b.read_bytes()
        # load -> save must also reproduce the file exactly
        ckpt = load_checkpoint(path_a)
        path_c = tmp_path / "resaved.ckpt"
        save_checkpoint(path_c, ckpt.config, ckpt.params, ckpt.codec)
        assert path_c.read_bytes() == path_a.read_bytes()

    def test_optim_tensors_roundtrip(self, tmp_path):
        extra = {
            "optim.m.lm_head.weight": np.full((2, 2), 0.5, dtype=np.float32),
        }
        path, *_ = self.make(tmp_path, optim_tensors=extra)
        ckpt = load_checkpoint(path)
        np.testing.assert_array_equal(
            ckpt.optim_tensors["optim.m.lm_head.weight"], extra["optim.m.lm_head.weight"]
        )

    def test_aux_tensors_require_prefix(self, tmp_path):
        vocab = build_vocab(["কখগঘঙচছজ"])
        config = tiny_config(vocab_size=len(vocab))
        with pytest.raises(ValueError, match="optim."):
            save_checkpoint(
                tmp_path / "x.ckpt", config, init_params(config),
                Codec("grapheme", vocab), optim_tensors={"stray": np.zeros(2)},
            )

    def test_missing_tensor_detected(self, tmp_path):
        vocab = build_vocab(["কখগঘঙচছজ"])
        config = tiny_config(vocab_size=len(vocab))
        params = init_params(config)
        del params["ln_f.gamma"]
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, config, params, Codec("grapheme", vocab))
        with pytest.raises(CheckpointError, match="missing tensor 'ln_f.gamma'"):
            load_checkpoint(path)

    def test_shape_mismatch_detected(self, tmp_path):
        vocab = build_vocab(["কখগঘঙচছজ"])
        config = tiny_config(vocab_size=len(vocab))
        params = init_params(config)
        params["ln_f.gamma"] = T.Tensor(np.ones(4), requires_grad=True)
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, config, params, Codec("grapheme", vocab))
        with pytest.raises(CheckpointError, match="ln_f.gamma"):
            load_checkpoint(path)

    def test_unexpected_tensor_detected(self, tmp_path):
        vocab = build_vocab(["কখগঘঙচছজ"])
        config = tiny_config(vocab_size=len(vocab))
        params = init_params(config)
        params["rogue.weight"] = T.Tensor(np.ones(2), requires_grad=True)
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, config, params, Codec("grapheme", vocab))
        with pytest.raises(CheckpointError, match="unexpected tensor 'rogue.weight'"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"\x89PNG\r\n" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        path.write_text('{"format": "other"}\n')
        with pytest.raises(CheckpointError, match="not a"):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "v9"
        path.write_text('{"format": "bnhtr-checkpoint", "version": 9}\n')
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path, *_ = self.make(tmp_path)
        data = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(data[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_trailing_bytes(self, tmp_path):
        path, *_ = self.make(tmp_path)
        (tmp_path / "fat.ckpt").write_bytes(path.read_bytes() + b"x")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "fat.ckpt")

    def test_unsupported_dtype_tag(self, tmp_path):
        vocab = build_vocab(["কখগঘঙচছজ"])
        config = tiny_config(vocab_size=len(vocab))
        path = tmp_path / "int.ckpt"
        save_checkpoint(
            path, config, init_params(config), Codec("grapheme", vocab),
            optim_tensors={"optim.step": np.array([3], dtype=np.int64)},
        )
        with pytest.raises(CheckpointError, match="dtype"):
            load_checkpoint(path)

    def test_vocab_size_mismatch(self, tmp_path):
        vocab = build_vocab(["কখগঘঙচছজ"])
        config = tiny_config(vocab_size=len(vocab) + 1)
        params = init_params(config)
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, config, params, Codec("grapheme", vocab))
        with pytest.raises(CheckpointError, match="tokenizer has"):
            load_checkpoint(path)

    def test_loaded_model_predicts_identically(self, tmp_path):
        path, config, params, codec = self.make(tmp_path)
        images = np.random.default_rng(0).random((2, 3, 8, 16))
        before = InferenceSession(params, config).generate(images)
        ckpt = load_checkpoint(path)
        after = InferenceSession(ckpt.params, ckpt.config).generate(images)
        assert [s.ids for s in before] == [s.ids for s in after]
