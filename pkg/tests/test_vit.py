import numpy as np
import pytest

from mimlab import tensor as T
from mimlab.masking import sample_masks
from mimlab.storage import Checkpoint, load_checkpoint, save_checkpoint
from mimlab.tensor import Tensor
from mimlab.vit import (MaskHandling, ViTConfig, decoder_forward, encoder_forward, init_params, patchify,
                        unpatchify)


class TestPatchify:
    def test_single_patch(self):
        assert patchify(np.zeros((1, 1, 4, 4)), 4).shape == (1, 1, 16)

    def test_default_grid(self):
        assert patchify(np.zeros((2, 3, 32, 32)), 4).shape == (2, 64, 48)

    def test_round_trip(self, rng):
        cfg = ViTConfig()
        x = rng.random((2, 3, 32, 32))
        np.testing.assert_array_equal(unpatchify(patchify(x, 4), cfg), x)

    def test_patch_content(self):
        x = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
        p = patchify(x, 2)
        # patch (row 0, col 1): channel 0 then channel 1, each row-major 2x2
        expected = np.concatenate([x[0, 0, 0:2, 2:4].ravel(), x[0, 1, 0:2, 2:4].ravel()])
        np.testing.assert_array_equal(p[0, 1], expected)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((1, 3, 10, 10)), 4)

    def test_unpatchify_shape_mismatch(self):
        with pytest.raises(ValueError):
            unpatchify(np.zeros((1, 63, 48)), ViTConfig())


class TestEncoder:
    def test_modes_agree_at_ratio_zero(self, rng, tiny_config):
        params = init_params(ViTConfig(**{**tiny_config.to_dict(), "mask_handling": "mask_token"}), rng)
        patches = rng.random((3, tiny_config.num_patches, tiny_config.patch_dim))
        bits = np.ones((3, tiny_config.num_patches), dtype=bool)
        a = encoder_forward(params, patches, bits, MaskHandling.DROP_TOKENS).tokens.data
        b = encoder_forward(params, patches, bits, MaskHandling.MASK_TOKEN).tokens.data
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_drop_tokens_count(self, rng):
        cfg = ViTConfig(depth=1)
        params = init_params(cfg, rng)
        patches = rng.random((2, 64, 48))
        bits = sample_masks(2, 64, 0.75, rng)
        assert encoder_forward(params, patches, bits).tokens.shape == (2, 17, 64)

    def test_batch_independence(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        patches = rng.random((4, tiny_config.num_patches, tiny_config.patch_dim))
        bits = sample_masks(4, tiny_config.num_patches, 0.5, rng)
        perm = np.array([2, 0, 3, 1])
        a = encoder_forward(params, patches, bits).tokens.data
        b = encoder_forward(params, patches[perm], bits[perm]).tokens.data
        np.testing.assert_allclose(b, a[perm], atol=1e-13)

    def test_mask_length_mismatch(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        patches = rng.random((1, tiny_config.num_patches, tiny_config.patch_dim))
        with pytest.raises(ValueError):
            encoder_forward(params, patches, np.ones((1, tiny_config.num_patches + 1), dtype=bool))

    def test_attention_rows_sum_to_one(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        patches = rng.random((2, tiny_config.num_patches, tiny_config.patch_dim))
        out = encoder_forward(params, patches, keep_attention=True)
        assert len(out.attention_probs) == tiny_config.depth
        for probs in out.attention_probs:
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_deterministic(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        patches = rng.random((2, tiny_config.num_patches, tiny_config.patch_dim))
        bits = sample_masks(2, tiny_config.num_patches, 0.5, rng)
        a = encoder_forward(params, patches, bits).tokens.data
        b = encoder_forward(params, patches, bits).tokens.data
        np.testing.assert_array_equal(a, b)

    def test_no_class_token(self, rng, tiny_config):
        cfg = ViTConfig(**{**tiny_config.to_dict(), "use_class_token": False})
        params = init_params(cfg, rng)
        assert "cls_token" not in params
        out = encoder_forward(params, rng.random((1, cfg.num_patches, cfg.patch_dim)))
        assert out.tokens.shape[1] == cfg.num_patches


class TestDecoder:
    def test_output_shape(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        patches = rng.random((3, tiny_config.num_patches, tiny_config.patch_dim))
        for ratio in (0.0, 0.25, 0.75):
            bits = sample_masks(3, tiny_config.num_patches, ratio, rng)
            pred = decoder_forward(params, encoder_forward(params, patches, bits), bits)
            assert pred.shape == patches.shape

    def test_zero_projection_gives_zero(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        params["decoder_pred.w"] = Tensor(np.zeros_like(params["decoder_pred.w"].data))
        params["decoder_pred.b"] = Tensor(np.zeros_like(params["decoder_pred.b"].data))
        patches = rng.random((2, tiny_config.num_patches, tiny_config.patch_dim))
        bits = sample_masks(2, tiny_config.num_patches, 0.5, rng)
        pred = decoder_forward(params, encoder_forward(params, patches, bits), bits)
        np.testing.assert_array_equal(pred.data, 0.0)

    def test_visible_inputs_receive_gradient(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        patches = Tensor(rng.random((1, tiny_config.num_patches, tiny_config.patch_dim)), requires_grad=True)
        bits = np.array([[True, False, True, False]])
        decoder_forward(params, encoder_forward(params, patches, bits), bits).mean().backward()
        g = np.abs(patches.grad[0]).sum(axis=-1)
        assert np.all(g[bits[0]] > 0)
        np.testing.assert_array_equal(g[~bits[0]], 0.0)

        def f(x):
            return decoder_forward(params, encoder_forward(params, x, bits), bits).mean()

        assert T.grad_check(f, [patches.data]) < 1e-6

    def test_token_count_mismatch(self, rng, tiny_config):
        params = init_params(tiny_config, rng)
        patches = rng.random((1, tiny_config.num_patches, tiny_config.patch_dim))
        bits = np.array([[True, False, True, False]])
        encoded = encoder_forward(params, patches, bits)
        with pytest.raises(ValueError):
            decoder_forward(params, encoded, np.array([[True, True, True, False]]))


class TestSerialization:
    def test_forward_preserved_bit_exactly(self, rng, tiny_config, tmp_path):
        params = init_params(tiny_config, rng)
        save_checkpoint(Checkpoint(tiny_config, params), tmp_path / "p.ckpt")
        loaded = load_checkpoint(tmp_path / "p.ckpt").params
        patches = rng.random((2, tiny_config.num_patches, tiny_config.patch_dim))
        bits = sample_masks(2, tiny_config.num_patches, 0.5, rng)
        a = decoder_forward(params, encoder_forward(params, patches, bits), bits).data
        b = decoder_forward(loaded, encoder_forward(loaded, patches, bits), bits).data
        np.testing.assert_array_equal(a, b)


class TestConfig:
    def test_defaults(self):
        cfg = ViTConfig()
        assert (cfg.num_patches, cfg.patch_dim, cfg.embed_dim, cfg.depth) == (64, 48, 64, 4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ViTConfig(image_size=30)
        with pytest.raises(ValueError):
            ViTConfig(embed_dim=10, num_heads=4)
