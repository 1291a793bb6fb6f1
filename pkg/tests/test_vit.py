"""Backbone contracts: patchify layout, attention capture, gradients."""

import numpy as np
import pytest

from helpers import gradcheck
from lodisc.rng import stream
from lodisc.tensor import DimensionError, Tensor
from lodisc.vit import AttentionStack, ViTBackbone, ViTConfig, patchify

TOY = ViTConfig(image_size=16, patch_size=8, channels=3, embed_dim=16, layers=2, heads=2)


class TestPatchify:
    def test_patch_count(self):
        cfg = ViTConfig(image_size=32, patch_size=8, channels=1, embed_dim=8, layers=1, heads=1)
        img = Tensor(np.zeros((1, 32, 32), dtype=np.float32))
        assert patchify(img, cfg).shape == (16, 64)

    def test_constant_image_gives_constant_rows(self):
        cfg = ViTConfig(image_size=16, patch_size=4, channels=2, embed_dim=8, layers=1, heads=1)
        img = Tensor(np.full((2, 16, 16), 3.25, dtype=np.float32))
        out = patchify(img, cfg).data
        np.testing.assert_array_equal(out, np.full((16, 32), 3.25, dtype=np.float32))

    def test_raster_order_hand_example(self):
        cfg = ViTConfig(image_size=4, patch_size=2, channels=1, embed_dim=4, layers=1, heads=1)
        img = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
        out = patchify(img, cfg).data
        np.testing.assert_array_equal(out[0], [0.0, 1.0, 4.0, 5.0])
        np.testing.assert_array_equal(out[1], [2.0, 3.0, 6.0, 7.0])
        np.testing.assert_array_equal(out[2], [8.0, 9.0, 12.0, 13.0])

    def test_size_mismatch_rejected(self):
        cfg = ViTConfig(image_size=16, patch_size=8, channels=3, embed_dim=8, layers=1, heads=1)
        with pytest.raises(DimensionError):
            patchify(Tensor(np.zeros((3, 8, 8), dtype=np.float32)), cfg)

    def test_gradient_flows_through_layout(self):
        cfg = ViTConfig(image_size=4, patch_size=2, channels=1, embed_dim=4, layers=1, heads=1)
        img = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4), requires_grad=True)
        w = np.arange(16, dtype=np.float32).reshape(4, 4)
        assert gradcheck(lambda: (patchify(img, cfg) * w).sum(), [img]) <= 1e-3


class TestForwardWithAttention:
    def test_single_head_attention_matches_oracle(self):
        cfg = ViTConfig(image_size=8, patch_size=4, channels=1, embed_dim=6, layers=1, heads=1)
        backbone = ViTBackbone(cfg, stream(3, "init"))
        views = np.random.default_rng(3).normal(size=(1, 1, 8, 8)).astype(np.float32)
        _, stack = backbone.forward(Tensor(views), capture_attention=True)

        # independent 64-bit recomputation of softmax(Q K^T / sqrt(d))
        x = views.reshape(1, 1, 2, 4, 2, 4).transpose(0, 2, 4, 1, 3, 5).reshape(1, 4, 16)
        x = x.astype(np.float64)
        w, b = backbone.patch.w.data.astype(np.float64), backbone.patch.b.data.astype(np.float64)
        tokens = x @ w + b
        cls = backbone.cls.data.astype(np.float64)[0]
        tokens = np.concatenate([np.repeat(cls, 1, axis=0)[None], tokens], axis=1)
        tokens = tokens + backbone.pos.data.astype(np.float64)
        blk = backbone.blocks[0]
        g, be = blk.ln1.gamma.data.astype(np.float64), blk.ln1.beta.data.astype(np.float64)
        mu = tokens.mean(-1, keepdims=True)
        var = ((tokens - mu) ** 2).mean(-1, keepdims=True)
        h = (tokens - mu) / np.sqrt(var + 1e-5) * g + be
        qkv = h @ blk.qkv.w.data.astype(np.float64) + blk.qkv.b.data.astype(np.float64)
        q, k = qkv[0, :, :6], qkv[0, :, 6:12]
        scores = q @ k.T / np.sqrt(6.0)
        e = np.exp(scores - scores.max(-1, keepdims=True))
        want = e / e.sum(-1, keepdims=True)
        np.testing.assert_allclose(stack.layers[0][0, 0], want, atol=1e-5)

    def test_attention_rows_sum_to_one(self):
        backbone = ViTBackbone(TOY, stream(0, "init"))
        views = np.random.default_rng(0).normal(size=(3, 3, 16, 16)).astype(np.float32)
        _, stack = backbone.forward(Tensor(views), capture_attention=True)
        assert stack.num_layers == TOY.layers
        for layer in stack.layers:
            assert (layer >= 0).all()
            np.testing.assert_allclose(layer.sum(axis=-1), 1.0, atol=1e-5)

    def test_duplicated_batch_rows_match(self):
        backbone = ViTBackbone(TOY, stream(1, "init"))
        one = np.random.default_rng(1).normal(size=(1, 3, 16, 16)).astype(np.float32)
        two = np.concatenate([one, one])
        emb, stack = backbone.forward(Tensor(two), capture_attention=True)
        np.testing.assert_array_equal(emb.data[0], emb.data[1])
        for layer in stack.layers:
            np.testing.assert_array_equal(layer[0], layer[1])

    def test_capture_is_non_invasive(self):
        backbone = ViTBackbone(TOY, stream(2, "init"))
        views = np.random.default_rng(2).normal(size=(2, 3, 16, 16)).astype(np.float32)
        with_capture, _ = backbone.forward(Tensor(views), capture_attention=True)
        without, none_stack = backbone.forward(Tensor(views), capture_attention=False)
        assert none_stack is None
        np.testing.assert_array_equal(with_capture.data, without.data)

    def test_batch_permutation_permutes_outputs(self):
        backbone = ViTBackbone(TOY, stream(4, "init"))
        views = np.random.default_rng(4).normal(size=(4, 3, 16, 16)).astype(np.float32)
        perm = np.array([2, 0, 3, 1])
        emb = backbone(Tensor(views)).data
        emb_perm = backbone(Tensor(views[perm])).data
        np.testing.assert_array_equal(emb_perm, emb[perm])


class TestAttentionStackDerived:
    def test_head_mean_and_class_rows(self):
        # two heads, three tokens, hand-built rows
        w = np.zeros((1, 2, 3, 3), dtype=np.float32)
        w[0, 0] = [[0.2, 0.3, 0.5]] * 3
        w[0, 1] = [[0.4, 0.4, 0.2]] * 3
        stack = AttentionStack(layers=[w])
        np.testing.assert_allclose(stack.head_mean(0)[0, 0], [0.3, 0.35, 0.35], atol=1e-7)
        np.testing.assert_allclose(stack.class_to_patch(0)[0], [0.35, 0.35], atol=1e-7)

    def test_single_head_mean_is_identity(self):
        w = np.random.default_rng(0).dirichlet(np.ones(4), size=(2, 1, 4)).astype(np.float32)
        stack = AttentionStack(layers=[w])
        np.testing.assert_array_equal(stack.head_mean(0), w[:, 0])


@pytest.mark.parametrize("seed", range(3))
def test_full_backbone_gradient_check(seed):
    backbone = ViTBackbone(TOY, stream(seed, "init"))
    views = np.random.default_rng(seed).normal(size=(1, 3, 16, 16)).astype(np.float32)
    weights = np.random.default_rng(seed + 100).normal(size=(1, TOY.embed_dim)).astype(np.float32)
    params = backbone.params()

    def f():
        return (backbone(Tensor(views)) * weights).sum()

    assert gradcheck(f, params) <= 1e-3
