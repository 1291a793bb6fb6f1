"""Pivotal-region selection: fusion, top-K masks, baselines, pixel masks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lodisc.masking import (
    PatchMask,
    apply_mask,
    baseline_mask,
    expand_mask,
    extract_class_attention,
    fuse_all,
    fuse_attention,
    kept_count,
    select_pivotal,
)
from lodisc.rng import stream
from lodisc.tensor import ConfigError, ContractError
from lodisc.vit import AttentionStack, ViTConfig

CFG16 = ViTConfig(image_size=32, patch_size=8, channels=3, embed_dim=8, layers=1, heads=1)


def _uniform_stack(batch=2, heads=2, tokens=5, layers=3) -> AttentionStack:
    w = np.full((batch, heads, tokens, tokens), 1.0 / tokens, dtype=np.float32)
    return AttentionStack(layers=[w.copy() for _ in range(layers)])


class TestExtractClassAttention:
    def test_empty_stack_rejected(self):
        with pytest.raises(ContractError):
            extract_class_attention(AttentionStack(layers=[]))

    def test_single_head_average_is_identity(self):
        rng = np.random.default_rng(0)
        w = rng.dirichlet(np.ones(4), size=(2, 1, 4)).astype(np.float32)
        got = extract_class_attention(AttentionStack(layers=[w]))
        np.testing.assert_array_equal(got[0], w[:, 0, 0, 1:])

    def test_uniform_attention_gives_constant_vector(self):
        stack = _uniform_stack(batch=1, tokens=5, layers=2)
        got = extract_class_attention(stack)
        np.testing.assert_allclose(got, 1.0 / 5.0, atol=1e-7)
        assert got.shape == (2, 1, 4)

    def test_hand_two_head_average(self):
        w = np.zeros((1, 2, 3, 3), dtype=np.float32)
        w[0, 0] = [[0.2, 0.3, 0.5]] * 3
        w[0, 1] = [[0.4, 0.4, 0.2]] * 3
        got = extract_class_attention(AttentionStack(layers=[w]))
        np.testing.assert_allclose(got[0, 0], [0.35, 0.35], atol=1e-7)


class TestFuseAttention:
    def test_single_layer_preserves_ordering(self):
        v = np.array([0.1, 0.5, 0.2, 0.2])
        fused = fuse_attention([v])
        assert list(np.argsort(-fused.log_weights)) == list(np.argsort(-v))

    def test_all_ones_layer_is_identity_for_ordering(self):
        v = np.array([0.3, 0.1, 0.6])
        with_identity = fuse_attention([v, np.ones(3)])
        without = fuse_attention([v])
        np.testing.assert_array_equal(np.argsort(-with_identity.log_weights),
                                      np.argsort(-without.log_weights))

    def test_hand_products(self):
        a1 = np.array([0.2, 0.3, 0.5])
        a2 = np.array([0.1, 0.2, 0.7])
        fused = fuse_attention([a1, a2])
        # products are [0.02, 0.06, 0.35]: descending order 2, 1, 0
        assert list(np.argsort(-fused.log_weights)) == [2, 1, 0]
        np.testing.assert_allclose(np.exp(fused.log_weights), [0.02, 0.06, 0.35], rtol=1e-6)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            fuse_attention([np.ones(3), np.ones(4)])

    def test_negative_entries_rejected(self):
        with pytest.raises(ContractError):
            fuse_attention([np.array([0.5, -0.1])])

    def test_deep_stack_does_not_underflow(self):
        # direct product of 40 layers of ~1/65 weights underflows float32
        vectors = [np.full(64, 1.0 / 65.0) for _ in range(40)]
        fused = fuse_attention(vectors)
        assert np.isfinite(fused.log_weights).all()


class TestSelectPivotal:
    def test_ratio_zero_keeps_all(self):
        fused = fuse_attention([np.random.default_rng(0).uniform(size=16)])
        mask = select_pivotal(fused, 0.0)
        assert mask.kept == 16

    def test_hand_n4_half(self):
        fused = fuse_attention([np.array([0.4, 0.1, 0.3, 0.2])])
        mask = select_pivotal(fused, 0.5)
        assert set(mask.kept_indices()) == {0, 2}
        assert mask.threshold == pytest.approx(np.log(0.3 + 1e-12))

    def test_ratio_70_of_196_keeps_59(self):
        rng = np.random.default_rng(1)
        fused = fuse_attention([rng.uniform(size=196)])
        assert select_pivotal(fused, 0.7).kept == 59

    def test_invalid_ratio_rejected(self):
        fused = fuse_attention([np.ones(4)])
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ConfigError):
                select_pivotal(fused, bad)

    def test_ties_break_by_ascending_index(self):
        fused = fuse_attention([np.array([0.25, 0.25, 0.25, 0.25])])
        mask = select_pivotal(fused, 0.5)
        assert list(mask.kept_indices()) == [0, 1]

    @given(st.floats(0.0, 0.99), st.sampled_from([4, 16, 49, 196]), st.integers(0, 999))
    @settings(max_examples=100, deadline=None)
    def test_exact_cardinality(self, ratio, n, seed):
        weights = np.random.default_rng(seed).uniform(size=n)
        mask = select_pivotal(fuse_attention([weights]), ratio)
        assert mask.kept == kept_count(ratio, n)

    @given(st.integers(0, 999))
    @settings(max_examples=100, deadline=None)
    def test_threshold_rule_equivalence_for_distinct_weights(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 64))
        weights = rng.permutation(np.linspace(0.01, 0.99, n))  # all distinct
        ratio = float(rng.uniform(0.0, 0.95))
        fused = fuse_attention([weights])
        mask = select_pivotal(fused, ratio)
        by_threshold = fused.log_weights >= mask.threshold
        np.testing.assert_array_equal(mask.keep, by_threshold)

    @given(st.integers(0, 999), st.sampled_from([1e-3, 1.0, 1e3]))
    @settings(max_examples=100, deadline=None)
    def test_per_layer_rescaling_never_changes_kept_set(self, seed, scale):
        rng = np.random.default_rng(seed)
        n, layers = 16, 4
        vectors = [rng.uniform(0.01, 1.0, size=n) for _ in range(layers)]
        ratio = float(rng.uniform(0.0, 0.9))
        base = select_pivotal(fuse_attention(vectors), ratio)
        which = int(rng.integers(0, layers))
        scaled = [v * scale if i == which else v for i, v in enumerate(vectors)]
        rescaled = select_pivotal(fuse_attention(scaled), ratio)
        np.testing.assert_array_equal(base.keep, rescaled.keep)

    @given(st.integers(0, 499))
    @settings(max_examples=60, deadline=None)
    def test_log_domain_matches_direct_product_ordering(self, seed):
        rng = np.random.default_rng(seed)
        vectors = rng.uniform(0.05, 1.0, size=(3, 12))
        direct = np.prod(vectors, axis=0)  # representable in float64
        fused = fuse_attention(vectors)
        np.testing.assert_array_equal(np.argsort(-fused.log_weights, kind="stable"),
                                      np.argsort(-direct, kind="stable"))


class TestKeptCount:
    @pytest.mark.parametrize("ratio,n,want", [
        (0.3, 4, 3), (0.6, 4, 2), (0.7, 4, 1), (0.8, 4, 1),
        (0.3, 16, 11), (0.6, 16, 6), (0.7, 16, 5), (0.8, 16, 3),
        (0.3, 196, 137), (0.6, 196, 78), (0.7, 196, 59), (0.8, 196, 39),
    ])
    def test_table(self, ratio, n, want):
        assert kept_count(ratio, n) == want

    def test_floor_of_one(self):
        assert kept_count(0.99, 4) == 1


class TestExpandAndApply:
    def test_all_keep_is_identity(self):
        view = np.random.default_rng(0).normal(size=(3, 32, 32)).astype(np.float32)
        mask = PatchMask(keep=np.ones(16, dtype=bool), ratio=0.0)
        np.testing.assert_array_equal(apply_mask(mask, view, CFG16), view)

    def test_single_keep_leaves_one_block(self):
        view = np.ones((3, 32, 32), dtype=np.float32)
        keep = np.zeros(16, dtype=bool)
        keep[5] = True
        mask = PatchMask(keep=keep, ratio=15 / 16)
        out = apply_mask(mask, view, CFG16)
        assert int((out != 0).sum()) == 8 * 8 * 3

    def test_hand_checkerboard(self):
        cfg = ViTConfig(image_size=4, patch_size=2, channels=1, embed_dim=4, layers=1, heads=1)
        view = np.full((1, 4, 4), 5.0, dtype=np.float32)
        mask = PatchMask(keep=np.array([True, False, False, True]), ratio=0.5)
        out = apply_mask(mask, view, cfg)
        want = np.array([[5, 5, 0, 0], [5, 5, 0, 0], [0, 0, 5, 5], [0, 0, 5, 5]],
                        dtype=np.float32)[None]
        np.testing.assert_array_equal(out, want)

    def test_non_square_patch_count_rejected(self):
        mask = PatchMask(keep=np.ones(6, dtype=bool), ratio=0.0)
        with pytest.raises(ConfigError):
            mask.grid

    @given(st.floats(0.0, 0.95), st.integers(0, 99))
    @settings(max_examples=60, deadline=None)
    def test_pixel_mask_consistency(self, ratio, seed):
        weights = np.random.default_rng(seed).uniform(size=16)
        mask = select_pivotal(fuse_attention([weights]), ratio)
        pixel = expand_mask(mask, CFG16)
        assert float(pixel.values.mean()) == mask.kept / 16
        blocks = pixel.values.reshape(4, 8, 4, 8).transpose(0, 2, 1, 3)
        for i in range(4):
            for j in range(4):
                block = blocks[i, j]
                assert block.min() == block.max()

    @given(st.integers(0, 99))
    @settings(max_examples=30, deadline=None)
    def test_kept_pixels_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        view = rng.normal(size=(3, 32, 32)).astype(np.float32)
        mask = select_pivotal(fuse_attention([rng.uniform(size=16)]), 0.7)
        out = apply_mask(mask, view, CFG16)
        kept = expand_mask(mask, CFG16).values.astype(bool)
        np.testing.assert_array_equal(out[:, kept], view[:, kept])
        assert (out[:, ~kept] == 0).all()


class TestBaselineMasks:
    def test_grid_on_16_keeps_four_top_left_anchored(self):
        mask = baseline_mask("grid", CFG16, 0.75, stream(0, "mask"))
        assert set(mask.kept_indices()) == {0, 2, 8, 10}
        assert mask.ratio == 0.75

    def test_border_keeps_central_block(self):
        mask = baseline_mask("border", CFG16, 0.75, stream(0, "mask"))
        assert set(mask.kept_indices()) == {5, 6, 9, 10}

    def test_border_clips_to_exact_count(self):
        # K = 5: ceil(sqrt(5)) = 3 side, 9 - 4 removed from the ring in raster order
        cfg = ViTConfig(image_size=40, patch_size=8, channels=3, embed_dim=8, layers=1, heads=1)
        mask = baseline_mask("border", cfg, 0.8, stream(0, "mask"))
        assert mask.kept == kept_count(0.8, 25)

    def test_random_is_deterministic_per_seed(self):
        a = baseline_mask("random", CFG16, 0.7, stream(42, "mask"))
        b = baseline_mask("random", CFG16, 0.7, stream(42, "mask"))
        np.testing.assert_array_equal(a.keep, b.keep)
        assert a.kept == kept_count(0.7, 16)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            baseline_mask("diagonal", CFG16, 0.7, stream(0, "mask"))

    @given(st.sampled_from(["random", "border"]), st.floats(0.0, 0.95), st.integers(0, 99))
    @settings(max_examples=60, deadline=None)
    def test_baseline_cardinality(self, kind, ratio, seed):
        mask = baseline_mask(kind, CFG16, ratio, stream(seed, "mask"))
        assert mask.kept == kept_count(ratio, 16)


def test_fuse_all_matches_per_view_fusion():
    rng = np.random.default_rng(3)
    layers = [rng.dirichlet(np.ones(5), size=(2, 2, 5)).astype(np.float32) for _ in range(3)]
    stack = AttentionStack(layers=layers)
    fused = fuse_all(stack)
    assert [f.view_index for f in fused] == [0, 1]
    per_layer = extract_class_attention(stack)
    for b in range(2):
        manual = fuse_attention(per_layer[:, b, :], view_index=b)
        np.testing.assert_allclose(fused[b].log_weights, manual.log_weights, rtol=1e-12)
