import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustvision.nnkit import layers
from trustvision.nnkit.augment import (
    FINETUNE_DEFAULT,
    NO_AUGMENT,
    SUPERVISED_PRETRAIN_DEFAULT,
    AugmentPolicy,
    augment_batch,
    cutmix_box,
)
from trustvision.nnkit.gradcheck import STENCILS, check_gradients, perturbed_checkpoint, relative_errors
from trustvision.nnkit.optim import OptimHyper, OptimState, adamw_update, cosine_lr, layer_id, lr_scale
from trustvision.nnkit.vit import (
    ArchConfig,
    ModelCheckpoint,
    ShapeMismatch,
    StaleCache,
    backprop,
    classify_loss,
    embed,
    forward_vit,
    init_checkpoint,
    mae_forward_loss,
    patchify,
    predict_proba,
    random_mask,
    unpatchify,
    with_new_head,
)

TINY = ArchConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2, decoder_dim=4,
                  decoder_depth=1, drop_path=0.0)


def _batch(n=3, arch=TINY, seed=0):
    return np.random.default_rng(seed).random((n, arch.image_size, arch.image_size, arch.in_chans))


class TestLayers:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
    def test_softmax_sums_to_one(self, xs):
        p = layers.softmax_stable(np.array(xs))
        assert p.sum() == pytest.approx(1.0)
        assert np.all(p >= 0)

    def test_softmax_extreme_logits_finite(self):
        p = layers.softmax_stable(np.array([1e308, -1e308, 0.0]))
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_softmax_empty_rejected(self):
        with pytest.raises(layers.EmptyInput):
            layers.softmax_stable(np.zeros(0))

    def test_layernorm_normalises(self):
        x = np.random.default_rng(0).normal(3, 5, size=(4, 16))
        y, _ = layers.layernorm_fwd(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(y.std(-1), 1, atol=1e-4)


class TestArchAndCheckpoint:
    def test_invalid_patch(self):
        with pytest.raises(ValueError):
            ArchConfig(image_size=30, patch_size=4)

    def test_invalid_mask_ratio(self):
        with pytest.raises(ValueError):
            ArchConfig(mask_ratio=1.0)

    def test_patchify_round_trip(self):
        x = _batch(2, ArchConfig())
        np.testing.assert_array_equal(unpatchify(patchify(x, 4), 4, 1), x)

    def test_mask_counts(self):
        ids_keep, mask = random_mask(ArchConfig(), 5, seed=1)
        assert mask.sum(axis=1).tolist() == [48] * 5
        assert ids_keep.shape == (5, 16)

    def test_save_load_identical(self, tmp_path):
        ck = init_checkpoint(TINY, 3)
        ck.save(tmp_path / "m.tvm")
        back = ModelCheckpoint.load(tmp_path / "m.tvm")
        assert back.digest() == ck.digest()

    def test_same_seed_same_weights(self):
        assert init_checkpoint(TINY, 4).digest() == init_checkpoint(TINY, 4).digest()
        assert init_checkpoint(TINY, 4).digest() != init_checkpoint(TINY, 5).digest()

    def test_params_are_read_only(self):
        ck = init_checkpoint(TINY, 0)
        with pytest.raises(ValueError):
            ck.params["head.w" if ck.has_head else "cls_token"][...] = 1.0

    def test_unknown_stage(self):
        ck = init_checkpoint(TINY, 0)
        with pytest.raises(ValueError):
            ck.evolve(stage="kshot")

    def test_new_head_drops_decoder(self):
        ck = with_new_head(init_checkpoint(TINY, 0), 3, seed=1)
        assert ck.has_head and not ck.has_decoder
        assert ck.arch.num_classes == 3

    def test_wrong_image_shape(self):
        ck = with_new_head(init_checkpoint(TINY, 0), 3, seed=1)
        with pytest.raises(ShapeMismatch):
            forward_vit(ck, np.zeros((2, 16, 16, 1)))


class TestForward:
    def test_probabilities(self):
        ck = with_new_head(init_checkpoint(TINY, 0), 4, seed=1)
        p = predict_proba(ck, _batch(5))
        assert p.shape == (5, 4)
        np.testing.assert_allclose(p.sum(1), 1.0)

    def test_embed_batching_consistent(self):
        ck = init_checkpoint(TINY, 0)
        x = _batch(7)
        np.testing.assert_allclose(embed(ck, x, batch_size=2), embed(ck, x, batch_size=64), atol=1e-12)

    def test_mae_loss_is_deterministic(self):
        ck = init_checkpoint(TINY, 0)
        a = mae_forward_loss(ck, _batch(), seed=5).loss
        b = mae_forward_loss(ck, _batch(), seed=5).loss
        assert a == b and a > 0

    def test_cache_single_use(self):
        ck = init_checkpoint(TINY, 0)
        r = mae_forward_loss(ck, _batch(), seed=0)
        backprop(r.cache, "mae")
        with pytest.raises(StaleCache):
            backprop(r.cache, "mae")

    def test_cache_kind_checked(self):
        ck = with_new_head(init_checkpoint(TINY, 0), 2, seed=0)
        _, cache = classify_loss(ck, _batch(2), [0, 1])
        with pytest.raises(StaleCache):
            backprop(cache, "mae")

    def test_gradient_keys_match_params(self):
        ck = init_checkpoint(TINY, 0)
        g = backprop(mae_forward_loss(ck, _batch(), seed=0).cache, "mae")
        assert set(g) == set(ck.params)


class TestGradients:
    def test_stencils_exact_on_polynomials(self):
        # the 5-point stencil is exact up to quartics, the 3-point one up to quadratics
        for order, f in ((2, lambda x: 3 * x * x - x), (4, lambda x: x ** 4 - 2 * x ** 3 + x)):
            offsets, weights = STENCILS[order]
            h, x0 = 0.1, 0.7
            fd = sum(w * f(x0 + o * h) for o, w in zip(offsets, weights)) / h
            exact = 6 * x0 - 1 if order == 2 else 4 * x0 ** 3 - 6 * x0 ** 2 + 1
            assert fd == pytest.approx(exact, abs=1e-12)

    def test_relative_error_floor(self):
        assert relative_errors([0.0], [1e-12], 0.0)[0] < 1e-3
        assert relative_errors([1.0], [1.1], 1.0)[0] == pytest.approx(0.1 / 1.1)

    @pytest.mark.parametrize("pool", ["mean", "cls"])
    def test_mae_and_head_gradients(self, pool):
        arch = ArchConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2, decoder_dim=4,
                          pool=pool, drop_path=0.0, norm_pix_loss=True)
        ck = perturbed_checkpoint(arch, 1)
        checks = check_gradients(ck, _batch(2, arch), per_block=3)
        assert max(c.max_rel_error for c in checks) < 1e-4
        head = with_new_head(ck, 3, seed=2, drop_decoder=False)
        checks = check_gradients(head, _batch(2, arch), labels=[0, 2], per_block=3)
        assert {c.loss_kind for c in checks} == {"mae", "cross_entropy"}
        assert max(c.max_rel_error for c in checks) < 1e-4

    def test_soft_target_gradient(self):
        ck = perturbed_checkpoint(TINY, 0)
        ck = with_new_head(ck, 2, seed=0)
        soft = np.array([[0.3, 0.7], [1.0, 0.0]])
        x = _batch(2)
        _, cache = classify_loss(ck, x, soft)
        g = backprop(cache, "mixup_cross_entropy")["head.b"]
        h = 1e-6
        for j in range(2):
            p = dict(ck.params)
            up, dn = p["head.b"].copy(), p["head.b"].copy()
            up[j] += h
            dn[j] -= h
            lu = classify_loss(ck.evolve(params={**p, "head.b": up}), x, soft)[0]
            ld = classify_loss(ck.evolve(params={**p, "head.b": dn}), x, soft)[0]
            assert g[j] == pytest.approx((lu - ld) / (2 * h), rel=1e-5, abs=1e-9)


class TestOptim:
    def test_layer_ids(self):
        assert layer_id("patch_embed.w", 2) == 0
        assert layer_id("blocks.1.attn.qkv.w", 2) == 2
        assert layer_id("head.w", 2) == 3
        assert lr_scale("head.w", 2, 0.75) == 1.0
        assert lr_scale("pos_embed", 2, 0.75) == pytest.approx(0.75**3)

    def test_first_step_matches_reference(self):
        # first AdamW step moves each entry by lr*sign(g) plus decoupled decay
        p = {"w.w": np.array([[1.0, -2.0]]), "b": np.array([0.5])}
        g = {"w.w": np.array([[0.3, -0.1]]), "b": np.array([2.0])}
        st = OptimState(OptimHyper(base_lr=0.1, weight_decay=0.5, layerwise_decay=1.0))
        new, st2 = adamw_update(st, p, g)
        np.testing.assert_allclose(new["w.w"], [[1.0 - 0.1 * (1 + 0.5), -2.0 - 0.1 * (-1 - 1.0)]], rtol=1e-6)
        np.testing.assert_allclose(new["b"], [0.5 - 0.1], rtol=1e-6)
        assert st2.step_count == 1 and st.step_count == 0

    def test_frozen_untouched(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        new, _ = adamw_update(OptimState(), p, {"a": np.ones(2)}, frozen=("b",))
        assert new["b"] is p["b"]

    def test_missing_gradient(self):
        with pytest.raises(ShapeMismatch):
            adamw_update(OptimState(), {"a": np.ones(2)}, {})

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 500), st.integers(0, 50))
    def test_cosine_bounds(self, total, warmup):
        vals = [cosine_lr(s, total, min(warmup, total - 1)) for s in range(total)]
        assert all(0.0 <= v <= 1.0 for v in vals)


class TestAugment:
    def test_no_augment_identity(self):
        x = _batch(4)
        y, soft = augment_batch(x, NO_AUGMENT, seed=0)
        np.testing.assert_array_equal(x, y)
        assert soft is None

    def test_deterministic_and_in_range(self):
        x = _batch(8)
        a, _ = augment_batch(x, FINETUNE_DEFAULT, seed=7)
        b, _ = augment_batch(x, FINETUNE_DEFAULT, seed=7)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1

    def test_mixing_keeps_label_mass(self):
        x = _batch(6)
        for seed in range(10):
            _, soft = augment_batch(x, SUPERVISED_PRETRAIN_DEFAULT, seed, labels=[0, 1, 2, 0, 1, 2], num_classes=3)
            np.testing.assert_allclose(soft.sum(1), 1.0)

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            AugmentPolicy(crop=1.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(4, 32), st.integers(4, 32), st.floats(0.0, 1.0), st.integers(0, 100))
    def test_cutmix_box_inside(self, h, w, lam, seed):
        top, left, bh, bw = cutmix_box(h, w, lam, np.random.default_rng(seed))
        assert 0 <= top and top + bh <= h and 0 <= left and left + bw <= w
