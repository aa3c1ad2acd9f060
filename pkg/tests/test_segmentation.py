import numpy as np
import pytest

from radroute import numeric, segmentation
from radroute.canvas import Label
from radroute.errors import SamplingError, ShapeError
from radroute.segmentation import (AugmentationConfig, CropSample,
                                   PropagationConfig, ResampleNeeded,
                                   SegTrainConfig, UNet, UNetInference,
                                   augment, propagate_labels, sample_crops,
                                   segment, segment_probabilities,
                                   stage1_train, stage2_finetune)

U, N, P = int(Label.UNLABELED), int(Label.NOT_PATH), int(Label.PATH)


def tiny_model(seed=0, zero_head=True):
    return UNet(depth=2, base_channels=4, seed=seed, zero_head=zero_head)


def stripe_scene(size=64, seed=0):
    """Scan with a bright vertical stripe and a mask labelling part of it."""
    rng = np.random.default_rng(seed)
    image = rng.normal(0.0, 0.1, size=(size, size))
    image[:, 28:36] += 2.0
    mask = np.full((size, size), U, dtype=np.uint8)
    mask[8:56, 30:34] = P
    mask[8:56, 8:12] = N
    return image, mask


class TestUNetForward:
    def test_output_shape_and_range(self):
        model = tiny_model(zero_head=False)
        out = model.forward(np.random.default_rng(0).normal(
            size=(2, 1, 64, 64)))
        assert out.shape == (2, 1, 64, 64)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zero_head_outputs_half(self):
        model = tiny_model()
        out = model.forward(np.zeros((1, 1, 32, 32)))
        np.testing.assert_array_equal(out, 0.5)

    def test_untrained_segment_is_all_not_path(self):
        # 0.5 probability with the strict > 0.5 rule labels nothing path
        model = tiny_model()
        mask = segment(model, np.zeros((32, 32)))
        assert not mask.any()

    def test_bad_shapes(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            model.forward(np.zeros((32, 32)))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 1, 30, 30)))

    def test_gradcheck_small(self):
        rng = np.random.default_rng(3)
        model = tiny_model(seed=3, zero_head=False)
        x = rng.normal(size=(1, 1, 16, 16))
        target = (rng.random((1, 1, 16, 16)) < 0.5).astype(float)
        labeled = rng.random((1, 1, 16, 16)) < 0.7

        def loss_fn(probs):
            return numeric.masked_binary_cross_entropy(probs, target,
                                                       labeled)

        err = numeric.gradcheck(model, x, loss_fn, eps=1e-6, rng=rng,
                                check_input=False)
        assert err < 1e-4

    def test_save_load_roundtrip(self, tmp_path):
        model = tiny_model(seed=5, zero_head=False)
        segmentation.save_unet(tmp_path / "m.kowt", tmp_path / "m.json",
                               model)
        back = segmentation.load_unet(tmp_path / "m.kowt",
                                      tmp_path / "m.json")
        x = np.random.default_rng(1).normal(size=(1, 1, 32, 32))
        np.testing.assert_array_equal(back.forward(x), model.forward(x))


class FixedRng:
    """Generator stand-in replaying scripted random()/uniform() draws."""

    def __init__(self, randoms, uniforms="low"):
        self.randoms = list(randoms)
        self.uniforms = uniforms

    def random(self):
        return self.randoms.pop(0)

    def uniform(self, lo, hi, size=None):
        return lo if self.uniforms == "low" else hi

    def normal(self, *a, **k):
        raise AssertionError("elastic should be disabled in this test")


def rigid_cfg(**kw):
    base = dict(flip=False, rotation_degrees=(0.0, 0.0), elastic_sigma=0.0,
                rescale_range=(1.0, 1.0))
    base.update(kw)
    return AugmentationConfig(**base)


class TestAugment:
    def sample(self):
        image, mask = stripe_scene(32)
        return CropSample(image=image, mask=mask)

    def test_disabled_is_identity(self):
        s = self.sample()
        out = augment(s, AugmentationConfig(enabled=False),
                      np.random.default_rng(0))
        assert out.image.tobytes() == s.image.tobytes()
        assert out.mask.tobytes() == s.mask.tobytes()

    def test_no_op_transform_is_identity(self):
        s = self.sample()
        out = augment(s, rigid_cfg(), FixedRng([]))
        np.testing.assert_allclose(out.image, s.image, atol=1e-12)
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_horizontal_flip_is_involution(self):
        s = self.sample()
        cfg = rigid_cfg(flip=True)
        once = augment(s, cfg, FixedRng([0.0, 0.9]))  # hflip only
        twice = augment(once, cfg, FixedRng([0.0, 0.9]))
        np.testing.assert_allclose(twice.image, s.image, atol=1e-12)
        np.testing.assert_array_equal(twice.mask, s.mask)
        assert not np.array_equal(once.mask, s.mask)

    def test_right_angle_rotation_swaps_axes(self):
        image = np.zeros((32, 32))
        mask = np.full((32, 32), U, dtype=np.uint8)
        image[:, 14:18] = 1.0  # vertical stripe
        mask[:, 14:18] = P
        mask[:, 4:6] = N
        out = augment(CropSample(image=image, mask=mask),
                      rigid_cfg(rotation_degrees=(90.0, 90.0)), FixedRng([]))
        # stripe becomes horizontal; per-label pixel counts preserved
        np.testing.assert_array_equal(np.bincount(out.mask.ravel(),
                                                  minlength=3),
                                      np.bincount(mask.ravel(),
                                                  minlength=3))
        rows_with_path = np.unique(np.nonzero(out.mask == P)[0])
        assert len(rows_with_path) == 4

    def test_labels_pushed_out_raise_resample(self):
        image = np.zeros((32, 32))
        mask = np.full((32, 32), U, dtype=np.uint8)
        mask[0, 0] = P  # corner label leaves the frame when zooming in
        with pytest.raises(ResampleNeeded):
            augment(CropSample(image=image, mask=mask),
                    rigid_cfg(rescale_range=(8.0, 8.0)), FixedRng([]))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            AugmentationConfig(rescale_range=(0.0, 1.0))
        with pytest.raises(ValueError):
            AugmentationConfig(elastic_sigma=-1.0)


class TestSampleCrops:
    def test_single_label_always_covered(self):
        image = np.zeros((100, 100))
        mask = np.full((100, 100), U, dtype=np.uint8)
        mask[70, 20] = P
        for s in sample_crops(image, mask, 20, crop=32, seed=0):
            assert (s.mask == P).sum() == 1

    def test_zero_crops(self):
        image, mask = stripe_scene()
        assert sample_crops(image, mask, 0) == []

    def test_unlabeled_mask_rejected(self):
        with pytest.raises(SamplingError):
            sample_crops(np.zeros((64, 64)),
                         np.full((64, 64), U, np.uint8), 5)

    def test_deterministic(self):
        image, mask = stripe_scene()
        a = sample_crops(image, mask, 10, seed=3)
        b = sample_crops(image, mask, 10, seed=3)
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.mask, t.mask)

    def test_center_class_census(self):
        # crop centers are uniform over labeled pixels: the class mix of
        # center pixels matches the labeled-pixel class mix within 5%
        rng = np.random.default_rng(0)
        mask = np.full((200, 200), U, dtype=np.uint8)
        labeled = rng.random((200, 200)) < 0.05
        labeled[:40] = labeled[-40:] = False
        labeled[:, :40] = labeled[:, -40:] = False  # keep clear of clamping
        mask[labeled] = np.where(rng.random(labeled.sum()) < 0.3, P, N)
        image = np.zeros((200, 200))
        crops = sample_crops(image, mask, 10000, crop=64, seed=1)
        centers = np.array([s.mask[32, 32] for s in crops])
        want = (mask[labeled] == P).mean()
        got = (centers == P).mean()
        assert abs(got - want) < 0.05


class TestStage1:
    def test_trains_and_reduces_loss(self):
        image, mask = stripe_scene()
        model = tiny_model(zero_head=False)
        model, log = stage1_train(
            [image], [mask], model=model,
            cfg=SegTrainConfig(steps=30, batch_size=4, learning_rate=0.2),
            aug_cfg=AugmentationConfig(enabled=False),
            crop=32, crops_per_scan=40)
        assert len(log.losses) == 30
        assert np.mean(log.losses[-5:]) < np.mean(log.losses[:5])

    def test_deterministic(self):
        image, mask = stripe_scene()

        def run():
            model, _ = stage1_train(
                [image], [mask], model=tiny_model(zero_head=False),
                cfg=SegTrainConfig(steps=4, batch_size=2),
                crop=32, crops_per_scan=10)
            return b"".join(p.tobytes() for p in model.params)

        assert run() == run()

    def test_no_labels_rejected(self):
        with pytest.raises(SamplingError):
            stage1_train([np.zeros((64, 64))],
                         [np.full((64, 64), U, np.uint8)],
                         model=tiny_model(),
                         cfg=SegTrainConfig(steps=1), crops_per_scan=5)


@pytest.fixture(scope="module")
def stripe_model():
    """Stage-1 model trained to find the bright stripe."""
    image, mask = stripe_scene()
    model, _ = stage1_train(
        [image], [mask], model=UNet(depth=2, base_channels=4, seed=0,
                                    zero_head=False),
        cfg=SegTrainConfig(steps=60, batch_size=4, learning_rate=0.2),
        aug_cfg=AugmentationConfig(elastic_sigma=0.0,
                                   rescale_range=(0.9, 1.1)),
        crop=32, crops_per_scan=60)
    return model


class TestPropagate:
    def test_single_rotation_equals_tiled_inference(self, stripe_model):
        image, mask = stripe_scene()
        cfg = PropagationConfig(tile_size=32, n_rotations=1,
                                vote_threshold=1.0)
        out = propagate_labels(stripe_model, image, mask, cfg)
        inf = UNetInference(stripe_model)
        probs = segmentation._tiled_inference(inf, image, 32)
        plain = np.where(probs > cfg.probability_threshold, P,
                         N).astype(np.uint8)
        want = np.where(mask != U, mask, plain)
        np.testing.assert_array_equal(out, want)

    def test_rotation_list_permutation_invariant(self, stripe_model):
        image, mask = stripe_scene()
        cfg = PropagationConfig(tile_size=32, n_rotations=3)
        angles = [15.0, 120.0, 283.0]
        a = propagate_labels(stripe_model, image, mask, cfg, angles=angles)
        b = propagate_labels(stripe_model, image, mask, cfg,
                             angles=angles[::-1])
        np.testing.assert_array_equal(a, b)

    def test_original_labels_take_precedence(self, stripe_model):
        image, mask = stripe_scene()
        mask = mask.copy()
        mask[30, 31] = N  # contradicts the model on a stripe pixel
        cfg = PropagationConfig(tile_size=32, n_rotations=1)
        out = propagate_labels(stripe_model, image, mask, cfg)
        assert out[30, 31] == N
        np.testing.assert_array_equal(out[mask != U], mask[mask != U])

    def test_valid_region_masks_output(self, stripe_model):
        image, mask = stripe_scene()
        valid = np.zeros(image.shape, dtype=bool)
        valid[:32] = True
        cfg = PropagationConfig(tile_size=32, n_rotations=1)
        blank = np.full(image.shape, U, dtype=np.uint8)
        out = propagate_labels(stripe_model, image, blank, cfg,
                               valid_region=valid)
        assert not (out[~valid] != U).any()
        assert (out[valid] != U).any()

    def test_densifies_stripe(self, stripe_model):
        image, mask = stripe_scene()
        cfg = PropagationConfig(tile_size=32, n_rotations=3)
        out = propagate_labels(stripe_model, image, mask, cfg)
        new = (out == P) & (mask == U)
        stripe = np.zeros(image.shape, dtype=bool)
        stripe[:, 30:34] = True
        # unlabeled parts of the stripe get picked up
        assert new[stripe & (mask == U)].mean() > 0.5

    def test_bad_configs(self):
        with pytest.raises(ValueError):
            PropagationConfig(n_rotations=0)
        with pytest.raises(ValueError):
            PropagationConfig(vote_threshold=0.0)
        with pytest.raises(ValueError):
            PropagationConfig(probability_threshold=1.0)


class TestStage2:
    def test_full_scan_forward_shape(self, stripe_model):
        probs = segment_probabilities(UNetInference(stripe_model),
                                      np.zeros((256, 256)))
        assert probs.shape == (256, 256)

    def test_finetune_deterministic(self):
        image, mask = stripe_scene()

        def run():
            model, _ = stage2_finetune(
                tiny_model(zero_head=False), [image], [mask],
                cfg=SegTrainConfig(steps=3, learning_rate=0.05))
            return b"".join(p.tobytes() for p in model.params)

        assert run() == run()

    def test_finetune_improves_dense_fit(self, stripe_model):
        image, _ = stripe_scene()
        dense = np.full(image.shape, N, dtype=np.uint8)
        dense[:, 30:34] = P
        truth = dense == P
        before = segment(stripe_model, image)

        import copy

        model = copy.deepcopy(stripe_model)
        model, _ = stage2_finetune(model, [image], [dense],
                                   cfg=SegTrainConfig(steps=20,
                                                      learning_rate=0.05))
        after = segment(model, image)

        def iou(pred):
            inter = (pred.astype(bool) & truth).sum()
            union = (pred.astype(bool) | truth).sum()
            return inter / union

        assert iou(after) >= iou(before)


class TestInferenceEngine:
    def test_matches_training_forward(self):
        model = UNet(depth=3, base_channels=8, seed=2, zero_head=False)
        x = np.random.default_rng(0).normal(size=(2, 1, 64, 64))
        slow = model.forward(x)
        fast = UNetInference(model).forward(x)
        assert np.abs(slow - fast).max() < 1e-5

    def test_segment_idempotent(self, stripe_model):
        image, _ = stripe_scene()
        a = segment(stripe_model, image)
        b = segment(stripe_model, image)
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0, 1}

    def test_prepare_scan_image(self):
        rng = np.random.default_rng(0)
        img = prepare = segmentation.prepare_scan_image(
            rng.exponential(1.0, size=(32, 32)))
        assert abs(prepare.mean()) < 1e-9
        assert abs(prepare.std() - 1.0) < 1e-9
        flat = segmentation.prepare_scan_image(np.full((8, 8), 3.0))
        np.testing.assert_array_equal(flat, 0.0)
        assert img.shape == (32, 32)
