import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unshadow.augmentation import (AugmentationConfig, ConfigError, MaskBank, curriculum_score, geometric_transform,
                                   illumination_variants, inpaint_shadow, refinement_positive, shadow_mean,
                                   standard_augment)
from unshadow.datasets import ShadowTriplet
from unshadow.imaging import ContractError, Region
from unshadow.synthetic import make_toy_split


def _triplet(seed=0, size=32):
    rng = np.random.default_rng(seed)
    lit = rng.uniform(0.4, 0.9, (size, size, 3)).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.float32)
    mask[: size // 3, : size // 3] = 1
    shadow = (lit * (1 - 0.5 * mask[..., None])).astype(np.float32)
    return ShadowTriplet(shadow, mask, lit, f"s{seed}")


def _bank(size=32):
    masks = []
    for y, x in [(20, 20), (18, 4), (4, 20)]:
        m = np.zeros((size, size), dtype=np.float32)
        m[y:y + 8, x:x + 8] = 1
        masks.append(m)
    return MaskBank(masks)


class TestConfig:

    def test_defaults(self):
        cfg = AugmentationConfig()
        assert cfg.flip_prob == 0.3
        assert cfg.scale_range == (0.8, 1.2)
        assert cfg.mu == 75

    @pytest.mark.parametrize("kwargs", [{"flip_prob": 1.5}, {"scale_range": (1.2, 0.8)}, {"noise_sigma": -1}])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            AugmentationConfig(**kwargs)


class TestInpaint:

    def test_union_and_level(self):
        t = _triplet()
        target = shadow_mean(t.shadow, t.mask)
        out = inpaint_shadow(t, _bank(), np.random.default_rng(0), jitter=0.0)
        assert (out.mask >= t.mask).all()
        new = out.mask * (1 - t.mask)
        assert new.sum() > 0
        assert shadow_mean(out.shadow, new) == pytest.approx(target, rel=1e-4)
        # pixels outside the new footprint are untouched
        keep = (1 - new).astype(bool)
        np.testing.assert_array_equal(out.shadow[keep], t.shadow[keep])
        np.testing.assert_array_equal(out.shadow_free, t.shadow_free)

    def test_overlapping_bank_is_skipped(self):
        t = _triplet()
        bank = MaskBank([t.mask.copy()])
        out = inpaint_shadow(t, bank, np.random.default_rng(0))
        np.testing.assert_array_equal(out.mask, t.mask)

    def test_empty_bank(self):
        with pytest.raises(ConfigError):
            inpaint_shadow(_triplet(), MaskBank(), np.random.default_rng(0))

    def test_level_within_jitter_band(self):
        t = _triplet()
        target = shadow_mean(t.shadow, t.mask)
        rng = np.random.default_rng(1)
        for _ in range(50):
            out = inpaint_shadow(t, _bank(), rng)
            new = out.mask * (1 - t.mask)
            assert abs(shadow_mean(out.shadow, new) - target) <= 0.05 * target + 1e-3

    def test_deterministic(self):
        a = inpaint_shadow(_triplet(), _bank(), np.random.default_rng(3))
        b = inpaint_shadow(_triplet(), _bank(), np.random.default_rng(3))
        np.testing.assert_array_equal(a.shadow, b.shadow)


class TestGeometric:

    def test_flip(self):
        t = _triplet()
        out = geometric_transform(t, True, 1.0)
        np.testing.assert_array_equal(out.shadow, t.shadow[:, ::-1])
        np.testing.assert_array_equal(out.mask, t.mask[:, ::-1])

    @settings(max_examples=30, deadline=None)
    @given(st.booleans(), st.floats(0.8, 1.2))
    def test_mask_follows_image(self, flip, scale):
        # the image encodes the mask in its red channel; the transform must commute with that encoding
        t = _triplet()
        shadow = t.shadow.copy()
        shadow[..., 0] = t.mask
        out = geometric_transform(ShadowTriplet(shadow, t.mask, t.shadow_free), flip, scale)
        np.testing.assert_array_equal(out.shadow[..., 0], out.mask)
        assert out.shadow.shape == t.shadow.shape

    def test_flip_rate(self):
        cfg = AugmentationConfig(scale_range=(1.0, 1.0), photometric_prob=0.0)
        rng = np.random.default_rng(0)
        mask = np.zeros((8, 8), dtype=np.float32)
        # asymmetric marker: only the left column is bright
        shadow = np.zeros((8, 8, 3), dtype=np.float32)
        shadow[:, 0] = 1
        flips = sum(standard_augment(ShadowTriplet(shadow, mask), cfg, rng).shadow[0, -1, 0] > 0.5
                    for _ in range(1000))
        assert 0.25 <= flips / 1000 <= 0.35


class TestStandardAugment:

    def test_invariants(self):
        rng = np.random.default_rng(2)
        for seed in range(20):
            t = _triplet(seed)
            out = standard_augment(t, AugmentationConfig(photometric_prob=1.0), rng)
            assert out.shadow.shape == t.shadow.shape and out.shadow_free.shape == t.shadow_free.shape
            assert set(np.unique(out.mask)) <= {0.0, 1.0}
            assert out.shadow.min() >= 0 and out.shadow.max() <= 1

    def test_photometric_never_touches_mask(self):
        t = _triplet()
        cfg = AugmentationConfig(flip_prob=0.0, scale_range=(1.0, 1.0), photometric_prob=1.0)
        out = standard_augment(t, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out.mask, t.mask)
        assert not np.array_equal(out.shadow, t.shadow)

    def test_seeded(self):
        a = standard_augment(_triplet(), AugmentationConfig(), np.random.default_rng(9))
        b = standard_augment(_triplet(), AugmentationConfig(), np.random.default_rng(9))
        np.testing.assert_array_equal(a.shadow, b.shadow)


class TestIlluminationVariants:

    def _region(self, v=0.4):
        mask = np.ones((2, 2), dtype=np.float32)
        return Region(np.full((2, 2, 3), v, dtype=np.float32), mask)

    def test_levels_75(self):
        r = self._region(0.4)
        got = [v.data[0, 0, 0] for v in illumination_variants(r, 75)]
        np.testing.assert_allclose(got, [0.4 * 1.70, 0.4 * 1.75, 0.4 * 1.80], rtol=1e-6)

    def test_mu_5_first_is_input(self):
        r = self._region(0.3)
        np.testing.assert_array_equal(illumination_variants(r, 5)[0].data, r.data)

    def test_mu_50_middle(self):
        assert illumination_variants(self._region(0.4), 50)[1].data[0, 0, 0] == pytest.approx(0.6)

    def test_mu_too_small(self):
        with pytest.raises(ContractError):
            illumination_variants(self._region(), 4.9)

    def test_deterministic(self):
        a = illumination_variants(self._region(0.2), 60)
        b = illumination_variants(self._region(0.2), 60)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


class TestRefinementPositive:

    def test_crop_avoids_shadow_and_cutout_is_bounded(self):
        t = _triplet()
        rng = np.random.default_rng(0)
        crops = 0
        for _ in range(100):
            rec = {}
            out = refinement_positive(t.shadow, t.mask, rng, record=rec)
            assert out.shape == t.shadow.shape
            if "crop" in rec:
                # large windows cannot dodge the corner shadow and fall back to the full frame
                crops += 1
                y, x, side = rec["crop"]
                assert t.mask[y:y + side, x:x + side].mean() < 0.05
            _, _, ch, cw = rec["cutout"]
            assert ch * cw <= 0.25 * t.mask.size
        assert crops > 0

    def test_all_shadow_falls_back_to_full_frame(self):
        t = _triplet()
        rec = {}
        out = refinement_positive(t.shadow, np.ones_like(t.mask), np.random.default_rng(0), record=rec)
        assert "crop" not in rec and out.shape == t.shadow.shape

    def test_no_transforms_is_identity(self):
        t = _triplet()
        out = refinement_positive(t.shadow, t.mask, np.random.default_rng(0), crop=False, cutout=False,
                                  max_blur=0, max_noise=0)
        np.testing.assert_array_equal(out, t.shadow)


class TestCurriculum:

    def test_range(self):
        split = make_toy_split(6, 48, seed=1, band=16, crop=24)
        for i in range(len(split)):
            assert 0.0 <= curriculum_score(split[i]) <= 1.0

    def test_small_high_contrast_is_easiest(self):
        H = 40
        mask = np.zeros((H, H), dtype=np.float32)
        mask[:2, :2] = 1
        img = np.ones((H, H, 3), dtype=np.float32) * (1 - mask[..., None])
        assert curriculum_score(ShadowTriplet(img, mask)) < 0.01

    def test_full_frame_shadow_is_hard(self):
        t = ShadowTriplet(np.zeros((8, 8, 3), dtype=np.float32), np.ones((8, 8), dtype=np.float32))
        assert curriculum_score(t) >= 0.5

    def test_coverage_ordering_at_equal_contrast(self):
        H = 20

        def make(rows):
            mask = np.zeros((H, H), dtype=np.float32)
            mask[:rows] = 1
            return ShadowTriplet((0.8 - 0.3 * mask[..., None]).repeat(3, -1).astype(np.float32), mask)

        low, high = make(2), make(8)  # coverage 0.1 and 0.4
        assert curriculum_score(low) == pytest.approx(0.5 * 0.1 + 0.5 * 0.7, abs=1e-6)
        assert curriculum_score(low) < curriculum_score(high)
