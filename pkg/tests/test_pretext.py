"""Pretext transform correctness: puzzling, rotation, in-painting, augmentation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmtl.pretext import (
    AugmentLevel,
    Region,
    augment,
    cutout_side_for,
    default_region_weights,
    make_inpaint,
    make_puzzle,
    make_rotation,
    read_fixture,
    rotate_by_label,
    rotate_image,
    unscramble,
    write_fixture,
)


def random_image(side=12, seed=0):
    return np.random.default_rng(seed).random((side, side, 3)).astype(np.float32)


class _FixedPermutation:
    def __init__(self, perm):
        self.perm = np.asarray(perm)

    def permutation(self, n):
        assert n == len(self.perm)
        return self.perm.copy()


class TestPuzzle:
    def test_identity_permutation_is_noop(self):
        img = random_image(8)
        sample = make_puzzle(img, 2, rng=_FixedPermutation([0, 1, 2, 3]))
        assert np.array_equal(sample.image, img)
        assert sample.labels.tolist() == [0, 1, 2, 3]

    def test_quadrant_swap_labels_and_reconstruction(self):
        # 4x4 image with four constant-valued quadrants
        img = np.zeros((4, 4, 3), dtype=np.float32)
        for slot, value in enumerate((0.1, 0.2, 0.3, 0.4)):
            r, c = divmod(slot, 2)
            img[2 * r : 2 * r + 2, 2 * c : 2 * c + 2] = value
        sample = make_puzzle(img, 2, rng=_FixedPermutation([1, 0, 3, 2]))
        assert sample.labels.tolist() == [1, 0, 3, 2]
        # the piece at position 0 came from slot 1
        assert np.allclose(sample.image[0:2, 0:2], 0.2)
        assert np.array_equal(unscramble(sample.image, sample.labels), img)

    def test_uniform_weights_stay_uniform(self):
        img = random_image(9, seed=3)
        sample = make_puzzle(img, 3, weight_map=np.ones(9), rng=np.random.default_rng(5))
        assert np.array_equal(sample.head_weights, np.ones(9))

    def test_weights_travel_with_pieces(self):
        img = random_image(8, seed=4)
        weights = np.arange(1.0, 5.0)
        sample = make_puzzle(img, 2, weight_map=weights, rng=np.random.default_rng(0))
        assert np.array_equal(sample.head_weights, weights[sample.labels])

    def test_head_weight_multiset_conserved(self):
        img = random_image(12, seed=6)
        weights = default_region_weights(4)
        for seed in range(20):
            sample = make_puzzle(img, 4, weight_map=weights, rng=np.random.default_rng(seed))
            assert sorted(sample.head_weights) == sorted(weights)

    @pytest.mark.parametrize("grid", [2, 3, 4])
    def test_labels_always_a_permutation_and_roundtrip(self, grid):
        img = random_image(24, seed=grid)
        for seed in range(200):
            sample = make_puzzle(img, grid, rng=np.random.default_rng(seed))
            assert sorted(sample.labels.tolist()) == list(range(grid * grid))
            assert np.array_equal(unscramble(sample.image, sample.labels), img)

    def test_side_not_divisible_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            make_puzzle(random_image(9), 2, rng=np.random.default_rng(0))

    def test_weight_map_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="entries"):
            make_puzzle(random_image(8), 2, weight_map=[1.0, 1.0, 1.0], rng=np.random.default_rng(0))

    def test_same_seed_bit_identical(self):
        img = random_image(12, seed=9)
        a = make_puzzle(img, 3, rng=np.random.default_rng(77))
        b = make_puzzle(img, 3, rng=np.random.default_rng(77))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels, b.labels)

    @given(seed=st.integers(0, 10_000), grid=st.sampled_from([2, 3, 4]))
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_property(self, seed, grid):
        img = np.random.default_rng(seed % 17).random((12, 12, 3)).astype(np.float32)
        sample = make_puzzle(img, grid, rng=np.random.default_rng(seed))
        assert np.array_equal(unscramble(sample.image, sample.labels), img)

    def test_default_region_weights_4x4(self):
        w = default_region_weights(4).reshape(4, 4)
        assert w[0, 0] == w[0, 3] == w[3, 0] == w[3, 3] == 0.5
        assert w[0, 1] == w[1, 0] == w[3, 2] == 0.75
        assert w[1, 1] == w[2, 2] == 1.0


def smooth_image(side=32):
    yy, xx = np.meshgrid(np.linspace(-1, 1, side), np.linspace(-1, 1, side), indexing="ij")
    blob = np.exp(-(xx**2 + yy**2) * 3) + 0.3 * np.exp(-((xx - 0.4) ** 2 + (yy + 0.2) ** 2) * 8)
    return np.stack([blob, blob * 0.8, blob * 0.5], axis=-1).astype(np.float32)


class TestRotation:
    def test_label_zero_identity(self):
        img = random_image(8)
        assert np.array_equal(rotate_by_label(img, 0), img)

    def test_quarter_turn_against_coordinate_oracle(self):
        img = random_image(6, seed=2)
        out = rotate_by_label(img, 2)
        h = img.shape[0]
        oracle = np.zeros_like(img)
        for r in range(h):
            for c in range(h):
                oracle[h - 1 - c, r] = img[r, c]
        assert np.array_equal(out, oracle)

    def test_2x2_quarter_turn_value_map(self):
        base = np.array([[1, 2], [3, 4]], dtype=np.float32)
        img = np.stack([base] * 3, axis=-1)
        assert np.array_equal(rotate_by_label(img, 2)[:, :, 0], np.array([[2, 4], [1, 3]], dtype=np.float32))

    def test_half_turn_is_two_quarter_turns(self):
        img = random_image(10, seed=3)
        assert np.array_equal(rotate_by_label(img, 4), rotate_by_label(rotate_by_label(img, 2), 2))

    def test_right_angle_composition_exact(self):
        img = random_image(12, seed=5)
        for a in (0, 2, 4, 6):
            for b in (0, 2, 4, 6):
                composed = rotate_by_label(rotate_by_label(img, a), b)
                direct = rotate_by_label(img, (a + b) % 8)
                assert np.array_equal(composed, direct), (a, b)

    def test_mixed_composition_bounded(self):
        img = smooth_image()
        for a in range(8):
            for b in range(8):
                composed = rotate_by_label(rotate_by_label(img, a), b)
                direct = rotate_by_label(img, (a + b) % 8)
                assert np.abs(composed - direct).max() <= 0.05, (a, b)

    def test_odd_angle_right_angle_pair_exact_within_1e6(self):
        # a right-angle turn after interpolation is a pure remap
        img = smooth_image()
        composed = rotate_by_label(rotate_by_label(img, 1), 2)
        direct = rotate_by_label(img, 3)
        assert np.abs(composed - direct).max() <= 1e-6

    def test_label_distribution_and_determinism(self):
        img = random_image(8, seed=1)
        labels = [make_rotation(img, np.random.default_rng(s)).label for s in range(300)]
        assert set(labels) == set(range(8))
        again = [make_rotation(img, np.random.default_rng(s)).label for s in range(300)]
        assert labels == again

    def test_non_square_rejected(self):
        img = np.zeros((4, 6, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="square"):
            make_rotation(img, np.random.default_rng(0))

    def test_zero_fill_outside_source(self):
        img = np.ones((16, 16, 3), dtype=np.float32)
        out = rotate_image(img, 45.0)
        assert out[0, 0].max() == 0.0  # corner falls outside the rotated square


class TestInpaint:
    def test_zero_side_is_degenerate(self):
        img = random_image(16)
        sample = make_inpaint(img, Region(), 0.0, np.random.default_rng(0))
        assert sample.mask.sum() == 0
        assert np.array_equal(sample.image, img)

    def test_mask_area_full_region_half_side(self):
        img = random_image(64, seed=8)
        sample = make_inpaint(img, Region(0.0, 0.0, 1.0, 1.0), 0.5, np.random.default_rng(4))
        assert sample.mask.sum() == 32 * 32

    def test_masking_identities(self):
        img = random_image(32, seed=9)
        for seed in range(30):
            s = make_inpaint(img, Region(), 0.4, np.random.default_rng(seed))
            keep = s.mask == 0
            assert np.array_equal(s.image[keep], s.original[keep])
            assert np.all(s.image[s.mask == 1] == 0.0)

    def test_mask_is_single_square_inside_region(self):
        img = random_image(40, seed=10)
        region = Region(0.2, 0.15, 0.85, 0.85)
        for seed in range(30):
            s = make_inpaint(img, region, 0.3, np.random.default_rng(seed))
            rows = np.where(s.mask.any(axis=1))[0]
            cols = np.where(s.mask.any(axis=0))[0]
            side = int(round(0.3 * 40))
            assert len(rows) == len(cols) == side
            assert np.all(np.diff(rows) == 1) and np.all(np.diff(cols) == 1)
            assert s.mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].all()
            assert rows[0] >= round(0.2 * 40) and rows[-1] < round(0.85 * 40)
            assert cols[0] >= round(0.15 * 40) and cols[-1] < round(0.85 * 40)

    def test_square_too_large_rejected(self):
        img = random_image(32)
        with pytest.raises(ValueError, match="fit"):
            make_inpaint(img, Region(0.4, 0.4, 0.6, 0.6), 0.5, np.random.default_rng(0))

    def test_same_seed_bit_identical(self):
        img = random_image(32, seed=12)
        a = make_inpaint(img, Region(), 0.4, np.random.default_rng(3))
        b = make_inpaint(img, Region(), 0.4, np.random.default_rng(3))
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


class _NoFlip:
    """rng stub whose first uniform draw suppresses the horizontal flip."""

    def __init__(self):
        self.inner = np.random.default_rng(0)

    def random(self):
        return 0.9

    def __getattr__(self, name):
        return getattr(self.inner, name)


class TestAugment:
    def test_level_no_without_flip_is_identity(self):
        img = random_image(16, seed=1)
        out = augment(img, AugmentLevel.NO, _NoFlip())
        assert np.array_equal(out, img)

    def test_level_no_flip_only(self):
        img = random_image(16, seed=2)
        flipped = [augment(img, AugmentLevel.NO, np.random.default_rng(s)) for s in range(20)]
        for out in flipped:
            assert np.array_equal(out, img) or np.array_equal(out, img[:, ::-1, :])

    @pytest.mark.parametrize("level", [AugmentLevel.WEAK, AugmentLevel.STRONG])
    def test_output_range_and_determinism(self, level):
        img = random_image(32, seed=3)
        a = augment(img, level, np.random.default_rng(11))
        b = augment(img, level, np.random.default_rng(11))
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert a.shape == img.shape

    def test_strong_differs_from_weak_stream(self):
        img = random_image(32, seed=4)
        weak = augment(img, AugmentLevel.WEAK, np.random.default_rng(5))
        strong = augment(img, AugmentLevel.STRONG, np.random.default_rng(5))
        assert not np.array_equal(weak, strong)

    def test_cutout_scaling(self):
        assert cutout_side_for(224) == 60
        assert cutout_side_for(64) == round(60 / 224 * 64)

    def test_disable_flags_change_stream(self):
        img = random_image(32, seed=6)
        with_rot = augment(img, AugmentLevel.WEAK, np.random.default_rng(7), enable_rotation=True)
        without_rot = augment(img, AugmentLevel.WEAK, np.random.default_rng(7), enable_rotation=False)
        assert not np.array_equal(with_rot, without_rot)


class TestFixtures:
    def test_roundtrip(self, tmp_path):
        img = random_image(8, seed=13)
        write_fixture(tmp_path / "sample", img, seed=42, transform="puzzle")
        data, meta = read_fixture(tmp_path / "sample")
        assert np.array_equal(data, img)
        assert meta == {"height": 8, "width": 8, "seed": 42, "transform": "puzzle"}

    def test_payload_size_checked(self, tmp_path):
        img = random_image(8, seed=14)
        write_fixture(tmp_path / "bad", img, seed=1, transform="x")
        (tmp_path / "bad.f32").write_bytes(b"\x00" * 12)
        with pytest.raises(ValueError, match="payload"):
            read_fixture(tmp_path / "bad")
