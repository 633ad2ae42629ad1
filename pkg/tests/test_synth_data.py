"""Synthetic volume generation, meta-labels, augmentation, persistence."""

import numpy as np
import pytest

from spcl.errors import DataError, InvalidConfig
from spcl.synth_data import (
    ALIGNMENT_TOLERANCE_PX,
    AugmentationPolicy,
    MetaLabelSpec,
    SynthVolume,
    augment_pair,
    build_pair_batch,
    generate_dataset,
    load_dataset,
    meta_labels_for,
    partition_overlap_stats,
    per_image_labels,
    save_dataset,
)


class TestGenerate:
    def test_deterministic_for_seed(self):
        a = generate_dataset(4, 8, (16, 16), noise_level=0.2, seed=3)
        b = generate_dataset(4, 8, (16, 16), noise_level=0.2, seed=3)
        for va, vb in zip(a.volumes, b.volumes):
            np.testing.assert_array_equal(va.slices, vb.slices)
            np.testing.assert_array_equal(va.masks, vb.masks)
            assert va.misalignment_offset == vb.misalignment_offset

    def test_values_in_unit_range_and_shapes(self):
        ds = generate_dataset(3, 6, (12, 12), seed=0)
        for v in ds.volumes:
            assert v.slices.shape == (6, 12, 12)
            assert v.slices.min() >= 0.0 and v.slices.max() <= 1.0
            assert set(np.unique(v.masks)) <= {0, 1}

    def test_no_misalignment_at_zero_noise(self):
        ds = generate_dataset(6, 12, (16, 16), noise_level=0.0, seed=1)
        assert all(v.misalignment_offset == 0 for v in ds.volumes)

    def test_partition_alignment_at_zero_noise(self):
        ds = generate_dataset(10, 12, (16, 16), noise_level=0.0, seed=7)
        centroids = {}
        for vol in ds.volumes:
            for si in range(vol.num_slices):
                part, _, _ = meta_labels_for(vol, si, ds.spec)
                m = vol.masks[si]
                if m.sum():
                    centroids.setdefault(part, []).append(np.argwhere(m).mean(axis=0))
        for part, cs in centroids.items():
            cs = np.array(cs)
            spread = np.linalg.norm(cs[:, None, :] - cs[None, :, :], axis=-1).max()
            assert spread <= ALIGNMENT_TOLERANCE_PX, f"partition {part} centroids spread {spread:.2f}px"

    def test_noise_degrades_same_partition_overlap(self):
        clean = partition_overlap_stats(generate_dataset(10, 12, (16, 16), 0.0, seed=7))
        noisy = partition_overlap_stats(generate_dataset(10, 12, (16, 16), 0.5, seed=7))
        assert noisy["fraction_below"] >= clean["fraction_below"] + 0.05
        assert noisy["mean_overlap"] < clean["mean_overlap"]

    def test_splits_disjoint_by_patient(self):
        ds = generate_dataset(10, 12, (16, 16), seed=0)
        seen = [pid for split in ds.splits.values() for pid in split]
        assert sorted(seen) == list(range(10))
        assert set(ds.splits["train"]) & set(ds.splits["test"]) == set()

    def test_preconditions(self):
        with pytest.raises(InvalidConfig):
            generate_dataset(1, 12)
        with pytest.raises(InvalidConfig):
            generate_dataset(4, 3)
        with pytest.raises(InvalidConfig):
            generate_dataset(4, 12, noise_level=1.5)


class TestMetaLabels:
    def _volume(self, s=10, offset=0):
        return SynthVolume(
            patient_id=3, phase=1,
            slices=np.zeros((s, 4, 4)), masks=np.zeros((s, 4, 4), dtype=np.int64),
            misalignment_offset=offset,
        )

    def test_floor_rule(self):
        spec = MetaLabelSpec(num_partitions=5, num_patients=4)
        assert meta_labels_for(self._volume(), 7, spec) == (3, 3, 1)
        assert meta_labels_for(self._volume(), 0, spec) == (0, 3, 1)

    def test_misalignment_shifts_partition(self):
        spec = MetaLabelSpec(num_partitions=5, num_patients=4)
        assert meta_labels_for(self._volume(offset=2), 7, spec)[0] == 4

    def test_shift_clipped_to_valid_range(self):
        spec = MetaLabelSpec(num_partitions=5, num_patients=4)
        assert meta_labels_for(self._volume(offset=5), 9, spec)[0] == 4
        assert meta_labels_for(self._volume(offset=-5), 0, spec)[0] == 0

    def test_out_of_range_slice_rejected(self):
        spec = MetaLabelSpec(num_partitions=5, num_patients=4)
        with pytest.raises(InvalidConfig):
            meta_labels_for(self._volume(), 10, spec)


class TestAugmentation:
    def test_identity_policy_returns_input(self, rng):
        img = rng.random((16, 16))
        v1, v2 = augment_pair(img, AugmentationPolicy.identity(), seed=5)
        np.testing.assert_array_equal(v1, img)
        np.testing.assert_array_equal(v2, img)

    def test_same_seed_same_views(self, rng):
        img = rng.random((16, 16))
        policy = AugmentationPolicy()
        a = augment_pair(img, policy, seed=42)
        b = augment_pair(img, policy, seed=42)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_flip_only_policy_enumerable(self, rng):
        img = rng.random((16, 16))
        policy = AugmentationPolicy(flip_prob=0.5, max_rotate_deg=0.0, crop_scale=(1.0, 1.0), gamma_range=(1.0, 1.0), brightness_delta=0.0)
        for seed in range(20):
            v1, v2 = augment_pair(img, policy, seed)
            for v in (v1, v2):
                assert np.array_equal(v, img) or np.array_equal(v, img[:, ::-1])

    def test_views_clipped_and_shaped(self, rng):
        img = rng.random((16, 16))
        v1, v2 = augment_pair(img, AugmentationPolicy(), seed=0)
        for v in (v1, v2):
            assert v.shape == img.shape
            assert v.min() >= 0.0 and v.max() <= 1.0

    def test_mask_transforms_with_same_geometry(self, rng):
        policy = AugmentationPolicy(flip_prob=1.0, max_rotate_deg=0.0, crop_scale=(1.0, 1.0), gamma_range=(0.7, 0.9), brightness_delta=0.1)
        img = rng.random((8, 8))
        mask = (rng.random((8, 8)) > 0.6).astype(np.int64)
        out_img, out_mask = policy.apply_with_mask(img, mask, np.random.default_rng(0))
        np.testing.assert_array_equal(out_mask, mask[:, ::-1])
        assert out_img.shape == img.shape


class TestPairBatch:
    def test_build_pair_batch_layout(self, rng):
        ds = generate_dataset(4, 8, (16, 16), seed=2)
        refs = ds.slice_refs("train")[:5]
        batch = build_pair_batch(ds, refs, AugmentationPolicy.identity(), rng)
        assert batch.images.shape == (10, 16, 16)
        assert batch.meta_labels.shape == (3, 10)
        for t, (vi, si) in enumerate(refs):
            np.testing.assert_array_equal(batch.images[2 * t], ds.volumes[vi].slices[si])
            assert batch.pair_of[2 * t] == 2 * t + 1
            expected = meta_labels_for(ds.volumes[vi], si, ds.spec)
            assert tuple(batch.meta_labels[:, 2 * t]) == expected
            assert tuple(batch.meta_labels[:, 2 * t + 1]) == expected

    def test_per_image_labels(self):
        np.testing.assert_array_equal(per_image_labels(3), [[0, 0, 1, 1, 2, 2]])


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset(4, 8, (12, 12), noise_level=0.4, seed=9)
        save_dataset(ds, tmp_path / "data")
        loaded = load_dataset(tmp_path / "data")
        assert loaded.seed == ds.seed and loaded.noise_level == ds.noise_level
        assert loaded.splits == ds.splits
        assert loaded.spec == ds.spec
        for a, b in zip(ds.volumes, loaded.volumes):
            np.testing.assert_array_equal(a.slices, b.slices)
            np.testing.assert_array_equal(a.masks, b.masks)
            assert (a.patient_id, a.phase, a.misalignment_offset) == (b.patient_id, b.phase, b.misalignment_offset)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")

    def test_bad_version(self, tmp_path):
        ds = generate_dataset(4, 4, (8, 8), seed=0)
        save_dataset(ds, tmp_path / "data")
        manifest = (tmp_path / "data" / "manifest.json")
        manifest.write_text(manifest.read_text().replace('"format_version": 1', '"format_version": 99'))
        with pytest.raises(DataError):
            load_dataset(tmp_path / "data")
