"""Synthetic volumetric scans with free meta-labels and controllable label noise.

Each "scan" is an ordered stack of 2-D slices showing a soft ellipse whose
radius follows a smooth unimodal profile over the slice index (an organ
appearing, growing, shrinking), with per-patient size/eccentricity/contrast
and a per-phase scaling. Meta-labels come for free from the acquisition
structure: the slice-position partition floor(Q * index / S), the patient id,
and the phase.

noise_level in [0, 1] injects the two weak-label pathologies: an integer
per-volume slice shift (partitions are computed on the shifted index, so
same-partition slices across volumes stop corresponding), and background-only
margin slices that carry a patient/partition label but no structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, InvalidConfig

DATASET_FORMAT_VERSION = 1

# cross-volume centroid agreement (pixels) promised at noise_level = 0
ALIGNMENT_TOLERANCE_PX = 4.0


@dataclass(frozen=True)
class MetaLabelSpec:
    """Class counts for the three free label kinds: partition, patient, phase."""

    num_partitions: int = 4
    num_patients: int = 10
    num_phases: int = 2

    def class_counts(self) -> tuple[int, int, int]:
        return (self.num_partitions, self.num_patients, self.num_phases)


@dataclass
class SynthVolume:
    patient_id: int
    phase: int
    slices: np.ndarray  # (S, H, W) float64 in [0, 1]
    masks: np.ndarray  # (S, H, W) int64
    misalignment_offset: int

    @property
    def num_slices(self) -> int:
        return self.slices.shape[0]


@dataclass
class SynthDataset:
    volumes: list[SynthVolume]
    spec: MetaLabelSpec
    splits: dict[str, list[int]]  # split name -> patient ids
    seed: int
    noise_level: float

    def volumes_in(self, split: str) -> list[SynthVolume]:
        ids = set(self.splits[split])
        return [v for v in self.volumes if v.patient_id in ids]

    def slice_refs(self, split: str) -> list[tuple[int, int]]:
        """(volume index, slice index) pairs covering a split."""
        ids = set(self.splits[split])
        return [
            (vi, si)
            for vi, v in enumerate(self.volumes)
            if v.patient_id in ids
            for si in range(v.num_slices)
        ]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.volumes[0].slices.shape[1:]


def meta_labels_for(volume: SynthVolume, slice_index: int, spec: MetaLabelSpec) -> tuple[int, int, int]:
    """(partition, patient_id, phase) for one slice.

    The partition uses the misaligned index clipped into range, so label noise
    enters exactly here.
    """
    s = volume.num_slices
    if not (0 <= slice_index < s):
        raise InvalidConfig(f"slice index {slice_index} outside [0, {s})")
    shifted = min(max(slice_index + volume.misalignment_offset, 0), s - 1)
    partition = (spec.num_partitions * shifted) // s
    return int(partition), int(volume.patient_id), int(volume.phase)


def _soft_ellipse(shape, center, axes):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    cy, cx = center
    ay, ax = axes
    d = np.sqrt(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2)
    return 1.0 / (1.0 + np.exp((d - 1.0) / 0.15)), d <= 1.0


def _render_slice(shape, center, axes, contrast, bg_level, distractor, pixel_noise, rng):
    """One slice: the target ellipse plus an off-center distractor of similar
    intensity that is NOT part of the ground truth (position context required
    to tell them apart)."""
    image = bg_level + rng.normal(0.0, pixel_noise, size=shape)
    mask = np.zeros(shape, dtype=np.int64)
    if axes is not None and min(axes) > 0.35:
        field, inside = _soft_ellipse(shape, center, axes)
        image = image + contrast * field
        mask[inside] = 1
    if distractor is not None:
        d_center, d_axes, d_contrast = distractor
        if min(d_axes) > 0.35:
            field, _ = _soft_ellipse(shape, d_center, d_axes)
            image = image + d_contrast * field
    return np.clip(image, 0.0, 1.0), mask


def generate_dataset(
    num_patients: int,
    slices_per_volume: int = 12,
    shape: tuple[int, int] = (16, 16),
    noise_level: float = 0.0,
    seed: int = 0,
    num_partitions: int = 4,
    val_fraction: float = 0.1,
    test_fraction: float = 0.2,
) -> SynthDataset:
    """Deterministic synthetic dataset: one volume per patient, split by patient.

    noise_level scales both the per-volume slice shift (zero-mean, rounded
    normal) and the fraction of background-only margin slices.
    """
    if num_patients < 2:
        raise InvalidConfig(f"need at least 2 patients, got {num_patients}")
    if slices_per_volume < 4:
        raise InvalidConfig(f"need at least 4 slices per volume, got {slices_per_volume}")
    if slices_per_volume < num_partitions:
        raise InvalidConfig("slice count must cover the partition count")
    if not (0.0 <= noise_level <= 1.0):
        raise InvalidConfig(f"noise_level must be in [0, 1], got {noise_level}")

    m, s = num_patients, slices_per_volume
    h, w = shape
    spec = MetaLabelSpec(num_partitions=num_partitions, num_patients=m)
    volumes = []
    for pid in range(m):
        rng = np.random.default_rng([seed, pid])
        phase = pid % 2
        # organ geometry varies mildly with position in the scan driving most
        # of it; appearance nuisances (contrast, background, distractor pose)
        # vary strongly across patients
        r_max = rng.uniform(0.28, 0.34) * min(h, w)
        if phase == 1:
            r_max *= 0.9
        ecc_y = rng.uniform(0.9, 1.1)
        ecc_x = rng.uniform(0.9, 1.1)
        cy0 = h / 2.0 + rng.uniform(-1.0, 1.0)
        cx0 = w / 2.0 + rng.uniform(-1.0, 1.0)
        drift_y = rng.uniform(-0.75, 0.75)
        drift_x = rng.uniform(-0.75, 0.75)
        contrast = rng.uniform(0.55, 0.90)
        bg_level = rng.uniform(0.05, 0.20)
        pixel_noise = 0.02
        d_angle = rng.uniform(0.0, 2.0 * np.pi)
        d_rmax = rng.uniform(0.14, 0.24) * min(h, w)
        d_contrast = contrast * rng.uniform(0.85, 1.0)

        offset = int(np.clip(np.round(rng.normal(0.0, noise_level * s / 5.0)), -s // 3, s // 3))
        n_empty = int(np.round(noise_level * 0.3 * s))
        lo_margin = int(rng.integers(0, n_empty + 1))
        hi_margin = n_empty - lo_margin

        slices = np.zeros((s, h, w))
        masks = np.zeros((s, h, w), dtype=np.int64)
        for si in range(s):
            frac = (si + 0.5) / s
            radius = r_max * np.sin(np.pi * frac) ** 0.9
            structured = lo_margin <= si < s - hi_margin
            axes = (radius * ecc_y, radius * ecc_x) if structured else None
            center = (cy0 + drift_y * (si / s - 0.5) * s / 4.0, cx0 + drift_x * (si / s - 0.5) * s / 4.0)
            # distractor peaks where the target vanishes (volume ends), sits
            # off-center, and tracks the target's intensity
            d_radius = d_rmax * (1.0 - np.sin(np.pi * frac)) ** 0.7
            d_center = (h / 2.0 + 0.33 * h * np.sin(d_angle), w / 2.0 + 0.33 * w * np.cos(d_angle))
            distractor = (d_center, (d_radius, d_radius), d_contrast)
            slices[si], masks[si] = _render_slice(
                shape, center, axes, contrast, bg_level, distractor, pixel_noise, rng
            )
        volumes.append(
            SynthVolume(patient_id=pid, phase=phase, slices=slices, masks=masks, misalignment_offset=offset)
        )

    n_test = max(1, int(round(test_fraction * m)))
    n_val = max(1, int(round(val_fraction * m)))
    if n_test + n_val >= m:
        raise InvalidConfig("splits leave no training patients")
    ids = list(range(m))
    splits = {
        "train": ids[: m - n_val - n_test],
        "val": ids[m - n_val - n_test : m - n_test],
        "test": ids[m - n_test :],
    }
    return SynthDataset(volumes=volumes, spec=spec, splits=splits, seed=seed, noise_level=noise_level)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    """Transform ranges for positive-pair creation; geometry is mask-safe."""

    flip_prob: float = 0.5
    max_rotate_deg: float = 10.0
    crop_scale: tuple[float, float] = (0.85, 1.0)
    gamma_range: tuple[float, float] = (0.8, 1.25)
    brightness_delta: float = 0.1

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(flip_prob=0.0, max_rotate_deg=0.0, crop_scale=(1.0, 1.0), gamma_range=(1.0, 1.0), brightness_delta=0.0)

    def _draw(self, rng, shape):
        h, w = shape
        flip = rng.random() < self.flip_prob
        angle = float(rng.uniform(-self.max_rotate_deg, self.max_rotate_deg))
        scale = float(rng.uniform(*self.crop_scale))
        ch, cw = max(2, round(h * scale)), max(2, round(w * scale))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        gamma = float(rng.uniform(*self.gamma_range))
        delta = float(rng.uniform(-self.brightness_delta, self.brightness_delta))
        return flip, angle, (y0, x0, ch, cw), gamma, delta

    def _geometry(self, img, flip, angle, crop, order):
        if flip:
            img = img[:, ::-1]
        if angle != 0.0:
            img = ndimage.rotate(img, angle, reshape=False, order=order, mode="nearest")
        y0, x0, ch, cw = crop
        h, w = img.shape
        if (ch, cw) != (h, w):
            window = img[y0 : y0 + ch, x0 : x0 + cw]
            rows = np.round(np.linspace(0, ch - 1, h)).astype(int)
            cols = np.round(np.linspace(0, cw - 1, w)).astype(int)
            img = window[rows][:, cols]
        return img

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        flip, angle, crop, gamma, delta = self._draw(rng, image.shape)
        out = self._geometry(np.asarray(image, dtype=np.float64), flip, angle, crop, order=1)
        out = np.clip(out, 0.0, 1.0) ** gamma + delta
        return np.clip(out, 0.0, 1.0)

    def apply_with_mask(self, image, mask, rng):
        """Same geometric draws for image and mask; intensity touches the image only."""
        flip, angle, crop, gamma, delta = self._draw(rng, image.shape)
        img = self._geometry(np.asarray(image, dtype=np.float64), flip, angle, crop, order=1)
        msk = self._geometry(np.asarray(mask, dtype=np.float64), flip, angle, crop, order=0)
        img = np.clip(np.clip(img, 0.0, 1.0) ** gamma + delta, 0.0, 1.0)
        return img, np.round(msk).astype(np.int64)


def augment_pair(image: np.ndarray, policy: AugmentationPolicy, seed) -> tuple[np.ndarray, np.ndarray]:
    """Two independent transform draws of one image, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    return policy.apply(image, rng), policy.apply(image, rng)


# ---------------------------------------------------------------------------
# batch assembly for the contrastive losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairBatch:
    """2N augmented images plus the pairing map and per-view meta-label vectors."""

    images: np.ndarray  # (2N, H, W)
    pair_of: np.ndarray  # (2N,)
    meta_labels: np.ndarray  # (K, 2N): partition, patient, phase


def interleaved_pairs(num_samples: int) -> np.ndarray:
    pair = np.arange(num_samples)
    pair[0::2] += 1
    pair[1::2] -= 1
    return pair


def per_image_labels(num_originals: int) -> np.ndarray:
    """Degenerate labels: each original image its own class (twin-only positives)."""
    return np.repeat(np.arange(num_originals), 2)[None, :]


def build_pair_batch(
    dataset: SynthDataset,
    refs: list[tuple[int, int]],
    policy: AugmentationPolicy,
    rng: np.random.Generator,
) -> PairBatch:
    """Augment each referenced slice twice and attach its three meta-labels."""
    images = []
    labels = np.zeros((3, 2 * len(refs)), dtype=np.int64)
    for t, (vi, si) in enumerate(refs):
        vol = dataset.volumes[vi]
        v1 = policy.apply(vol.slices[si], rng)
        v2 = policy.apply(vol.slices[si], rng)
        images.extend([v1, v2])
        labels[:, 2 * t] = labels[:, 2 * t + 1] = meta_labels_for(vol, si, dataset.spec)
    return PairBatch(
        images=np.stack(images), pair_of=interleaved_pairs(2 * len(refs)), meta_labels=labels
    )


def partition_overlap_stats(dataset: SynthDataset, threshold: float = 0.2) -> dict[str, float]:
    """Mask overlap (Dice) between cross-volume slice pairs sharing a partition label.

    Quantifies how noisy the partition meta-label is: misaligned or empty
    slices drag same-partition overlap down.
    """
    by_partition: dict[int, list[tuple[int, np.ndarray]]] = {}
    for vi, vol in enumerate(dataset.volumes):
        for si in range(vol.num_slices):
            part, _, _ = meta_labels_for(vol, si, dataset.spec)
            by_partition.setdefault(part, []).append((vi, vol.masks[si]))
    overlaps = []
    for entries in by_partition.values():
        for a in range(len(entries)):
            for b in range(a + 1, len(entries)):
                if entries[a][0] == entries[b][0]:
                    continue
                ma, mb = entries[a][1] > 0, entries[b][1] > 0
                denom = ma.sum() + mb.sum()
                overlaps.append(1.0 if denom == 0 else 2.0 * (ma & mb).sum() / denom)
    overlaps = np.asarray(overlaps)
    return {
        "mean_overlap": float(overlaps.mean()),
        "fraction_below": float((overlaps < threshold).mean()),
        "num_pairs": int(overlaps.size),
    }


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(dataset: SynthDataset, path) -> None:
    """Directory layout: manifest.json + one images/masks .npy pair per volume."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, vol in enumerate(dataset.volumes):
        img_name, mask_name = f"vol_{i:03d}_images.npy", f"vol_{i:03d}_masks.npy"
        np.save(root / img_name, vol.slices)
        np.save(root / mask_name, vol.masks)
        entries.append(
            {
                "patient_id": vol.patient_id,
                "phase": vol.phase,
                "misalignment_offset": vol.misalignment_offset,
                "images": img_name,
                "masks": mask_name,
            }
        )
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": dataset.seed,
        "noise_level": dataset.noise_level,
        "spec": {
            "num_partitions": dataset.spec.num_partitions,
            "num_patients": dataset.spec.num_patients,
            "num_phases": dataset.spec.num_phases,
        },
        "splits": dataset.splits,
        "volumes": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path) -> SynthDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"unsupported dataset format: {manifest.get('format_version')}")
    spec = MetaLabelSpec(**manifest["spec"])
    volumes = []
    for entry in manifest["volumes"]:
        volumes.append(
            SynthVolume(
                patient_id=entry["patient_id"],
                phase=entry["phase"],
                slices=np.load(root / entry["images"]),
                masks=np.load(root / entry["masks"]),
                misalignment_offset=entry["misalignment_offset"],
            )
        )
    return SynthDataset(
        volumes=volumes,
        spec=spec,
        splits={k: list(v) for k, v in manifest["splits"].items()},
        seed=manifest["seed"],
        noise_level=manifest["noise_level"],
    )
