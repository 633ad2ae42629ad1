import numpy as np
import pytest

from spcl.contrastive import AugmentedBatch


def interleaved_pairs(num_samples: int) -> np.ndarray:
    """Pairing map [1, 0, 3, 2, ...]: views of original t sit at 2t, 2t+1."""
    pair = np.arange(num_samples)
    pair[0::2] += 1
    pair[1::2] -= 1
    return pair


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    z = rng.standard_normal((n, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_batch(
    rng: np.random.Generator,
    num_originals: int,
    dim: int = 8,
    num_classes: int | list | None = None,
    num_labels: int = 1,
) -> AugmentedBatch:
    """Random unit-row batch; labels drawn per original image and copied to both views."""
    n2 = 2 * num_originals
    if num_classes is None:
        num_classes = [max(2, num_originals // 2)] * num_labels
    elif np.ndim(num_classes) == 0:
        num_classes = [int(num_classes)] * num_labels
    labels = np.zeros((len(num_classes), n2), dtype=np.int64)
    for k, ck in enumerate(num_classes):
        per_original = rng.integers(0, ck, size=num_originals)
        labels[k] = np.repeat(per_original, 2)
    return AugmentedBatch(
        embeddings=unit_rows(rng, n2, dim),
        pair_of=interleaved_pairs(n2),
        meta_labels=labels,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
