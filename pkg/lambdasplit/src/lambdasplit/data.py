"""Dataset handling: spectral containers plus the mixing CSV, global
mean-std normalization, and seeded random patch sampling."""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np

from .containers import read_container, read_mixing_csv


class DatasetEmpty(Exception):
    pass


@dataclass
class SpectralDataset:
    """2D spectral images (each [L, H, W]) sharing one mixing matrix.

    ``mean``/``std`` are single global scalars over the training images, so
    normalization preserves the relative intensity between spectral bands.
    """

    images: list[np.ndarray]
    mixing: np.ndarray  # (L, F)
    names: list[str]
    mean: float
    std: float

    @property
    def n_bands(self) -> int:
        return self.mixing.shape[0]

    @property
    def n_fluors(self) -> int:
        return self.mixing.shape[1]

    def normalized(self, image: np.ndarray) -> np.ndarray:
        return (image - self.mean) / self.std


def load_dataset(directory, pattern: str = "*.spmx") -> SpectralDataset:
    """Read every spectral container in ``directory`` plus ``mixing.csv``.
    Ground truth is not required: training is self-supervised. The detector
    offset recorded at acquisition time is subtracted so intensities are
    photon-proportional."""
    paths = sorted(glob.glob(os.path.join(directory, pattern)))
    images = []
    for path in paths:
        tensor, header = read_container(path)
        if header.get("axes") != ["L", "Z", "Y", "X"]:
            continue  # skip concentration maps and other containers
        data = tensor.astype(np.float64)
        if data.shape[1] != 1:
            raise ValueError(f"{path}: only 2D (Z=1) inputs are supported")
        offset = float(header.get("meta", {}).get("acquisition", {}).get("offset", 0.0))
        images.append(data[:, 0] - offset)
    if not images:
        raise DatasetEmpty(f"no spectral containers under {directory}")
    mixing, names = read_mixing_csv(os.path.join(directory, "mixing.csv"))
    pooled_sum = sum(float(img.sum()) for img in images)
    pooled_count = sum(img.size for img in images)
    mean = pooled_sum / pooled_count
    pooled_sq = sum(float(((img - mean) ** 2).sum()) for img in images)
    std = float(np.sqrt(pooled_sq / pooled_count))
    if std == 0.0:
        raise DatasetEmpty("dataset has zero variance")
    return SpectralDataset(images, mixing, names, mean, std)


def sample_patches(
    dataset: SpectralDataset,
    image_indices: list[int],
    n_patches: int,
    patch: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """(n, L, patch, patch) stack of normalized random crops."""
    out = np.empty((n_patches, dataset.n_bands, patch, patch), dtype=np.float32)
    for i in range(n_patches):
        img = dataset.images[int(rng.choice(image_indices))]
        _, h, w = img.shape
        if h < patch or w < patch:
            raise ValueError(f"image {img.shape} smaller than patch {patch}")
        y = int(rng.integers(0, h - patch + 1))
        x = int(rng.integers(0, w - patch + 1))
        out[i] = dataset.normalized(img[:, y : y + patch, x : x + patch])
    return out
