import numpy as np
import pytest

from specmix.core import ConcentrationMap, MixingMatrix, SpectralImage, analyze_conditioning


def random_mixing(rng, n_bands, n_fluors, max_kappa=None):
    """Random strictly-positive l1-normalized matrix, optionally conditioned."""
    while True:
        raw = rng.uniform(0.0, 1.0, size=(n_bands, n_fluors)) + 0.1
        m = MixingMatrix(raw / raw.sum(axis=0))
        if max_kappa is None or analyze_conditioning(m).kappa < max_kappa:
            return m


def voxels_image(values) -> SpectralImage:
    """Pack an (L, P) array of voxel spectra as a 1 x 1 x P spectral image."""
    arr = np.asarray(values, dtype=float)
    return SpectralImage(arr.reshape(arr.shape[0], 1, 1, -1))


def voxels_map(values) -> ConcentrationMap:
    arr = np.asarray(values, dtype=float)
    return ConcentrationMap(arr.reshape(arr.shape[0], 1, 1, -1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
