"""Synthetic ground truth and the acquisition model: structured phantoms,
photon shot noise, detector read noise, offset, quantization, band rebinning
and rigid spectral shifts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import BandLayout, ConcentrationMap, EmissionSpectrum, MixingMatrix, SpectralImage, mix_forward
from .errors import ConfigError, InvalidPartition, InvalidSpec

PHANTOM_KINDS = ("blobs", "filaments", "rings", "mixed")

# Default gain calibrated so a 20 ms exposure of the reference blob phantom
# lands at spectral SNR ~40-60 with the default read noise (see tests).
DEFAULT_GAIN = 80.0


@dataclass(frozen=True)
class AcquisitionConfig:
    """Detector model: photons = gain * exposure * concentration, then
    Poisson shot noise, Gaussian read noise, offset, optional quantization.

    ``noiseless`` replaces the Poisson draw by its mean; read noise and
    quantization remain governed by their own fields.
    """

    exposure_ms: float
    photons_per_unit_per_ms: float = DEFAULT_GAIN
    read_noise_sigma: float = 2.0
    offset: float = 100.0
    quantize: bool = False
    bit_depth: int = 16
    noiseless: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.exposure_ms <= 0:
            raise ConfigError("exposure_ms must be positive")
        if self.photons_per_unit_per_ms <= 0:
            raise ConfigError("photons_per_unit_per_ms must be positive")
        if self.read_noise_sigma < 0 or self.offset < 0:
            raise ConfigError("read_noise_sigma and offset must be non-negative")
        if self.bit_depth not in (8, 12, 16):
            raise ConfigError("bit_depth must be one of 8, 12, 16")
        if 2**self.bit_depth - 1 < self.offset:
            raise ConfigError("offset exceeds the bit-depth maximum")

    @property
    def gain(self) -> float:
        return self.photons_per_unit_per_ms * self.exposure_ms

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "AcquisitionConfig":
        try:
            return cls(**_checked_fields(cls, doc))
        except TypeError as exc:
            raise ConfigError(f"AcquisitionConfig: {exc}") from exc


@dataclass(frozen=True)
class PhantomSpec:
    """Structured multi-channel ground-truth description.

    ``colocalization`` is the fraction of each later channel's objects placed
    on the mass of the previous channel (1.0 nests channel j+1's support
    inside channel j's).
    """

    kind: str
    shape: tuple[int, int, int]  # (Z, Y, X)
    n_channels: int
    n_objects: int = 40
    feature_size: float = 3.0
    colocalization: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if self.kind not in PHANTOM_KINDS:
            raise InvalidSpec(f"kind must be one of {PHANTOM_KINDS}, got {self.kind!r}")
        z, y, x = self.shape
        if y < 8 or x < 8 or z < 1 or (z != 1 and z < 8):
            raise InvalidSpec("spatial dims must be >= 8 per axis (Z = 1 allowed for 2D)")
        if self.n_channels < 1:
            raise InvalidSpec("n_channels must be >= 1")
        if self.n_objects < 0:
            raise InvalidSpec("n_objects must be >= 0")
        if self.feature_size <= 0:
            raise InvalidSpec("feature_size must be positive")
        if not 0.0 <= self.colocalization <= 1.0:
            raise InvalidSpec("colocalization must lie in [0, 1]")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["shape"] = list(self.shape)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        fields = _checked_fields(cls, doc)
        if "shape" in fields:
            fields["shape"] = tuple(fields["shape"])
        try:
            return cls(**fields)
        except TypeError as exc:
            raise ConfigError(f"PhantomSpec: {exc}") from exc


def _checked_fields(cls, doc: dict) -> dict:
    allowed = set(cls.__dataclass_fields__)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return dict(doc)


def _stamp_gaussian(channel: np.ndarray, center, sigma: float, amp: float) -> None:
    z0, y0, x0 = center
    Z, Y, X = channel.shape
    r = int(np.ceil(4 * sigma))
    ys = slice(max(0, int(y0) - r), min(Y, int(y0) + r + 1))
    xs = slice(max(0, int(x0) - r), min(X, int(x0) + r + 1))
    zs = slice(max(0, int(z0) - r), min(Z, int(z0) + r + 1)) if Z > 1 else slice(0, 1)
    zz, yy, xx = np.meshgrid(
        np.arange(zs.start, zs.stop), np.arange(ys.start, ys.stop), np.arange(xs.start, xs.stop),
        indexing="ij",
    )
    d2 = (yy - y0) ** 2 + (xx - x0) ** 2
    if Z > 1:
        d2 = d2 + (zz - z0) ** 2
    channel[zs, ys, xs] += amp * np.exp(-d2 / (2.0 * sigma**2))


def _stamp_ring(channel: np.ndarray, center, radius: float, thickness: float, amp: float) -> None:
    z0, y0, x0 = center
    Z, Y, X = channel.shape
    r = int(np.ceil(radius + 4 * thickness))
    ys = slice(max(0, int(y0) - r), min(Y, int(y0) + r + 1))
    xs = slice(max(0, int(x0) - r), min(X, int(x0) + r + 1))
    zs = slice(max(0, int(z0) - r), min(Z, int(z0) + r + 1)) if Z > 1 else slice(0, 1)
    zz, yy, xx = np.meshgrid(
        np.arange(zs.start, zs.stop), np.arange(ys.start, ys.stop), np.arange(xs.start, xs.stop),
        indexing="ij",
    )
    d2 = (yy - y0) ** 2 + (xx - x0) ** 2
    if Z > 1:
        d2 = d2 + (zz - z0) ** 2
    dist = np.sqrt(d2)
    channel[zs, ys, xs] += amp * np.exp(-((dist - radius) ** 2) / (2.0 * thickness**2))


def _walk_filament(rng: np.random.Generator, shape, length: int) -> np.ndarray:
    """Unit-step random walk with slowly drifting direction; returns (N, 3) points."""
    Z, Y, X = shape
    pos = np.array([rng.uniform(0, Z) if Z > 1 else 0.5, rng.uniform(0, Y), rng.uniform(0, X)])
    theta = rng.uniform(0, 2 * np.pi)
    phi = rng.uniform(-0.3, 0.3) if Z > 1 else 0.0
    pts = np.empty((length, 3))
    for i in range(length):
        step = np.array([np.sin(phi), np.cos(phi) * np.sin(theta), np.cos(phi) * np.cos(theta)])
        pos = pos + step
        theta += rng.normal(0.0, 0.25)
        if Z > 1:
            phi += rng.normal(0.0, 0.1)
        pos[0] = np.clip(pos[0], 0, Z - 1e-3)
        pos[1] = np.clip(pos[1], 0, Y - 1e-3)
        pos[2] = np.clip(pos[2], 0, X - 1e-3)
        pts[i] = pos
    return pts


def generate_phantom(spec: PhantomSpec) -> ConcentrationMap:
    """Deterministic structured phantom; non-negative everywhere.

    Colocalized objects are rendered as compact spots placed on intensity-
    sampled locations of the previous channel, so at fraction 1.0 virtually
    all of a channel's mass falls inside its predecessor's support.
    """
    rng = np.random.default_rng(np.uint64(spec.rng_seed))
    Z, Y, X = spec.shape
    data = np.zeros((spec.n_channels, Z, Y, X))
    kinds = [spec.kind] * spec.n_channels
    if spec.kind == "mixed":
        base = ("blobs", "filaments", "rings")
        kinds = [base[j % 3] for j in range(spec.n_channels)]

    for j in range(spec.n_channels):
        channel = data[j]
        n_coloc = int(round(spec.colocalization * spec.n_objects)) if j > 0 else 0
        n_free = spec.n_objects - n_coloc

        if kinds[j] == "filaments" and n_free > 0:
            hist = np.zeros((Z, Y, X))
            length = max(Y, X)
            for _ in range(n_free):
                amp = rng.uniform(0.5, 1.0)
                pts = _walk_filament(rng, spec.shape, length)
                idx = np.floor(pts).astype(int)
                np.add.at(hist, (idx[:, 0], idx[:, 1], idx[:, 2]), amp)
            sig = spec.feature_size / 2.0
            channel += gaussian_filter(hist, sigma=(0 if Z == 1 else sig, sig, sig))
        else:
            for _ in range(n_free):
                amp = rng.uniform(0.5, 1.0)
                center = (
                    rng.uniform(0, Z) if Z > 1 else 0.0,
                    rng.uniform(0, Y),
                    rng.uniform(0, X),
                )
                if kinds[j] == "blobs":
                    _stamp_gaussian(channel, center, spec.feature_size, amp)
                elif kinds[j] == "rings":
                    radius = rng.uniform(2.0, 6.0) * spec.feature_size
                    _stamp_ring(channel, center, radius, spec.feature_size / 2.0, amp)

        if n_coloc > 0:
            parent = data[j - 1]
            flat = parent.reshape(-1)
            total = flat.sum()
            if total > 0:
                picks = rng.choice(flat.size, size=n_coloc, p=flat / total)
                for pick in picks:
                    pz, py, px = np.unravel_index(pick, parent.shape)
                    jitter = rng.uniform(-0.5, 0.5, size=3)
                    center = (
                        pz + (jitter[0] if Z > 1 else 0.0),
                        py + jitter[1],
                        px + jitter[2],
                    )
                    amp = rng.uniform(0.5, 1.0)
                    _stamp_gaussian(channel, center, 0.4 * spec.feature_size, amp)

    return ConcentrationMap(data, meta={"phantom": spec.to_dict()})


def _band_generator(seed: int, band: int) -> np.random.Generator:
    """Counter-based substream for one spectral band: key = (seed, band)."""
    key = np.array([np.uint64(seed), np.uint64(band)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_acquisition(u: ConcentrationMap, m: MixingMatrix, acq: AcquisitionConfig) -> SpectralImage:
    """Acquire a spectral image of ``u`` through ``m`` with the detector model.

    Expected photons per band/voxel are ``gain * (MU)``; each band draws from
    its own counter-based RNG substream, so output is reproducible and
    independent of any band-level parallel schedule.
    """
    clean = mix_forward(u, m)
    lam = clean.data * acq.gain
    out = np.empty_like(lam)
    for ell in range(lam.shape[0]):
        rng = _band_generator(acq.rng_seed, ell)
        plane = lam[ell]
        if acq.noiseless:
            counts = plane.copy()
        else:
            counts = rng.poisson(plane).astype(float)
        if acq.read_noise_sigma > 0:
            counts = counts + rng.normal(0.0, acq.read_noise_sigma, size=plane.shape)
        out[ell] = counts + acq.offset
    if acq.quantize:
        out = np.clip(np.rint(out), 0, 2**acq.bit_depth - 1)
    meta = dict(u.meta)
    meta["acquisition"] = acq.to_dict()
    return SpectralImage(out, m.layout, meta)


def even_groups(n_bands: int, n_groups: int) -> list[list[int]]:
    """Split 0..n_bands-1 into n_groups contiguous runs of near-equal size."""
    if not 1 <= n_groups <= n_bands:
        raise InvalidPartition(f"cannot split {n_bands} bands into {n_groups} groups")
    return [list(g) for g in np.array_split(np.arange(n_bands), n_groups)]


def rebin_bands(s: SpectralImage, groups: Sequence[Sequence[int]]) -> SpectralImage:
    """Sum contiguous band groups; per-voxel total intensity is preserved."""
    flat = [int(i) for g in groups for i in g]
    if flat != list(range(s.n_bands)) or any(len(g) == 0 for g in groups):
        raise InvalidPartition("groups must cover all bands exactly, in order, without gaps")
    out = np.stack([s.data[list(g)].sum(axis=0) for g in groups])
    layout = s.band_layout.merged(groups) if s.band_layout is not None else None
    return SpectralImage(out, layout, dict(s.meta))


def shift_spectrum(spec: EmissionSpectrum, delta_nm: float) -> EmissionSpectrum:
    """Rigid translation of the wavelength axis; intensities unchanged."""
    return spec.shifted(delta_nm)
