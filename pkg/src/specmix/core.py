"""Core data model: spectral images, concentration maps, emission spectra,
band layouts, the linear mixing operator and its conditioning analysis.

Images are stored band/channel-first: spectral data as ``[L, Z, Y, X]`` and
concentration data as ``[F, Z, Y, X]``. 2D images use ``Z = 1``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import MalformedSpectrum, NoOverlap, ShapeMismatch

# Singular values below RANK_TOL * sigma_max are treated as exact zeros.
RANK_TOL = 1e-12


@dataclass(frozen=True)
class BandLayout:
    """Ordered, pairwise-disjoint wavelength intervals ``[lo, hi)`` in nm."""

    bands: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.bands) < 1:
            raise ValueError("band layout needs at least one band")
        clean = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        object.__setattr__(self, "bands", clean)
        for lo, hi in clean:
            if not hi > lo:
                raise ValueError(f"band [{lo}, {hi}) has non-positive width")
        for (_, hi), (lo, _) in zip(clean, clean[1:]):
            if lo < hi:
                raise ValueError("bands must be sorted ascending and disjoint")

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @classmethod
    def equispaced(cls, lo_nm: float, hi_nm: float, n: int) -> "BandLayout":
        edges = np.linspace(lo_nm, hi_nm, n + 1)
        return cls(tuple((edges[i], edges[i + 1]) for i in range(n)))

    def merged(self, groups: Sequence[Sequence[int]]) -> "BandLayout":
        """Merge contiguous groups of band indices into single intervals."""
        merged = []
        for g in groups:
            merged.append((self.bands[g[0]][0], self.bands[g[-1]][1]))
        return BandLayout(tuple(merged))

    def to_json(self) -> str:
        return json.dumps({"bands": [[lo, hi] for lo, hi in self.bands]})

    @classmethod
    def from_json(cls, text: str) -> "BandLayout":
        doc = json.loads(text)
        return cls(tuple((b[0], b[1]) for b in doc["bands"]))


@dataclass(frozen=True)
class EmissionSpectrum:
    """Tabulated emission profile of one fluorophore.

    The continuous profile is the piecewise-linear interpolant of the
    samples, taken as zero outside the tabulated range.
    """

    wavelengths: np.ndarray  # nm, strictly increasing
    intensities: np.ndarray  # relative units, >= 0
    name: str = ""

    def __post_init__(self):
        w = np.asarray(self.wavelengths, dtype=float)
        i = np.asarray(self.intensities, dtype=float)
        object.__setattr__(self, "wavelengths", w)
        object.__setattr__(self, "intensities", i)
        if w.ndim != 1 or i.ndim != 1 or w.size != i.size:
            raise MalformedSpectrum(f"{self.name}: samples must be two equal-length 1-D arrays")
        if w.size < 2:
            raise MalformedSpectrum(f"{self.name}: need at least 2 samples")
        if not np.all(np.diff(w) > 0):
            raise MalformedSpectrum(f"{self.name}: wavelengths must be strictly increasing")
        if np.any(i < 0):
            raise MalformedSpectrum(f"{self.name}: intensities must be non-negative")
        if not np.any(i > 0):
            raise MalformedSpectrum(f"{self.name}: intensities are all zero")

    def shifted(self, delta_nm: float) -> "EmissionSpectrum":
        """Rigid translation of the wavelength axis; shape-preserving."""
        return EmissionSpectrum(self.wavelengths + float(delta_nm), self.intensities.copy(), self.name)

    @classmethod
    def lognormal(
        cls,
        name: str,
        peak_nm: float,
        fwhm_nm: float,
        skew: float = 1.25,
        lo_nm: float | None = None,
        hi_nm: float | None = None,
        step_nm: float = 1.0,
    ) -> "EmissionSpectrum":
        """Asymmetric log-normal lineshape with peak ``peak_nm``, full width at
        half maximum ``fwhm_nm`` and asymmetry ``skew`` (> 1 tails red-ward),
        tabulated on a regular grid. Mimics broad fluorescent-protein emission.
        """
        if skew <= 0 or skew == 1.0:
            raise ValueError("skew must be positive and != 1")
        if lo_nm is None:
            lo_nm = peak_nm - 3.0 * fwhm_nm
        if hi_nm is None:
            hi_nm = peak_nm + 5.0 * fwhm_nm
        lam = np.arange(lo_nm, hi_nm + 0.5 * step_nm, step_nm, dtype=float)
        arg = (lam - peak_nm) * (skew**2 - 1.0) / (fwhm_nm * skew) + 1.0
        vals = np.zeros_like(lam)
        ok = arg > 0
        c = np.log(2.0) / np.log(skew) ** 2
        vals[ok] = np.exp(-c * np.log(arg[ok]) ** 2)
        return cls(lam, vals, name)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["wavelength_nm", "intensity"])
            for w, i in zip(self.wavelengths, self.intensities):
                writer.writerow([repr(float(w)), repr(float(i))])

    @classmethod
    def from_csv(cls, path, name: str | None = None) -> "EmissionSpectrum":
        with open(path, "r", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:2]] != ["wavelength_nm", "intensity"]:
                raise MalformedSpectrum(f"{path}: expected header 'wavelength_nm,intensity'")
            rows = [(float(r[0]), float(r[1])) for r in reader if r]
        if name is None:
            import os

            name = os.path.splitext(os.path.basename(str(path)))[0]
        w = np.array([r[0] for r in rows])
        i = np.array([r[1] for r in rows])
        return cls(w, i, name)


@dataclass
class SpectralImage:
    """Measured (or simulated) multi-band intensity image, ``data[L, Z, Y, X]``."""

    data: np.ndarray
    band_layout: BandLayout | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeMismatch(f"spectral data must be [L, Z, Y, X], got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeMismatch("all dimensions must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("spectral image contains non-finite values")
        if self.band_layout is not None and self.band_layout.n_bands != self.data.shape[0]:
            raise ShapeMismatch(
                f"layout has {self.band_layout.n_bands} bands, data has {self.data.shape[0]}"
            )

    @property
    def n_bands(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def flat(self) -> np.ndarray:
        """View of the data as an ``[L, P]`` matrix, P = Z*Y*X."""
        return self.data.reshape(self.n_bands, -1)


@dataclass
class ConcentrationMap:
    """Per-voxel fluorophore abundances, ``data[F, Z, Y, X]``."""

    data: np.ndarray
    labels: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeMismatch(f"concentration data must be [F, Z, Y, X], got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeMismatch("all dimensions must be >= 1")
        if not self.labels:
            self.labels = [f"fluor_{j + 1}" for j in range(self.data.shape[0])]
        if len(self.labels) != self.data.shape[0]:
            raise ShapeMismatch("labels length must equal channel count")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def flat(self) -> np.ndarray:
        return self.data.reshape(self.n_channels, -1)


@dataclass(frozen=True)
class MixingMatrix:
    """L x F matrix of discretized, column-wise l1-normalized emission spectra."""

    m: np.ndarray
    names: tuple[str, ...] = ()
    layout: BandLayout | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        object.__setattr__(self, "m", m)
        if m.ndim != 2:
            raise ValueError("mixing matrix must be 2-D")
        if np.any(m < 0):
            raise ValueError("mixing matrix entries must be non-negative")
        colsums = m.sum(axis=0)
        if np.any(np.abs(colsums - 1.0) > 1e-9):
            raise ValueError(f"columns must be l1-normalized, sums = {colsums}")
        if self.names and len(self.names) != m.shape[1]:
            raise ValueError("names length must equal column count")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"fluor_{j + 1}" for j in range(m.shape[1])))
        if self.layout is not None and self.layout.n_bands != m.shape[0]:
            raise ShapeMismatch("layout band count must equal row count")

    @property
    def n_bands(self) -> int:
        return self.m.shape[0]

    @property
    def n_fluorophores(self) -> int:
        return self.m.shape[1]


@dataclass(frozen=True)
class ConditioningReport:
    """Singular spectrum of a mixing matrix and the derived stability figures.

    ``kappa`` is sigma_max / sigma_min and ``amplification_bound`` is
    1 / sigma_F, the factor by which measurement-noise energy can be amplified
    in the least-squares estimate. Both are +inf for rank-deficient matrices.
    """

    singular_values: np.ndarray  # descending, length F
    kappa: float
    amplification_bound: float
    rank_deficient: bool

    def to_dict(self) -> dict:
        def enc(x: float):
            return "inf" if np.isinf(x) else float(x)

        return {
            "singular_values": [float(s) for s in self.singular_values],
            "kappa": enc(self.kappa),
            "amplification_bound": enc(self.amplification_bound),
            "rank_deficient": bool(self.rank_deficient),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _band_integral(w: np.ndarray, inten: np.ndarray, lo: float, hi: float) -> float:
    """Integral over [lo, hi] of the piecewise-linear interpolant (zero outside
    the tabulated range). Exact trapezoid on the merged breakpoint grid.
    """
    a = max(lo, float(w[0]))
    b = min(hi, float(w[-1]))
    if b <= a:
        return 0.0
    inner = w[(w > a) & (w < b)]
    grid = np.concatenate(([a], inner, [b]))
    vals = np.interp(grid, w, inten)
    return float(np.trapezoid(vals, grid))


def discretize_spectrum(spec: EmissionSpectrum, layout: BandLayout) -> np.ndarray:
    """Band-average an emission profile and l1-normalize the result.

    Entry ``l`` is the mean of the interpolated profile over band ``l``
    (trapezoidal integral divided by band width); the column is then scaled
    to sum to 1.

    Raises NoOverlap when the spectrum deposits no intensity in any band.
    """
    col = np.array(
        [_band_integral(spec.wavelengths, spec.intensities, lo, hi) / (hi - lo) for lo, hi in layout.bands]
    )
    total = col.sum()
    if total <= 0.0:
        raise NoOverlap(f"{spec.name}: spectrum deposits no intensity in any band")
    return col / total


def build_mixing_matrix(specs: Sequence[EmissionSpectrum], layout: BandLayout) -> MixingMatrix:
    """Column-stack the discretized spectra of all fluorophores."""
    if len(specs) < 1:
        raise ValueError("need at least one spectrum")
    cols = []
    for spec in specs:
        try:
            cols.append(discretize_spectrum(spec, layout))
        except (NoOverlap, MalformedSpectrum) as exc:
            raise type(exc)(f"fluorophore '{spec.name}': {exc}") from exc
    m = np.stack(cols, axis=1)
    return MixingMatrix(m, tuple(s.name or f"fluor_{j + 1}" for j, s in enumerate(specs)), layout)


def mix_forward(u: ConcentrationMap, m: MixingMatrix) -> SpectralImage:
    """Noise-free forward model: ``out[l, p] = sum_j m[l, j] * u[j, p]``.

    Column normalization makes the per-voxel band sum equal the per-voxel
    channel sum (total-intensity preservation). The accumulation loops over
    channels in ascending order so results are independent of any spatial
    partitioning.
    """
    if m.n_fluorophores != u.n_channels:
        raise ShapeMismatch(f"matrix has {m.n_fluorophores} columns, map has {u.n_channels} channels")
    out = np.zeros((m.n_bands,) + u.spatial_shape, dtype=np.result_type(u.data, float))
    for j in range(m.n_fluorophores):
        out += m.m[:, j].reshape(-1, 1, 1, 1) * u.data[j]
    return SpectralImage(out, m.layout, dict(u.meta))


def singular_spectrum(m: MixingMatrix) -> np.ndarray:
    """All F singular values of the matrix, descending, zero-padded when L < F."""
    s = np.linalg.svd(m.m, compute_uv=False)
    if s.size < m.n_fluorophores:
        s = np.concatenate([s, np.zeros(m.n_fluorophores - s.size)])
    return s


def analyze_conditioning(m: MixingMatrix) -> ConditioningReport:
    """Singular values, condition number and the noise-amplification bound.

    Rank deficiency (sigma_F < RANK_TOL * sigma_max) is reported, not raised:
    kappa and the bound become +inf.
    """
    s = singular_spectrum(m)
    smax = float(s[0])
    smin = float(s[-1])
    deficient = smin < RANK_TOL * smax or smax == 0.0
    kappa = np.inf if deficient else smax / smin
    bound = np.inf if deficient else 1.0 / smin
    return ConditioningReport(s, kappa, bound, deficient)
