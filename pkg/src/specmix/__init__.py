"""specmix: spectral unmixing toolkit for fluorescence microscopy.

Subpackages:
  core       - data types, forward mixing model, conditioning analysis
  solvers    - the seven classical unmixing procedures
  simulate   - phantom generation and the acquisition/noise model
  metrics    - range-invariant image-quality metrics
  containers - bit-exact array container and CSV/JSON interchange
  bench      - experiment sweeps, ranking, report tables
  figures    - matplotlib rendering of benchmark reports
  cli        - the ``specmix`` command-line entry point
"""

__version__ = "0.1.0"

from .core import (
    BandLayout,
    ConcentrationMap,
    ConditioningReport,
    EmissionSpectrum,
    MixingMatrix,
    SpectralImage,
    analyze_conditioning,
    build_mixing_matrix,
    discretize_spectrum,
    mix_forward,
)

__all__ = [
    "BandLayout",
    "ConcentrationMap",
    "ConditioningReport",
    "EmissionSpectrum",
    "MixingMatrix",
    "SpectralImage",
    "analyze_conditioning",
    "build_mixing_matrix",
    "discretize_spectrum",
    "mix_forward",
    "__version__",
]
