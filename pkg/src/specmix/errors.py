"""Exception hierarchy shared across the toolkit."""


class SpecmixError(Exception):
    """Base class for all toolkit errors."""


class MalformedSpectrum(SpecmixError):
    """Emission spectrum samples are unusable (non-increasing wavelengths, too few points, ...)."""


class NoOverlap(SpecmixError):
    """Spectrum and band layout share no wavelength support; normalization undefined."""


class ShapeMismatch(SpecmixError):
    """Array shapes of two operands disagree."""


class DegenerateClustering(SpecmixError):
    """Requested more clusters than distinct spectra."""


class InvalidSpec(SpecmixError):
    """Phantom or sweep specification violates its invariants."""


class InvalidPartition(SpecmixError):
    """Band groups do not form a contiguous disjoint cover of the band axis."""


class ZeroPrediction(SpecmixError):
    """Prediction is identically zero; scale fit undefined."""


class DegenerateGT(SpecmixError):
    """Ground-truth image has zero dynamic range."""


class DegenerateInput(SpecmixError):
    """Constant input where variation is required (e.g. Pearson correlation)."""


class TooSmall(SpecmixError):
    """Image below the minimum size supported by the metric."""


class TooFewPatches(SpecmixError):
    """Image cannot be tiled into enough patches for background estimation."""


class ContainerError(SpecmixError):
    """Base class for array-container I/O failures."""


class BadMagic(ContainerError):
    """Container file does not start with the expected magic tag."""


class TruncatedPayload(ContainerError):
    """Container payload is shorter than the header dims imply."""


class UnsupportedDtype(ContainerError):
    """Container dtype tag is not one of the supported codes."""


class HeaderMismatch(ContainerError):
    """Supplied header is inconsistent with the tensor being written."""


class ConfigError(SpecmixError):
    """Configuration document failed validation (unknown keys, bad values)."""
