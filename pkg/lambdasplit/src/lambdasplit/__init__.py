"""lambdasplit: toy-scale hierarchical variational spectral unmixing.

Trains self-supervised on spectral containers produced by the unmixing
toolkit (SPMX1 + mixing CSV) and predicts concentration maps by averaging
posterior samples with inner-tiled inference.
"""

__version__ = "0.1.0"

from .model import LadderVAE, ModelConfig, SpectralMixerLayer, elbo_loss, gaussian_kl, spectral_mse
from .training import build_model, load_checkpoint, save_checkpoint, train
from .inference import predict_container, predict_mmse

__all__ = [
    "LadderVAE",
    "ModelConfig",
    "SpectralMixerLayer",
    "elbo_loss",
    "gaussian_kl",
    "spectral_mse",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "build_model",
    "predict_mmse",
    "predict_container",
    "__version__",
]
