"""
Detector models: ViT, noise-aware CNN and a linear baseline.
"""

from engine import functional as F
from engine.tensor import Tensor, as_tensor
from models.base import BONA_FIDE, MORPH, Classifier  # noqa: F401
from models.linear import LinearClassifier, LinearConfig  # noqa: F401
from models.noise_aware import NoiseAwareClassifier, NoiseAwareConfig  # noqa: F401
from models.vit import ViTClassifier, ViTConfig  # noqa: F401


def extract_features(model: Classifier, images) -> Tensor:
    """Penultimate-layer activation; ``model.head(features)`` reproduces the logits."""
    images = as_tensor(images)
    if images.ndim == 3:
        images = F.reshape(images, (1,) + images.shape)
    return model.features(images)
