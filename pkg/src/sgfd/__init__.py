"""Saliency-guided feature decorrelation for reinforcement learning.

Random-Fourier-feature independence scores, sample reweighting guided by
an environment classifier's saliency, and a soft actor-critic whose
policy loss uses the learned sample weights.
"""

from sgfd._errors import DivergenceError, InsufficientData, InvalidArgument, UndefinedCorrelation
from sgfd.estimators import EnvironmentClassifier, RandomFourierFeatures, SaliencyGuidedReweighter

__version__ = "0.1.0"

__all__ = [
    "DivergenceError",
    "EnvironmentClassifier",
    "InsufficientData",
    "InvalidArgument",
    "RandomFourierFeatures",
    "SaliencyGuidedReweighter",
    "UndefinedCorrelation",
]
