"""Online continual-learning person re-identification for robot person following."""

__version__ = "0.1.0"

from .classifier import PartRidgeClassifier, RidgeClassifier
from .core import BBox, Observation, PartFeatures, PartScheme, part_distance
from .extractor import ExtractorParams, PartEmbedder, TrainBatch
from .runner import RunConfig, compare, run

__all__ = [
    "BBox", "ExtractorParams", "Observation", "PartEmbedder", "PartFeatures", "PartRidgeClassifier",
    "PartScheme", "RidgeClassifier", "RunConfig", "TrainBatch", "compare", "part_distance", "run",
]
