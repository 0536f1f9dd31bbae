"""Two-view hierarchical leaf classification with Siamese metric networks."""
from .dataset import DatasetSplit, LeafSample, TaxonRecord, Taxonomy, load_split, load_taxonomy
from .errors import (FingerprintMismatch, FormatError, MissingFileError, NoLeafDetected, ParseError,
                     TrainingDiverged, TwoViewError, ValidationError)
from .hclassifier import Classification, classify
from .metricnet import SiameseModel, TrainConfig
from .preprocess import PreprocessConfig, ViewPair, make_views
from .refstore import ReferenceSet

__version__ = "0.1.0"

__all__ = [
    "Classification", "DatasetSplit", "FingerprintMismatch", "FormatError", "LeafSample",
    "MissingFileError", "NoLeafDetected", "ParseError", "PreprocessConfig", "ReferenceSet",
    "SiameseModel", "TaxonRecord", "Taxonomy", "TrainConfig", "TrainingDiverged", "TwoViewError",
    "ValidationError", "ViewPair", "classify", "load_split", "load_taxonomy", "make_views",
]
