from __future__ import annotations

from unicontext import metadata as _metadata_module
from unicontext.model import DecoderModel, ModelConfig, build_model
from unicontext.synthdata import DataConfig, Dataset, build_dataset
from unicontext.vocab import Segment, Vocabulary, build_vocabulary

__all__ = [
    "DataConfig",
    "Dataset",
    "DecoderModel",
    "ModelConfig",
    "Segment",
    "Vocabulary",
    "build_dataset",
    "build_model",
    "build_vocabulary",
]


_metadata = _metadata_module.extract_metadata()
__author__ = _metadata["author"]
__author_email__ = _metadata["email"]
__license__ = _metadata["license"]
__url__ = _metadata["url"]
__version__ = _metadata["version"]
