from .interactions import (
    DatasetSplit, Interaction, amazon_label, chronological_split, movielens_label,
)
from .io import load_prepared, save_prepared
from .loaders import DataFormatError, LoadReport, load_amazon_books, load_movielens
from .synthetic import SyntheticConfig, generate_synthetic
from .text import TextTokenizer, prompt_tokens
from .transform import (
    HISTORY_LENGTH, DualModalitySample, FieldVocab, PreparedData, SampleArrays,
    build_histories, prepare, transform_modalities,
)

__all__ = [
    "DataFormatError", "DatasetSplit", "DualModalitySample", "FieldVocab", "HISTORY_LENGTH",
    "Interaction", "LoadReport", "PreparedData", "SampleArrays", "SyntheticConfig",
    "TextTokenizer", "amazon_label", "build_histories", "chronological_split",
    "generate_synthetic", "load_amazon_books", "load_movielens", "load_prepared",
    "movielens_label", "prepare", "prompt_tokens", "save_prepared", "transform_modalities",
]
