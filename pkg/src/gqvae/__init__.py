"""GQ-VAE: a learned, discrete, variable-length text tokenizer.

The pipeline: chunk a corpus (`corpus`), train the gated quantized
autoencoder (`model`, `losses`, `trainer`), distill it into a static token
dictionary (`tokenizer`), and compare against BPE and fixed-length baselines
(`baselines`, `evaluation`).
"""

from .corpus import (
    GPT2_SPLIT_PATTERN,
    Batch,
    CharVocab,
    Chunk,
    batch,
    build_char_vocab,
    chunk,
    load_corpus,
    make_chunks,
    pre_split,
)
from .losses import LossBreakdown
from .model import GQVAE, Codebook, TrainConfig
from .tokenizer import (
    TokenDictionary,
    TokenizedText,
    detokenize,
    export_ids,
    export_tokenizer,
    extract_dictionary,
    load_tokenizer,
    tokenize,
    tokenize_with_fallback,
)
from .trainer import TrainState, fit, fit_multi_seed, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"

__all__ = [
    "GPT2_SPLIT_PATTERN",
    "Batch",
    "CharVocab",
    "Chunk",
    "Codebook",
    "GQVAE",
    "LossBreakdown",
    "TokenDictionary",
    "TokenizedText",
    "TrainConfig",
    "TrainState",
    "batch",
    "build_char_vocab",
    "chunk",
    "detokenize",
    "export_ids",
    "export_tokenizer",
    "extract_dictionary",
    "fit",
    "fit_multi_seed",
    "load_checkpoint",
    "load_corpus",
    "load_tokenizer",
    "make_chunks",
    "pre_split",
    "save_checkpoint",
    "tokenize",
    "tokenize_with_fallback",
    "train_step",
]
