"""Pointer-generator abstractive summarizer with coverage, built on a small numpy autodiff core."""

from .beam import beam_search, detokenize, duplicate_rate
from .errors import (
    CheckpointCorruptError,
    ContractError,
    DegenerateMaskError,
    DimensionError,
    EmptyInputError,
    IdOutOfRangeError,
    NumericalAbort,
    TextEncodingError,
)
from .model import ModelParams, init_params, loss, param_count
from .rouge import corpus_rouge, rouge_l, rouge_n
from .tensor import Tape, Tensor, backward
from .text import Vocabulary, build_vocab, encode_example, normalize, read_corpus, tokenize
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
