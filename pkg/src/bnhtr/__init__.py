"""Bengali handwritten text recognition with a grapheme-aware tokenizer.

The pipeline: segment Bengali text into grapheme clusters, tokenize them
(trie longest-match over a learned vocabulary, with BPE and per-codepoint
baselines), render deterministic synthetic handwriting images, and train a
patch-embedding decoder-only transformer that reads an image prefix and
generates the transcription autoregressively. Everything runs on numpy with
a small reverse-mode autodiff tape; no deep-learning framework is required.
"""

from .bpe import BpeFileError, BpeModel, BpeTokenizer, bpe_decode, bpe_encode, bpe_train
from .codec import Codec
from .graphemes import segment, segment_characters
from .images import PgmError, read_pgm, resize_bilinear, to_model_input, write_pgm
from .metrics import (
    EditCounts,
    EvalReport,
    aggregate,
    cer,
    edit_counts,
    grapheme_error_rate,
    wer,
)
from .model import (
    Checkpoint,
    CheckpointError,
    InferenceSession,
    ModelConfig,
    count_params,
    expected_shapes,
    forward,
    init_params,
    load_checkpoint,
    loss,
    patch_embed,
    save_checkpoint,
)
from .optim import Adam, clip_global_norm
from .recognizer import HandwritingRecognizer
from .synth import (
    GlyphAtlas,
    GlyphMissingError,
    ManifestError,
    RenderOpts,
    SynthSample,
    WordImage,
    build_atlas,
    gen_dataset,
    load_manifest,
    render,
)
from .tensor import Tape, Tensor, set_default_dtype
from .tokenizers import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    CharTokenizer,
    GraphemeTokenizer,
    GraphemeVocab,
    TokenSequence,
    VocabFileError,
    build_vocab,
)
from .train import TrainConfig, bench, evaluate, evaluate_hypotheses, run_stage

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BOS_ID",
    "BpeFileError",
    "BpeModel",
    "BpeTokenizer",
    "Checkpoint",
    "CheckpointError",
    "CharTokenizer",
    "Codec",
    "EOS_ID",
    "EditCounts",
    "EvalReport",
    "GlyphAtlas",
    "GlyphMissingError",
    "GraphemeTokenizer",
    "GraphemeVocab",
    "HandwritingRecognizer",
    "InferenceSession",
    "ManifestError",
    "ModelConfig",
    "PAD_ID",
    "PgmError",
    "RenderOpts",
    "SynthSample",
    "Tape",
    "Tensor",
    "TokenSequence",
    "TrainConfig",
    "UNK_ID",
    "VocabFileError",
    "WordImage",
    "aggregate",
    "bench",
    "bpe_decode",
    "bpe_encode",
    "bpe_train",
    "build_atlas",
    "build_vocab",
    "cer",
    "clip_global_norm",
    "count_params",
    "edit_counts",
    "evaluate",
    "evaluate_hypotheses",
    "expected_shapes",
    "forward",
    "gen_dataset",
    "grapheme_error_rate",
    "init_params",
    "load_checkpoint",
    "load_manifest",
    "loss",
    "patch_embed",
    "read_pgm",
    "render",
    "resize_bilinear",
    "run_stage",
    "save_checkpoint",
    "segment",
    "segment_characters",
    "set_default_dtype",
    "to_model_input",
    "wer",
    "write_pgm",
]
