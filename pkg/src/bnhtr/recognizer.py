"""Estimator-style facade: fit on (images, texts), predict transcriptions.

``HandwritingRecognizer`` wraps tokenizer construction, model init, and the
training loop behind the familiar fit/predict/score surface so experiments
(and the ablation tests) can treat the whole stack as one estimator. File
and manifest based training lives in :mod:`bnhtr.train`; this class works on
in-memory arrays.
"""

from __future__ import annotations

import unicodedata
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .bpe import bpe_train
from .codec import Codec
from .graphemes import segment_characters
from .metrics import aggregate
from .model import (
    InferenceSession,
    ModelConfig,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from .optim import Adam, clip_global_norm
from .synth import derive_seed
from .tokenizers import EOS_ID, PAD_ID, build_vocab
from .train import transcribe


class HandwritingRecognizer(BaseEstimator):
    """Decoder-only transformer recognizer with a pluggable tokenizer.

    Parameters mirror the model and training knobs; all are plain values so
    ``get_params``/``set_params``/``clone`` behave as usual.
    """

    def __init__(
        self,
        tokenizer: str = "grapheme",
        target_vocab: int = 1000,
        image_height: int = 32,
        image_width: int = 128,
        patch_height: int = 4,
        patch_width: int = 8,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        max_seq: int | None = None,
        dropout: float = 0.0,
        lr: float = 1e-3,
        batch_size: int = 32,
        epochs: int = 50,
        grad_clip: float = 1.0,
        seed: int = 0,
        early_stop_cer: float | None = None,
        early_stop_every: int = 10,
    ):
        self.tokenizer = tokenizer
        self.target_vocab = target_vocab
        self.image_height = image_height
        self.image_width = image_width
        self.patch_height = patch_height
        self.patch_width = patch_width
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_seq = max_seq
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.grad_clip = grad_clip
        self.seed = seed
        self.early_stop_cer = early_stop_cer
        self.early_stop_every = early_stop_every

    # -- helpers ------------------------------------------------------------

    def _build_codec(self, texts: Sequence[str]) -> Codec:
        if self.tokenizer == "grapheme":
            return Codec("grapheme", build_vocab(texts))
        if self.tokenizer == "char":
            return Codec("char", build_vocab(texts, unit_fn=segment_characters))
        if self.tokenizer == "bpe":
            return Codec("bpe", bpe_train(texts, self.target_vocab))
        raise ValueError(f"unknown tokenizer {self.tokenizer!r}")

    def _check_images(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=T.default_dtype())
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != (3, self.image_height, self.image_width):
            raise ValueError(
                f"X must be (N, 3, {self.image_height}, {self.image_width}), "
                f"got {X.shape}"
            )
        return X

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y) -> "HandwritingRecognizer":
        """Train on images ``X`` (N, 3, H, W in [0,1]) and transcripts ``y``."""
        X = self._check_images(X)
        texts = [unicodedata.normalize("NFC", t) for t in y]
        if len(texts) != len(X):
            raise ValueError(f"got {len(X)} images but {len(texts)} transcripts")
        if not texts:
            raise ValueError("cannot fit on an empty dataset")

        codec = self._build_codec(texts)
        config = ModelConfig(
            vocab_size=len(codec),
            image_height=self.image_height,
            image_width=self.image_width,
            patch_height=self.patch_height,
            patch_width=self.patch_width,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_seq=self._resolve_max_seq(codec, texts),
            dropout=self.dropout,
        )

        rows = []
        for i, text in enumerate(texts):
            ids = codec.encode(text).ids
            if not ids:
                raise ValueError(f"transcript {i} encodes to zero tokens: {text!r}")
            rows.append(ids + [EOS_ID])
        width = max(len(r) for r in rows)
        labels = np.full((len(rows), width), PAD_ID, dtype=np.int64)
        for i, row in enumerate(rows):
            labels[i, : len(row)] = row

        params = init_params(config, seed=self.seed)
        optimizer = Adam(params, lr=self.lr)
        batch = min(self.batch_size, len(texts))
        n_batches = len(texts) // batch
        history: list[dict] = []

        for epoch in range(self.epochs):
            order = np.random.default_rng(
                derive_seed("shuffle", self.seed, epoch)
            ).permutation(len(texts))
            epoch_loss = 0.0
            for b in range(n_batches):
                idx = order[b * batch : (b + 1) * batch]
                drop_rng = (
                    np.random.default_rng(derive_seed("dropout", self.seed, epoch, b))
                    if config.dropout > 0.0
                    else None
                )
                with T.Tape() as tape:
                    batch_loss = loss(X[idx], labels[idx], params, config, rng=drop_rng)
                    tape.backward(batch_loss)
                clip_global_norm(params, self.grad_clip)
                optimizer.step()
                optimizer.zero_grad()
                epoch_loss += float(batch_loss.data)
            history.append({"epoch": epoch, "loss": epoch_loss / max(n_batches, 1)})

            if (
                self.early_stop_cer is not None
                and (epoch + 1) % self.early_stop_every == 0
            ):
                session = InferenceSession(params, config)
                hyps = transcribe(session, codec, X, batch_size=batch)
                report = aggregate(list(zip(texts, hyps)))
                history[-1]["train_cer"] = report.cer
                if report.cer <= self.early_stop_cer:
                    break

        self.codec_ = codec
        self.config_ = config
        self.params_ = params
        self.history_ = history
        return self

    def _resolve_max_seq(self, codec: Codec, texts: Sequence[str]) -> int:
        n_img = (self.image_height // self.patch_height) * (
            self.image_width // self.patch_width
        )
        if self.max_seq is not None:
            return self.max_seq
        longest = max(len(codec.encode(t).ids) for t in texts)
        return n_img + 1 + longest + 1  # BOS slot + tokens + EOS

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "params_")
        X = self._check_images(X)
        session = InferenceSession(self.params_, self.config_)
        return transcribe(session, self.codec_, X, batch_size=max(self.batch_size, 1))

    def score(self, X, y) -> float:
        """1 − corpus CER (higher is better, can be negative)."""
        check_is_fitted(self, "params_")
        refs = list(y)
        report = aggregate(list(zip(refs, self.predict(X))))
        return 1.0 - report.cer

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.config_, self.params_, self.codec_)

    @classmethod
    def from_checkpoint(cls, path) -> "HandwritingRecognizer":
        ckpt = load_checkpoint(path)
        est = cls(
            image_height=ckpt.config.image_height,
            image_width=ckpt.config.image_width,
            patch_height=ckpt.config.patch_height,
            patch_width=ckpt.config.patch_width,
            d_model=ckpt.config.d_model,
            n_layers=ckpt.config.n_layers,
            n_heads=ckpt.config.n_heads,
            max_seq=ckpt.config.max_seq,
            dropout=ckpt.config.dropout,
            tokenizer=ckpt.codec.kind,
        )
        est.codec_ = ckpt.codec
        est.config_ = ckpt.config
        est.params_ = ckpt.params
        est.history_ = []
        return est
