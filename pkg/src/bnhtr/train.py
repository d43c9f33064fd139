"""Training driver: staged runs, evaluation, and throughput measurement.

Stages follow the two-phase recipe — synthetic pretraining at line level,
then word level, then fine-tuning at a reduced learning rate — but each stage
is just ``run_stage`` with a different manifest and config. Shuffling is a
pure function of (seed, epoch) and dropout of (seed, epoch, step), so a run
resumed from an epoch-boundary checkpoint continues step-for-step like an
uninterrupted one.

The train log is append-only JSONL. Every record is deterministic except the
``wall_time`` field, which is timing and excluded from reproducibility
comparisons (see ``strip_timing``).
"""

from __future__ import annotations

import json
import sys
import time
import unicodedata
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .codec import Codec
from .images import read_pgm, to_model_input
from .metrics import EvalReport, aggregate
from .model import (
    Checkpoint,
    InferenceSession,
    ModelConfig,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from .optim import Adam, clip_global_norm
from .synth import derive_seed, load_manifest
from .tokenizers import EOS_ID, PAD_ID

STAGES = ("pretrain_line", "pretrain_word", "finetune")
_PRETRAIN_LR = 1e-4
_FINETUNE_LR = 5e-6
TIMING_FIELDS = frozenset({"wall_time"})


@dataclass
class TrainConfig:
    stage: str
    manifest: str
    epochs: int = 1
    batch_size: int = 32
    lr: float | None = None  # stage default when None
    seed: int = 0
    eval_manifest: str | None = None
    eval_every: int = 0  # steps between mid-run evals; 0 disables
    checkpoint_dir: str = "checkpoints"
    resume: str | None = None  # continue this checkpoint (optimizer included)
    init_checkpoint: str | None = None  # start from these weights, fresh optimizer
    log_path: str | None = None  # default: <checkpoint_dir>/train_log.jsonl
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return _FINETUNE_LR if self.stage == "finetune" else _PRETRAIN_LR

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def strip_timing(record: dict) -> dict:
    """Drop wall-clock fields; what remains must be run-to-run identical."""
    return {k: v for k, v in record.items() if k not in TIMING_FIELDS}


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) in the active float dtype
    labels: np.ndarray  # (N, L) int64: [tokens..., EOS, PAD...]
    texts: list[str]
    paths: list[str]
    n_skipped: int


def load_images(
    records: Sequence[dict], root: Path, config: ModelConfig
) -> np.ndarray:
    """Read, resize, and stack every record's image; missing files fail fast."""
    missing = [r["image"] for r in records if not (root / r["image"]).is_file()]
    if missing:
        raise FileNotFoundError(
            f"{len(missing)} manifest image(s) missing: " + ", ".join(missing)
        )
    out = np.empty(
        (len(records), 3, config.image_height, config.image_width),
        dtype=T.default_dtype(),
    )
    for i, record in enumerate(records):
        gray = read_pgm(root / record["image"])
        out[i] = to_model_input(gray, config.image_height, config.image_width)
    return out


def load_dataset(
    manifest_path: str | Path, codec: Codec, config: ModelConfig
) -> Dataset:
    """Materialize a manifest into batched-training form.

    Labels are NFC-normalized then encoded; rows ending up with zero tokens
    are skipped (counted), and rows too long for the sequence budget raise.
    """
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    root = manifest_path.parent

    kept: list[dict] = []
    rows: list[list[int]] = []
    n_skipped = 0
    capacity = config.max_seq - config.n_img  # label columns incl. EOS
    for record in records:
        text = unicodedata.normalize("NFC", record["text"])
        ids = codec.encode(text).ids
        if not ids:
            n_skipped += 1
            continue
        if len(ids) + 1 > capacity:
            raise ValueError(
                f"label {text!r} needs {len(ids) + 1} slots, budget is {capacity}"
            )
        kept.append(record)
        rows.append(ids + [EOS_ID])
    if not kept:
        raise ValueError(f"{manifest_path}: no usable samples (empty stage)")

    width = max(len(row) for row in rows)
    labels = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        labels[i, : len(row)] = row
    images = load_images(kept, root, config)
    texts = [unicodedata.normalize("NFC", r["text"]) for r in kept]
    return Dataset(images, labels, texts, [r["image"] for r in kept], n_skipped)


class TrainLog:
    """Append-only JSONL writer that also keeps records in memory."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        else:
            self._fh = None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def transcribe(
    session: InferenceSession,
    codec: Codec,
    images: np.ndarray,
    batch_size: int = 32,
    max_new: int | None = None,
) -> list[str]:
    """Greedy-decode every image (batched) and return the decoded strings."""
    texts: list[str] = []
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        for seq in session.generate(batch, max_new=max_new):
            texts.append(codec.decode(seq))
    return texts


def _evaluate_session(
    session: InferenceSession,
    codec: Codec,
    dataset_images: np.ndarray,
    references: Sequence[str],
    batch_size: int = 32,
) -> EvalReport:
    hyps = transcribe(session, codec, dataset_images, batch_size=batch_size)
    return aggregate(list(zip(references, hyps)))


def run_stage(
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    codec: Codec | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[Path, list[dict]]:
    """Train one stage; returns (last checkpoint path, log records).

    Fresh runs need ``model_config`` and ``codec``; ``init_checkpoint`` loads
    weights (fresh optimizer); ``resume`` continues a checkpoint exactly.
    Fine-tuning refuses to start from random weights.
    """
    start_epoch = 0
    global_step = 0
    optimizer_state = None

    if config.resume:
        ckpt = load_checkpoint(config.resume)
        model_config, codec, params = ckpt.config, ckpt.codec, ckpt.params
        state = ckpt.trainer_state or {}
        if state.get("stage") != config.stage:
            raise ValueError(
                f"checkpoint stage {state.get('stage')!r} does not match "
                f"requested stage {config.stage!r}"
            )
        start_epoch = int(state.get("epochs_done", 0))
        global_step = int(state.get("global_step", 0))
        optimizer_state = {
            "t": int(state.get("adam_t", 0)),
            "m": {
                name[len("optim.m.") :]: arr
                for name, arr in ckpt.optim_tensors.items()
                if name.startswith("optim.m.")
            },
            "v": {
                name[len("optim.v.") :]: arr
                for name, arr in ckpt.optim_tensors.items()
                if name.startswith("optim.v.")
            },
        }
    elif config.init_checkpoint:
        ckpt = load_checkpoint(config.init_checkpoint)
        model_config, codec, params = ckpt.config, ckpt.codec, ckpt.params
    elif config.stage == "finetune":
        raise ValueError(
            "finetune requires --init-checkpoint or --resume; it never starts "
            "from random weights"
        )
    else:
        if model_config is None or codec is None:
            raise ValueError("fresh training needs a model config and a tokenizer")
        params = init_params(model_config, seed=config.seed)

    if len(codec) != model_config.vocab_size:
        raise ValueError(
            f"tokenizer has {len(codec)} tokens, model expects {model_config.vocab_size}"
        )

    dataset = load_dataset(config.manifest, codec, model_config)
    n_batches = len(dataset.texts) // config.batch_size
    if n_batches == 0:
        raise ValueError(
            f"{len(dataset.texts)} samples cannot fill one batch of "
            f"{config.batch_size} (empty stage)"
        )
    eval_data = None
    if config.eval_manifest:
        eval_data = load_dataset(config.eval_manifest, codec, model_config)

    optimizer = Adam(params, lr=config.resolved_lr)
    if optimizer_state is not None:
        optimizer.load_state_dict({**optimizer_state, "lr": config.resolved_lr})

    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log = TrainLog(config.log_path or ckpt_dir / "train_log.jsonl")
    emit = progress or (lambda record: None)

    if dataset.n_skipped:
        record = {
            "type": "warning",
            "stage": config.stage,
            "skipped_zero_token_labels": dataset.n_skipped,
        }
        log.write(record)
        emit(record)
        print(
            f"warning: skipped {dataset.n_skipped} zero-token label(s)",
            file=sys.stderr,
        )

    def maybe_eval(epoch: int) -> None:
        if eval_data is None:
            return
        session = InferenceSession(params, model_config)
        report = _evaluate_session(
            session, codec, eval_data.images, eval_data.texts, config.batch_size
        )
        record = {
            "type": "eval",
            "stage": config.stage,
            "epoch": epoch,
            "step": global_step,
            "cer": report.cer,
            "wer": report.wer,
            "n_samples": report.n_samples,
        }
        log.write(record)
        emit(record)

    last_path: Path | None = None
    try:
        for epoch in range(start_epoch, config.epochs):
            order = np.random.default_rng(
                derive_seed("shuffle", config.seed, epoch)
            ).permutation(len(dataset.texts))
            for b in range(n_batches):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                drop_rng = (
                    np.random.default_rng(derive_seed("dropout", config.seed, epoch, b))
                    if model_config.dropout > 0.0
                    else None
                )
                t0 = time.perf_counter()
                with T.Tape() as tape:
                    batch_loss = loss(
                        dataset.images[idx],
                        dataset.labels[idx],
                        params,
                        model_config,
                        rng=drop_rng,
                    )
                    tape.backward(batch_loss)
                grad_norm = clip_global_norm(params, config.grad_clip)
                optimizer.step()
                optimizer.zero_grad()
                global_step += 1
                record = {
                    "type": "step",
                    "stage": config.stage,
                    "epoch": epoch,
                    "step": global_step,
                    "loss": float(batch_loss.data),
                    "grad_norm": grad_norm,
                    "lr": optimizer.lr,
                    "wall_time": time.perf_counter() - t0,
                }
                log.write(record)
                emit(record)
                if config.eval_every and global_step % config.eval_every == 0:
                    maybe_eval(epoch)

            epochs_done = epoch + 1
            trainer_state = {
                "stage": config.stage,
                "epochs_done": epochs_done,
                "global_step": global_step,
                "seed": config.seed,
                "lr": optimizer.lr,
                "adam_t": optimizer.t,
            }
            optim_tensors = {}
            for name, arr in optimizer.m.items():
                optim_tensors[f"optim.m.{name}"] = arr
            for name, arr in optimizer.v.items():
                optim_tensors[f"optim.v.{name}"] = arr
            last_path = ckpt_dir / f"{config.stage}-epoch{epochs_done:04d}.ckpt"
            save_checkpoint(
                last_path, model_config, params, codec, trainer_state, optim_tensors
            )
        maybe_eval(config.epochs - 1)
    finally:
        log.close()

    if last_path is None:
        raise ValueError(
            f"nothing to do: checkpoint already covers {start_epoch} epochs "
            f"and config asks for {config.epochs}"
        )
    return last_path, log.records


def evaluate(
    checkpoint: str | Path | Checkpoint,
    manifest: str | Path,
    batch_size: int = 32,
    include_grapheme: bool = False,
) -> EvalReport:
    """Decode every manifest image with the checkpoint's own tokenizer and
    score against the manifest texts.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    manifest = Path(manifest)
    records = load_manifest(manifest)
    if not records:
        raise ValueError(f"{manifest}: empty manifest")
    images = load_images(records, manifest.parent, ckpt.config)
    session = InferenceSession(ckpt.params, ckpt.config)
    hyps = transcribe(session, ckpt.codec, images, batch_size=batch_size)
    refs = [r["text"] for r in records]
    return aggregate(list(zip(refs, hyps)), include_grapheme=include_grapheme)


def evaluate_hypotheses(manifest: str | Path, hypotheses: str | Path) -> EvalReport:
    """Score a recognition output file (JSONL with image/text) against the
    reference manifest, joined on the image path.
    """
    refs = {r["image"]: r["text"] for r in load_manifest(manifest)}
    hyps = load_manifest(hypotheses)
    missing = [h["image"] for h in hyps if h["image"] not in refs]
    if missing:
        raise ValueError(f"hypotheses reference unknown images: {missing[:5]}")
    if not hyps:
        raise ValueError("empty hypotheses file")
    return aggregate([(refs[h["image"]], h["text"]) for h in hyps])


def bench(
    checkpoint: str | Path | Checkpoint,
    manifest: str | Path,
    repeats: int = 5,
    batch_size: int = 32,
    max_new: int | None = None,
) -> dict:
    """Measure decoding throughput in words/second over the full manifest.

    Each repeat decodes everything once; the report carries per-run values
    and their mean. Word counts come from the reference texts so runs of the
    same manifest measure identical work.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    manifest = Path(manifest)
    records = load_manifest(manifest)
    if not records:
        raise ValueError(f"{manifest}: empty manifest (nothing to measure)")
    images = load_images(records, manifest.parent, ckpt.config)
    n_words = sum(len(r["text"].split()) for r in records)
    if n_words == 0:
        raise ValueError(f"{manifest}: no words in reference texts")
    session = InferenceSession(ckpt.params, ckpt.config)

    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        transcribe(session, ckpt.codec, images, batch_size=batch_size, max_new=max_new)
        seconds = time.perf_counter() - t0
        runs.append({"seconds": seconds, "words_per_s": n_words / seconds})
    return {
        "repeats": repeats,
        "n_samples": len(records),
        "n_words": n_words,
        "batch_size": batch_size,
        "max_new": max_new,
        "runs": runs,
        "mean_words_per_s": sum(r["words_per_s"] for r in runs) / repeats,
    }
