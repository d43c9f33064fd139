"""Patch-embedding + decoder-only transformer for handwriting recognition.

An input image is resized to (H, W), cut into non-overlapping p_h x p_w
patches enumerated row-major, each flattened channel-major and linearly
projected to the hidden size. Those N_img image slots form a prefix; a BOS
slot and the text tokens follow. One learned absolute position table covers
all slots, causal self-attention runs over the full sequence, and logits are
produced only for slots N_img.. (the BOS slot predicts the first text token).

Blocks are pre-layer-norm GPT-2 style with a final layer norm. The token
embedding and the output head are separate tensors (no weight tying).

Two forward paths exist on purpose: the taped path (:func:`forward`,
:func:`loss`) used for training and gradient checks, and a numpy-only
incremental path with a KV cache (:class:`InferenceSession`) used for
generation. Tests cross-check the two.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .codec import Codec
from .tokenizers import BOS_ID, EOS_ID, PAD_ID, TokenSequence

CHECKPOINT_FORMAT = "bnhtr-checkpoint"
CHECKPOINT_VERSION = 1
IGNORE_INDEX = -100
_MASK_VALUE = -1e9


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


@dataclass
class ModelConfig:
    vocab_size: int
    image_height: int = 32
    image_width: int = 128
    patch_height: int = 4
    patch_width: int = 8
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    max_seq: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        for name in (
            "vocab_size",
            "image_height",
            "image_width",
            "patch_height",
            "patch_width",
            "d_model",
            "n_layers",
            "n_heads",
            "max_seq",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_height % self.patch_height:
            raise ValueError("image_height must be divisible by patch_height")
        if self.image_width % self.patch_width:
            raise ValueError("image_width must be divisible by patch_width")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 4 special tokens plus content")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.n_img + 1 >= self.max_seq:
            raise ValueError(
                f"max_seq={self.max_seq} leaves no text slots after "
                f"{self.n_img} image slots plus BOS"
            )

    @property
    def n_img(self) -> int:
        return (self.image_height // self.patch_height) * (
            self.image_width // self.patch_width
        )

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_height * self.patch_width

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def text_budget(self) -> int:
        """Maximum generated tokens (excluding BOS and the forced EOS)."""
        return self.max_seq - self.n_img - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape map for checkpoints and validation."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.weight": (c.patch_dim, c.d_model),
        "patch_proj.bias": (c.d_model,),
        "tok_emb.weight": (c.vocab_size, c.d_model),
        "pos_emb.weight": (c.max_seq, c.d_model),
    }
    for i in range(c.n_layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.gamma"] = (c.d_model,)
        shapes[p + "ln1.beta"] = (c.d_model,)
        shapes[p + "attn.qkv.weight"] = (c.d_model, 3 * c.d_model)
        shapes[p + "attn.qkv.bias"] = (3 * c.d_model,)
        shapes[p + "attn.out.weight"] = (c.d_model, c.d_model)
        shapes[p + "attn.out.bias"] = (c.d_model,)
        shapes[p + "ln2.gamma"] = (c.d_model,)
        shapes[p + "ln2.beta"] = (c.d_model,)
        shapes[p + "mlp.fc.weight"] = (c.d_model, c.d_ff)
        shapes[p + "mlp.fc.bias"] = (c.d_ff,)
        shapes[p + "mlp.proj.weight"] = (c.d_ff, c.d_model)
        shapes[p + "mlp.proj.bias"] = (c.d_model,)
    shapes["ln_f.gamma"] = (c.d_model,)
    shapes["ln_f.beta"] = (c.d_model,)
    shapes["lm_head.weight"] = (c.d_model, c.vocab_size)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Learnable scalar count, closed form (no tensors instantiated)."""
    c = config
    d, f = c.d_model, c.d_ff
    patch = c.patch_dim * d + d
    embeds = c.vocab_size * d + c.max_seq * d
    per_block = (
        2 * d  # ln1
        + d * 3 * d + 3 * d  # qkv
        + d * d + d  # attn out
        + 2 * d  # ln2
        + d * f + f  # mlp fc
        + f * d + d  # mlp proj
    )
    final = 2 * d + d * c.vocab_size
    return patch + embeds + c.n_layers * per_block + final


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, T.Tensor]:
    """Weights ~ N(0, 0.02), biases zero, layer-norm gains one; seeded."""
    rng = np.random.default_rng(seed)
    params: dict[str, T.Tensor] = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf in ("beta", "bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = T.Tensor(data, requires_grad=True, name=name)
    return params


def extract_patches(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(B, 3, H, W) -> (B, N_img, patch_dim); row-major patches, channel-major
    flattening within each patch.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if (c, h, w) != (3, config.image_height, config.image_width):
        raise ValueError(
            f"expected images of shape (B, 3, {config.image_height}, "
            f"{config.image_width}), got {images.shape}"
        )
    ph, pw = config.patch_height, config.patch_width
    gh, gw = h // ph, w // pw
    # (B, C, gh, ph, gw, pw) -> (B, gh, gw, C, ph, pw): row-major grid order,
    # channel-major within the patch.
    patches = images.reshape(b, c, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(patches.reshape(b, gh * gw, config.patch_dim))


def patch_embed(
    images: np.ndarray, params: dict[str, T.Tensor], config: ModelConfig
) -> T.Tensor:
    """Project patches to the hidden size and add position rows 0..N_img-1."""
    flat = extract_patches(images, config)
    x = T.Tensor(flat)
    proj = T.add(T.matmul(x, params["patch_proj.weight"]), params["patch_proj.bias"])
    pos = T.narrow(params["pos_emb.weight"], 0, 0, config.n_img)
    return T.add(proj, pos)


def causal_mask(size: int, dtype) -> np.ndarray:
    mask = np.zeros((size, size), dtype=dtype)
    mask[np.triu_indices(size, k=1)] = _MASK_VALUE
    return mask[None, None]


def _block(
    x: T.Tensor,
    params: dict[str, T.Tensor],
    prefix: str,
    config: ModelConfig,
    mask: T.Tensor,
    rng: np.random.Generator | None,
) -> T.Tensor:
    b, s, d = x.shape
    h, dh = config.n_heads, config.d_head

    normed = T.layer_norm(x, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"])
    qkv = T.add(
        T.matmul(normed, params[prefix + "attn.qkv.weight"]),
        params[prefix + "attn.qkv.bias"],
    )
    heads = []
    for part in range(3):
        piece = T.narrow(qkv, 2, part * d, d)
        piece = T.reshape(piece, (b, s, h, dh))
        heads.append(T.permute(piece, (0, 2, 1, 3)))  # (B, h, S, dh)
    q, k, v = heads
    scores = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / math.sqrt(dh))
    probs = T.softmax(T.add(scores, mask))
    ctx = T.matmul(probs, v)  # (B, h, S, dh)
    ctx = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, s, d))
    attn_out = T.add(
        T.matmul(ctx, params[prefix + "attn.out.weight"]),
        params[prefix + "attn.out.bias"],
    )
    if rng is not None and config.dropout > 0.0:
        attn_out = T.dropout(attn_out, config.dropout, rng)
    x = T.add(x, attn_out)

    normed = T.layer_norm(x, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"])
    hidden = T.gelu(
        T.add(T.matmul(normed, params[prefix + "mlp.fc.weight"]), params[prefix + "mlp.fc.bias"])
    )
    mlp_out = T.add(
        T.matmul(hidden, params[prefix + "mlp.proj.weight"]), params[prefix + "mlp.proj.bias"]
    )
    if rng is not None and config.dropout > 0.0:
        mlp_out = T.dropout(mlp_out, config.dropout, rng)
    return T.add(x, mlp_out)


def forward(
    images: np.ndarray,
    text_tokens: np.ndarray,
    params: dict[str, T.Tensor],
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """Logits (B, len(text)+1, V) for slots N_img.. of [image; BOS; text].

    ``text_tokens`` is (B, L) WITHOUT the BOS frame; it is prepended here.
    ``rng`` enables dropout (training mode); None runs deterministically.
    """
    text_tokens = np.atleast_2d(np.asarray(text_tokens, dtype=np.int64))
    b, length = text_tokens.shape
    total = config.n_img + 1 + length
    if total > config.max_seq:
        raise ValueError(
            f"sequence of {total} slots exceeds max_seq={config.max_seq}"
        )
    img = patch_embed(images, params, config)
    if img.shape[0] != b:
        raise ValueError(f"batch mismatch: {img.shape[0]} images vs {b} token rows")

    ids = np.concatenate(
        [np.full((b, 1), BOS_ID, dtype=np.int64), text_tokens], axis=1
    )
    tok = T.embedding_lookup(params["tok_emb.weight"], ids)
    pos = T.narrow(params["pos_emb.weight"], 0, config.n_img, 1 + length)
    txt = T.add(tok, pos)

    x = T.concat([img, txt], axis=1)
    mask = T.Tensor(causal_mask(total, x.data.dtype))
    for i in range(config.n_layers):
        x = _block(x, params, f"blocks.{i}.", config, mask, rng)
    x = T.layer_norm(x, params["ln_f.gamma"], params["ln_f.beta"])
    x = T.narrow(x, 1, config.n_img, 1 + length)
    return T.matmul(x, params["lm_head.weight"])


def loss(
    images: np.ndarray,
    labels: np.ndarray,
    params: dict[str, T.Tensor],
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """Mean cross-entropy over non-PAD label positions.

    ``labels`` is (B, L): each row the framed target [t1..tL, EOS, PAD...].
    Slot BOS predicts labels[:,0], slot labels[:,k] predicts labels[:,k+1].
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if labels.shape[1] < 1:
        raise ValueError("labels must contain at least one target column")
    logits = forward(images, labels[:, :-1], params, config, rng=rng)
    targets = np.where(labels == PAD_ID, IGNORE_INDEX, labels)
    return T.cross_entropy(logits, targets, ignore_index=IGNORE_INDEX)


# ---------------------------------------------------------------------------
# numpy-only incremental decoding


def _np_layer_norm(x, gamma, beta, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _np_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


class InferenceSession:
    """Greedy autoregressive decoding with a per-layer KV cache.

    Parameters are read-only; one session may decode many batches. All math
    is plain numpy on the stored arrays (no tape).
    """

    def __init__(self, params: dict[str, T.Tensor], config: ModelConfig):
        self.config = config
        self.w = {name: t.data for name, t in params.items()}

    def _project_patches(self, images: np.ndarray) -> np.ndarray:
        flat = extract_patches(images, self.config)
        return flat @ self.w["patch_proj.weight"] + self.w["patch_proj.bias"]

    def _attend(self, x, layer, k_cache, v_cache, used, mask=None):
        """Append K/V for the ``x`` slots and attend from them."""
        c, w = self.config, self.w
        p = f"blocks.{layer}."
        b, s, d = x.shape
        qkv = x @ w[p + "attn.qkv.weight"] + w[p + "attn.qkv.bias"]
        q, k, v = np.split(qkv, 3, axis=-1)
        q = q.reshape(b, s, c.n_heads, c.d_head).transpose(0, 2, 1, 3)
        k = k.reshape(b, s, c.n_heads, c.d_head).transpose(0, 2, 1, 3)
        v = v.reshape(b, s, c.n_heads, c.d_head).transpose(0, 2, 1, 3)
        k_cache[:, :, used : used + s] = k
        v_cache[:, :, used : used + s] = v
        keys = k_cache[:, :, : used + s]
        vals = v_cache[:, :, : used + s]
        scores = q @ np.swapaxes(keys, -1, -2) / math.sqrt(c.d_head)
        if mask is not None:
            scores = scores + mask
        ctx = _np_softmax(scores) @ vals
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, s, d)
        return ctx @ w[p + "attn.out.weight"] + w[p + "attn.out.bias"]

    def _run(self, x, caches, used, mask=None):
        """Push slots ``x`` (B, S, D) through all blocks, extending caches."""
        c, w = self.config, self.w
        for layer in range(c.n_layers):
            p = f"blocks.{layer}."
            k_cache, v_cache = caches[layer]
            normed = _np_layer_norm(x, w[p + "ln1.gamma"], w[p + "ln1.beta"])
            x = x + self._attend(normed, layer, k_cache, v_cache, used, mask)
            normed = _np_layer_norm(x, w[p + "ln2.gamma"], w[p + "ln2.beta"])
            hidden = _np_gelu(normed @ w[p + "mlp.fc.weight"] + w[p + "mlp.fc.bias"])
            x = x + hidden @ w[p + "mlp.proj.weight"] + w[p + "mlp.proj.bias"]
        return x

    def logits_for(self, images: np.ndarray, text_tokens: np.ndarray) -> np.ndarray:
        """Full-sequence logits, for cross-checking against the taped path."""
        c = self.config
        text_tokens = np.atleast_2d(np.asarray(text_tokens, dtype=np.int64))
        b, length = text_tokens.shape
        total = c.n_img + 1 + length
        caches = self._new_caches(b, total)
        ids = np.concatenate([np.full((b, 1), BOS_ID, np.int64), text_tokens], axis=1)
        x = np.concatenate(
            [
                self._project_patches(images) + self.w["pos_emb.weight"][: c.n_img],
                self.w["tok_emb.weight"][ids]
                + self.w["pos_emb.weight"][c.n_img : c.n_img + 1 + length],
            ],
            axis=1,
        )
        mask = causal_mask(total, x.dtype)
        x = self._run(x, caches, 0, mask)
        x = _np_layer_norm(x, self.w["ln_f.gamma"], self.w["ln_f.beta"])
        return x[:, c.n_img :] @ self.w["lm_head.weight"]

    def _new_caches(self, batch: int, total: int):
        c = self.config
        dtype = self.w["tok_emb.weight"].dtype
        return [
            (
                np.zeros((batch, c.n_heads, total, c.d_head), dtype=dtype),
                np.zeros((batch, c.n_heads, total, c.d_head), dtype=dtype),
            )
            for _ in range(c.n_layers)
        ]

    def generate(
        self, images: np.ndarray, max_new: int | None = None
    ) -> list[TokenSequence]:
        """Greedy decode each image; ties pick the lowest token id.

        Rows that exhaust the budget before emitting EOS get EOS appended and
        are flagged truncated.
        """
        c, w = self.config, self.w
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        b = images.shape[0]
        budget = c.text_budget if max_new is None else min(max_new, c.text_budget)
        total = c.n_img + 1 + budget
        caches = self._new_caches(b, total)

        prefix_len = c.n_img + 1
        x = np.concatenate(
            [
                self._project_patches(images) + w["pos_emb.weight"][: c.n_img],
                np.broadcast_to(
                    w["tok_emb.weight"][BOS_ID] + w["pos_emb.weight"][c.n_img],
                    (b, 1, c.d_model),
                ),
            ],
            axis=1,
        )
        mask = causal_mask(prefix_len, x.dtype)
        x = self._run(x, caches, 0, mask)

        emitted = np.full((b, budget), PAD_ID, dtype=np.int64)
        eos_step = np.full(b, -1, dtype=np.int64)  # step at which EOS appeared
        done = np.zeros(b, dtype=bool)
        last = x[:, -1:]
        for step in range(budget):
            hidden = _np_layer_norm(last, w["ln_f.gamma"], w["ln_f.beta"])
            logits = hidden[:, 0] @ w["lm_head.weight"]
            next_ids = np.argmax(logits, axis=-1)
            next_ids = np.where(done, PAD_ID, next_ids)
            emitted[:, step] = next_ids
            finished_now = ~done & (next_ids == EOS_ID)
            eos_step[finished_now] = step
            done |= finished_now
            if done.all() or step == budget - 1:
                break
            feed = w["tok_emb.weight"][next_ids][:, None]
            feed = feed + w["pos_emb.weight"][prefix_len + step]
            last = self._run(feed, caches, prefix_len + step)

        sequences = []
        for row in range(b):
            if eos_step[row] >= 0:
                ids = [BOS_ID] + emitted[row, : eos_step[row] + 1].tolist()
                truncated = False
            else:
                ids = [BOS_ID] + emitted[row].tolist() + [EOS_ID]
                truncated = True
            sequences.append(TokenSequence(ids, framed=True, truncated=truncated))
        return sequences


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, T.Tensor]
    codec: Codec
    trainer_state: dict | None = None
    optim_tensors: dict[str, np.ndarray] = field(default_factory=dict)


_DTYPE_TAGS = {"<f4", "<f8"}


def save_checkpoint(
    path: str | Path,
    config: ModelConfig,
    params: dict[str, T.Tensor],
    codec: Codec,
    trainer_state: dict | None = None,
    optim_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write one JSON header line plus concatenated little-endian payloads.

    Model tensors are listed under their canonical names; optimizer moments
    (if any) under an ``optim.`` prefix. Contents are a pure function of the
    arguments — no timestamps — so identical states save byte-identically.
    """
    entries: list[tuple[str, np.ndarray]] = [
        (name, params[name].data) for name in sorted(params)
    ]
    for name in sorted(optim_tensors or {}):
        if not name.startswith("optim."):
            raise ValueError(f"auxiliary tensor {name!r} must use the 'optim.' prefix")
        entries.append((name, np.asarray(optim_tensors[name])))

    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "tokenizer": codec.to_payload(),
        "trainer": trainer_state,
        "tensors": [
            {
                "name": name,
                "dtype": arr.dtype.newbyteorder("<").str,
                "shape": list(arr.shape),
            }
            for name, arr in entries
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in entries:
            data = np.ascontiguousarray(arr)
            if data.dtype.byteorder == ">":
                data = data.astype(data.dtype.newbyteorder("<"))
            fh.write(data.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint; every expected tensor must exist with
    the exact shape implied by the stored config.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header ({exc})") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported version {header.get('version')!r}"
            )
        try:
            config = ModelConfig.from_dict(header["config"])
            codec = Codec.from_payload(header["tokenizer"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad header contents ({exc})") from None

        arrays: dict[str, np.ndarray] = {}
        for entry in header.get("tensors", []):
            name, tag = entry["name"], entry["dtype"]
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"{path}: tensor {name!r} has dtype {tag!r}")
            shape = tuple(int(n) for n in entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * np.dtype(tag).itemsize)
            if len(raw) != count * np.dtype(tag).itemsize:
                raise CheckpointError(f"{path}: truncated payload at {name!r}")
            if name in arrays:
                raise CheckpointError(f"{path}: duplicate tensor {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=tag).reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")

    expected = expected_shapes(config)
    model_names = {n for n in arrays if not n.startswith("optim.")}
    for name in sorted(expected):
        if name not in model_names:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if arrays[name].shape != expected[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                f"config implies {expected[name]}"
            )
    for name in sorted(model_names - set(expected)):
        raise CheckpointError(f"{path}: unexpected tensor {name!r}")
    if len(codec) != config.vocab_size:
        raise CheckpointError(
            f"{path}: tokenizer has {len(codec)} tokens but config says "
            f"{config.vocab_size}"
        )

    params: dict[str, T.Tensor] = {}
    for name in expected:
        t = T.Tensor.__new__(T.Tensor)
        t.data = arrays[name]
        t.grad = None
        t.requires_grad = True
        t.name = name
        params[name] = t
    optim = {n: arrays[n] for n in arrays if n.startswith("optim.")}
    return Checkpoint(
        config=config,
        params=params,
        codec=codec,
        trainer_state=header.get("trainer"),
        optim_tensors=optim,
    )
