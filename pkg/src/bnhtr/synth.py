"""Synthetic handwriting-style image generator.

Real font shaping is deliberately avoided: each grapheme cluster gets a
procedural glyph (a few connected pseudo-random strokes in a 24 px tall box),
unique per cluster and a pure function of (cluster, seed). That preserves the
one-visual-unit-per-grapheme structure the recognizer is built around while
keeping generation dependency-free and bit-reproducible.

Distortions mimic scanned handwriting artifacts and are applied in a fixed
order: bend, wave, blur, fragment, noise. All parameter ranges live on
``RenderOpts`` and can be overridden.

Every sample derives its RNG stream from (master seed, sample index), so a
parallel run produces byte-identical images and manifest to a serial one.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graphemes import segment
from .images import write_pgm
from .tokenizers import GraphemeVocab

GLYPH_HEIGHT = 24
DISTORTION_ORDER = ("bend", "wave", "blur", "fragment", "noise")


class GlyphMissingError(KeyError):
    """A cluster of the requested text has no glyph in the atlas."""


class ManifestError(ValueError):
    """Raised for malformed dataset manifests."""


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labeled parts (platform independent)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class GlyphAtlas:
    """Ink bitmaps (uint8, 0=blank) per grapheme cluster, baseline aligned."""

    glyphs: dict[str, np.ndarray]
    seed: int

    def __len__(self) -> int:
        return len(self.glyphs)

    def bitmap(self, cluster: str) -> np.ndarray:
        try:
            return self.glyphs[cluster]
        except KeyError:
            raise GlyphMissingError(f"no glyph for cluster {cluster!r}") from None


def _draw_glyph(cluster: str, seed: int, attempt: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed("glyph", seed, attempt, cluster))
    n_cp = len(cluster)
    width = int(rng.integers(10, GLYPH_HEIGHT + 6 * (n_cp - 1) + 1))
    box = np.zeros((GLYPH_HEIGHT, width), dtype=np.uint8)
    n_strokes = int(rng.integers(3, 7))
    y, x = rng.integers(2, GLYPH_HEIGHT - 2), rng.integers(1, max(2, width - 1))
    for _ in range(n_strokes):
        y2, x2 = int(rng.integers(0, GLYPH_HEIGHT)), int(rng.integers(0, width))
        steps = max(abs(y2 - y), abs(x2 - x), 1) * 2
        ts = np.linspace(0.0, 1.0, steps + 1)
        ys = np.clip(np.round(y + ts * (y2 - y)).astype(int), 0, GLYPH_HEIGHT - 1)
        xs = np.clip(np.round(x + ts * (x2 - x)).astype(int), 0, width - 1)
        box[ys, xs] = 255
        if rng.random() < 0.4:  # occasional thicker stroke
            box[np.minimum(ys + 1, GLYPH_HEIGHT - 1), xs] = 255
        y, x = y2, x2
    return box


def build_atlas(vocab: GraphemeVocab, seed: int) -> GlyphAtlas:
    """Draw one glyph per vocabulary grapheme; identical bitmaps for distinct
    graphemes are redrawn with a bumped per-glyph attempt counter.
    """
    glyphs: dict[str, np.ndarray] = {}
    seen: dict[bytes, str] = {}
    for cluster in vocab.graphemes:
        attempt = 0
        while True:
            box = _draw_glyph(cluster, seed, attempt)
            key = box.shape[1].to_bytes(2, "little") + box.tobytes()
            if box.any() and seen.get(key, cluster) == cluster:
                break
            attempt += 1
        glyphs[cluster] = box
        seen[key] = cluster
    return GlyphAtlas(glyphs=glyphs, seed=seed)


@dataclass
class RenderOpts:
    """Distortion switches and parameter ranges (pixels unless noted)."""

    bend: bool = False
    wave: bool = False
    blur: bool = False
    fragment: bool = False
    noise: bool = False
    bend_amplitude: tuple[float, float] = (-6.0, 6.0)
    wave_amplitude: tuple[float, float] = (1.0, 3.0)
    wave_length: tuple[float, float] = (40.0, 120.0)
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 0.02
    glyph_gap: tuple[int, int] = (1, 4)
    word_gap: tuple[int, int] = (8, 16)
    canvas_height: int | None = None  # None: 32 for words, 48 for lines

    @classmethod
    def from_names(cls, names: Iterable[str], **overrides) -> "RenderOpts":
        names = set(names)
        if "all" in names:
            names = set(DISTORTION_ORDER)
        unknown = names - set(DISTORTION_ORDER) - {"none"}
        if unknown:
            raise ValueError(f"unknown distortions: {sorted(unknown)}")
        flags = {name: name in names for name in DISTORTION_ORDER}
        return cls(**flags, **overrides)

    def tags(self) -> list[str]:
        return [name for name in DISTORTION_ORDER if getattr(self, name)]


@dataclass
class WordImage:
    """(3, H, W) float pixels in [0, 1] plus provenance."""

    pixels: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) pixels, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")


@dataclass
class SynthSample:
    image: WordImage
    text: str
    artifacts: list[str]
    rng_seed: int
    n_glyphs: int = 0


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _shift_columns(canvas: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Displace each column vertically by round(dy), filling with white."""
    h, w = canvas.shape
    shifts = np.round(dy).astype(int)
    src = np.arange(h)[:, None] - shifts[None, :]
    valid = (src >= 0) & (src < h)
    return np.where(valid, canvas[np.clip(src, 0, h - 1), np.arange(w)[None, :]], 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return taps / taps.sum()


def _blur(canvas: np.ndarray, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(sigma)
    radius = len(kernel) // 2
    for axis in (0, 1):
        moved = np.moveaxis(canvas, axis, -1)
        padded = np.pad(moved, [(0, 0), (radius, radius)], mode="edge")
        out = np.zeros_like(moved)
        for k, weight in enumerate(kernel):
            out += weight * padded[:, k : k + moved.shape[-1]]
        canvas = np.moveaxis(out, -1, axis)
    return canvas


def _fragment(canvas: np.ndarray, atlas: GlyphAtlas, rng: np.random.Generator) -> np.ndarray:
    h, w = canvas.shape
    for edge in range(4):
        strip = int(rng.integers(0, 4))
        if strip == 0:
            continue
        if edge == 0:
            canvas[:strip, :] = 1.0
        elif edge == 1:
            canvas[-strip:, :] = 1.0
        elif edge == 2:
            canvas[:, :strip] = 1.0
        else:
            canvas[:, -strip:] = 1.0
    clusters = sorted(atlas.glyphs)
    for _ in range(int(rng.integers(1, 3))):
        glyph = atlas.glyphs[clusters[int(rng.integers(0, len(clusters)))]]
        gw = glyph.shape[1]
        sliver_w = min(int(rng.integers(2, 6)), gw)
        x0 = int(rng.integers(0, gw - sliver_w + 1))
        sliver = glyph[:, x0 : x0 + sliver_w].astype(np.float64) / 255.0
        top = int(rng.integers(0, max(1, h - GLYPH_HEIGHT + 1)))
        dest_x = 0 if rng.random() < 0.5 else w - sliver_w
        region = canvas[top : top + GLYPH_HEIGHT, dest_x : dest_x + sliver_w]
        np.minimum(region, 1.0 - sliver[: region.shape[0]], out=region)
    return canvas


def render(
    text: str, atlas: GlyphAtlas, opts: RenderOpts | None = None, seed: int = 0
) -> SynthSample:
    """Compose glyphs for ``text`` onto a white canvas and distort per opts.

    Whitespace clusters become wide word gaps; every other cluster must have
    an atlas glyph.
    """
    opts = opts or RenderOpts()
    rng = np.random.default_rng(derive_seed("render", seed))
    clusters = segment(text)

    pieces: list[tuple[int, np.ndarray | None]] = []  # (advance, bitmap)
    n_glyphs = 0
    x = 3
    for idx, cluster in enumerate(clusters):
        if cluster.isspace():
            x += int(rng.integers(opts.word_gap[0], opts.word_gap[1] + 1))
            continue
        bitmap = atlas.bitmap(cluster)
        if idx > 0 and pieces:
            x += int(rng.integers(opts.glyph_gap[0], opts.glyph_gap[1] + 1))
        pieces.append((x, bitmap))
        x += bitmap.shape[1]
        n_glyphs += 1

    is_line = any(cluster.isspace() for cluster in clusters)
    height = opts.canvas_height or (48 if is_line else 32)
    width = x + 3
    top = (height - GLYPH_HEIGHT) // 2
    canvas = np.ones((height, width), dtype=np.float64)
    for px, bitmap in pieces:
        region = canvas[top : top + GLYPH_HEIGHT, px : px + bitmap.shape[1]]
        np.minimum(region, 1.0 - bitmap.astype(np.float64) / 255.0, out=region)

    if opts.bend:
        a = _uniform(rng, opts.bend_amplitude)
        xs = np.arange(width)
        canvas = _shift_columns(canvas, a * (xs / max(width, 1) - 0.5) ** 2)
    if opts.wave:
        amp = _uniform(rng, opts.wave_amplitude)
        lam = _uniform(rng, opts.wave_length)
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        xs = np.arange(width)
        canvas = _shift_columns(canvas, amp * np.sin(2.0 * np.pi * xs / lam + phase))
    if opts.blur:
        canvas = _blur(canvas, _uniform(rng, opts.blur_sigma))
    if opts.fragment:
        canvas = _fragment(canvas, atlas, rng)
    if opts.noise:
        canvas = canvas + rng.normal(0.0, opts.noise_sigma, canvas.shape)

    canvas = np.clip(canvas, 0.0, 1.0)
    image = WordImage(np.broadcast_to(canvas, (3, height, width)).copy())
    return SynthSample(image, text, opts.tags(), seed, n_glyphs=n_glyphs)


def _word_pool(corpus: Sequence[str]) -> list[str]:
    pool = [w for line in corpus for w in line.split()]
    if not pool:
        raise ValueError("corpus contains no words")
    return pool


def gen_dataset(
    corpus: Sequence[str],
    atlas: GlyphAtlas,
    n_samples: int,
    opts: RenderOpts | None = None,
    seed: int = 0,
    out_dir: str | Path = ".",
    mode: str = "word",
    threads: int = 1,
) -> Path:
    """Render ``n_samples`` labeled images and write a JSONL manifest.

    Word mode draws single words uniformly from the corpus word pool; line
    mode joins 3-8 drawn words per image. Returns the manifest path.
    """
    if mode not in ("word", "line"):
        raise ValueError(f"mode must be 'word' or 'line', got {mode!r}")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    labels: list[str] = []
    if n_samples:
        pool = _word_pool(corpus)
        label_rng = np.random.default_rng(derive_seed("labels", seed))
        for _ in range(n_samples):
            if mode == "word":
                labels.append(pool[int(label_rng.integers(0, len(pool)))])
            else:
                k = int(label_rng.integers(3, 9))
                idx = label_rng.integers(0, len(pool), size=k)
                labels.append(" ".join(pool[int(i)] for i in idx))

    def make(i: int) -> dict:
        sample_seed = derive_seed("sample", seed, i)
        sample = render(labels[i], atlas, opts, seed=sample_seed)
        rel = f"images/{i:06d}.pgm"
        gray = np.round(sample.image.pixels[0] * 255.0).astype(np.uint8)
        write_pgm(out_dir / rel, gray)
        return {
            "image": rel,
            "text": sample.text,
            "tags": sample.artifacts,
            "seed": sample_seed,
        }

    if threads > 1 and n_samples > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            records = list(pool_exec.map(make, range(n_samples)))
    else:
        records = [make(i) for i in range(n_samples)]

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    return manifest


def load_manifest(path: str | Path) -> list[dict]:
    """Parse a JSONL manifest; image paths are relative to the manifest."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        if "image" not in record or "text" not in record:
            raise ManifestError(f"{path}:{lineno}: record needs 'image' and 'text'")
        records.append(record)
    return records
