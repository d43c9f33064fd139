"""Command-line entry point for the full pipeline.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 data/format error.

Every command accepts ``--seed`` and ``--config``. The config file is JSON
with one section per command name (e.g. ``{"train": {...}}``) whose keys are
the command's long option names with dashes replaced by underscores; explicit
command-line flags take precedence over config values, which take precedence
over built-in defaults.

With ``--json``, exactly one JSON document is printed to stdout and all other
messages go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import unicodedata
from pathlib import Path

from .bpe import BpeFileError, bpe_train
from .codec import TOKENIZER_KINDS, Codec
from .graphemes import segment_characters
from .images import PgmError, read_pgm, to_model_input
from .metrics import EvalReport
from .model import (
    CheckpointError,
    InferenceSession,
    ModelConfig,
    count_params,
    load_checkpoint,
)
from .synth import (
    GlyphMissingError,
    ManifestError,
    RenderOpts,
    build_atlas,
    gen_dataset,
    load_manifest,
)
from .tokenizers import VocabFileError, build_vocab
from .train import (
    TrainConfig,
    bench,
    evaluate,
    evaluate_hypotheses,
    load_images,
    run_stage,
    transcribe,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_DATA = 3

DATA_ERRORS = (
    VocabFileError,
    BpeFileError,
    ManifestError,
    CheckpointError,
    PgmError,
    GlyphMissingError,
    json.JSONDecodeError,
)

_MODEL_KEYS = (
    "image_height",
    "image_width",
    "patch_height",
    "patch_width",
    "d_model",
    "n_layers",
    "n_heads",
    "max_seq",
    "dropout",
)


class _Options(dict):
    """Effective options: defaults, then config section, then CLI flags."""

    __getattr__ = dict.__getitem__


def _log(options: _Options, message: str) -> None:
    print(message, file=sys.stderr if options.get("json") else sys.stdout)


def _emit(options: _Options, result: dict, human_lines: list[str]) -> None:
    if options.get("json"):
        print(json.dumps(result, ensure_ascii=False, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def _read_corpus(path: str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [unicodedata.normalize("NFC", line) for line in text.splitlines()]


def _load_codec(kind: str, vocab_path: str) -> Codec:
    return Codec.from_file(kind, vocab_path)


# ---------------------------------------------------------------------------
# command implementations


def cmd_build_vocab(opt: _Options) -> int:
    corpus = _read_corpus(opt.corpus)
    unit_fn = segment_characters if opt.unit == "char" else None
    vocab = (
        build_vocab(corpus, min_count=opt.min_count)
        if unit_fn is None
        else build_vocab(corpus, min_count=opt.min_count, unit_fn=unit_fn)
    )
    vocab.save(opt.output)
    _emit(
        opt,
        {"output": opt.output, "vocab_size": len(vocab), "unit": opt.unit},
        [f"wrote {opt.output}: {len(vocab)} tokens ({opt.unit} units)"],
    )
    return EXIT_OK


def cmd_bpe_train(opt: _Options) -> int:
    corpus = _read_corpus(opt.corpus)
    model = bpe_train(corpus, opt.target_vocab)
    model.save(opt.output)
    _emit(
        opt,
        {
            "output": opt.output,
            "vocab_size": len(model),
            "alphabet": len(model.alphabet),
            "merges": len(model.merges),
        },
        [
            f"wrote {opt.output}: {len(model)} tokens "
            f"({len(model.alphabet)} alphabet + {len(model.merges)} merges)"
        ],
    )
    return EXIT_OK


def cmd_tokenize(opt: _Options) -> int:
    if opt.text is not None:
        text = opt.text
    else:
        text = sys.stdin.read()
        if text.endswith("\n"):
            text = text[:-1]
    text = unicodedata.normalize("NFC", text)
    codec = _load_codec(opt.tokenizer, opt.vocab)
    seq = codec.encode(text)
    rows = [(token_id, codec.surface(token_id)) for token_id in seq.ids]
    _emit(
        opt,
        {"tokens": [{"id": i, "surface": s} for i, s in rows]},
        [f"{i}\t{s}" for i, s in rows],
    )
    return EXIT_OK


def cmd_gen_synth(opt: _Options) -> int:
    corpus = _read_corpus(opt.corpus)
    vocab = build_vocab(corpus)
    atlas = build_atlas(vocab, seed=opt.atlas_seed if opt.atlas_seed is not None else opt.seed)
    names = [n for n in opt.distort.split(",") if n] if opt.distort else []
    render_opts = RenderOpts.from_names(names or ["none"])
    manifest = gen_dataset(
        corpus,
        atlas,
        n_samples=opt.n,
        opts=render_opts,
        seed=opt.seed,
        out_dir=opt.out,
        mode=opt.mode,
        threads=opt.threads,
    )
    _emit(
        opt,
        {
            "manifest": str(manifest),
            "n_samples": opt.n,
            "mode": opt.mode,
            "distortions": render_opts.tags(),
        },
        [f"wrote {opt.n} {opt.mode} samples; manifest at {manifest}"],
    )
    return EXIT_OK


def cmd_train(opt: _Options) -> int:
    if opt.get("stage") is None or opt.get("manifest") is None:
        raise UsageError("train requires --stage and --manifest")
    train_kwargs = {
        key: opt[key]
        for key in (
            "stage",
            "manifest",
            "epochs",
            "batch_size",
            "lr",
            "seed",
            "eval_manifest",
            "eval_every",
            "checkpoint_dir",
            "resume",
            "init_checkpoint",
            "log_path",
            "grad_clip",
        )
        if opt.get(key) is not None
    }
    config = TrainConfig.from_dict(train_kwargs)

    model_config = None
    codec = None
    if not config.resume and not config.init_checkpoint:
        if opt.get("vocab") is None:
            raise UsageError(
                "fresh training requires --vocab (plus --tokenizer) or a checkpoint"
            )
        codec = _load_codec(opt.tokenizer, opt.vocab)
        model_config = ModelConfig(
            vocab_size=len(codec), **{key: opt[key] for key in _MODEL_KEYS}
        )

    def progress(record: dict) -> None:
        if record.get("type") == "step":
            _log(
                opt,
                f"[{record['stage']}] epoch {record['epoch']} step {record['step']} "
                f"loss {record['loss']:.4f}",
            )
        elif record.get("type") == "eval":
            _log(
                opt,
                f"[{record['stage']}] eval at step {record['step']}: "
                f"CER {record['cer']:.4f} WER {record['wer']:.4f}",
            )

    ckpt_path, records = run_stage(
        config, model_config, codec, progress=progress if not opt.quiet else None
    )
    steps = [r for r in records if r.get("type") == "step"]
    result = {
        "checkpoint": str(ckpt_path),
        "stage": config.stage,
        "steps": len(steps),
        "final_loss": steps[-1]["loss"] if steps else None,
    }
    _emit(opt, result, [f"finished {config.stage}: checkpoint at {ckpt_path}"])
    return EXIT_OK


def _report_lines(report: EvalReport) -> list[str]:
    return [
        f"CER {report.cer:.4f}  WER {report.wer:.4f}  ({report.n_samples} samples)"
    ]


def cmd_eval(opt: _Options) -> int:
    if opt.get("hypotheses"):
        report = evaluate_hypotheses(opt.manifest, opt.hypotheses)
    else:
        if opt.get("checkpoint") is None:
            raise UsageError("eval requires --checkpoint (or --hypotheses)")
        report = evaluate(opt.checkpoint, opt.manifest, batch_size=opt.batch_size)
    if opt.get("report"):
        Path(opt.report).write_text(
            json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)
            + "\n",
            encoding="utf-8",
        )
    _emit(opt, report.to_dict(), _report_lines(report))
    return EXIT_OK


def cmd_recognize(opt: _Options) -> int:
    ckpt = load_checkpoint(opt.checkpoint)
    session = InferenceSession(ckpt.params, ckpt.config)
    max_new = opt.max_new
    if opt.get("image"):
        gray = read_pgm(opt.image)
        batch = to_model_input(gray, ckpt.config.image_height, ckpt.config.image_width)[None]
        paths = [opt.image]
    else:
        manifest = Path(opt.manifest)
        records = load_manifest(manifest)
        if not records:
            raise ValueError(f"{manifest}: empty manifest")
        batch = load_images(records, manifest.parent, ckpt.config)
        paths = [r["image"] for r in records]
    texts = transcribe(
        session, ckpt.codec, batch, batch_size=opt.batch_size, max_new=max_new
    )
    if opt.get("manifest"):
        out_path = Path(opt.output)
        with open(out_path, "w", encoding="utf-8") as fh:
            for path, text in zip(paths, texts):
                fh.write(
                    json.dumps({"image": path, "text": text}, ensure_ascii=False, sort_keys=True)
                    + "\n"
                )
        _log(opt, f"wrote hypotheses to {out_path}")
    _emit(
        opt,
        {"transcripts": [{"image": p, "text": t} for p, t in zip(paths, texts)]},
        [f"{p}\t{t}" for p, t in zip(paths, texts)],
    )
    return EXIT_OK


def cmd_bench(opt: _Options) -> int:
    report = bench(
        opt.checkpoint,
        opt.manifest,
        repeats=opt.repeats,
        batch_size=opt.batch_size,
        max_new=opt.max_new,
    )
    lines = [
        f"run {i + 1}: {r['words_per_s']:.2f} words/s ({r['seconds']:.3f}s)"
        for i, r in enumerate(report["runs"])
    ]
    lines.append(f"mean: {report['mean_words_per_s']:.2f} words/s over {report['repeats']} runs")
    _emit(opt, report, lines)
    return EXIT_OK


def cmd_count_params(opt: _Options) -> int:
    if opt.get("checkpoint"):
        config = load_checkpoint(opt.checkpoint).config
    else:
        if opt.get("vocab_size") is None:
            if opt.get("vocab") is None:
                raise UsageError("count-params needs --vocab-size, --vocab, or --checkpoint")
            vocab_size = len(_load_codec(opt.tokenizer, opt.vocab))
        else:
            vocab_size = opt.vocab_size
        config = ModelConfig(
            vocab_size=vocab_size, **{key: opt[key] for key in _MODEL_KEYS}
        )
    total = count_params(config)
    _emit(
        opt,
        {"params": total, "config": config.to_dict()},
        [str(total)],
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser plumbing


class UsageError(Exception):
    """Bad flag combinations discovered after argparse."""


_DEFAULTS: dict[str, dict] = {
    "build-vocab": {"min_count": 1, "unit": "grapheme"},
    "bpe-train": {"target_vocab": 1000},
    "tokenize": {"text": None},
    "gen-synth": {
        "n": 100,
        "mode": "word",
        "distort": "",
        "atlas_seed": None,
        "threads": 1,
    },
    "train": {
        "stage": None,
        "manifest": None,
        "epochs": None,
        "batch_size": None,
        "lr": None,
        "eval_manifest": None,
        "eval_every": None,
        "checkpoint_dir": None,
        "resume": None,
        "init_checkpoint": None,
        "log_path": None,
        "grad_clip": None,
        "tokenizer": "grapheme",
        "vocab": None,
        "quiet": False,
        "image_height": 32,
        "image_width": 128,
        "patch_height": 4,
        "patch_width": 8,
        "d_model": 768,
        "n_layers": 12,
        "n_heads": 12,
        "max_seq": 256,
        "dropout": 0.1,
    },
    "eval": {
        "checkpoint": None,
        "hypotheses": None,
        "report": None,
        "batch_size": 32,
    },
    "recognize": {
        "image": None,
        "manifest": None,
        "output": "hypotheses.jsonl",
        "batch_size": 32,
        "max_new": None,
    },
    "bench": {"repeats": 5, "batch_size": 32, "max_new": None},
    "count-params": {
        "vocab_size": None,
        "vocab": None,
        "checkpoint": None,
        "tokenizer": "grapheme",
        "image_height": 32,
        "image_width": 128,
        "patch_height": 4,
        "patch_width": 8,
        "d_model": 768,
        "n_layers": 12,
        "n_heads": 12,
        "max_seq": 256,
        "dropout": 0.1,
    },
}

_HANDLERS = {
    "build-vocab": cmd_build_vocab,
    "bpe-train": cmd_bpe_train,
    "tokenize": cmd_tokenize,
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "recognize": cmd_recognize,
    "bench": cmd_bench,
    "count-params": cmd_count_params,
}


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--image-height", type=int, default=argparse.SUPPRESS)
    p.add_argument("--image-width", type=int, default=argparse.SUPPRESS)
    p.add_argument("--patch-height", type=int, default=argparse.SUPPRESS)
    p.add_argument("--patch-width", type=int, default=argparse.SUPPRESS)
    p.add_argument("--d-model", type=int, default=argparse.SUPPRESS)
    p.add_argument("--n-layers", type=int, default=argparse.SUPPRESS)
    p.add_argument("--n-heads", type=int, default=argparse.SUPPRESS)
    p.add_argument("--max-seq", type=int, default=argparse.SUPPRESS)
    p.add_argument("--dropout", type=float, default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bnhtr",
        description="Bengali handwriting recognition pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def new_command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
        p.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
        return p

    p = new_command("build-vocab", "build a grapheme/char vocabulary file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--min-count", type=int, default=argparse.SUPPRESS)
    p.add_argument("--unit", choices=("grapheme", "char"), default=argparse.SUPPRESS)

    p = new_command("bpe-train", "train a BPE model file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--target-vocab", type=int, default=argparse.SUPPRESS)

    p = new_command("tokenize", "print token ids and surfaces for text")
    p.add_argument("--tokenizer", choices=TOKENIZER_KINDS, required=True)
    p.add_argument("--vocab", required=True, help="vocab or BPE model file")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--text", default=argparse.SUPPRESS)
    group.add_argument("--stdin", action="store_true", default=argparse.SUPPRESS)

    p = new_command("gen-synth", "generate a synthetic labeled dataset")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=argparse.SUPPRESS)
    p.add_argument("--mode", choices=("word", "line"), default=argparse.SUPPRESS)
    p.add_argument(
        "--distort",
        default=argparse.SUPPRESS,
        help="comma list of bend,wave,blur,fragment,noise, or 'all'/'none'",
    )
    p.add_argument("--atlas-seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    p = new_command("train", "run one training stage")
    p.add_argument("--stage", choices=("pretrain_line", "pretrain_word", "finetune"),
                   default=argparse.SUPPRESS)
    p.add_argument("--manifest", default=argparse.SUPPRESS)
    p.add_argument("--epochs", type=int, default=argparse.SUPPRESS)
    p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    p.add_argument("--lr", type=float, default=argparse.SUPPRESS)
    p.add_argument("--eval-manifest", default=argparse.SUPPRESS)
    p.add_argument("--eval-every", type=int, default=argparse.SUPPRESS)
    p.add_argument("--checkpoint-dir", default=argparse.SUPPRESS)
    p.add_argument("--resume", default=argparse.SUPPRESS)
    p.add_argument("--init-checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--log-path", default=argparse.SUPPRESS)
    p.add_argument("--grad-clip", type=float, default=argparse.SUPPRESS)
    p.add_argument("--tokenizer", choices=TOKENIZER_KINDS, default=argparse.SUPPRESS)
    p.add_argument("--vocab", default=argparse.SUPPRESS)
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    _add_model_flags(p)

    p = new_command("eval", "score a checkpoint or a hypotheses file")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--hypotheses", default=argparse.SUPPRESS)
    p.add_argument("--report", default=argparse.SUPPRESS, help="write report JSON here")
    p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)

    p = new_command("recognize", "transcribe an image or a manifest")
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--image", default=argparse.SUPPRESS)
    group.add_argument("--manifest", default=argparse.SUPPRESS)
    p.add_argument("--output", default=argparse.SUPPRESS, help="hypotheses JSONL path")
    p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    p.add_argument("--max-new", type=int, default=argparse.SUPPRESS)

    p = new_command("bench", "measure decoding throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--repeats", type=int, default=argparse.SUPPRESS)
    p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    p.add_argument("--max-new", type=int, default=argparse.SUPPRESS)

    p = new_command("count-params", "print the learnable parameter count")
    p.add_argument("--vocab-size", type=int, default=argparse.SUPPRESS)
    p.add_argument("--vocab", default=argparse.SUPPRESS)
    p.add_argument("--tokenizer", choices=TOKENIZER_KINDS, default=argparse.SUPPRESS)
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    _add_model_flags(p)

    return parser


def _effective_options(args: argparse.Namespace) -> _Options:
    command = args.command
    explicit = {k: v for k, v in vars(args).items() if k != "command"}
    options = _Options({"seed": 0, "json": False, "config": None})
    options.update(_DEFAULTS.get(command, {}))

    config_path = explicit.get("config")
    if config_path:
        try:
            config_data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file: {exc}") from None
        if not isinstance(config_data, dict):
            raise ManifestError(f"{config_path}: config root must be a JSON object")
        section = config_data.get(command, {})
        if not isinstance(section, dict):
            raise ManifestError(f"{config_path}: section {command!r} must be an object")
        unknown = set(section) - set(options)
        if unknown:
            raise ManifestError(
                f"{config_path}: unknown keys for {command}: {sorted(unknown)}"
            )
        options.update(section)

    options.update(explicit)
    return options


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        options = _effective_options(args)
        return _HANDLERS[args.command](options)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BrokenPipeError:
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
