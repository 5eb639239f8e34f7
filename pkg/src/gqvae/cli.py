"""Command-line entry point: one binary, subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import baselines, evaluation, tokenizer, trainer
from .errors import ConfigError, GqVaeError
from .corpus import load_corpus
from .model import TrainConfig

log = logging.getLogger("gqvae")


def _setup_logging() -> None:
    level = os.environ.get("GQVAE_LOG_LEVEL", "info").lower()
    mapping = {
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    logging.basicConfig(
        level=mapping.get(level, logging.INFO),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_config(args: argparse.Namespace) -> TrainConfig:
    base: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        base = json.loads(path.read_text(encoding="utf-8"))
    overrides = {
        "seed": getattr(args, "seed", None),
        "alpha": getattr(args, "alpha", None),
        "beta": getattr(args, "beta", None),
        "gamma": getattr(args, "gamma", None),
        "codebook_size": getattr(args, "vocab_size", None),
        "fixed_token_len": getattr(args, "fixed_k", None),
        "total_steps": getattr(args, "steps", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(base)


def _load_model(checkpoint: str):
    state = trainer.load_checkpoint(checkpoint)
    state.model.eval()
    return state


def _dictionary_for(state, tokenizer_path: str | None):
    if tokenizer_path:
        return tokenizer.load_tokenizer(tokenizer_path)
    return tokenizer.extract_dictionary(state.model, state.vocab)


def cmd_train(args) -> int:
    config = _load_config(args)
    out = args.out
    if out is None:
        out = Path("runs") / f"seed{config.seed}"
    state, history = trainer.fit(config, args.corpus, out_dir=out)
    final = history[-1].total if history else float("nan")
    print(f"trained {state.step} steps; final total loss {final:.4f}; outputs in {out}")
    return 0


def cmd_dict(args) -> int:
    state = _load_model(args.checkpoint)
    d = tokenizer.extract_dictionary(state.model, state.vocab)
    if args.out:
        tokenizer.export_tokenizer(d, args.out)
    print(
        f"codebook entries: {len(d.entries)}; unique token strings: "
        f"{len(d.unique_strings)}; fallback chars: {len(d.char_fallback_ids)}"
    )
    return 0


def cmd_export(args) -> int:
    state = _load_model(args.checkpoint)
    d = tokenizer.extract_dictionary(state.model, state.vocab)
    tokenizer.export_tokenizer(d, args.out)
    print(f"wrote tokenizer to {args.out}")
    return 0


def cmd_tokenize(args) -> int:
    state = _load_model(args.checkpoint)
    d = _dictionary_for(state, args.tokenizer)
    if args.text is not None:
        texts = [args.text]
    elif args.corpus is not None:
        texts = load_corpus(args.corpus)
    else:
        texts = [sys.stdin.read()]
    fn = tokenizer.tokenize_with_fallback if args.fallback == "on" else tokenizer.tokenize
    for text in texts:
        tok = fn(text, state.model, d, state.vocab)
        print(" ".join(str(i) for i in tok.ids))
    return 0


def cmd_detokenize(args) -> int:
    d = tokenizer.load_tokenizer(args.tokenizer)
    if args.ids is not None:
        id_lines = [args.ids]
    else:
        id_lines = sys.stdin.read().splitlines()
    for line in id_lines:
        ids = [int(x) for x in line.split()]
        print(tokenizer.detokenize(ids, d))
    return 0


def cmd_bpe_train(args) -> int:
    texts = load_corpus(args.corpus)
    model = baselines.bpe_train(texts, args.vocab_size)
    baselines.export_bpe(model, args.out)
    print(f"trained BPE: {len(model.merges)} merges, vocab {len(model.vocab)}; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    texts = load_corpus(args.corpus)
    state = _load_model(args.checkpoint)
    d = _dictionary_for(state, args.tokenizer)
    plain = evaluation.LearnedTokenizer(state.model, d, state.vocab, fallback=False)
    with_fb = evaluation.LearnedTokenizer(state.model, d, state.vocab, fallback=True)
    if args.fallback == "off":
        named = {"gqvae": (plain, None)}
    elif args.fallback == "on":
        named = {"gqvae": (with_fb, with_fb)}
    else:
        named = {"gqvae": (plain, with_fb)}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = {"checkpoint": str(args.checkpoint), "config": state.config.to_dict()}
    if args.tokenizer:
        provenance["tokenizer_sha256"] = evaluation.file_sha256(args.tokenizer)
    doc = evaluation.compare_report(
        texts,
        named,
        out_json=out_dir / "report.json",
        out_csv=out_dir / "report.csv",
        provenance=provenance,
    )
    if args.top_n:
        hist = evaluation.token_histogram(texts, with_fb, top_n=args.top_n)
        evaluation.write_histogram_csv(hist, out_dir / "histogram.csv")
    for name, rep in doc.items():
        if name == "provenance":
            continue
        print(
            f"{name}: bytes/token {rep['bytes_per_token_no_fallback']:.3f} "
            f"(fallback {rep['bytes_per_token_with_fallback']:.3f}), "
            f"accuracy {rep['reconstruction_char_accuracy']:.3f}, "
            f"used vocab {rep['used_vocab_size']}"
        )
    return 0


def cmd_export_ids(args) -> int:
    texts = load_corpus(args.corpus)
    state = _load_model(args.checkpoint)
    d = _dictionary_for(state, args.tokenizer)
    sidecar = tokenizer.export_ids(
        texts, state.model, d, state.vocab, args.out, fallback=args.fallback != "off"
    )
    print(json.dumps(sidecar))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gqvae", description="Learned variable-length tokenizer toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", help="JSON config file mirroring TrainConfig")
    p.add_argument("--corpus", required=True, help="text file or directory of *.txt")
    p.add_argument("--out", help="run directory for checkpoints and metrics")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--vocab-size", type=int, help="codebook size")
    p.add_argument("--fixed-k", type=int, help="train the fixed-length baseline")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("dict", help="summarize the extracted token dictionary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="optionally also write the tokenizer JSON")
    p.set_defaults(fn=cmd_dict)

    p = sub.add_parser("export", help="export the tokenizer JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("tokenize", help="print token ids for text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", help="tokenizer JSON (default: extract from checkpoint)")
    p.add_argument("--text")
    p.add_argument("--corpus")
    p.add_argument("--fallback", choices=["on", "off"], default="on")
    p.set_defaults(fn=cmd_tokenize)

    p = sub.add_parser("detokenize", help="reconstruct text from ids")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--ids", help="space-separated ids (default: read lines from stdin)")
    p.set_defaults(fn=cmd_detokenize)

    p = sub.add_parser("bpe-train", help="train the BPE baseline")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bpe_train)

    p = sub.add_parser("eval", help="compression and reconstruction report")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--fallback", choices=["on", "off", "both"], default="both")
    p.add_argument("--top-n", type=int, default=0, help="also write a token histogram")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-ids", help="write a uint32 id stream for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer")
    p.add_argument("--out", required=True)
    p.add_argument("--fallback", choices=["on", "off"], default="on")
    p.set_defaults(fn=cmd_export_ids)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except GqVaeError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
