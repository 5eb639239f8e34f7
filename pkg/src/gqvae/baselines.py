"""Comparison tokenizers: byte-pair encoding and fixed-length gate schedules.

BPE shares the learned tokenizer's pre-split regex so compression numbers are
directly comparable. The fixed-gate helper drives the same model codepath with
hard-set gates.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import torch

from .corpus import GPT2_SPLIT_PATTERN, CharVocab, pre_split
from .errors import ConfigError, UnknownCharacterError, UnknownTokenError
from .tokenizer import TOKENIZER_FORMAT_VERSION, TokenizedText

BPE_PAD_KEY = "<pad>"


@dataclass
class BpeModel:
    base_vocab: CharVocab
    merges: list[tuple[str, str]]  # ordered; parts always exist when applied
    vocab: dict[str, int]  # string -> id (includes the pad placeholder)
    pattern: str = GPT2_SPLIT_PATTERN

    @property
    def id_to_string(self) -> dict[int, str]:
        return {i: s for s, i in self.vocab.items()}


def bpe_train(
    texts: list[str],
    target_vocab_size: int,
    pattern: str = GPT2_SPLIT_PATTERN,
) -> BpeModel:
    """Learn merges by repeatedly joining the most frequent adjacent pair.

    Pair counts are weighted by piece frequency. Ties break lexicographically
    on the pair. Training stops at the target size or when no pair occurs at
    least twice.
    """
    base_vocab = CharVocab.build(texts)
    if target_vocab_size < base_vocab.size:
        raise ConfigError(
            f"target vocab size {target_vocab_size} < base size {base_vocab.size}"
        )
    piece_counts: Counter[str] = Counter()
    for text in texts:
        piece_counts.update(p for p in pre_split(text, pattern) if p)

    sequences: dict[str, list[str]] = {p: list(p) for p in piece_counts}
    merges: list[tuple[str, str]] = []
    vocab_size = base_vocab.size
    while vocab_size + len(merges) < target_vocab_size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for piece, symbols in sequences.items():
            weight = piece_counts[piece]
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] += weight
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == best_count)
        merges.append(best)
        for piece in sequences:
            sequences[piece] = _apply_merge(sequences[piece], best)

    vocab: dict[str, int] = {}
    for c in sorted(base_vocab.char_to_id):
        vocab[c] = base_vocab.char_to_id[c]
    vocab[BPE_PAD_KEY] = base_vocab.pad_id
    next_id = base_vocab.size
    for a, b in merges:
        vocab[a + b] = next_id
        next_id += 1
    return BpeModel(base_vocab=base_vocab, merges=merges, vocab=vocab, pattern=pattern)


def _apply_merge(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_tokenize(text: str, model: BpeModel, on_unknown: str = "error") -> TokenizedText:
    """Apply the learned merges in order within each pre-split piece."""
    result = TokenizedText(ids=[], spans=[], fallback_flags=[])
    offset = 0
    for piece in pre_split(text, model.pattern):
        if not piece:
            continue
        symbols = []
        for i, c in enumerate(piece):
            if c not in model.base_vocab.char_to_id:
                if on_unknown == "error":
                    raise UnknownCharacterError(c, offset + i)
                symbols.append(c)  # passes through; maps to the pad placeholder id
            else:
                symbols.append(c)
        for pair in model.merges:
            symbols = _apply_merge(symbols, pair)
        for s in symbols:
            result.ids.append(model.vocab.get(s, model.base_vocab.pad_id))
            result.spans.append((offset, offset + len(s)))
            result.fallback_flags.append(False)
            offset += len(s)
    return result


def bpe_detokenize(ids: list[int], model: BpeModel) -> str:
    table = model.id_to_string
    out = []
    for i in ids:
        if i not in table:
            raise UnknownTokenError(i)
        out.append(table[i])
    return "".join(out)


def export_bpe(model: BpeModel, path: str | Path) -> None:
    """Write the shared tokenizer JSON format with an ordered merges array."""
    doc = {
        "version": TOKENIZER_FORMAT_VERSION,
        "model_type": "bpe",
        "vocab": dict(sorted(model.vocab.items(), key=lambda kv: kv[1])),
        "merges": [[a, b] for a, b in model.merges],
        "pretokenizer_regex": model.pattern,
        "fallback_chars": {
            c: i for c, i in model.vocab.items() if len(c) == 1
        },
        "max_token_len": max((len(s) for s in model.vocab), default=1),
    }
    Path(path).write_text(json.dumps(doc, ensure_ascii=False), encoding="utf-8")


def fixed_gates(t_len: int, k: int) -> torch.Tensor:
    """Hard gate schedule: 1 every k positions and at the final position."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    g = torch.zeros(t_len)
    g[k - 1 : t_len : k] = 1.0
    if t_len > 0:
        g[t_len - 1] = 1.0
    return g
