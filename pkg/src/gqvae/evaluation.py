"""Compression and reconstruction metrics, token histograms, and reports.

All metric functions consume a tokenizer adapter: any object with
`tokenize(text) -> TokenizedText` and `token_string(id) -> str`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

from .baselines import BpeModel, bpe_tokenize
from .corpus import CharVocab
from .errors import MetricError
from .model import GQVAE
from .tokenizer import TokenDictionary, TokenizedText
from .tokenizer import tokenize as _gq_tokenize
from .tokenizer import tokenize_with_fallback as _gq_tokenize_fb


@dataclass
class CompressionReport:
    bytes_per_token_no_fallback: float
    bytes_per_token_with_fallback: float
    bits_per_byte: float
    reconstruction_char_accuracy: float
    used_vocab_size: int
    fallback_token_fraction: float


class LearnedTokenizer:
    """Adapter around a trained model plus its extracted dictionary."""

    def __init__(
        self,
        model: GQVAE,
        dictionary: TokenDictionary,
        vocab: CharVocab,
        fallback: bool = False,
    ):
        self.model = model
        self.dictionary = dictionary
        self.vocab = vocab
        self.fallback = fallback

    def tokenize(self, text: str) -> TokenizedText:
        fn = _gq_tokenize_fb if self.fallback else _gq_tokenize
        return fn(text, self.model, self.dictionary, self.vocab)

    def token_string(self, token_id: int) -> str:
        return self.dictionary.id_to_string[token_id]


class BpeTokenizer:
    def __init__(self, model: BpeModel):
        self.model = model

    def tokenize(self, text: str) -> TokenizedText:
        return bpe_tokenize(text, self.model)

    def token_string(self, token_id: int) -> str:
        return self.model.id_to_string[token_id]


class CharTokenizer:
    """One token per character; the trivial lossless baseline."""

    def __init__(self, vocab: CharVocab):
        self.vocab = vocab

    def tokenize(self, text: str) -> TokenizedText:
        ids = self.vocab.encode(text)
        return TokenizedText(
            ids=ids,
            spans=[(i, i + 1) for i in range(len(text))],
            fallback_flags=[False] * len(text),
        )

    def token_string(self, token_id: int) -> str:
        return self.vocab.id_to_char[token_id]


def bytes_per_token(texts: list[str], tokenizer) -> float:
    """Source characters per emitted token."""
    chars = sum(len(t) for t in texts)
    tokens = sum(len(tokenizer.tokenize(t)) for t in texts)
    if chars == 0 or tokens == 0:
        raise MetricError("bytes_per_token is undefined on an empty corpus")
    return chars / tokens


def bits_per_byte(bpt: float, used_vocab: int) -> float:
    if used_vocab < 2:
        raise MetricError(f"bits_per_byte needs a vocabulary of >= 2, got {used_vocab}")
    if bpt <= 0:
        raise MetricError(f"bytes_per_token must be positive, got {bpt}")
    return math.log2(used_vocab) / bpt


def reconstruction_accuracy(texts: list[str], tokenizer) -> float:
    """Fraction of characters inside tokens whose string matches the source span."""
    correct = 0
    total = 0
    for text in texts:
        tok = tokenizer.tokenize(text)
        for token_id, (start, end) in zip(tok.ids, tok.spans):
            total += end - start
            if tokenizer.token_string(token_id) == text[start:end]:
                correct += end - start
    if total == 0:
        raise MetricError("reconstruction_accuracy is undefined on an empty corpus")
    return correct / total


def fallback_fraction(texts: list[str], tokenizer) -> float:
    flags = [f for t in texts for f in tokenizer.tokenize(t).fallback_flags]
    if not flags:
        raise MetricError("fallback_fraction is undefined on an empty corpus")
    return sum(flags) / len(flags)


def token_histogram(
    texts: list[str], tokenizer, top_n: int | None = None
) -> list[tuple[str, int]]:
    """Token string counts, descending; ties break lexicographically."""
    counts: Counter[str] = Counter()
    for text in texts:
        tok = tokenizer.tokenize(text)
        counts.update(tokenizer.token_string(i) for i in tok.ids)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:top_n] if top_n is not None else ranked


def write_histogram_csv(histogram: list[tuple[str, int]], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "token", "count"])
        for rank, (token, count) in enumerate(histogram, start=1):
            writer.writerow([rank, token, count])


def used_vocab_size(texts: list[str], tokenizer) -> int:
    """Distinct canonical ids actually emitted on the corpus."""
    seen: set[int] = set()
    for text in texts:
        seen.update(tokenizer.tokenize(text).ids)
    return len(seen)


def build_report(texts: list[str], tokenizer, fallback_tokenizer=None) -> CompressionReport:
    """Full metric set for one tokenizer (optionally a fallback-enabled twin)."""
    bpt_no_fb = bytes_per_token(texts, tokenizer)
    if fallback_tokenizer is not None:
        bpt_fb = bytes_per_token(texts, fallback_tokenizer)
        fb_frac = fallback_fraction(texts, fallback_tokenizer)
        used = used_vocab_size(texts, fallback_tokenizer)
    else:
        # Already lossless: fallback adds nothing.
        bpt_fb = bpt_no_fb
        fb_frac = 0.0
        used = used_vocab_size(texts, tokenizer)
    return CompressionReport(
        bytes_per_token_no_fallback=bpt_no_fb,
        bytes_per_token_with_fallback=bpt_fb,
        bits_per_byte=bits_per_byte(bpt_no_fb, max(used, 2)),
        reconstruction_char_accuracy=reconstruction_accuracy(texts, tokenizer),
        used_vocab_size=used,
        fallback_token_fraction=fb_frac,
    )


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def compare_report(
    texts: list[str],
    tokenizers: dict[str, tuple],
    out_json: str | Path | None = None,
    out_csv: str | Path | None = None,
    provenance: dict | None = None,
) -> dict:
    """One CompressionReport per named tokenizer, written as JSON and CSV.

    `tokenizers` maps a display name to (tokenizer, fallback_tokenizer_or_None).
    """
    if not tokenizers:
        raise MetricError("compare_report needs at least one tokenizer")
    reports = {
        name: build_report(texts, tok, fb) for name, (tok, fb) in tokenizers.items()
    }
    doc = {name: asdict(rep) for name, rep in reports.items()}
    if provenance:
        doc["provenance"] = provenance
    if out_json is not None:
        Path(out_json).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    if out_csv is not None:
        fields = [f for f in CompressionReport.__dataclass_fields__]
        with Path(out_csv).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tokenizer"] + fields)
            for name, rep in reports.items():
                writer.writerow([name] + [getattr(rep, f) for f in fields])
    return doc
