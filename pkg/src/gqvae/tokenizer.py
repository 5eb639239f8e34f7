"""Static tokenizer extraction and inference.

A trained model is distilled into a TokenDictionary: every codebook entry is
decoded once into a (string, length) pair, duplicates are collapsed onto the
lowest codebook index, and every vocabulary character gets a single-character
fallback id. Tokenization selects gate-marked positions; the fallback variant
repairs any token whose dictionary string disagrees with its source span, which
makes round trips lossless by construction.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .corpus import CharVocab, Chunk, chunk, collate, pre_split
from .errors import CheckpointError, ConfigError, UnknownTokenError
from .losses import predicted_mask
from .model import GQVAE

log = logging.getLogger(__name__)

TOKENIZER_FORMAT_VERSION = 1
_INFERENCE_BATCH = 256


@dataclass
class TokenDictionary:
    """The extracted static tokenizer."""

    entries: dict[int, tuple[str, int]]  # codebook index -> (string, length)
    unique_strings: dict[str, int]  # string -> canonical id
    char_fallback_ids: dict[str, int]  # every vocab char -> token id
    max_token_len: int
    pre_split_pattern: str
    _canonical: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._canonical:
            self._canonical = {
                k: self.unique_strings[s] for k, (s, _) in self.entries.items()
            }

    @property
    def id_to_string(self) -> dict[int, str]:
        out = {i: s for s, i in self.unique_strings.items()}
        out.update({i: c for c, i in self.char_fallback_ids.items()})
        return out

    @property
    def vocab_size(self) -> int:
        return len({*self.unique_strings.values(), *self.char_fallback_ids.values()})

    def canonical_id(
        self,
        codebook_index: int,
        model: GQVAE | None = None,
        vocab: CharVocab | None = None,
    ) -> int:
        """Canonical token id for a codebook index.

        Dictionaries loaded from file only know canonical entries; missing
        indices are resolved by decoding the model's codebook once and mapping
        through the string table.
        """
        hit = self._canonical.get(codebook_index)
        if hit is not None:
            return hit
        if model is None or vocab is None:
            raise UnknownTokenError(codebook_index)
        for k, (s, length) in _decode_entries(model, vocab).items():
            if k not in self._canonical and s in self.unique_strings:
                self._canonical[k] = self.unique_strings[s]
                self.entries.setdefault(k, (s, length))
        if codebook_index not in self._canonical:
            raise UnknownTokenError(codebook_index)
        return self._canonical[codebook_index]


@dataclass
class TokenizedText:
    ids: list[int]
    spans: list[tuple[int, int]]  # (start, end) character offsets, end exclusive
    fallback_flags: list[bool]

    def __len__(self) -> int:
        return len(self.ids)


def extract_dictionary(model: GQVAE, vocab: CharVocab) -> TokenDictionary:
    """Decode all codebook entries into the static token dictionary."""
    decoded = _decode_entries(model, vocab)
    unique: dict[str, int] = {}
    for k in sorted(decoded):
        s, _ = decoded[k]
        if s not in unique:
            unique[s] = k
    fallback: dict[str, int] = {}
    next_id = model.config.codebook_size
    for c in sorted(vocab.char_to_id):
        if c in unique:
            fallback[c] = unique[c]
        else:
            fallback[c] = next_id
            next_id += 1
    return TokenDictionary(
        entries=decoded,
        unique_strings=unique,
        char_fallback_ids=fallback,
        max_token_len=model.config.max_token_len,
        pre_split_pattern=model.config.pre_split_pattern,
    )


def _decode_entries(model: GQVAE, vocab: CharVocab) -> dict[int, tuple[str, int]]:
    model.eval()
    with torch.no_grad():
        char_logits, length_logits = model.decode(model.codebook.vectors)
    lengths = (predicted_mask(length_logits) > 0.5).sum(dim=-1).clamp(min=1)
    char_ids = char_logits.argmax(dim=-1)  # (|V|, w); slot i predicts c_{t-i}

    entries: dict[int, tuple[str, int]] = {}
    truncated = 0
    for k in range(model.config.codebook_size):
        length = int(lengths[k].item())
        # Slot L-1 holds the earliest character; descending slots read left to right.
        raw = [int(char_ids[k, i].item()) for i in range(length - 1, -1, -1)]
        text = []
        for cid in raw:
            if cid == vocab.pad_id or cid == vocab.unk_id:
                truncated += 1
                break
            text.append(vocab.id_to_char[cid])
        if not text:
            # Clamp to a single character: best non-pad char at slot 0.
            logits0 = char_logits[k, 0].clone()
            logits0[vocab.pad_id] = float("-inf")
            if vocab.unk_id is not None:
                logits0[vocab.unk_id] = float("-inf")
            text = [vocab.id_to_char[int(logits0.argmax().item())]]
        entries[k] = ("".join(text), len(text))
    if truncated:
        log.debug("%d codebook entries decoded a pad character and were truncated", truncated)
    return entries


def _chunk_records(text: str, model: GQVAE):
    """(chunk, global_start_offset) pairs for a document."""
    cfg = model.config
    out = []
    offset = 0
    for piece in pre_split(text, cfg.pre_split_pattern):
        if not piece:
            continue
        if cfg.drop_whitespace_pieces and piece.isspace():
            offset += len(piece)
            continue
        for part in chunk(piece, cfg.chunk_len):
            out.append((part, offset))
            offset += len(part)
    return out


def tokenize(
    text: str,
    model: GQVAE,
    dictionary: TokenDictionary,
    vocab: CharVocab,
    on_unknown: str = "error",
) -> TokenizedText:
    """Gate-selected tokenization without fallback.

    The final real position of every chunk is forced open so chunks are always
    fully covered; each selected position closes the span back to the previous
    selected position.
    """
    return _tokenize(text, model, dictionary, vocab, fallback=False, on_unknown=on_unknown)


def tokenize_with_fallback(
    text: str,
    model: GQVAE,
    dictionary: TokenDictionary,
    vocab: CharVocab,
    on_unknown: str = "error",
) -> TokenizedText:
    """Lossless tokenization: mismatched tokens become single-character tokens."""
    return _tokenize(text, model, dictionary, vocab, fallback=True, on_unknown=on_unknown)


def _tokenize(
    text: str,
    model: GQVAE,
    dictionary: TokenDictionary,
    vocab: CharVocab,
    fallback: bool,
    on_unknown: str = "error",
) -> TokenizedText:
    if not text:
        return TokenizedText(ids=[], spans=[], fallback_flags=[])
    model.eval()
    records = _chunk_records(text, model)
    chunks = [
        Chunk(char_ids=vocab.encode(piece, on_unknown), source_text=piece)
        for piece, _ in records
    ]

    table = dictionary.id_to_string
    result = TokenizedText(ids=[], spans=[], fallback_flags=[])
    for start in range(0, len(chunks), _INFERENCE_BATCH):
        part = chunks[start : start + _INFERENCE_BATCH]
        offsets = [records[start + j][1] for j in range(len(part))]
        batch = collate(part, vocab, model.config.chunk_len)
        with torch.no_grad():
            out = model(batch.ids, batch.pad_mask)
        for j, ch in enumerate(part):
            n = len(ch.char_ids)
            gates = out.gates[j, :n].clone()
            gates[n - 1] = 1.0  # coverage guarantee
            selected = [t for t in range(n) if gates[t].item() > 0.5]
            prev = 0
            for t in selected:
                span = (offsets[j] + prev, offsets[j] + t + 1)
                span_text = ch.source_text[prev : t + 1]
                token_id = dictionary.canonical_id(
                    int(out.indices[j, t].item()), model, vocab
                )
                token_str = table.get(token_id)
                if fallback and token_str != span_text:
                    for pos, c in enumerate(span_text):
                        result.ids.append(dictionary.char_fallback_ids[c])
                        result.spans.append((span[0] + pos, span[0] + pos + 1))
                        result.fallback_flags.append(True)
                else:
                    result.ids.append(token_id)
                    result.spans.append(span)
                    result.fallback_flags.append(False)
                prev = t + 1
    return result


def detokenize(ids: list[int], dictionary: TokenDictionary) -> str:
    table = dictionary.id_to_string
    out = []
    for i in ids:
        if i not in table:
            raise UnknownTokenError(i)
        out.append(table[i])
    return "".join(out)


def export_tokenizer(dictionary: TokenDictionary, path: str | Path) -> None:
    """Write the word-level tokenizer JSON document."""
    vocab_obj = dict(sorted(dictionary.unique_strings.items(), key=lambda kv: kv[1]))
    if len(vocab_obj) != len(set(vocab_obj.values())):
        raise ConfigError("duplicate ids in vocab; refusing to export")
    if len(dictionary.unique_strings) != len(vocab_obj):
        raise ConfigError("duplicate strings in vocab; refusing to export")
    doc = {
        "version": TOKENIZER_FORMAT_VERSION,
        "model_type": "wordlevel",
        "vocab": vocab_obj,
        "pretokenizer_regex": dictionary.pre_split_pattern,
        "fallback_chars": dict(sorted(dictionary.char_fallback_ids.items())),
        "max_token_len": dictionary.max_token_len,
    }
    Path(path).write_text(json.dumps(doc, ensure_ascii=False), encoding="utf-8")


def load_tokenizer(path: str | Path) -> TokenDictionary:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read tokenizer file {path}: {exc}") from exc
    for key in ("version", "model_type", "vocab", "pretokenizer_regex", "fallback_chars"):
        if key not in doc:
            raise CheckpointError(f"tokenizer file {path}: missing field $.{key}")
    if doc["version"] != TOKENIZER_FORMAT_VERSION:
        raise CheckpointError(
            f"tokenizer file {path}: unsupported version {doc['version']}"
        )
    vocab_obj = {str(s): int(i) for s, i in doc["vocab"].items()}
    entries = {i: (s, len(s)) for s, i in vocab_obj.items()}
    return TokenDictionary(
        entries=entries,
        unique_strings=vocab_obj,
        char_fallback_ids={str(c): int(i) for c, i in doc["fallback_chars"].items()},
        max_token_len=int(doc.get("max_token_len", 10)),
        pre_split_pattern=str(doc["pretokenizer_regex"]),
    )


def export_ids(
    texts: list[str],
    model: GQVAE,
    dictionary: TokenDictionary,
    vocab: CharVocab,
    path: str | Path,
    fallback: bool = True,
) -> dict:
    """Write a flat little-endian uint32 id stream plus a JSON sidecar."""
    path = Path(path)
    num_tokens = 0
    num_chars = 0
    with path.open("wb") as fh:
        for text in texts:
            tok = _tokenize(text, model, dictionary, vocab, fallback=fallback)
            num_tokens += len(tok.ids)
            num_chars += len(text)
            fh.write(struct.pack(f"<{len(tok.ids)}I", *tok.ids))
    sidecar = {
        "vocab_size": dictionary.vocab_size,
        "num_tokens": num_tokens,
        "bytes_per_token": (num_chars / num_tokens) if num_tokens else 0.0,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar), encoding="utf-8"
    )
    return sidecar
