"""Text ingestion: regex pre-splitting, chunking, character vocabulary, batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import regex
import torch

from .errors import ConfigError, CorpusError, UnknownCharacterError

# The GPT-2 pre-tokenization pattern. Ships as an overridable default.
GPT2_SPLIT_PATTERN = (
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass
class CharVocab:
    """Bijective character <-> id mapping with a reserved pad id.

    Ids are contiguous in [0, size). Corpus characters are assigned ids in
    codepoint order; pad (and the optional unknown slot) come last so rebuilds
    over the same corpus are reproducible.
    """

    char_to_id: dict[str, int]
    id_to_char: dict[int, str]
    pad_id: int
    unk_id: int | None = None

    @property
    def size(self) -> int:
        return len(self.id_to_char)

    @classmethod
    def build(cls, corpus_stream: Iterable[str], with_unknown: bool = False) -> "CharVocab":
        """Build a vocabulary covering every distinct character in the stream."""
        chars: set[str] = set()
        for text in corpus_stream:
            chars.update(text)
        if not chars:
            raise CorpusError("cannot build vocabulary: no characters observed")
        char_to_id = {c: i for i, c in enumerate(sorted(chars))}
        pad_id = len(char_to_id)
        id_to_char = {i: c for c, i in char_to_id.items()}
        id_to_char[pad_id] = PAD_TOKEN
        unk_id = None
        if with_unknown:
            unk_id = pad_id + 1
            id_to_char[unk_id] = UNK_TOKEN
        return cls(char_to_id=char_to_id, id_to_char=id_to_char, pad_id=pad_id, unk_id=unk_id)

    def encode(self, text: str, on_unknown: str = "error") -> list[int]:
        """Map text to ids. `on_unknown` is "error" or "substitute"."""
        ids = []
        for i, c in enumerate(text):
            idx = self.char_to_id.get(c)
            if idx is None:
                if on_unknown == "substitute":
                    if self.unk_id is None:
                        raise ConfigError(
                            "substitution requested but vocabulary has no unknown slot"
                        )
                    idx = self.unk_id
                else:
                    raise UnknownCharacterError(c, i)
            ids.append(idx)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.id_to_char[i] for i in ids)

    def to_json(self) -> dict:
        out = {"chars": dict(self.char_to_id), "pad_id": self.pad_id}
        if self.unk_id is not None:
            out["unk_id"] = self.unk_id
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CharVocab":
        char_to_id = dict(obj["chars"])
        pad_id = int(obj["pad_id"])
        id_to_char = {int(i): c for c, i in char_to_id.items()}
        id_to_char[pad_id] = PAD_TOKEN
        unk_id = obj.get("unk_id")
        if unk_id is not None:
            unk_id = int(unk_id)
            id_to_char[unk_id] = UNK_TOKEN
        return cls(char_to_id=char_to_id, id_to_char=id_to_char, pad_id=pad_id, unk_id=unk_id)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CharVocab":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Chunk:
    """A run of at most `s_max` characters from one pre-split piece."""

    char_ids: list[int]
    source_text: str


@dataclass
class Batch:
    """Right-padded id matrix plus its validity mask (True = real character)."""

    ids: torch.Tensor  # (B, S_max) long
    pad_mask: torch.Tensor  # (B, S_max) bool
    chunks: list[Chunk] = field(default_factory=list)


def pre_split(text: str, pattern: str = GPT2_SPLIT_PATTERN) -> list[str]:
    """Split text into pre-tokenization pieces whose concatenation is the text."""
    try:
        compiled = regex.compile(pattern)
    except regex.error as exc:
        raise ConfigError(f"invalid pre-split pattern {pattern!r}: {exc}") from exc
    pieces = compiled.findall(text)
    joined = "".join(pieces)
    if joined != text:
        raise ConfigError(
            f"pre-split pattern {pattern!r} does not cover the input losslessly"
        )
    return pieces


def chunk(piece: str, s_max: int) -> list[str]:
    """Greedy left-to-right split of a piece into runs of at most s_max chars."""
    if s_max < 1:
        raise ConfigError(f"s_max must be >= 1, got {s_max}")
    return [piece[i : i + s_max] for i in range(0, len(piece), s_max)]


def build_char_vocab(corpus_stream: Iterable[str], with_unknown: bool = False) -> CharVocab:
    return CharVocab.build(corpus_stream, with_unknown=with_unknown)


def chunk_text(
    text: str,
    s_max: int,
    pattern: str = GPT2_SPLIT_PATTERN,
    drop_whitespace: bool = False,
) -> list[str]:
    """pre_split + chunk over a whole document; returns chunk texts in order."""
    out: list[str] = []
    for piece in pre_split(text, pattern):
        if not piece:
            continue
        if drop_whitespace and piece.isspace():
            continue
        out.extend(chunk(piece, s_max))
    return out


def make_chunks(
    texts: Iterable[str],
    vocab: CharVocab,
    s_max: int,
    pattern: str = GPT2_SPLIT_PATTERN,
    drop_whitespace: bool = False,
    on_unknown: str = "error",
) -> list[Chunk]:
    """Chunk a corpus and encode every chunk through the vocabulary."""
    chunks = []
    for text in texts:
        for piece in chunk_text(text, s_max, pattern, drop_whitespace):
            chunks.append(Chunk(char_ids=vocab.encode(piece, on_unknown), source_text=piece))
    return chunks


def batch(
    chunks: Sequence[Chunk],
    batch_size: int,
    vocab: CharVocab,
    s_max: int,
    seed: int | None = None,
) -> Iterator[Batch]:
    """Yield padded batches covering every chunk exactly once.

    With a seed, chunk order is a deterministic shuffle; without, corpus order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(chunks)))
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
        order = torch.randperm(len(chunks), generator=gen).tolist()
    for start in range(0, len(order), batch_size):
        sel = [chunks[i] for i in order[start : start + batch_size]]
        yield collate(sel, vocab, s_max)


def collate(chunks: Sequence[Chunk], vocab: CharVocab, s_max: int) -> Batch:
    ids = torch.full((len(chunks), s_max), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(chunks), s_max), dtype=torch.bool)
    for r, ch in enumerate(chunks):
        n = len(ch.char_ids)
        if n < 1 or n > s_max:
            raise ConfigError(f"chunk length {n} outside [1, {s_max}]")
        ids[r, :n] = torch.tensor(ch.char_ids, dtype=torch.long)
        mask[r, :n] = True
    return Batch(ids=ids, pad_mask=mask, chunks=list(chunks))


def load_corpus(path: str | Path) -> list[str]:
    """Read a UTF-8 text file, or every *.txt file in a directory (sorted)."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.txt"))
        if not files:
            raise CorpusError(f"no *.txt files in directory {p}")
        return [f.read_text(encoding="utf-8") for f in files]
    if not p.exists():
        raise CorpusError(f"corpus path does not exist: {p}")
    return [p.read_text(encoding="utf-8")]
