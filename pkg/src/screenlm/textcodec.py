"""Byte-level BPE tokenizer with the special tokens both model families use."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

MASK = "<mask>"
PAD = "<pad>"
BOS = "<s>"
EOS = "</s>"
IMG_BEGIN = "<img>"
IMG_NL = "<img_nl>"
IMG_END = "</img>"
SPECIAL_TOKENS = (MASK, PAD, BOS, EOS, IMG_BEGIN, IMG_NL, IMG_END)
N_BYTES = 256
FIRST_MERGE_ID = N_BYTES + len(SPECIAL_TOKENS)
PAD_ID = N_BYTES + SPECIAL_TOKENS.index(PAD)

_CHUNK_RE = re.compile(r" ?\S+|\s+")


@lru_cache(maxsize=None)
def _byte_symbols() -> tuple[str, ...]:
    """Printable stand-in character for every byte (GPT-2 style), used in vocab files."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    symbols = {}
    extra = 0
    for b in range(256):
        if b in keep:
            symbols[b] = chr(b)
        else:
            symbols[b] = chr(256 + extra)
            extra += 1
    return tuple(symbols[b] for b in range(256))


def _bytes_to_symbols(b: bytes) -> str:
    table = _byte_symbols()
    return "".join(table[x] for x in b)


@dataclass
class Vocab:
    """Token table: ids 0-255 are bytes, then the special tokens, then merges in order."""

    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self._bytes: list[bytes | None] = [bytes([i]) for i in range(N_BYTES)]
        self._bytes += [None] * len(SPECIAL_TOKENS)
        self._ranks: dict[tuple[int, int], int] = {}
        for rank, (a, b) in enumerate(self.merges):
            self._bytes.append(self._bytes[a] + self._bytes[b])
            self._ranks[(a, b)] = rank
        self._cache: dict[str, tuple[int, ...]] = {}

    @property
    def size(self) -> int:
        return len(self._bytes)

    def __len__(self):
        return self.size

    def special_id(self, token: str) -> int:
        return N_BYTES + SPECIAL_TOKENS.index(token)

    @property
    def mask_id(self) -> int:
        return self.special_id(MASK)

    @property
    def pad_id(self) -> int:
        return self.special_id(PAD)

    @property
    def bos_id(self) -> int:
        return self.special_id(BOS)

    @property
    def eos_id(self) -> int:
        return self.special_id(EOS)

    @property
    def img_begin_id(self) -> int:
        return self.special_id(IMG_BEGIN)

    @property
    def img_nl_id(self) -> int:
        return self.special_id(IMG_NL)

    @property
    def img_end_id(self) -> int:
        return self.special_id(IMG_END)

    def is_special(self, token_id: int) -> bool:
        return N_BYTES <= token_id < FIRST_MERGE_ID

    def token_bytes(self, token_id: int) -> bytes:
        if not 0 <= token_id < self.size:
            raise ValueError(f"invalid token id {token_id} (vocab size {self.size})")
        b = self._bytes[token_id]
        if b is None:
            return SPECIAL_TOKENS[token_id - N_BYTES].encode()
        return b

    def token_string(self, token_id: int) -> str:
        """Representation used in vocab files."""
        if self.is_special(token_id):
            return SPECIAL_TOKENS[token_id - N_BYTES]
        return _bytes_to_symbols(self.token_bytes(token_id))

    def _encode_chunk(self, chunk: str) -> tuple[int, ...]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        ids = list(chunk.encode("utf-8"))
        while len(ids) > 1:
            best = None
            for i in range(len(ids) - 1):
                r = self._ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best is None or r < best):
                    best = r
            if best is None:
                break
            pair = self.merges[best]
            ids = _merge(ids, pair, FIRST_MERGE_ID + best)
        out = tuple(ids)
        if len(self._cache) < 200_000:
            self._cache[chunk] = out
        return out

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for chunk in _CHUNK_RE.findall(text):
            ids.extend(self._encode_chunk(chunk))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if self.is_special(i):
                parts.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
                parts.append(SPECIAL_TOKENS[i - N_BYTES])
            else:
                buf += self.token_bytes(i)
        parts.append(buf.decode("utf-8", errors="replace"))
        return "".join(parts)

    # -- persistence --

    def to_text(self) -> str:
        lines = [f"ptpvocab 1 {self.size}"]
        lines += [f"{self.token_string(i)}\t{i}" for i in range(self.size)]
        lines.append("#merges")
        lines += [f"{self.token_string(a)}\t{self.token_string(b)}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        head = lines[0].split(" ")
        if len(head) != 3 or head[0] != "ptpvocab" or head[1] != "1":
            raise ValueError(f"bad vocab header: {lines[0]!r}")
        size = int(head[2])
        by_string: dict[str, int] = {}
        for n, line in enumerate(lines[1 : 1 + size], start=2):
            tok, _, idx = line.rpartition("\t")
            if int(idx) != n - 2:
                raise ValueError(f"line {n}: expected id {n - 2}, got {idx}")
            by_string[tok] = int(idx)
        if lines[1 + size] != "#merges":
            raise ValueError("missing #merges section")
        merges = []
        for line in lines[2 + size :]:
            a, b = line.split("\t")
            merges.append((by_string[a], by_string[b]))
        vocab = cls(merges)
        if vocab.size != size:
            raise ValueError(f"header says {size} tokens, merges give {vocab.size}")
        for tok, idx in by_string.items():
            if vocab.token_string(idx) != tok:
                raise ValueError(f"token {idx} is {vocab.token_string(idx)!r} in merges but {tok!r} in table")
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _merge(ids: Sequence[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    n = len(ids)
    a, b = pair
    while i < n:
        if i < n - 1 and ids[i] == a and ids[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_bpe(corpus: Sequence[str], vocab_size: int) -> Vocab:
    """Greedy byte-level BPE. Stops early if no adjacent pair is left to merge.

    Ties between equally frequent pairs go to the lexicographically smaller
    pair of byte strings. Merges whose bytes spell a special token are skipped.
    """
    if not corpus or not any(corpus):
        raise ValueError("empty corpus")
    if vocab_size < FIRST_MERGE_ID:
        raise ValueError(f"vocab_size must be >= {FIRST_MERGE_ID} (bytes + special tokens)")
    words = Counter()
    for text in corpus:
        words.update(_CHUNK_RE.findall(text))
    seqs = [list(w.encode("utf-8")) for w in words]
    counts = list(words.values())
    token_bytes: list[bytes] = [bytes([i]) for i in range(N_BYTES)] + [b""] * len(SPECIAL_TOKENS)
    forbidden = {t.encode() for t in SPECIAL_TOKENS}
    merges: list[tuple[int, int]] = []
    while FIRST_MERGE_ID + len(merges) < vocab_size:
        pairs: Counter = Counter()
        for seq, c in zip(seqs, counts):
            for p in zip(seq, seq[1:]):
                pairs[p] += c
        best = None
        best_key = None
        for p, c in pairs.items():
            merged = token_bytes[p[0]] + token_bytes[p[1]]
            if merged in forbidden:
                continue
            key = (-c, token_bytes[p[0]], token_bytes[p[1]])
            if best_key is None or key < best_key:
                best, best_key = p, key
        if best is None:
            break
        new_id = FIRST_MERGE_ID + len(merges)
        merges.append(best)
        token_bytes.append(token_bytes[best[0]] + token_bytes[best[1]])
        for k, seq in enumerate(seqs):
            if len(seq) > 1:
                seqs[k] = _merge(seq, best, new_id)
    return Vocab(merges)
