"""Byte-level tokenizer with an optional BPE-style merge table.

Ids 0..255 are raw bytes, 256 is BOS, 257 is EOS, and merge products are
numbered from 258 in table order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .errors import InvalidMergeTable, InvalidText

BOS = 256
EOS = 257
FIRST_MERGE = 258


@dataclass(frozen=True)
class MergeTable:
    merges: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        for rank, (left, right, result) in enumerate(self.merges):
            if result != FIRST_MERGE + rank:
                raise InvalidMergeTable(f"merge {rank}: result {result} should be {FIRST_MERGE + rank}")
            for side in (left, right):
                if side in (BOS, EOS) or not 0 <= side < result:
                    raise InvalidMergeTable(f"merge {rank}: operand {side} is not a previously defined id")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> MergeTable:
        return cls(tuple((a, b, FIRST_MERGE + i) for i, (a, b) in enumerate(pairs)))

    @classmethod
    def load(cls, path: str | Path) -> MergeTable:
        """Read a merge file: one ``left right`` pair per line, ``#`` comments."""
        pairs = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or not all(p.isdigit() for p in parts):
                raise InvalidMergeTable(f"{path}:{lineno}: expected 'left right'")
            pairs.append((int(parts[0]), int(parts[1])))
        return cls.from_pairs(pairs)

    def dump(self) -> str:
        return "".join(f"{a} {b}\n" for a, b, _ in self.merges)

    def __len__(self) -> int:
        return len(self.merges)


NO_MERGES = MergeTable()


class Decoded(NamedTuple):
    text: str
    lossy: bool


class Tokenizer:
    """Tokenizer bound to one merge table, with per-token byte/text tables cached."""

    def __init__(self, merges: MergeTable | None = None):
        self.merges = merges or NO_MERGES
        self.ranks: dict[tuple[int, int], tuple[int, int]] = {}
        for rank, (a, b, result) in enumerate(self.merges.merges):
            # a repeated pair can never fire again; the first rank is the live one
            self.ranks.setdefault((a, b), (rank, result))
        token_bytes = [bytes([i]) for i in range(256)] + [b"", b""]
        for a, b, _ in self.merges.merges:
            token_bytes.append(token_bytes[a] + token_bytes[b])
        self.token_bytes: tuple[bytes, ...] = tuple(token_bytes)
        # text of each token decoded on its own; this is what feedback carries
        self.token_text: tuple[str, ...] = tuple(b.decode("utf-8", "replace") for b in token_bytes)

    @property
    def vocab_size(self) -> int:
        return FIRST_MERGE + len(self.merges)

    def encode(self, text: str | bytes) -> list[int]:
        if isinstance(text, (bytes, bytearray)):
            try:
                data = bytes(text)
                data.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise InvalidText(str(exc)) from None
        else:
            try:
                data = text.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise InvalidText(str(exc)) from None
        ids = list(data)
        if not self.ranks:
            return ids
        ranks = self.ranks
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                hit = ranks.get(pair)
                if hit is not None and (best is None or hit[0] < best[0]):
                    best = hit
            if best is None:
                break
            a, b, result = self.merges.merges[best[0]]
            # all occurrences of the lowest-ranked pair, left to right
            merged = []
            i = 0
            n = len(ids)
            while i < n:
                if i + 1 < n and ids[i] == a and ids[i + 1] == b:
                    merged.append(result)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        return ids

    def token_to_bytes(self, tokens: Sequence[int]) -> bytes:
        table = self.token_bytes
        try:
            return b"".join(table[t] if t >= 0 else _bad_id(t) for t in tokens)
        except IndexError:
            bad = next(t for t in tokens if not 0 <= t < len(table))
            raise InvalidText(f"token id {bad} outside vocabulary of size {len(table)}") from None

    def decode(self, tokens: Sequence[int]) -> Decoded:
        data = self.token_to_bytes(tokens)
        try:
            return Decoded(data.decode("utf-8"), False)
        except UnicodeDecodeError:
            return Decoded(data.decode("utf-8", "replace"), True)


def _bad_id(t: int) -> bytes:
    raise IndexError(t)


@lru_cache(maxsize=32)
def get_tokenizer(merges: MergeTable | None = None) -> Tokenizer:
    return Tokenizer(merges)


def tokenize(text: str | bytes, merges: MergeTable | None = None) -> list[int]:
    return get_tokenizer(merges or NO_MERGES).encode(text)


def detokenize(tokens: Sequence[int], merges: MergeTable | None = None) -> str:
    """Inverse of :func:`tokenize`. Undecodable bytes become U+FFFD; see :func:`decode`."""
    return get_tokenizer(merges or NO_MERGES).decode(tokens).text


def decode(tokens: Sequence[int], merges: MergeTable | None = None) -> Decoded:
    return get_tokenizer(merges or NO_MERGES).decode(tokens)


def vocab_size(merges: MergeTable | None = None) -> int:
    return FIRST_MERGE + (len(merges) if merges else 0)
