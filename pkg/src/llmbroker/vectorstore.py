"""Append-only persistent vector store with exact cosine top-k search.

File layout (``.vecdb`` by convention)::

    {"version": 1, "dim": 64}
    {"id": "00000000", "seq": 0, "text": "...", "meta": {...}, "embedding": [...]}
    ...

Each insert is written, flushed and fsynced before it returns. On open, a
torn final line (from a crash mid-write) is dropped and cut off the file.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import CorruptStore, DimMismatch, StoreWriteError, ZeroQuery

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ID_WIDTH = 8


@dataclass(frozen=True)
class VectorRecord:
    id: str
    text: str
    embedding: tuple[float, ...]
    meta: dict[str, str] = field(default_factory=dict)
    seq: int = 0


@dataclass(frozen=True)
class SearchHit:
    record: VectorRecord
    score: float


def _norm(v: Sequence[float]) -> float:
    return math.sqrt(math.fsum(x * x for x in v))


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity using correctly rounded sums, so it does not depend on element order."""
    na, nb = _norm(a), _norm(b)
    if na == 0 or nb == 0:
        raise ZeroQuery("cosine of a zero vector")
    return math.fsum(x * y for x, y in zip(a, b)) / (na * nb)


class VectorStore:
    def __init__(self, path: str | Path, dim: int | None = None):
        self.path = Path(path)
        self.dim = dim
        self.records: list[VectorRecord] = []
        self.warnings: list[str] = []
        self._norms: list[float] = []
        self._lock = threading.Lock()
        self._fh = None

    @classmethod
    def open(cls, path: str | Path, dim: int | None = None) -> VectorStore:
        """Open (or create on first insert) the store at ``path``.

        ``dim`` fixes the dimension of a new store; for an existing store it
        must match the header if given.
        """
        store = cls(path, dim)
        if store.path.exists() and store.path.stat().st_size > 0:
            store._load(dim)
        return store

    def _load(self, dim: int | None) -> None:
        raw = self.path.read_bytes()
        lines = raw.split(b"\n")
        if len(lines) == 1:
            # crashed while writing the header of a new store: nothing was stored yet
            msg = f"{self.path}: discarded incomplete header"
            log.warning(msg)
            self.warnings.append(msg)
            with open(self.path, "r+b") as fh:
                fh.truncate(0)
            return
        try:
            header = json.loads(lines[0])
            if header.get("version") != FORMAT_VERSION or not isinstance(header.get("dim"), int) or header["dim"] < 1:
                raise ValueError(header)
        except (ValueError, AttributeError) as exc:
            raise CorruptStore(f"{self.path}: bad header: {exc}") from None
        if dim is not None and dim != header["dim"]:
            raise DimMismatch(f"{self.path} has dim {header['dim']}, requested {dim}")
        self.dim = header["dim"]
        good_end = len(lines[0]) + 1
        body = lines[1:]
        # a complete file ends with "\n", leaving one empty trailing element
        for i, line in enumerate(body):
            last = i == len(body) - 1
            if last and line == b"":
                break
            try:
                rec = self._decode(line)
            except (ValueError, KeyError, TypeError) as exc:
                if last:
                    msg = f"{self.path}: dropped truncated final record ({len(line)} bytes)"
                    log.warning(msg)
                    self.warnings.append(msg)
                    break
                raise CorruptStore(f"{self.path}: record line {i + 2} unreadable: {exc}") from None
            if last:
                # complete JSON but missing its newline: the write was torn before "\n"
                msg = f"{self.path}: dropped final record without line terminator"
                log.warning(msg)
                self.warnings.append(msg)
                break
            self._add(rec)
            good_end += len(line) + 1
        if good_end < len(raw):
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)
                fh.flush()
                os.fsync(fh.fileno())

    def _decode(self, line: bytes) -> VectorRecord:
        d = json.loads(line)
        emb = tuple(float(x) for x in d["embedding"])
        if len(emb) != self.dim:
            raise ValueError(f"embedding of length {len(emb)}")
        expected = self.records[-1].seq + 1 if self.records else 0
        if d["seq"] != expected or d["id"] != format(expected, f"0{ID_WIDTH}d"):
            raise ValueError(f"out-of-order seq {d['seq']}")
        meta = d.get("meta", {})
        if not isinstance(meta, dict) or not isinstance(d["text"], str):
            raise TypeError("bad record fields")
        return VectorRecord(d["id"], d["text"], emb, {str(k): str(v) for k, v in meta.items()}, d["seq"])

    def _add(self, rec: VectorRecord) -> None:
        self.records.append(rec)
        self._norms.append(_norm(rec.embedding))

    def __len__(self) -> int:
        return len(self.records)

    def _handle(self):
        if self._fh is None:
            new = not self.path.exists() or self.path.stat().st_size == 0
            if new and self.dim is None:
                raise DimMismatch("a new store needs a dimension")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "ab")
            if new:
                self._write(json.dumps({"version": FORMAT_VERSION, "dim": self.dim}).encode() + b"\n")
        return self._fh

    def _write(self, data: bytes) -> None:
        fh = self._fh
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())

    def insert(self, text: str, embedding: Sequence[float], meta: dict[str, str] | None = None) -> str:
        embedding = tuple(float(x) for x in embedding)
        with self._lock:
            if self.dim is None:
                self.dim = len(embedding)
            if len(embedding) != self.dim:
                raise DimMismatch(f"embedding dim {len(embedding)} != store dim {self.dim}")
            if not all(math.isfinite(x) for x in embedding):
                raise ValueError("embedding contains non-finite values")
            seq = self.records[-1].seq + 1 if self.records else 0
            rec = VectorRecord(format(seq, f"0{ID_WIDTH}d"), text, embedding,
                               {str(k): str(v) for k, v in (meta or {}).items()}, seq)
            line = json.dumps(
                {"id": rec.id, "seq": seq, "text": text, "meta": rec.meta, "embedding": list(embedding)},
                ensure_ascii=False,
            ).encode("utf-8") + b"\n"
            try:
                self._handle()
                self._write(line)
            except OSError as exc:
                raise StoreWriteError(f"{self.path}: {exc}") from exc
            self._add(rec)
            return rec.id

    def search(self, query: Sequence[float], k: int) -> list[SearchHit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        # snapshot: concurrent inserts only append
        records, norms = self.records[:], self._norms[: len(self.records)]
        if self.dim is not None and len(query) != self.dim:
            raise DimMismatch(f"query dim {len(query)} != store dim {self.dim}")
        qn = _norm(query)
        if qn == 0:
            raise ZeroQuery("query vector has zero norm")
        fsum = math.fsum
        scored = []
        for rec, n in zip(records, norms):
            score = fsum(x * y for x, y in zip(query, rec.embedding)) / (qn * n) if n else 0.0
            scored.append((-score, rec.seq, rec))
        top = heapq.nsmallest(k, scored, key=lambda t: (t[0], t[1]))
        return [SearchHit(rec, -neg) for neg, _, rec in top]

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> VectorStore:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_store(path: str | Path, dim: int | None = None) -> VectorStore:
    return VectorStore.open(path, dim)
