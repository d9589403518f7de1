"""Deterministic model backends.

``HashLM`` scores every candidate next token with FNV-1a-64 over the
little-endian encoding of ``context + [candidate]``; ``HashEmbed`` builds a
normalized bag-of-hashed-tokens vector; ``ScriptedLM`` plays back canned
completions. All three are reproducible bit-for-bit on any platform.

A backend used by the engine implements::

    start(prompt: str) -> None                # optional, called once per generation
    logits(context: list[int], emitted: str) -> numpy.ndarray
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyContext, EmptyInput, ScriptExhausted
from .tokenizer import EOS, MergeTable, Tokenizer, get_tokenizer

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
LOGIT_MODULUS = 1000003
DEFAULT_DIM = 64
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def le4(tokens: Sequence[int]) -> bytes:
    return b"".join(t.to_bytes(4, "little") for t in tokens)


class HashLM:
    """Hash-based logits model; pure function of the context."""

    def __init__(self, merges: MergeTable | None = None):
        self.vocab_size = get_tokenizer(merges).vocab_size
        cand = np.arange(self.vocab_size, dtype=np.uint64)
        self._cand_bytes = [(cand >> np.uint64(8 * i)) & np.uint64(0xFF) for i in range(4)]
        self._prefix: list[int] = []
        self._prefix_hash = FNV_OFFSET
        self._lock = threading.Lock()

    def start(self, prompt: str) -> None:
        pass

    def _context_hash(self, context: Sequence[int]) -> int:
        # generation extends the context one token at a time, so resume the
        # FNV state from the previous call when the old context is a prefix
        with self._lock:
            prev = self._prefix
            if len(prev) <= len(context) and list(context[: len(prev)]) == prev:
                h = fnv1a64(le4(context[len(prev):]), self._prefix_hash)
            else:
                h = fnv1a64(le4(context))
            self._prefix = list(context)
            self._prefix_hash = h
        return h

    def logits(self, context: Sequence[int], emitted: str = "") -> np.ndarray:
        if not context:
            raise EmptyContext("HashLM needs a non-empty context")
        h = np.full(self.vocab_size, self._context_hash(context), dtype=np.uint64)
        prime = np.uint64(FNV_PRIME)
        for byte in self._cand_bytes:
            h ^= byte
            h *= prime  # uint64 wraps modulo 2**64
        return (h % np.uint64(LOGIT_MODULUS)).astype(np.float64) / LOGIT_MODULUS


def hashlm_logits(context: Sequence[int], merges: MergeTable | None = None) -> np.ndarray:
    return HashLM(merges).logits(context)


def hashembed(tokens: Sequence[int], dim: int = DEFAULT_DIM) -> list[float]:
    if not tokens:
        raise EmptyInput("cannot embed an empty token sequence")
    if dim < 1:
        raise ValueError("embedding dim must be >= 1")
    acc = [0.0] * dim
    for t in tokens:
        acc[fnv1a64(t.to_bytes(4, "little")) % dim] += 1.0
    norm = math.sqrt(math.fsum(x * x for x in acc))
    return [x / norm for x in acc]


class HashEmbed:
    """Text embedder: tokenize, then :func:`hashembed`."""

    def __init__(self, dim: int = DEFAULT_DIM, merges: MergeTable | None = None):
        self.dim = dim
        self.tokenizer = get_tokenizer(merges)

    def __call__(self, text: str) -> list[float]:
        return hashembed(self.tokenizer.encode(text), self.dim)


@dataclass
class ScriptEntry:
    match: str | None
    completion: str


class ScriptedResponses:
    """Ordered playback entries, each consumed at most once."""

    def __init__(self, entries: Sequence[ScriptEntry | tuple | dict]):
        self.entries: list[ScriptEntry] = []
        for e in entries:
            if isinstance(e, dict):
                e = ScriptEntry(e.get("match"), e["completion"])
            elif isinstance(e, tuple):
                e = ScriptEntry(*e)
            self.entries.append(e)
        self.consumed = [False] * len(self.entries)

    @classmethod
    def load(cls, path: str | Path) -> ScriptedResponses:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list) or not all(isinstance(d, dict) and "completion" in d for d in data):
            raise ValueError(f"{path}: expected a JSON array of {{match, completion}} objects")
        return cls(data)

    def find(self, prompt: str) -> int:
        """Index of the first unconsumed entry whose match key occurs in ``prompt`` (or has none)."""
        for i, entry in enumerate(self.entries):
            if self.consumed[i]:
                continue
            if entry.match is None or entry.match in prompt:
                return i
        raise ScriptExhausted(f"no scripted response left for prompt {prompt[:60]!r}")

    def select(self, prompt: str) -> int:
        i = self.find(prompt)
        self.consumed[i] = True
        return i

    def remaining(self) -> int:
        return self.consumed.count(False)


def _next_scripted_token(tokenizer: Tokenizer, completion: str, emitted: str) -> int:
    pos = 0
    for t in tokenizer.encode(completion):
        if pos == len(emitted):
            return t
        pos += len(tokenizer.token_text[t])
    if pos != len(emitted):
        raise ScriptExhausted(f"emitted text {emitted!r} diverges from the scripted completion")
    return EOS


class ScriptedLM:
    """Playback backend: emits the selected entry's completion token by token, then EOS.

    ``on_step`` (if given) is called with the emitted text before every
    token; tests use it to pause generation at a known point.
    """

    def __init__(
        self,
        responses: ScriptedResponses | Sequence,
        merges: MergeTable | None = None,
        on_step: Callable[[str], None] | None = None,
    ):
        if not isinstance(responses, ScriptedResponses):
            responses = ScriptedResponses(responses)
        self.responses = responses
        self.tokenizer = get_tokenizer(merges)
        self.vocab_size = self.tokenizer.vocab_size
        self.on_step = on_step
        self._active: int | None = None
        self._prompt = ""

    def start(self, prompt: str) -> None:
        self._prompt = prompt
        self._active = None

    def next_token(self, prompt: str, emitted: str) -> int:
        if self._active is None or prompt != self._prompt:
            self._prompt = prompt
            self._active = self.responses.select(prompt)
        completion = self.responses.entries[self._active].completion
        return _next_scripted_token(self.tokenizer, completion, emitted)

    def logits(self, context: Sequence[int], emitted: str = "") -> np.ndarray:
        if self.on_step is not None:
            self.on_step(emitted)
        out = np.full(self.vocab_size, -np.inf)
        out[self.next_token(self._prompt, emitted)] = 0.0
        return out


def scripted_next(responses: ScriptedResponses, prompt: str, emitted_so_far: str,
                  merges: MergeTable | None = None) -> int:
    """Next scripted token for ``prompt`` without consuming the entry."""
    completion = responses.entries[responses.find(prompt)].completion
    return _next_scripted_token(get_tokenizer(merges), completion, emitted_so_far)


def load_backend(spec: str, merges: MergeTable | None = None):
    """Build a backend from ``hash`` or ``scripted:PATH``."""
    if spec == "hash":
        return HashLM(merges)
    if spec.startswith("scripted:"):
        return ScriptedLM(ScriptedResponses.load(spec[len("scripted:"):]), merges)
    raise ValueError(f"unknown backend {spec!r} (expected 'hash' or 'scripted:PATH')")
