"""Next-token selection: masking, greedy, and seeded temperature/top-k/top-p sampling.

Randomness comes from splitmix64 and all floating point goes through the
``math`` module on Python floats, so draws are reproducible across machines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NoValidToken
from .grammar import TokenMask
from .tokenizer import EOS

_MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class SamplingParams:
    seed: int = 0
    temperature: float = 0.8
    top_k: int = 40
    top_p: float = 0.95
    max_tokens: int = 128
    stop: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if isinstance(self.stop, (list, str)):
            object.__setattr__(self, "stop", (self.stop,) if isinstance(self.stop, str) else tuple(self.stop))
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValueError("seed must be an integer")
        if not self.temperature >= 0 or math.isinf(self.temperature):
            raise ValueError("temperature must be a finite number >= 0")
        if not isinstance(self.top_k, int) or self.top_k < 0:
            raise ValueError("top_k must be an integer >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if not isinstance(self.max_tokens, int) or self.max_tokens < 0:
            raise ValueError("max_tokens must be an integer >= 0")
        if any(not isinstance(s, str) or not s for s in self.stop):
            raise ValueError("stop strings must be non-empty strings")

    @classmethod
    def from_dict(cls, data: dict | None) -> SamplingParams:
        data = dict(data or {})
        unknown = set(data) - {"seed", "temperature", "top_k", "top_p", "max_tokens", "stop"}
        if unknown:
            raise ValueError(f"unknown sampling parameters: {sorted(unknown)}")
        for key in ("temperature", "top_p"):
            if key in data:
                if isinstance(data[key], bool) or not isinstance(data[key], (int, float)):
                    raise ValueError(f"{key} must be a number")
                data[key] = float(data[key])
        return cls(**data)


@dataclass(frozen=True)
class RngState:
    state: int

    def next_u64(self) -> tuple[int, RngState]:
        state = (self.state + GOLDEN_GAMMA) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31), RngState(state)

    def uniform(self) -> tuple[float, RngState]:
        """Uniform draw in [0, 1) with 53 bits of precision."""
        z, nxt = self.next_u64()
        return (z >> 11) / 9007199254740992.0, nxt


def seed_rng(seed: int) -> RngState:
    return RngState(seed & _MASK64)


def apply_mask(logits: Sequence[float], mask: TokenMask) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != mask.allowed.shape:
        raise ValueError(f"logits length {logits.shape[0]} != mask length {mask.allowed.shape[0]}")
    allowed = mask.allowed.copy()
    allowed[EOS] = mask.eos_allowed
    out = np.where(allowed, logits, -np.inf)
    if not np.isfinite(out).any():
        raise NoValidToken("every token is masked")
    return out


def greedy(logits: Sequence[float]) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    finite = np.isfinite(logits)
    if not finite.any():
        raise NoValidToken("no finite logit")
    # argmax returns the first (lowest) index among ties
    return int(np.argmax(np.where(finite, logits, -np.inf)))


def inverse_cdf(order: Sequence[int], probs: Sequence[float], u: float) -> int:
    """Pick from ``order`` (descending probability) the first token whose cumulative mass exceeds ``u``."""
    cum = 0.0
    for tok, p in zip(order, probs):
        cum += p
        if u < cum:
            return tok
    return order[-1]


def sample(logits: Sequence[float], params: SamplingParams, rng: RngState) -> tuple[int, RngState]:
    if params.temperature == 0:
        return greedy(logits), rng
    logits = np.asarray(logits, dtype=np.float64)
    ids = np.flatnonzero(np.isfinite(logits))
    if ids.size == 0:
        raise NoValidToken("no finite logit")
    temp = params.temperature
    scaled = [float(x) / temp for x in logits[ids]]
    top = max(scaled)
    weights = [math.exp(x - top) for x in scaled]
    total = math.fsum(weights)
    pairs = sorted(zip(ids.tolist(), (w / total for w in weights)), key=lambda kv: (-kv[1], kv[0]))
    if params.top_k > 0:
        pairs = pairs[: params.top_k]
    if params.top_p < 1.0:
        cum = 0.0
        for cut, (_, p) in enumerate(pairs, 1):
            cum += p
            if cum >= params.top_p:
                pairs = pairs[:cut]
                break
    kept = math.fsum(p for _, p in pairs)
    u, rng = rng.uniform()
    token = inverse_cdf([t for t, _ in pairs], [p / kept for _, p in pairs], u)
    return token, rng
