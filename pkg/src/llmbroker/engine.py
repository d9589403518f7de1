"""The generation loop behind the ``generate`` action.

Each step: query the backend on ``[BOS] + prompt + emitted``, mask with the
grammar state (if any), sample, then either finish on EOS or stream the
token as one :class:`FeedbackChunk` and check the stop conditions.
"""

from __future__ import annotations

import collections
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

from .backend import ScriptedLM
from .errors import (
    BrokerError,
    DuplicateSession,
    GrammarDeadEnd,
    NoValidToken,
    ScriptViolatesGrammar,
    UnknownSession,
)
from .grammar import Grammar, GrammarState, init_state, token_mask
from .sampler import SamplingParams, apply_mask, sample, seed_rng
from .tokenizer import BOS, EOS, Tokenizer, get_tokenizer

log = logging.getLogger(__name__)

SUCCEEDED, CANCELED, FAILED = "succeeded", "canceled", "failed"


@dataclass
class GenerationGoal:
    prompt: str
    params: SamplingParams = field(default_factory=SamplingParams)
    grammar: str | Grammar | None = None
    session_id: str = ""


@dataclass(frozen=True)
class FeedbackChunk:
    session_id: str
    index: int
    token_id: int
    text: str


@dataclass
class GenerationResult:
    session_id: str
    status: str
    text: str
    token_count: int
    finish_reason: str
    error: BrokerError | None = None

    @property
    def error_code(self) -> str | None:
        return self.error.code if self.error is not None else None


class Session:
    def __init__(self, session_id: str):
        self.session_id = session_id
        self.cancel_event = threading.Event()
        self.done = threading.Event()

    @property
    def canceled(self) -> bool:
        return self.cancel_event.is_set()


class SessionRegistry:
    """Live sessions plus a bounded memory of finished ids (so late cancels are no-ops)."""

    def __init__(self, remember: int = 4096):
        self._lock = threading.Lock()
        self._live: dict[str, Session] = {}
        self._finished: collections.OrderedDict[str, None] = collections.OrderedDict()
        self._remember = remember

    def open(self, session_id: str) -> Session:
        with self._lock:
            if session_id in self._live:
                raise DuplicateSession(f"session {session_id!r} is already live")
            self._finished.pop(session_id, None)
            session = self._live[session_id] = Session(session_id)
            return session

    def close(self, session: Session) -> None:
        with self._lock:
            if self._live.get(session.session_id) is session:
                del self._live[session.session_id]
            self._finished[session.session_id] = None
            while len(self._finished) > self._remember:
                self._finished.popitem(last=False)
        session.done.set()

    def cancel(self, session_id: str) -> bool:
        """Request cancellation. Returns True if a live session was signalled."""
        with self._lock:
            session = self._live.get(session_id)
            if session is None:
                if session_id in self._finished:
                    return False
                raise UnknownSession(f"no session {session_id!r}")
        session.cancel_event.set()
        return True

    def live(self) -> list[str]:
        with self._lock:
            return list(self._live)


def check_stop(emitted_text: str, params: SamplingParams, token: int | None, grammar_state: GrammarState | None,
               token_count: int, canceled: bool = False) -> str | None:
    """Finish reason for the current step, or None to keep going."""
    if canceled:
        return "canceled"
    if token == EOS:
        if grammar_state is not None and grammar_state.complete:
            return "grammar_complete"
        return "eos"
    if find_stop(emitted_text, params.stop) is not None:
        return "stop_string"
    if token_count >= params.max_tokens:
        return "max_tokens"
    return None


def find_stop(text: str, stops) -> int | None:
    """Index of the earliest occurrence of any stop string in ``text``."""
    best = None
    for s in stops:
        i = text.find(s)
        if i >= 0 and (best is None or i < best):
            best = i
    return best


def _compile(grammar: str | Grammar | None) -> Grammar | None:
    if grammar is None or isinstance(grammar, Grammar):
        return grammar
    return Grammar.parse(grammar)


def generate(
    goal: GenerationGoal,
    backend,
    emit: Callable[[FeedbackChunk], None] | None = None,
    *,
    tokenizer: Tokenizer | None = None,
    session: Session | None = None,
) -> GenerationResult:
    """Run one generation to completion, streaming chunks through ``emit``."""
    tokenizer = tokenizer or get_tokenizer()
    session = session or Session(goal.session_id)
    params = goal.params
    sid = goal.session_id
    grammar = _compile(goal.grammar)
    state = init_state(grammar) if grammar is not None else None
    context = [BOS] + tokenizer.encode(goal.prompt)
    rng = seed_rng(params.seed)
    pieces: list[str] = []
    emitted = ""

    def finish(reason: str, error: BrokerError | None = None) -> GenerationResult:
        text = emitted
        if reason == "stop_string":
            text = emitted[: find_stop(emitted, params.stop)]
        status = {"canceled": CANCELED, "error": FAILED}.get(reason, SUCCEEDED)
        return GenerationResult(sid, status, text, len(pieces), reason, error)

    if session.canceled:
        return finish("canceled")
    if params.max_tokens == 0:
        return finish("max_tokens")
    if hasattr(backend, "start"):
        backend.start(goal.prompt)
    while True:
        try:
            logits = backend.logits(context, emitted)
            mask = token_mask(state, tokenizer)
            try:
                masked = apply_mask(logits, mask)
            except NoValidToken:
                if isinstance(backend, ScriptedLM):
                    raise ScriptViolatesGrammar(
                        f"scripted completion leaves the grammar after {emitted!r}"
                    ) from None
                raise GrammarDeadEnd(f"no token can continue {emitted!r}") from None
            token, rng = sample(masked, params, rng)
        except BrokerError as exc:
            log.debug("session %s failed: %s", sid, exc)
            return finish("error", exc)
        if session.canceled:
            return finish("canceled")
        if token == EOS:
            return finish(check_stop(emitted, params, token, state, len(pieces)))
        text = tokenizer.token_text[token]
        if state is not None:
            # the mask guarantees this succeeds
            state = state.feed(text)
        chunk = FeedbackChunk(sid, len(pieces), token, text)
        pieces.append(text)
        emitted += text
        context.append(token)
        if emit is not None:
            emit(chunk)
        reason = check_stop(emitted, params, token, state, len(pieces), session.canceled)
        if reason is not None:
            return finish(reason)


class Engine:
    """One backend instance serving one generation at a time, with cancellation by id."""

    def __init__(self, backend, tokenizer: Tokenizer | None = None, registry: SessionRegistry | None = None):
        self.backend = backend
        self.tokenizer = tokenizer or get_tokenizer()
        self.registry = registry or SessionRegistry()
        self._lock = threading.Lock()

    def open_session(self, session_id: str) -> Session:
        return self.registry.open(session_id)

    def generate(self, goal: GenerationGoal, emit=None, session: Session | None = None) -> GenerationResult:
        if session is None:
            session = self.registry.open(goal.session_id)
        try:
            with self._lock:
                return generate(goal, self.backend, emit, tokenizer=self.tokenizer, session=session)
        finally:
            self.registry.close(session)

    def cancel(self, session_id: str) -> bool:
        return self.registry.cancel(session_id)
