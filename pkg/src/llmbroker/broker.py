"""Newline-delimited JSON service exposing generation, tokenization and embeddings.

One JSON object per line in each direction. Inbound frame types are
``generate``, ``tokenize``, ``detokenize``, ``embed`` and ``cancel``; the
service answers with ``feedback``/``result`` frames for generations,
``response`` frames for the services and ``error`` frames for failures.
Every outbound frame carries the ``id`` of the request it belongs to.

Generations run on a FIFO queue served by ``max_concurrent_sessions``
workers, each owning one backend instance. Cancel frames bypass the queue.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import os
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator

from .backend import DEFAULT_DIM, HashEmbed, HashLM, ScriptedLM, ScriptedResponses
from .engine import Engine, FeedbackChunk, GenerationGoal, GenerationResult, Session, SessionRegistry
from .errors import BrokerError, DuplicateSession, EmptyInput, GrammarError, UnknownSession
from .grammar import Grammar
from .sampler import SamplingParams
from .tokenizer import MergeTable, get_tokenizer

log = logging.getLogger(__name__)

DEFAULT_PORT = 8350
MAX_FRAME_BYTES = 16 * 1024 * 1024
OUTBOUND_QUEUE = 1024
INBOUND_TYPES = ("generate", "tokenize", "detokenize", "embed", "cancel")


@dataclass
class BrokerConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    backend: str = "hash"  # "hash" or "scripted:PATH"
    merges_path: str | None = None
    max_concurrent_sessions: int = 1
    embed_dim: int = DEFAULT_DIM
    outbound_queue: int = OUTBOUND_QUEUE

    @classmethod
    def from_env(cls, **overrides) -> BrokerConfig:
        cfg = cls()
        if "LLMBROKER_PORT" in os.environ:
            cfg.port = int(os.environ["LLMBROKER_PORT"])
        if "LLMBROKER_BACKEND" in os.environ:
            cfg.backend = os.environ["LLMBROKER_BACKEND"]
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
        return cfg


class FrameError(BrokerError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def error_frame(frame_id: str, code: str, message: str) -> dict:
    return {"id": frame_id, "type": "error", "code": code, "message": message}


def feedback_frame(frame_id: str, chunk: FeedbackChunk) -> dict:
    return {"id": frame_id, "type": "feedback", "index": chunk.index, "token_id": chunk.token_id, "text": chunk.text}


def result_frame(frame_id: str, result: GenerationResult) -> dict:
    frame = {"id": frame_id, "type": "result", "status": result.status,
             "finish_reason": result.finish_reason, "text": result.text,
             "token_count": result.token_count}
    if result.error is not None:
        frame["code"] = result.error.code
        frame["message"] = str(result.error)
    return frame


def encode_frame(frame: dict) -> bytes:
    return json.dumps(frame, ensure_ascii=False, separators=(",", ":")).encode("utf-8") + b"\n"


class _Connection:
    _ids = itertools.count()

    def __init__(self, broker: Broker, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.broker = broker
        self.reader = reader
        self.writer = writer
        self.key = f"c{next(self._ids)}"
        self.outbound: asyncio.Queue = asyncio.Queue(broker.config.outbound_queue)
        self.sessions: dict[str, Session] = {}
        self.closed = False

    def send(self, frame: dict) -> None:
        if self.closed:
            return
        try:
            self.outbound.put_nowait(frame)
        except asyncio.QueueFull:
            log.warning("%s: outbound queue overflow, closing", self.key)
            self.abort(error_frame(frame.get("id", "unknown"), "queue_overflow",
                                   "client is not reading; outbound queue full"))

    def abort(self, final: dict | None = None) -> None:
        if self.closed:
            return
        self.closed = True
        if final is not None:
            try:
                self.writer.write(encode_frame(final))
            except Exception:  # noqa: BLE001 - transport may already be gone
                pass
        self.cancel_all()
        self.writer.close()

    def cancel_all(self) -> None:
        for sid in list(self.sessions):
            self.broker.registry.cancel_quiet(self.session_key(sid))

    def session_key(self, frame_id: str) -> str:
        return f"{self.key}:{frame_id}"

    async def write_loop(self) -> None:
        try:
            while True:
                frame = await self.outbound.get()
                if frame is None or self.closed:
                    break
                self.writer.write(encode_frame(frame))
                await self.writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            self.closed = True
            self.cancel_all()

    async def read_loop(self) -> None:
        while not self.closed:
            try:
                line = await self.reader.readline()
            except ValueError:
                self.abort(error_frame("unknown", "frame_too_large", f"frame exceeds {MAX_FRAME_BYTES} bytes"))
                return
            except (ConnectionError, OSError):
                break
            if not line:
                break
            if len(line) > MAX_FRAME_BYTES + 1:
                self.abort(error_frame("unknown", "frame_too_large", f"frame exceeds {MAX_FRAME_BYTES} bytes"))
                return
            if not line.strip():
                continue
            self.broker.handle_line(self, line)
        # client went away: stop its generations
        self.cancel_all()


class _Registry(SessionRegistry):
    def cancel_quiet(self, key: str) -> None:
        try:
            self.cancel(key)
        except UnknownSession:
            pass


class Broker:
    def __init__(self, config: BrokerConfig | None = None, backend_factory=None):
        self.config = config or BrokerConfig()
        merges = MergeTable.load(self.config.merges_path) if self.config.merges_path else None
        self.tokenizer = get_tokenizer(merges)
        self.embedder = HashEmbed(self.config.embed_dim, merges)
        self.registry = _Registry()
        workers = self.config.max_concurrent_sessions
        if workers < 1:
            raise ValueError("max_concurrent_sessions must be >= 1")
        if backend_factory is None:
            backend_factory = self._factory(self.config.backend, merges)
        backends = [backend_factory() for _ in range(workers)]
        if any(b is backends[0] for b in backends[1:]):
            # a shared stateful backend cannot serve sessions in parallel
            backends = backends[:1]
        self.engines = [Engine(b, self.tokenizer, self.registry) for b in backends]
        self._jobs: asyncio.Queue | None = None
        self._server: asyncio.base_events.Server | None = None
        self._executor = ThreadPoolExecutor(len(self.engines), thread_name_prefix="llmbroker-gen")
        self._tasks: list[asyncio.Task] = []
        self._connections: set[asyncio.Task] = set()
        self._grammars: dict[str, Grammar] = {}
        self.port: int | None = None

    @staticmethod
    def _factory(spec: str, merges):
        if spec == "hash":
            return lambda: HashLM(merges)
        if spec.startswith("scripted:"):
            shared = ScriptedLM(ScriptedResponses.load(spec[len("scripted:"):]), merges)
            return lambda: shared
        raise ValueError(f"unknown backend {spec!r} (expected 'hash' or 'scripted:PATH')")

    # --- lifecycle ---

    async def start(self) -> int:
        self._jobs = asyncio.Queue()
        self._server = await asyncio.start_server(
            self._on_connect, self.config.host, self.config.port, limit=MAX_FRAME_BYTES + 2
        )
        self.port = self._server.sockets[0].getsockname()[1]
        for engine in self.engines:
            self._tasks.append(asyncio.create_task(self._worker(engine)))
        log.info("listening on %s:%s", self.config.host, self.port)
        return self.port

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for key in self.registry.live():
            self.registry.cancel_quiet(key)
        for task in [*self._tasks, *self._connections]:
            task.cancel()
        await asyncio.gather(*self._tasks, *self._connections, return_exceptions=True)
        self._executor.shutdown(wait=True)

    async def _on_connect(self, reader, writer) -> None:
        conn = _Connection(self, reader, writer)
        log.debug("%s connected", conn.key)
        task = asyncio.current_task()
        self._connections.add(task)
        writer_task = asyncio.create_task(conn.write_loop())
        try:
            await conn.read_loop()
        finally:
            if not conn.closed and not conn.outbound.full():
                conn.outbound.put_nowait(None)
            # let queued frames drain unless the peer is gone
            try:
                await asyncio.wait_for(writer_task, timeout=5)
            except asyncio.TimeoutError:
                writer_task.cancel()
            conn.closed = True
            conn.cancel_all()
            writer.close()
            self._connections.discard(task)
            log.debug("%s disconnected", conn.key)

    async def _worker(self, engine: Engine) -> None:
        loop = asyncio.get_running_loop()
        while True:
            conn, frame_id, goal, session = await self._jobs.get()

            def emit(chunk, conn=conn, frame_id=frame_id):
                loop.call_soon_threadsafe(conn.send, feedback_frame(frame_id, chunk))

            try:
                result = await loop.run_in_executor(self._executor, engine.generate, goal, emit, session)
            except BrokerError as exc:
                conn.send(error_frame(frame_id, exc.code, str(exc)))
            except Exception as exc:  # noqa: BLE001 - backend failures become failed results
                log.exception("generation %s crashed", frame_id)
                conn.send(error_frame(frame_id, "internal", str(exc)))
            else:
                conn.send(result_frame(frame_id, result))
            finally:
                conn.sessions.pop(frame_id, None)

    # --- request handling ---

    def handle_line(self, conn: _Connection, line: bytes) -> None:
        frame_id = "unknown"
        try:
            try:
                frame = json.loads(line)
            except (UnicodeDecodeError, ValueError) as exc:
                raise FrameError("bad_request", f"frame is not valid JSON: {exc}") from None
            if not isinstance(frame, dict):
                raise FrameError("bad_request", "frame must be a JSON object")
            if isinstance(frame.get("id"), str):
                frame_id = frame["id"]
            else:
                raise FrameError("bad_request", "frame needs a string 'id'")
            kind = frame.get("type")
            if not isinstance(kind, str):
                raise FrameError("bad_request", "frame needs a string 'type'")
            if kind not in INBOUND_TYPES:
                raise FrameError("unsupported_type", f"unsupported frame type {kind!r}")
            for reply in getattr(self, f"_on_{kind}")(conn, frame_id, frame):
                conn.send(reply)
        except BrokerError as exc:
            conn.send(error_frame(frame_id, exc.code, str(exc)))

    @staticmethod
    def _field(frame: dict, name: str, kind: type):
        value = frame.get(name)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise FrameError("bad_request", f"'{name}' must be a {kind.__name__}")
        return value

    def _on_tokenize(self, conn, frame_id, frame) -> Iterator[dict]:
        text = self._field(frame, "text", str)
        yield {"id": frame_id, "type": "response", "tokens": self.tokenizer.encode(text)}

    def _on_detokenize(self, conn, frame_id, frame) -> Iterator[dict]:
        tokens = self._field(frame, "tokens", list)
        vocab = self.tokenizer.vocab_size
        if not all(isinstance(t, int) and not isinstance(t, bool) and 0 <= t < vocab for t in tokens):
            raise FrameError("bad_request", f"'tokens' must be integers in [0, {vocab})")
        decoded = self.tokenizer.decode(tokens)
        yield {"id": frame_id, "type": "response", "text": decoded.text, "lossy": decoded.lossy}

    def _on_embed(self, conn, frame_id, frame) -> Iterator[dict]:
        text = self._field(frame, "text", str)
        if not text:
            raise EmptyInput("cannot embed empty text")
        vec = self.embedder(text)
        yield {"id": frame_id, "type": "response", "embedding": vec, "dim": len(vec)}

    def _grammar(self, source: str) -> Grammar:
        g = self._grammars.get(source)
        if g is None:
            g = Grammar.parse(source)
            if len(self._grammars) > 64:
                self._grammars.clear()
            self._grammars[source] = g
        return g

    def _on_generate(self, conn, frame_id, frame) -> Iterator[dict]:
        prompt = self._field(frame, "prompt", str)
        try:
            params = SamplingParams.from_dict(frame.get("params"))
        except (TypeError, ValueError) as exc:
            raise FrameError("bad_request", f"bad params: {exc}") from None
        grammar = None
        if frame.get("grammar") is not None:
            source = self._field(frame, "grammar", str)
            try:
                grammar = self._grammar(source)
            except GrammarError as exc:
                raise FrameError(exc.code, str(exc)) from None
        if frame_id in conn.sessions:
            raise DuplicateSession(f"id {frame_id!r} already has a live generation")
        key = conn.session_key(frame_id)
        session = self.registry.open(key)
        conn.sessions[frame_id] = session
        self._jobs.put_nowait((conn, frame_id, GenerationGoal(prompt, params, grammar, key), session))
        return iter(())

    def _on_cancel(self, conn, frame_id, frame) -> Iterator[dict]:
        target = self._field(frame, "target_id", str)
        if target not in conn.sessions:
            try:
                self.registry.cancel(conn.session_key(target))
            except UnknownSession:
                raise UnknownSession(f"no session {target!r} on this connection") from None
            live = False
        else:
            live = self.registry.cancel(conn.session_key(target))
        if target != frame_id:
            yield {"id": frame_id, "type": "response", "status": "canceling" if live else "finished"}


class BrokerThread:
    """Run a :class:`Broker` on a private event loop in a background thread."""

    def __init__(self, config: BrokerConfig | None = None, backend_factory=None):
        self.broker = Broker(config, backend_factory)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="llmbroker-loop", daemon=True)
        self.port: int | None = None

    def start(self) -> BrokerThread:
        self._thread.start()
        self.port = asyncio.run_coroutine_threadsafe(self.broker.start(), self._loop).result()
        return self

    def stop(self) -> None:
        asyncio.run_coroutine_threadsafe(self.broker.stop(), self._loop).result()
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
        self._loop.close()

    def __enter__(self) -> BrokerThread:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class BrokerClient:
    """Blocking NDJSON client; the reference client for the wire protocol."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float | None = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self.sock.makefile("rb")
        self._ids = itertools.count()

    def new_id(self) -> str:
        return f"req-{next(self._ids)}"

    def send(self, frame: dict) -> None:
        self.sock.sendall(encode_frame(frame))

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self) -> dict | None:
        line = self._file.readline()
        return json.loads(line) if line else None

    def call(self, frame: dict) -> dict:
        """Send a service request and return its single reply."""
        self.send(frame)
        return self.recv()

    def tokenize(self, text: str) -> list[int]:
        return self.call({"id": self.new_id(), "type": "tokenize", "text": text})["tokens"]

    def generate(self, prompt: str, params: dict | None = None, grammar: str | None = None,
                 frame_id: str | None = None) -> Iterator[dict]:
        """Yield feedback frames followed by the result (or error) frame."""
        frame_id = frame_id or self.new_id()
        frame = {"id": frame_id, "type": "generate", "prompt": prompt}
        if params:
            frame["params"] = params
        if grammar is not None:
            frame["grammar"] = grammar
        self.send(frame)
        while True:
            reply = self.recv()
            if reply is None:
                return
            yield reply
            if reply["id"] == frame_id and reply["type"] in ("result", "error"):
                return

    def close(self) -> None:
        self._file.close()
        self.sock.close()

    def __enter__(self) -> BrokerClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
