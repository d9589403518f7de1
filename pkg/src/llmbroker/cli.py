"""``llmbroker`` command-line entry point.

Results go to stdout as a single JSON document; logs and streamed tokens go
to stderr. Exit status: 0 success, 1 usage error, 2 runtime error.

Option values resolve as: built-in default < environment < ``--config``
file < command-line flag.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

from .backend import DEFAULT_DIM, HashEmbed, load_backend
from .broker import DEFAULT_PORT, Broker, BrokerClient, BrokerConfig
from .engine import Engine, GenerationGoal
from .errors import BrokerError
from .grammar import Grammar
from .rag import DEFAULT_K, ChunkingPolicy, PromptTemplate, build_prompt, ingest, retrieve_hits
from .sampler import SamplingParams
from .tokenizer import MergeTable, get_tokenizer
from .vectorstore import VectorStore

log = logging.getLogger("llmbroker")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "host": "127.0.0.1",
    "port": DEFAULT_PORT,
    "backend": "hash",
    "merges": None,
    "max_sessions": 1,
    "dim": DEFAULT_DIM,
    "k": DEFAULT_K,
    "seed": 0,
    "temperature": 0.8,
    "top_k": 40,
    "top_p": 0.95,
    "max_tokens": 128,
    "stop": [],
    "chunk_unit": "lines",
    "chunk_size": 20,
    "overlap": 5,
    "template": None,
    "grammar": None,
}
ENV = {"port": ("LLMBROKER_PORT", int), "backend": ("LLMBROKER_BACKEND", str)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--top-p", dest="top_p", type=float)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--stop", action="append", help="stop string (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="llmbroker", description="Edge LLM broker and RAG pipelines")
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def backend_flags(p):
        p.add_argument("--backend", help="hash | scripted:PATH")
        p.add_argument("--merges", help="merge table file")

    p = sub.add_parser("serve", help="run the network service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--max-sessions", dest="max_sessions", type=int)
    p.add_argument("--dim", type=int)
    backend_flags(p)

    p = sub.add_parser("tokenize")
    p.add_argument("--text", required=True)
    p.add_argument("--merges")

    p = sub.add_parser("detokenize")
    p.add_argument("--tokens", required=True, help="comma-separated ids or a JSON list")
    p.add_argument("--merges")

    p = sub.add_parser("embed")
    p.add_argument("--text", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--merges")

    p = sub.add_parser("generate")
    p.add_argument("--prompt", required=True)
    p.add_argument("--grammar", help="path to a .gbnf file")
    p.add_argument("--connect", help="host:port of a running broker")
    p.add_argument("--stream-stdout", action="store_true", help="also write feedback frames to stdout")
    backend_flags(p)
    _sampling_flags(p)

    rag = sub.add_parser("rag").add_subparsers(dest="action", parser_class=_Parser)
    p = rag.add_parser("ingest")
    p.add_argument("--store", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--chunk-unit", dest="chunk_unit", choices=["lines", "chars"])
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--dim", type=int)
    p = rag.add_parser("ask")
    p.add_argument("--store", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--template")
    backend_flags(p)
    _sampling_flags(p)

    plan = sub.add_parser("plan").add_subparsers(dest="action", parser_class=_Parser)
    p = plan.add_parser("run")
    p.add_argument("--kg", required=True)
    p.add_argument("--actions", required=True)
    p.add_argument("--goal", required=True, help="'subj pred obj[, ...]' or a JSON goal file")
    p.add_argument("--store", help="vector store path (default: temporary)")
    p.add_argument("--k", type=int)
    p.add_argument("--no-llm-check", dest="llm_check", action="store_false")
    backend_flags(p)

    explain = sub.add_parser("explain").add_subparsers(dest="action", parser_class=_Parser)
    p = explain.add_parser("ingest")
    p.add_argument("--store", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--dim", type=int)
    p = explain.add_parser("ask")
    p.add_argument("--store", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    backend_flags(p)
    return parser


class Options:
    """Resolved option values with the documented precedence."""

    def __init__(self, args: argparse.Namespace, file_cfg: dict):
        self.args = args
        self.file_cfg = file_cfg

    def __getattr__(self, name: str):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        if name in self.file_cfg:
            return self.file_cfg[name]
        if name in ENV and ENV[name][0] in os.environ:
            var, conv = ENV[name]
            try:
                return conv(os.environ[var])
            except ValueError:
                raise UsageError(f"bad value for {var}: {os.environ[var]!r}") from None
        return DEFAULTS.get(name)

    def sampling(self) -> SamplingParams:
        try:
            return SamplingParams(
                seed=self.seed, temperature=float(self.temperature), top_k=self.top_k, top_p=float(self.top_p),
                max_tokens=self.max_tokens, stop=tuple(self.stop or ()),
            )
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad sampling option: {exc}") from None

    def merges(self) -> MergeTable | None:
        path = self.__getattr__("merges")
        return MergeTable.load(path) if path else None


def _print(doc: Any) -> None:
    sys.stdout.write(json.dumps(doc, ensure_ascii=False) + "\n")
    sys.stdout.flush()


def _positive(name: str, value: int) -> int:
    if not isinstance(value, int) or value < 1:
        raise UsageError(f"--{name.replace('_', '-')} must be a positive integer")
    return value


# --- commands ---


def cmd_serve(opt: Options) -> int:
    config = BrokerConfig(
        host=opt.host, port=opt.port, backend=opt.backend, merges_path=opt.__getattr__("merges"),
        max_concurrent_sessions=_positive("max_sessions", opt.max_sessions), embed_dim=_positive("dim", opt.dim),
    )
    broker = Broker(config)

    async def main():
        try:
            await broker.start()
        except OSError as exc:
            raise BrokerError(f"cannot listen on {config.host}:{config.port}: {exc}") from exc
        print(f"llmbroker listening on {config.host}:{broker.port}", file=sys.stderr, flush=True)
        try:
            await broker.serve_forever()
        finally:
            await broker.stop()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    _print({"status": "stopped"})
    return EXIT_OK


def cmd_tokenize(opt: Options) -> int:
    _print({"tokens": get_tokenizer(opt.merges()).encode(opt.text)})
    return EXIT_OK


def cmd_detokenize(opt: Options) -> int:
    raw = opt.tokens.strip()
    try:
        tokens = json.loads(raw) if raw.startswith("[") else [int(t) for t in raw.split(",") if t.strip()]
    except ValueError:
        raise UsageError("--tokens must be comma-separated integers or a JSON list") from None
    decoded = get_tokenizer(opt.merges()).decode(tokens)
    _print({"text": decoded.text, "lossy": decoded.lossy})
    return EXIT_OK


def cmd_embed(opt: Options) -> int:
    vec = HashEmbed(_positive("dim", opt.dim), opt.merges())(opt.text)
    _print({"embedding": vec, "dim": len(vec)})
    return EXIT_OK


def _stream_chunk(text: str, frame: dict | None, to_stdout: bool) -> None:
    sys.stderr.write(text)
    sys.stderr.flush()
    if to_stdout and frame is not None:
        _print(frame)


def cmd_generate(opt: Options) -> int:
    params = opt.sampling()
    grammar_path = opt.grammar
    grammar_src = Path(grammar_path).read_text(encoding="utf-8") if grammar_path else None
    if opt.connect:
        host, _, port = opt.connect.rpartition(":")
        if not host or not port.isdigit():
            raise UsageError("--connect expects host:port")
        payload = {k: getattr(params, k) for k in ("seed", "temperature", "top_k", "top_p", "max_tokens")}
        payload["stop"] = list(params.stop)
        with BrokerClient(host, int(port)) as client:
            for frame in client.generate(opt.prompt, payload, grammar_src):
                if frame["type"] == "feedback":
                    _stream_chunk(frame["text"], frame, opt.stream_stdout)
                elif frame["type"] == "error":
                    raise BrokerError(f"{frame['code']}: {frame['message']}")
                elif frame["type"] == "result":
                    sys.stderr.write("\n")
                    _print({k: frame.get(k) for k in ("status", "text", "finish_reason", "token_count")})
                    return EXIT_OK if frame["status"] != "failed" else EXIT_RUNTIME
        raise BrokerError("connection closed before the result arrived")
    merges = opt.merges()
    grammar = Grammar.parse(grammar_src) if grammar_src is not None else None
    engine = Engine(load_backend(opt.backend, merges), get_tokenizer(merges))

    def emit(chunk):
        frame = {"type": "feedback", "index": chunk.index, "token_id": chunk.token_id, "text": chunk.text}
        _stream_chunk(chunk.text, frame, opt.stream_stdout)

    result = engine.generate(GenerationGoal(opt.prompt, params, grammar, "cli"), emit)
    sys.stderr.write("\n")
    doc = {"status": result.status, "text": result.text, "finish_reason": result.finish_reason,
           "token_count": result.token_count}
    if result.error is not None:
        doc["error"] = {"code": result.error.code, "message": str(result.error)}
    _print(doc)
    return EXIT_OK if result.status != "failed" else EXIT_RUNTIME


def _policy(opt: Options, unit: str | None = None) -> ChunkingPolicy:
    try:
        return ChunkingPolicy(unit or opt.chunk_unit, opt.chunk_size, opt.overlap)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_rag(opt: Options) -> int:
    if opt.action == "ingest":
        policy = _policy(opt)
        dim = _positive("dim", opt.dim)
        docs = []
        for path in opt.input:
            docs.append((path, Path(path).read_text(encoding="utf-8")))
        with VectorStore.open(opt.store, dim) as store:
            n = ingest(store, docs, policy, HashEmbed(store.dim))
            _print({"inserted": n, "total": len(store)})
        return EXIT_OK
    k = _positive("k", opt.k)
    params = opt.sampling()
    template = PromptTemplate.load(opt.template) if opt.template else PromptTemplate.builtin("rag_answer")
    merges = opt.merges()
    with VectorStore.open(opt.store) as store:
        if len(store) == 0:
            raise BrokerError(f"store {opt.store} is empty")
        hits = retrieve_hits(store, opt.query, k, HashEmbed(store.dim))
    prompt = build_prompt(template, [h.record.text for h in hits], opt.query)
    engine = Engine(load_backend(opt.backend, merges), get_tokenizer(merges))
    result = engine.generate(GenerationGoal(prompt, params, None, "cli"))
    if result.error is not None:
        raise result.error
    _print({"answer": result.text, "finish_reason": result.finish_reason,
            "contexts": [{"id": h.record.id, "text": h.record.text, "score": h.score} for h in hits]})
    return EXIT_OK


def cmd_plan(opt: Options) -> int:
    from .planner import Goal, KnowledgeGraph, load_actions, run_pipeline

    k = _positive("k", opt.k)
    if opt.goal.strip().endswith(".json") and Path(opt.goal).exists():
        goal = Goal.from_json(json.loads(Path(opt.goal).read_text(encoding="utf-8")))
    else:
        try:
            goal = Goal.parse(opt.goal)
        except ValueError as exc:
            raise UsageError(f"--goal: {exc}") from None
    kg = KnowledgeGraph.load(opt.kg)
    actions = load_actions(opt.actions)
    merges = opt.merges()
    backend = load_backend(opt.backend, merges)
    with tempfile.TemporaryDirectory() as tmp:
        store_path = opt.store or os.path.join(tmp, "kg.vecdb")
        with VectorStore.open(store_path, DEFAULT_DIM) as store:
            outcome = run_pipeline(kg, actions, goal, backend, store, k, embed_fn=HashEmbed(store.dim),
                                   llm_check=opt.llm_check, tokenizer=get_tokenizer(merges))
    _print(outcome.to_json())
    return EXIT_OK


def cmd_explain(opt: Options) -> int:
    from .explain import ask, ingest_logs, ANSWER_PARAMS

    if opt.action == "ingest":
        policy = _policy(opt, "lines")
        dim = _positive("dim", opt.dim)
        lines = Path(opt.log).read_text(encoding="utf-8").splitlines()
        with VectorStore.open(opt.store, dim) as store:
            n = ingest_logs(store, lines, policy, HashEmbed(store.dim))
            _print({"inserted": n, "lines": len(lines), "total": len(store)})
        return EXIT_OK
    k = _positive("k", opt.k)
    max_tokens = getattr(opt.args, "max_tokens", None) or opt.file_cfg.get("max_tokens") or ANSWER_PARAMS.max_tokens
    params = SamplingParams(temperature=0.0, top_k=0, top_p=1.0, max_tokens=max_tokens, stop=("\n\n",))
    merges = opt.merges()
    with VectorStore.open(opt.store) as store:
        answer = ask(store, opt.question, load_backend(opt.backend, merges), k, params=params,
                     embed_fn=HashEmbed(store.dim), tokenizer=get_tokenizer(merges))
    _print(answer.to_json())
    return EXIT_OK


COMMANDS = {
    "serve": cmd_serve,
    "tokenize": cmd_tokenize,
    "detokenize": cmd_detokenize,
    "embed": cmd_embed,
    "generate": cmd_generate,
    "rag": cmd_rag,
    "plan": cmd_plan,
    "explain": cmd_explain,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if args.command in ("rag", "plan", "explain") and getattr(args, "action", None) is None:
            raise UsageError(f"llmbroker {args.command}: missing action\n{parser.format_usage()}")
        file_cfg = {}
        if args.config:
            try:
                file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise UsageError(f"cannot read --config {args.config}: {exc}") from None
            if not isinstance(file_cfg, dict):
                raise UsageError("--config must hold a JSON object")
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip() + "\n")
        _print({"error": "usage", "message": str(exc).splitlines()[0]})
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](Options(args, file_cfg))
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip() + "\n")
        _print({"error": "usage", "message": str(exc).splitlines()[0]})
        return EXIT_USAGE
    except (BrokerError, OSError, ValueError, KeyError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        log.error("%s", exc)
        _print({"error": code, "message": str(exc)})
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
