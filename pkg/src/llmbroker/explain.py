"""Answer questions about a robot's past behaviour from its runtime logs."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .backend import HashEmbed
from .engine import GenerationGoal, generate
from .errors import EmptyStore
from .rag import DEFAULT_K, DEFAULT_POLICY, ChunkingPolicy, Embedder, PromptTemplate, retrieve_hits, windows
from .sampler import SamplingParams
from .tokenizer import Tokenizer
from .vectorstore import VectorStore

LEVELS = ("DEBUG", "INFO", "WARN", "ERROR", "FATAL")
_LINE = re.compile(
    r"^\[([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\] \[(DEBUG|INFO|WARN|ERROR|FATAL)\] \[([^\]]*)\] ?(.*)$",
    re.DOTALL,
)
ANSWER_PARAMS = SamplingParams(temperature=0.0, top_k=0, top_p=1.0, max_tokens=128, stop=("\n\n",))


@dataclass(frozen=True)
class LogEntry:
    timestamp: float | None
    level: str
    node: str
    message: str
    raw: str
    structured: bool = True


def parse_log_line(line: str) -> LogEntry:
    """Parse ``[<time>] [<LEVEL>] [<node>] <message>``; anything else becomes an unstructured INFO entry."""
    m = _LINE.match(line)
    if m is None:
        return LogEntry(None, "INFO", "unknown", line, line, structured=False)
    return LogEntry(float(m.group(1)), m.group(2), m.group(3), m.group(4), line)


def ingest_logs(store: VectorStore, lines: Sequence[str], policy: ChunkingPolicy = DEFAULT_POLICY,
                embed_fn: Embedder | None = None) -> int:
    """Store line windows of the log; chunks are the raw lines joined with newlines."""
    embed_fn = embed_fn or HashEmbed()
    lines = [line.rstrip("\r\n") for line in lines]
    if policy.unit != "lines":
        raise ValueError("log ingestion chunks by lines")
    count = 0
    for first, end in windows(len(lines), policy):
        text = "\n".join(lines[first:end])
        if not text.strip():
            continue
        store.insert(text, embed_fn(text), {"source": "log", "first_line": str(first), "last_line": str(end - 1)})
        count += 1
    return count


@dataclass
class Answer:
    text: str
    citations: list[tuple[str, float]]
    finish_reason: str = ""

    def to_json(self) -> dict:
        return {
            "answer": self.text,
            "finish_reason": self.finish_reason,
            "citations": [{"text": t, "score": s} for t, s in self.citations],
        }


def ask(store: VectorStore, question: str, backend, k: int = DEFAULT_K, *,
        params: SamplingParams = ANSWER_PARAMS, embed_fn: Embedder | None = None,
        template: PromptTemplate | None = None, tokenizer: Tokenizer | None = None) -> Answer:
    if len(store) == 0:
        raise EmptyStore("no logs have been ingested")
    hits = retrieve_hits(store, question, k, embed_fn)
    contexts = [h.record.text for h in hits]
    prompt = (template or PromptTemplate.builtin("rag_answer")).render(contexts, question)
    result = generate(GenerationGoal(prompt, params), backend, tokenizer=tokenizer)
    if result.error is not None:
        raise result.error
    return Answer(result.text, [(h.record.text, h.score) for h in hits], result.finish_reason)
