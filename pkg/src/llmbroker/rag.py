"""Retrieval-augmented prompting: chunk, embed and store documents, retrieve by query, fill a template."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .backend import HashEmbed
from .errors import InvalidTemplate
from .vectorstore import SearchHit, VectorStore

Embedder = Callable[[str], Sequence[float]]

CONTEXT_DELIMITER = "\n---\n"
DEFAULT_K = 4
TEMPLATE_DIR = Path(__file__).parent / "data" / "templates"


@dataclass(frozen=True)
class ChunkingPolicy:
    unit: str = "lines"
    size: int = 20
    overlap: int = 5

    def __post_init__(self):
        if self.unit not in ("lines", "chars"):
            raise ValueError(f"chunk unit must be 'lines' or 'chars', not {self.unit!r}")
        if self.size <= 0:
            raise ValueError("chunk size must be > 0")
        if not 0 <= self.overlap < self.size:
            raise ValueError("chunk overlap must satisfy 0 <= overlap < size")


DEFAULT_POLICY = ChunkingPolicy()


def windows(n: int, policy: ChunkingPolicy) -> list[tuple[int, int]]:
    """Half-open ``(start, end)`` unit ranges of the sliding windows over ``n`` units."""
    step = policy.size - policy.overlap
    return [(start, min(start + policy.size, n)) for start in range(0, n, step)]


def _units(text: str, policy: ChunkingPolicy) -> list[str]:
    return text.splitlines(keepends=True) if policy.unit == "lines" else list(text)


def chunk(text: str, policy: ChunkingPolicy = DEFAULT_POLICY) -> list[str]:
    units = _units(text, policy)
    return ["".join(units[a:b]) for a, b in windows(len(units), policy)]


def ingest(store: VectorStore, documents: Iterable[tuple[str, str]] | dict[str, str],
           policy: ChunkingPolicy = DEFAULT_POLICY, embed_fn: Embedder | None = None) -> int:
    """Chunk, embed and insert ``(source, text)`` documents. Whitespace-only chunks are skipped."""
    embed_fn = embed_fn or _default_embedder()
    if isinstance(documents, dict):
        documents = documents.items()
    count = 0
    for source, text in documents:
        for index, piece in enumerate(chunk(text, policy)):
            if not piece.strip():
                continue
            store.insert(piece, embed_fn(piece), {"source": source, "chunk_index": str(index)})
            count += 1
    return count


def retrieve_hits(store: VectorStore, query: str, k: int = DEFAULT_K,
                  embed_fn: Embedder | None = None) -> list[SearchHit]:
    embed_fn = embed_fn or _default_embedder()
    return store.search(embed_fn(query), k)


def retrieve(store: VectorStore, query: str, k: int = DEFAULT_K, embed_fn: Embedder | None = None) -> list[str]:
    return [hit.record.text for hit in retrieve_hits(store, query, k, embed_fn)]


class PromptTemplate:
    """Template text containing ``{context}`` and ``{query}`` exactly once each."""

    PLACEHOLDERS = ("{context}", "{query}")

    def __init__(self, text: str):
        for ph in self.PLACEHOLDERS:
            n = text.count(ph)
            if n != 1:
                raise InvalidTemplate(f"template must contain {ph} exactly once (found {n})")
        self.text = text

    @classmethod
    def load(cls, path: str | Path) -> PromptTemplate:
        return cls(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def builtin(cls, name: str) -> PromptTemplate:
        return cls.load(TEMPLATE_DIR / f"{name}.tmpl")

    def render(self, contexts: Sequence[str], query: str) -> str:
        # splice in one pass so placeholder-like text inside the values is left alone
        values = {"{context}": CONTEXT_DELIMITER.join(contexts), "{query}": query}
        ci, qi = self.text.index("{context}"), self.text.index("{query}")
        first, second = sorted([("{context}", ci), ("{query}", qi)], key=lambda p: p[1])
        t = self.text
        return (
            t[: first[1]]
            + values[first[0]]
            + t[first[1] + len(first[0]): second[1]]
            + values[second[0]]
            + t[second[1] + len(second[0]):]
        )


def build_prompt(template: PromptTemplate | str, contexts: Sequence[str], query: str) -> str:
    if isinstance(template, str):
        template = PromptTemplate(template)
    return template.render(contexts, query)


def _default_embedder() -> Embedder:
    return HashEmbed()
