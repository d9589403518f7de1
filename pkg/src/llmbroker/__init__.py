"""Edge LLM broker: deterministic local inference, grammar-constrained decoding and RAG pipelines."""

from .backend import HashEmbed, HashLM, ScriptedLM, load_backend
from .engine import Engine, GenerationGoal, GenerationResult
from .grammar import Grammar
from .sampler import SamplingParams
from .tokenizer import BOS, EOS, MergeTable, Tokenizer, get_tokenizer
from .vectorstore import VectorStore

__version__ = "0.1.0"

__all__ = [
    "BOS", "EOS", "Engine", "GenerationGoal", "GenerationResult", "Grammar", "HashEmbed", "HashLM",
    "MergeTable", "SamplingParams", "ScriptedLM", "Tokenizer", "VectorStore", "get_tokenizer", "load_backend",
]
