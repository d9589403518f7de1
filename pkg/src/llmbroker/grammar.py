"""GBNF grammars and the character-level recognizer behind constrained decoding.

A grammar is parsed into rules made of literals, character classes, rule
references and repeated groups, then desugared into plain alternatives::

    e*  ->  r ::= e r | (empty)
    e+  ->  e r          (r as above)
    e?  ->  r ::= e | (empty)

The recognizer keeps a set of parse stacks. Each stack is a tuple whose last
item is the next element to match; an empty stack means the consumed text is
a complete sentence. Stacks always have a terminal (character class) on top
after expansion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import (
    LeftRecursionError,
    NoRootRule,
    ParseError,
    Rejected,
    StackLimitExceeded,
    UnresolvedRule,
)
from .tokenizer import BOS, EOS, Tokenizer

MAX_EXPANSION_DEPTH = 4096
MAX_STACKS = 4096
_CACHE_LIMIT = 200_000


# --- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class CharClass:
    ranges: tuple[tuple[int, int], ...]
    negated: bool = False

    def matches(self, ch: str) -> bool:
        cp = ord(ch)
        for lo, hi in self.ranges:
            if lo <= cp <= hi:
                return not self.negated
        return self.negated


@dataclass(frozen=True)
class RuleRef:
    name: str


@dataclass(frozen=True)
class Group:
    alternatives: tuple[tuple["Element", ...], ...]


@dataclass(frozen=True)
class Repeat:
    element: "Element"
    op: str  # one of "*", "+", "?"


Element = Union[Literal, CharClass, RuleRef, Group, Repeat]


# --- parser ------------------------------------------------------------------


def _is_name_char(c: str) -> bool:
    return c.isascii() and (c.isalnum() or c in "-_")


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.pos = 0

    def error(self, message: str, pos: int | None = None) -> ParseError:
        pos = self.pos if pos is None else pos
        line = self.src.count("\n", 0, pos) + 1
        col = pos - (self.src.rfind("\n", 0, pos) + 1) + 1
        return ParseError(message, line, col)

    def peek(self, offset: int = 0) -> str:
        i = self.pos + offset
        return self.src[i] if i < len(self.src) else ""

    def skip_space(self) -> None:
        src, n = self.src, len(self.src)
        while self.pos < n:
            c = src[self.pos]
            if c == "#":
                while self.pos < n and src[self.pos] not in "\r\n":
                    self.pos += 1
            elif c.isspace():
                self.pos += 1
            else:
                break

    def name(self) -> str:
        start = self.pos
        while self.pos < len(self.src) and _is_name_char(self.src[self.pos]):
            self.pos += 1
        if start == self.pos:
            raise self.error("expected rule name")
        return self.src[start:self.pos]

    def at_rule_start(self) -> bool:
        """True if the input at pos reads ``name ::=``."""
        save = self.pos
        try:
            if not _is_name_char(self.peek()):
                return False
            self.name()
            self.skip_space()
            return self.src.startswith("::=", self.pos)
        finally:
            self.pos = save

    def parse(self) -> dict[str, list[tuple[Element, ...]]]:
        rules: dict[str, list[tuple[Element, ...]]] = {}
        self.skip_space()
        while self.pos < len(self.src):
            start = self.pos
            name = self.name()
            self.skip_space()
            if not self.src.startswith("::=", self.pos):
                raise self.error("expected '::='")
            self.pos += 3
            self.skip_space()
            alts = self.alternatives(nested=False)
            if name in rules:
                raise self.error(f"rule {name!r} defined twice", start)
            rules[name] = alts
            self.skip_space()
        return rules

    def alternatives(self, nested: bool) -> list[tuple[Element, ...]]:
        alts = [self.sequence(nested)]
        while self.peek() == "|":
            self.pos += 1
            self.skip_space()
            alts.append(self.sequence(nested))
        return alts

    def sequence(self, nested: bool) -> tuple[Element, ...]:
        items: list[Element] = []
        while True:
            self.skip_space()
            c = self.peek()
            if c == "" or c == "|" or c == ")":
                break
            if c == '"':
                items.append(self.literal())
            elif c == "[":
                items.append(self.char_class())
            elif c == "(":
                open_pos = self.pos
                self.pos += 1
                self.skip_space()
                alts = self.alternatives(nested=True)
                if self.peek() != ")":
                    raise self.error("expected ')'", open_pos if self.pos >= len(self.src) else None)
                self.pos += 1
                items.append(Group(tuple(alts)))
            elif _is_name_char(c):
                if not nested and self.at_rule_start():
                    break
                items.append(RuleRef(self.name()))
            elif c in "*+?":
                raise self.error(f"'{c}' without a preceding element")
            else:
                raise self.error(f"unexpected character {c!r}")
            self.skip_space()
            while self.peek() in ("*", "+", "?"):
                items[-1] = Repeat(items[-1], self.peek())
                self.pos += 1
                self.skip_space()
        return tuple(items)

    def escape(self) -> str:
        # pos is on the backslash
        start = self.pos
        self.pos += 1
        c = self.peek()
        simple = {"n": "\n", "t": "\t", "r": "\r", '"': '"', "\\": "\\", "[": "[", "]": "]", "-": "-", "^": "^"}
        if c in simple:
            self.pos += 1
            return simple[c]
        width = {"x": 2, "u": 4, "U": 8}.get(c)
        if width is None:
            raise self.error(f"unknown escape '\\{c}'", start)
        digits = self.src[self.pos + 1:self.pos + 1 + width]
        if len(digits) != width or any(d not in "0123456789abcdefABCDEF" for d in digits):
            raise self.error(f"expected {width} hex digits after '\\{c}'", start)
        self.pos += 1 + width
        cp = int(digits, 16)
        if cp > 0x10FFFF:
            raise self.error("code point out of range", start)
        return chr(cp)

    def literal(self) -> Literal:
        start = self.pos
        self.pos += 1
        out = []
        while True:
            c = self.peek()
            if c == "":
                raise self.error("unterminated string literal", start)
            if c == '"':
                self.pos += 1
                return Literal("".join(out))
            if c == "\\":
                out.append(self.escape())
            else:
                out.append(c)
                self.pos += 1

    def class_char(self, start: int) -> str:
        c = self.peek()
        if c == "":
            raise self.error("unterminated character class", start)
        if c == "\\":
            return self.escape()
        self.pos += 1
        return c

    def char_class(self) -> CharClass:
        start = self.pos
        self.pos += 1
        negated = self.peek() == "^"
        if negated:
            self.pos += 1
        ranges = []
        while self.peek() != "]":
            item_pos = self.pos
            lo = self.class_char(start)
            hi = lo
            if self.peek() == "-" and self.peek(1) not in ("]", ""):
                self.pos += 1
                hi = self.class_char(start)
            if ord(lo) > ord(hi):
                raise self.error(f"empty range {lo!r}-{hi!r}", item_pos)
            ranges.append((ord(lo), ord(hi)))
        self.pos += 1
        return CharClass(tuple(ranges), negated)


# --- compiled form -------------------------------------------------------------


class Grammar:
    """Parsed grammar plus its desugared, integer-coded rule table.

    Stack items: ``>= 0`` is a rule index, ``< 0`` is terminal ``~item``.
    """

    def __init__(self, rules: dict[str, list[tuple[Element, ...]]], source: str = ""):
        if "root" not in rules:
            raise NoRootRule()
        self.source = source
        self.rules = rules
        self.terminals: list[CharClass] = []
        self._term_index: dict[CharClass, int] = {}
        self.rule_names: list[str] = []
        self._rule_index: dict[str, int] = {}
        # alternatives per rule, stored reversed so they can be appended to a stack
        self.alternatives: list[tuple[tuple[int, ...], ...]] = []
        for name in rules:
            self._new_rule(name)
        for name, alts in rules.items():
            self.alternatives[self._rule_index[name]] = tuple(self._sequence(alt) for alt in alts)
        self.root = self._rule_index["root"]
        self._expand_cache: dict[tuple[int, ...], frozenset] = {}
        self._advance_cache: dict[tuple[frozenset, str], frozenset] = {}
        self._maskers: dict[int, TokenMasker] = {}

    @classmethod
    def parse(cls, source: str) -> Grammar:
        return cls(_Parser(source).parse(), source)

    @classmethod
    def load(cls, path: str | Path) -> Grammar:
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def _new_rule(self, name: str) -> int:
        self._rule_index[name] = len(self.rule_names)
        self.rule_names.append(name)
        self.alternatives.append(())
        return self._rule_index[name]

    def _fresh(self, alts: Iterable[tuple[int, ...]], hint: str) -> int:
        idx = self._new_rule(f"{hint}_{len(self.rule_names)}")
        self.alternatives[idx] = tuple(alts)
        return idx

    def _terminal(self, cls_: CharClass) -> int:
        if cls_ not in self._term_index:
            self._term_index[cls_] = len(self.terminals)
            self.terminals.append(cls_)
        return ~self._term_index[cls_]

    def _sequence(self, elements: tuple[Element, ...]) -> tuple[int, ...]:
        items: list[int] = []
        for el in elements:
            items.extend(self._element(el))
        return tuple(reversed(items))

    def _element(self, el: Element) -> list[int]:
        if isinstance(el, Literal):
            return [self._terminal(CharClass(((ord(c), ord(c)),))) for c in el.text]
        if isinstance(el, CharClass):
            return [self._terminal(el)]
        if isinstance(el, RuleRef):
            if el.name not in self._rule_index:
                raise UnresolvedRule(el.name)
            return [self._rule_index[el.name]]
        if isinstance(el, Group):
            return [self._fresh((self._sequence(a) for a in el.alternatives), "group")]
        if isinstance(el, Repeat):
            body = self._element(el.element)
            body_rev = tuple(reversed(body))
            if el.op == "?":
                return [self._fresh((body_rev, ()), "opt")]
            star = self._fresh((), "star")
            self.alternatives[star] = ((star,) + body_rev, ())
            return [star] if el.op == "*" else body + [star]
        raise TypeError(f"unknown grammar element {el!r}")

    # --- recognizer core ---

    def expand(self, stack: tuple[int, ...]) -> frozenset:
        """All stacks reachable from ``stack`` by expanding rule references on top."""
        cached = self._expand_cache.get(stack)
        if cached is not None:
            return cached
        out = set()
        seen = set()
        work = [(stack, 0)]
        alternatives = self.alternatives
        while work:
            st, depth = work.pop()
            if st in seen:
                continue
            seen.add(st)
            if not st or st[-1] < 0:
                out.add(st)
                continue
            if depth >= MAX_EXPANSION_DEPTH:
                raise LeftRecursionError(
                    f"expansion of rule {self.rule_names[st[-1]]!r} exceeded depth {MAX_EXPANSION_DEPTH}"
                )
            rest = st[:-1]
            for alt in alternatives[st[-1]]:
                work.append((rest + alt, depth + 1))
        if len(out) > MAX_STACKS:
            raise StackLimitExceeded(f"more than {MAX_STACKS} parse stacks")
        result = frozenset(out)
        if len(self._expand_cache) > _CACHE_LIMIT:
            self._expand_cache.clear()
        self._expand_cache[stack] = result
        return result

    def step(self, stacks: frozenset, ch: str) -> frozenset:
        """Stacks after consuming ``ch``; empty when no stack accepts it."""
        key = (stacks, ch)
        cached = self._advance_cache.get(key)
        if cached is not None:
            return cached
        out: set = set()
        terminals = self.terminals
        for st in stacks:
            if st and terminals[~st[-1]].matches(ch):
                out |= self.expand(st[:-1])
        if len(out) > MAX_STACKS:
            raise StackLimitExceeded(f"more than {MAX_STACKS} parse stacks")
        result = frozenset(out)
        if len(self._advance_cache) > _CACHE_LIMIT:
            self._advance_cache.clear()
        self._advance_cache[key] = result
        return result

    def masker(self, tokenizer: Tokenizer) -> TokenMasker:
        m = self._maskers.get(id(tokenizer))
        if m is None or m.tokenizer is not tokenizer:
            m = self._maskers[id(tokenizer)] = TokenMasker(self, tokenizer)
        return m


def parse_grammar(source: str) -> Grammar:
    return Grammar.parse(source)


# --- state -------------------------------------------------------------------


@dataclass(frozen=True)
class GrammarState:
    grammar: Grammar = field(repr=False, compare=False)
    stacks: frozenset
    position: int = 0

    def advance(self, ch: str) -> GrammarState:
        return advance(self, ch)

    def feed(self, text: str) -> GrammarState:
        state = self
        for ch in text:
            state = advance(state, ch)
        return state

    @property
    def complete(self) -> bool:
        return () in self.stacks


def init_state(grammar: Grammar) -> GrammarState:
    return GrammarState(grammar, grammar.expand((grammar.root,)))


def advance(state: GrammarState, ch: str) -> GrammarState:
    stacks = state.grammar.step(state.stacks, ch)
    if not stacks:
        raise Rejected(ch, state.position)
    return GrammarState(state.grammar, stacks, state.position + 1)


def accepts_complete(state: GrammarState) -> bool:
    return () in state.stacks


def accepts_prefix(grammar: Grammar, text: str) -> bool:
    stacks = grammar.expand((grammar.root,))
    for ch in text:
        stacks = grammar.step(stacks, ch)
        if not stacks:
            return False
    return True


def accepts(grammar: Grammar, text: str) -> bool:
    stacks = grammar.expand((grammar.root,))
    for ch in text:
        stacks = grammar.step(stacks, ch)
        if not stacks:
            return False
    return () in stacks


# --- token masks ---------------------------------------------------------------


@dataclass
class TokenMask:
    allowed: np.ndarray  # bool, length vocab_size
    eos_allowed: bool


def unconstrained_mask(vocab_size: int) -> TokenMask:
    allowed = np.ones(vocab_size, dtype=bool)
    allowed[BOS] = False
    return TokenMask(allowed, True)


class TokenMasker:
    """Computes vocabulary masks for one (grammar, tokenizer) pair.

    Single-character tokens are decided by testing the first character
    against the terminals on top of the stacks; longer tokens walk a trie of
    their remaining characters, pruning dead branches.
    """

    def __init__(self, grammar: Grammar, tokenizer: Tokenizer):
        self.grammar = grammar
        self.tokenizer = tokenizer
        texts = tokenizer.token_text
        vocab = len(texts)
        chars = sorted({t[0] for i, t in enumerate(texts) if t and i not in (BOS, EOS)})
        self.first_chars = chars
        pos = {c: i for i, c in enumerate(chars)}
        # index len(chars) is a sentinel column that is always False
        self.first_index = np.array(
            [pos[t[0]] if t and i not in (BOS, EOS) else len(chars) for i, t in enumerate(texts)], dtype=np.intp
        )
        self.single = np.array([len(t) == 1 and i not in (BOS, EOS) for i, t in enumerate(texts)], dtype=bool)
        # tries over the tails of multi-character tokens, keyed by first char
        self.tries: dict[str, dict] = {}
        for tid, text in enumerate(texts):
            if len(text) > 1 and tid not in (BOS, EOS):
                node = self.tries.setdefault(text[0], {})
                for ch in text[1:]:
                    node = node.setdefault(ch, {})
                node.setdefault(None, []).append(tid)
        self.vocab_size = vocab
        self._term_vecs: dict[int, np.ndarray] = {}
        self._cache: dict[frozenset, TokenMask] = {}

    def _term_vec(self, term: int) -> np.ndarray:
        vec = self._term_vecs.get(term)
        if vec is None:
            cls_ = self.grammar.terminals[~term]
            vec = np.array([cls_.matches(c) for c in self.first_chars] + [False], dtype=bool)
            self._term_vecs[term] = vec
        return vec

    def mask(self, state: GrammarState) -> TokenMask:
        cached = self._cache.get(state.stacks)
        if cached is not None:
            return cached
        stacks = state.stacks
        first_ok = np.zeros(len(self.first_chars) + 1, dtype=bool)
        for top in {st[-1] for st in stacks if st}:
            first_ok |= self._term_vec(top)
        token_first_ok = first_ok[self.first_index]
        allowed = token_first_ok & self.single
        if self.tries:
            step = self.grammar.step
            for i in np.flatnonzero(first_ok[:-1]):
                ch = self.first_chars[i]
                trie = self.tries.get(ch)
                if trie:
                    self._walk(trie, step(stacks, ch), allowed, step)
        # BOS and EOS carry no text; EOS permission lives in eos_allowed
        allowed[BOS] = allowed[EOS] = False
        result = TokenMask(allowed, () in stacks)
        if len(self._cache) > 50_000:
            self._cache.clear()
        self._cache[stacks] = result
        return result

    @staticmethod
    def _walk(node: dict, stacks: frozenset, allowed: np.ndarray, step) -> None:
        work = [(node, stacks)]
        while work:
            node, stacks = work.pop()
            for ch, child in node.items():
                if ch is None:
                    allowed[child] = True
                    continue
                nxt = step(stacks, ch)
                if nxt:
                    work.append((child, nxt))


def token_mask(state: GrammarState | None, tokenizer: Tokenizer) -> TokenMask:
    if state is None:
        return unconstrained_mask(tokenizer.vocab_size)
    return state.grammar.masker(tokenizer).mask(state)


_DATA = Path(__file__).parent / "data"


@lru_cache(maxsize=None)
def builtin_grammar(name: str) -> Grammar:
    """Load a vendored grammar (``json``, ``plan``, ``yes_no``)."""
    return Grammar.load(_DATA / f"{name}.gbnf")
