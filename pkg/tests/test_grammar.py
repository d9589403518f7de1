import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmbroker.errors import (
    LeftRecursionError,
    NoRootRule,
    ParseError,
    Rejected,
    StackLimitExceeded,
    UnresolvedRule,
)
from llmbroker.grammar import (
    CharClass,
    Grammar,
    Literal,
    RuleRef,
    accepts,
    accepts_complete,
    accepts_prefix,
    advance,
    builtin_grammar,
    init_state,
    parse_grammar,
    token_mask,
)
from llmbroker.tokenizer import BOS, EOS, MergeTable, Tokenizer, get_tokenizer

from oracles import mask_oracle, random_states

TOK = get_tokenizer()


def top(stack, g):
    return g.terminals[~stack[-1]]


def test_parse_single_literal():
    g = parse_grammar('root ::= "a"')
    assert list(g.rules) == ["root"]
    assert g.rules["root"] == [(Literal("a"),)]


def test_parse_two_rules():
    g = parse_grammar('root ::= x  x ::= "b" | "c"')
    assert g.rules["root"] == [(RuleRef("x"),)]
    assert g.rules["x"] == [(Literal("b"),), (Literal("c"),)]


def test_parse_stock_json_grammar():
    g = builtin_grammar("json")
    assert {"root", "value", "object", "array", "string", "number", "ws"} <= set(g.rules)


def test_escapes_and_classes():
    g = parse_grammar(r'root ::= "\n\t\"\\\x41" [^a-c\]] # trailing comment')
    assert g.rules["root"][0][0] == Literal('\n\t"\\A')
    cls_ = g.rules["root"][0][1]
    assert cls_.negated and cls_.matches("d") and cls_.matches("x") is True
    assert not cls_.matches("b") and not cls_.matches("]")


def test_parse_error_position():
    with pytest.raises(ParseError) as info:
        parse_grammar('root ::= "a"\nx ::= ( "b"')
    assert info.value.line == 2
    assert info.value.column >= 1


@pytest.mark.parametrize("source", ['root ::= "abc', "root ::= [z-a]", 'root "a"', 'root ::= "a" )'])
def test_syntax_errors(source):
    with pytest.raises(ParseError):
        parse_grammar(source)


def test_empty_body_is_epsilon():
    g = parse_grammar("root ::=")
    assert accepts(g, "") and not accepts_prefix(g, "a")


def test_missing_root():
    with pytest.raises(NoRootRule):
        parse_grammar('start ::= "a"')


def test_unresolved_reference():
    with pytest.raises(UnresolvedRule) as info:
        parse_grammar("root ::= missing")
    assert info.value.name == "missing"


def test_init_single_stack():
    g = parse_grammar('root ::= "a"')
    s = init_state(g)
    assert len(s.stacks) == 1
    (stack,) = s.stacks
    assert top(stack, g) == CharClass(((97, 97),))


def test_init_alternatives():
    assert len(init_state(parse_grammar('root ::= "a" | "b"')).stacks) == 2


def test_init_star_includes_empty():
    assert () in init_state(parse_grammar('root ::= x*  x ::= "a"')).stacks


def test_advance_examples():
    g = parse_grammar('root ::= "ab"')
    s = advance(init_state(g), "a")
    assert len(s.stacks) == 1 and top(next(iter(s.stacks)), g).matches("b")
    with pytest.raises(Rejected) as info:
        advance(init_state(g), "x")
    assert info.value.ch == "x" and info.value.position == 0


def test_json_char_by_char():
    text = '{"k":1}'
    assert json.loads(text) == {"k": 1}
    s = init_state(builtin_grammar("json"))
    for ch in text:
        s = advance(s, ch)
    assert accepts_complete(s)


def test_accepts_complete_examples():
    assert accepts_complete(init_state(parse_grammar('root ::= "a"?')))
    assert accepts_complete(advance(init_state(parse_grammar('root ::= "a"')), "a"))
    assert not accepts_complete(advance(init_state(parse_grammar('root ::= "ab"')), "a"))


def test_mask_alternatives():
    g = parse_grammar('root ::= "a" | "b"')
    m = token_mask(init_state(g), TOK)
    assert np.flatnonzero(m.allowed).tolist() == [97, 98]
    assert not m.eos_allowed
    assert m.allowed.tolist() == mask_oracle(init_state(g), TOK)


def test_mask_after_completion():
    g = parse_grammar('root ::= "a"')
    m = token_mask(advance(init_state(g), "a"), TOK)
    assert not m.allowed.any()
    assert m.eos_allowed


def test_unconstrained_mask():
    m = token_mask(None, TOK)
    assert not m.allowed[BOS]
    assert m.allowed.sum() == TOK.vocab_size - 1
    assert m.eos_allowed


def test_json_initial_mask_is_open_brace():
    m = token_mask(init_state(builtin_grammar("json")), TOK)
    assert np.flatnonzero(m.allowed).tolist() == [ord("{")]


def test_multichar_tokens_with_merges():
    tok = Tokenizer(MergeTable.from_pairs([(97, 98), (258, 99), (120, 121)]))
    g = parse_grammar('root ::= "ab" "c"?')
    m = token_mask(init_state(g), tok)
    assert m.allowed[258] and m.allowed[259] and not m.allowed[260]
    assert m.allowed.tolist() == mask_oracle(init_state(g), tok)


def test_unicode_token_text():
    tok = Tokenizer(MergeTable.from_pairs([(0xC3, 0xA9)]))
    g = parse_grammar('root ::= "é"')
    m = token_mask(init_state(g), tok)
    assert np.flatnonzero(m.allowed).tolist() == [258]


def test_left_recursion_rejected():
    with pytest.raises(LeftRecursionError):
        init_state(parse_grammar('root ::= root "a" | "a"'))


def test_stack_limit():
    # each "a" may close with "b" or "c", so n opens leave 2**n distinct stacks
    g = parse_grammar('root ::= s  s ::= "a" s "b" | "a" s "c" | ""')
    state = init_state(g).feed("a" * 9)
    assert len(state.stacks) > 1000 and len(state.stacks) <= 4096
    with pytest.raises(StackLimitExceeded):
        state.feed("aa")


def test_accepts_helpers():
    g = builtin_grammar("yes_no")
    assert accepts(g, "yes") and accepts(g, "no")
    assert accepts_prefix(g, "ye") and not accepts(g, "ye")
    assert not accepts_prefix(g, "yo")


def test_plan_grammar_bounds():
    g = builtin_grammar("plan")
    assert accepts(g, '[{"action":"goto","args":["kitchen"]}]')
    assert accepts(g, "[]")
    assert not accepts_prefix(g, '[{"action":"' + "x" * 25)
    nine = ",".join(['{"action":"a","args":[]}'] * 9)
    assert not accepts_prefix(g, f"[{nine}]")


FIXTURE_SENTENCES = {
    "arith": ["1", "(1 + 2)*30", "4/2-1"],
    "int_list": ["[]", "[0]", "[1, -20,3]"],
    "identifiers": ["a", "a_b.c9", "_x._y"],
    "unicode": ["grüß Zoé€!", "été a"],
    "quoted": ['""', r'"a\nb\"c"'],
    "csv": ["a,b\n", '"x,y",z\nq'],
    "nested": ["", "([a]b)c", "[[]]"],
}


@pytest.mark.parametrize("name", sorted(FIXTURE_SENTENCES))
def test_fixture_grammars_accept_samples(name, fixtures):
    g = Grammar.load(fixtures / "grammars" / f"{name}.gbnf")
    for sentence in FIXTURE_SENTENCES[name]:
        assert accepts(g, sentence), sentence


@given(st.text(alphabet='{}[]":,0123456789-.eE truefalsn\\', max_size=30))
@settings(max_examples=300, deadline=None)
def test_json_recognizer_agrees_with_json_parser(text):
    g = builtin_grammar("json")
    try:
        parsed = json.loads(text, strict=False)
        valid = isinstance(parsed, dict) and text[:1] == "{"
    except ValueError:
        valid = False
    if valid:
        # the grammar forbids leading whitespace and trailing garbage
        assert accepts(g, text) or text != text.strip()
    elif accepts(g, text):
        raise AssertionError(f"grammar accepted invalid JSON {text!r}")


@given(st.text(alphabet="ab()[]c x", max_size=20), st.text(alphabet="ab()[]c x", max_size=6))
@settings(max_examples=300, deadline=None)
def test_rejection_is_final(prefix, suffix):
    g = parse_grammar('root ::= item*  item ::= "(" item* ")" | "[" item* "]" | [a-c]')
    if not accepts_prefix(g, prefix):
        assert not accepts_prefix(g, prefix + suffix)


@given(st.integers(0, 2**32))
@settings(max_examples=25, deadline=None)
def test_mask_matches_oracle_on_random_states(seed):
    rng = random.Random(seed)
    tok = Tokenizer(MergeTable.from_pairs([(123, 34), (34, 58), (116, 114), (260, 117)]))
    g = builtin_grammar("json")
    for state in random_states(g, '{}[]":,0123456789 tru', 4, rng):
        m = token_mask(state, tok)
        assert m.allowed.tolist() == mask_oracle(state, tok)
        assert m.eos_allowed == accepts_complete(state)
        assert not m.allowed[BOS] and not m.allowed[EOS]
