"""Knowledge-graph planning with an LLM.

The robot's facts are serialized to sentences and stored as embeddings. To
plan, the goal retrieves the most relevant facts, which together with the
action descriptions form a prompt; the model answers under a grammar that
only admits a JSON list of steps. Steps are executed STRIPS-style (delete
effects, then add effects) and the goal is verified both symbolically and by
asking the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .backend import HashEmbed
from .engine import GenerationGoal, generate
from .errors import (
    BadPlanStep,
    CheckFailed,
    GrammarDeadEnd,
    PlanningFailed,
    PreconditionFailed,
    ScriptViolatesGrammar,
    UnknownAction,
)
from .grammar import builtin_grammar
from .rag import Embedder, PromptTemplate, retrieve
from .sampler import SamplingParams
from .tokenizer import Tokenizer
from .vectorstore import VectorStore

Triple = tuple[str, str, str]

PLAN_PARAMS = SamplingParams(temperature=0.0, top_k=0, top_p=1.0, max_tokens=4096)
CHECK_PARAMS = SamplingParams(temperature=0.0, top_k=0, top_p=1.0, max_tokens=8)


def _triple(raw: Sequence[str], what: str = "fact") -> Triple:
    if len(raw) != 3:
        raise ValueError(f"{what} must have exactly 3 terms: {list(raw)!r}")
    for term in raw:
        if not isinstance(term, str) or not term or any(c.isspace() for c in term):
            raise ValueError(f"{what} terms must be non-empty and whitespace-free: {list(raw)!r}")
    return (raw[0], raw[1], raw[2])


class KnowledgeGraph:
    """A set of (subject, predicate, object) facts."""

    def __init__(self, facts: Iterable[Sequence[str]] = ()):
        self.facts: frozenset[Triple] = frozenset(_triple(f) for f in facts)

    @classmethod
    def load(cls, path: str | Path) -> KnowledgeGraph:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def from_json(cls, data: dict) -> KnowledgeGraph:
        return cls(data["facts"])

    def to_json(self) -> dict:
        return {"facts": [list(t) for t in sorted(self.facts)]}

    def __contains__(self, triple) -> bool:
        return tuple(triple) in self.facts

    def __len__(self) -> int:
        return len(self.facts)

    def __eq__(self, other) -> bool:
        return isinstance(other, KnowledgeGraph) and self.facts == other.facts

    def __repr__(self) -> str:
        return f"KnowledgeGraph({sorted(self.facts)!r})"


def fact_sentence(triple: Triple) -> str:
    return f"{triple[0]} {triple[1]} {triple[2]}."


def kg_to_text(kg: KnowledgeGraph) -> list[str]:
    return sorted(fact_sentence(t) for t in kg.facts)


@dataclass(frozen=True)
class Goal:
    required: tuple[Triple, ...]

    def __post_init__(self):
        if not self.required:
            raise ValueError("a goal needs at least one required fact")

    @classmethod
    def from_json(cls, data: dict) -> Goal:
        return cls(tuple(_triple(t, "goal fact") for t in data["required"]))

    @classmethod
    def parse(cls, text: str) -> Goal:
        """Shorthand ``"subj pred obj, subj pred obj"``."""
        return cls(tuple(_triple(part.split(), "goal fact") for part in text.split(",") if part.strip()))

    def text(self) -> str:
        return " ".join(fact_sentence(t) for t in self.required)


@dataclass(frozen=True)
class ActionSchema:
    name: str
    params: tuple[str, ...]
    preconditions: tuple[Triple, ...] = ()
    add_effects: tuple[Triple, ...] = ()
    del_effects: tuple[Triple, ...] = ()

    def __post_init__(self):
        for p in self.params:
            if not p.startswith("?"):
                raise ValueError(f"action {self.name}: parameter {p!r} must start with '?'")
        for pattern in self.preconditions + self.add_effects + self.del_effects:
            for term in pattern:
                if term.startswith("?") and term not in self.params:
                    raise ValueError(f"action {self.name}: variable {term} is not a parameter")

    @classmethod
    def from_json(cls, data: dict) -> ActionSchema:
        return cls(
            data["name"],
            tuple(data.get("params", [])),
            tuple(_triple(t, "precondition") for t in data.get("preconditions", [])),
            tuple(_triple(t, "effect") for t in data.get("add", [])),
            tuple(_triple(t, "effect") for t in data.get("del", [])),
        )

    def bind(self, args: Sequence[str]) -> dict[str, str]:
        return dict(zip(self.params, args))

    def describe(self) -> str:
        def pats(ps):
            return ", ".join(" ".join(p) for p in ps) or "nothing"

        return (f"{self.name}({', '.join(self.params)}): requires {pats(self.preconditions)}; "
                f"adds {pats(self.add_effects)}; removes {pats(self.del_effects)}")


def load_actions(source: str | Path | list) -> dict[str, ActionSchema]:
    data = json.loads(Path(source).read_text(encoding="utf-8")) if not isinstance(source, list) else source
    registry: dict[str, ActionSchema] = {}
    for item in data:
        schema = ActionSchema.from_json(item)
        if schema.name in registry:
            raise ValueError(f"action {schema.name!r} defined twice")
        registry[schema.name] = schema
    return registry


@dataclass(frozen=True)
class PlanStep:
    action: str
    args: tuple[str, ...]


@dataclass
class Plan:
    steps: list[PlanStep]
    text: str = field(default="", compare=False)

    def to_json(self) -> list[dict]:
        return [{"action": s.action, "args": list(s.args)} for s in self.steps]


def parse_plan(text: str, actions: dict[str, ActionSchema]) -> Plan:
    data = json.loads(text)
    steps = []
    for i, item in enumerate(data):
        name, args = item["action"], tuple(item["args"])
        schema = actions.get(name)
        if schema is None:
            raise UnknownAction(f"step {i}: unknown action {name!r}")
        if len(args) != len(schema.params):
            raise BadPlanStep(f"step {i}: {name} takes {len(schema.params)} arguments, got {len(args)}")
        steps.append(PlanStep(name, args))
    return Plan(steps, text)


def _ground(pattern: Triple, binding: dict[str, str]) -> Triple:
    return tuple(binding.get(t, t) for t in pattern)  # type: ignore[return-value]


def execute(plan: Plan, kg: KnowledgeGraph, actions: dict[str, ActionSchema]) -> KnowledgeGraph:
    facts = set(kg.facts)
    for i, step in enumerate(plan.steps):
        schema = actions.get(step.action)
        if schema is None:
            raise UnknownAction(f"step {i}: unknown action {step.action!r}")
        if len(step.args) != len(schema.params):
            raise BadPlanStep(f"step {i}: {step.action} takes {len(schema.params)} arguments")
        binding = schema.bind(step.args)
        for pre in schema.preconditions:
            fact = _ground(pre, binding)
            if fact not in facts:
                raise PreconditionFailed(i, fact, KnowledgeGraph(facts))
        facts -= {_ground(p, binding) for p in schema.del_effects}
        facts |= {_ground(p, binding) for p in schema.add_effects}
    return KnowledgeGraph(facts)


def check_goal(kg: KnowledgeGraph, goal: Goal) -> bool:
    return all(t in kg.facts for t in goal.required)


def ingest_kg(store: VectorStore, kg: KnowledgeGraph, embed_fn: Embedder | None = None) -> int:
    embed_fn = embed_fn or HashEmbed()
    for sentence in kg_to_text(kg):
        store.insert(sentence, embed_fn(sentence), {"source": "kg"})
    return len(kg.facts)


def plan_prompt(goal: Goal, contexts: Sequence[str], actions: dict[str, ActionSchema]) -> str:
    described = "\n".join(actions[name].describe() for name in sorted(actions))
    query = f"Available actions:\n{described}\n\nGoal: {goal.text()}"
    return PromptTemplate.builtin("plan").render(contexts, query)


def plan(goal: Goal, store: VectorStore, actions: dict[str, ActionSchema], backend, k: int = 4,
         *, params: SamplingParams = PLAN_PARAMS, embed_fn: Embedder | None = None,
         tokenizer: Tokenizer | None = None) -> Plan:
    if not actions:
        raise PlanningFailed("no actions available")
    contexts = retrieve(store, goal.text(), k, embed_fn) if len(store) else []
    prompt = plan_prompt(goal, contexts, actions)
    result = generate(GenerationGoal(prompt, params, builtin_grammar("plan")), backend, tokenizer=tokenizer)
    if isinstance(result.error, ScriptViolatesGrammar):
        raise result.error
    if isinstance(result.error, GrammarDeadEnd):
        raise PlanningFailed(str(result.error)) from result.error
    if result.finish_reason != "grammar_complete":
        raise PlanningFailed(f"plan generation ended with {result.finish_reason}: {result.error or ''}")
    return parse_plan(result.text, actions)


def llm_check_goal(kg: KnowledgeGraph, goal: Goal, backend, *, params: SamplingParams = CHECK_PARAMS,
                   tokenizer: Tokenizer | None = None) -> bool:
    prompt = PromptTemplate.builtin("goal_check").render(kg_to_text(kg), goal.text())
    result = generate(GenerationGoal(prompt, params, builtin_grammar("yes_no")), backend, tokenizer=tokenizer)
    if result.finish_reason != "grammar_complete":
        raise CheckFailed(f"goal check ended with {result.finish_reason}: {result.error or ''}")
    return result.text == "yes"


@dataclass
class PlanOutcome:
    plan: Plan
    final_kg: KnowledgeGraph
    goal_met: bool
    llm_goal_met: bool | None
    failure: PreconditionFailed | None = None

    def to_json(self) -> dict:
        out = {
            "plan": self.plan.to_json(),
            "final_kg": self.final_kg.to_json(),
            "goal_met": self.goal_met,
            "llm_goal_met": self.llm_goal_met,
        }
        if self.failure is not None:
            out["failure"] = {"step": self.failure.step, "missing": list(self.failure.missing)}
        return out


def run_pipeline(kg: KnowledgeGraph, actions: dict[str, ActionSchema], goal: Goal, backend, store: VectorStore,
                 k: int = 4, *, embed_fn: Embedder | None = None, llm_check: bool = True,
                 tokenizer: Tokenizer | None = None) -> PlanOutcome:
    """Ingest the KG, plan, execute, then verify the goal symbolically and with the model."""
    ingest_kg(store, kg, embed_fn)
    the_plan = plan(goal, store, actions, backend, k, embed_fn=embed_fn, tokenizer=tokenizer)
    failure = None
    try:
        final = execute(the_plan, kg, actions)
    except PreconditionFailed as exc:
        failure = exc
        final = exc.kg
    llm_ok = llm_check_goal(final, goal, backend, tokenizer=tokenizer) if llm_check else None
    return PlanOutcome(the_plan, final, check_goal(final, goal), llm_ok, failure)
