"""Exception hierarchy shared across the broker.

Every error carries a short ``code`` used as the ``code`` field of wire
error frames and in CLI error output.
"""

from __future__ import annotations


class BrokerError(Exception):
    code = "internal"


# tokenizer
class InvalidText(BrokerError):
    code = "invalid_text"


class InvalidMergeTable(BrokerError):
    code = "invalid_merge_table"


# backend
class EmptyContext(BrokerError):
    code = "empty_context"


class EmptyInput(BrokerError):
    code = "empty_input"


class ScriptExhausted(BrokerError):
    code = "script_exhausted"


class ScriptViolatesGrammar(BrokerError):
    code = "script_violates_grammar"


# grammar
class GrammarError(BrokerError):
    code = "bad_grammar"


class ParseError(GrammarError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column


class NoRootRule(GrammarError):
    def __init__(self):
        super().__init__("grammar has no 'root' rule")


class UnresolvedRule(GrammarError):
    def __init__(self, name: str):
        super().__init__(f"reference to undefined rule {name!r}")
        self.name = name


class LeftRecursionError(GrammarError):
    pass


class StackLimitExceeded(GrammarError):
    pass


class Rejected(BrokerError):
    code = "rejected"

    def __init__(self, ch: str, position: int):
        super().__init__(f"character {ch!r} rejected at position {position}")
        self.ch = ch
        self.position = position


# sampler / engine
class NoValidToken(BrokerError):
    code = "no_valid_token"


class GrammarDeadEnd(BrokerError):
    code = "grammar_dead_end"


class UnknownSession(BrokerError):
    code = "unknown_session"


class DuplicateSession(BrokerError):
    code = "duplicate_id"


# vector store
class CorruptStore(BrokerError):
    code = "corrupt_store"


class DimMismatch(BrokerError):
    code = "dim_mismatch"


class StoreWriteError(BrokerError):
    code = "store_write_error"


class ZeroQuery(BrokerError):
    code = "zero_query"


class EmptyStore(BrokerError):
    code = "empty_store"


# rag
class InvalidTemplate(BrokerError):
    code = "invalid_template"


# planner
class PlanningFailed(BrokerError):
    code = "planning_failed"


class UnknownAction(BrokerError):
    code = "unknown_action"


class BadPlanStep(BrokerError):
    code = "bad_plan_step"


class PreconditionFailed(BrokerError):
    code = "precondition_failed"

    def __init__(self, step: int, missing: tuple, kg=None):
        super().__init__(f"step {step}: precondition {' '.join(missing)} not satisfied")
        self.step = step
        self.missing = missing
        self.kg = kg


class CheckFailed(BrokerError):
    code = "check_failed"
