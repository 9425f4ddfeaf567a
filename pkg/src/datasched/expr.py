"""Requirement/rank expression language.

A deliberately small matchmaking language: scalar literals, attribute
references scoped to ``job.`` or ``machine.``, unary ``!``/``-`` and the
binary operators ``|| && == != < <= > >= + - * /``.

Evaluation is three-valued.  Anything that cannot be computed (a missing
attribute, a type mismatch, division by zero) yields :data:`UNDEFINED`
instead of raising, and the boolean connectives absorb it the Kleene way::

    false && UNDEFINED  -> false
    true  || UNDEFINED  -> true

Expressions are parsed once and compiled into nested closures; the compiled
form is what the matchmaker and the push baseline run in their hot loops.
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Mapping, Union

__all__ = [
    "UNDEFINED",
    "Attr",
    "Binary",
    "Expression",
    "ExpressionSyntaxError",
    "Literal",
    "Unary",
    "compile_expression",
    "evaluate",
    "is_true",
    "parse_expression",
    "to_text",
]

SCOPES = ("job", "machine")
BINARY_OPS = ("||", "&&", "==", "!=", "<", "<=", ">", ">=", "+", "-", "*", "/")
UNARY_OPS = ("!", "-")

# Binding power per operator; higher binds tighter.
_PRECEDENCE = {
    "||": 1,
    "&&": 2,
    "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3,
    "+": 4, "-": 4,
    "*": 5, "/": 5,
}
_UNARY_PRECEDENCE = 6


class _Undefined:
    __slots__ = ()
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNDEFINED"

    def __bool__(self) -> bool:
        raise TypeError("UNDEFINED has no truth value; use is_true()")

    def __reduce__(self):
        return (_Undefined, ())


UNDEFINED = _Undefined()

Scalar = Union[int, float, bool, str]


@dataclass(frozen=True)
class Literal:
    value: Scalar


@dataclass(frozen=True)
class Attr:
    scope: str
    name: str

    def __post_init__(self) -> None:
        if self.scope not in SCOPES:
            raise ValueError(f"attribute scope must be one of {SCOPES}, got {self.scope!r}")


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expression"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"


Expression = Union[Literal, Attr, Unary, Binary]


class ExpressionSyntaxError(ValueError):
    """Malformed expression text.  ``position`` is a 0-based character offset."""

    def __init__(self, message: str, position: int, text: str):
        super().__init__(f"{message} at position {position}")
        self.position = position
        self.text = text


# --------------------------------------------------------------------------
# Lexer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<real>(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>\d+)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\|\||&&|==|!=|<=|>=|<|>|!|\+|-|\*|/|\(|\)|\.)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # int, real, string, ident, op, end
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


def _unescape(lexeme: str) -> str:
    body = lexeme[1:-1]
    return re.sub(r"\\(.)", lambda m: m.group(1), body)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.peek()
        where = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ExpressionSyntaxError(f"{message} (found {where})", tok.pos, self.text)

    def parse(self) -> Expression:
        expr = self.binary(1)
        if self.peek().kind != "end":
            self.error("unexpected trailing input")
        return expr

    def binary(self, min_prec: int) -> Expression:
        left = self.unary()
        while True:
            tok = self.peek()
            prec = _PRECEDENCE.get(tok.text) if tok.kind == "op" else None
            if prec is None or prec < min_prec:
                return left
            self.advance()
            right = self.binary(prec + 1)
            left = Binary(tok.text, left, right)

    def unary(self) -> Expression:
        tok = self.peek()
        if tok.kind == "op" and tok.text in UNARY_OPS:
            self.advance()
            return Unary(tok.text, self.unary())
        return self.primary()

    def primary(self) -> Expression:
        tok = self.advance()
        if tok.kind == "int":
            return Literal(int(tok.text))
        if tok.kind == "real":
            return Literal(float(tok.text))
        if tok.kind == "string":
            return Literal(_unescape(tok.text))
        if tok.kind == "ident":
            if tok.text == "true":
                return Literal(True)
            if tok.text == "false":
                return Literal(False)
            if tok.text in SCOPES:
                dot = self.advance()
                if dot.text != ".":
                    self.error(f"expected '.' after scope {tok.text!r}", dot)
                name = self.advance()
                if name.kind != "ident":
                    self.error("expected attribute name", name)
                return Attr(tok.text, name.text)
            self.error("attribute references must be scoped as job.<name> or machine.<name>", tok)
        if tok.kind == "op" and tok.text == "(":
            inner = self.binary(1)
            close = self.advance()
            if close.text != ")":
                self.error("expected ')'", close)
            return inner
        self.error("expected an operand", tok)


@lru_cache(maxsize=4096)
def parse_expression(text: str) -> Expression:
    """Parse expression text into an AST.

    Raises :class:`ExpressionSyntaxError` carrying the offending position.
    """
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# Printer

def _literal_text(value: Scalar) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        if "inf" in text or "nan" in text:
            raise ValueError(f"non-finite literal {value!r} has no text form")
        return text if ("." in text or "e" in text) else text + ".0"
    escaped = value.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def _prec(expr: Expression) -> int:
    if isinstance(expr, Binary):
        return _PRECEDENCE[expr.op]
    if isinstance(expr, Unary):
        return _UNARY_PRECEDENCE
    return 100


def to_text(expr: Expression) -> str:
    """Canonical text with the minimum parentheses needed to re-parse to ``expr``."""
    if isinstance(expr, Literal):
        text = _literal_text(expr.value)
        # "- 1" must not collapse into a literal when re-lexed; parenthesise negatives.
        if isinstance(expr.value, (int, float)) and not isinstance(expr.value, bool) and text.startswith("-"):
            return f"({text})"
        return text
    if isinstance(expr, Attr):
        return f"{expr.scope}.{expr.name}"
    if isinstance(expr, Unary):
        inner = to_text(expr.operand)
        if _prec(expr.operand) < _UNARY_PRECEDENCE:
            inner = f"({inner})"
        return f"{expr.op}{inner}"
    prec = _PRECEDENCE[expr.op]
    left = to_text(expr.left)
    if _prec(expr.left) < prec:
        left = f"({left})"
    right = to_text(expr.right)
    # Left-associative: an equal-precedence right child needs parentheses.
    if _prec(expr.right) <= prec:
        right = f"({right})"
    return f"{left} {expr.op} {right}"


# --------------------------------------------------------------------------
# Evaluation

Env = Mapping[str, Any]
Compiled = Callable[[Env, Env], Any]


def _is_num(v: Any) -> bool:
    t = type(v)
    return t is int or t is float


def _arith(fn):
    def apply(a, b):
        if _is_num(a) and _is_num(b):
            return fn(a, b)
        return UNDEFINED
    return apply


def _divide(a, b):
    if not (_is_num(a) and _is_num(b)):
        return UNDEFINED
    if b == 0:
        return UNDEFINED
    if type(a) is int and type(b) is int:
        q = abs(a) // abs(b)
        return q if (a >= 0) == (b >= 0) else -q
    return a / b


def _equality(negate: bool):
    def apply(a, b):
        if a is UNDEFINED or b is UNDEFINED:
            return UNDEFINED
        if _is_num(a) and _is_num(b):
            result = float(a) == float(b)
        elif type(a) is type(b):  # str/str or bool/bool
            result = a == b
        else:
            return UNDEFINED
        return (not result) if negate else result
    return apply


def _ordering(fn):
    def apply(a, b):
        if _is_num(a) and _is_num(b):
            return fn(float(a), float(b))
        return UNDEFINED
    return apply


def _and(a, b):
    if a is False or b is False:
        return False
    if a is True and b is True:
        return True
    return UNDEFINED


def _or(a, b):
    if a is True or b is True:
        return True
    if a is False and b is False:
        return False
    return UNDEFINED


_BINARY_FNS = {
    "+": _arith(operator.add),
    "-": _arith(operator.sub),
    "*": _arith(operator.mul),
    "/": _divide,
    "==": _equality(False),
    "!=": _equality(True),
    "<": _ordering(operator.lt),
    "<=": _ordering(operator.le),
    ">": _ordering(operator.gt),
    ">=": _ordering(operator.ge),
    "&&": _and,
    "||": _or,
}


def _normalize(value: Any) -> Any:
    t = type(value)
    if t is bool or t is int or t is float or t is str:
        return value
    return UNDEFINED


def _compile(expr: Expression) -> Compiled:
    if isinstance(expr, Literal):
        value = expr.value
        return lambda job, machine: value
    if isinstance(expr, Attr):
        name = expr.name
        if expr.scope == "job":
            return lambda job, machine: _normalize(job.get(name, UNDEFINED))
        return lambda job, machine: _normalize(machine.get(name, UNDEFINED))
    if isinstance(expr, Unary):
        inner = _compile(expr.operand)
        if expr.op == "!":
            def negate(job, machine):
                v = inner(job, machine)
                return (not v) if type(v) is bool else UNDEFINED
            return negate

        def minus(job, machine):
            v = inner(job, machine)
            return -v if _is_num(v) else UNDEFINED
        return minus
    left = _compile(expr.left)
    right = _compile(expr.right)
    fn = _BINARY_FNS[expr.op]
    return lambda job, machine: fn(left(job, machine), right(job, machine))


# Keyed by id(); the stored expression keeps the id from being recycled.
_COMPILED: dict[int, tuple[Expression, Compiled]] = {}


def compile_expression(expr: Expression) -> Compiled:
    hit = _COMPILED.get(id(expr))
    if hit is not None and hit[0] is expr:
        return hit[1]
    fn = _compile(expr)
    if len(_COMPILED) > 65536:
        _COMPILED.clear()
    _COMPILED[id(expr)] = (expr, fn)
    return fn


def evaluate(expr: Expression, job_attrs: Env, machine_attrs: Env):
    """Evaluate ``expr``; total, returns a scalar or :data:`UNDEFINED`."""
    return compile_expression(expr)(job_attrs, machine_attrs)


def is_true(value: Any) -> bool:
    return value is True
