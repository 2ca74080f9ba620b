"""Scalar expression language over ``t`` and state coordinates ``x1..x99``.

Grammar (whitespace is insignificant)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?          # right-associative
    atom    := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'

``-2^2`` therefore evaluates to -4 and ``2^3^2`` to 512. Functions: ``sin``,
``cos``, ``abs``, ``exp``, ``ln``, ``sqrt``, ``neg`` (one argument) and
``spow(base, p)`` = sign(base)*|base|^p. Rational constants are written as
divisions (``7/9``).

Expressions evaluate on floats or on numpy arrays (one array per coordinate),
which is what the simulator and the certificate checkers use.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

__all__ = [
    "ExpressionError",
    "ParseError",
    "DomainError",
    "Expression",
    "Num",
    "Var",
    "Unary",
    "Binary",
    "SignedPow",
    "parse",
    "evaluate",
    "free_variables",
    "signed_pow",
]


class ExpressionError(ValueError):
    pass


class ParseError(ExpressionError):
    """Syntax error, unknown identifier or wrong arity, with source position."""

    def __init__(self, message: str, position: int, source: str = ""):
        self.position = position
        self.source = source
        super().__init__(f"{message} at position {position}" + (f" in {source!r}" if source else ""))


class DomainError(ExpressionError):
    pass


# --- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str

    @property
    def index(self) -> int:
        """0 for ``t``, I for ``xI``."""
        return 0 if self.name == "t" else int(self.name[1:])


@dataclass(frozen=True)
class Unary:
    func: str
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class SignedPow:
    base: "Node"
    exponent: "Node"


Node = Union[Num, Var, Unary, Binary, SignedPow]

UNARY_FUNCS = ("neg", "sin", "cos", "abs", "exp", "ln", "sqrt")
BINARY_FUNCS = ("spow",)
_VAR_RE = re.compile(r"^(t|x([1-9][0-9]?))$")
_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


# --- parsing -----------------------------------------------------------------

def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {source[pos]!r}", pos, source)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.peek()
        if text != value or kind != "op":
            found = "end of input" if kind == "end" else repr(text)
            raise ParseError(f"expected {value!r}, found {found}", pos, self.source)
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"expected operator or end of input, found {text!r}", pos, self.source)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = Binary("add" if op == "+" else "sub", node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = Binary("mul" if op == "*" else "div", node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.advance()
            return Unary("neg", self.unary())
        if self.peek()[0] == "op" and self.peek()[1] == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.advance()
            return Binary("pow", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, pos = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "ident":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                return self.call(text, pos)
            if _VAR_RE.match(text):
                return Var(text)
            if text in UNARY_FUNCS or text in BINARY_FUNCS:
                raise ParseError(f"function {text!r} requires arguments", pos, self.source)
            raise ParseError(f"unknown identifier {text!r}", pos, self.source)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ParseError(f"expected number, variable, function call or '(', found {found}", pos, self.source)

    def call(self, name: str, pos: int) -> Node:
        if name not in UNARY_FUNCS and name not in BINARY_FUNCS:
            raise ParseError(f"unknown function {name!r}", pos, self.source)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[0] == "op" and self.peek()[1] == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        arity = 2 if name in BINARY_FUNCS else 1
        if len(args) != arity:
            raise ParseError(f"{name} takes {arity} argument(s), got {len(args)}", pos, self.source)
        if name == "spow":
            return SignedPow(args[0], args[1])
        return Unary(name, args[0])


# --- pretty printing ------------------------------------------------------------

_OP_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


def _to_source(node: Node) -> str:
    if isinstance(node, Num):
        # repr round-trips floats exactly
        text = repr(float(node.value))
        return text if node.value >= 0 else f"({text})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return f"{node.func}({_to_source(node.arg)})"
    if isinstance(node, SignedPow):
        return f"spow({_to_source(node.base)}, {_to_source(node.exponent)})"
    return f"({_to_source(node.left)} {_OP_SYMBOL[node.op]} {_to_source(node.right)})"


# --- evaluation -------------------------------------------------------------------

def signed_pow(x, p):
    """sign(x)*|x|**p; 0 at x = 0 for p > 0. Raises DomainError for x = 0, p <= 0."""
    x_arr = np.asarray(x, dtype=float)
    p_arr = np.asarray(p, dtype=float)
    if np.any((x_arr == 0) & (p_arr <= 0)):
        raise DomainError("spow of 0 with non-positive exponent")
    out = np.sign(x_arr) * np.power(np.abs(x_arr), p_arr)
    return float(out) if out.ndim == 0 else out


def _is_integral(p) -> np.ndarray:
    return np.equal(np.floor(p), p)


def _compile(node: Node, strict: bool) -> Callable:
    """Turn a node into ``fn(t, X)`` where X is a sequence of coordinates."""
    if isinstance(node, Num):
        value = float(node.value)
        return lambda t, X: value

    if isinstance(node, Var):
        if node.name == "t":
            return lambda t, X: t
        k = node.index - 1

        def var(t, X):
            if k >= len(X):
                raise ExpressionError(f"variable x{k + 1} out of range for a state of dimension {len(X)}")
            return X[k]

        return var

    # constant subtrees are folded once
    if not free_variables(node):
        value = _compile_raw(node, strict)(0.0, ())
        value = float(value)
        if strict and not math.isfinite(value):
            raise DomainError(f"non-finite constant {_to_source(node)}")
        return lambda t, X: value
    return _compile_raw(node, strict)


def _compile_raw(node: Node, strict: bool) -> Callable:
    if isinstance(node, Unary):
        arg = _compile(node.arg, strict)
        func = node.func
        if func == "neg":
            return lambda t, X: -arg(t, X)
        if func == "abs":
            return lambda t, X: np.abs(arg(t, X))
        if func in ("sin", "cos", "exp"):
            f = getattr(np, func)
            return lambda t, X: f(arg(t, X))
        if func == "ln":
            def ln(t, X):
                a = arg(t, X)
                if strict and np.any(np.asarray(a) <= 0):
                    raise DomainError("ln of a non-positive argument")
                return np.log(a)
            return ln
        if func == "sqrt":
            def sqrt(t, X):
                a = arg(t, X)
                if strict and np.any(np.asarray(a) < 0):
                    raise DomainError("sqrt of a negative argument")
                return np.sqrt(a)
            return sqrt
        raise ExpressionError(f"unknown function {func!r}")

    if isinstance(node, SignedPow):
        base = _compile(node.base, strict)
        expo = _compile(node.exponent, strict)

        def spow(t, X):
            b = base(t, X)
            p = expo(t, X)
            if strict and np.any((np.asarray(b) == 0) & (np.asarray(p) <= 0)):
                raise DomainError("spow of 0 with non-positive exponent")
            b = np.asarray(b, dtype=float)
            return np.sign(b) * np.power(np.abs(b), np.asarray(p, dtype=float))

        return spow

    left = _compile(node.left, strict)
    right = _compile(node.right, strict)
    op = node.op
    if op == "add":
        return lambda t, X: left(t, X) + right(t, X)
    if op == "sub":
        return lambda t, X: left(t, X) - right(t, X)
    if op == "mul":
        return lambda t, X: left(t, X) * right(t, X)
    if op == "div":
        def div(t, X):
            den = right(t, X)
            if strict and np.any(np.asarray(den) == 0):
                raise DomainError("division by zero")
            return np.divide(left(t, X), den)
        return div
    if op == "pow":
        def power(t, X):
            b = np.asarray(left(t, X), dtype=float)
            p = np.asarray(right(t, X), dtype=float)
            if strict:
                if np.any((b < 0) & ~_is_integral(p)):
                    raise DomainError("non-integral power of a negative base; use spow")
                if np.any((b == 0) & (p < 0)):
                    raise DomainError("0 raised to a negative power")
            return np.power(b, p)
        return power
    raise ExpressionError(f"unknown operator {op!r}")


@dataclass(frozen=True, eq=False)
class Expression:
    """Parsed expression. Immutable; compiled evaluators are cached per instance."""

    root: Node
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "_strict", None)
        object.__setattr__(self, "_lenient", None)

    def __str__(self) -> str:
        return _to_source(self.root)

    def __repr__(self) -> str:
        return f"Expression({str(self)!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Expression) and self.root == other.root

    def __hash__(self) -> int:
        return hash(self.root)

    def __getstate__(self):
        return {"root": self.root, "source": self.source}

    def __setstate__(self, state):
        object.__setattr__(self, "root", state["root"])
        object.__setattr__(self, "source", state["source"])
        self.__post_init__()

    @property
    def variables(self) -> frozenset[str]:
        return free_variables(self)

    @property
    def is_time_only(self) -> bool:
        return self.variables <= {"t"}

    @property
    def max_index(self) -> int:
        return max((Var(v).index for v in self.variables if v != "t"), default=0)

    def compiled(self, strict: bool = True) -> Callable:
        """Vectorised evaluator ``fn(t, X)``.

        ``strict=False`` skips the domain checks and lets numpy produce
        nan/inf; callers are then responsible for checking finiteness.
        """
        slot = "_strict" if strict else "_lenient"
        fn = getattr(self, slot)
        if fn is None:
            fn = _compile(self.root, strict)
            object.__setattr__(self, slot, fn)
        return fn

    def __call__(self, t, x):
        return evaluate(self, t, x)


def parse(source: str) -> Expression:
    if not isinstance(source, str) or not source.strip():
        raise ParseError("empty expression", 0, source if isinstance(source, str) else "")
    return Expression(_Parser(source).parse(), source)


def evaluate(expr: Expression, t, x=()):
    """Evaluate with full domain checking.

    ``x`` is a sequence of coordinates; each may be a float or an array
    (broadcast against ``t``). Returns a float for scalar inputs.
    """
    if isinstance(expr, str):
        expr = parse(expr)
    coords = tuple(np.atleast_1d(x)) if isinstance(x, np.ndarray) else tuple(x)
    if expr.max_index > len(coords):
        raise ExpressionError(
            f"variable x{expr.max_index} out of range for a state of dimension {len(coords)}"
        )
    with np.errstate(all="ignore"):
        value = expr.compiled(strict=True)(t, coords)
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite value from {expr}")
    if arr.ndim == 0:
        return float(arr)
    return arr


def free_variables(expr) -> frozenset[str]:
    node = expr.root if isinstance(expr, Expression) else expr
    if isinstance(node, Num):
        return frozenset()
    if isinstance(node, Var):
        return frozenset({node.name})
    if isinstance(node, Unary):
        return free_variables(node.arg)
    if isinstance(node, SignedPow):
        return free_variables(node.base) | free_variables(node.exponent)
    return free_variables(node.left) | free_variables(node.right)
