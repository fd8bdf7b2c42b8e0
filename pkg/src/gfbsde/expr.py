"""Arithmetic expression language for coefficient functions.

Expressions are ordinary infix arithmetic over a fixed set of variables::

    -0.1*x1 + 0.05*tanh(y)
    max(x1, 0) ^ 2
    log(1 + exp(x1))

Grammar (whitespace insignificant)::

    expr    := term (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := ('+' | '-') factor | power
    power   := atom (('^' | '**') factor)?
    atom    := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Functions: pow(a, b), exp, log, sqrt, tanh, sin, cos, abs, min(a, b, ...),
max(a, b, ...). Variables are fixed by the caller (for coefficients: t, x1..xn,
y, z). Parsing reuses the Python tokenizer through :mod:`ast`; every node is
checked against a whitelist before evaluation, so nothing outside the grammar
is ever executed.
"""

from __future__ import annotations

import ast
from typing import Iterable, Mapping

import numpy as np

__all__ = ["Expression", "ExpressionError", "FUNCTIONS"]


def _reduce(op):
    def fn(*args):
        if len(args) < 2:
            raise ValueError("min/max need at least two arguments")
        return op.reduce(np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args]))

    return fn


FUNCTIONS = {
    "pow": (np.power, 2),
    "exp": (np.exp, 1),
    "log": (np.log, 1),
    "sqrt": (np.sqrt, 1),
    "tanh": (np.tanh, 1),
    "sin": (np.sin, 1),
    "cos": (np.cos, 1),
    "abs": (np.abs, 1),
    "min": (_reduce(np.minimum), None),
    "max": (_reduce(np.maximum), None),
}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    """Parse or validation failure, carrying a 1-based line/column."""

    def __init__(self, message: str, line: int = 1, column: int = 1, source: str = ""):
        self.message = message
        self.line = line
        self.column = column
        self.source = source
        super().__init__(f"line {line}, column {column}: {message}")


class Expression:
    """A parsed, validated expression evaluated with numpy broadcasting."""

    def __init__(self, source: str, variables: Iterable[str]):
        self.source = source
        self.variables = tuple(variables)
        tree = self._parse(source)
        self._check(tree.body)
        self._tree = tree
        self._names = sorted({n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - set(FUNCTIONS))

    def _parse(self, source: str) -> ast.Expression:
        if not source.strip():
            raise ExpressionError("empty expression", 1, 1, source)
        # '^' becomes '**' before parsing so it binds tighter than * and +;
        # _cols maps each translated column back to the source column
        text = source.strip()
        self._lead = len(source) - len(source.lstrip())
        out, cols = [], []
        for k, ch in enumerate(text):
            if ch == "^":
                out.append("**")
                cols += [k, k]
            else:
                out.append(ch)
                cols.append(k)
        cols.append(len(text))
        self._cols = cols
        try:
            return ast.parse("".join(out), mode="eval")
        except SyntaxError as exc:
            return self._raise(exc.msg, exc.lineno or 1, self._col(exc.offset - 1 if exc.offset else 0))

    def _col(self, offset: int) -> int:
        """1-based source column of a 0-based offset in the translated text."""
        offset = min(max(offset, 0), len(self._cols) - 1)
        return self._cols[offset] + 1 + self._lead

    def _raise(self, msg, line, col):
        raise ExpressionError(msg, line, col, self.source)

    def _pos(self, node):
        return getattr(node, "lineno", 1), self._col(getattr(node, "col_offset", 0))

    def _check(self, node) -> None:
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                self._raise(f"unsupported literal {node.value!r}", *self._pos(node))
        elif isinstance(node, ast.Name):
            if node.id not in self.variables:
                allowed = ", ".join(self.variables)
                self._raise(f"unknown variable '{node.id}' (allowed: {allowed})", *self._pos(node))
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                self._raise(f"unsupported operator {type(node.op).__name__}", *self._pos(node))
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                self._raise(f"unsupported unary operator {type(node.op).__name__}", *self._pos(node))
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                name = getattr(node.func, "id", "?")
                self._raise(f"unknown function '{name}'", *self._pos(node))
            if node.keywords:
                self._raise("keyword arguments are not allowed", *self._pos(node))
            arity = FUNCTIONS[node.func.id][1]
            if arity is not None and len(node.args) != arity:
                self._raise(f"{node.func.id}() takes {arity} argument(s), got {len(node.args)}", *self._pos(node))
            for arg in node.args:
                self._check(arg)
        else:
            self._raise(f"unsupported syntax ({type(node).__name__})", *self._pos(node))

    @property
    def names(self) -> list[str]:
        """Variables actually referenced."""
        return list(self._names)

    def depends_on(self, name: str) -> bool:
        return name in self._names

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else val
        fn = FUNCTIONS[node.func.id][0]
        return fn(*[self._eval(a, env) for a in node.args])

    def evaluate(self, env: Mapping[str, object]):
        missing = [n for n in self._names if n not in env]
        if missing:
            raise KeyError(f"missing variable(s): {', '.join(missing)}")
        with np.errstate(all="ignore"):
            return self._eval(self._tree.body, env)

    def __call__(self, **env):
        return self.evaluate(env)

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"
