"""Safe arithmetic expression grammar for user-defined model fields.

Grammar (documented for config authors):

    expr    := term | expr ("+" | "-") term
    term    := power | term ("*" | "/") power
    power   := unary | unary "**" power
    unary   := ("+" | "-") unary | atom
    atom    := NUMBER | NAME | FUNC "(" expr ")" | "(" expr ")"
    FUNC    := sin | cos | exp | tanh | sqrt
    NAME    := declared variable (e.g. t, q1..qn, p1..pn, z1..zn, j1..jn)
               or the constants pi, e

Expressions are parsed with the Python ``ast`` module against this whitelist
(no attribute access, subscripts, comparisons, or calls outside FUNC) and
evaluated with numpy ufuncs, so a compiled field broadcasts over trajectory
batches for free.
"""
from __future__ import annotations

import ast
import math
import operator as op

import numpy as np

from .errors import FieldError

_BINARY = {
    ast.Add: op.add,
    ast.Sub: op.sub,
    ast.Mult: op.mul,
    ast.Div: op.truediv,
    ast.Pow: op.pow,
}

_UNARY = {ast.USub: op.neg, ast.UAdd: op.pos}

_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
}

_CONSTANTS = {"pi": math.pi, "e": math.e}


class FieldExpression:
    """A compiled expression over a declared set of variable names."""

    def __init__(self, source: str, variables: tuple[str, ...]):
        self.source = source
        self.variables = tuple(variables)
        try:
            tree = ast.parse(source, mode="eval")
        except SyntaxError as exc:
            raise FieldError(f"cannot parse {source!r}: {exc.msg}") from exc
        self._tree = tree.body
        self.depends_on = frozenset(self._validate(self._tree))

    def _validate(self, node) -> set[str]:
        if isinstance(node, ast.Constant):
            if isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
                return set()
            raise FieldError(f"{self.source!r}: literal {node.value!r} is not a number")
        if isinstance(node, ast.Name):
            if node.id in self.variables or node.id in _CONSTANTS:
                return {node.id} if node.id in self.variables else set()
            raise FieldError(
                f"{self.source!r}: unknown name {node.id!r} "
                f"(expected one of {sorted(self.variables)})"
            )
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINARY:
                if isinstance(node.op, ast.BitXor):
                    raise FieldError(f"{self.source!r}: use ** for powers, not ^")
                raise FieldError(f"{self.source!r}: unsupported operator")
            return self._validate(node.left) | self._validate(node.right)
        if isinstance(node, ast.UnaryOp):
            if type(node.op) not in _UNARY:
                raise FieldError(f"{self.source!r}: unsupported unary operator")
            return self._validate(node.operand)
        if isinstance(node, ast.Call):
            if (
                not isinstance(node.func, ast.Name)
                or node.func.id not in _FUNCTIONS
                or node.keywords
                or len(node.args) != 1
            ):
                raise FieldError(
                    f"{self.source!r}: only {sorted(_FUNCTIONS)} may be called, "
                    "with exactly one argument"
                )
            return self._validate(node.args[0])
        raise FieldError(
            f"{self.source!r}: {type(node).__name__} syntax is not part of the grammar"
        )

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            if node.id in env:
                return env[node.id]
            return _CONSTANTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINARY[type(node.op)](
                self._eval(node.left, env), self._eval(node.right, env)
            )
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        # validated: only whitelisted single-argument calls remain
        return _FUNCTIONS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, **env):
        missing = self.depends_on - env.keys()
        if missing:
            raise FieldError(f"{self.source!r}: missing variables {sorted(missing)}")
        try:
            return self._eval(self._tree, env)
        except ZeroDivisionError as exc:
            raise FieldError(f"{self.source!r}: division by zero") from exc

    def __repr__(self):
        return f"FieldExpression({self.source!r})"


def compile_field(source: str, variables: tuple[str, ...]) -> FieldExpression:
    """Parse and whitelist-check one expression; raises FieldError on misuse."""
    if not isinstance(source, str) or not source.strip():
        raise FieldError(f"field expression must be a non-empty string, got {source!r}")
    return FieldExpression(source, variables)


def state_variables(dim: int, prefixes: tuple[str, ...] = ("q",)) -> tuple[str, ...]:
    """Variable names for a dim-dimensional state: t plus q1..qn style names."""
    names = ["t"]
    for prefix in prefixes:
        names.extend(f"{prefix}{i + 1}" for i in range(dim))
    return tuple(names)
