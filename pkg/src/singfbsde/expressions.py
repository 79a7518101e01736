"""Tiny arithmetic expression grammar for coefficient functions in config files.

Grammar: literals, named variables, + - * / ^, unary minus, parentheses, and the
functions min, max, abs, exp, log, sqrt, sin, cos, indicator(v, lo, hi); the
constants pi and inf.  Expressions compile to numpy-vectorized closures, which
keeps every run fully serializable in its manifest.
"""

from __future__ import annotations

import ast
import math
from typing import Callable, Sequence

import numpy as np


class ExpressionError(ValueError):
    pass


def _reduce2(fn):
    def call(*args):
        if len(args) < 2:
            raise ExpressionError("min/max need at least two arguments")
        out = args[0]
        for a in args[1:]:
            out = fn(out, a)
        return out
    return call


def _indicator(v, lo, hi):
    v = np.asarray(v, dtype=float)
    return np.where((v >= lo) & (v <= hi), 1.0, 0.0)


_FUNCS: dict[str, Callable] = {
    "min": _reduce2(np.minimum),
    "max": _reduce2(np.maximum),
    "abs": np.abs,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "indicator": _indicator,
}

_CONSTS = {"pi": math.pi, "inf": math.inf}

_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}


def _check(node: ast.AST, variables: Sequence[str]) -> None:
    if isinstance(node, ast.Expression):
        _check(node.body, variables)
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator {type(node.op).__name__} not in the grammar")
        _check(node.left, variables)
        _check(node.right, variables)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError(f"operator {type(node.op).__name__} not in the grammar")
        _check(node.operand, variables)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError("only min/max/abs/exp/log/sqrt/sin/cos/indicator calls allowed")
        if node.keywords:
            raise ExpressionError("keyword arguments not in the grammar")
        for a in node.args:
            _check(a, variables)
    elif isinstance(node, ast.Name):
        if node.id not in variables and node.id not in _CONSTS:
            raise ExpressionError(f"unknown name {node.id!r} "
                                  f"(variables here: {', '.join(variables)})")
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"literal {node.value!r} not in the grammar")
    else:
        raise ExpressionError(f"syntax {type(node).__name__} not in the grammar")


def _evaluate(node: ast.AST, env: dict):
    if isinstance(node, ast.Expression):
        return _evaluate(node.body, env)
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_evaluate(node.left, env), _evaluate(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _evaluate(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else +v
    if isinstance(node, ast.Call):
        return _FUNCS[node.func.id](*[_evaluate(a, env) for a in node.args])
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTS[node.id]
    if isinstance(node, ast.Constant):
        return float(node.value)
    raise AssertionError("unreachable: node classes were checked at compile time")


def compile_expr(text: str, variables: Sequence[str]) -> Callable:
    """Compile an expression of the given variables into a positional closure.

    The closure broadcasts its result to the common shape of the arguments, so
    constant expressions behave like vectorized coefficients.
    """
    src = text.strip().replace("^", "**")
    if not src:
        raise ExpressionError("empty expression")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    _check(tree, variables)

    def fn(*args):
        if len(args) != len(variables):
            raise TypeError(f"expected {len(variables)} arguments {tuple(variables)}")
        arrs = [np.asarray(a, dtype=float) for a in args]
        env = dict(zip(variables, arrs))
        with np.errstate(all="ignore"):
            out = np.asarray(_evaluate(tree, env), dtype=float)
        shape = np.broadcast_shapes(*[a.shape for a in arrs]) if arrs else ()
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, shape))

    fn.source = text.strip()
    return fn


# ---------------------------------------------------------------------------
# singular-set syntax
# ---------------------------------------------------------------------------

def parse_interval_union(text: str):
    """Parse "[1, inf)" or "[-3,-2] U [1, 4]" into an IntervalUnion; "" is empty.

    All finite endpoints must be closed (the singular set is closed by assumption);
    an infinite endpoint may be written with a round bracket.
    """
    from .model import IntervalUnion

    text = text.strip()
    if not text:
        return IntervalUnion()
    pieces = []
    for part in text.replace("u", "U").split("U"):
        part = part.strip()
        if not part:
            continue
        if part[0] not in "[(" or part[-1] not in ")]":
            raise ExpressionError(f"interval {part!r} must be bracketed")
        lo_open, hi_open = part[0] == "(", part[-1] == ")"
        body = part[1:-1].split(",")
        if len(body) != 2:
            raise ExpressionError(f"interval {part!r} needs exactly two endpoints")
        lo = float(body[0].replace("inf", "inf").strip())
        hi = float(body[1].strip())
        if lo_open and math.isfinite(lo):
            raise ExpressionError(f"{part!r}: a finite endpoint must be closed")
        if hi_open and math.isfinite(hi):
            raise ExpressionError(f"{part!r}: a finite endpoint must be closed")
        pieces.append((lo, hi))
    return IntervalUnion(pieces)
