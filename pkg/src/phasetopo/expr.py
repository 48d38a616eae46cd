"""Closed-form expressions of ``x`` and ``y`` used for initial phase fields
and Dirichlet velocity profiles.

Expressions are parsed with :mod:`ast` and only a small whitelist of node
types and names is accepted, so config files cannot execute arbitrary code.
``min``/``max`` act elementwise so that ``min(abs(y-0.3)-0.1, abs(y+0.3)-0.1)``
works on whole coordinate arrays.
"""

import ast

import numpy as np

from .errors import ConfigurationError

_FUNCS = {
    "abs": np.abs,
    "sqrt": np.sqrt,
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "tanh": np.tanh,
    "min": lambda *a: _reduce(np.minimum, a),
    "max": lambda *a: _reduce(np.maximum, a),
    "clip": np.clip,
}
_CONSTS = {"pi": np.pi, "e": np.e}
_VARS = ("x", "y")

_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
    ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub,
    ast.UAdd, ast.Mod,
)


def _reduce(op, args):
    out = args[0]
    for a in args[1:]:
        out = op(out, a)
    return out


class Expression:
    """A compiled scalar expression ``f(x, y)``.

    >>> Expression("1 - x").evaluate(np.array([0.25]), np.array([0.0]))
    array([0.75])
    """

    def __init__(self, source):
        self.source = str(source).strip()
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ConfigurationError(f"cannot parse expression {self.source!r}: {exc.msg}")
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED):
                raise ConfigurationError(
                    f"expression {self.source!r} uses unsupported syntax {type(node).__name__}")
            if isinstance(node, ast.Name) and node.id not in _FUNCS \
                    and node.id not in _CONSTS and node.id not in _VARS:
                raise ConfigurationError(f"expression {self.source!r} uses unknown name {node.id!r}")
            if isinstance(node, ast.Call) and not (
                    isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
                raise ConfigurationError(f"expression {self.source!r} calls a non-whitelisted function")
        self._code = compile(tree, "<expression>", "eval")

    def evaluate(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ns = {"x": x, "y": y, **_CONSTS, **_FUNCS}
        val = eval(self._code, {"__builtins__": {}}, ns)
        return np.broadcast_to(np.asarray(val, dtype=float), np.broadcast(x, y).shape).copy()

    def __call__(self, x, y):
        return self.evaluate(x, y)

    def __repr__(self):
        return f"Expression({self.source!r})"

    def __eq__(self, other):
        return isinstance(other, Expression) and other.source == self.source

    def __hash__(self):
        return hash(self.source)
