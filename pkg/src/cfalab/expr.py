"""Register expressions used by `compute` and `cbr ... if` instructions.

Expressions use Python operator syntax over abstract registers ``r0``..``r31``
and integer literals. They are parsed with :mod:`ast`, checked against a small
whitelist and lowered to a Python lambda over the register file ``R``. All
arithmetic wraps at 32 bits.
"""
from __future__ import annotations

import ast
import re
from typing import Callable

MASK32 = 0xFFFFFFFF
NUM_REGS = 32

_REG_RE = re.compile(r"^r(\d+)$")

_BINOPS = {
    ast.Add: "+",
    ast.Sub: "-",
    ast.Mult: "*",
    ast.FloorDiv: "//",
    ast.Div: "//",
    ast.Mod: "%",
    ast.BitAnd: "&",
    ast.BitOr: "|",
    ast.BitXor: "^",
    ast.LShift: "<<",
    ast.RShift: ">>",
}
_CMPOPS = {
    ast.Eq: "==",
    ast.NotEq: "!=",
    ast.Lt: "<",
    ast.LtE: "<=",
    ast.Gt: ">",
    ast.GtE: ">=",
}


class ExprError(ValueError):
    """Raised for expressions outside the supported subset."""


def register_index(name: str) -> int:
    m = _REG_RE.match(name)
    if not m or int(m.group(1)) >= NUM_REGS:
        raise ExprError(f"not a register: {name!r}")
    return int(m.group(1))


def _lower(node: ast.AST, regs: set[int]) -> str:
    if isinstance(node, ast.Constant) and isinstance(node.value, int) and not isinstance(node.value, bool):
        return str(node.value & MASK32)
    if isinstance(node, ast.Name):
        idx = register_index(node.id)
        regs.add(idx)
        return f"R[{idx}]"
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op = _BINOPS[type(node.op)]
        left, right = _lower(node.left, regs), _lower(node.right, regs)
        if op in ("<<", ">>"):
            right = f"(({right}) & 31)"
        return f"((({left}) {op} ({right})) & {MASK32})"
    if isinstance(node, ast.UnaryOp):
        operand = _lower(node.operand, regs)
        if isinstance(node.op, ast.Invert):
            return f"((~({operand})) & {MASK32})"
        if isinstance(node.op, ast.USub):
            return f"((-({operand})) & {MASK32})"
        if isinstance(node.op, ast.Not):
            return f"int(not ({operand}))"
    if isinstance(node, ast.Compare) and all(type(o) in _CMPOPS for o in node.ops):
        parts = [_lower(node.left, regs)]
        for op, comp in zip(node.ops, node.comparators):
            parts.append(_CMPOPS[type(op)])
            parts.append(_lower(comp, regs))
        return f"int({' '.join(parts)})"
    if isinstance(node, ast.BoolOp):
        op = " and " if isinstance(node.op, ast.And) else " or "
        return "int(" + op.join(f"bool({_lower(v, regs)})" for v in node.values) + ")"
    raise ExprError(f"unsupported expression element: {ast.dump(node)[:60]}")


class Expr:
    """A compiled register expression.

    ``Expr("r1 + 1")(R)`` evaluates against a register list ``R``.
    """

    __slots__ = ("source", "reads", "code", "_fn")

    def __init__(self, source: str):
        self.source = source.strip()
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ExprError(f"bad expression {self.source!r}: {exc.msg}") from None
        regs: set[int] = set()
        body = _lower(tree.body, regs)
        self.reads = frozenset(regs)
        self.code = body  # Python source over the register list ``R``
        self._fn: Callable[[list[int]], int] = eval(f"lambda R: {body}", {"__builtins__": {"int": int, "bool": bool}})

    def __call__(self, regs: list[int]) -> int:
        return self._fn(regs)

    def __repr__(self) -> str:
        return f"Expr({self.source!r})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Expr) and other.source == self.source

    def __hash__(self) -> int:
        return hash(self.source)
