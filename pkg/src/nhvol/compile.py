"""Flatten expression trees into flat register programs.

A program is a straight-line instruction list over a register file: the first
``n_inputs`` registers hold the point coordinates, every instruction writes
one new register, and ``out`` lists the registers holding the requested
expressions.  Interned expression nodes make the register map a common
subexpression cache for free.  Parameters are bound to constants here, so the
numeric backends only ever see chart coordinates as inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex

OP_CONST = 0
OP_ADD = 1
OP_SUB = 2
OP_MUL = 3
OP_DIV = 4
OP_NEG = 5
OP_SIN = 6
OP_COS = 7
OP_TAN = 8
OP_EXP = 9
OP_LN = 10
OP_SQRT = 11
OP_ATAN = 12
OP_ATANH = 13
OP_POW = 14

_UNARY_CODE = {
    "neg": OP_NEG,
    "sin": OP_SIN,
    "cos": OP_COS,
    "tan": OP_TAN,
    "exp": OP_EXP,
    "ln": OP_LN,
    "sqrt": OP_SQRT,
    "arctan": OP_ATAN,
    "arctanh": OP_ATANH,
}

_BINARY_CODE = {"add": OP_ADD, "sub": OP_SUB, "mul": OP_MUL, "div": OP_DIV}


class CompileError(Exception):
    pass


@dataclass
class Program:
    ops: np.ndarray
    arg1: np.ndarray
    arg2: np.ndarray
    cval: np.ndarray
    n_inputs: int
    n_regs: int
    out: np.ndarray
    inputs: tuple[str, ...]

    def __len__(self) -> int:
        return int(self.ops.shape[0])


def compile_exprs(
    exprs: Sequence[ex.Expr],
    inputs: Sequence[str],
    params: Mapping[str, float] | None = None,
) -> Program:
    """Compile expressions over the given input names, binding parameters."""
    params = dict(params or {})
    inputs = tuple(inputs)
    slot = {name: i for i, name in enumerate(inputs)}
    reg: dict[ex.Expr, int] = {}
    const_reg: dict[float, int] = {}
    ops: list[int] = []
    a1: list[int] = []
    a2: list[int] = []
    cv: list[float] = []
    n_in = len(inputs)

    def emit(op: int, i: int = 0, j: int = 0, c: float = 0.0) -> int:
        ops.append(op)
        a1.append(i)
        a2.append(j)
        cv.append(c)
        return n_in + len(ops) - 1

    def const_slot(v: float) -> int:
        r = const_reg.get(v)
        if r is None:
            r = emit(OP_CONST, c=v)
            const_reg[v] = r
        return r

    def visit(root: ex.Expr) -> int:
        stack: list[tuple[ex.Expr, bool]] = [(root, False)]
        while stack:
            node, ready = stack.pop()
            if node in reg:
                continue
            if node.op == "const":
                reg[node] = const_slot(node.value)
                continue
            if node.op == "var":
                try:
                    reg[node] = slot[node.name]
                except KeyError:
                    raise CompileError(f"undeclared variable {node.name!r}") from None
                continue
            if node.op == "param":
                try:
                    reg[node] = const_slot(float(params[node.name]))
                except KeyError:
                    raise CompileError(f"unbound parameter {node.name!r}") from None
                continue
            if not ready:
                stack.append((node, True))
                for child in node.args:
                    if child not in reg:
                        stack.append((child, False))
                continue
            if node.op == "pow":
                reg[node] = emit(OP_POW, reg[node.args[0]], 0, node.value)
            elif node.op in _BINARY_CODE:
                reg[node] = emit(
                    _BINARY_CODE[node.op], reg[node.args[0]], reg[node.args[1]]
                )
            else:
                reg[node] = emit(_UNARY_CODE[node.op], reg[node.args[0]])
        return reg[root]

    out = np.array([visit(e) for e in exprs], dtype=np.int64)
    return Program(
        ops=np.array(ops, dtype=np.int64),
        arg1=np.array(a1, dtype=np.int64),
        arg2=np.array(a2, dtype=np.int64),
        cval=np.array(cv, dtype=np.float64),
        n_inputs=n_in,
        n_regs=n_in + len(ops),
        out=out,
        inputs=inputs,
    )
