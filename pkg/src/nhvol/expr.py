"""Symbolic scalar fields on a chart.

Expressions are immutable trees over chart coordinates, named parameters and
elementary functions.  There is no general simplifier: equality and zero
decisions are made by seeded randomized sampling over a domain box, which is
all the rest of the package needs.  Construction applies only cheap local
rewrites (constant folding, 0/1 elision) to keep trees small.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class ExprError(Exception):
    pass


class ParseError(ExprError):
    def __init__(self, message: str, text: str, pos: int):
        self.pos = pos
        window = text[max(0, pos - 12) : pos + 12]
        super().__init__(f"{message} at position {pos} (near {window!r})")


class UndeclaredIdentifierError(ParseError):
    pass


class EvalDomainError(ExprError):
    pass


class UndecidableError(ExprError):
    pass


UNARY_FUNCTIONS = ("sin", "cos", "tan", "exp", "ln", "sqrt", "arctan", "arctanh")


@dataclass(frozen=True, eq=False)
class Expr:
    """One node of an expression tree.

    ``op`` is one of: "const", "var", "param", "neg", the names in
    UNARY_FUNCTIONS, "add", "sub", "mul", "div", "pow".  A "pow" node stores
    its literal exponent in ``value`` and has a single child.  Nodes are
    interned, so identical subtrees are the same object and ``is`` means
    structural equality.
    """

    op: str
    args: tuple["Expr", ...] = ()
    value: float = 0.0
    name: str = ""

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, other):
        return pow_(self, _coerce(other))

    def __neg__(self):
        return neg(self)

    def __str__(self):
        return to_str(self)

    def __repr__(self):
        return f"Expr({to_str(self)!r})"


_intern: dict = {}


def _mk(op: str, args: tuple = (), value: float = 0.0, name: str = "") -> Expr:
    key = (op, args, value, name)
    node = _intern.get(key)
    if node is None:
        node = Expr(op, args, value, name)
        _intern[key] = node
    return node


def const(v: float) -> Expr:
    return _mk("const", value=float(v))


ZERO = const(0.0)
ONE = const(1.0)


def var(name: str) -> Expr:
    return _mk("var", name=str(name))


def param(name: str) -> Expr:
    return _mk("param", name=str(name))


def _coerce(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float)):
        return const(x)
    raise TypeError(f"cannot use {type(x).__name__} as an expression")


def is_const(e: Expr, v: float | None = None) -> bool:
    return e.op == "const" and (v is None or e.value == v)


def add(a: Expr, b: Expr) -> Expr:
    if is_const(a) and is_const(b):
        return const(a.value + b.value)
    if is_const(a, 0.0):
        return b
    if is_const(b, 0.0):
        return a
    return _mk("add", (a, b))


def sub(a: Expr, b: Expr) -> Expr:
    if a is b:
        return ZERO
    if is_const(a) and is_const(b):
        return const(a.value - b.value)
    if is_const(b, 0.0):
        return a
    if is_const(a, 0.0):
        return neg(b)
    return _mk("sub", (a, b))


def neg(a: Expr) -> Expr:
    if is_const(a):
        return const(-a.value)
    if a.op == "neg":
        return a.args[0]
    return _mk("neg", (a,))


def mul(a: Expr, b: Expr) -> Expr:
    if is_const(a) and is_const(b):
        return const(a.value * b.value)
    if is_const(a):
        if a.value == 0.0:
            return ZERO
        if a.value == 1.0:
            return b
        if a.value == -1.0:
            return neg(b)
    if is_const(b):
        if b.value == 0.0:
            return ZERO
        if b.value == 1.0:
            return a
        if b.value == -1.0:
            return neg(a)
    return _mk("mul", (a, b))


def div(a: Expr, b: Expr) -> Expr:
    if is_const(a, 0.0) and not is_const(b, 0.0):
        return ZERO
    if is_const(b, 1.0):
        return a
    if is_const(a) and is_const(b) and b.value != 0.0:
        return const(a.value / b.value)
    return _mk("div", (a, b))


def powc(a: Expr, k: float) -> Expr:
    """Power with a literal integer or half-integer exponent."""
    k = float(k)
    if not (2.0 * k).is_integer():
        raise ExprError(f"exponent {k} is not an integer or half-integer")
    if k == 0.0:
        return ONE
    if k == 1.0:
        return a
    if is_const(a):
        try:
            return const(a.value**k)
        except (ValueError, OverflowError, ZeroDivisionError):
            pass
    return _mk("pow", (a,), value=k)


def pow_(a: Expr, b: Expr) -> Expr:
    """General power: literal int/half-int exponents stay a pow node,
    anything else lowers to exp(b*ln(a))."""
    if is_const(b) and (2.0 * b.value).is_integer():
        return powc(a, b.value)
    return exp(mul(b, ln(a)))


_UNARY_EVAL = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "ln": math.log,
    "sqrt": math.sqrt,
    "arctan": math.atan,
    "arctanh": math.atanh,
}


def _unary(op: str, a: Expr) -> Expr:
    if is_const(a):
        try:
            return const(_UNARY_EVAL[op](a.value))
        except (ValueError, OverflowError):
            pass
    return _mk(op, (a,))


def sin(a: Expr) -> Expr:
    return _unary("sin", a)


def cos(a: Expr) -> Expr:
    return _unary("cos", a)


def tan(a: Expr) -> Expr:
    return _unary("tan", a)


def exp(a: Expr) -> Expr:
    return _unary("exp", a)


def ln(a: Expr) -> Expr:
    return _unary("ln", a)


def sqrt(a: Expr) -> Expr:
    return _unary("sqrt", a)


def arctan(a: Expr) -> Expr:
    return _unary("arctan", a)


def arctanh(a: Expr) -> Expr:
    return _unary("arctanh", a)


def diff(e: Expr, name: str) -> Expr:
    """Partial derivative with respect to the coordinate ``name``."""
    memo: dict[Expr, Expr] = {}

    def go(n: Expr) -> Expr:
        got = memo.get(n)
        if got is not None:
            return got
        op = n.op
        if op in ("const", "param"):
            r = ZERO
        elif op == "var":
            r = ONE if n.name == name else ZERO
        elif op == "add":
            r = add(go(n.args[0]), go(n.args[1]))
        elif op == "sub":
            r = sub(go(n.args[0]), go(n.args[1]))
        elif op == "neg":
            r = neg(go(n.args[0]))
        elif op == "mul":
            a, b = n.args
            r = add(mul(go(a), b), mul(a, go(b)))
        elif op == "div":
            a, b = n.args
            r = div(sub(mul(go(a), b), mul(a, go(b))), powc(b, 2.0))
        elif op == "pow":
            (a,) = n.args
            k = n.value
            r = mul(mul(const(k), powc(a, k - 1.0)), go(a))
        elif op == "sin":
            r = mul(cos(n.args[0]), go(n.args[0]))
        elif op == "cos":
            r = neg(mul(sin(n.args[0]), go(n.args[0])))
        elif op == "tan":
            r = div(go(n.args[0]), powc(cos(n.args[0]), 2.0))
        elif op == "exp":
            r = mul(n, go(n.args[0]))
        elif op == "ln":
            r = div(go(n.args[0]), n.args[0])
        elif op == "sqrt":
            r = div(go(n.args[0]), mul(const(2.0), n))
        elif op == "arctan":
            r = div(go(n.args[0]), add(ONE, powc(n.args[0], 2.0)))
        elif op == "arctanh":
            r = div(go(n.args[0]), sub(ONE, powc(n.args[0], 2.0)))
        else:  # pragma: no cover
            raise ExprError(f"cannot differentiate op {op!r}")
        memo[n] = r
        return r

    return go(e)


def subs(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Substitute coordinate variables by expressions (parameters untouched)."""
    memo: dict[Expr, Expr] = {}

    def go(n: Expr) -> Expr:
        got = memo.get(n)
        if got is not None:
            return got
        if n.op == "var":
            r = mapping.get(n.name, n)
        elif n.op in ("const", "param"):
            r = n
        elif n.op == "pow":
            r = powc(go(n.args[0]), n.value)
        elif n.op in ("add", "sub", "mul", "div"):
            f = {"add": add, "sub": sub, "mul": mul, "div": div}[n.op]
            r = f(go(n.args[0]), go(n.args[1]))
        elif n.op == "neg":
            r = neg(go(n.args[0]))
        else:
            r = _unary(n.op, go(n.args[0]))
        memo[n] = r
        return r

    return go(e)


def free_names(e: Expr) -> tuple[set[str], set[str]]:
    """Return (variable names, parameter names) appearing in the tree."""
    variables: set[str] = set()
    parameters: set[str] = set()
    seen: set[int] = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n.op == "var":
            variables.add(n.name)
        elif n.op == "param":
            parameters.add(n.name)
        else:
            stack.extend(n.args)
    return variables, parameters


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate at a point; raises EvalDomainError naming the offending
    subexpression on division by zero, ln of a nonpositive value, etc."""
    memo: dict[Expr, float] = {}

    def bad(n: Expr, why: str):
        raise EvalDomainError(f"{why} in {to_str(n)!r}")

    def go(n: Expr) -> float:
        got = memo.get(n)
        if got is not None:
            return got
        op = n.op
        if op == "const":
            v = n.value
        elif op in ("var", "param"):
            try:
                v = float(env[n.name])
            except KeyError:
                bad(n, f"unbound name {n.name!r}")
        elif op == "add":
            v = go(n.args[0]) + go(n.args[1])
        elif op == "sub":
            v = go(n.args[0]) - go(n.args[1])
        elif op == "mul":
            v = go(n.args[0]) * go(n.args[1])
        elif op == "div":
            den = go(n.args[1])
            if den == 0.0:
                bad(n, "division by zero")
            v = go(n.args[0]) / den
        elif op == "neg":
            v = -go(n.args[0])
        elif op == "pow":
            base = go(n.args[0])
            if base < 0.0 and not n.value.is_integer():
                bad(n, "fractional power of a negative value")
            if base == 0.0 and n.value < 0.0:
                bad(n, "zero raised to a negative power")
            v = base**n.value
        elif op == "ln":
            x = go(n.args[0])
            if x <= 0.0:
                bad(n, "logarithm of a nonpositive value")
            v = math.log(x)
        elif op == "sqrt":
            x = go(n.args[0])
            if x < 0.0:
                bad(n, "square root of a negative value")
            v = math.sqrt(x)
        elif op == "arctanh":
            x = go(n.args[0])
            if abs(x) >= 1.0:
                bad(n, "arctanh outside (-1, 1)")
            v = math.atanh(x)
        else:
            v = _UNARY_EVAL[op](go(n.args[0]))
        memo[n] = v
        return v

    out = go(e)
    if not math.isfinite(out):
        raise EvalDomainError(f"nonfinite value from {to_str(e)!r}")
    return out


# Printing.  Precedence: add/sub < mul/div < neg < pow < atom.

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(e: Expr) -> int:
    if e.op in ("add", "sub"):
        return _PREC_ADD
    if e.op in ("mul", "div"):
        return _PREC_MUL
    if e.op == "neg":
        return _PREC_NEG
    if e.op == "pow":
        return _PREC_POW
    return _PREC_ATOM


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_str(e: Expr) -> str:
    def wrap(child: Expr, minimum: int) -> str:
        s = go(child)
        return f"({s})" if _prec(child) < minimum else s

    def go(n: Expr) -> str:
        op = n.op
        if op == "const":
            return _fmt_num(n.value) if n.value >= 0 else f"({_fmt_num(n.value)})"
        if op in ("var", "param"):
            return n.name
        if op == "add":
            return f"{wrap(n.args[0], _PREC_ADD)} + {wrap(n.args[1], _PREC_MUL)}"
        if op == "sub":
            return f"{wrap(n.args[0], _PREC_ADD)} - {wrap(n.args[1], _PREC_MUL)}"
        if op == "mul":
            return f"{wrap(n.args[0], _PREC_MUL)}*{wrap(n.args[1], _PREC_NEG)}"
        if op == "div":
            return f"{wrap(n.args[0], _PREC_MUL)}/{wrap(n.args[1], _PREC_NEG)}"
        if op == "neg":
            return f"-{wrap(n.args[0], _PREC_NEG)}"
        if op == "pow":
            base = go(n.args[0])
            if _prec(n.args[0]) < _PREC_ATOM:
                base = f"({base})"
            expo = _fmt_num(n.value)
            return f"{base}^{expo}" if n.value >= 0 else f"{base}^({expo})"
        return f"{op}({go(n.args[0])})"

    return go(e)


# Parser: a small recursive-descent grammar.
#
#   expr   := term (('+' | '-') term)*
#   term   := unary (('*' | '/') unary)*
#   unary  := '-' unary | power
#   power  := atom ('^' unary)?
#   atom   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
#
# Identifiers are [A-Za-z_][A-Za-z0-9_]*.  "pi" is a builtin constant unless
# shadowed by a declared name.

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise ParseError("unexpected character", text, pos)
        if m.lastgroup is None and m.group().strip() == "":
            pos = m.end()
            continue
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


def parse(text: str, chart: Sequence[str], params: Sequence[str] = ()) -> Expr:
    """Parse ``text`` against declared chart coordinates and parameter names."""
    chart = tuple(chart)
    params = tuple(params)
    overlap = set(chart) & set(params)
    if overlap:
        raise ValueError(f"names declared as both coordinate and parameter: {sorted(overlap)}")
    tokens = _tokenize(text)
    idx = 0

    def peek():
        return tokens[idx]

    def take(kind=None, value=None):
        nonlocal idx
        tok = tokens[idx]
        if kind is not None and tok[0] != kind:
            raise ParseError(f"expected {value or kind}", text, tok[2])
        if value is not None and tok[1] != value:
            raise ParseError(f"expected {value!r}", text, tok[2])
        idx += 1
        return tok

    def parse_expr() -> Expr:
        e = parse_term()
        while peek()[0] == "op" and peek()[1] in "+-":
            op = take()[1]
            rhs = parse_term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def parse_term() -> Expr:
        e = parse_unary()
        while peek()[0] == "op" and peek()[1] in "*/":
            op = take()[1]
            rhs = parse_unary()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def parse_unary() -> Expr:
        if peek()[0] == "op" and peek()[1] == "-":
            take()
            return neg(parse_unary())
        return parse_power()

    def parse_power() -> Expr:
        base = parse_atom()
        if peek()[0] == "op" and peek()[1] == "^":
            take()
            expo = parse_unary()
            try:
                return pow_(base, expo)
            except ExprError as err:
                raise ParseError(str(err), text, peek()[2]) from err
        return base

    def parse_atom() -> Expr:
        kind, value, pos = peek()
        if kind == "num":
            take()
            return const(float(value))
        if kind == "ident":
            take()
            if peek()[0] == "op" and peek()[1] == "(":
                if value not in _UNARY_EVAL:
                    raise ParseError(f"unknown function {value!r}", text, pos)
                take(value="(")
                inner = parse_expr()
                take(value=")")
                return _unary(value, inner)
            if value in chart:
                return var(value)
            if value in params:
                return param(value)
            if value == "pi":
                return const(math.pi)
            raise UndeclaredIdentifierError(f"undeclared identifier {value!r}", text, pos)
        if kind == "op" and value == "(":
            take()
            inner = parse_expr()
            take(value=")")
            return inner
        raise ParseError("expected a number, name or '('", text, pos)

    result = parse_expr()
    if peek()[0] != "end":
        raise ParseError("unexpected trailing input", text, peek()[2])
    return result


@dataclass
class Domain:
    """A box of per-coordinate closed intervals plus guard expressions.

    Guards are expressions required to stay away from zero; samples violating
    ``|guard| > margin`` are rejected.  The interval dict order fixes the
    sampling coordinate order.
    """

    intervals: dict[str, tuple[float, float]]
    guards: list[Expr] = field(default_factory=list)

    def __post_init__(self):
        for name, (lo, hi) in self.intervals.items():
            if not (lo <= hi):
                raise ValueError(f"empty interval for {name!r}: [{lo}, {hi}]")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.intervals)

    def center(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.names if names is None else tuple(names)
        return np.array([0.5 * (self.intervals[n][0] + self.intervals[n][1]) for n in names])

    def extended(self, extra: Mapping[str, tuple[float, float]]) -> "Domain":
        merged = dict(self.intervals)
        for name, iv in extra.items():
            if name in merged:
                raise ValueError(f"coordinate {name!r} already present")
            merged[name] = (float(iv[0]), float(iv[1]))
        return Domain(merged, list(self.guards))

    def sample(
        self,
        n: int,
        rng: np.random.Generator,
        params: Mapping[str, float] | None = None,
        margin: float = 1e-3,
        shrink: float = 0.0,
    ) -> np.ndarray:
        """Draw ``n`` points respecting all guards; shape (dim, n).

        ``shrink`` pulls samples away from the box faces by that fraction of
        each interval length (useful before finite differencing).
        """
        from .compile import compile_exprs
        from .backends import eval_program

        names = self.names
        lo = np.array([self.intervals[k][0] for k in names])
        hi = np.array([self.intervals[k][1] for k in names])
        if shrink:
            span = hi - lo
            lo = lo + shrink * span
            hi = hi - shrink * span
        prog = None
        if self.guards:
            prog = compile_exprs(list(self.guards), names, params or {})
        cols = []
        have = 0
        for _ in range(100):
            want = max(n - have, 8)
            X = rng.uniform(lo[:, None], hi[:, None], size=(len(names), want))
            if prog is not None:
                g = eval_program(prog, X)
                ok = np.all(np.abs(g) > margin, axis=0) & np.all(np.isfinite(g), axis=0)
                X = X[:, ok]
            if X.shape[1]:
                cols.append(X)
                have += X.shape[1]
            if have >= n:
                break
        if have < n:
            raise UndecidableError(
                f"could not draw {n} samples respecting guards (got {have})"
            )
        return np.concatenate(cols, axis=1)[:, :n]


def sample_values(
    exprs: Sequence[Expr],
    dom: Domain,
    params: Mapping[str, float] | None = None,
    n_samples: int = 64,
    seed: int = 0,
    shrink: float = 0.0,
) -> np.ndarray:
    """Evaluate expressions at seeded domain samples; shape (len(exprs), n)."""
    from .compile import compile_exprs
    from .backends import eval_program

    rng = np.random.default_rng(seed)
    X = dom.sample(n_samples, rng, params, shrink=shrink)
    prog = compile_exprs(list(exprs), dom.names, params or {})
    out = eval_program(prog, X)
    if not np.all(np.isfinite(out)):
        k = int(np.argwhere(~np.isfinite(out))[0][0])
        raise EvalDomainError(
            f"nonfinite sample value for {to_str(exprs[k])!r}; check domain guards"
        )
    return out


def is_zero(
    e: Expr,
    dom: Domain,
    params: Mapping[str, float] | None = None,
    n_samples: int = 64,
    tol: float = 1e-9,
    seed: int = 0,
    scale_terms: Sequence[Expr] = (),
) -> bool:
    """Decide whether ``e`` vanishes on the domain by seeded sampling.

    When ``scale_terms`` are given the tolerance is magnitude-normalized:
    ``|e| <= tol * (1 + sum |scale_i|)`` pointwise.  Deterministic per seed.
    """
    if n_samples < 32:
        raise ValueError("n_samples must be at least 32")
    vals = sample_values([e, *scale_terms], dom, params, n_samples, seed)
    threshold = tol * (1.0 + np.abs(vals[1:]).sum(axis=0)) if len(scale_terms) else tol
    return bool(np.all(np.abs(vals[0]) <= threshold))


def max_abs(
    e: Expr,
    dom: Domain,
    params: Mapping[str, float] | None = None,
    n_samples: int = 64,
    seed: int = 0,
) -> float:
    vals = sample_values([e], dom, params, n_samples, seed)
    return float(np.abs(vals[0]).max())
