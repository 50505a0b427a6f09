"""Arithmetic expression DSL for coefficient functions.

Expressions are parsed against a :class:`VariableScope` into an immutable
tree of nodes.  Trees evaluate on plain floats, on numpy arrays (one entry
per sample point) and on nested :class:`Dual` numbers, which is how every
derivative in the package is taken.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?          # exponent must fold to a constant
    atom   := NUMBER | NAME | 'pi' | NAME '(' expr (',' expr)* ')' | '(' expr ')'
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ExpressionError",
    "DSLSyntaxError",
    "UnknownVariable",
    "UnknownFunction",
    "DomainError",
    "VariableScope",
    "Node",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Pow",
    "Call",
    "Partial",
    "Compose",
    "Dual",
    "FUNCTIONS",
    "CONSTANTS",
    "parse",
    "to_source",
    "evaluate",
    "evaluate_many",
    "directional_derivative",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "call",
    "partial",
    "compose",
    "const",
    "is_zero",
]


class ExpressionError(ValueError):
    """Base class for all DSL errors."""


class DSLSyntaxError(ExpressionError):
    def __init__(self, message: str, position: int, expected: str, source: str = ""):
        self.position = position
        self.expected = expected
        self.source = source
        super().__init__(f"{message} at position {position} (expected {expected})")


class UnknownVariable(ExpressionError):
    def __init__(self, name: str, position: int | None = None):
        self.name = name
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"unknown variable {name!r}{where}")


class UnknownFunction(ExpressionError):
    def __init__(self, name: str, position: int | None = None):
        self.name = name
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"unknown function {name!r}{where}")


class DomainError(ExpressionError, ArithmeticError):
    def __init__(self, function: str, value):
        self.function = function
        self.value = value
        super().__init__(f"{function}: argument {value!r} outside domain")


# ---------------------------------------------------------------------------
# scope


@dataclass(frozen=True)
class VariableScope:
    """Ordered coordinate names of a chart.

    ``aliases`` maps extra spellings (e.g. ``px`` for ``p_1_x``) to indices.
    Printing always uses the canonical name.
    """

    names: tuple[str, ...]
    aliases: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in scope: {names}")
        for name, idx in self.aliases:
            if name in names:
                raise ValueError(f"alias {name!r} shadows a coordinate name")
            if not 0 <= idx < len(names):
                raise ValueError(f"alias {name!r} points outside the scope")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            pass
        for alias, idx in self.aliases:
            if alias == name:
                return idx
        raise UnknownVariable(name)

    def __contains__(self, name: str) -> bool:
        try:
            self.index(name)
        except UnknownVariable:
            return False
        return True

    def var(self, name: str) -> "Var":
        idx = self.index(name)
        return Var(self.names[idx], idx)


# ---------------------------------------------------------------------------
# nodes


def _vars_of(*nodes: "Node") -> frozenset:
    out: frozenset = frozenset()
    for n in nodes:
        out = out | n.free
    return out


@dataclass(frozen=True)
class Node:
    """Base of the expression tree.  ``free`` holds the coordinate indices
    the node can depend on."""

    def __post_init__(self):
        object.__setattr__(self, "free", self._free())

    def _free(self) -> frozenset:
        return frozenset()


@dataclass(frozen=True)
class Num(Node):
    value: float
    free: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)


@dataclass(frozen=True)
class Var(Node):
    name: str
    index: int
    free: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def _free(self):
        return frozenset((self.index,))


@dataclass(frozen=True)
class Neg(Node):
    arg: Node
    free: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def _free(self):
        return self.arg.free


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node
    free: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def _free(self):
        return _vars_of(self.left, self.right)


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: float
    free: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def _free(self):
        return self.base.free


@dataclass(frozen=True)
class Call(Node):
    name: str
    args: tuple[Node, ...]
    free: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def _free(self):
        return _vars_of(*self.args)


@dataclass(frozen=True, eq=False)
class Partial(Node):
    """Derivative of ``arg`` along coordinate ``index``, evaluated by
    forward-mode dual arithmetic.  Never produced by the parser."""

    arg: Node
    index: int
    free: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def _free(self):
        return self.arg.free


@dataclass(frozen=True, eq=False)
class Compose(Node):
    """``arg`` evaluated at the point ``(components[0](z), ...)``."""

    arg: Node
    components: tuple[Node, ...]
    free: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def _free(self):
        return _vars_of(*(self.components[j] for j in self.arg.free))


# named constants, shadowed by a coordinate of the same name
CONSTANTS = {"pi": float(np.pi)}

FUNCTIONS = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "ln": 1,
    "sqrt": 1,
    "abs": 1,
    "atan2": 2,
}


# ---------------------------------------------------------------------------
# dual numbers

_tags = itertools.count(1)


def _base(x):
    while isinstance(x, Dual):
        x = x.re
    return x


def _parts(x, tag):
    if isinstance(x, Dual) and x.tag == tag:
        return x.re, x.eps
    return x, 0.0


def _tag(a, b) -> int:
    ta = a.tag if isinstance(a, Dual) else 0
    tb = b.tag if isinstance(b, Dual) else 0
    return ta if ta > tb else tb


class Dual:
    """Tagged dual number ``re + eps*e``.

    Components may themselves be duals of a lower tag, so nesting gives
    higher derivatives without perturbation confusion.  Components may be
    numpy arrays.
    """

    __slots__ = ("re", "eps", "tag")
    __array_ufunc__ = None

    def __init__(self, re, eps, tag: int):
        self.re = re
        self.eps = eps
        self.tag = tag

    def __repr__(self):
        return f"Dual({self.re!r}, {self.eps!r}, tag={self.tag})"

    def __neg__(self):
        return Dual(-self.re, -self.eps, self.tag)

    def __pos__(self):
        return self

    def __add__(self, other):
        t = _tag(self, other)
        a0, a1 = _parts(self, t)
        b0, b1 = _parts(other, t)
        return Dual(a0 + b0, a1 + b1, t)

    __radd__ = __add__

    def __sub__(self, other):
        t = _tag(self, other)
        a0, a1 = _parts(self, t)
        b0, b1 = _parts(other, t)
        return Dual(a0 - b0, a1 - b1, t)

    def __rsub__(self, other):
        t = _tag(self, other)
        a0, a1 = _parts(other, t)
        b0, b1 = _parts(self, t)
        return Dual(a0 - b0, a1 - b1, t)

    def __mul__(self, other):
        t = _tag(self, other)
        a0, a1 = _parts(self, t)
        b0, b1 = _parts(other, t)
        return Dual(a0 * b0, a0 * b1 + a1 * b0, t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)


def _div(a, b):
    if np.any(_base(b) == 0):
        raise DomainError("/", "0 denominator")
    t = _tag(a, b)
    if t == 0:
        return a / b
    a0, a1 = _parts(a, t)
    b0, b1 = _parts(b, t)
    q = _div(a0, b0)
    return Dual(q, _div(a1 - q * b1, b0), t)


def _sin(x):
    if isinstance(x, Dual):
        return Dual(_sin(x.re), _cos(x.re) * x.eps, x.tag)
    return np.sin(x)


def _cos(x):
    if isinstance(x, Dual):
        return Dual(_cos(x.re), -_sin(x.re) * x.eps, x.tag)
    return np.cos(x)


def _exp(x):
    if isinstance(x, Dual):
        e = _exp(x.re)
        return Dual(e, e * x.eps, x.tag)
    return np.exp(x)


def _ln(x):
    b = _base(x)
    if np.any(b <= 0):
        raise DomainError("ln", _first_bad(b, b <= 0))
    if isinstance(x, Dual):
        return Dual(_ln(x.re), _div(x.eps, x.re), x.tag)
    return np.log(x)


def _sqrt(x):
    b = _base(x)
    if np.any(b < 0):
        raise DomainError("sqrt", _first_bad(b, b < 0))
    if isinstance(x, Dual):
        s = _sqrt(x.re)
        return Dual(s, _div(x.eps, 2.0 * s), x.tag)
    return np.sqrt(x)


def _abs(x):
    if isinstance(x, Dual):
        return Dual(_abs(x.re), np.sign(_base(x.re)) * x.eps, x.tag)
    return np.abs(x)


def _atan2(a, b):
    t = _tag(a, b)
    if t == 0:
        if np.any((np.asarray(a) == 0) & (np.asarray(b) == 0)):
            raise DomainError("atan2", (0.0, 0.0))
        return np.arctan2(a, b)
    a0, a1 = _parts(a, t)
    b0, b1 = _parts(b, t)
    return Dual(_atan2(a0, b0), _div(b0 * a1 - a0 * b1, a0 * a0 + b0 * b0), t)


def _pow(x, c: float):
    b = _base(x)
    if c != int(c) and np.any(b < 0):
        raise DomainError("^", _first_bad(b, b < 0))
    if c < 0 and np.any(b == 0):
        raise DomainError("^", 0.0)
    if isinstance(x, Dual):
        if c == 0:
            return 1.0
        return Dual(_pow(x.re, c), c * _pow(x.re, c - 1.0) * x.eps, x.tag)
    if c == 1:
        return x
    if c == 2:
        return x * x
    return np.power(x, c)


def _first_bad(values, mask):
    values = np.asarray(values)
    if values.ndim == 0:
        return float(values)
    return float(values[np.argmax(mask)])


_IMPL = {
    "sin": _sin,
    "cos": _cos,
    "exp": _exp,
    "ln": _ln,
    "sqrt": _sqrt,
    "abs": _abs,
    "atan2": _atan2,
}


# ---------------------------------------------------------------------------
# tokenizer & parser

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[a-zA-Z_][a-zA-Z0-9_]*)"
    r"|(?P<op>[-+*/^(),])"
    r")"
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(source: str) -> list[_Tok]:
    toks = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            raise DSLSyntaxError(
                f"unexpected character {source[pos]!r}", pos, "a number, name or operator", source
            )
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    toks.append(_Tok("end", "", n))
    return toks


class _Parser:
    def __init__(self, source: str, scope: VariableScope):
        self.source = source
        self.scope = scope
        self.toks = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, expected: str):
        t = self.tok
        found = "end of input" if t.kind == "end" else repr(t.text)
        raise DSLSyntaxError(f"unexpected {found}", t.pos, expected, self.source)

    def eat(self, text: str):
        if self.tok.text != text or self.tok.kind == "end":
            self.fail(repr(text))
        self.i += 1

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            self.fail("an operator or end of input")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.text in ("+", "-") and self.tok.kind == "op":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.text in ("*", "/") and self.tok.kind == "op":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.i += 1
            return Neg(self.unary())
        if self.tok.kind == "op" and self.tok.text == "+":
            self.i += 1
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.i += 1
            pos = self.tok.pos
            exponent = self.unary()
            if exponent.free:
                raise DSLSyntaxError(
                    "exponent depends on a variable", pos, "a numeric exponent", self.source
                )
            return Pow(base, float(evaluate(exponent, ())))
        return base

    def atom(self) -> Node:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return Num(float(t.text))
        if t.kind == "name":
            self.i += 1
            if self.tok.kind == "op" and self.tok.text == "(":
                if t.text not in FUNCTIONS:
                    raise UnknownFunction(t.text, t.pos)
                self.i += 1
                args = [self.expr()]
                while self.tok.kind == "op" and self.tok.text == ",":
                    self.i += 1
                    args.append(self.expr())
                arity = FUNCTIONS[t.text]
                if len(args) != arity:
                    raise DSLSyntaxError(
                        f"{t.text} takes {arity} argument(s), got {len(args)}",
                        t.pos,
                        f"{arity} argument(s)",
                        self.source,
                    )
                self.eat(")")
                return Call(t.text, tuple(args))
            if t.text in FUNCTIONS:
                self.fail("'(' after function name")
            if t.text in CONSTANTS and t.text not in self.scope:
                return Num(CONSTANTS[t.text])
            try:
                return self.scope.var(t.text)
            except UnknownVariable:
                raise UnknownVariable(t.text, t.pos) from None
        if t.kind == "op" and t.text == "(":
            self.i += 1
            node = self.expr()
            self.eat(")")
            return node
        self.fail("a number, name or '('")


def parse(source: str, scope: VariableScope) -> Node:
    """Parse ``source`` into an expression tree over ``scope``."""
    if not source or not source.strip():
        raise DSLSyntaxError("empty expression", 0, "an expression", source or "")
    return _Parser(source, scope).parse()


def to_source(node: Node) -> str:
    """Print a parsed tree back to DSL text (fully parenthesized)."""
    if isinstance(node, Num):
        v = node.value
        return repr(v) if v >= 0 else f"(-{repr(-v)})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.arg)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Pow):
        e = node.exponent
        exp = repr(e) if e >= 0 else f"(-{repr(-e)})"
        return f"({to_source(node.base)}^{exp})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a) for a in node.args)})"
    raise TypeError(f"{type(node).__name__} nodes have no source form")


# ---------------------------------------------------------------------------
# evaluation


class _Context:
    """Values of the chart coordinates plus a memo of evaluated nodes."""

    __slots__ = ("values", "memo", "children")

    def __init__(self, values: Sequence):
        self.values = values
        self.memo: dict = {}
        self.children: dict = {}

    def child(self, key, make):
        ctx = self.children.get(key)
        if ctx is None:
            ctx = self.children[key] = _Context(make())
        return ctx

    def eval(self, node: Node):
        key = id(node)
        memo = self.memo
        if key in memo:
            return memo[key][1]
        value = self._eval(node)
        # keep the node alive so its id stays unique for the memo's lifetime
        memo[key] = (node, value)
        return value

    def _eval(self, node: Node):
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Var):
            return self.values[node.index]
        if isinstance(node, BinOp):
            a = self.eval(node.left)
            b = self.eval(node.right)
            op = node.op
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            return _div(a, b)
        if isinstance(node, Neg):
            return -self.eval(node.arg)
        if isinstance(node, Pow):
            return _pow(self.eval(node.base), node.exponent)
        if isinstance(node, Call):
            return _IMPL[node.name](*(self.eval(a) for a in node.args))
        if isinstance(node, Partial):
            return self._partial(node)
        if isinstance(node, Compose):
            comps = node.components
            used = node.arg.free

            def make():
                return [self.eval(c) if j in used else None for j, c in enumerate(comps)]

            # contexts for the same component tuple are shared
            return self.child(("c", id(comps), used), make).eval(node.arg)
        raise TypeError(f"cannot evaluate {type(node).__name__}")

    def _partial(self, node: Partial):
        i = node.index
        key = ("d", i)
        ctx = self.children.get(key)
        if ctx is None:
            tag = next(_tags)
            vals = list(self.values)
            vals[i] = Dual(vals[i], 1.0, tag)
            ctx = self.children[key] = _Context(vals)
        tag = ctx.values[i].tag
        out = ctx.eval(node.arg)
        if isinstance(out, Dual) and out.tag == tag:
            return out.eps
        return 0.0


def _columns(point) -> tuple[list, tuple]:
    arr = np.asarray(point, dtype=float)
    if arr.ndim == 1:
        return [float(v) for v in arr], ()
    if arr.ndim == 2:
        return [arr[:, j] for j in range(arr.shape[1])], (arr.shape[0],)
    raise ValueError(f"points must be 1-D or 2-D, got shape {arr.shape}")


def _finish(value, shape):
    if shape:
        return np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
    return float(value)


def evaluate(node: Node, point) -> float | np.ndarray:
    """Evaluate ``node`` at one point (1-D) or a batch of points (2-D,
    one row per point)."""
    vals, shape = _columns(point)
    return _finish(_Context(vals).eval(node), shape)


def evaluate_many(nodes: Iterable[Node], point) -> list:
    """Evaluate several trees at the same point(s), sharing work between
    common subtrees."""
    vals, shape = _columns(point)
    ctx = _Context(vals)
    return [_finish(ctx.eval(n), shape) for n in nodes]


def directional_derivative(node: Node, point, direction):
    """Return ``(value, derivative)`` of ``node`` at ``point`` along
    ``direction`` using one dual-number pass."""
    vals, shape = _columns(point)
    dirs = np.asarray(direction, dtype=float)
    if dirs.shape[-1] != len(vals):
        raise ValueError("direction length does not match the point")
    tag = next(_tags)
    if dirs.ndim == 1:
        lifted = [Dual(v, float(d), tag) for v, d in zip(vals, dirs)]
    else:
        lifted = [Dual(v, dirs[:, j], tag) for j, v in enumerate(vals)]
    out = _Context(lifted).eval(node)
    if isinstance(out, Dual) and out.tag == tag:
        return _finish(out.re, shape), _finish(out.eps, shape)
    return _finish(out, shape), _finish(0.0, shape)


# ---------------------------------------------------------------------------
# tree algebra with light simplification

ZERO = Num(0.0)
ONE = Num(1.0)


def const(value: float) -> Num:
    return Num(float(value))


def is_zero(node: Node) -> bool:
    return isinstance(node, Num) and node.value == 0.0


def _is_one(node: Node) -> bool:
    return isinstance(node, Num) and node.value == 1.0


def add(a: Node, b: Node) -> Node:
    if is_zero(a):
        return b
    if is_zero(b):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    if isinstance(b, Neg):
        return BinOp("-", a, b.arg)
    return BinOp("+", a, b)


def sub(a: Node, b: Node) -> Node:
    if is_zero(b):
        return a
    if is_zero(a):
        return neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def neg(a: Node) -> Node:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def mul(a: Node, b: Node) -> Node:
    if is_zero(a) or is_zero(b):
        return ZERO
    if _is_one(a):
        return b
    if _is_one(b):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    if isinstance(a, Num) and a.value == -1.0:
        return neg(b)
    if isinstance(b, Num) and b.value == -1.0:
        return neg(a)
    return BinOp("*", a, b)


def div(a: Node, b: Node) -> Node:
    if is_zero(a):
        return ZERO
    if _is_one(b):
        return a
    return BinOp("/", a, b)


def call(name: str, *args: Node) -> Node:
    if name not in FUNCTIONS:
        raise UnknownFunction(name)
    return Call(name, tuple(args))


def partial(node: Node, index: int) -> Node:
    """Derivative node along coordinate ``index`` (linear parts are
    distributed, constants drop out)."""
    if index not in node.free:
        return ZERO
    if isinstance(node, Var):
        return ONE
    if isinstance(node, Neg):
        return neg(partial(node.arg, index))
    if isinstance(node, BinOp) and node.op in "+-":
        l, r = partial(node.left, index), partial(node.right, index)
        return add(l, r) if node.op == "+" else sub(l, r)
    if isinstance(node, BinOp) and node.op == "*":
        if isinstance(node.left, Num):
            return mul(node.left, partial(node.right, index))
        if isinstance(node.right, Num):
            return mul(partial(node.left, index), node.right)
    return Partial(node, index)


def compose(node: Node, components: tuple[Node, ...]) -> Node:
    """``node`` with its coordinates replaced by ``components``."""
    if not node.free:
        return node
    if isinstance(node, Var):
        return components[node.index]
    return Compose(node, components)
