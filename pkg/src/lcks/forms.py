"""Exterior calculus on a single coordinate chart.

A :class:`FormField` of degree ``p`` stores one expression tree per strictly
increasing index tuple ``(i1 < ... < ip)``; the form is
``sum c_I dz^i1 ^ ... ^ dz^ip``.  Evaluation on vectors uses the
determinant convention, so ``(dx ^ dy)(e_x, e_y) = 1`` and

    (a ^ w)(u, v, w') = a(u) w(v, w') - a(v) w(u, w') + a(w') w(u, v)

for a 1-form ``a`` and a 2-form ``w``.  Degrees above 3 are rejected.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import dsl
from .dsl import Node, VariableScope

MAX_DEGREE = 3


class FormError(ValueError):
    pass


class DegreeOverflow(FormError):
    pass


class DegreeUnderflow(FormError):
    pass


class DimensionMismatch(FormError):
    pass


def _as_node(value) -> Node:
    if isinstance(value, Node):
        return value
    if isinstance(value, ScalarField):
        return value.node
    return dsl.const(value)


def _sort_sign(idx: Sequence[int]) -> tuple[int, tuple[int, ...]]:
    """Sign of the permutation sorting ``idx`` (0 if an index repeats)."""
    if len(set(idx)) != len(idx):
        return 0, ()
    idx = list(idx)
    sign = 1
    for i in range(len(idx)):
        for j in range(len(idx) - 1 - i):
            if idx[j] > idx[j + 1]:
                idx[j], idx[j + 1] = idx[j + 1], idx[j]
                sign = -sign
    return sign, tuple(idx)


def _points(points) -> tuple[np.ndarray, bool]:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


@dataclass(frozen=True)
class ScalarField:
    """A differentiable function on a chart, backed by an expression tree."""

    node: Node
    scope: VariableScope

    @classmethod
    def parse(cls, source: str, scope: VariableScope) -> "ScalarField":
        return cls(dsl.parse(source, scope), scope)

    @classmethod
    def constant(cls, value: float, scope: VariableScope) -> "ScalarField":
        return cls(dsl.const(value), scope)

    @classmethod
    def coordinate(cls, name: str, scope: VariableScope) -> "ScalarField":
        return cls(scope.var(name), scope)

    def __call__(self, points):
        return dsl.evaluate(self.node, points)

    def directional_derivative(self, point, direction):
        return dsl.directional_derivative(self.node, point, direction)

    def partial(self, index: int) -> "ScalarField":
        return ScalarField(dsl.partial(self.node, index), self.scope)

    def gradient(self, points) -> np.ndarray:
        """Array of partial derivatives, shape ``(..., N)``."""
        nodes = [dsl.partial(self.node, j) for j in range(len(self.scope))]
        pts, single = _points(points)
        out = np.stack(dsl.evaluate_many(nodes, pts), axis=-1)
        return out[0] if single else out

    def _lift(self, other) -> Node:
        if isinstance(other, ScalarField) and other.scope != self.scope:
            raise DimensionMismatch("scalar fields live on different charts")
        return _as_node(other)

    def __add__(self, other):
        return ScalarField(dsl.add(self.node, self._lift(other)), self.scope)

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(dsl.sub(self.node, self._lift(other)), self.scope)

    def __rsub__(self, other):
        return ScalarField(dsl.sub(self._lift(other), self.node), self.scope)

    def __mul__(self, other):
        return ScalarField(dsl.mul(self.node, self._lift(other)), self.scope)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(dsl.div(self.node, self._lift(other)), self.scope)

    def __neg__(self):
        return ScalarField(dsl.neg(self.node), self.scope)

    def exp(self) -> "ScalarField":
        return ScalarField(dsl.call("exp", self.node), self.scope)

    def compose(self, phi: "ChartMap") -> "ScalarField":
        if phi.target != self.scope:
            raise DimensionMismatch("map target is not this field's chart")
        return ScalarField(dsl.compose(self.node, phi.components), phi.source)


@dataclass(frozen=True)
class ChartMap:
    """A differentiable map between charts given by component expressions
    over the source coordinates."""

    source: VariableScope
    target: VariableScope
    components: tuple[Node, ...]

    def __post_init__(self):
        comps = tuple(_as_node(c) for c in self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) != len(self.target):
            raise DimensionMismatch(
                f"map has {len(comps)} components for a {len(self.target)}-dimensional target"
            )
        for c in comps:
            if c.free and max(c.free) >= len(self.source):
                raise DimensionMismatch("map component refers outside the source chart")

    @classmethod
    def identity(cls, scope: VariableScope) -> "ChartMap":
        return cls(scope, scope, tuple(dsl.Var(n, i) for i, n in enumerate(scope.names)))

    @classmethod
    def parse(cls, sources: Sequence[str], source: VariableScope, target: VariableScope) -> "ChartMap":
        return cls(source, target, tuple(dsl.parse(s, source) for s in sources))

    def __call__(self, points) -> np.ndarray:
        pts, single = _points(points)
        out = np.stack(dsl.evaluate_many(self.components, pts), axis=-1)
        return out[0] if single else out

    def jacobian(self, points) -> np.ndarray:
        """Jacobian ``D[a, J] = d phi^a / d z^J``, shape ``(..., M, N)``."""
        pts, single = _points(points)
        n = len(self.source)
        cols = []
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            cols.append(
                np.stack(
                    [dsl.directional_derivative(c, pts, e)[1] for c in self.components], axis=-1
                )
            )
        out = np.stack(cols, axis=-1)
        return out[0] if single else out

    def push_forward(self, points, vectors) -> np.ndarray:
        """Tangent map ``D phi(z) . v`` via one dual pass per component."""
        pts, single = _points(points)
        vec = np.asarray(vectors, dtype=float)
        if vec.ndim == 1:
            vec = np.broadcast_to(vec, (pts.shape[0], vec.shape[0]))
        out = np.stack(
            [dsl.directional_derivative(c, pts, vec)[1] for c in self.components], axis=-1
        )
        return out[0] if single else out

    def then(self, other: "ChartMap") -> "ChartMap":
        """Composition ``other o self``."""
        if other.source != self.target:
            raise DimensionMismatch("maps do not compose")
        return ChartMap(
            self.source, other.target, tuple(dsl.compose(c, self.components) for c in other.components)
        )


@dataclass(frozen=True)
class VectorField:
    """Vector field on a chart with one component expression per coordinate."""

    components: tuple[Node, ...]
    scope: VariableScope

    def __post_init__(self):
        comps = tuple(_as_node(c) for c in self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) != len(self.scope):
            raise DimensionMismatch("vector field needs one component per coordinate")

    @classmethod
    def parse(cls, sources: Sequence[str], scope: VariableScope) -> "VectorField":
        return cls(tuple(dsl.parse(s, scope) for s in sources), scope)

    @classmethod
    def coordinate(cls, index: int, scope: VariableScope) -> "VectorField":
        comps = [dsl.const(0.0)] * len(scope)
        comps[index] = dsl.const(1.0)
        return cls(tuple(comps), scope)

    def __call__(self, points) -> np.ndarray:
        pts, single = _points(points)
        out = np.stack(dsl.evaluate_many(self.components, pts), axis=-1)
        return out[0] if single else out

    def jacobian(self, points) -> np.ndarray:
        return ChartMap(self.scope, self.scope, self.components).jacobian(points)


class FormField:
    """Differential form of degree 0..3 on a chart."""

    __slots__ = ("degree", "scope", "coeffs")

    def __init__(self, degree: int, scope: VariableScope, coeffs: Mapping[tuple, object] = ()):
        if not 0 <= degree <= MAX_DEGREE:
            raise DegreeOverflow(f"degree {degree} outside 0..{MAX_DEGREE}")
        self.degree = degree
        self.scope = scope
        n = len(scope)
        store: dict[tuple[int, ...], Node] = {}
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        for idx, c in items:
            idx = tuple(int(i) for i in idx)
            if len(idx) != degree:
                raise FormError(f"index {idx} does not match degree {degree}")
            if any(not 0 <= i < n for i in idx):
                raise DimensionMismatch(f"index {idx} outside a {n}-dimensional chart")
            sign, key = _sort_sign(idx)
            node = _as_node(c)
            if sign == 0 or dsl.is_zero(node):
                continue
            if sign < 0:
                node = dsl.neg(node)
            store[key] = dsl.add(store[key], node) if key in store else node
        self.coeffs = {k: v for k, v in store.items() if not dsl.is_zero(v)}

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, degree: int, scope: VariableScope) -> "FormField":
        return cls(degree, scope)

    @classmethod
    def function(cls, f, scope: VariableScope | None = None) -> "FormField":
        if isinstance(f, ScalarField):
            return cls(0, f.scope, {(): f.node})
        return cls(0, scope, {(): _as_node(f)})

    @classmethod
    def one_form(cls, components: Sequence, scope: VariableScope) -> "FormField":
        return cls(1, scope, {(i,): c for i, c in enumerate(components)})

    @classmethod
    def parse_one_form(cls, sources: Sequence[str], scope: VariableScope) -> "FormField":
        if len(sources) != len(scope):
            raise DimensionMismatch("one coefficient expression per coordinate expected")
        return cls.one_form([dsl.parse(s, scope) for s in sources], scope)

    @classmethod
    def differential(cls, index: int, scope: VariableScope) -> "FormField":
        return cls(1, scope, {(index,): 1.0})

    # -- accessors ---------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.scope)

    def basis(self) -> list[tuple[int, ...]]:
        return list(itertools.combinations(range(self.dim), self.degree))

    def coefficient(self, *idx: int) -> ScalarField:
        sign, key = _sort_sign(idx)
        node = self.coeffs.get(key, dsl.ZERO) if sign else dsl.ZERO
        return ScalarField(node if sign >= 0 else dsl.neg(node), self.scope)

    def __repr__(self):
        terms = ", ".join(
            f"{'^'.join(self.scope.names[i] for i in k) or '1'}" for k in sorted(self.coeffs)
        )
        return f"FormField(degree={self.degree}, dim={self.dim}, terms=[{terms}])"

    # -- algebra -----------------------------------------------------------

    def _check(self, other: "FormField"):
        if other.scope != self.scope:
            raise DimensionMismatch("forms live on different charts")
        if other.degree != self.degree:
            raise FormError("cannot add forms of different degree")

    def __add__(self, other: "FormField") -> "FormField":
        self._check(other)
        return FormField(self.degree, self.scope, list(self.coeffs.items()) + list(other.coeffs.items()))

    def __neg__(self) -> "FormField":
        return FormField(self.degree, self.scope, {k: dsl.neg(v) for k, v in self.coeffs.items()})

    def __sub__(self, other: "FormField") -> "FormField":
        return self + (-other)

    def scale(self, f) -> "FormField":
        """Multiply every coefficient by a function or constant."""
        node = _as_node(f)
        return FormField(self.degree, self.scope, {k: dsl.mul(node, v) for k, v in self.coeffs.items()})

    __rmul__ = scale

    def is_structurally_zero(self) -> bool:
        return not self.coeffs

    # -- numerics ----------------------------------------------------------

    def components(self, points) -> np.ndarray:
        """Canonical coefficients, shape ``(..., C(N, degree))``."""
        pts, single = _points(points)
        basis = self.basis()
        out = np.zeros((pts.shape[0], len(basis)))
        keys = list(self.coeffs)
        if keys:
            vals = dsl.evaluate_many([self.coeffs[k] for k in keys], pts)
            pos = {b: i for i, b in enumerate(basis)}
            for k, v in zip(keys, vals):
                out[:, pos[k]] = v
        return out[0] if single else out

    def tensor(self, points) -> np.ndarray:
        """Fully antisymmetric coefficient array, shape ``(..., N, ..., N)``."""
        pts, single = _points(points)
        m, n, p = pts.shape[0], self.dim, self.degree
        out = np.zeros((m,) + (n,) * p)
        keys = list(self.coeffs)
        if keys:
            vals = dsl.evaluate_many([self.coeffs[k] for k in keys], pts)
            for k, v in zip(keys, vals):
                for perm in itertools.permutations(range(p)):
                    sign, _ = _sort_sign(perm)
                    out[(slice(None),) + tuple(k[i] for i in perm)] = sign * v
        return out[0] if single else out

    def __call__(self, points, *vectors) -> np.ndarray:
        """Evaluate the form on ``degree`` vectors at the given point(s)."""
        if len(vectors) != self.degree:
            raise FormError(f"a {self.degree}-form takes {self.degree} vectors")
        t = self.tensor(points)
        single = np.asarray(points).ndim == 1
        if single:
            t = t[None]
        for v in vectors:
            v = np.asarray(v, dtype=float)
            if v.ndim == 1:
                v = np.broadcast_to(v, (t.shape[0], v.shape[0]))
            t = np.einsum("mi,mi...->m...", v, t)
        return t[0] if single else t

    def max_abs(self, points) -> float:
        c = self.components(points)
        return float(np.max(np.abs(c))) if c.size else 0.0


# ---------------------------------------------------------------------------
# operations


def wedge(a: FormField, b: FormField) -> FormField:
    if a.scope != b.scope:
        raise DimensionMismatch("forms live on different charts")
    deg = a.degree + b.degree
    if deg > MAX_DEGREE:
        raise DegreeOverflow(f"wedge of degree {deg} exceeds {MAX_DEGREE}")
    terms = []
    for ka, ca in a.coeffs.items():
        for kb, cb in b.coeffs.items():
            terms.append((ka + kb, dsl.mul(ca, cb)))
    return FormField(deg, a.scope, terms)


def exterior_derivative(a: FormField) -> FormField:
    if a.degree >= MAX_DEGREE:
        raise DegreeOverflow(f"d of a {a.degree}-form exceeds degree {MAX_DEGREE}")
    terms = []
    for k, c in a.coeffs.items():
        for j in sorted(c.free):
            if j in k:
                continue
            terms.append(((j,) + k, dsl.partial(c, j)))
    return FormField(a.degree + 1, a.scope, terms)


def lichnerowicz_derivative(a: FormField, theta: FormField) -> FormField:
    """``d_theta a = da - theta ^ a``."""
    if theta.degree != 1:
        raise FormError("the Lee form must be a 1-form")
    return exterior_derivative(a) - wedge(theta, a)


def interior_product(X, a: FormField, point) -> np.ndarray:
    """Components of ``i_X a`` at ``point`` (canonical ordering of the
    ``degree - 1`` basis; a scalar for 1-forms)."""
    if a.degree < 1:
        raise DegreeUnderflow("cannot contract a 0-form")
    pts, single = _points(point)
    x = X(pts) if isinstance(X, VectorField) else np.asarray(X, dtype=float)
    if x.ndim == 1:
        x = np.broadcast_to(x, (pts.shape[0], x.shape[0]))
    t = np.einsum("mi,mi...->m...", x, a.tensor(pts))
    basis = list(itertools.combinations(range(a.dim), a.degree - 1))
    out = np.stack([t[(slice(None),) + b] for b in basis], axis=-1)
    if a.degree == 1:
        out = out[..., 0]
    return out[0] if single else out


def _minor(jac: list[list[Node]], rows: tuple[int, ...], cols: tuple[int, ...]) -> Node:
    total = dsl.ZERO
    for perm in itertools.permutations(range(len(cols))):
        sign, _ = _sort_sign(perm)
        term: Node = dsl.const(float(sign))
        for r, p in zip(rows, perm):
            term = dsl.mul(term, jac[r][cols[p]])
            if dsl.is_zero(term):
                break
        total = dsl.add(total, term)
    return total


def pullback(phi: ChartMap, a: FormField) -> FormField:
    """``phi^* a`` as a form on the source chart of ``phi``."""
    if phi.target != a.scope:
        raise DimensionMismatch("map target differs from the form's chart")
    if a.degree > 2:
        raise DegreeOverflow("pullback implemented for degrees 0..2")
    src = phi.source
    jac = [[dsl.partial(c, j) for j in range(len(src))] for c in phi.components]
    terms = []
    cols_all = list(itertools.combinations(range(len(src)), a.degree))
    for k, c in a.coeffs.items():
        pulled = dsl.compose(c, phi.components)
        for cols in cols_all:
            m = _minor(jac, k, cols)
            if not dsl.is_zero(m):
                terms.append((cols, dsl.mul(pulled, m)))
    return FormField(a.degree, src, terms)
