"""HDW equations on the phase bundle: the flat map, pointwise solvers,
kernel analysis, integrability and multi-time integral sections."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import dsl
from .dsl import DomainError
from .forms import ScalarField, VectorField
from .structures import RANK_RTOL, Domain, PhaseBundle

SOLVE_TOL = 1e-9


class Gauge(enum.Enum):
    MIN_NORM = "min-norm"
    DARBOUX_DIAGONAL = "darboux"

    @classmethod
    def parse(cls, value) -> "Gauge":
        if isinstance(value, cls):
            return value
        for g in cls:
            if value in (g.value, g.name, g.name.lower()):
                return g
        raise ValueError(f"unknown gauge {value!r}")


class OutOfRange(ArithmeticError):
    def __init__(self, residual: float, point):
        self.residual = residual
        self.point = np.asarray(point)
        super().__init__(
            f"d_theta H is not in the range of the flat map at {self.point.tolist()} "
            f"(residual {residual:.3e})"
        )


class DomainEscape(RuntimeError):
    def __init__(self, grid: "MultiTimeGrid", index: tuple):
        self.grid = grid
        self.index = index
        super().__init__(f"integral section left the chart domain at multi-index {index}")


def _pts(z):
    z = np.asarray(z, dtype=float)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


# ---------------------------------------------------------------------------
# k-vector fields


class KVectorField:
    """Family ``(X_1, ..., X_k)`` of vector fields on an ``N``-dim chart."""

    k: int
    dim: int

    def values(self, points) -> np.ndarray:
        """Shape ``(m, k, N)`` for a batch, ``(k, N)`` for one point."""
        raise NotImplementedError

    def component(self, kappa: int, points) -> np.ndarray:
        pts, single = _pts(points)
        out = self.values(pts)[:, kappa, :]
        return out[0] if single else out

    def bracket(self, kappa: int, lam: int, point) -> np.ndarray:
        """``[X_kappa, X_lam]`` at ``point`` by central differences.
        Subclasses with expression components override this exactly."""
        z = np.asarray(point, dtype=float)
        xk = self.component(kappa, z)
        xl = self.component(lam, z)
        h = 1e-6
        dl = (self.component(lam, z + h * xk) - self.component(lam, z - h * xk)) / (2 * h)
        dk = (self.component(kappa, z + h * xl) - self.component(kappa, z - h * xl)) / (2 * h)
        return dl - dk


class ExpressionKVectorField(KVectorField):
    """k-vector field with expression components (exact Jacobians)."""

    def __init__(self, fields: Sequence[VectorField]):
        self.fields = tuple(fields)
        self.k = len(self.fields)
        self.dim = len(self.fields[0].scope)
        self._nodes = [c for f in self.fields for c in f.components]

    @classmethod
    def parse(cls, sources: Sequence[Sequence[str]], scope) -> "ExpressionKVectorField":
        return cls([VectorField.parse(s, scope) for s in sources])

    def values(self, points):
        pts, single = _pts(points)
        vals = np.stack(dsl.evaluate_many(self._nodes, pts), axis=-1)
        out = vals.reshape(pts.shape[0], self.k, self.dim)
        return out[0] if single else out

    def component(self, kappa, points):
        return self.fields[kappa](points)

    def bracket(self, kappa, lam, point):
        z = np.asarray(point, dtype=float)
        xk = self.fields[kappa](z)
        xl = self.fields[lam](z)
        dl = np.array([dsl.directional_derivative(c, z, xk)[1] for c in self.fields[lam].components])
        dk = np.array([dsl.directional_derivative(c, z, xl)[1] for c in self.fields[kappa].components])
        return dl - dk


class CallableKVectorField(KVectorField):
    """Wraps ``f(points) -> (m, k, N)``."""

    def __init__(self, func: Callable, k: int, dim: int):
        self.func = func
        self.k = k
        self.dim = dim

    def values(self, points):
        pts, single = _pts(points)
        out = np.asarray(self.func(pts), dtype=float).reshape(pts.shape[0], self.k, self.dim)
        return out[0] if single else out


# ---------------------------------------------------------------------------
# flat map and solvers


@dataclass
class FlatMatrix:
    matrix: np.ndarray  # (N, kN) or batched (m, N, kN)
    point: np.ndarray

    def apply(self, x) -> np.ndarray:
        """``flat(X)`` for a k-vector value given as ``(k, N)`` or flat."""
        x = np.asarray(x, dtype=float)
        if self.matrix.ndim == 3:
            return np.einsum("mij,mj->mi", self.matrix, x.reshape(x.shape[0], -1))
        return self.matrix @ x.reshape(-1)


def flat_matrix(forms, points) -> np.ndarray:
    """Stack ``[W_1^T | ... | W_k^T]`` of 2-forms at a batch of points."""
    return np.concatenate([np.swapaxes(W.tensor(points), -1, -2) for W in forms], axis=-1)


def assemble_flat(b: PhaseBundle, z) -> FlatMatrix:
    """Matrix of ``(X_1..X_k) -> sum_k i_{X_k} OmegaTheta^k`` at ``z``."""
    pts, single = _pts(z)
    B = flat_matrix(b.OmegaTheta, pts)
    return FlatMatrix(B[0] if single else B, np.asarray(z, dtype=float))


def d_theta(b: PhaseBundle, H: ScalarField, z) -> np.ndarray:
    """Covector ``dH - H theta`` at ``z``."""
    pts, single = _pts(z)
    grad = H.gradient(pts)
    th = b.theta.components(pts)
    out = grad - H(pts)[:, None] * th
    return out[0] if single else out


def _diagonal_basis(n: int, k: int) -> np.ndarray:
    """Columns parametrize the DARBOUX_DIAGONAL subspace: free base parts
    per kappa and one momentum vector shared by the diagonal blocks."""
    N = n + n * k
    M = np.zeros((k * N, N))
    for kappa in range(k):
        for i in range(n):
            M[kappa * N + i, kappa * n + i] = 1.0
            M[kappa * N + n + kappa * n + i, k * n + i] = 1.0
    return M


def solve_system(B, rhs, n: int, k: int, gauge: Gauge | str = Gauge.MIN_NORM) -> np.ndarray:
    """Select a solution of ``B x = rhs`` for a batch ``B (m, N, kN)``.

    MIN_NORM is the pseudo-inverse solution.  DARBOUX_DIAGONAL is the
    solution with zero off-diagonal momentum blocks and equal diagonal
    blocks; in Darboux-type charts it is the closed form of
    :func:`darboux_field`, and since it is cut out by linear conditions it
    is unchanged when ``B`` and ``rhs`` are scaled together.
    """
    gauge = Gauge.parse(gauge)
    B = np.asarray(B, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    m = B.shape[0]
    if gauge is Gauge.MIN_NORM:
        x = np.einsum("mij,mj->mi", np.linalg.pinv(B), rhs)
    else:
        M = _diagonal_basis(n, k)
        A = B @ M
        y = np.linalg.pinv(A) @ rhs[..., None]
        x = (M @ y)[..., 0]
    return x.reshape(m, k, -1)


def _darboux(b: PhaseBundle, B: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # closed form of the DARBOUX_DIAGONAL gauge for the canonical forms
    m = rhs.shape[0]
    n, k, N = b.n, b.k, b.dim
    X = np.zeros((m, k, N))
    for kappa in range(k):
        for i in range(n):
            X[:, kappa, i] = rhs[:, b.momentum_index(kappa, i)]
    R = np.einsum("mjc,mc->mj", B[:, :n, :], X.reshape(m, k * N)) - rhs[:, :n]
    for kappa in range(k):
        for j in range(n):
            X[:, kappa, b.momentum_index(kappa, j)] = R[:, j] / k
    return X


def solve_hdw(
    b: PhaseBundle,
    H: ScalarField,
    z,
    gauge: Gauge | str = Gauge.MIN_NORM,
    tol: float = SOLVE_TOL,
) -> np.ndarray:
    """Solve ``flat(X) = d_theta H`` at ``z``; returns ``(k, N)`` (or
    ``(m, k, N)`` for a batch of points)."""
    pts, single = _pts(z)
    B = assemble_flat(b, pts).matrix
    rhs = d_theta(b, H, pts)
    if Gauge.parse(gauge) is Gauge.DARBOUX_DIAGONAL:
        x = _darboux(b, B, rhs)
    else:
        x = solve_system(B, rhs, b.n, b.k, gauge)
    check_solution(B, rhs, x, pts, tol)
    return x[0] if single else x


def check_solution(B, rhs, x, pts, tol: float = SOLVE_TOL) -> np.ndarray:
    """Raise :class:`OutOfRange` where ``|B x - rhs|`` exceeds ``tol``
    (relative to ``max(1, |rhs|)``); returns the residuals."""
    res = np.abs(np.einsum("mij,mj->mi", B, x.reshape(len(pts), -1)) - rhs).max(axis=1)
    scale = np.maximum(1.0, np.abs(rhs).max(axis=1))
    worst = int(np.argmax(res / scale))
    if res[worst] > tol * scale[worst]:
        raise OutOfRange(float(res[worst]), pts[worst])
    return res


def hdw_residual(b: PhaseBundle, H: ScalarField, z, x) -> np.ndarray:
    """``|flat(X) - d_theta H|_inf`` per point."""
    pts, single = _pts(z)
    B = assemble_flat(b, pts).matrix
    xx = np.asarray(x, dtype=float).reshape(len(pts), -1)
    r = np.abs(np.einsum("mij,mj->mi", B, xx) - d_theta(b, H, pts)).max(axis=1)
    return r[0] if single else r


class HDWField(KVectorField):
    """HDW solution field evaluated pointwise in a fixed gauge."""

    def __init__(self, b: PhaseBundle, H: ScalarField, gauge: Gauge | str = Gauge.MIN_NORM):
        self.bundle = b
        self.H = H
        self.gauge = Gauge.parse(gauge)
        self.k = b.k
        self.dim = b.dim

    def values(self, points):
        return solve_hdw(self.bundle, self.H, points, self.gauge)


def darboux_field(b: PhaseBundle, H: ScalarField) -> ExpressionKVectorField:
    """The DARBOUX_DIAGONAL solution as expression trees (exact
    derivatives, fast batched evaluation)."""
    n, k, N = b.n, b.k, b.dim
    h = H.node
    rhs = [dsl.sub(dsl.partial(h, j), dsl.mul(h, b.theta.coefficient(j).node)) for j in range(N)]
    base = [[rhs[b.momentum_index(kappa, i)] for i in range(n)] for kappa in range(k)]
    R = []
    for j in range(n):
        acc = dsl.neg(rhs[j])
        for kappa, W in enumerate(b.OmegaTheta):
            for i in range(n):
                # contribution X^i W_ij of the base part to the dq^j row
                c = W.coefficient(i, j).node
                acc = dsl.add(acc, dsl.mul(base[kappa][i], c))
        R.append(dsl.div(acc, dsl.const(k)) if k > 1 else acc)
    fields = []
    for kappa in range(k):
        comps = [dsl.ZERO] * N
        for i in range(n):
            comps[i] = base[kappa][i]
            comps[b.momentum_index(kappa, i)] = R[i]
        fields.append(VectorField(tuple(comps), b.scope))
    return ExpressionKVectorField(fields)


def hdw_field(b: PhaseBundle, H: ScalarField, gauge: Gauge | str = Gauge.MIN_NORM) -> KVectorField:
    gauge = Gauge.parse(gauge)
    if gauge is Gauge.DARBOUX_DIAGONAL:
        return darboux_field(b, H)
    return HDWField(b, H, gauge)


def kernel_basis(b: PhaseBundle, z) -> np.ndarray:
    """Orthonormal basis (rows, length kN) of ker B(z)."""
    B = assemble_flat(b, np.asarray(z, dtype=float)).matrix
    _, s, vt = np.linalg.svd(B)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    return vt[rank:]


def integrability_defect(X: KVectorField, z) -> float:
    """``max_{kappa<lam} |[X_kappa, X_lam](z)|_inf``."""
    worst = 0.0
    for a in range(X.k):
        for c in range(a + 1, X.k):
            worst = max(worst, float(np.max(np.abs(X.bracket(a, c, z)))))
    return worst


# ---------------------------------------------------------------------------
# integral sections


@dataclass
class MultiTimeGrid:
    steps: tuple[int, ...]
    sizes: tuple[float, ...]
    order: tuple[int, ...]
    start: np.ndarray
    points: np.ndarray  # shape steps[0]+1, ..., steps[k-1]+1, N
    hdw_residual: float = float("nan")
    path_defect: float = float("nan")

    @property
    def k(self) -> int:
        return len(self.steps)

    def times(self) -> np.ndarray:
        """Multi-time coordinates matching ``flat()`` rows, shape (M, k)."""
        axes = [np.arange(s + 1) * h for s, h in zip(self.steps, self.sizes)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1, self.points.shape[-1])

    def to_csv(self, header: Sequence[str]) -> str:
        t = self.times()
        rows = [",".join([f"t{i + 1}" for i in range(self.k)] + list(header))]
        for ti, zi in zip(t, self.flat()):
            rows.append(",".join(repr(float(v)) for v in np.concatenate([ti, zi])))
        return "\n".join(rows) + "\n"


def _rk4_increment(f, z, h):
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _sweep(X: KVectorField, start, steps, sizes, order, inside) -> np.ndarray:
    k = len(steps)
    N = len(start)
    G = np.full(tuple(s + 1 for s in steps) + (N,), np.nan)
    G[(0,) * k] = start
    done: list[int] = []
    for a in order:
        def index(s):
            return tuple(slice(None) if ax in done else (s if ax == a else 0) for ax in range(k))

        cur = G[index(0)]
        shape = cur.shape
        z = cur.reshape(-1, N)
        f = lambda pts, a=a: X.component(a, pts)  # noqa: E731
        carry = np.zeros_like(z)  # Kahan compensation for the state update
        for s in range(1, steps[a] + 1):
            try:
                inc = _rk4_increment(f, z, sizes[a]) - carry
                nz = z + inc
                carry = (nz - z) - inc
                z = nz
            except DomainError:
                raise DomainEscape(_partial(G, steps, sizes, order, start), _escape_index(index(s)))
            if inside is not None and not np.all(inside(z)):
                G[index(s)] = z.reshape(shape)
                raise DomainEscape(_partial(G, steps, sizes, order, start), _escape_index(index(s)))
            G[index(s)] = z.reshape(shape)
        done.append(a)
    return G


def _escape_index(idx):
    return tuple(-1 if isinstance(i, slice) else i for i in idx)


def _partial(G, steps, sizes, order, start):
    return MultiTimeGrid(tuple(steps), tuple(sizes), tuple(order), np.asarray(start), G)


def grid_derivative(G: np.ndarray, axis: int, h: float) -> tuple[np.ndarray, tuple]:
    """Central difference along ``axis`` on the interior of the grid.

    Uses the five-point stencil where the axis has at least five nodes,
    the three-point one otherwise.  Returns the derivative and the slice it
    refers to along ``axis``."""
    n = G.shape[axis]
    def sl(a, b):
        idx = [slice(None)] * G.ndim
        idx[axis] = slice(a, n + b if b <= 0 else b)
        return tuple(idx)
    if n >= 5:
        d = (-G[sl(4, 0)] + 8 * G[sl(3, -1)] - 8 * G[sl(1, -3)] + G[sl(0, -4)]) / (12 * h)
        return d, sl(2, -2)
    if n >= 3:
        d = (G[sl(2, 0)] - G[sl(0, -2)]) / (2 * h)
        return d, sl(1, -1)
    return np.empty((0,)), sl(0, 0)


def section_residual(X: KVectorField, grid: MultiTimeGrid) -> float:
    """``max |d phi / d t^kappa - X_kappa(phi)|`` over the grid interior."""
    G = grid.points
    N = G.shape[-1]
    worst = 0.0
    for kappa in range(grid.k):
        d, idx = grid_derivative(G, kappa, grid.sizes[kappa])
        if d.size == 0:
            continue
        z = G[idx].reshape(-1, N)
        diff = d.reshape(-1, N) - X.component(kappa, z)
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst


def parse_grid(spec: str | Sequence, k: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """``"steps@h,steps@h"`` (one entry per axis, or one entry for all)."""
    if isinstance(spec, str):
        items = [s.strip() for s in spec.split(",") if s.strip()]
        pairs = []
        for it in items:
            if "@" not in it:
                raise ValueError(f"grid axis {it!r} must look like 'steps@h'")
            s, h = it.split("@", 1)
            pairs.append((int(s), float(h)))
    else:
        pairs = [(int(s), float(h)) for s, h in spec]
    if len(pairs) == 1:
        pairs = pairs * k
    if len(pairs) != k:
        raise ValueError(f"grid has {len(pairs)} axes, expected {k}")
    if any(s < 1 or h <= 0 for s, h in pairs):
        raise ValueError("grid steps and sizes must be positive")
    return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)


def integrate_section(
    X: KVectorField,
    start,
    steps: Sequence[int],
    sizes: Sequence[float],
    order: Sequence[int] | None = None,
    domain: Domain | None = None,
    check_path: bool = True,
) -> MultiTimeGrid:
    """Integral section through ``start`` by ordered RK4 axis sweeps.

    ``domain`` (base box) triggers :class:`DomainEscape` when a trajectory
    leaves it.  With ``check_path`` the sweep is repeated in reversed axis
    order and the largest pointwise distance is stored as ``path_defect``.
    """
    k = X.k
    steps = tuple(int(s) for s in steps)
    sizes = tuple(float(h) for h in sizes)
    if len(steps) != k or len(sizes) != k:
        raise ValueError(f"grid needs {k} axes")
    if any(s < 1 for s in steps) or any(h <= 0 for h in sizes):
        raise ValueError("grid steps and sizes must be positive")
    order = tuple(order) if order is not None else tuple(range(k))
    if sorted(order) != list(range(k)):
        raise ValueError(f"order {order} is not a permutation of the axes")
    start = np.asarray(start, dtype=float)
    inside = None
    if domain is not None:
        n = len(domain.bounds)
        inside = lambda z: domain.contains(z[:, :n])  # noqa: E731
    G = _sweep(X, start, steps, sizes, order, inside)
    grid = MultiTimeGrid(steps, sizes, order, start, G)
    grid.hdw_residual = section_residual(X, grid)
    if check_path:
        rev = tuple(reversed(order))
        if rev == order:
            grid.path_defect = 0.0
        else:
            G2 = _sweep(X, start, steps, sizes, rev, inside)
            grid.path_defect = float(np.max(np.linalg.norm(G - G2, axis=-1)))
    return grid
