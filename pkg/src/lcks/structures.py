"""The phase bundle T*_{k,theta}Q and its structure checks.

Coordinates are ordered ``(q^1..q^n, p^1_1..p^1_n, ..., p^k_1..p^k_n)``.
The canonical forms are

    Theta^k      = p^k_i dq^i
    Omega^k      = dq^i ^ dp^k_i         (= -d Theta^k)
    OmegaTheta^k = Omega^k + theta ^ Theta^k

with ``theta`` the pullback of a closed base form ``vartheta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsl
from .dsl import VariableScope
from .forms import (
    FormField,
    ScalarField,
    exterior_derivative,
    lichnerowicz_derivative,
    wedge,
)

RANK_RTOL = 1e-10


class StructureError(ValueError):
    pass


class NotClosed(StructureError):
    def __init__(self, residual: float, point):
        self.residual = residual
        self.point = np.asarray(point)
        super().__init__(
            f"vartheta is not closed: |d vartheta| = {residual:.3e} at {self.point.tolist()}"
        )


class Inconsistent(StructureError):
    pass


def base_scope(n: int, names=None) -> VariableScope:
    names = tuple(names) if names else tuple(f"q{i + 1}" for i in range(n))
    if len(names) != n:
        raise ValueError(f"expected {n} base coordinate names, got {len(names)}")
    return VariableScope(names)


def phase_scope(base: VariableScope, k: int) -> VariableScope:
    """Phase chart scope.  Momenta are ``p_<kappa>_<i>`` for default base
    names ``q<i>`` and ``p_<kappa>_<name>`` otherwise; for ``k == 1`` the
    short spelling ``p<name>`` is accepted as an alias."""
    n = len(base)
    default = all(nm == f"q{i + 1}" for i, nm in enumerate(base.names))
    momenta = []
    aliases = []
    for kappa in range(k):
        for i, nm in enumerate(base.names):
            suffix = str(i + 1) if default else nm
            momenta.append(f"p_{kappa + 1}_{suffix}")
            if k == 1:
                aliases.append((f"p{nm}", n + i))
    names = base.names + tuple(momenta)
    aliases = tuple(a for a in aliases if a[0] not in names)
    return VariableScope(names, aliases)


def lift_to(form: FormField, scope: VariableScope) -> FormField:
    """Reinterpret a base form on the phase chart (the base coordinates are
    the leading coordinates of the phase chart, so trees carry over)."""
    n = form.dim
    if scope.names[:n] != form.scope.names:
        raise StructureError("phase chart does not extend the base chart")
    return FormField(form.degree, scope, dict(form.coeffs))


@dataclass(frozen=True)
class Domain:
    """Sampling box for the base (with an optional hole around the origin)
    and a bound on momentum components."""

    bounds: tuple[tuple[float, float], ...]
    min_radius: float = 0.0
    momentum_bound: float = 10.0

    def contains(self, q) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        ok = np.ones(q.shape[0], dtype=bool)
        for j, (lo, hi) in enumerate(self.bounds):
            ok &= (q[:, j] >= lo) & (q[:, j] <= hi)
        if self.min_radius > 0:
            ok &= np.linalg.norm(q, axis=1) >= self.min_radius
        return ok

    def sample_base(self, rng: np.random.Generator, m: int) -> np.ndarray:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        out = []
        count = 0
        while count < m:
            cand = rng.uniform(lo, hi, size=(max(2 * m, 16), len(lo)))
            cand = cand[self.contains(cand)]
            out.append(cand)
            count += len(cand)
        return np.concatenate(out)[:m]

    def sample_phase(self, rng: np.random.Generator, m: int, k: int) -> np.ndarray:
        q = self.sample_base(rng, m)
        p = rng.uniform(-self.momentum_bound, self.momentum_bound, size=(m, q.shape[1] * k))
        return np.hstack([q, p])


@dataclass(frozen=True, eq=False)
class PhaseBundle:
    n: int
    k: int
    base: VariableScope
    scope: VariableScope
    vartheta: FormField
    theta: FormField
    Theta: tuple[FormField, ...]
    Omega: tuple[FormField, ...]
    OmegaTheta: tuple[FormField, ...]
    domain: Domain | None = None

    @property
    def dim(self) -> int:
        return self.n + self.n * self.k

    def momentum_index(self, kappa: int, i: int) -> int:
        """Chart index of ``p^kappa_i`` (both 0-based)."""
        return self.n + kappa * self.n + i

    @property
    def vertical(self) -> np.ndarray:
        """Basis of V (rows), the momentum coordinate directions."""
        return np.eye(self.dim)[self.n :]

    def scalar(self, source: str) -> ScalarField:
        return ScalarField.parse(source, self.scope)

    def project(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float)[..., : self.n]

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        if self.domain is None:
            raise StructureError("bundle has no sampling domain")
        return self.domain.sample_phase(rng, m, self.k)


def _closed_residual(vartheta: FormField, points) -> tuple[float, np.ndarray]:
    d = exterior_derivative(vartheta)
    if d.is_structurally_zero():
        return 0.0, np.asarray(points)[0]
    vals = np.abs(d.components(points))
    per_point = vals.max(axis=1) if vals.size else np.zeros(len(points))
    worst = int(np.argmax(per_point))
    return float(per_point[worst]), np.asarray(points)[worst]


def build_phase_bundle(
    n: int,
    k: int,
    vartheta: FormField,
    domain: Domain | None = None,
    *,
    samples: int = 200,
    seed: int = 42,
    tol: float = 1e-8,
) -> PhaseBundle:
    """Assemble T*_{k,theta}Q from the base Lee form ``vartheta``.

    Closedness of ``vartheta`` is checked at ``samples`` seeded points of
    ``domain`` (or of the unit box when no domain is given).
    """
    if n < 1 or k < 1:
        raise ValueError("n and k must be positive")
    if vartheta.degree != 1 or vartheta.dim != n:
        raise StructureError(f"vartheta must be a 1-form on an {n}-dimensional chart")
    rng = np.random.default_rng(seed)
    dom = domain or Domain(tuple((-1.0, 1.0) for _ in range(n)))
    res, worst = _closed_residual(vartheta, dom.sample_base(rng, samples))
    if res > tol:
        raise NotClosed(res, worst)

    scope = phase_scope(vartheta.scope, k)
    theta = lift_to(vartheta, scope)
    Theta, Omega, OmegaTheta = [], [], []
    for kappa in range(k):
        pidx = [n + kappa * n + i for i in range(n)]
        Th = FormField(1, scope, {(i,): dsl.Var(scope.names[p], p) for i, p in enumerate(pidx)})
        Om = FormField(2, scope, {(i, p): 1.0 for i, p in enumerate(pidx)})
        Theta.append(Th)
        Omega.append(Om)
        OmegaTheta.append(Om + wedge(theta, Th))
    return PhaseBundle(
        n=n,
        k=k,
        base=vartheta.scope,
        scope=scope,
        vartheta=vartheta,
        theta=theta,
        Theta=tuple(Theta),
        Omega=tuple(Omega),
        OmegaTheta=tuple(OmegaTheta),
        domain=domain,
    )


def numerical_rank(mat: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    s = np.linalg.svd(mat, compute_uv=False)
    top = s[..., :1]
    return np.sum(s > rtol * np.where(top > 0, top, 1.0), axis=-1)


@dataclass
class StructureReport:
    points: np.ndarray
    tol: float
    axiom_i: np.ndarray  # per point, max over kappa of |dW - theta ^ W|
    kernel_dim: np.ndarray  # per point, dim of the joint kernel
    axiom_iii: np.ndarray  # per point, max |W(v, w)| over vertical basis
    form_kernel_dims: np.ndarray  # (points, k)
    semi_basic: float
    literal_formula_residual: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(
            np.all(self.axiom_i < self.tol)
            and np.all(self.kernel_dim == 0)
            and np.all(self.axiom_iii < self.tol)
        )

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tol,
            "points": int(len(self.points)),
            "axiom_i_max": float(np.max(self.axiom_i)),
            "axiom_ii_kernel_dim_max": int(np.max(self.kernel_dim)),
            "axiom_iii_max": float(np.max(self.axiom_iii)),
            "single_form_kernel_dims": sorted({int(d) for d in self.form_kernel_dims.ravel()}),
            "semi_basic_max": self.semi_basic,
            "literal_formula_residual": self.literal_formula_residual,
        }


def _literal_formula(b: PhaseBundle, kappa: int) -> FormField:
    # vartheta_i p^k_j dq^i ^ dq^j summed over all i, j
    terms = []
    for (i,), c in b.theta.coeffs.items():
        for j in range(b.n):
            p = b.momentum_index(kappa, j)
            terms.append(((i, j), dsl.mul(c, dsl.Var(b.scope.names[p], p))))
    return b.Omega[kappa] + FormField(2, b.scope, terms)


def verify_structure(b: PhaseBundle, points, tol: float = 1e-8) -> StructureReport:
    """Check the three l.c.k-s. axioms at each sample point."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m, N = pts.shape
    ax1 = np.zeros(m)
    lit = 0.0
    mats = []
    for kappa, W in enumerate(b.OmegaTheta):
        r = exterior_derivative(W) - wedge(b.theta, W)
        if not r.is_structurally_zero():
            ax1 = np.maximum(ax1, np.abs(r.components(pts)).max(axis=1))
        mats.append(W.tensor(pts))
        lit = max(lit, (W - _literal_formula(b, kappa)).max_abs(pts))
    stacked = np.concatenate(mats, axis=1)  # (m, kN, N)
    kernel = N - numerical_rank(stacked)
    single = np.stack([N - numerical_rank(T) for T in mats], axis=1)
    V = b.vertical
    ax3 = np.zeros(m)
    for T in mats:
        vv = np.einsum("ai,mij,bj->mab", V, T, V)
        ax3 = np.maximum(ax3, np.abs(vv).reshape(m, -1).max(axis=1))
    semi = 0.0
    for (i,), c in b.theta.coeffs.items():
        if i >= b.n:
            semi = max(semi, float(np.max(np.abs(dsl.evaluate(c, pts)))))
    return StructureReport(pts, tol, ax1, kernel, ax3, single, semi, lit)


def conformal_rescale(b: PhaseBundle, sigma: ScalarField) -> list[FormField]:
    """The forms ``exp(-sigma) * OmegaTheta^k``."""
    node = sigma.node
    if sigma.scope != b.scope:
        if b.scope.names[: len(sigma.scope)] != sigma.scope.names:
            raise StructureError("sigma must live on the base or the phase chart")
    factor = dsl.call("exp", dsl.neg(node))
    return [W.scale(factor) for W in b.OmegaTheta]


@dataclass
class LiouvilleResult:
    Z: np.ndarray  # (k, N)
    residuals: np.ndarray  # (k,)
    exact: np.ndarray  # (k,) bool, Omega^k = d_theta Upsilon^k at the point
    contractions: np.ndarray  # (k,) i_Z Upsilon, nan where not exact


def liouville_fields(
    b: PhaseBundle, upsilon: list[FormField], point, tol: float = 1e-9
) -> LiouvilleResult:
    """Minimum-norm solutions of ``i_{Z_k} OmegaTheta^k = Upsilon^k`` at
    ``point`` (one least-squares solve per kappa)."""
    if len(upsilon) != b.k:
        raise ValueError(f"expected {b.k} one-forms, got {len(upsilon)}")
    z = np.asarray(point, dtype=float)
    Z = np.zeros((b.k, b.dim))
    res = np.zeros(b.k)
    exact = np.zeros(b.k, dtype=bool)
    contr = np.full(b.k, np.nan)
    for kappa, (W, U) in enumerate(zip(b.OmegaTheta, upsilon)):
        A = W.tensor(z).T  # covector (i_Z W)_j = Z^i W_ij
        u = U.components(z)
        sol = np.linalg.pinv(A) @ u
        r = float(np.max(np.abs(A @ sol - u)))
        if r > tol:
            raise Inconsistent(
                f"Upsilon^{kappa + 1} is not in the range of the contraction map (residual {r:.3e})"
            )
        Z[kappa], res[kappa] = sol, r
        gap = (lichnerowicz_derivative(U, b.theta) - W).max_abs(z)
        exact[kappa] = gap < tol
        if exact[kappa]:
            contr[kappa] = float(u @ sol)
    return LiouvilleResult(Z, res, exact, contr)
