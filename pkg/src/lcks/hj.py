"""Hamilton-Jacobi theory on the phase bundle.

A section is a family of k one-forms on the base, seen as the map
``q -> (q, gamma^1(q), ..., gamma^k(q))``.  The functions here measure the
three equivalent conditions of the HJ theorem for a given HDW field:

1. lifts ``gamma o sigma`` of integral sections of ``X^gamma`` are integral
   sections of an HDW field,
2. ``X o gamma - T gamma (X^gamma)`` lies in the kernel of the flat map,
3. ``d_vartheta (H o gamma) = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dsl
from .dsl import DomainError
from .forms import ChartMap, FormField, ScalarField, lichnerowicz_derivative, pullback
from .hdw import (
    CallableKVectorField,
    DomainEscape,
    KVectorField,
    assemble_flat,
    d_theta,
    grid_derivative,
    hdw_residual,
    integrability_defect,
    integrate_section,
)
from .structures import PhaseBundle

ALGEBRAIC_TOL = 1e-8
INTEGRATION_TOL = 1e-6


class PreconditionFailed(ValueError):
    def __init__(self, hypothesis: str, residual: float):
        self.hypothesis = hypothesis
        self.residual = residual
        super().__init__(f"precondition '{hypothesis}' failed (residual {residual:.3e})")


@dataclass(frozen=True, eq=False)
class Section:
    """``gamma = (gamma^1, ..., gamma^k)``, each a 1-form on the base."""

    forms: tuple[FormField, ...]
    bundle: PhaseBundle

    def __post_init__(self):
        b = self.bundle
        if len(self.forms) != b.k:
            raise ValueError(f"section needs {b.k} one-forms, got {len(self.forms)}")
        for f in self.forms:
            if f.degree != 1 or f.scope != b.base:
                raise ValueError("section components must be 1-forms on the base chart")

    @classmethod
    def parse(cls, b: PhaseBundle, sources: Sequence[Sequence[str]]) -> "Section":
        return cls(tuple(FormField.parse_one_form(row, b.base) for row in sources), b)

    @property
    def k(self) -> int:
        return len(self.forms)

    @property
    def chart_map(self) -> ChartMap:
        b = self.bundle
        comps = [dsl.Var(nm, i) for i, nm in enumerate(b.base.names)]
        for f in self.forms:
            comps += [f.coefficient(i).node for i in range(b.n)]
        return ChartMap(b.base, b.scope, tuple(comps))

    def __call__(self, q) -> np.ndarray:
        try:
            return self.chart_map(q)
        except DomainError as exc:
            raise DomainEscape(None, ()) from exc

    def jacobian(self, q) -> np.ndarray:
        return self.chart_map.jacobian(q)

    def to_sources(self) -> list[list[str]]:
        return [[dsl.to_source(f.coefficient(i).node) for i in range(self.bundle.n)] for f in self.forms]


def _pts(q):
    q = np.asarray(q, dtype=float)
    return (q[None, :], True) if q.ndim == 1 else (q, False)


def section_closedness(gamma: Section, vartheta: FormField, points) -> float:
    """``max_k |d_vartheta gamma^k|`` over ``points``."""
    pts, _ = _pts(points)
    worst = 0.0
    for f in gamma.forms:
        worst = max(worst, lichnerowicz_derivative(f, vartheta).max_abs(pts))
    return worst


def project_field(X: KVectorField, gamma: Section, q) -> np.ndarray:
    """Base components of ``X_k`` at ``gamma(q)``: shape ``(k, n)`` (or
    ``(m, k, n)`` for a batch)."""
    pts, single = _pts(q)
    n = gamma.bundle.n
    out = X.values(gamma(pts))[..., :n]
    return out[0] if single else out


def projected_field(X: KVectorField, gamma: Section) -> KVectorField:
    """``X^gamma`` as a k-vector field on the base."""
    n = gamma.bundle.n
    return CallableKVectorField(lambda q: project_field(X, gamma, q), X.k, n)


def composed_hamiltonian(H: ScalarField, gamma: Section) -> ScalarField:
    return H.compose(gamma.chart_map)


def hj_covector(H: ScalarField, gamma: Section, vartheta: FormField, points) -> np.ndarray:
    """``d(H o gamma) - (H o gamma) vartheta`` per point, shape ``(m, n)``."""
    pts, _ = _pts(points)
    Hg = composed_hamiltonian(H, gamma)
    return Hg.gradient(pts) - Hg(pts)[:, None] * vartheta.components(pts)


def pullback_identity_gap(H: ScalarField, gamma: Section, points) -> float:
    """``max |d_vartheta(H o gamma) - gamma^*(d_theta H)|``."""
    pts, _ = _pts(points)
    b = gamma.bundle
    lhs = hj_covector(H, gamma, b.vartheta, pts)
    rhs = np.einsum("ma,maj->mj", d_theta(b, H, gamma(pts)), gamma.jacobian(pts))
    return float(np.max(np.abs(lhs - rhs)))


def hj_residual(H: ScalarField, gamma: Section, vartheta: FormField, points) -> float:
    pts, _ = _pts(points)
    return float(np.max(np.abs(hj_covector(H, gamma, vartheta, pts))))


def vertical_defect(X: KVectorField, gamma: Section, points) -> np.ndarray:
    """``D_k = X_k o gamma - T gamma (X^gamma_k)``, shape ``(m, k, N)``."""
    pts, _ = _pts(points)
    n = gamma.bundle.n
    Xg = X.values(gamma(pts))
    J = gamma.jacobian(pts)  # (m, N, n)
    lifted = np.einsum("maj,mkj->mka", J, Xg[..., :n])
    return Xg - lifted


def relatedness_defect(b: PhaseBundle, X: KVectorField, gamma: Section, points) -> tuple[float, float]:
    """``(max |flat(D)|, max |base part of D|)``."""
    pts, _ = _pts(points)
    D = vertical_defect(X, gamma, pts)
    B = assemble_flat(b, gamma(pts)).matrix
    flat = np.einsum("mij,mj->mi", B, D.reshape(len(pts), -1))
    return float(np.max(np.abs(flat))), float(np.max(np.abs(D[..., : b.n])))


def lemma_gap(b: PhaseBundle, x, gamma: Section, y, q) -> tuple[float, float]:
    """Compare ``gamma^*(sum i_{X_k} W^k)`` with ``sum i_{Y_k} gamma^* W^k``
    at base point ``q``, for a k-vector value ``x`` at ``gamma(q)`` and a
    base k-vector value ``y``.  Returns ``(gap, |flat(x - T gamma y)|)``."""
    q = np.asarray(q, dtype=float)
    x = np.asarray(x, dtype=float).reshape(b.k, b.dim)
    y = np.asarray(y, dtype=float).reshape(b.k, b.n)
    z = gamma(q)
    J = gamma.jacobian(q)
    B = assemble_flat(b, z).matrix
    lhs = J.T @ (B @ x.reshape(-1))
    rhs = np.zeros(b.n)
    for kappa, W in enumerate(b.OmegaTheta):
        T = pullback(gamma.chart_map, W).tensor(q)
        rhs += T.T @ y[kappa]
    d = x - np.einsum("aj,kj->ka", J, y)
    return float(np.max(np.abs(lhs - rhs))), float(np.max(np.abs(B @ d.reshape(-1))))


def lift_residual(b: PhaseBundle, H: ScalarField, gamma: Section, grid) -> float:
    """HDW residual ``|flat(d phi) - d_theta H(phi)|`` of ``phi = gamma o
    sigma`` where ``sigma`` is a base grid; derivatives by central
    differences on the grid interior."""
    G = gamma(grid.points.reshape(-1, b.n)).reshape(grid.points.shape[:-1] + (b.dim,))
    k = grid.k
    derivs = [grid_derivative(G, kappa, grid.sizes[kappa]) for kappa in range(k)]
    if any(d.size == 0 for d, _ in derivs):
        return float("nan")
    # restrict every derivative to the interior common to all axes
    common = tuple(sl[kappa] for kappa, (_, sl) in enumerate(derivs))
    parts = []
    for kappa, (d, _) in enumerate(derivs):
        sel = tuple(slice(None) if ax == kappa else common[ax] for ax in range(k))
        parts.append(d[sel].reshape(-1, b.dim))
    z = G[common].reshape(-1, b.dim)
    x = np.stack(parts, axis=1)
    return float(np.max(hdw_residual(b, H, z, x)))


@dataclass
class HJReport:
    closedness: float
    hj: float
    relatedness: float
    verticality: float
    lift: float
    pullback_identity_gap: float
    solver_residual: float
    integrability_defect: float
    tol: float
    integration_tol: float
    conditions: dict = field(init=False)
    verdict: str = field(init=False)

    def __post_init__(self):
        self.conditions = {
            "lift": bool(self.lift < self.integration_tol),
            "relatedness": bool(self.relatedness < self.tol),
            "hj": bool(self.hj < self.tol),
        }
        vals = set(self.conditions.values())
        self.verdict = "PASS" if len(vals) == 1 else "VIOLATION"

    @property
    def co_vanish(self) -> bool:
        return all(self.conditions.values())

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "conditions": dict(self.conditions),
            "closedness": self.closedness,
            "hj_residual": self.hj,
            "relatedness_defect": self.relatedness,
            "verticality": self.verticality,
            "lift_residual": self.lift,
            "pullback_identity_gap": self.pullback_identity_gap,
            "solver_residual": self.solver_residual,
            "integrability_defect": self.integrability_defect,
            "tolerance": self.tol,
            "integration_tolerance": self.integration_tol,
        }


def verify_hj_theorem(
    b: PhaseBundle,
    H: ScalarField,
    X: KVectorField,
    gamma: Section,
    points,
    start,
    steps: Sequence[int],
    sizes: Sequence[float],
    tol: float = ALGEBRAIC_TOL,
    integration_tol: float = INTEGRATION_TOL,
) -> HJReport:
    """Measure all three HJ conditions for ``gamma`` and the HDW field
    ``X``.  Condition (1) is tested on one base grid started at ``start``.
    """
    pts, _ = _pts(points)
    z = gamma(pts)
    solver = float(np.max(hdw_residual(b, H, z, X.values(z))))
    if solver > tol:
        raise PreconditionFailed("X solves the HDW equation", solver)
    closed = section_closedness(gamma, b.vartheta, pts)
    if closed > tol:
        raise PreconditionFailed("gamma is d_vartheta-closed", closed)
    hj = hj_residual(H, gamma, b.vartheta, pts)
    gap = pullback_identity_gap(H, gamma, pts)
    rel, vert = relatedness_defect(b, X, gamma, pts)
    start = np.asarray(start, dtype=float)
    Xg = projected_field(X, gamma)
    grid = integrate_section(Xg, start, steps, sizes, domain=b.domain, check_path=False)
    lift = lift_residual(b, H, gamma, grid)
    integ = integrability_defect(X, gamma(start))
    return HJReport(closed, hj, rel, vert, lift, gap, solver, integ, tol, integration_tol)
