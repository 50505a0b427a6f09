"""End-to-end runs of the punctured-plane problem (used by ``demo``)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsl
from .atlas import cocycle_defect, glue_invariance, localize, sample_patch
from .forms import FormField, exterior_derivative, lichnerowicz_derivative, wedge
from .hdw import (
    DomainEscape,
    darboux_field,
    integrate_section,
    kernel_basis,
    solve_hdw,
)
from .hj import Section, verify_hj_theorem
from .problems import NEGATIVE_SECTION, Problem, punctured_plane
from .structures import verify_structure


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    relation: str = "<"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "relation": self.relation,
            "threshold": self.threshold,
            "passed": self.passed,
        }


def below(name, value, threshold) -> Check:
    return Check(name, float(value), float(threshold), bool(value < threshold), "<")


def above(name, value, threshold) -> Check:
    return Check(name, float(value), float(threshold), bool(value > threshold), ">")


def equal(name, value, target) -> Check:
    return Check(name, float(value), float(target), bool(value == target), "==")


def trace_formulas(z: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form trace sums of the momentum components for the free
    Hamiltonian on the punctured plane."""
    x, y = z[:, 0], z[:, 1]
    r2 = x**2 + y**2
    C = np.zeros(len(z))
    D = np.zeros(len(z))
    for kappa in range(k):
        px, py = z[:, 2 + 2 * kappa], z[:, 3 + 2 * kappa]
        C += (y * (py**2 - px**2) + 2 * x * px * py) / r2
        D += (x * (py**2 - px**2) - 2 * y * px * py) / r2
    return C, D


def energy_drift(problem: Problem, h: float, T: float = 1.0, patch: str = "polar") -> float:
    """``max |e^{-sigma} H - (e^{-sigma} H)(0)|`` along the k=1 trajectory
    from the problem's start point (``sigma`` from the named patch)."""
    b, H = problem.bundle, problem.H
    p = problem.atlas.patch(patch)
    sigma = p.sigma_reference(b.base)
    steps = int(round(T / h))
    grid = integrate_section(darboux_field(b, H), problem.start(), [steps], [h], check_path=False)
    z = grid.flat()
    if not np.all(p.contains(z[:, : b.n])):
        raise DomainEscape(grid, (int(np.argmin(p.contains(z[:, : b.n]))),))
    e = np.exp(-sigma(z[:, : b.n])) * H(z)
    return float(np.max(np.abs(e - e[0])))


def run_punctured_plane(k: int = 1, points: int = 100, seed: int = 42) -> list[Check]:
    spec = punctured_plane(k)
    spec.seed = seed
    problem = spec.build()
    b, H = problem.bundle, problem.H
    rng = np.random.default_rng(seed)
    checks: list[Check] = []

    z = b.sample(rng, points)
    rep = verify_structure(b, z)
    checks.append(below("axiom (i) residual", rep.axiom_i.max(), 1e-8))
    checks.append(equal("axiom (ii) joint kernel dim", rep.kernel_dim.max(), 0))
    checks.append(below("axiom (iii) max |W(V,V)|", rep.axiom_iii.max(), 1e-12))
    checks.append(equal("single-form kernel dim", rep.form_kernel_dims.max(), b.n * (k - 1)))

    # d_theta squared on a handful of random forms and on theta itself
    rnd = FormField.one_form([dsl.parse("x*y + sin(x)", b.base), dsl.parse("exp(y)", b.base)], b.base)
    lee = b.vartheta
    dd = lichnerowicz_derivative(lichnerowicz_derivative(rnd, lee), lee)
    q = z[:, : b.n]
    checks.append(below("d_theta^2 on a 1-form", (dd + wedge(exterior_derivative(lee), rnd)).max_abs(q), 1e-8))

    X = solve_hdw(b, H, z, problem.gauge)
    base_err = max(
        float(np.max(np.abs(X[:, c, : b.n] - z[:, b.momentum_index(c, 0) : b.momentum_index(c, 0) + b.n])))
        for c in range(k)
    )
    checks.append(below("HDW base components vs momenta", base_err, 1e-9))
    C, D = trace_formulas(z, k)
    tr = np.zeros((len(z), b.n))
    for c in range(k):
        tr += X[:, c, b.momentum_index(c, 0) : b.momentum_index(c, 0) + b.n]
    checks.append(below("HDW trace sums vs formulas", np.max(np.abs(tr - np.stack([C, D], 1))), 1e-7))
    kd = max(len(kernel_basis(b, zi)) for zi in z[:10])
    checks.append(equal("flat-map kernel dim", kd, b.n * (k * k - 1)))

    if k == 1:
        d1 = energy_drift(problem, 1e-3)
        d2 = energy_drift(problem, 5e-4)
        checks.append(below("conformal energy drift (h=1e-3)", d1, 1e-6))
        checks.append(above("drift ratio on halving h", d1 / d2 if d2 > 0 else np.inf, 8.0))

    qs = z[:, : b.n]
    qs = qs[np.abs(np.arctan2(qs[:, 1], qs[:, 0])) < 2.5]
    steps, sizes = problem.grid(spec.solver.hj_grid)
    Xf = darboux_field(b, H)
    pos = verify_hj_theorem(b, H, Xf, problem.section, qs, problem.hj_start(), steps, sizes)
    checks.append(below("HJ positive: closedness", pos.closedness, 1e-7))
    checks.append(below("HJ positive: hj residual", pos.hj, 1e-7))
    checks.append(below("HJ positive: relatedness", pos.relatedness, 1e-7))
    checks.append(below("HJ positive: lift residual", pos.lift, 1e-6))
    checks.append(equal("HJ positive: verdict PASS", pos.verdict == "PASS", 1))
    if k == 1:
        neg = Section.parse(b, NEGATIVE_SECTION)
        nr = verify_hj_theorem(b, H, Xf, neg, qs, np.array([1.0, 0.5]), steps, sizes)
        checks.append(below("HJ negative: closedness", nr.closedness, 1e-8))
        checks.append(above("HJ negative: hj residual", nr.hj, 1e-2))
        checks.append(above("HJ negative: relatedness", nr.relatedness, 1e-3))
        checks.append(above("HJ negative: lift residual", nr.lift, 1e-3))
        checks.append(equal("HJ negative: verdict PASS", nr.verdict == "PASS", 1))

    polar = problem.atlas.patch("polar")
    loc = localize(b, H, polar, seed=seed)
    checks.append(below("local form closedness", loc.closedness, 1e-8))
    angular = type(problem.atlas)(
        tuple(p for p in problem.atlas.patches if p.is_reference), b.base, b.domain
    )
    checks.append(below("cocycle defect (3 patches)", cocycle_defect(angular, seed).defect, 1e-12))
    zp = sample_patch(b, polar, points, rng)
    glue = glue_invariance(b, H, polar, zp, problem.gauge)
    checks.append(below("global vs local HDW solution", glue.local_vs_global, 1e-8))
    checks.append(below("polar vs Cartesian solution", glue.cross_coordinate, 1e-7))
    return checks


def format_table(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'check'.ljust(width)}  {'value':>12}  {'bound':>12}  status"]
    for c in checks:
        bound = f"{c.relation} {c.threshold:.0e}" if c.relation != "==" else f"== {c.threshold:g}"
        lines.append(
            f"{c.name.ljust(width)}  {c.value:12.3e}  {bound:>12}  {'PASS' if c.passed else 'FAIL'}"
        )
    return "\n".join(lines)
