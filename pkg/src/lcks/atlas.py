"""Conformal atlases: patches carrying local conformal factors, the
transition cocycle, localization of the global structure and the check
that local and global HDW dynamics agree."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dsl
from .dsl import VariableScope
from .forms import ChartMap, FormField, ScalarField, exterior_derivative, pullback
from .hdw import Gauge, check_solution, flat_matrix, solve_system
from .structures import Domain, PhaseBundle, StructureError, phase_scope

DEFAULT_BUDGET = 500
TWO_PI = 2.0 * np.pi


class EmptyOverlap(StructureError):
    pass


class NotExactOnPatch(StructureError):
    def __init__(self, patch: str, residual: float):
        self.patch = patch
        self.residual = residual
        super().__init__(f"theta - d sigma on patch {patch!r} has residual {residual:.3e}")


@dataclass(frozen=True, eq=False)
class ChartPatch:
    """Patch of the base described in reference coordinates.

    ``kind`` is ``"box"`` (one ``(lo, hi)`` pair per reference coordinate)
    or ``"sector"`` (``(phi_lo, phi_hi)`` with optional ``(r_lo, r_hi)``,
    angles measured with ``atan2`` on the first two coordinates).  ``sigma``
    lives on the patch's own base chart; for patches in other coordinates
    ``to_reference`` maps patch to reference coordinates and
    ``from_reference`` is its inverse on the patch.
    """

    name: str
    kind: str
    bounds: tuple
    sigma: ScalarField
    to_reference: ChartMap | None = None
    from_reference: ChartMap | None = None

    def __post_init__(self):
        if self.kind not in ("box", "sector"):
            raise ValueError(f"patch kind must be 'box' or 'sector', got {self.kind!r}")
        if (self.to_reference is None) != (self.from_reference is None):
            raise ValueError("give both coordinate maps or neither")

    @property
    def scope(self) -> VariableScope:
        return self.sigma.scope

    @property
    def is_reference(self) -> bool:
        return self.to_reference is None

    def contains(self, q) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if self.kind == "box":
            ok = np.ones(len(q), dtype=bool)
            for j, (lo, hi) in enumerate(self.bounds):
                ok &= (q[:, j] > lo) & (q[:, j] < hi)
            return ok
        lo, hi = self.bounds[0], self.bounds[1]
        phi = np.arctan2(q[:, 1], q[:, 0])
        off = np.mod(phi - lo, TWO_PI)
        ok = (off > 0) & (off < hi - lo)
        if len(self.bounds) == 4:
            r = np.hypot(q[:, 0], q[:, 1])
            ok &= (r > self.bounds[2]) & (r < self.bounds[3])
        return ok

    def sigma_reference(self, ref: VariableScope) -> ScalarField:
        """``sigma`` as a function of reference coordinates."""
        if self.is_reference:
            return ScalarField(self.sigma.node, ref)
        return self.sigma.compose(self.from_reference)

    def to_local(self, q) -> np.ndarray:
        return np.asarray(q, dtype=float) if self.is_reference else self.from_reference(q)

    def phase_map(self, b: PhaseBundle) -> ChartMap:
        """Patch phase chart -> reference phase chart (cotangent lift of the
        coordinate change: momenta transform with the transposed inverse
        Jacobian)."""
        local = phase_scope(self.scope, b.k) if not self.is_reference else b.scope
        if self.is_reference:
            return ChartMap.identity(b.scope)
        n = b.n
        f = self.to_reference.components
        g = self.from_reference.components
        comps = list(f)
        for kappa in range(b.k):
            for i in range(n):
                acc = dsl.ZERO
                for j in range(n):
                    dg = dsl.compose(dsl.partial(g[j], i), f)
                    p = n + kappa * n + j
                    acc = dsl.add(acc, dsl.mul(dg, dsl.Var(local.names[p], p)))
                comps.append(acc)
        return ChartMap(local, b.scope, tuple(comps))

    def local_phase(self, b: PhaseBundle, z) -> np.ndarray:
        """Reference phase points -> patch phase points."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.is_reference:
            return z
        n = b.n
        q = z[:, :n]
        J = self.to_reference.jacobian(self.from_reference(q))  # d f / d q_loc
        p = z[:, n:].reshape(len(z), b.k, n)
        p_loc = np.einsum("mij,mki->mkj", J, p)
        return np.hstack([self.from_reference(q), p_loc.reshape(len(z), -1)])

    @classmethod
    def parse(cls, spec: dict, ref: VariableScope) -> "ChartPatch":
        names = tuple(spec.get("coordinates") or ref.names)
        scope = VariableScope(names)
        to_ref = spec.get("to_reference")
        from_ref = spec.get("from_reference")
        if (to_ref is None) != (from_ref is None):
            raise ValueError(f"patch {spec.get('name')!r}: give to_reference and from_reference together")
        if to_ref is None and names != ref.names:
            raise ValueError(f"patch {spec.get('name')!r} uses other coordinates but has no maps")
        bounds = spec["bounds"]
        kind = bounds.get("kind", "box")
        values = tuple(tuple(v) for v in bounds["ranges"]) if kind == "box" else tuple(bounds["ranges"])
        return cls(
            name=spec["name"],
            kind=kind,
            bounds=values,
            sigma=ScalarField.parse(spec["sigma"], scope),
            to_reference=ChartMap.parse(to_ref, scope, ref) if to_ref else None,
            from_reference=ChartMap.parse(from_ref, ref, scope) if from_ref else None,
        )

    def to_spec(self) -> dict:
        out = {"name": self.name}
        if self.kind == "box":
            out["bounds"] = {"kind": "box", "ranges": [list(b) for b in self.bounds]}
        else:
            out["bounds"] = {"kind": "sector", "ranges": list(self.bounds)}
        out["sigma"] = dsl.to_source(self.sigma.node)
        if not self.is_reference:
            out["coordinates"] = list(self.scope.names)
            out["to_reference"] = [dsl.to_source(c) for c in self.to_reference.components]
            out["from_reference"] = [dsl.to_source(c) for c in self.from_reference.components]
        return out


@dataclass(frozen=True, eq=False)
class Atlas:
    patches: tuple[ChartPatch, ...]
    reference: VariableScope
    domain: Domain
    budget: int = DEFAULT_BUDGET

    def patch(self, name: str) -> ChartPatch:
        for p in self.patches:
            if p.name == name:
                return p
        raise KeyError(name)

    def sample_overlap(self, patches: Sequence[ChartPatch], rng: np.random.Generator) -> np.ndarray:
        """Rejection sample the common part of ``patches`` (at most
        ``budget`` draws)."""
        cand = self.domain.sample_base(rng, self.budget)
        ok = np.ones(len(cand), dtype=bool)
        for p in patches:
            ok &= p.contains(cand)
        return cand[ok]

    def coverage(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.zeros(len(pts), dtype=bool)
        for p in self.patches:
            ok |= p.contains(pts)
        return ok


def transition(a: Atlas, alpha: ChartPatch, beta: ChartPatch, q) -> np.ndarray:
    """``lambda_{beta alpha} = exp(sigma_alpha - sigma_beta)`` at reference
    points ``q``."""
    sa = alpha.sigma_reference(a.reference)(q)
    sb = beta.sigma_reference(a.reference)(q)
    return np.exp(sa - sb)


@dataclass
class CocycleReport:
    defect: float
    product: float  # max |l_db l_ba - l_da| on triple overlaps
    flatness: float  # max |d log l_ba| on pairwise overlaps
    triple_samples: int
    pair_samples: int

    def to_dict(self) -> dict:
        return {
            "defect": self.defect,
            "product": self.product,
            "flatness": self.flatness,
            "triple_samples": self.triple_samples,
            "pair_samples": self.pair_samples,
        }


def cocycle_defect(a: Atlas, seed: int = 42) -> CocycleReport:
    """Cocycle check on sampled overlaps.

    With ``lambda`` built from the sigmas the triple product is satisfied
    identically, so the defect also includes the flatness of each
    transition (``sigma_alpha - sigma_beta`` must be locally constant,
    because both differentials equal ``theta``).
    """
    rng = np.random.default_rng(seed)
    if len(a.patches) < 2:
        return CocycleReport(0.0, 0.0, 0.0, 0, 0)
    ref = a.reference
    sig = {p.name: p.sigma_reference(ref) for p in a.patches}
    flat = 0.0
    pairs = 0
    for al, be in itertools.combinations(a.patches, 2):
        q = a.sample_overlap((al, be), rng)
        if len(q):
            pairs += len(q)
            g = sig[al.name].gradient(q) - sig[be.name].gradient(q)
            flat = max(flat, float(np.max(np.abs(g))))
    prod = 0.0
    triples = 0
    for al, be, de in itertools.combinations(a.patches, 3):
        q = a.sample_overlap((al, be, de), rng)
        if len(q):
            triples += len(q)
            lhs = transition(a, be, de, q) * transition(a, al, be, q)
            prod = max(prod, float(np.max(np.abs(lhs - transition(a, al, de, q)))))
    if pairs == 0 or (len(a.patches) >= 3 and triples == 0):
        raise EmptyOverlap("no overlap samples found within the sample budget")
    return CocycleReport(max(prod, flat), prod, flat, triples, pairs)


def exactness_residual(b: PhaseBundle, patch: ChartPatch, q) -> float:
    """``max |vartheta - d sigma|`` at reference base points in the patch."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    s = patch.sigma_reference(b.base)
    return float(np.max(np.abs(b.vartheta.components(q) - s.gradient(q))))


def sample_patch(b: PhaseBundle, patch: ChartPatch, m: int, rng, budget: int = 100_000) -> np.ndarray:
    """Reference phase points with base inside ``patch`` and ``b.domain``."""
    if b.domain is None:
        raise StructureError("bundle has no sampling domain")
    out = []
    count = 0
    draws = 0
    while count < m and draws < budget:
        z = b.domain.sample_phase(rng, max(4 * m, 64), b.k)
        draws += len(z)
        z = z[patch.contains(z[:, : b.n])]
        out.append(z)
        count += len(z)
    if count < m:
        raise EmptyOverlap(f"patch {patch.name!r} not hit within the sample budget")
    return np.concatenate(out)[:m]


@dataclass
class Localization:
    patch: ChartPatch
    phase_map: ChartMap
    forms: list[FormField]  # Omega^k_alpha on the patch phase chart
    H: ScalarField  # H_alpha on the patch phase chart
    closedness: float
    exactness: float
    inversion: float  # |e^sigma Omega_alpha - Psi^* OmegaTheta|


def localize(
    b: PhaseBundle,
    H: ScalarField,
    patch: ChartPatch,
    points=None,
    *,
    samples: int = 100,
    seed: int = 42,
    tol: float = 1e-8,
) -> Localization:
    """``Omega^k_alpha = exp(-sigma) Psi^* OmegaTheta^k`` and ``H_alpha =
    exp(-sigma) H o Psi`` in the patch's phase coordinates, with ``Psi`` the
    patch-to-reference phase map.  ``points`` are reference phase points
    (sampled in the patch when omitted)."""
    rng = np.random.default_rng(seed)
    z = sample_patch(b, patch, samples, rng) if points is None else np.atleast_2d(points)
    ex = exactness_residual(b, patch, z[:, : b.n])
    if ex > tol:
        raise NotExactOnPatch(patch.name, ex)
    psi = patch.phase_map(b)
    local = psi.source
    factor = dsl.call("exp", dsl.neg(patch.sigma.node))
    pulled = [pullback(psi, W) for W in b.OmegaTheta]
    forms = [W.scale(factor) for W in pulled]
    Ha = ScalarField(dsl.mul(factor, dsl.compose(H.node, psi.components)), local)
    zl = patch.local_phase(b, z)
    closed = max(exterior_derivative(W).max_abs(zl) for W in forms)
    back = dsl.call("exp", patch.sigma.node)
    inv = max((W.scale(back) - P).max_abs(zl) for W, P in zip(forms, pulled))
    return Localization(patch, psi, forms, Ha, closed, ex, inv)


@dataclass
class GlueReport:
    local_vs_global: float
    cross_coordinate: float  # nan for reference patches
    cross_residual: float  # global HDW residual of the pushed local solution
    points: int
    gauge: str

    def to_dict(self) -> dict:
        return {
            "gauge": self.gauge,
            "points": self.points,
            "local_vs_global": self.local_vs_global,
            "cross_coordinate": self.cross_coordinate,
            "cross_residual": self.cross_residual,
        }


def _local_solution(forms, Ha: ScalarField, zl, n, k, gauge):
    B = flat_matrix(forms, zl)
    rhs = Ha.gradient(zl)
    x = solve_system(B, rhs, n, k, gauge)
    check_solution(B, rhs, x, zl)
    return x


def glue_invariance(
    b: PhaseBundle,
    H: ScalarField,
    patch: ChartPatch,
    points,
    gauge: Gauge | str = Gauge.MIN_NORM,
    tol: float = 1e-8,
) -> GlueReport:
    """Compare HDW solutions of the global system ``(OmegaTheta, d_theta H)``
    and the local systems ``(exp(-sigma) OmegaTheta, d H_alpha)`` at
    reference phase points inside ``patch``.

    ``local_vs_global`` solves the local system written in reference
    coordinates.  For patches in other coordinates the local solution in
    patch coordinates is also pushed forward by the phase map: for ``k = 1``
    it is compared with the global one directly (``cross_coordinate``); in
    general its global HDW residual is reported (``cross_residual``), and
    ``cross_coordinate`` compares base components, which are unique.
    """
    gauge = Gauge.parse(gauge)
    z = np.atleast_2d(np.asarray(points, dtype=float))
    n, k = b.n, b.k
    ex = exactness_residual(b, patch, z[:, :n])
    if ex > tol:
        raise NotExactOnPatch(patch.name, ex)
    B = flat_matrix(b.OmegaTheta, z)
    th = b.theta.components(z)
    rhs = H.gradient(z) - H(z)[:, None] * th
    xg = solve_system(B, rhs, n, k, gauge)
    check_solution(B, rhs, xg, z)

    sigma_ref = ScalarField(patch.sigma_reference(b.base).node, b.scope)
    factor = dsl.call("exp", dsl.neg(sigma_ref.node))
    ref_forms = [W.scale(factor) for W in b.OmegaTheta]
    Href = ScalarField(dsl.mul(factor, H.node), b.scope)
    xl = _local_solution(ref_forms, Href, z, n, k, gauge)
    lvg = float(np.max(np.abs(xl - xg)))

    cross = float("nan")
    cres = float("nan")
    if not patch.is_reference:
        loc = localize(b, H, patch, z, tol=tol)
        zl = patch.local_phase(b, z)
        xp = _local_solution(loc.forms, loc.H, zl, n, k, gauge)
        pushed = np.stack(
            [loc.phase_map.push_forward(zl, xp[:, kappa]) for kappa in range(k)], axis=1
        )
        cres = float(np.max(np.abs(np.einsum("mij,mj->mi", B, pushed.reshape(len(z), -1)) - rhs)))
        if k == 1:
            cross = float(np.max(np.abs(pushed - xg)))
        else:
            cross = float(np.max(np.abs(pushed[..., :n] - xg[..., :n])))
    return GlueReport(lvg, cross, cres, len(z), gauge.value)


def hamiltonian_compatibility(a: Atlas, b: PhaseBundle, H: ScalarField, seed: int = 42) -> float:
    """``max |e^{sigma_a} H_a - e^{sigma_b} H_b|`` over sampled pairwise
    overlaps, with ``H_a = e^{-sigma_a} H`` evaluated in reference
    coordinates (diagnostic only)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for al, be in itertools.combinations(a.patches, 2):
        q = a.sample_overlap((al, be), rng)
        if not len(q):
            continue
        p = rng.uniform(-b.domain.momentum_bound, b.domain.momentum_bound, (len(q), b.n * b.k)) \
            if b.domain else np.zeros((len(q), b.n * b.k))
        z = np.hstack([q, p])
        vals = []
        for pa in (al, be):
            s = pa.sigma_reference(b.base)(q)
            Ha = np.exp(-s) * H(z)
            vals.append(np.exp(s) * Ha)
        worst = max(worst, float(np.max(np.abs(vals[0] - vals[1]))))
    return worst
