import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PLANE, flat_bundle, free_hamiltonian, lee_bundle
from lcks.dsl import VariableScope
from lcks.forms import FormField, interior_product
from lcks.hdw import (
    CallableKVectorField,
    DomainEscape,
    ExpressionKVectorField,
    Gauge,
    HDWField,
    OutOfRange,
    assemble_flat,
    d_theta,
    darboux_field,
    hdw_residual,
    integrability_defect,
    integrate_section,
    kernel_basis,
    parse_grid,
    solve_hdw,
    solve_system,
)
from lcks.structures import Domain


def test_flat_matrix_canonical_symplectic():
    b = flat_bundle(1, 1)
    assert np.array_equal(assemble_flat(b, np.array([0.3, 0.7])).matrix, [[0, -1], [1, 0]])


def test_flat_matrix_lee_entry():
    B = assemble_flat(lee_bundle(1), np.array([1.0, 0, 1, 0])).matrix
    # (i_X W)_y picks X^x W_xy = -2 X^x
    assert B[1, 0] == pytest.approx(-2.0)
    assert B[0, 1] == pytest.approx(2.0)


def test_flat_matrix_agrees_with_interior_products(rng):
    b = lee_bundle(2)
    z = b.sample(rng, 1)[0]
    x = rng.normal(size=(2, b.dim))
    expected = sum(interior_product(x[c], b.OmegaTheta[c], z) for c in range(2))
    assert np.allclose(assemble_flat(b, z).apply(x), expected, atol=1e-10)


def test_k2_darboux_rank_and_kernel():
    b = flat_bundle(2, 2)
    B = assemble_flat(b, np.zeros(6)).matrix
    assert np.linalg.matrix_rank(B) == b.dim
    assert len(kernel_basis(b, np.zeros(6))) == 6


def test_hdw_lee_example():
    b = lee_bundle(1)
    H = free_hamiltonian(b)
    z = np.array([1.0, 0, 1, 0])
    for g in Gauge:
        assert np.allclose(solve_hdw(b, H, z, g), [[1, 0, 0, -1]], atol=1e-12)


def test_classical_hamilton_equations():
    # k=1, theta=0: X = (H_p, -H_q)
    b = flat_bundle(1, 1, ("q",))
    H = b.scalar("p_1_q^2/2 + q^4/4")
    z = np.array([0.7, -0.3])
    X = solve_hdw(b, H, z, Gauge.DARBOUX_DIAGONAL)
    assert np.allclose(X, [[-0.3, -(0.7**3)]])


def test_free_flat_darboux_gauge(rng):
    b = flat_bundle(2, 3, ("x", "y"), domain=PLANE)
    H = free_hamiltonian(b)
    z = b.sample(rng, 10)
    X = solve_hdw(b, H, z, Gauge.DARBOUX_DIAGONAL)
    for c in range(3):
        i = b.momentum_index(c, 0)
        assert np.allclose(X[:, c, :2], z[:, i : i + 2])
        assert np.all(X[:, c, 2:] == 0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_gauges_agree_on_base_and_differ_by_kernel(k, rng):
    b = lee_bundle(k)
    H = free_hamiltonian(b)
    z = b.sample(rng, 100)
    a = solve_hdw(b, H, z, Gauge.MIN_NORM)
    d = solve_hdw(b, H, z, Gauge.DARBOUX_DIAGONAL)
    assert np.max(np.abs(a[..., :2] - d[..., :2])) < 1e-9
    for zi, ai, di in zip(z[:20], a, d):
        K = kernel_basis(b, zi)
        diff = (ai - di).reshape(-1)
        proj = K.T @ (K @ diff) if len(K) else np.zeros_like(diff)
        assert np.max(np.abs(diff - proj)) < 1e-8


def test_min_norm_is_minimal(rng):
    b = lee_bundle(2)
    H = free_hamiltonian(b)
    z = b.sample(rng, 1)[0]
    x = solve_hdw(b, H, z).reshape(-1)
    K = kernel_basis(b, z)
    assert np.max(np.abs(K @ x)) < 1e-9  # orthogonal to the kernel
    other = x + K[0]
    assert np.linalg.norm(other) > np.linalg.norm(x)


def test_symbolic_darboux_field_matches_pointwise(rng):
    b = lee_bundle(2)
    H = free_hamiltonian(b)
    z = b.sample(rng, 50)
    sym = darboux_field(b, H).values(z)
    num = solve_hdw(b, H, z, Gauge.DARBOUX_DIAGONAL)
    assert np.max(np.abs(sym - num)) < 1e-9 * max(1.0, np.abs(num).max())


def test_constrained_darboux_solver_matches_closed_form(rng):
    b = lee_bundle(3)
    H = free_hamiltonian(b)
    z = b.sample(rng, 20)
    B = assemble_flat(b, z).matrix
    x = solve_system(B, d_theta(b, H, z), b.n, b.k, Gauge.DARBOUX_DIAGONAL)
    assert np.max(np.abs(x - solve_hdw(b, H, z, Gauge.DARBOUX_DIAGONAL))) < 1e-9


def test_out_of_range_on_corrupted_structure():
    b = lee_bundle(1)
    bad = dataclasses.replace(b, OmegaTheta=(FormField.zero(2, b.scope),))
    with pytest.raises(OutOfRange) as info:
        solve_hdw(bad, free_hamiltonian(b), np.array([1.0, 0, 1, 0]))
    assert info.value.residual > 0


def test_kernel_basis_properties(rng):
    assert len(kernel_basis(lee_bundle(1), np.array([1.0, 0, 1, 0]))) == 0
    for k in (2, 3):
        b = lee_bundle(k)
        for z in b.sample(rng, 10):
            K = kernel_basis(b, z)
            assert len(K) == 2 * (k * k - 1)
            B = assemble_flat(b, z).matrix
            assert np.max(np.abs(B @ K.T)) < 1e-9
            base = K.reshape(len(K), k, b.dim)[..., : b.n]
            assert np.max(np.abs(base)) < 1e-9
            trace = sum(K.reshape(len(K), k, b.dim)[:, c, b.momentum_index(c, 0) : b.momentum_index(c, 0) + 2] for c in range(k))
            assert np.max(np.abs(trace)) < 1e-9


def _fields(sources, names=("q1", "q2")):
    scope = VariableScope(names)
    return ExpressionKVectorField.parse(sources, scope)


def test_integrability_defect_examples():
    assert integrability_defect(_fields([["1", "0"]]), np.zeros(2)) == 0
    assert integrability_defect(_fields([["1", "0"], ["0", "1"]]), np.array([0.3, 0.4])) == 0
    X = _fields([["q2", "0"], ["0", "1"]])
    for p in ([0.0, 0.0], [1.5, -2.0]):
        assert integrability_defect(X, np.array(p)) == pytest.approx(1.0)
        assert np.allclose(X.bracket(0, 1, np.array(p)), [-1.0, 0.0])


def test_finite_difference_bracket_agrees():
    X = _fields([["q2*q1", "sin(q1)"], ["1", "q1^2"]])
    wrapped = CallableKVectorField(X.values, 2, 2)
    p = np.array([0.4, 0.9])
    assert np.allclose(wrapped.bracket(0, 1, p), X.bracket(0, 1, p), atol=1e-7)


def test_constant_field_integrates_exactly():
    X = _fields([["1", "2"], ["-0.5", "0.25"]])
    g = integrate_section(X, [0.1, 0.2], [10, 20], [0.1, 0.05])
    t = g.times()
    expected = np.array([0.1, 0.2]) + t[:, :1] * [1, 2] + t[:, 1:] * [-0.5, 0.25]
    assert np.allclose(g.flat(), expected, atol=1e-13)
    assert g.path_defect < 1e-13
    assert np.array_equal(g.points[0, 0], [0.1, 0.2])


def test_non_integrable_field_has_path_defect():
    X = _fields([["q2", "0"], ["0", "1"]])
    g = integrate_section(X, [0.0, 0.0], [20, 20], [0.05, 0.05])
    # reversed order differs by t1 * t2 in the first coordinate
    assert g.path_defect == pytest.approx(1.0, rel=1e-9)


def test_domain_escape_returns_partial_grid():
    X = _fields([["1", "0"]])
    dom = Domain(((-1.0, 1.0), (-1.0, 1.0)))
    with pytest.raises(DomainEscape) as info:
        integrate_section(X, [0.0, 0.0], [100], [0.1], domain=dom)
    assert info.value.index == (11,)  # x = 1.0 at step 10 is still on the closed boundary
    assert np.isnan(info.value.grid.points[-1]).all()


def test_parse_grid():
    assert parse_grid("10@0.1", 2) == ((10, 10), (0.1, 0.1))
    assert parse_grid("10@0.1,5@0.2", 2) == ((10, 5), (0.1, 0.2))
    with pytest.raises(ValueError):
        parse_grid("10", 1)
    with pytest.raises(ValueError):
        parse_grid("1@1,1@1,1@1", 2)


def test_csv_layout():
    g = integrate_section(_fields([["1", "0"], ["0", "1"]]), [0.0, 0.0], [1, 2], [0.5, 0.5])
    text = g.to_csv(["q1", "q2"])
    lines = text.strip().split("\n")
    assert lines[0] == "t1,t2,q1,q2"
    assert len(lines) == 1 + 2 * 3
    assert lines[1] == "0.0,0.0,0.0,0.0"


def test_conformal_energy_law_along_trajectory():
    # k=1: d/dt (H o phi) = H theta(X) along integral curves
    b = lee_bundle(1)
    H = free_hamiltonian(b)
    X = darboux_field(b, H)
    h = 1e-3
    g = integrate_section(X, [1.0, 0, 1, 0], [1000], [h], check_path=False)
    z = g.flat()
    Hz = H(z)
    dH = (Hz[2:] - Hz[:-2]) / (2 * h)
    inner = z[1:-1]
    rhs = H(inner) * np.einsum("mi,mi->m", b.theta.components(inner), X.values(inner)[:, 0])
    assert np.max(np.abs(dH - rhs)) < 1e-5
    e = np.exp(-2 * np.arctan2(z[:, 1], z[:, 0])) * Hz
    assert np.max(np.abs(e - e[0])) < 1e-6


def test_grid_refinement_fourth_order():
    b = lee_bundle(1)
    X = darboux_field(b, free_hamiltonian(b))
    r = []
    for steps, h in ((25, 0.04), (50, 0.02)):
        r.append(integrate_section(X, [1.0, 0, 1, 0], [steps], [h], check_path=False).hdw_residual)
    assert r[0] / r[1] >= 8


def test_hdw_field_wrapper(rng):
    b = lee_bundle(2)
    H = free_hamiltonian(b)
    z = b.sample(rng, 5)
    F = HDWField(b, H)
    assert np.max(hdw_residual(b, H, z, F.values(z))) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**32 - 1), st.sampled_from(list(Gauge)))
def test_solver_residual_property(k, seed, gauge):
    b = lee_bundle(k)
    H = b.scalar(" + ".join(f"p_{c + 1}_x*p_{c + 1}_y*x + sin(y)*p_{c + 1}_x^2" for c in range(k)))
    z = b.sample(np.random.default_rng(seed), 10)
    X = solve_hdw(b, H, z, gauge)
    rhs = d_theta(b, H, z)
    assert np.all(hdw_residual(b, H, z, X) < 1e-9 * max(1.0, np.abs(rhs).max()))
    assert len(kernel_basis(b, z[0])) == 2 * (k * k - 1)
