import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PLANE, flat_bundle, free_hamiltonian, lee_bundle
from lcks.hdw import CallableKVectorField, Gauge, darboux_field, hdw_field, kernel_basis
from lcks.hj import (
    PreconditionFailed,
    Section,
    hj_covector,
    hj_residual,
    lemma_gap,
    project_field,
    projected_field,
    pullback_identity_gap,
    relatedness_defect,
    section_closedness,
    vertical_defect,
    verify_hj_theorem,
)
from lcks.problems import NEGATIVE_SECTION, hj_section


def base_points(b, m=100, seed=1):
    q = b.domain.sample_base(np.random.default_rng(seed), m)
    return q[np.abs(np.arctan2(q[:, 1], q[:, 0])) < 2.5]


def test_section_map_projects_to_identity():
    b = lee_bundle(2)
    g = Section.parse(b, hj_section([1, 2]))
    q = base_points(b)
    assert np.array_equal(g(q)[:, :2], q)
    with pytest.raises(ValueError):
        Section.parse(b, hj_section([1]))


def test_conformally_exact_sections_are_closed():
    b = lee_bundle(1)
    # gamma = e^{2 phi} dW with W = x^2 y + sin(y)
    e = "exp(2*atan2(y,x))"
    g = Section.parse(b, [[f"{e}*2*x*y", f"{e}*(x^2 + cos(y))"]])
    assert section_closedness(g, b.vartheta, base_points(b)) < 1e-8


def test_flat_exact_section_closed():
    b = flat_bundle(2, 1, ("x", "y"), domain=PLANE)
    g = Section.parse(b, [["2*x*y", "x^2 + cos(y)"]])
    assert section_closedness(g, b.vartheta, base_points(b)) < 1e-12


def test_radial_section_is_flagged():
    # d_theta(a dr) = 2a dr^dphi = (2a / r) dx^dy
    b = lee_bundle(1)
    a = 1.5
    g = Section.parse(b, [[f"{a}*x/sqrt(x^2+y^2)", f"{a}*y/sqrt(x^2+y^2)"]])
    q = base_points(b)
    expected = np.max(2 * a / np.hypot(q[:, 0], q[:, 1]))
    assert section_closedness(g, b.vartheta, q) == pytest.approx(expected, rel=1e-10)


def test_project_field_example():
    b = lee_bundle(1)
    a = 1.5
    g = Section.parse(b, hj_section([a]))
    X = hdw_field(b, free_hamiltonian(b))
    assert np.allclose(project_field(X, g, np.array([1.0, 0.0])), [[a, -a]], atol=1e-12)


def test_project_kernel_field_is_zero(rng):
    b = lee_bundle(2)
    g = Section.parse(b, hj_section([1, 2]))
    z0 = np.array([1.0, 0.2, 1, 2, 3, 4])
    K = kernel_basis(b, z0)[0].reshape(2, b.dim)
    X = CallableKVectorField(lambda z: np.broadcast_to(K, (len(z), 2, b.dim)), 2, b.dim)
    assert np.max(np.abs(project_field(X, g, base_points(b)))) < 1e-12


def test_project_field_against_tangent_composition():
    b = lee_bundle(2)
    g = Section.parse(b, hj_section([1, 2]))
    X = hdw_field(b, free_hamiltonian(b))
    q = base_points(b, 20)
    Y = project_field(X, g, q)
    for c in range(2):
        lifted = g.chart_map.push_forward(q, Y[:, c])
        # the base part of T gamma (Y) is Y itself since pi o gamma = id
        assert np.max(np.abs(lifted[:, :2] - Y[:, c])) < 1e-9


def test_hj_residual_positive_family():
    for k, a in ((1, [1.0]), (2, [1.0, 2.0])):
        b = lee_bundle(k)
        g = Section.parse(b, hj_section(a))
        assert hj_residual(free_hamiltonian(b), g, b.vartheta, base_points(b)) < 1e-10


def test_hj_residual_zero_hamiltonian():
    b = lee_bundle(1)
    g = Section.parse(b, NEGATIVE_SECTION)
    assert hj_residual(b.scalar("0"), g, b.vartheta, base_points(b)) == 0


def test_hj_residual_negative_control_matches_hand_computation():
    # H o gamma = e^{4 phi}/2, d_theta of it = e^{4 phi} dphi
    b = lee_bundle(1)
    g = Section.parse(b, NEGATIVE_SECTION)
    q = base_points(b)
    x, y = q[:, 0], q[:, 1]
    r2 = x * x + y * y
    f = np.exp(4 * np.arctan2(y, x))
    expected = np.stack([-f * y / r2, f * x / r2], axis=1)
    got = hj_covector(free_hamiltonian(b), g, b.vartheta, q)
    assert np.allclose(got, expected, rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from(["x*y", "sin(x)", "exp(y/4)", "x^2 - y", "cos(x*y)", "1"]),
    st.sampled_from(["y", "x*y^2", "exp(x/3)", "0", "sin(x+y)"]),
    st.sampled_from(["p_1_x^2 + x*p_1_y", "exp(p_1_x/5)*y", "p_1_x*p_1_y*sin(x)", "x^2 + y^2"]),
)
def test_pullback_identity_property(c1, c2, h):
    b = lee_bundle(1)
    g = Section.parse(b, [[c1, c2]])
    assert pullback_identity_gap(b.scalar(h), g, base_points(b, 30)) < 1e-8


def test_relatedness_positive_family():
    for k, a in ((1, [1.0]), (2, [1.0, 2.0])):
        b = lee_bundle(k)
        H = free_hamiltonian(b)
        g = Section.parse(b, hj_section(a))
        defect, vert = relatedness_defect(b, hdw_field(b, H, Gauge.MIN_NORM), g, base_points(b))
        assert defect < 1e-7
        assert vert < 1e-12


def test_relatedness_vanishes_for_lifted_field():
    b = lee_bundle(2)
    H = free_hamiltonian(b)
    g = Section.parse(b, NEGATIVE_SECTION * 2)
    X = hdw_field(b, H)

    def lifted(z):
        q = z[:, :2]
        Y = project_field(X, g, q)
        J = g.jacobian(q)
        return np.einsum("maj,mkj->mka", J, Y)

    T = CallableKVectorField(lifted, 2, b.dim)
    defect, _ = relatedness_defect(b, T, g, base_points(b))
    assert defect == 0.0


def test_relatedness_bounds_hj_residual_negative_control():
    # d_theta(H o gamma) = J^T flat(D) for closed sections
    b = lee_bundle(1)
    H = free_hamiltonian(b)
    g = Section.parse(b, NEGATIVE_SECTION)
    X = hdw_field(b, H)
    for q in base_points(b, 20):
        hj = np.max(np.abs(hj_covector(H, g, b.vartheta, q[None])))
        rel, _ = relatedness_defect(b, X, g, q[None])
        norm = np.max(np.sum(np.abs(g.jacobian(q).T), axis=1))
        assert rel * norm >= hj * (1 - 1e-9)
        assert hj > 0


def test_vertical_defect_is_vertical(rng):
    b = lee_bundle(2)
    g = Section.parse(b, [["x*y", "sin(x)"], ["exp(y)", "x - y"]])
    D = vertical_defect(hdw_field(b, free_hamiltonian(b)), g, base_points(b))
    assert np.max(np.abs(D[..., :2])) < 1e-14


def test_lemma_equality(rng):
    b = lee_bundle(2)
    g = Section.parse(b, hj_section([1.0, 2.0]))
    q = np.array([1.2, 0.3])
    J = g.jacobian(q)
    y = rng.normal(size=(2, 2))
    K = kernel_basis(b, g(q))
    x = np.einsum("aj,kj->ka", J, y) + 0.7 * K[0].reshape(2, b.dim)
    gap, flat = lemma_gap(b, x, g, y, q)
    assert flat < 1e-9
    assert gap < 1e-8


def test_hj_theorem_positive_k1():
    b = lee_bundle(1)
    H = free_hamiltonian(b)
    g = Section.parse(b, hj_section([1.0]))
    r = verify_hj_theorem(b, H, hdw_field(b, H), g, base_points(b), [1.0, 0.0], [200], [5e-3])
    assert r.verdict == "PASS" and r.co_vanish
    assert max(r.closedness, r.hj, r.relatedness, r.lift) < 1e-6


def test_hj_theorem_negative_control():
    b = lee_bundle(1)
    H = free_hamiltonian(b)
    g = Section.parse(b, NEGATIVE_SECTION)
    r = verify_hj_theorem(b, H, hdw_field(b, H), g, base_points(b), [1.0, 0.5], [200], [5e-3])
    assert r.closedness < 1e-8
    assert not any(r.conditions.values())
    assert r.verdict == "PASS"


def test_hj_theorem_positive_k2():
    b = lee_bundle(2)
    H = free_hamiltonian(b)
    g = Section.parse(b, hj_section([1.0, 2.0]))
    r = verify_hj_theorem(b, H, darboux_field(b, H), g, base_points(b), [1.0, 0.0], [400, 400], [2.5e-3, 2.5e-3])
    assert r.verdict == "PASS" and r.co_vanish
    assert r.lift < 1e-6


def test_violation_verdict_when_conditions_disagree():
    from lcks.hj import HJReport

    r = HJReport(0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1e-8, 1e-6)
    assert r.verdict == "VIOLATION"


def test_preconditions():
    b = lee_bundle(1)
    H = free_hamiltonian(b)
    radial = Section.parse(b, [["x/sqrt(x^2+y^2)", "y/sqrt(x^2+y^2)"]])
    with pytest.raises(PreconditionFailed) as info:
        verify_hj_theorem(b, H, hdw_field(b, H), radial, base_points(b), [1, 0], [10], [0.01])
    assert "closed" in info.value.hypothesis
    zero = CallableKVectorField(lambda z: np.zeros((len(z), 1, 4)), 1, 4)
    with pytest.raises(PreconditionFailed) as info:
        verify_hj_theorem(b, H, zero, Section.parse(b, hj_section([1.0])), base_points(b), [1, 0], [10], [0.01])
    assert "HDW" in info.value.hypothesis


def test_flat_regression_classical_hj():
    b = flat_bundle(2, 1, ("x", "y"), domain=PLANE)
    H = free_hamiltonian(b)
    X = hdw_field(b, H)
    q = base_points(b)
    # W = 2x + 3y: |dW|^2/2 is constant, so d(H o dW) = 0
    good = Section.parse(b, [["2", "3"]])
    r = verify_hj_theorem(b, H, X, good, q, [-1.0, -1.0], [100], [0.01])
    assert r.co_vanish and r.hj == 0.0
    # W = x^2 y is closed but H o dW is not constant
    bad = Section.parse(b, [["2*x*y", "x^2"]])
    r = verify_hj_theorem(b, H, X, bad, q, [0.5, 0.5], [50], [0.01])
    assert r.verdict == "PASS" and not any(r.conditions.values())
