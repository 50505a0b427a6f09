import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PLANE, flat_bundle, lee_bundle
from lcks import dsl
from lcks.forms import FormField, ScalarField, exterior_derivative, wedge
from lcks.structures import (
    Domain,
    Inconsistent,
    NotClosed,
    base_scope,
    build_phase_bundle,
    conformal_rescale,
    liouville_fields,
    lift_to,
    phase_scope,
    verify_structure,
)


def test_phase_scope_names():
    s = phase_scope(base_scope(2, ("x", "y")), 2)
    assert s.names == ("x", "y", "p_1_x", "p_1_y", "p_2_x", "p_2_y")
    assert phase_scope(base_scope(2), 1).names == ("q1", "q2", "p_1_1", "p_1_2")
    assert phase_scope(base_scope(2, ("x", "y")), 1).index("py") == 3


def test_dimensions():
    b = lee_bundle(3)
    assert b.dim == 8
    assert len(b.OmegaTheta) == 3
    assert b.vertical.shape == (6, 8)


def test_lee_example_coefficient():
    b = lee_bundle(1)
    # -2 (y p_y + x p_x) / (x^2 + y^2) at (1, 0, 1, 0)
    assert b.OmegaTheta[0].coefficient(0, 1)(np.array([1.0, 0, 1, 0])) == pytest.approx(-2.0)
    z = np.array([0.4, -1.2, 0.3, 2.0])
    x, y, px, py = z
    assert b.OmegaTheta[0].coefficient(0, 1)(z) == pytest.approx(-2 * (y * py + x * px) / (x * x + y * y))


def test_flat_lee_form_gives_darboux_forms():
    b = flat_bundle(2, 2)
    for W, O in zip(b.OmegaTheta, b.Omega):
        assert (W - O).is_structurally_zero()


def test_invariants_hold(rng):
    b = lee_bundle(2)
    z = b.sample(rng, 20)
    for (i,) in b.theta.coeffs:
        assert i < b.n
    for kappa in range(b.k):
        diff = b.OmegaTheta[kappa] - b.Omega[kappa] - wedge(b.theta, b.Theta[kappa])
        assert diff.max_abs(z) == 0.0
        # Omega = -d Theta
        assert (b.Omega[kappa] + exterior_derivative(b.Theta[kappa])).max_abs(z) == 0.0


def test_not_closed_is_rejected():
    base = base_scope(2, ("x", "y"))
    with pytest.raises(NotClosed) as info:
        build_phase_bundle(2, 1, FormField.parse_one_form(["y", "0"], base))
    assert info.value.residual == pytest.approx(1.0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_verify_structure_lee_bundle(k, rng):
    b = lee_bundle(k)
    rep = verify_structure(b, b.sample(rng, 100))
    assert rep.passed
    assert rep.axiom_i.max() < 1e-8
    assert rep.kernel_dim.max() == 0
    assert rep.axiom_iii.max() < 1e-12
    assert set(rep.form_kernel_dims.ravel()) == {2 * (k - 1)}
    assert rep.literal_formula_residual < 1e-12


def test_darboux_axiom_i_exactly_zero(rng):
    b = flat_bundle(2, 2, domain=PLANE)
    rep = verify_structure(b, b.sample(rng, 10))
    assert rep.axiom_i.max() == 0.0


def test_corrupted_bundle_fails_axiom_ii(rng):
    b = lee_bundle(2)
    zero = FormField.zero(2, b.scope)
    bad = dataclasses.replace(b, OmegaTheta=(zero,) + b.OmegaTheta[1:])
    rep = verify_structure(bad, b.sample(rng, 10))
    assert not rep.passed
    assert rep.kernel_dim.min() >= b.n


def test_conformal_rescale_identity_and_inverse(rng):
    b = lee_bundle(2)
    z = b.sample(rng, 20)
    zero = ScalarField.constant(0.0, b.base)
    for W, R in zip(b.OmegaTheta, conformal_rescale(b, zero)):
        assert (W - R).max_abs(z) == 0.0
    sigma = ScalarField.parse("x*y + sin(x)", b.base)
    once = conformal_rescale(b, sigma)
    twice = [W.scale(dsl.call("exp", sigma.node)) for W in once]
    for W, T in zip(b.OmegaTheta, twice):
        assert (W - T).max_abs(z) < 1e-12


def test_conformal_rescale_closed_where_theta_exact(rng):
    b = lee_bundle(2)
    z = b.sample(rng, 100)
    z = z[np.abs(np.arctan2(z[:, 1], z[:, 0])) < 3.0]
    sigma = ScalarField.parse("2*atan2(y, x)", b.base)
    for R in conformal_rescale(b, sigma):
        assert exterior_derivative(R).max_abs(z) < 1e-8


def test_conformal_rescale_general_law(rng):
    # d(e^-s W) = (theta - ds) ^ e^-s W
    b = lee_bundle(1)
    z = b.sample(rng, 30)
    sigma = ScalarField.parse("x^2 - y", b.base)
    R = conformal_rescale(b, sigma)[0]
    ds = FormField.one_form([dsl.partial(sigma.node, 0), dsl.partial(sigma.node, 1)], b.base)
    lhs = exterior_derivative(R)
    rhs = wedge(b.theta - lift_to(ds, b.scope), R)
    assert (lhs - rhs).max_abs(z) < 1e-9


def test_liouville_minus_canonical_form():
    # i_Z (dx^dpx + dy^dpy) = -(px dx + py dy) gives Z = +p d/dp in this convention
    b = flat_bundle(2, 1, ("x", "y"))
    res = liouville_fields(b, [-b.Theta[0]], np.array([1.0, 0, 1, 0]))
    assert np.allclose(res.Z[0], [0, 0, 1, 0])
    assert res.exact[0]
    assert abs(res.contractions[0]) < 1e-12


def test_liouville_zero_form():
    b = lee_bundle(2)
    res = liouville_fields(b, [FormField.zero(1, b.scope)] * 2, np.array([1.0, 0.5, 1, 2, 3, 4]))
    assert np.all(res.Z == 0)


def test_liouville_generic_k2_reports_residual_and_skips_contraction():
    b = lee_bundle(2)
    ups = [FormField.parse_one_form(["0", "x", "0", "0", "0", "0"], b.scope)] * 2
    z = np.array([1.0, 0.5, 1, 2, 3, 4])
    res = liouville_fields(b, ups, z)
    assert np.all(res.residuals < 1e-9)
    assert not res.exact.any()
    assert np.isnan(res.contractions).all()
    # normal-equations oracle: Z solves A^T A Z = A^T u with minimum norm
    A = b.OmegaTheta[0].tensor(z).T
    u = ups[0].components(z)
    assert np.allclose(A @ res.Z[0], u, atol=1e-12)
    assert np.allclose(A.T @ A @ res.Z[0], A.T @ u, atol=1e-10)


def test_liouville_exact_on_lee_bundle():
    # -Theta satisfies d_theta(-Theta) = Omega_theta, so i_Z(-Theta) = 0
    b = lee_bundle(2)
    z = np.array([1.0, 0.5, 1, 2, 3, 4])
    res = liouville_fields(b, [-T for T in b.Theta], z)
    assert res.exact.all()
    assert np.max(np.abs(res.contractions)) < 1e-10


def test_liouville_inconsistent():
    b = lee_bundle(2)
    ups = [FormField.parse_one_form(["0", "0", "0", "0", "1", "0"], b.scope)] * 2
    with pytest.raises(Inconsistent):
        liouville_fields(b, ups, np.array([1.0, 0.5, 1, 2, 3, 4]))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_kernel_dimensions_property(n, k, seed):
    names = tuple(f"q{i + 1}" for i in range(n))
    base = base_scope(n, names)
    # a closed Lee form: the differential of a function
    f = dsl.parse(" + ".join(f"sin({nm})*{i + 1}" for i, nm in enumerate(names)), base)
    vt = FormField.one_form([dsl.partial(f, i) for i in range(n)], base)
    b = build_phase_bundle(n, k, vt, Domain(tuple((-2.0, 2.0) for _ in range(n))))
    z = b.sample(np.random.default_rng(seed), 5)
    rep = verify_structure(b, z)
    assert rep.passed
    assert set(rep.form_kernel_dims.ravel()) == {n * (k - 1)}
