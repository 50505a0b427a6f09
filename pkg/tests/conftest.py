import numpy as np
import pytest

from lcks.forms import FormField
from lcks.structures import Domain, base_scope, build_phase_bundle

LEE = ["-2*y/(x^2+y^2)", "2*x/(x^2+y^2)"]
PLANE = Domain(((-3.0, 3.0), (-3.0, 3.0)), 0.1, 10.0)


def free_hamiltonian(b):
    terms = [f"p_{c + 1}_x^2 + p_{c + 1}_y^2" for c in range(b.k)]
    return b.scalar("(" + " + ".join(terms) + ")/2")


def lee_bundle(k=1, domain=PLANE):
    base = base_scope(2, ("x", "y"))
    return build_phase_bundle(2, k, FormField.parse_one_form(LEE, base), domain)


def flat_bundle(n=2, k=1, names=None, domain=None):
    base = base_scope(n, names)
    return build_phase_bundle(n, k, FormField.zero(1, base), domain)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
