"""Locally conformal k-symplectic geometry and Hamilton-DeDonder-Weyl
dynamics on chart models of the phase bundle."""

from .atlas import Atlas, ChartPatch, cocycle_defect, glue_invariance, localize
from .dsl import VariableScope, parse
from .forms import (
    ChartMap,
    FormField,
    ScalarField,
    VectorField,
    exterior_derivative,
    interior_product,
    lichnerowicz_derivative,
    pullback,
    wedge,
)
from .hdw import (
    Gauge,
    KVectorField,
    MultiTimeGrid,
    assemble_flat,
    hdw_field,
    integrability_defect,
    integrate_section,
    kernel_basis,
    solve_hdw,
)
from .hj import (
    Section,
    hj_residual,
    project_field,
    relatedness_defect,
    section_closedness,
    verify_hj_theorem,
)
from .problems import ProblemFile, punctured_plane
from .structures import (
    Domain,
    PhaseBundle,
    build_phase_bundle,
    conformal_rescale,
    liouville_fields,
    verify_structure,
)

__version__ = "0.1.0"
