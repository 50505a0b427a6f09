"""Problem files (JSON) and the built-in problems."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import Atlas, ChartPatch
from .dsl import ExpressionError
from .forms import FormField, ScalarField
from .hdw import Gauge, parse_grid
from .hj import Section
from .structures import Domain, PhaseBundle, base_scope, build_phase_bundle

DEFAULT_SEED = 42


class ProblemError(ValueError):
    """Invalid problem file; ``where`` names the offending field."""

    def __init__(self, where: str, message: str):
        self.where = where
        super().__init__(f"{where}: {message}")


@dataclass
class SolverOptions:
    gauge: str = "min-norm"
    tolerance: float = 1e-9
    grid: str = "1000@1e-3"
    start: list | None = None
    order: list | None = None
    hj_grid: str = "400@2.5e-3"
    hj_start: list | None = None

    def to_dict(self) -> dict:
        out = {"gauge": self.gauge, "tolerance": self.tolerance, "grid": self.grid}
        for key in ("start", "order"):
            if getattr(self, key) is not None:
                out[key] = list(getattr(self, key))
        out["hj_grid"] = self.hj_grid
        if self.hj_start is not None:
            out["hj_start"] = list(self.hj_start)
        return out


@dataclass
class ProblemFile:
    n: int
    k: int
    vartheta: list[str]
    hamiltonian: str
    coordinates: list[str] | None = None
    domain: dict = field(default_factory=dict)
    sections: list[list[str]] | None = None
    atlas: list[dict] | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    seed: int = DEFAULT_SEED
    name: str = "problem"
    source: str = field(default="<problem>", compare=False)  # for diagnostics

    # -- serialization ---------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, source: str = "problem") -> "ProblemFile":
        if not isinstance(data, dict):
            raise ProblemError(source, "top level must be a JSON object")
        for key in ("n", "k", "vartheta", "hamiltonian"):
            if key not in data:
                raise ProblemError(f"{source}: {key}", "missing required field")
        n, k = data["n"], data["k"]
        if not (isinstance(n, int) and isinstance(k, int)) or n < 1 or k < 1:
            raise ProblemError(f"{source}: n/k", "must be positive integers")
        vt = data["vartheta"]
        if not isinstance(vt, list) or len(vt) != n:
            raise ProblemError(f"{source}: vartheta", f"needs {n} expressions")
        sections = data.get("sections")
        if sections is not None:
            if len(sections) != k or any(len(row) != n for row in sections):
                raise ProblemError(f"{source}: sections", f"needs {k} rows of {n} expressions")
        solver = data.get("solver", {})
        known = set(SolverOptions.__dataclass_fields__)
        extra = set(solver) - known
        if extra:
            raise ProblemError(f"{source}: solver", f"unknown keys {sorted(extra)}")
        seed = data.get("seed", DEFAULT_SEED)
        if not isinstance(seed, int) or seed < 0:
            raise ProblemError(f"{source}: seed", "must be a non-negative integer")
        return cls(
            n=n,
            k=k,
            vartheta=list(vt),
            hamiltonian=data["hamiltonian"],
            coordinates=data.get("coordinates"),
            domain=dict(data.get("domain", {})),
            sections=sections,
            atlas=data.get("atlas"),
            solver=SolverOptions(**solver),
            seed=seed,
            name=data.get("name", source),
            source=source,
        )

    @classmethod
    def load(cls, path) -> "ProblemFile":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ProblemError(str(path), f"cannot read file ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ProblemError(str(path), f"invalid JSON at line {exc.lineno} column {exc.colno}") from None
        return cls.from_dict(data, str(path))

    def to_dict(self) -> dict:
        out = {"name": self.name, "n": self.n, "k": self.k}
        if self.coordinates is not None:
            out["coordinates"] = list(self.coordinates)
        out["domain"] = copy.deepcopy(self.domain)
        out["vartheta"] = list(self.vartheta)
        out["hamiltonian"] = self.hamiltonian
        if self.sections is not None:
            out["sections"] = [list(r) for r in self.sections]
        if self.atlas is not None:
            out["atlas"] = copy.deepcopy(self.atlas)
        out["solver"] = self.solver.to_dict()
        out["seed"] = self.seed
        return out

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    # -- construction ----------------------------------------------------

    def build(self, tol: float = 1e-8) -> "Problem":
        """Parse every expression and assemble the bundle.  DSL errors are
        re-raised as :class:`ProblemError` naming the field."""
        base = base_scope(self.n, self.coordinates)
        dom = self.domain
        try:
            domain = Domain(
                tuple(tuple(b) for b in dom.get("bounds", [[-1.0, 1.0]] * self.n)),
                float(dom.get("min_radius", 0.0)),
                float(dom.get("momentum_bound", 10.0)),
            )
        except (TypeError, ValueError) as exc:
            raise ProblemError(f"{self.source}: domain", str(exc)) from None
        if len(domain.bounds) != self.n:
            raise ProblemError(f"{self.source}: domain.bounds", f"needs {self.n} ranges")
        vt = _parse(self.source, "vartheta", lambda: FormField.parse_one_form(self.vartheta, base))
        b = build_phase_bundle(self.n, self.k, vt, domain, seed=self.seed, tol=tol)
        H = _parse(self.source, "hamiltonian", lambda: b.scalar(self.hamiltonian))
        section = None
        if self.sections is not None:
            section = _parse(self.source, "sections", lambda: Section.parse(b, self.sections))
        atlas = None
        if self.atlas is not None:
            patches = []
            for i, spec in enumerate(self.atlas):
                try:
                    patches.append(ChartPatch.parse(spec, base))
                except (KeyError, TypeError, ValueError) as exc:
                    where = f"{self.source}: atlas[{i}]"
                    if isinstance(exc, ExpressionError):
                        raise ProblemError(where, _describe(exc)) from None
                    raise ProblemError(where, str(exc)) from None
            atlas = Atlas(tuple(patches), base, domain)
        try:
            gauge = Gauge.parse(self.solver.gauge)
        except ValueError as exc:
            raise ProblemError(f"{self.source}: solver.gauge", str(exc)) from None
        return Problem(self, b, H, section, atlas, gauge)


def _describe(exc: ExpressionError) -> str:
    src = getattr(exc, "source", None)
    pos = getattr(exc, "position", None)
    msg = str(exc)
    if src and pos is not None:
        msg += f"\n    {src}\n    {' ' * pos}^"
    return msg


def _parse(name, where, thunk):
    try:
        return thunk()
    except ExpressionError as exc:
        raise ProblemError(f"{name}: {where}", _describe(exc)) from None


@dataclass
class Problem:
    spec: ProblemFile
    bundle: PhaseBundle
    H: ScalarField
    section: Section | None
    atlas: Atlas | None
    gauge: Gauge

    def grid(self, text: str | None = None, axes: int | None = None):
        return parse_grid(text or self.spec.solver.grid, axes or self.bundle.k)

    def start(self) -> np.ndarray:
        b = self.bundle
        s = self.spec.solver.start
        if s is None:
            return np.concatenate([np.ones(b.n) / np.sqrt(b.n), np.tile(np.eye(b.n)[0], b.k)])
        if len(s) != b.dim:
            raise ProblemError(f"{self.spec.source}: solver.start", f"needs {b.dim} values")
        return np.asarray(s, dtype=float)

    def hj_start(self) -> np.ndarray:
        s = self.spec.solver.hj_start
        if s is None:
            return self.start()[: self.bundle.n]
        if len(s) != self.bundle.n:
            raise ProblemError(f"{self.spec.source}: solver.hj_start", f"needs {self.bundle.n} values")
        return np.asarray(s, dtype=float)


# ---------------------------------------------------------------------------
# built-in problems

LEE_FORM = ["-2*y/(x^2+y^2)", "2*x/(x^2+y^2)"]


def _momentum(kappa: int, name: str) -> str:
    return f"p_{kappa}_{name}"


def free_hamiltonian(k: int) -> str:
    terms = [f"{_momentum(c, 'x')}^2 + {_momentum(c, 'y')}^2" for c in range(1, k + 1)]
    return "(" + " + ".join(terms) + ")/2"


def hj_section(a) -> list[list[str]]:
    """``gamma^k = a_k e^phi (dr - r dphi)`` in Cartesian components."""
    return [
        [
            f"{float(c)!r}*exp(atan2(y,x))*(x+y)/sqrt(x^2+y^2)",
            f"{float(c)!r}*exp(atan2(y,x))*(y-x)/sqrt(x^2+y^2)",
        ]
        for c in a
    ]


NEGATIVE_SECTION = [["exp(2*atan2(y,x))", "0"]]


def punctured_atlas() -> list[dict]:
    pi = float(np.pi)
    return [
        {"name": "east", "bounds": {"kind": "sector", "ranges": [-3 * pi / 4, 3 * pi / 4]},
         "sigma": "2*atan2(y,x)"},
        {"name": "west", "bounds": {"kind": "sector", "ranges": [pi / 4, 7 * pi / 4]},
         "sigma": "2*(atan2(-y,-x)+pi)"},
        {"name": "north", "bounds": {"kind": "sector", "ranges": [0.0, pi]},
         "sigma": "2*atan2(y,x)+0.3"},
        {"name": "polar", "bounds": {"kind": "sector", "ranges": [-3 * pi / 4, 3 * pi / 4]},
         "coordinates": ["r", "phi"], "sigma": "2*phi",
         "to_reference": ["r*cos(phi)", "r*sin(phi)"],
         "from_reference": ["sqrt(x^2+y^2)", "atan2(y,x)"]},
    ]


def punctured_plane(k: int = 1) -> ProblemFile:
    """Punctured plane with Lee form ``2(x dy - y dx)/r^2`` and the free
    Hamiltonian; sections use ``a = (1, 2, ..., k)``."""
    if k < 1:
        raise ValueError("k must be positive")
    grid = "1000@1e-3" if k == 1 else "100@1e-2"
    return ProblemFile(
        n=2,
        k=k,
        coordinates=["x", "y"],
        domain={"bounds": [[-4.0, 4.0], [-4.0, 4.0]], "min_radius": 0.1, "momentum_bound": 10.0},
        vartheta=list(LEE_FORM),
        hamiltonian=free_hamiltonian(k),
        sections=hj_section(range(1, k + 1)),
        atlas=punctured_atlas(),
        solver=SolverOptions(
            gauge="min-norm",
            tolerance=1e-9,
            grid=grid,
            start=[1.0, 0.0] + [1.0, 0.0] * k,
            hj_grid="400@2.5e-3",
            hj_start=[1.0, 0.0],
        ),
        seed=DEFAULT_SEED,
        name=f"punctured-plane-k{k}",
    )


BUILTIN = {"punctured-plane": punctured_plane}
