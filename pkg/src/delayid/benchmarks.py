"""Reference delay systems used by the acceptance suite and the CLI examples."""

from __future__ import annotations

from dataclasses import dataclass, field

from .basis import CandidateCatalog, parse_term
from .dde_core import SparseDelayModel, WeightedTerm


def model_from_strings(equations, delay: float) -> SparseDelayModel:
    """Build a model from ``[[(coef, "term"), ...], ...]``, one list per state."""
    eqs = [[WeightedTerm(parse_term(t), float(c)) for c, t in eq] for eq in equations]
    return SparseDelayModel(len(eqs), eqs, float(delay))


def expand_catalog(functions, variables, cross=True) -> list[str]:
    """Apply each template (``{v}`` placeholder) to every plain and delayed variable.

    The cross product ``x<i>*x<i>_tau`` is added once per variable, right
    after the first two templates.
    """
    out = []
    for i in variables:
        for v in (f"x{i}", f"x{i}_tau"):
            row = [f.format(v=v) for f in functions]
            if cross and v.endswith("_tau"):
                out[len(out) - len(functions) + 2:len(out) - len(functions) + 2] = [f"x{i}*x{i}_tau"]
            out.extend(row)
    return out


_EXP_FUNCS = ["{v}", "{v}^2", "exp(-{v})", "exp({v})", "sin({v})", "cos({v})"]
_SPROTT_FUNCS = ["{v}", "{v}^2", "exp(-{v})", "sin({v})", "cos({v})", "1/{v}", "1/{v}^2"]
_MG_FUNCS = ["{v}", "{v}^2", "sin({v})", "cos({v})", "hill({v}, 10)", "hill({v}, 4)", "1/{v}", "1/{v}^2"]


@dataclass(frozen=True)
class Benchmark:
    name: str
    truth: SparseDelayModel
    history: tuple[float, ...]
    dt: float
    t_end: float
    catalog: tuple[str, ...]
    window: tuple[int, int]
    filter_cutoff: float = 0.2
    filter_order: int = 4
    notes: dict = field(default_factory=dict)

    @property
    def tau_index(self) -> int:
        return round(self.truth.delay / self.dt)

    def candidate_catalog(self) -> CandidateCatalog:
        return CandidateCatalog.parse(self.catalog)


def _ordered(names):
    # exponential-style ordering: x, x^2, x*x_tau, ... then the delayed copies
    return tuple(names)


EXPONENTIAL = Benchmark(
    "exponential",
    model_from_strings([[(10.0, "exp(-x1_tau)"), (-1.0, "x1")]], 1.0),
    (1.0,), 0.01, 20.0,
    _ordered(expand_catalog(_EXP_FUNCS, [1])),
    (20, 1000),
)

SPROTT = Benchmark(
    "sprott",
    model_from_strings([[(1.0, "sin(x1_tau)")]], 3.0),
    (0.1,), 0.05, 100.0,
    _ordered(expand_catalog(_SPROTT_FUNCS, [1])),
    (20, 1000),
    filter_cutoff=0.15,
)

MACKEY_GLASS = Benchmark(
    "mackey_glass",
    model_from_strings([[(-0.1, "x1"), (0.2, "hill(x1_tau, 10)")]], 40.0),
    (0.1,), 0.2, 1000.0,
    tuple(f.format(v=v) for v in ("x1", "x1_tau") for f in _MG_FUNCS),
    (20, 1000),
    filter_cutoff=0.1,
)

MACKEY_GLASS_20 = Benchmark(
    "mackey_glass_20",
    model_from_strings([[(-0.1, "x1"), (0.2, "hill(x1_tau, 10)")]], 20.0),
    (0.1,), 0.2, 1000.0,
    MACKEY_GLASS.catalog,
    (20, 1000),
    filter_cutoff=0.1,
)

COUPLED = Benchmark(
    "coupled",
    model_from_strings([[(-1.0, "x1_tau")], [(1.0, "x1"), (-1.0, "x1_tau"), (-1.0, "x2_tau")]], 1.0),
    (10.0, 6.0), 0.01, 20.0,
    _ordered(expand_catalog(_EXP_FUNCS, [1, 2])),
    (20, 1000),
    filter_cutoff=0.13,
)

REGISTRY = {b.name: b for b in (EXPONENTIAL, SPROTT, MACKEY_GLASS, MACKEY_GLASS_20, COUPLED)}
