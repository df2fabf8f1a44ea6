"""Sparse delay models and a fixed-step method-of-steps integrator.

A model is a sum of weighted candidate terms per state equation,

    dx_e/dt = sum_k c_ek * f_k(x(t), x(t - delay)),

with a single constant delay and a constant history x(t) = x0 for t <= t0.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import Diverged, SingularOperand

SINGULAR_FLOOR = 1e-12
OVERFLOW_BOUND = 1e12


class TermKind(str, enum.Enum):
    IDENTITY = "identity"
    SQUARE = "square"
    CROSS = "cross"  # x_i * x_i(t - delay)
    EXP_NEG = "exp_neg"
    EXP_POS = "exp_pos"
    SIN = "sin"
    COS = "cos"
    RECIPROCAL = "reciprocal"
    RECIPROCAL_SQUARE = "reciprocal_square"
    HILL = "hill"  # u / (1 + u**p)


_RECIPROCALS = (TermKind.RECIPROCAL, TermKind.RECIPROCAL_SQUARE)


@dataclass(frozen=True)
class TermDescriptor:
    kind: TermKind
    var_index: int
    delayed: bool = False
    power: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TermKind(self.kind))
        if self.var_index < 0:
            raise ValueError(f"var_index must be >= 0, got {self.var_index}")
        if self.kind is TermKind.HILL:
            if self.power is None or int(self.power) != self.power or self.power < 1:
                raise ValueError(f"hill power must be a positive integer, got {self.power!r}")
            object.__setattr__(self, "power", int(self.power))
        elif self.power is not None:
            raise ValueError(f"{self.kind.value} takes no power")
        if self.kind is TermKind.CROSS and self.delayed:
            raise ValueError("cross product already pairs x_i with its delayed copy")

    def check(self, m: int) -> None:
        if self.var_index >= m:
            raise ValueError(f"term {self} refers to state {self.var_index + 1} but m={m}")

    @property
    def uses_delay(self) -> bool:
        return self.delayed or self.kind is TermKind.CROSS

    def __str__(self) -> str:
        v = f"x{self.var_index + 1}" + ("_tau" if self.delayed else "")
        k = self.kind
        if k is TermKind.IDENTITY:
            return v
        if k is TermKind.SQUARE:
            return f"{v}^2"
        if k is TermKind.CROSS:
            return f"{v}*{v}_tau"
        if k is TermKind.EXP_NEG:
            return f"exp(-{v})"
        if k is TermKind.EXP_POS:
            return f"exp({v})"
        if k is TermKind.SIN:
            return f"sin({v})"
        if k is TermKind.COS:
            return f"cos({v})"
        if k is TermKind.RECIPROCAL:
            return f"1/{v}"
        if k is TermKind.RECIPROCAL_SQUARE:
            return f"1/{v}^2"
        return f"hill({v}, {self.power})"


def _operand(term, x, x_tau):
    src = x_tau if term.delayed else x
    return np.asarray(src, dtype=float)[..., term.var_index]


def _raw_value(term, x, x_tau):
    """Evaluate without the singularity check. Broadcasts over leading axes."""
    u = _operand(term, x, x_tau)
    k = term.kind
    if k is TermKind.IDENTITY:
        return u
    if k is TermKind.SQUARE:
        return u * u
    if k is TermKind.CROSS:
        return u * np.asarray(x_tau, dtype=float)[..., term.var_index]
    if k is TermKind.EXP_NEG:
        return np.exp(-u)
    if k is TermKind.EXP_POS:
        return np.exp(u)
    if k is TermKind.SIN:
        return np.sin(u)
    if k is TermKind.COS:
        return np.cos(u)
    if k is TermKind.RECIPROCAL:
        return 1.0 / u
    if k is TermKind.RECIPROCAL_SQUARE:
        return 1.0 / (u * u)
    return u / (1.0 + u ** term.power)


def evaluate_term(term: TermDescriptor, x, x_tau, singular_floor: float = SINGULAR_FLOOR):
    """Value of one candidate term at state ``x`` with delayed state ``x_tau``.

    Accepts single m-vectors or stacked (..., m) arrays. Reciprocal kinds
    raise :class:`SingularOperand` when any operand is within
    ``singular_floor`` of zero.
    """
    if term.kind in _RECIPROCALS:
        u = _operand(term, x, x_tau)
        small = np.abs(u) < singular_floor
        if np.any(small):
            raise SingularOperand(str(term), float(np.asarray(u)[small].flat[0]))
    out = _raw_value(term, x, x_tau)
    return float(out) if np.ndim(out) == 0 else out


class WeightedTerm(NamedTuple):
    term: TermDescriptor
    coef: float
    sd: float = 0.0


@dataclass
class SparseDelayModel:
    m: int
    equations: list[list[WeightedTerm]]
    delay: float

    def __post_init__(self):
        if len(self.equations) != self.m:
            raise ValueError(f"expected {self.m} equations, got {len(self.equations)}")
        if not (self.delay >= 0 and math.isfinite(self.delay)):
            raise ValueError(f"delay must be finite and >= 0, got {self.delay}")
        eqs = []
        for eq in self.equations:
            row = []
            for wt in eq:
                wt = WeightedTerm(*wt)
                wt.term.check(self.m)
                if wt.sd < 0:
                    raise ValueError("coefficient sd must be >= 0")
                row.append(wt)
            eqs.append(row)
        self.equations = eqs

    def terms(self) -> list[TermDescriptor]:
        """Distinct terms in first-appearance order."""
        seen = {}
        for eq in self.equations:
            for wt in eq:
                seen.setdefault(wt.term, None)
        return list(seen)

    def coefficient_matrix(self, terms: Sequence[TermDescriptor] | None = None) -> np.ndarray:
        """(m, K) coefficients aligned with ``terms``."""
        terms = self.terms() if terms is None else list(terms)
        index = {t: i for i, t in enumerate(terms)}
        c = np.zeros((self.m, len(terms)))
        for e, eq in enumerate(self.equations):
            for wt in eq:
                c[e, index[wt.term]] += wt.coef
        return c

    def with_coefficients(self, coefs: np.ndarray, terms: Sequence[TermDescriptor]) -> "SparseDelayModel":
        eqs = []
        for e in range(self.m):
            eqs.append([WeightedTerm(t, float(coefs[e, k])) for k, t in enumerate(terms) if coefs[e, k] != 0.0])
        return SparseDelayModel(self.m, eqs, self.delay)

    def n_terms(self) -> int:
        return sum(len(eq) for eq in self.equations)


@dataclass
class TrajectoryData:
    dt: float
    states: np.ndarray
    t0: float = 0.0
    derivatives: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.states.ndim != 2 or self.states.shape[0] < 2:
            raise ValueError(f"states must be N x m with N >= 2, got shape {self.states.shape}")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("states contain non-finite entries")
        if self.derivatives is not None:
            self.derivatives = np.asarray(self.derivatives, dtype=float)
            if self.derivatives.ndim == 1:
                self.derivatives = self.derivatives[:, None]
            if self.derivatives.shape != self.states.shape:
                raise ValueError("derivatives must match states in shape")
            if not np.all(np.isfinite(self.derivatives)):
                raise ValueError("derivatives contain non-finite entries")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def m(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    def replace(self, **changes) -> "TrajectoryData":
        kw = dict(dt=self.dt, states=self.states, t0=self.t0, derivatives=self.derivatives, meta=dict(self.meta))
        kw.update(changes)
        return TrajectoryData(**kw)


def rhs(model: SparseDelayModel, x, x_tau, singular_floor: float = SINGULAR_FLOOR) -> np.ndarray:
    """Right-hand side sum_k c_k f_k(x, x_tau) of every equation."""
    out = np.zeros(model.m)
    for e, eq in enumerate(model.equations):
        for wt in eq:
            out[e] += wt.coef * evaluate_term(wt.term, x, x_tau, singular_floor)
    return out


def _hermite_weights(theta: float):
    t2 = theta * theta
    t3 = t2 * theta
    return (2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + theta, -2 * t3 + 3 * t2, t3 - t2)


def _delay_in_steps(delay: float, dt: float) -> float:
    d = delay / dt
    r = round(d)
    return float(r) if abs(d - r) <= 1e-9 * max(1.0, abs(d)) else d


@dataclass
class BatchResult:
    states: np.ndarray  # (n+1, B, m); NaN after a draw fails
    failed_at: np.ndarray  # (B,) step index of failure, -1 if none
    reason: list  # per draw: None, "diverged" or "singular: <term>"


def integrate_batch(
    terms: Sequence[TermDescriptor],
    coefs: np.ndarray,
    history: np.ndarray,
    delay: float,
    dt: float,
    n_steps: int,
    overflow: float = OVERFLOW_BOUND,
    singular_floor: float = SINGULAR_FLOOR,
) -> BatchResult:
    """RK4 method of steps for B models sharing a term list and a delay.

    ``coefs`` is (B, m, K); ``history`` is (B, m). The step equals ``dt``.
    Delayed values come from cubic Hermite interpolation of the stored
    (state, derivative) pairs; for a delay that is a multiple of ``dt/2``
    every stage lands on a grid point or a fixed interior fraction.
    Draws that overflow or hit a singular reciprocal are frozen and flagged
    rather than aborting the batch.
    """
    coefs = np.asarray(coefs, dtype=float)
    history = np.asarray(history, dtype=float)
    B, m, K = coefs.shape
    if history.shape != (B, m):
        raise ValueError(f"history must be {(B, m)}, got {history.shape}")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    d = _delay_in_steps(delay, dt)
    if 0 < d < 1:
        raise ValueError("delay must be 0 or at least dt")
    recips = [k for k, t in enumerate(terms) if t.kind in _RECIPROCALS]

    y = np.full((n_steps + 1, B, m), np.nan)
    der = np.zeros((n_steps + 1, B, m))
    y[0] = history
    alive = np.ones(B, dtype=bool)
    failed_at = np.full(B, -1, dtype=int)
    reason = [None] * B

    # Each stage c in {0, 1/2, 1} reads the delayed state at grid position
    # n + c - d = n + offset + frac; offset and frac do not depend on n.
    stages = []
    for c in (0.0, 0.5, 1.0):
        pos = c - d
        off = math.floor(pos)
        frac = pos - off
        stages.append((off, frac, _hermite_weights(frac) if frac else None))

    def delayed(n, stage):
        if d == 0:
            return None
        off, frac, w = stages[stage]
        k = n + off
        if k + (1 if frac else 0) <= 0:
            return history
        if not frac:
            return y[k]
        return w[0] * y[k] + w[1] * dt * der[k] + w[2] * y[k + 1] + w[3] * dt * der[k + 1]

    def f(x, xd, n):
        if xd is None:
            xd = x
        vals = np.empty((B, K))
        for k, t in enumerate(terms):
            vals[:, k] = _raw_value(t, x, xd)
        for k in recips:
            u = _operand(terms[k], x, xd)
            bad = alive & (np.abs(u) < singular_floor)
            for b in np.flatnonzero(bad):
                _fail(b, n, f"singular: {terms[k]}")
        vals[~alive] = 0.0
        return np.einsum("bek,bk->be", coefs, vals)

    def _fail(b, n, why):
        alive[b] = False
        failed_at[b] = n
        reason[b] = why

    h = dt
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for n in range(n_steps):
            x = y[n]
            k1 = f(x, delayed(n, 0), n)
            der[n] = k1
            xd_half = delayed(n, 1)
            k2 = f(x + 0.5 * h * k1, xd_half, n)
            k3 = f(x + 0.5 * h * k2, xd_half, n)
            k4 = f(x + h * k3, delayed(n, 2), n)
            xn = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = alive & ~np.all(np.isfinite(xn) & (np.abs(xn) <= overflow), axis=1)
            for b in np.flatnonzero(bad):
                _fail(b, n + 1, "diverged")
            xn[~alive] = 0.0
            y[n + 1] = xn
        x = y[n_steps]
        der[n_steps] = f(x, delayed(n_steps, 0), n_steps)

    for b in range(B):
        if failed_at[b] >= 0:
            y[failed_at[b]:, b] = np.nan
    return BatchResult(y, failed_at, reason)


def simulate(
    model: SparseDelayModel,
    history,
    t_end: float,
    dt: float,
    t0: float = 0.0,
    overflow: float = OVERFLOW_BOUND,
    singular_floor: float = SINGULAR_FLOOR,
) -> TrajectoryData:
    """Integrate ``model`` from constant ``history`` and sample every ``dt``.

    Returns round(t_end/dt) + 1 samples starting at ``t0``. Raises
    :class:`Diverged` when any state leaves [-overflow, overflow] and
    :class:`SingularOperand` when a reciprocal term's operand hits zero.
    """
    if not t_end > 0:
        raise ValueError("t_end must be > 0")
    history = np.broadcast_to(np.asarray(history, dtype=float), (model.m,)).copy()
    terms = model.terms()
    coefs = model.coefficient_matrix(terms)[None]
    n_steps = int(round(t_end / dt))
    res = integrate_batch(terms, coefs, history[None], model.delay, dt, n_steps, overflow, singular_floor)
    if res.failed_at[0] >= 0:
        t_fail = t0 + res.failed_at[0] * dt
        why = res.reason[0]
        if why.startswith("singular"):
            raise SingularOperand(why.split(": ", 1)[1], 0.0)
        raise Diverged(t_fail, overflow)
    return TrajectoryData(dt=dt, states=res.states[:, 0, :], t0=t0)
