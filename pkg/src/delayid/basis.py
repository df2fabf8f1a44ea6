"""Candidate catalogs, delay-augmented libraries and the correlation gate."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .dde_core import SINGULAR_FLOOR, TermDescriptor, TermKind, TrajectoryData, evaluate_term
from .errors import CorrelationGateError, DelayTooLarge, SingularOperand, TermSyntaxError

log = logging.getLogger(__name__)

_FUNCS = {
    "sin": TermKind.SIN,
    "cos": TermKind.COS,
    "exp": TermKind.EXP_POS,
    "hill": TermKind.HILL,
}


class _Cursor:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self, s):
        self.skip()
        return self.text.startswith(s, self.pos)

    def take(self, s):
        if self.peek(s):
            self.pos += len(s)
            return True
        return False

    def expect(self, s):
        if not self.take(s):
            self.fail(f"expected '{s}'")

    def fail(self, reason):
        self.skip()
        raise TermSyntaxError(self.text, self.pos, reason)

    def integer(self):
        self.skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if start == self.pos:
            self.fail("expected an integer")
        return int(self.text[start:self.pos])

    def var(self):
        """``x<i>`` or ``x<i>_tau``; returns (0-based index, delayed)."""
        if not self.take("x"):
            self.fail("expected a state variable like x1")
        start = self.pos
        i = self.integer()
        if i < 1:
            self.pos = start
            self.fail("state variables are numbered from 1")
        delayed = self.text.startswith("_tau", self.pos)
        if delayed:
            self.pos += 4
        return i - 1, delayed


def parse_term(text: str) -> TermDescriptor:
    """Parse one catalog entry.

    Accepted forms (``v`` is ``x<i>`` or ``x<i>_tau``, states numbered from 1)::

        v   v^2   x<i>*x<i>_tau   exp(v)   exp(-v)   sin(v)   cos(v)
        1/v   1/v^2   hill(v, p)
    """
    c = _Cursor(text)
    c.skip()
    if c.take("1/"):
        i, delayed = c.var()
        kind = TermKind.RECIPROCAL_SQUARE if c.take("^2") else TermKind.RECIPROCAL
        term = TermDescriptor(kind, i, delayed)
    elif c.peek("x"):
        i, delayed = c.var()
        if c.take("^"):
            start = c.pos
            if c.integer() != 2:
                c.pos = start
                c.fail("only the power 2 is supported")
            term = TermDescriptor(TermKind.SQUARE, i, delayed)
        elif c.take("*"):
            if delayed:
                c.fail("write cross products as x<i>*x<i>_tau")
            start = c.pos
            j, dj = c.var()
            if j != i or not dj:
                c.pos = start
                c.fail(f"cross product partner must be x{i + 1}_tau")
            term = TermDescriptor(TermKind.CROSS, i)
        else:
            term = TermDescriptor(TermKind.IDENTITY, i, delayed)
    else:
        for name, kind in _FUNCS.items():
            if c.take(name + "("):
                break
        else:
            c.fail("unknown term")
        if kind is TermKind.EXP_POS and c.take("-"):
            kind = TermKind.EXP_NEG
        i, delayed = c.var()
        power = None
        if kind is TermKind.HILL:
            c.expect(",")
            start = c.pos
            power = c.integer()
            if power < 1:
                c.pos = start
                c.fail("hill power must be >= 1")
        c.expect(")")
        term = TermDescriptor(kind, i, delayed, power)
    c.skip()
    if c.pos != len(text):
        c.fail("unexpected trailing input")
    return term


@dataclass(frozen=True)
class CandidateCatalog:
    terms: tuple[TermDescriptor, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("catalog needs at least one term")
        names = self.names
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate catalog terms: {dup}")

    @classmethod
    def parse(cls, strings: Iterable[str]) -> "CandidateCatalog":
        return cls(tuple(parse_term(s) for s in strings))

    @property
    def names(self) -> list[str]:
        return [str(t) for t in self.terms]

    def __len__(self):
        return len(self.terms)

    def index(self, name: str) -> int:
        return self.names.index(str(parse_term(name)))

    def without(self, names: Iterable[str]) -> "CandidateCatalog":
        drop = {str(parse_term(n)) for n in names}
        unknown = drop - set(self.names)
        if unknown:
            raise KeyError(f"not in catalog: {sorted(unknown)}")
        return CandidateCatalog(tuple(t for t in self.terms if str(t) not in drop))

    def check(self, m: int) -> None:
        for t in self.terms:
            t.check(m)


@dataclass
class EvaluatedLibrary:
    tau_index: int
    matrix: np.ndarray  # (N_eff, K)
    target: np.ndarray | None  # (N_eff,)
    row_offset: int  # index of the first retained sample
    names: list[str]

    @property
    def n_eff(self) -> int:
        return self.matrix.shape[0]


@dataclass
class LagStatistics:
    """Regression sufficient statistics for a run of consecutive delay indices."""

    lo: int
    gram: np.ndarray  # (W, K, K)
    lty: np.ndarray  # (W, K)
    yty: np.ndarray  # (W,)
    n: np.ndarray  # (W,) rows used at each index

    @property
    def hi(self) -> int:
        return self.lo + self.n.shape[0] - 1

    def window(self, lo: int, hi: int) -> "LagStatistics":
        a, b = lo - self.lo, hi - self.lo + 1
        if a < 0 or hi > self.hi:
            raise IndexError(f"({lo}, {hi}) outside ({self.lo}, {self.hi})")
        return LagStatistics(lo, self.gram[a:b], self.lty[a:b], self.yty[a:b], self.n[a:b])


def augment(data: TrajectoryData, tau_index: int, n_terms: int = 1, trim: int = 0):
    """Pair each sample with its delayed copy.

    Returns ``(x, x_delayed, y)`` for rows ``tau_index .. N-1-trim``; ``y`` is
    None when the data carry no derivatives.
    """
    n = data.n
    if tau_index < 1:
        raise ValueError(f"delay index must be >= 1, got {tau_index}")
    n_eff = n - tau_index - trim
    if tau_index > n - 2 or n_eff < n_terms:
        raise DelayTooLarge(f"delay index {tau_index} leaves {n_eff} rows for {n_terms} candidate terms")
    stop = n - trim
    x = data.states[tau_index:stop]
    xd = data.states[: stop - tau_index]
    y = None if data.derivatives is None else data.derivatives[tau_index:stop]
    return x, xd, y


HISTORY_MODES = ("drop", "constant")


class LibraryBuilder:
    """Slices pre-evaluated term columns into L_tau for any delay index.

    Every term column is evaluated once over the whole series; the library
    for delay index ``j`` is then a set of slices (products for cross terms).

    ``history`` decides what happens to rows whose delayed sample falls
    before the first observation. ``"drop"`` removes them, so index ``j``
    uses rows ``max(j, trim) .. N-1-trim``. ``"constant"`` holds the first
    observation for all earlier times, so every index uses the same rows
    ``trim .. N-1-trim``.
    """

    def __init__(self, data: TrajectoryData, catalog: CandidateCatalog, channel: int = 0, trim: int = 0,
                 singular_floor: float = SINGULAR_FLOOR, cache_size: int = 256, history: str = "drop",
                 history_level=None):
        catalog.check(data.m)
        if history not in HISTORY_MODES:
            raise ValueError(f"history must be one of {HISTORY_MODES}, got {history!r}")
        if trim < 0 or 2 * trim >= data.n:
            raise ValueError(f"boundary trim {trim} leaves no rows of {data.n}")
        self.data = data
        self.catalog = catalog
        self.channel = channel
        self.trim = int(trim)
        self.history = history
        self.stop = data.n - self.trim
        # P leading pad samples so that any delay index < N can be sliced
        self.pad = data.n
        x = data.states
        level = x[:1] if history_level is None else np.asarray(history_level, dtype=float).reshape(1, data.m)
        xpad = np.vstack([np.repeat(level, self.pad, axis=0), x])
        self._full = []
        for t in catalog.terms:
            if t.kind is TermKind.CROSS:
                col = xpad[:, t.var_index]
            else:
                # delayed terms are f applied to the series, shifted at slice time
                plain = TermDescriptor(t.kind, t.var_index, False, t.power)
                col = evaluate_term(plain, xpad, xpad, singular_floor)
            if not np.all(np.isfinite(col)):
                raise ValueError(f"candidate {t} is non-finite on this dataset")
            col = np.array(col, dtype=float)
            if history == "drop":
                col[:self.pad] = 0.0
            self._full.append(col)
        self.target_full = None if data.derivatives is None else data.derivatives[:, channel]
        self.library = functools.lru_cache(maxsize=cache_size)(self._library)

    @property
    def n_terms(self) -> int:
        return len(self.catalog)

    def row_start(self, tau: int) -> int:
        return self.trim if self.history == "constant" else max(int(tau), self.trim)

    def column(self, k: int, tau: int, start: int | None = None) -> np.ndarray:
        """Column k of L_tau over rows ``start..N-1-trim`` (default: row_start(tau))."""
        start = self.row_start(tau) if start is None else start
        t = self.catalog.terms[k]
        full = self._full[k]
        P, S = self.pad, self.stop
        if t.kind is TermKind.CROSS:
            return full[P + start:P + S] * full[P + start - tau:P + S - tau]
        if t.delayed:
            return full[P + start - tau:P + S - tau]
        return full[P + start:P + S]

    def columns(self, cols: Sequence[int], tau: int, start: int | None = None) -> np.ndarray:
        start = self.row_start(tau) if start is None else start
        out = np.empty((self.stop - start, len(cols)))
        for c, k in enumerate(cols):
            out[:, c] = self.column(k, tau, start)
        return out

    def target(self, start: int) -> np.ndarray:
        if self.target_full is None:
            raise ValueError("data carry no derivatives")
        return self.target_full[start:self.stop]

    def check_rows(self, tau: int) -> None:
        if tau < 1:
            raise ValueError(f"delay index must be >= 1, got {tau}")
        n_eff = self.stop - self.row_start(tau)
        if tau > self.data.n - 2 or n_eff < self.n_terms:
            raise DelayTooLarge(f"delay index {tau} leaves {n_eff} rows for {self.n_terms} candidate terms")

    def _factors(self, k: int):
        """Padded factors of column k: its value at row i is u[i] * v[i - j]; None means ones."""
        t = self.catalog.terms[k]
        full = self._full[k]
        if t.kind is TermKind.CROSS:
            return full, full
        return (None, full) if t.delayed else (full, None)

    def lag_statistics(self, lo: int, hi: int) -> "LagStatistics":
        """Gram matrices, L^T y, y^T y and row counts for every delay index lo..hi.

        Every Gram entry is a sum over rows of U[i] V[i - j], a
        cross-correlation at lag j, so all lags come from one FFT per pair
        of columns. With ``history="drop"`` the pad of V is zero, which
        removes rows i < j from those sums.
        """
        self.check_rows(hi)
        if lo < 1:
            raise ValueError(f"delay index must be >= 1, got {lo}")
        if self.target_full is None:
            raise ValueError("data carry no derivatives")
        P, S = self.pad, self.stop
        lags = np.arange(lo, hi + 1)
        starts = np.array([self.row_start(j) for j in lags])
        K = self.n_terms
        y = np.zeros(P + self.data.n)
        y[P:] = self.target_full
        factors = [self._factors(k) for k in range(K)] + [(y, None)]
        rows = np.zeros(P + self.data.n, dtype=bool)
        rows[P + self.trim:P + S] = True

        def mul(a, b):
            if a is None:
                return b
            return a if b is None else a * b

        def lagged_sum(U, V):
            if V is None:
                csum = np.concatenate([[0.0], np.cumsum(U[P:P + S])])
                return csum[S] - csum[starts]
            if U is None:
                csum = np.concatenate([[0.0], np.cumsum(V)])
                return csum[P + S - lags] - csum[P + starts - lags]
            Um = np.where(rows, U, 0.0)[P:P + S]
            # sum_i Um[i] V[P + i - j]  =  (Um * reversed V)[...]
            full = fftconvolve(Um, V[:P + S][::-1])
            return full[S - 1 + lags]

        out = np.empty((lags.size, K + 1, K + 1))
        for a in range(K + 1):
            for b in range(a, K + 1):
                ua, va = factors[a]
                ub, vb = factors[b]
                U, V = mul(ua, ub), mul(va, vb)
                if U is None and V is None:
                    col = (S - starts).astype(float)
                else:
                    col = lagged_sum(U, V)
                out[:, a, b] = col
                out[:, b, a] = col
        return LagStatistics(lo, out[:, :K, :K], out[:, :K, K], out[:, K, K], S - starts)

    def _library(self, tau: int) -> EvaluatedLibrary:
        self.check_rows(tau)
        start = self.row_start(tau)
        mat = self.columns(range(self.n_terms), tau, start)
        y = None if self.target_full is None else self.target(start)
        return EvaluatedLibrary(tau, mat, y, start, self.catalog.names)


def evaluate_library(data: TrajectoryData, catalog: CandidateCatalog, tau_index: int, channel: int = 0,
                     trim: int = 0, history: str = "drop") -> EvaluatedLibrary:
    """L_tau for one delay index; see :class:`LibraryBuilder` for the row range."""
    if tau_index > data.n - 2:
        raise DelayTooLarge(f"delay index {tau_index} exceeds the series length {data.n}")
    return LibraryBuilder(data, catalog, channel, trim, history=history).library(tau_index)


def correlation_screen(lib: EvaluatedLibrary, threshold: float = 0.99) -> list[tuple[str, str, float]]:
    """Column pairs with |Pearson r| >= threshold, as (name_i, name_j, r), i < j.

    Constant columns have no defined correlation and are skipped.
    """
    a = lib.matrix
    centered = a - a.mean(axis=0)
    norms = np.sqrt(np.sum(centered * centered, axis=0))
    ok = norms > 1e-300 * max(1.0, a.shape[0])
    pairs = []
    K = a.shape[1]
    for i in range(K):
        if not ok[i]:
            continue
        for j in range(i + 1, K):
            if not ok[j]:
                continue
            r = float(centered[:, i] @ centered[:, j] / (norms[i] * norms[j]))
            r = max(-1.0, min(1.0, r))
            if abs(r) >= threshold:
                pairs.append((lib.names[i], lib.names[j], r))
    return pairs


def resolve_correlations(catalog: CandidateCatalog, pairs, drop: Sequence[str] = (), auto_drop: bool = False):
    """Apply the configured resolution to a screening report.

    Returns ``(catalog, dropped)``. Terms in ``drop`` are removed first; any
    pair still fully present afterwards either triggers auto-drop of its
    higher-indexed member or raises :class:`CorrelationGateError`.
    """
    dropped = [str(parse_term(d)) for d in drop]
    catalog = catalog.without(dropped) if dropped else catalog
    alive = set(catalog.names)
    pending = [(a, b, r) for a, b, r in pairs if a in alive and b in alive]
    if pending and not auto_drop:
        raise CorrelationGateError(pending)
    order = {n: i for i, n in enumerate(catalog.names)}
    for a, b, r in pending:
        if a in alive and b in alive:
            victim = a if order[a] > order[b] else b
            log.warning("auto-dropping %s (|r| = %.6f with %s)", victim, abs(r), a if victim == b else b)
            alive.discard(victim)
            dropped.append(victim)
    if len(alive) != len(catalog):
        catalog = CandidateCatalog(tuple(t for t in catalog.terms if str(t) in alive))
    return catalog, dropped


def reject_singular(data: TrajectoryData, catalog: CandidateCatalog, singular_floor: float = SINGULAR_FLOOR):
    """Names of reciprocal terms whose operand touches zero on ``data``."""
    bad = []
    for t in catalog.terms:
        try:
            evaluate_term(TermDescriptor(t.kind, t.var_index, False, t.power), data.states, data.states, singular_floor)
        except SingularOperand:
            bad.append(str(t))
    return bad
