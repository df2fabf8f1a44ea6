"""Re-simulate discovered models: point predictions, uncertainty bands and phase portraits."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import CandidateCatalog
from .dde_core import SparseDelayModel, TrajectoryData, integrate_batch, simulate
from .errors import AllDrawsDiverged
from .gibbs import ChainRecord

log = logging.getLogger(__name__)


def predict(model: SparseDelayModel, history, t_end: float, dt: float) -> TrajectoryData:
    """Simulate the mean-coefficient model from a constant history."""
    return simulate(model, history, t_end, dt)


@dataclass
class Band:
    t: np.ndarray
    mean: np.ndarray  # (n, m)
    lo: np.ndarray
    hi: np.ndarray
    n_draws: int
    n_diverged: int
    draw_iterations: np.ndarray


def predict_with_uncertainty(chains: ChainRecord | Sequence[ChainRecord], catalog: CandidateCatalog, history,
                             t_end: float, dt: float, n_draws: int = 200, rng=None) -> Band:
    """Simulate ``n_draws`` post-burn-in iterates and reduce them to a mean and a 95% band.

    With one chain per equation, each draw uses the same iteration index in
    every chain and the delay indices of the chains are averaged. Draws that
    diverge or hit a singular reciprocal are dropped from the band and counted.
    """
    if isinstance(chains, ChainRecord):
        chains = [chains]
    chains = sorted(chains, key=lambda c: c.channel)
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    n_mc = len(chains[0])
    if any(len(c) != n_mc for c in chains):
        raise ValueError("chains must have equal length")
    m = len(chains)
    first_post = n_mc - n_mc // 2
    its = np.sort(rng.integers(first_post, n_mc, size=n_draws))
    coefs = np.stack([np.stack([c.theta[i] for c in chains]) for i in its])  # (B, m, K)
    delays = np.array([np.mean([c.tau[i] for c in chains]) for i in its]) * dt
    history = np.broadcast_to(np.asarray(history, dtype=float), (m,))
    n_steps = int(round(t_end / dt))
    terms = list(catalog.terms)

    # the delay is frozen over the post-burn-in half, so draws normally share it
    states = np.full((n_steps + 1, n_draws, m), np.nan)
    failed = np.zeros(n_draws, dtype=bool)
    for d in np.unique(delays):
        sel = np.flatnonzero(delays == d)
        res = integrate_batch(terms, coefs[sel], np.tile(history, (sel.size, 1)), float(d), dt, n_steps)
        states[:, sel] = res.states
        failed[sel] = res.failed_at >= 0
    n_bad = int(failed.sum())
    if n_bad == n_draws:
        raise AllDrawsDiverged(f"all {n_draws} posterior draws failed to integrate")
    if n_bad:
        log.warning("%d of %d posterior draws diverged and were excluded from the band", n_bad, n_draws)
    ok = states[:, ~failed]
    lo, hi = np.percentile(ok, [2.5, 97.5], axis=1)
    t = np.arange(n_steps + 1) * dt
    return Band(t, ok.mean(axis=1), lo, hi, n_draws, n_bad, its)


def phase_portrait(traj: TrajectoryData, delay: float, channel: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Points (x(t), x(t - delay)) for every sample with t - delay inside the record.

    The delayed coordinate is linearly interpolated on the sampling grid.
    """
    x = traj.states[:, channel]
    t = traj.times - traj.t0
    keep = t >= delay - 1e-12 * max(1.0, delay)
    xd = np.interp(t[keep] - delay, t, x)
    return x[keep], xd


def bounding_box(points: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """[[xmin, xmax], [ymin, ymax]]."""
    return np.array([[np.min(p), np.max(p)] for p in points])


def occupied_cells(points, box: np.ndarray, bins: int = 50) -> set[tuple[int, int]]:
    """Grid cells of a ``bins`` x ``bins`` partition of ``box`` visited by the points."""
    idx = []
    for p, (a, b) in zip(points, box):
        span = b - a if b > a else 1.0
        idx.append(np.clip(((np.asarray(p) - a) / span * bins).astype(int), 0, bins - 1))
    return set(zip(idx[0].tolist(), idx[1].tolist()))


def portrait_overlap(points, reference, bins: int = 50) -> float:
    """Jaccard index of occupied cells, on a grid spanning both point sets."""
    b1, b2 = bounding_box(points), bounding_box(reference)
    box = np.column_stack([np.minimum(b1[:, 0], b2[:, 0]), np.maximum(b1[:, 1], b2[:, 1])])
    a, b = occupied_cells(points, box, bins), occupied_cells(reference, box, bins)
    return len(a & b) / len(a | b) if a | b else 1.0


def write_band_csv(path, band: Band, truth: np.ndarray | None = None) -> None:
    m = band.mean.shape[1]
    head = ["t"]
    for j in range(m):
        s = "" if m == 1 else f"_x{j + 1}"
        head += [f"mean{s}", f"lo95{s}", f"hi95{s}"] + ([f"truth{s}"] if truth is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for i, t in enumerate(band.t):
            row = [repr(float(t))]
            for j in range(m):
                row += [repr(float(band.mean[i, j])), repr(float(band.lo[i, j])), repr(float(band.hi[i, j]))]
                if truth is not None:
                    row.append(repr(float(truth[i, j])))
            w.writerow(row)


def write_phase_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "x_delayed"])
        for a, b in zip(*points):
            w.writerow([repr(float(a)), repr(float(b))])
