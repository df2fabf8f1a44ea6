"""Noise injection, finite-difference derivatives and zero-phase smoothing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .dde_core import TrajectoryData
from .errors import CutoffOutOfRange, TooShort


@dataclass(frozen=True)
class NoiseSpec:
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not self.fraction >= 0:
            raise ValueError(f"noise fraction must be >= 0, got {self.fraction}")


@dataclass(frozen=True)
class FilterSpec:
    order: int = 4
    cutoff: float = 0.1  # fraction of Nyquist

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise ValueError(f"filter order must be a positive integer, got {self.order}")
        if not 0 < self.cutoff < 1:
            raise CutoffOutOfRange(f"cutoff must lie in (0, 1) as a fraction of Nyquist, got {self.cutoff}")


def add_noise(data: TrajectoryData, spec: NoiseSpec) -> TrajectoryData:
    """Add white Gaussian noise scaled to each channel's sample std.

    Channel j draws from its own substream of ``spec.seed``, so the standard
    normal draws are shared across noise fractions for a given seed.
    """
    if spec.fraction == 0:
        return data.replace(states=data.states.copy())
    streams = np.random.SeedSequence(spec.seed).spawn(data.m)
    noisy = data.states.copy()
    for j, ss in enumerate(streams):
        scale = spec.fraction * np.std(data.states[:, j], ddof=1)
        noisy[:, j] += scale * np.random.default_rng(ss).standard_normal(data.n)
    meta = dict(data.meta, noise_fraction=spec.fraction, noise_seed=spec.seed)
    return data.replace(states=noisy, meta=meta)


# Five-point first-derivative stencils (numerators over 12*dt), exact for
# polynomials up to degree 4.
_CENTRAL = np.array([1.0, -8.0, 0.0, 8.0, -1.0])
_FORWARD_0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0])
_FORWARD_1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0])


def five_point_derivative(x: np.ndarray, dt: float) -> np.ndarray:
    """Derivative along axis 0 with the 5-point stencils above."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 7:
        raise TooShort(f"need at least 7 samples for the 5-point stencil, got {n}")
    d = np.empty_like(x)
    d[2:-2] = x[:-4] - 8.0 * x[1:-3] + 8.0 * x[3:-1] - x[4:]
    head = x[:5]
    d[0] = np.tensordot(_FORWARD_0, head, axes=1)
    d[1] = np.tensordot(_FORWARD_1, head, axes=1)
    # backward stencils: reverse the samples and flip the sign
    tail = x[-5:][::-1]
    d[-1] = -np.tensordot(_FORWARD_0, tail, axes=1)
    d[-2] = -np.tensordot(_FORWARD_1, tail, axes=1)
    return d / (12.0 * dt)


def differentiate(data: TrajectoryData) -> TrajectoryData:
    return data.replace(derivatives=five_point_derivative(data.states, data.dt))


def butterworth_sos(spec: FilterSpec) -> np.ndarray:
    # bilinear transform of the analog Butterworth prototype, prewarped at the cutoff
    return signal.butter(spec.order, spec.cutoff, btype="low", output="sos")


def lowpass(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Forward-backward Butterworth low-pass along axis 0."""
    x = np.asarray(x, dtype=float)
    pad = 3 * spec.order
    if x.shape[0] <= pad:
        raise TooShort(f"need more than {pad} samples to filter, got {x.shape[0]}")
    return signal.sosfiltfilt(butterworth_sos(spec), x, axis=0, padtype="odd", padlen=pad)


def butterworth_zero_phase(data: TrajectoryData, spec: FilterSpec) -> TrajectoryData:
    meta = dict(data.meta, filter_order=spec.order, filter_cutoff=spec.cutoff)
    return data.replace(states=lowpass(data.states, spec), derivatives=None, meta=meta)


def prepare(data: TrajectoryData, spec: FilterSpec | None) -> TrajectoryData:
    """Filter the states (unless ``spec`` is None) and estimate derivatives."""
    if spec is not None:
        data = butterworth_zero_phase(data, spec)
    return differentiate(data)
