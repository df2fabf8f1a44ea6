"""Reduce sampler output to inclusion probabilities, coefficients and a model."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import CandidateCatalog
from .dde_core import SparseDelayModel, WeightedTerm
from .errors import EmptyModel
from .gibbs import ChainRecord

log = logging.getLogger(__name__)


@dataclass
class PosteriorSummary:
    """Per-equation summary over the post-burn-in half of a chain.

    ``weight_mean`` and ``weight_sd`` are taken over the iterations where
    the term was included (conditional on inclusion), not over all
    iterations; a term never included gets mean 0 and sd 0.
    """

    names: list[str]
    pip: np.ndarray
    weight_mean: np.ndarray
    weight_sd: np.ndarray
    inclusions: np.ndarray  # integer counts behind pip
    tau_index: int
    tau_seconds: float | None
    n_post: int
    pip_threshold: float = 0.5
    channel: int = 0
    retained: np.ndarray = field(init=False)

    def __post_init__(self):
        self.retained = np.flatnonzero(self.pip > self.pip_threshold)

    @property
    def empty(self) -> bool:
        return self.retained.size == 0

    def coefficients(self) -> np.ndarray:
        """Emitted weights: the conditional mean for retained terms, 0 elsewhere."""
        c = np.zeros_like(self.weight_mean)
        c[self.retained] = self.weight_mean[self.retained]
        return c

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "tau_index": self.tau_index,
            "tau_seconds": self.tau_seconds,
            "n_post": self.n_post,
            "pip_threshold": self.pip_threshold,
            "weight_summary": "conditional on inclusion",
            "terms": [
                {
                    "name": n,
                    "pip": float(self.pip[k]),
                    "inclusions": int(self.inclusions[k]),
                    "mean": float(self.weight_mean[k]),
                    "sd": float(self.weight_sd[k]),
                    "retained": bool(k in set(self.retained.tolist())),
                }
                for k, n in enumerate(self.names)
            ],
        }


def summarize(chain: ChainRecord, pip_threshold: float = 0.5, dt: float | None = None) -> PosteriorSummary:
    """PIPs and inclusion-conditional weight statistics over the last half of the chain.

    Terms are retained when pip > ``pip_threshold`` (strictly). An empty
    result emits an :class:`EmptyModel` warning rather than raising.
    """
    n_mc = len(chain)
    post = slice(n_mc - n_mc // 2, n_mc)
    Z = chain.Z[post].astype(bool)
    theta = chain.theta[post]
    n_post = Z.shape[0]
    counts = Z.sum(axis=0)
    pip = counts / n_post
    mean = np.zeros(Z.shape[1])
    sd = np.zeros(Z.shape[1])
    for k in np.flatnonzero(counts):
        w = theta[Z[:, k], k]
        mean[k] = w.mean()
        sd[k] = w.std(ddof=1) if w.size > 1 else 0.0
    tau = int(chain.tau[-1])
    out = PosteriorSummary(list(chain.names), pip, mean, sd, counts, tau,
                           None if dt is None else tau * dt, n_post, pip_threshold, chain.channel)
    if out.empty:
        warnings.warn(f"channel {chain.channel}: no term has pip > {pip_threshold}", EmptyModel, stacklevel=2)
    return out


def to_model(summaries: PosteriorSummary | Sequence[PosteriorSummary], catalog: CandidateCatalog,
             dt: float) -> SparseDelayModel:
    """Model with one equation per summary (ordered by channel).

    The delay is tau_index * dt; with several equations the per-equation
    indices are averaged first.
    """
    if isinstance(summaries, PosteriorSummary):
        summaries = [summaries]
    summaries = sorted(summaries, key=lambda s: s.channel)
    eqs = []
    for s in summaries:
        if list(s.names) != catalog.names:
            raise ValueError(f"summary for channel {s.channel} was built on a different catalog")
        eqs.append([WeightedTerm(catalog.terms[k], float(s.weight_mean[k]), float(s.weight_sd[k]))
                    for k in s.retained])
    taus = [s.tau_index for s in summaries]
    delay = taus[0] * dt if len(taus) == 1 else float(np.mean(taus)) * dt
    return SparseDelayModel(len(eqs), eqs, delay)


def parameter_error(model: SparseDelayModel, truth: SparseDelayModel) -> float:
    """Mean squared coefficient difference over the union of both term sets.

    A term present in only one model contributes its full squared
    coefficient. Two empty models give 0.
    """
    if model.m != truth.m:
        raise ValueError(f"models have different state dimension ({model.m} vs {truth.m})")
    sq = []
    for a, b in zip(model.equations, truth.equations):
        ca, cb = {}, {}
        for wt in a:
            ca[wt.term] = ca.get(wt.term, 0.0) + wt.coef
        for wt in b:
            cb[wt.term] = cb.get(wt.term, 0.0) + wt.coef
        for t in ca.keys() | cb.keys():
            sq.append((ca.get(t, 0.0) - cb.get(t, 0.0)) ** 2)
    return float(np.mean(sq)) if sq else 0.0


def _fmt(x: float, digits: int) -> str:
    return f"{x:.{digits}g}"


def render_equations(model: SparseDelayModel, digits: int = 4) -> list[str]:
    """One line per equation, e.g. ``dx1/dt = 9.78*exp(-x1_tau) - 0.99*x1, tau = 0.99``."""
    lines = []
    for e, eq in enumerate(model.equations):
        parts = []
        for wt in eq:
            mag = _fmt(abs(wt.coef), digits)
            if not parts:
                parts.append(("-" if wt.coef < 0 else "") + f"{mag}*{wt.term}")
            else:
                parts.append(("- " if wt.coef < 0 else "+ ") + f"{mag}*{wt.term}")
        rhs = " ".join(parts) if parts else "0"
        lines.append(f"dx{e + 1}/dt = {rhs}, tau = {_fmt(model.delay, digits)}")
    return lines


def model_to_dict(model: SparseDelayModel) -> dict:
    return {
        "m": model.m,
        "delay": model.delay,
        "equations": [[{"term": str(wt.term), "coef": wt.coef, "sd": wt.sd} for wt in eq] for eq in model.equations],
    }


def model_from_dict(d: dict) -> SparseDelayModel:
    from .basis import parse_term

    eqs = [[WeightedTerm(parse_term(t["term"]), float(t["coef"]), float(t.get("sd", 0.0))) for t in eq]
           for eq in d["equations"]]
    return SparseDelayModel(int(d["m"]), eqs, float(d["delay"]))


def report(summaries: Sequence[PosteriorSummary], catalog: CandidateCatalog, dt: float) -> dict:
    """JSON-ready report: per-equation pip tables, the averaged model and its rendering."""
    model = to_model(summaries, catalog, dt)
    return {
        "dt": dt,
        "per_equation": [s.to_dict() for s in sorted(summaries, key=lambda s: s.channel)],
        "tau_index_per_equation": [s.tau_index for s in sorted(summaries, key=lambda s: s.channel)],
        "model": model_to_dict(model),
        "equations": render_equations(model),
    }


def write_report(path, rep: dict) -> None:
    with open(path, "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=False)
        fh.write("\n")
