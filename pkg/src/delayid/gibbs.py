"""Gibbs sampler over sparse weights, hyperparameters and the delay index.

Each iteration draws, in order: the delay index (multinomial over a window
that only ever shrinks), the inclusion vector Z (collapsed over weights and
noise variance), the noise variance, the slab variance, the inclusion rate,
the Dirichlet weights over delay indices and finally the weights.

All probability ratios are handled as log differences. The Gaussian
posterior of the active weights is parameterized by a Cholesky factor of
its precision; the covariance is never formed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit, gammaln, logsumexp

from .basis import CandidateCatalog, LagStatistics, LibraryBuilder
from .dde_core import TrajectoryData
from .errors import CholeskyFailure, SamplerError, WindowTooSmall, WindowTouchesZero

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Hyperparameters:
    alpha_p: float = 0.1
    beta_p: float = 0.1
    alpha_sigma: float = 1e-4
    beta_sigma: float = 1e-4
    alpha_nu: float = 0.1
    beta_nu: float = 0.1
    dirichlet_alpha: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"hyperparameter {name} must be > 0, got {value}")


@dataclass(frozen=True)
class SamplerConfig:
    window: tuple[int, int]
    n_mc: int = 2000
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    shrink_threshold: float = 1e-100
    min_window_start: int = 5
    trim: int = 0  # boundary samples excluded from the regression
    history: str = "constant"  # rows lacking a delayed sample: "constant" history or "drop"
    history_level: tuple[float, ...] | None = None  # constant history value; None: first sample
    init_nu: float | None = 0.5  # None: conditional mode given the least-squares start
    init_p0: float = 0.1
    init: str = "uniform"  # "uniform" delay with least-squares Z, or "greedy" stepwise search

    def __post_init__(self):
        if self.n_mc < 4:
            raise ValueError("n_mc must be at least 4")
        if self.history not in ("drop", "constant"):
            raise ValueError(f"history must be 'drop' or 'constant', got {self.history!r}")
        if self.trim < 0:
            raise ValueError("trim must be >= 0")
        if self.init not in ("greedy", "uniform"):
            raise ValueError(f"init must be 'greedy' or 'uniform', got {self.init!r}")


@dataclass
class SamplerState:
    tau: int
    Z: np.ndarray  # (K,) int8
    theta: np.ndarray  # (K,), exactly 0 where Z == 0
    sigma2: float
    nu: float
    p0: float
    G: np.ndarray  # probabilities over window indices lower..upper
    window: tuple[int, int]
    tau_fixed: bool = False
    counts: dict = field(default_factory=dict)  # delay index -> times sampled
    clamped: np.ndarray | None = None  # (K,) bool, Z forced to 0

    @property
    def r(self) -> int:
        return int(self.Z.sum())

    @property
    def window_indices(self) -> np.ndarray:
        return np.arange(self.window[0], self.window[1] + 1)


@dataclass
class GaussianPosteriorParams:
    mu: np.ndarray
    sigma_inv_cholesky: np.ndarray  # lower factor of L_r^T L_r + I/nu
    log_det_sigma_inv: float
    quad: float  # mu^T Sigma^{-1} mu


@dataclass
class GramStats:
    """Sufficient statistics of a regression Y ~ L theta."""

    gram: np.ndarray  # L^T L
    lty: np.ndarray  # L^T Y
    yty: float
    n: int

    @classmethod
    def from_arrays(cls, L: np.ndarray, y: np.ndarray) -> "GramStats":
        L = np.asarray(L, dtype=float)
        y = np.asarray(y, dtype=float)
        if L.ndim == 1:
            L = L[:, None]
        return cls(L.T @ L, L.T @ y, float(y @ y), y.shape[0])

    def subset(self, active: np.ndarray) -> "GramStats":
        idx = np.flatnonzero(active)
        return GramStats(self.gram[np.ix_(idx, idx)], self.lty[idx], self.yty, self.n)


@dataclass
class ChainRecord:
    tau: np.ndarray
    Z: np.ndarray
    theta: np.ndarray
    sigma2: np.ndarray
    nu: np.ndarray
    p0: np.ndarray
    window: np.ndarray  # (n_mc, 2)
    burn_end: int
    fix_start: int
    tau_fix_iteration: int | None
    names: list[str]
    channel: int = 0
    cholesky_failures: int = 0

    def __len__(self):
        return self.tau.shape[0]

    @property
    def final_tau(self) -> int:
        return int(self.tau[-1])


def gaussian_posterior(stats: GramStats, nu: float) -> GaussianPosteriorParams:
    """Posterior of the active weights: precision L^T L + I/nu, mean Sigma L^T Y."""
    r = stats.gram.shape[0]
    if r == 0:
        return GaussianPosteriorParams(np.zeros(0), np.zeros((0, 0)), 0.0, 0.0)
    prec = stats.gram + np.eye(r) / nu
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(prec) / r
        try:
            chol = np.linalg.cholesky(prec + jitter * np.eye(r))
        except np.linalg.LinAlgError as exc:
            raise CholeskyFailure(f"precision matrix not positive definite (r={r})") from exc
    if not np.all(np.isfinite(chol)):
        raise CholeskyFailure("non-finite Cholesky factor")
    mu = cho_solve((chol, True), stats.lty, check_finite=False)
    return GaussianPosteriorParams(mu, chol, 2.0 * float(np.sum(np.log(np.diag(chol)))), float(stats.lty @ mu))


def _residual_quadratic(stats: GramStats, post: GaussianPosteriorParams) -> float:
    res = stats.yty - post.quad
    if res < -1e-8 * max(stats.yty, 1e-300):
        raise CholeskyFailure(f"negative residual quadratic form {res:g}")
    return max(res, 0.0)


def log_marginal_from_stats(stats: GramStats, nu: float, hyper: Hyperparameters,
                            post: GaussianPosteriorParams | None = None) -> float:
    """log p(Y | Z, L, nu) with weights and noise variance integrated out."""
    a, b = hyper.alpha_sigma, hyper.beta_sigma
    n = stats.n
    r = stats.gram.shape[0]
    if r == 0:
        res = stats.yty
        occam = 0.0
    else:
        post = gaussian_posterior(stats, nu) if post is None else post
        res = _residual_quadratic(stats, post)
        # |Sigma|^{1/2} nu^{-r/2}: the Gaussian integral over theta_r
        occam = -0.5 * post.log_det_sigma_inv - 0.5 * r * math.log(nu)
    shape = a + 0.5 * n
    return (occam - 0.5 * n * LOG_2PI + a * math.log(b) + gammaln(shape) - gammaln(a)
            - shape * math.log(b + 0.5 * res))


def log_marginal_likelihood(Y, L_r, nu: float, hyper: Hyperparameters = Hyperparameters()) -> float:
    Y = np.asarray(Y, dtype=float)
    L_r = np.asarray(L_r, dtype=float).reshape(Y.shape[0], -1)
    return log_marginal_from_stats(GramStats.from_arrays(L_r, Y), nu, hyper)


def inclusion_probability(log_lambda: float, p0: float) -> float:
    """p0 / (p0 + lambda (1 - p0)) evaluated from log lambda."""
    return float(expit(-(log_lambda + math.log1p(-p0) - math.log(p0))))


def _inv_gamma(rng, shape, scale):
    return scale / rng.gamma(shape)


def sample_Z(state: SamplerState, stats: GramStats, hyper: Hyperparameters, rng) -> tuple[np.ndarray, int]:
    """One systematic sweep over Z_k in catalog order.

    Returns the new Z and the number of proposals skipped after a Cholesky
    failure (those keep their previous value).
    """
    Z = state.Z.copy()
    K = Z.shape[0]
    clamped = state.clamped if state.clamped is not None else np.zeros(K, dtype=bool)
    failures = 0
    current = None
    for k in range(K):
        if clamped[k]:
            Z[k] = 0
            current = None
            continue
        try:
            if current is None:
                current = log_marginal_from_stats(stats.subset(Z), state.nu, hyper)
            flipped = Z.copy()
            flipped[k] = 1 - Z[k]
            other = log_marginal_from_stats(stats.subset(flipped), state.nu, hyper)
        except CholeskyFailure as exc:
            log.debug("Z_%d proposal skipped: %s", k, exc)
            failures += 1
            continue
        ll1, ll0 = (current, other) if Z[k] == 1 else (other, current)
        mu_k = inclusion_probability(ll0 - ll1, state.p0)
        new = 1 if rng.random() < mu_k else 0
        if new != Z[k]:
            Z[k] = new
            current = other
    return Z, failures


def sample_sigma2(state: SamplerState, stats: GramStats, hyper: Hyperparameters, rng) -> float:
    sub = stats.subset(state.Z)
    r = state.r
    res = stats.yty if r == 0 else _residual_quadratic(sub, gaussian_posterior(sub, state.nu))
    return _inv_gamma(rng, hyper.alpha_sigma + 0.5 * (r + stats.n), hyper.beta_sigma + 0.5 * res)


def sample_nu(state: SamplerState, hyper: Hyperparameters, rng) -> float:
    th = state.theta[state.Z == 1]
    return _inv_gamma(rng, hyper.alpha_nu + 0.5 * th.size, hyper.beta_nu + float(th @ th) / (2.0 * state.sigma2))


_P0_LO = np.finfo(float).tiny
_P0_HI = 1.0 - np.finfo(float).epsneg


def sample_p0(state: SamplerState, hyper: Hyperparameters, rng) -> float:
    h = state.r
    K = state.Z.shape[0]
    p = rng.beta(hyper.alpha_p + h, hyper.beta_p + K - h)
    # keep log p0 and log(1 - p0) finite
    return float(min(max(p, _P0_LO), _P0_HI))


def sample_theta(state: SamplerState, stats: GramStats, rng) -> np.ndarray:
    """theta_r ~ N(mu, sigma2 Sigma); excluded weights are exactly zero."""
    K = state.Z.shape[0]
    theta = np.zeros(K)
    if state.r == 0:
        return theta
    post = gaussian_posterior(stats.subset(state.Z), state.nu)
    z = rng.standard_normal(state.r)
    # chol chol^T = Sigma^{-1}  =>  chol^{-T} z has covariance Sigma
    draw = post.mu + math.sqrt(state.sigma2) * solve_triangular(post.sigma_inv_cholesky, z, lower=True, trans="T",
                                                               check_finite=False)
    theta[state.Z == 1] = draw
    return theta


def dirichlet_concentration(state: SamplerState, hyper: Hyperparameters) -> np.ndarray:
    idx = state.window_indices
    return np.array([hyper.dirichlet_alpha + state.counts.get(int(j), 0) for j in idx], dtype=float)


def sample_G(state: SamplerState, hyper: Hyperparameters, rng) -> np.ndarray:
    """Dirichlet over the current window, prior plus accumulated delay counts."""
    g = rng.dirichlet(dirichlet_concentration(state, hyper))
    return g / g.sum()


def log_marginal_batch(stats: LagStatistics, active: np.ndarray, nu: float, hyper: Hyperparameters) -> np.ndarray:
    """log_marginal_from_stats for every delay index in ``stats`` at one Z."""
    idx = np.flatnonzero(active)
    r = idx.size
    n = stats.n.astype(float)
    res = stats.yty.copy()
    occam = np.zeros(n.shape)
    if r:
        prec = stats.gram[:, idx[:, None], idx] + np.eye(r) / nu
        b = stats.lty[:, idx]
        try:
            chol = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            chol = None
        if chol is None or not np.all(np.isfinite(chol)):
            # rare: fall back to the one-at-a-time path with its jitter retry
            out = np.empty(n.shape)
            for w in range(n.size):
                st = GramStats(stats.gram[w][np.ix_(idx, idx)], b[w], float(stats.yty[w]), int(stats.n[w]))
                out[w] = log_marginal_from_stats(st, nu, hyper)
            return out
        half = solve_triangular_batch(chol, b)
        quad = np.einsum("wi,wi->w", half, half)
        res = res - quad
        if np.any(res < -1e-8 * np.maximum(stats.yty, 1e-300)):
            raise CholeskyFailure("negative residual quadratic form")
        res = np.maximum(res, 0.0)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        occam = -0.5 * logdet - 0.5 * r * math.log(nu)
    a, bs = hyper.alpha_sigma, hyper.beta_sigma
    shape = a + 0.5 * n
    return (occam - 0.5 * n * LOG_2PI + a * math.log(bs) + gammaln(shape) - gammaln(a)
            - shape * np.log(bs + 0.5 * res))


def solve_triangular_batch(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution chol[w] x[w] = b[w] for a stack of lower factors."""
    W, r = b.shape
    x = np.empty_like(b)
    for i in range(r):
        x[:, i] = (b[:, i] - np.einsum("wk,wk->w", chol[:, i, :i], x[:, :i])) / chol[:, i, i]
    return x


def delay_log_weights(state: SamplerState, stats: LagStatistics, hyper: Hyperparameters) -> np.ndarray:
    """Unnormalized log posterior of each delay index in the window at the current Z."""
    lo, hi = state.window
    return log_marginal_batch(stats.window(lo, hi), state.Z, state.nu, hyper) + np.log(state.G)


def normalize_log_weights(ell: np.ndarray) -> np.ndarray:
    return np.exp(ell - logsumexp(ell))


def sample_tau(state: SamplerState, stats: LagStatistics, hyper: Hyperparameters, rng,
               shrink_threshold: float = 1e-100, allow_fix: bool = True):
    """Draw the delay index and shrink the window.

    Returns ``(tau, window, fixed, zeta)``. The window keeps the smallest and
    largest indices whose normalized probability exceeds ``shrink_threshold``;
    ``fixed`` turns true when one index holds all the mass to working
    precision and ``allow_fix`` is set.
    """
    lo, hi = state.window
    zeta = normalize_log_weights(delay_log_weights(state, stats, hyper))
    pos = int(rng.choice(zeta.shape[0], p=zeta / zeta.sum()))
    tau = lo + pos
    keep = np.flatnonzero(zeta > shrink_threshold)
    if keep.size:
        window = (lo + int(keep[0]), lo + int(keep[-1]))
    else:
        window = (lo, hi)
    window = (min(window[0], tau), max(window[1], tau))
    fixed = bool(allow_fix and zeta.max() == 1.0)
    return tau, window, fixed, zeta


def _restrict_G(G: np.ndarray, old: tuple[int, int], new: tuple[int, int]) -> np.ndarray:
    g = G[new[0] - old[0]: new[1] - old[0] + 1]
    s = g.sum()
    return g / s if s > 0 else np.full(g.shape, 1.0 / g.size)


def _ols(L, y):
    w, *_ = np.linalg.lstsq(L, y, rcond=None)
    return w


def check_window(config: SamplerConfig, builder: LibraryBuilder) -> None:
    lo, hi = config.window
    if lo < config.min_window_start:
        raise WindowTouchesZero(
            f"window start {lo} is below the minimum {config.min_window_start}; "
            "delay indices near zero make delayed and plain terms indistinguishable")
    if hi - lo < 2:
        raise WindowTooSmall(f"window ({lo}, {hi}) must span at least 3 indices")
    builder.check_rows(hi)


def least_squares_score(stats: LagStatistics, active: np.ndarray) -> np.ndarray:
    """BIC-type score -n/2 log(RSS/n) - r/2 log n of the least-squares fit at every delay index."""
    idx = np.flatnonzero(active)
    n = stats.n.astype(float)
    rss = stats.yty.copy()
    if idx.size:
        g = stats.gram[:, idx[:, None], idx]
        # a whisper of ridge keeps collinear candidate sets factorizable
        scale = np.maximum(np.einsum("wii->w", g) / idx.size, 1e-300)
        g = g + 1e-10 * scale[:, None, None] * np.eye(idx.size)
        try:
            chol = np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            return np.full(n.shape, -np.inf)
        half = solve_triangular_batch(chol, stats.lty[:, idx])
        rss = rss - np.einsum("wi,wi->w", half, half)
    rss = np.maximum(rss, np.finfo(float).tiny * np.maximum(stats.yty, 1.0))
    return -0.5 * n * np.log(rss / n) - 0.5 * idx.size * np.log(n)


def greedy_start(stats: LagStatistics, clamped: np.ndarray | None = None, max_terms: int | None = None):
    """Stepwise search over (delay index, term set) by least-squares score.

    Starting from the empty set, take the best single add, drop or swap move
    (scored at its best delay index) until no move improves the score.
    Swaps let the search trade a surrogate term for the right one, which a
    forward-only pass cannot. Returns ``(tau, Z)``.
    """
    K = stats.gram.shape[1]
    allowed = np.ones(K, dtype=bool) if clamped is None else ~clamped
    max_terms = K if max_terms is None else max_terms
    Z = np.zeros(K, dtype=np.int8)
    score = least_squares_score(stats, Z)
    best = float(score.max())
    tau = stats.lo + int(np.argmax(score))
    seen = {Z.tobytes()}
    while True:
        on = np.flatnonzero(Z == 1)
        off = np.flatnonzero(allowed & (Z == 0))
        moves = [((k,), ()) for k in off] if on.size < max_terms else []
        moves += [((), (k,)) for k in on]
        moves += [((j,), (k,)) for k in on for j in off]
        choice = None
        for add, drop in moves:
            trial = Z.copy()
            trial[list(add)] = 1
            trial[list(drop)] = 0
            if trial.tobytes() in seen:
                continue
            sc = least_squares_score(stats, trial)
            top = float(sc.max())
            if top > best + 1e-9:
                best, choice, tau = top, trial, stats.lo + int(np.argmax(sc))
        if choice is None:
            break
        Z = choice
        seen.add(Z.tobytes())
    return tau, Z


def init_state(builder: LibraryBuilder, config: SamplerConfig, rng, stats: LagStatistics | None = None) -> SamplerState:
    """First iterate of the chain.

    ``init="uniform"`` draws the delay uniformly from the window and takes
    Z from a least-squares fit of the full library (weights under 1% of the
    largest are excluded). ``init="greedy"`` takes both from
    :func:`greedy_start`. Weights and noise variance then come from least
    squares on the active set. The slab variance starts at ``init_nu``, or
    at the mode of its conditional when that is None.
    """
    check_window(config, builder)
    lo, hi = config.window
    K = builder.n_terms
    if stats is None:
        stats = builder.lag_statistics(lo, hi)
    if config.init == "greedy":
        probe = builder.library(hi)
    else:
        tau0 = int(rng.integers(lo, hi + 1))
        probe = builder.library(tau0)
    clamped = np.all(probe.matrix == 0.0, axis=0)
    for k in np.flatnonzero(clamped):
        log.info("candidate %s is identically zero on this dataset; excluded", probe.names[k])
    if config.init == "greedy":
        tau0, Z = greedy_start(stats, clamped)
        lib = builder.library(tau0)
    else:
        lib = probe
        w = _ols(lib.matrix, lib.target)
        w[clamped] = 0.0
        Z = initial_inclusion(w)
    L, y = lib.matrix, lib.target
    theta = np.zeros(K)
    if Z.any():
        theta[Z == 1] = _ols(L[:, Z == 1], y)
    resid = y - L @ theta
    sigma2 = max(float(np.mean(resid * resid)), np.finfo(float).tiny)
    G = np.full(hi - lo + 1, 1.0 / (hi - lo + 1))
    nu = config.init_nu
    if nu is None:
        h = config.hyper
        nu = (h.beta_nu + float(theta @ theta) / (2.0 * sigma2)) / (h.alpha_nu + 0.5 * int(Z.sum()) + 1.0)
    return SamplerState(tau0, Z, theta, sigma2, nu, config.init_p0, G, (lo, hi), clamped=clamped)


def initial_inclusion(weights: np.ndarray, rel: float = 0.01) -> np.ndarray:
    """Z_k = 1 unless |w_k| is below ``rel`` times the largest |w|."""
    a = np.abs(np.asarray(weights, dtype=float))
    if a.size == 0 or a.max() == 0:
        return np.zeros(a.shape, dtype=np.int8)
    return (a >= rel * a.max()).astype(np.int8)


def round_half_even(x: float) -> int:
    return int(np.round(x))


def run_chain(data: TrajectoryData, catalog: CandidateCatalog, config: SamplerConfig, rng,
              channel: int = 0, builder: LibraryBuilder | None = None) -> ChainRecord:
    """Run the full three-phase chain for one derivative channel.

    Iterations [0, n_mc/4) are burn-in, the delay indices drawn in
    [n_mc/4, n_mc/2) are averaged and that index is held for the rest.
    """
    if builder is None:
        builder = LibraryBuilder(data, catalog, channel, config.trim, history=config.history,
                                 history_level=config.history_level)
    hyper = config.hyper
    n_mc = config.n_mc
    burn_end, fix_start = n_mc // 4, n_mc // 2
    K = len(catalog)

    lagstats = builder.lag_statistics(*config.window)
    state = init_state(builder, config, rng, lagstats)
    rec_tau = np.empty(n_mc, dtype=np.int64)
    rec_Z = np.empty((n_mc, K), dtype=np.int8)
    rec_theta = np.empty((n_mc, K))
    rec_s2, rec_nu, rec_p0 = np.empty(n_mc), np.empty(n_mc), np.empty(n_mc)
    rec_win = np.empty((n_mc, 2), dtype=np.int64)
    fix_iter = None
    failures = 0

    for i in range(n_mc):
        try:
            if i == fix_start:
                tau_avg = round_half_even(float(np.mean(rec_tau[burn_end:fix_start])))
                state.G = _restrict_G(state.G, state.window, (tau_avg, tau_avg)) if (
                    state.window[0] <= tau_avg <= state.window[1]) else np.ones(1)
                state.tau, state.window, state.tau_fixed = tau_avg, (tau_avg, tau_avg), True
            if not state.tau_fixed:
                tau, window, fixed, _ = sample_tau(state, lagstats, hyper, rng, config.shrink_threshold,
                                                   allow_fix=i < burn_end)
                state.counts[tau] = state.counts.get(tau, 0) + 1
                state.G = _restrict_G(state.G, state.window, window)
                state.tau, state.window = tau, window
                if fixed:
                    state.tau_fixed = True
                    fix_iter = i
                    state.G = _restrict_G(state.G, state.window, (tau, tau)) if (
                        state.window[0] <= tau <= state.window[1]) else np.ones(1)
                    state.window = (tau, tau)
            w = state.tau - lagstats.lo
            stats = GramStats(lagstats.gram[w], lagstats.lty[w], float(lagstats.yty[w]), int(lagstats.n[w]))
            state.Z, nf = sample_Z(state, stats, hyper, rng)
            failures += nf
            state.sigma2 = sample_sigma2(state, stats, hyper, rng)
            state.nu = sample_nu(state, hyper, rng)
            state.p0 = sample_p0(state, hyper, rng)
            state.G = sample_G(state, hyper, rng)
            state.theta = sample_theta(state, stats, rng)
        except Exception as exc:
            raise SamplerError(i, exc) from exc
        rec_tau[i] = state.tau
        rec_Z[i] = state.Z
        rec_theta[i] = state.theta
        rec_s2[i], rec_nu[i], rec_p0[i] = state.sigma2, state.nu, state.p0
        rec_win[i] = state.window
    if failures:
        log.warning("channel %d: %d Z proposals skipped after Cholesky failures", channel, failures)
    return ChainRecord(rec_tau, rec_Z, rec_theta, rec_s2, rec_nu, rec_p0, rec_win, burn_end, fix_start,
                       fix_iter, catalog.names, channel, failures)
