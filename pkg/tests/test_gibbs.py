import math

import numpy as np
import pytest
from scipy import special

from delayid.basis import CandidateCatalog, LibraryBuilder, correlation_screen
from delayid.benchmarks import model_from_strings
from delayid.dde_core import TrajectoryData, simulate
from delayid.errors import CholeskyFailure, SamplerError, WindowTooSmall, WindowTouchesZero
from delayid.gibbs import (GramStats, Hyperparameters, SamplerConfig, SamplerState, dirichlet_concentration,
                           gaussian_posterior, greedy_start, inclusion_probability, init_state,
                           initial_inclusion, log_marginal_batch, log_marginal_likelihood, normalize_log_weights,
                           round_half_even, run_chain, sample_G, sample_nu, sample_p0, sample_sigma2, sample_tau,
                           sample_theta, sample_Z)
from delayid.signal_prep import FilterSpec, NoiseSpec, add_noise, prepare

from oracles import spectral_t_evidence, student_t_evidence, total_variation, z_posterior_fixed

H = Hyperparameters()


def _state(K, Z=None, theta=None, sigma2=1.0, nu=1.0, p0=0.5, window=(1, 3), tau=None):
    Z = np.zeros(K, dtype=np.int8) if Z is None else np.asarray(Z, dtype=np.int8)
    theta = np.zeros(K) if theta is None else np.asarray(theta, dtype=float)
    n = window[1] - window[0] + 1
    return SamplerState(window[0] if tau is None else tau, Z, theta, sigma2, nu, p0, np.full(n, 1.0 / n), window)


# --- log marginal likelihood -------------------------------------------------

def test_empty_model_by_hand():
    h = Hyperparameters(alpha_sigma=1.0, beta_sigma=1.0)
    got = log_marginal_likelihood(np.zeros(1), np.zeros((1, 0)), 0.3, h)
    assert got == pytest.approx(math.log(special.gamma(1.5) / math.sqrt(2 * math.pi)), abs=1e-14)


def test_empty_model_ignores_nu():
    Y = np.random.default_rng(0).standard_normal(9)
    vals = [log_marginal_likelihood(Y, np.zeros((9, 0)), nu, H) for nu in (1e-3, 1.0, 1e4)]
    assert vals[0] == vals[1] == vals[2]


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("r", [1, 2, 3])
def test_matches_student_t_evidence(seed, r):
    rng = np.random.default_rng(seed)
    N = 12
    L = rng.standard_normal((N, r))
    Y = L @ rng.standard_normal(r) + 0.3 * rng.standard_normal(N)
    nu = float(np.exp(rng.uniform(-2, 3)))
    for hyper in (H, Hyperparameters(alpha_sigma=2.0, beta_sigma=0.5)):
        got = log_marginal_likelihood(Y, L, nu, hyper)
        assert got == pytest.approx(student_t_evidence(Y, L, nu, hyper.alpha_sigma, hyper.beta_sigma), abs=1e-9)


def test_evidence_oracles_agree():
    rng = np.random.default_rng(9)
    L = rng.standard_normal((7, 2))
    Y = rng.standard_normal(7)
    for nu in (0.01, 1.0, 100.0):
        assert spectral_t_evidence(Y, L, nu, 2.0, 0.5) == pytest.approx(student_t_evidence(Y, L, nu, 2.0, 0.5),
                                                                        abs=1e-10)
    # large nu, where the dense scale matrix is numerically singular
    big = spectral_t_evidence(Y, L, 1e20, H.alpha_sigma, H.beta_sigma)
    assert big == pytest.approx(log_marginal_likelihood(Y, L, 1e20, H), abs=1e-6)


def test_batch_agrees_with_single(toy_data, linear_catalog):
    b = LibraryBuilder(toy_data, linear_catalog, history="drop")
    st = b.lag_statistics(1, 4)
    for Z in ([0, 0], [1, 0], [0, 1], [1, 1]):
        Z = np.array(Z, dtype=np.int8)
        batch = log_marginal_batch(st, Z, 0.7, H)
        for j in range(1, 5):
            lib = b.library(j)
            assert batch[j - 1] == pytest.approx(
                log_marginal_likelihood(lib.target, lib.matrix[:, Z == 1], 0.7, H), abs=1e-10)


def test_residual_quadratic_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(100):
        N, r = rng.integers(2, 8), rng.integers(1, 4)
        L = rng.standard_normal((N, r)) * rng.uniform(0.01, 100)
        Y = rng.standard_normal(N)
        nu = float(np.exp(rng.uniform(-5, 8)))
        post = gaussian_posterior(GramStats.from_arrays(L, Y), nu)
        Sigma = np.linalg.inv(L.T @ L + np.eye(r) / nu)
        direct = Y @ Y - Y @ L @ Sigma @ L.T @ Y
        res = Y @ Y - post.quad
        assert res >= -1e-8 * (Y @ Y)
        assert res == pytest.approx(direct, rel=1e-6, abs=1e-10 * (Y @ Y))


def test_cholesky_failure_surfaces():
    st = GramStats(np.array([[np.nan]]), np.array([1.0]), 1.0, 3)
    with pytest.raises(CholeskyFailure):
        gaussian_posterior(st, 1.0)


# --- Z -----------------------------------------------------------------------

def test_inclusion_probability_limits():
    assert inclusion_probability(0.0, 0.5) == 0.5
    assert inclusion_probability(800.0, 0.5) == pytest.approx(0.0, abs=1e-300)
    assert inclusion_probability(-800.0, 0.5) == 1.0
    # lambda = 3, p0 = 0.2: 0.2 / (0.2 + 3 * 0.8)
    assert inclusion_probability(math.log(3.0), 0.2) == pytest.approx(0.2 / 2.6, rel=1e-14)


def _z_frequencies(Y, L, nu, p0, sweeps, seed):
    rng = np.random.default_rng(seed)
    stats = GramStats.from_arrays(L, Y)
    state = _state(L.shape[1], Z=rng.integers(0, 2, L.shape[1]), nu=nu, p0=p0)
    counts = {}
    for _ in range(sweeps):
        state.Z, _ = sample_Z(state, stats, H, rng)
        key = tuple(int(z) for z in state.Z)
        counts[key] = counts.get(key, 0) + 1
    return {k: v / sweeps for k, v in counts.items()}


def test_z_sweep_noiseless_toy():
    rng = np.random.default_rng(2)
    L = rng.standard_normal((8, 2))
    Y = 1.5 * L[:, 0]
    exact = z_posterior_fixed(Y, L, 1.0, 0.5, H)
    freq = _z_frequencies(Y, L, 1.0, 0.5, 200, seed=5)
    assert abs(freq.get((1, 0), 0.0) - exact[(1, 0)]) <= 0.05


def test_z_sweep_matches_enumeration(toy_series):
    x, y = toy_series
    L = np.column_stack([x, np.roll(x, 1)])
    exact = z_posterior_fixed(y, L, 0.8, 0.3, H)
    freq = _z_frequencies(y, L, 0.8, 0.3, 20000, seed=1)
    assert total_variation(freq, exact) <= 0.02


def test_clamped_terms_stay_out():
    rng = np.random.default_rng(0)
    L = rng.standard_normal((10, 3))
    state = _state(3, Z=[1, 1, 1])
    state.clamped = np.array([False, True, False])
    Z, _ = sample_Z(state, GramStats.from_arrays(L, L[:, 1]), H, rng)
    assert Z[1] == 0


# --- sigma2, nu, p0, theta, G --------------------------------------------------

def test_sigma2_without_terms_uses_prior_scale():
    # r = 0 and Y = 0: IG(alpha + N/2, beta); with beta = 1e-4 the draws are tiny
    rng = np.random.default_rng(0)
    state = _state(2)
    stats = GramStats.from_arrays(np.ones((4, 2)), np.zeros(4))
    h = Hyperparameters(alpha_sigma=1.0, beta_sigma=2.0)
    draws = np.array([sample_sigma2(state, stats, h, rng) for _ in range(20000)])
    # IG(3, 2) mean is 1
    assert draws.mean() == pytest.approx(1.0, rel=0.03)


def test_nu_reduces_to_prior_without_terms():
    rng = np.random.default_rng(0)
    state = _state(3)
    draws = np.array([sample_nu(state, Hyperparameters(alpha_nu=3.0, beta_nu=4.0), rng) for _ in range(20000)])
    assert draws.mean() == pytest.approx(2.0, rel=0.03)


def test_nu_with_zero_weights():
    rng = np.random.default_rng(0)
    state = _state(3, Z=[1, 1, 0], theta=[0.0, 0.0, 0.0], sigma2=0.3)
    h = Hyperparameters(alpha_nu=2.0, beta_nu=1.5)
    draws = np.array([sample_nu(state, h, rng) for _ in range(100000)])
    # IG(alpha + 1, beta) has mean beta / alpha
    assert draws.mean() == pytest.approx(1.5 / 2.0, rel=0.02)


def test_nu_mean_formula():
    rng = np.random.default_rng(1)
    state = _state(3, Z=[1, 0, 1], theta=[0.4, 0.0, -1.1], sigma2=0.25)
    h = Hyperparameters(alpha_nu=2.5, beta_nu=0.7)
    shape, scale = 2.5 + 1.0, 0.7 + (0.16 + 1.21) / 0.5
    draws = np.array([sample_nu(state, h, rng) for _ in range(100000)])
    assert draws.mean() == pytest.approx(scale / (shape - 1), rel=0.02)


def test_p0_all_in_and_all_out():
    rng = np.random.default_rng(0)
    K = 13
    ones = np.array([sample_p0(_state(K, Z=np.ones(K)), H, rng) for _ in range(100000)])
    assert ones.mean() == pytest.approx(13.1 / 13.2, rel=0.02)
    zeros = np.array([sample_p0(_state(K), H, rng) for _ in range(100000)])
    assert zeros.mean() == pytest.approx(0.1 / 13.2, rel=0.02)
    assert np.all((zeros > 0) & (zeros < 1)) and np.all((ones > 0) & (ones < 1))


def test_theta_spike_and_ridge_mean():
    rng = np.random.default_rng(0)
    assert np.array_equal(sample_theta(_state(3), GramStats.from_arrays(np.ones((5, 3)), np.ones(5)), rng),
                          np.zeros(3))
    L = rng.standard_normal((2000, 2))
    stats = GramStats.from_arrays(L, 2.0 * L[:, 0])
    post = gaussian_posterior(stats.subset(np.array([1, 0])), 1e6)
    assert post.mu[0] == pytest.approx(2.0, abs=1e-3)
    theta = sample_theta(_state(2, Z=[1, 0], nu=1e6, sigma2=1e-6), stats, rng)
    assert theta[1] == 0.0


def test_theta_covariance():
    rng = np.random.default_rng(3)
    L = np.array([[1.0, 0.3], [0.2, 1.0], [0.5, -0.4], [1.2, 0.8]])
    Y = np.array([0.4, -0.2, 1.0, 0.3])
    stats = GramStats.from_arrays(L, Y)
    state = _state(2, Z=[1, 1], nu=2.0, sigma2=0.7)
    draws = np.array([sample_theta(state, stats, rng) for _ in range(100000)])
    Sigma = np.linalg.inv(L.T @ L + np.eye(2) / 2.0)
    emp = np.cov(draws.T)
    assert np.linalg.norm(emp - 0.7 * Sigma) / np.linalg.norm(0.7 * Sigma) <= 0.05
    assert np.allclose(draws.mean(0), Sigma @ L.T @ Y, atol=0.01)


def test_dirichlet_examples():
    rng = np.random.default_rng(0)
    state = _state(1, window=(4, 5))
    assert dirichlet_concentration(state, H).tolist() == [1.0, 1.0]
    state.counts = {4: 1}
    assert dirichlet_concentration(state, H).tolist() == [2.0, 1.0]
    draws = np.array([sample_G(state, H, rng) for _ in range(100000)])
    assert np.allclose(draws.mean(0), [2 / 3, 1 / 3], rtol=0.02)
    assert np.allclose(draws.sum(1), 1.0, atol=1e-12)


# --- delay ---------------------------------------------------------------------

def test_normalized_weights_example():
    zeta = normalize_log_weights(np.array([0.0, -math.log(2), -math.log(2)]))
    assert np.allclose(zeta, [0.5, 0.25, 0.25], atol=1e-15)


def test_log_space_shift_invariance():
    ell = np.array([-1e5, -1e5 + 3.0, -1e5 - 700.0, -1e5 + 1.0])
    base = normalize_log_weights(ell)
    for c in (-1e6, -50.0, 0.0, 1e4):
        assert np.allclose(normalize_log_weights(ell + c), base, atol=1e-12)


def test_identical_libraries_give_uniform_zeta():
    data = TrajectoryData(0.1, np.full((60, 1), 2.0), derivatives=np.linspace(-1, 1, 60)[:, None])
    cat = CandidateCatalog.parse(["x1", "x1_tau"])
    b = LibraryBuilder(data, cat, history="constant")
    state = _state(2, Z=[0, 1], window=(5, 9))
    _, _, _, zeta = sample_tau(state, b.lag_statistics(5, 9), H, np.random.default_rng(0))
    assert np.allclose(zeta, 0.2, atol=1e-12)


def test_window_shrinks_to_surviving_mass():
    state = _state(1, Z=[1], window=(3, 7))
    stats_rng = np.random.default_rng(0)
    x = np.cumsum(stats_rng.standard_normal(200))
    data = TrajectoryData(1.0, x[:, None], derivatives=np.roll(x, 5)[:, None])
    b = LibraryBuilder(data, CandidateCatalog.parse(["x1_tau"]), history="drop", trim=0)
    tau, window, fixed, zeta = sample_tau(state, b.lag_statistics(3, 7), H, np.random.default_rng(1))
    assert tau == 5 and window == (5, 5) and fixed


def test_delay_recovered_on_negative_feedback():
    model = model_from_strings([[(-1.0, "x1_tau")]], 1.0)
    data = prepare(simulate(model, [1.0], 10.0, 0.01), None)
    b = LibraryBuilder(data, CandidateCatalog.parse(["x1", "x1_tau"]), history="constant", history_level=[1.0])
    window = (20, 300)
    lag = b.lag_statistics(*window)
    rng = np.random.default_rng(0)
    state = _state(2, Z=[0, 1], theta=[0.0, -1.0], sigma2=1e-6, nu=1.0, window=window, tau=150)
    taus = []
    for i in range(200):
        if not state.tau_fixed:
            tau, win, fixed, _ = sample_tau(state, lag, H, rng, allow_fix=True)
            lo = state.window[0]
            state.G = state.G[win[0] - lo: win[1] - lo + 1] / state.G[win[0] - lo: win[1] - lo + 1].sum()
            state.tau, state.window, state.tau_fixed = tau, win, fixed
        w = state.tau - lag.lo
        st = GramStats(lag.gram[w], lag.lty[w], float(lag.yty[w]), int(lag.n[w]))
        state.sigma2 = sample_sigma2(state, st, H, rng)
        state.theta = sample_theta(state, st, rng)
        taus.append(state.tau)
    mode = np.bincount(taus[50:]).argmax()
    assert abs(mode - 100) <= 1


# --- initialization ------------------------------------------------------------

def test_threshold_rule():
    assert initial_inclusion(np.array([10.0, 0.05, 3.0])).tolist() == [1, 0, 1]
    assert initial_inclusion(np.zeros(3)).tolist() == [0, 0, 0]


def _noisy_negative_feedback(seed=0, noise=0.05):
    # x' = -1.5 x(t - 1): a slowly decaying oscillation, delay index 20 at dt = 0.05
    model = model_from_strings([[(-1.5, "x1_tau")]], 1.0)
    clean = simulate(model, [1.0], 40.0, 0.05)
    # smooth before differencing, as the discovery pipeline does
    return prepare(add_noise(clean, NoiseSpec(noise, seed)), FilterSpec(4, 0.2) if noise else None)


def test_uniform_init_draws_inside_window():
    data = _noisy_negative_feedback()
    cat = CandidateCatalog.parse(["x1", "x1_tau", "sin(x1)"])
    b = LibraryBuilder(data, cat)
    cfg = SamplerConfig((20, 100), 100, init="uniform")
    for seed in range(20):
        s = init_state(b, cfg, np.random.default_rng(seed))
        assert 20 <= s.tau <= 100
        assert s.window == (20, 100) and np.allclose(s.G, 1 / 81)
        assert s.p0 == 0.1 and s.sigma2 > 0 and s.nu > 0
        assert np.all(s.theta[s.Z == 0] == 0)


def test_window_guards():
    data = _noisy_negative_feedback()
    b = LibraryBuilder(data, CandidateCatalog.parse(["x1", "x1_tau"]))
    with pytest.raises(WindowTouchesZero):
        init_state(b, SamplerConfig((1, 50)), np.random.default_rng(0))
    with pytest.raises(WindowTooSmall):
        init_state(b, SamplerConfig((10, 11)), np.random.default_rng(0))


def test_greedy_start_finds_generating_term():
    data = _noisy_negative_feedback(noise=0.0)
    cat = CandidateCatalog.parse(["x1", "x1^2", "sin(x1)", "x1_tau", "cos(x1_tau)"])
    b = LibraryBuilder(data, cat, history="constant", history_level=[1.0])
    tau, Z = greedy_start(b.lag_statistics(5, 40))
    assert tau == 20
    assert Z.tolist() == [0, 0, 0, 1, 0]


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig((5, 10), n_mc=3)
    with pytest.raises(ValueError):
        SamplerConfig((5, 10), history="zero")
    with pytest.raises(ValueError):
        SamplerConfig((5, 10), init="random")
    with pytest.raises(ValueError):
        Hyperparameters(alpha_p=0.0)


# --- full chain ----------------------------------------------------------------

@pytest.fixture(scope="module")
def chain_pair():
    data = _noisy_negative_feedback(seed=2, noise=0.1)
    # no plain x1: a single damped mode makes x(t - 1) an exact mix of x(t) and
    # x(t - s) for any s, which would leave the delay unidentifiable
    cat = CandidateCatalog.parse(["x1^2", "x1_tau", "x1_tau^2", "x1*x1_tau"])
    assert correlation_screen(LibraryBuilder(data, cat).library(20), 0.99) == []
    cfg = SamplerConfig((5, 60), 2000, history="constant", history_level=(1.0,))
    a = run_chain(data, cat, cfg, np.random.default_rng(11))
    b = run_chain(data, cat, cfg, np.random.default_rng(11))
    return a, b


def test_phase_boundaries(chain_pair):
    ch, _ = chain_pair
    assert len(ch) == 2000 and ch.burn_end == 500 and ch.fix_start == 1000
    assert np.all(ch.tau[1000:] == round_half_even(float(np.mean(ch.tau[500:1000]))))
    assert np.all(ch.window[1000:, 0] == ch.window[1000:, 1])


def test_fixed_delay_stays_fixed(chain_pair):
    ch, _ = chain_pair
    if ch.tau_fix_iteration is not None:
        assert ch.tau_fix_iteration < ch.burn_end
        assert np.all(ch.tau[ch.tau_fix_iteration:] == ch.tau[ch.tau_fix_iteration])


def test_same_seed_same_chain(chain_pair):
    a, b = chain_pair
    for name in ("tau", "Z", "theta", "sigma2", "nu", "p0", "window"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_spike_and_window_invariants(chain_pair):
    ch, _ = chain_pair
    assert np.all(ch.theta[ch.Z == 0] == 0.0)
    assert np.all(np.diff(ch.window[:, 0]) >= 0)
    assert np.all(np.diff(ch.window[:, 1]) <= 0)
    assert np.all((ch.window[:, 0] <= ch.tau) & (ch.tau <= ch.window[:, 1]))
    assert np.all(ch.sigma2 > 0) and np.all(ch.nu > 0) and np.all((ch.p0 > 0) & (ch.p0 < 1))


def test_chain_recovers_negative_feedback(chain_pair):
    ch, _ = chain_pair
    pip = ch.Z[1000:].mean(0)
    assert pip[1] > 0.9
    assert ch.tau[-1] == 20
    assert ch.theta[1000:, 1][ch.Z[1000:, 1] == 1].mean() == pytest.approx(-1.5, abs=0.1)


def test_zero_column_is_clamped():
    data = _noisy_negative_feedback()
    data = data.replace(states=np.column_stack([data.states[:, 0], np.zeros(data.n)]),
                        derivatives=np.column_stack([data.derivatives[:, 0], np.zeros(data.n)]))
    cat = CandidateCatalog.parse(["x1_tau", "sin(x2)", "x1"])
    ch = run_chain(data, cat, SamplerConfig((5, 30), 40), np.random.default_rng(0))
    assert np.all(ch.Z[:, 1] == 0)


def test_errors_carry_iteration():
    data = _noisy_negative_feedback()
    cat = CandidateCatalog.parse(["x1", "x1_tau"])
    cfg = SamplerConfig((5, 30), 40)

    class Boom:
        def __init__(self):
            self.inner = np.random.default_rng(0)
            self.calls = 0

        def __getattr__(self, name):
            self.calls += 1
            if self.calls > 200:
                raise RuntimeError("rng exhausted")
            return getattr(self.inner, name)

    with pytest.raises(SamplerError) as err:
        run_chain(data, cat, cfg, Boom())
    assert err.value.iteration > 0


def test_noiseless_delay_fixes_early():
    data = _noisy_negative_feedback(noise=0.0)
    cat = CandidateCatalog.parse(["x1^2", "x1_tau"])
    cfg = SamplerConfig((5, 60), 200, history="constant", history_level=(1.0,))
    ch = run_chain(data, cat, cfg, np.random.default_rng(0))
    assert ch.tau_fix_iteration is not None and ch.tau_fix_iteration < ch.burn_end
    assert np.all(ch.tau[ch.tau_fix_iteration:] == 20)
    assert np.all(ch.window[ch.tau_fix_iteration:] == 20)
