import numpy as np
import pytest

from switchmc.errors import NumericalOverflow, SingularInverse, UnsupportedSpec
from switchmc.pathgen import (
    DiffusionSpec,
    TimeGrid,
    abm_spec,
    backward_sweep,
    euler_step,
    forward_sweep,
    gbm_spec,
    inverse_euler_step,
    ou_spec,
    snapshot_from_bytes,
    snapshot_to_bytes,
)

KEY = 20240917
EPS_MACH = np.finfo(np.float64).eps


def test_euler_step_abm_drift_only():
    spec = abm_spec(mu=0.1, sigma=0.2)
    assert euler_step(1.0, 0.0, 1.0, 0.0, spec) == pytest.approx(1.1, abs=1e-15)


def test_euler_step_pure_diffusion_identity():
    spec = abm_spec(mu=0.0, sigma=1.0)
    assert euler_step(0.0, 0.0, 1.0, 1.0, spec) == pytest.approx(1.0, abs=1e-15)


def test_euler_step_ou_hand_value():
    # 2 + 0.5*(0-2)*0.01 + 0.3*0.5*sqrt(0.01) = 2.005
    spec = ou_spec(alpha=0.5, mu=0.0, beta=0.3)
    assert euler_step(2.0, 0.0, 0.01, 0.5, spec) == pytest.approx(2.005, abs=1e-14)


def test_inverse_round_trips_forward_example():
    spec = abm_spec(mu=0.1, sigma=0.2)
    y = euler_step(1.0, 0.0, 1.0, 0.0, spec)
    x = inverse_euler_step(y, 0.0, 1.0, 0.0, spec)
    assert x == pytest.approx(1.0, abs=1e-12)


def test_ou_inverse_singular_when_alpha_h_geq_one():
    spec = ou_spec(alpha=2.0, mu=0.0, beta=0.3)
    with pytest.raises(SingularInverse):
        inverse_euler_step(1.0, 0.0, 0.6, 0.0, spec)  # alpha*h = 1.2


def test_sweep_guard_rejects_alpha_h_above_half():
    spec = ou_spec(alpha=2.0, mu=0.0, beta=0.3)
    grid = TimeGrid(T=1.0, N=3)  # alpha*h = 2/3
    with pytest.raises(SingularInverse):
        forward_sweep(spec, grid, M=4, rng_key=KEY, x0=0.0)


def test_spec_requires_inverse_when_declared_invertible():
    with pytest.raises(UnsupportedSpec):
        DiffusionSpec(1, lambda t, x: x, lambda t, x: x, invertible_step=True)


def test_abm_round_trip_10k_steps():
    # Reconstruction of x0 after a 1e4-step forward/backward cycle stays
    # within 1e3 * eps * max|x|: the rounding error random-walks.
    spec = abm_spec(mu=0.1, sigma=0.2)
    grid = TimeGrid(T=1.0, N=10_000)
    x0 = 1.0
    ens = forward_sweep(spec, grid, M=64, rng_key=KEY, x0=x0)
    scale = np.max(np.abs(ens.states))
    seen = {}
    backward_sweep(ens, lambda i, s: seen.update({i: s.copy()} if i == 0 else {}))
    err = np.max(np.abs(seen[0] - x0))
    assert err <= 1e3 * EPS_MACH * max(scale, 1.0)


def test_round_trip_identity_all_steps_abm():
    # Per-coordinate error <= 100 * eps * sqrt(N) * scale at every step.
    spec = abm_spec(mu=0.05, sigma=0.3, dim=2)
    grid = TimeGrid(T=2.0, N=4000)
    truth = forward_sweep(spec, grid, M=32, rng_key=KEY, x0=[0.5, -0.5], full_storage=True)
    ens = forward_sweep(spec, grid, M=32, rng_key=KEY, x0=[0.5, -0.5])
    scale = max(np.max(np.abs(t)) for t in truth.trajectory.values())
    bound = 100 * EPS_MACH * np.sqrt(grid.N) * scale
    worst = [0.0]

    def check(i, s):
        worst[0] = max(worst[0], np.max(np.abs(s - truth.trajectory[i])))

    backward_sweep(ens, check)
    assert worst[0] <= bound


def _ou_reconstruction_error(n_checkpoints):
    # alpha*T = 40: backward amplification e^40 without snapshots.
    alpha, T, N = 4.0, 10.0, 1000
    spec = ou_spec(alpha=alpha, mu=1.0, beta=0.5)
    if n_checkpoints:
        grid = TimeGrid.regular(T, N, n_checkpoints=n_checkpoints)
    else:
        grid = TimeGrid(T=T, N=N)
    truth = forward_sweep(spec, grid, M=64, rng_key=KEY, x0=1.0, full_storage=True)
    ens = forward_sweep(spec, grid, M=64, rng_key=KEY, x0=1.0)
    scale = max(np.max(np.abs(t)) for t in truth.trajectory.values())
    worst = [0.0]

    def check(i, s):
        worst[0] = max(worst[0], np.max(np.abs(s - truth.trajectory[i])))

    backward_sweep(ens, check)
    return worst[0], scale


def test_ou_checkpoint_dominance():
    err_bare, scale = _ou_reconstruction_error(0)
    err_saved, _ = _ou_reconstruction_error(4)
    assert err_bare > 1e-3 * scale
    assert err_saved < 1e-6 * scale


def test_backward_visits_every_step_once_and_ends_at_zero():
    spec = ou_spec(alpha=1.0, mu=0.0, beta=1.0)
    grid = TimeGrid.regular(1.0, 50, n_checkpoints=2)
    ens = forward_sweep(spec, grid, M=8, rng_key=KEY, x0=0.0)
    steps = []
    backward_sweep(ens, lambda i, s: steps.append(i))
    assert steps == list(range(grid.N, -1, -1))
    assert ens.current_step == 0


def test_memory_bound_and_full_storage_ratio():
    spec = ou_spec(alpha=1.0, mu=0.0, beta=1.0)
    M, N = 200, 500
    grid = TimeGrid.regular(1.0, N, n_checkpoints=4)

    ens = forward_sweep(spec, grid, M=M, rng_key=KEY, x0=0.0)
    backward_sweep(ens, lambda i, s: None)
    lean_peak = ens.tracker.peak
    assert lean_peak <= (1 + len(grid.checkpoint_dates)) * M * spec.dim

    full = forward_sweep(spec, grid, M=M, rng_key=KEY, x0=0.0, full_storage=True)
    backward_sweep(full, lambda i, s: None)
    assert full.tracker.peak >= 50 * lean_peak


def test_moment_sanity_abm_and_gbm():
    # E|X_T| for the Euler scheme matches the discrete closed form within
    # 3 Monte Carlo standard errors.
    M, T, N = 40_000, 1.0, 64
    grid = TimeGrid(T=T, N=N)

    spec = abm_spec(mu=0.4, sigma=0.5)
    ens = forward_sweep(spec, grid, M=M, rng_key=KEY, x0=0.2)
    x = ens.states.ravel()
    m, s = 0.2 + 0.4 * T, 0.5 * np.sqrt(T)
    from scipy.stats import norm
    exact = s * np.sqrt(2 / np.pi) * np.exp(-(m / s) ** 2 / 2) + m * (1 - 2 * norm.cdf(-m / s))
    se = np.abs(x).std() / np.sqrt(M)
    assert abs(np.abs(x).mean() - exact) <= 3 * se

    spec = gbm_spec(mu=0.1, sigma=0.3)
    ens = forward_sweep(spec, grid, M=M, rng_key=KEY + 1, x0=1.0)
    x = ens.states.ravel()
    exact = (1.0 + 0.1 * grid.h) ** N
    se = x.std() / np.sqrt(M)
    assert abs(x.mean() - exact) <= 3 * se


def test_non_invertible_spec_falls_back_to_dense_blocks():
    # State-dependent diffusion with no declared inverse: backward replay
    # recomputes forward inside blocks, hence reproduces states bitwise.
    def drift(t, x):
        return -0.5 * x

    def diffusion(t, x):
        return 0.3 + 0.1 * np.abs(x)

    spec = DiffusionSpec(1, drift, diffusion, invertible_step=False, label="nonmonotone")
    grid = TimeGrid(T=1.0, N=130)
    truth = forward_sweep(spec, grid, M=16, rng_key=KEY, x0=1.0, full_storage=True)
    ens = forward_sweep(spec, grid, M=16, rng_key=KEY, x0=1.0)
    ok = [True]

    def check(i, s):
        ok[0] = ok[0] and np.array_equal(s, truth.trajectory[i])

    backward_sweep(ens, check)
    assert ok[0]


def test_worker_count_does_not_change_states():
    spec = ou_spec(alpha=1.5, mu=0.2, beta=0.7, dim=3)
    grid = TimeGrid.regular(1.0, 100, n_checkpoints=2)
    e1 = forward_sweep(spec, grid, M=101, rng_key=KEY, x0=[0.1, 0.2, 0.3], workers=1)
    e4 = forward_sweep(spec, grid, M=101, rng_key=KEY, x0=[0.1, 0.2, 0.3], workers=4)
    assert np.array_equal(e1.states, e4.states)
    got1, got4 = {}, {}
    backward_sweep(e1, lambda i, s: got1.update({i: s.copy()}), workers=1)
    backward_sweep(e4, lambda i, s: got4.update({i: s.copy()}), workers=4)
    assert all(np.array_equal(got1[i], got4[i]) for i in got1)


def test_overflow_reports_step_and_paths():
    def drift(t, x):
        with np.errstate(over="ignore"):
            return np.exp(50.0 * x)

    spec = DiffusionSpec(1, drift, lambda t, x: 0.0 * x, label="explosive")
    grid = TimeGrid(T=1.0, N=40)
    with pytest.raises(NumericalOverflow) as exc:
        forward_sweep(spec, grid, M=4, rng_key=KEY, x0=20.0)
    assert exc.value.step is not None


def test_seedstack_mode_reconstructs_like_counter_mode():
    spec = ou_spec(alpha=2.0, mu=0.0, beta=1.0)
    grid = TimeGrid.regular(1.0, 80, n_checkpoints=2)
    ens = forward_sweep(spec, grid, M=32, rng_key=KEY, x0=0.0, noise_mode="seedstack")
    truth = forward_sweep(spec, grid, M=32, rng_key=KEY, x0=0.0,
                          noise_mode="seedstack", full_storage=True)
    # same key => same stateful stream => same forward states
    ok = [True]

    def check(i, s):
        err = np.max(np.abs(s - truth.trajectory[i]))
        ok[0] = ok[0] and err < 1e-9

    backward_sweep(ens, check)
    assert ok[0]


def test_snapshot_serialization_round_trip():
    states = np.arange(12, dtype=np.float64).reshape(4, 3) * np.pi
    blob = snapshot_to_bytes(states, step_index=17)
    assert blob[:8] == b"SWMCSNAP"
    assert len(blob) == 32 + states.size * 8
    back, step = snapshot_from_bytes(blob)
    assert step == 17
    assert np.array_equal(back, states)


def test_time_grid_regular_layout():
    grid = TimeGrid.regular(10.0, 1000, decision_stride=100, n_checkpoints=4)
    assert grid.decision_dates == tuple(range(0, 1000, 100))
    assert grid.checkpoint_dates == (200, 400, 600, 800)
    assert grid.h == pytest.approx(0.01)


def test_suggested_checkpoints_rule():
    from switchmc.pathgen import suggested_checkpoints

    # ceil(alpha*T / ln 1e6) snapshots, floored at 4
    assert suggested_checkpoints(ou_spec(alpha=4.0), 10.0) == 4  # ceil(40/13.8) = 3
    assert suggested_checkpoints(ou_spec(alpha=12.0), 10.0) == 9
    assert suggested_checkpoints(abm_spec(), 10.0) == 4
