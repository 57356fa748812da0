"""Euler-scheme path engine with bit-reproducible backward replay.

Paths are never stored wholesale.  The forward sweep keeps only the current
state matrix plus a handful of snapshots; the backward sweep regenerates each
step's noise from the counter-based stream (or a recorded seed cursor) and
runs the inverted one-step map, restoring from snapshots where available.

One-step map and its inverse, for state x, noise eps, step h:

    f(x, eps)    = x + b(t, x) h + sigma(t, x) eps sqrt(h)
    finv(y, eps) = the x solving f(x, eps) = y

Closed-form inverses are attached by the spec constructors (arithmetic
Brownian motion, Ornstein-Uhlenbeck, geometric Brownian motion); custom specs
may supply their own.  Specs without an inverse fall back to dense block
snapshots with forward recomputation inside each block.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalOverflow, SingularInverse, UnsupportedSpec
from .rng import make_noise_source, noise_for

__all__ = [
    "DiffusionSpec",
    "TimeGrid",
    "SeedCheckpoint",
    "PathEnsemble",
    "StorageTracker",
    "euler_step",
    "inverse_euler_step",
    "forward_sweep",
    "backward_sweep",
    "noise_for",
    "abm_spec",
    "ou_spec",
    "gbm_spec",
    "brownian_spec",
    "snapshot_to_bytes",
    "snapshot_from_bytes",
    "suggested_checkpoints",
    "DENSE_BLOCK",
]

# Block length for the dense-checkpoint fallback on non-invertible specs.
DENSE_BLOCK = 32

# Mean-reversion step guard: reject alpha*h >= this, keeping the per-step
# backward amplification 1/(1 - alpha*h) below 2.
MAX_ALPHA_H = 0.5

_SNAP_MAGIC = b"SWMCSNAP"
_SNAP_VERSION = 1


@dataclass(frozen=True)
class DiffusionSpec:
    """Drift/diffusion pair with an optional declared one-step inverse.

    ``drift(t, x)`` maps an (M, d) state block to (M, d) in state units per
    year.  ``diffusion(t, x)`` may return (d,), (M, d) (diagonal) or
    (M, d, d) (full matrix).  Both must be elementwise in the path axis so
    sweeps can split paths across workers without changing results.

    ``invertible_step`` declares that x -> f(x, eps) is invertible for every
    noise draw; ``inverse(t, y, h, eps)`` must then recover x.  The engine
    asserts finiteness of outputs, not the Lipschitz modeling contract.
    """

    dim: int
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    invertible_step: bool = False
    inverse: Optional[Callable[[float, np.ndarray, float, np.ndarray], np.ndarray]] = None
    mean_reversion: tuple = ()
    label: str = "custom"

    def __post_init__(self):
        if self.invertible_step and self.inverse is None:
            raise UnsupportedSpec(f"spec {self.label!r} declares invertible_step without an inverse")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with decision dates and snapshot dates.

    ``decision_dates`` are the grid indices where switching is allowed;
    ``checkpoint_dates`` the indices where full state snapshots are kept
    during the forward sweep (the terminal ensemble at index N is always
    available as the sweep output).
    """

    T: float
    N: int
    decision_dates: tuple = ()
    checkpoint_dates: tuple = ()

    def __post_init__(self):
        if self.N < 1 or self.T <= 0:
            raise ValueError("need N >= 1 and T > 0")
        dd = tuple(sorted(set(int(i) for i in self.decision_dates)))
        cd = tuple(sorted(set(int(i) for i in self.checkpoint_dates)))
        for i in dd + cd:
            if not 0 <= i <= self.N:
                raise ValueError(f"grid index {i} outside 0..{self.N}")
        object.__setattr__(self, "decision_dates", dd)
        object.__setattr__(self, "checkpoint_dates", cd)

    @property
    def h(self) -> float:
        return self.T / self.N

    def time(self, i: int) -> float:
        return self.T * i / self.N

    @classmethod
    def regular(cls, T, N, decision_stride=1, n_checkpoints=4):
        """Grid with decisions every ``decision_stride`` steps (from 0) and
        ``n_checkpoints`` evenly spaced intermediate snapshots."""
        decisions = tuple(range(0, N, int(decision_stride)))
        cps = tuple(
            int(round(k * N / (n_checkpoints + 1))) for k in range(1, n_checkpoints + 1)
        )
        cps = tuple(i for i in cps if 0 < i < N)
        return cls(T=T, N=N, decision_dates=decisions, checkpoint_dates=cps)


def suggested_checkpoints(spec: "DiffusionSpec", T: float, floor: int = 4) -> int:
    """Snapshot count keeping backward rounding error below ~1e-6 relative.

    Mean reversion amplifies backward reconstruction by roughly e^(alpha T)
    overall; ceil(alpha T / ln(1e6)) segments keep each segment's factor
    below 1e6, i.e. the compound error near machine epsilon times 1e6.
    """
    alpha = max(spec.mean_reversion, default=0.0)
    need = int(np.ceil(alpha * T / np.log(1e6))) if alpha > 0 else 0
    return max(int(floor), need)


@dataclass
class SeedCheckpoint:
    """Snapshot of a step: RNG cursor and/or full state matrix."""

    step_index: int
    rng_cursor: object = None
    state_snapshot: Optional[np.ndarray] = None


class StorageTracker:
    """Counts floats held in persistent path-state buffers.

    Transient numpy expression temporaries are O(M*d) workspace and are not
    counted; the tracked quantity is what the memory-reduction bound
    (1 + #snapshots) * M * d is about.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, n_floats: int):
        self.current += int(n_floats)
        self.peak = max(self.peak, self.current)

    def free(self, n_floats: int):
        self.current -= int(n_floats)


def _as_block(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, -1) if dim > 1 else x.reshape(-1, 1)
    if x.shape[1] != dim:
        raise ValueError(f"state block has dim {x.shape[1]}, spec has dim {dim}")
    return x


def _apply_diffusion(sig, eps):
    sig = np.asarray(sig, dtype=np.float64)
    if sig.ndim <= 2:
        return sig * eps
    return np.einsum("mij,mj->mi", sig, eps)


def euler_step(x, t, h, eps, spec: DiffusionSpec, step_index=None):
    """One forward Euler step: x + b(t,x) h + sigma(t,x) eps sqrt(h)."""
    if h <= 0:
        raise ValueError("step size must be positive")
    shape_in = np.shape(x)
    xb = _as_block(x, spec.dim)
    eb = _as_block(eps, spec.dim)
    if eb.shape[0] == 1 and xb.shape[0] > 1:
        eb = np.broadcast_to(eb, xb.shape)
    y = xb + spec.drift(t, xb) * h + _apply_diffusion(spec.diffusion(t, xb), eb) * np.sqrt(h)
    if not np.all(np.isfinite(y)):
        bad = np.where(~np.isfinite(y).all(axis=1))[0]
        raise NumericalOverflow(
            f"non-finite state after Euler step (step={step_index}, t={t:.6g}, "
            f"{bad.size} paths, first={bad[:5].tolist()})",
            step=step_index,
            paths=bad,
        )
    return y.reshape(shape_in) if shape_in != y.shape else y


def inverse_euler_step(y, t, h, eps, spec: DiffusionSpec, step_index=None):
    """Invert one Euler step, given the same noise used going forward."""
    if not spec.invertible_step or spec.inverse is None:
        raise UnsupportedSpec(f"spec {spec.label!r} has no per-step inverse")
    shape_in = np.shape(y)
    yb = _as_block(y, spec.dim)
    eb = _as_block(eps, spec.dim)
    if eb.shape[0] == 1 and yb.shape[0] > 1:
        eb = np.broadcast_to(eb, yb.shape)
    x = spec.inverse(t, yb, h, eb)
    if not np.all(np.isfinite(x)):
        bad = np.where(~np.isfinite(x).all(axis=1))[0]
        raise NumericalOverflow(
            f"non-finite state after inverse Euler step (step={step_index}, t={t:.6g})",
            step=step_index,
            paths=bad,
        )
    return x.reshape(shape_in) if shape_in != x.shape else x


def _check_reversion_guard(spec: DiffusionSpec, h: float):
    for alpha in spec.mean_reversion:
        if alpha * h >= 1.0:
            raise SingularInverse(
                f"1 - alpha*h <= 0 for alpha={alpha}, h={h}: one-step map not invertible"
            )
        if alpha * h >= MAX_ALPHA_H:
            raise SingularInverse(
                f"alpha*h = {alpha * h:.3g} >= {MAX_ALPHA_H}: per-step backward "
                f"amplification too large; refine the grid"
            )


# ---------------------------------------------------------------------------
# Built-in specs with closed-form inverses
# ---------------------------------------------------------------------------


def abm_spec(mu=0.0, sigma=1.0, dim=1) -> DiffusionSpec:
    """Arithmetic Brownian motion, constant drift mu and volatility sigma."""
    mu_v = np.broadcast_to(np.asarray(mu, dtype=np.float64), (dim,)).copy()
    sg_v = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (dim,)).copy()

    def drift(t, x):
        return np.broadcast_to(mu_v, x.shape)

    def diffusion(t, x):
        return sg_v

    def inverse(t, y, h, eps):
        return y - mu_v * h - sg_v * eps * np.sqrt(h)

    return DiffusionSpec(dim, drift, diffusion, True, inverse, label="abm")


def brownian_spec(dim=1) -> DiffusionSpec:
    return abm_spec(0.0, 1.0, dim)


def ou_spec(alpha, mu=0.0, beta=1.0, dim=1) -> DiffusionSpec:
    """Ornstein-Uhlenbeck: dX = alpha (mu - X) dt + beta dW, per coordinate."""
    al = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (dim,)).copy()
    mu_v = np.broadcast_to(np.asarray(mu, dtype=np.float64), (dim,)).copy()
    be = np.broadcast_to(np.asarray(beta, dtype=np.float64), (dim,)).copy()
    if np.any(al <= 0):
        raise ValueError("mean reversion alpha must be positive")

    def drift(t, x):
        return al * (mu_v - x)

    def diffusion(t, x):
        return be

    def inverse(t, y, h, eps):
        denom = 1.0 - al * h
        if np.any(denom <= 0):
            raise SingularInverse(f"1 - alpha*h <= 0 (alpha*h = {np.max(al) * h:.3g})")
        return (y - al * mu_v * h - be * eps * np.sqrt(h)) / denom

    return DiffusionSpec(dim, drift, diffusion, True, inverse,
                         mean_reversion=tuple(float(a) for a in al), label="ou")


def gbm_spec(mu=0.0, sigma=0.2, dim=1) -> DiffusionSpec:
    """Geometric Brownian motion under the plain Euler scheme."""
    mu_v = np.broadcast_to(np.asarray(mu, dtype=np.float64), (dim,)).copy()
    sg_v = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (dim,)).copy()

    def drift(t, x):
        return mu_v * x

    def diffusion(t, x):
        return sg_v * x

    def inverse(t, y, h, eps):
        denom = 1.0 + mu_v * h + sg_v * eps * np.sqrt(h)
        if np.any(denom <= 0):
            raise SingularInverse("1 + mu*h + sigma*sqrt(h)*eps <= 0 on some path")
        return y / denom

    return DiffusionSpec(dim, drift, diffusion, True, inverse, label="gbm")


# ---------------------------------------------------------------------------
# Ensemble and sweeps
# ---------------------------------------------------------------------------


@dataclass
class PathEnsemble:
    """M paths advanced to ``current_step``, with snapshots for replay.

    Memory footprint is O(M*d*(1 + #snapshots)) floats plus O(N) RNG
    cursors, never O(M*N*d) unless ``full_storage`` is requested.
    """

    spec: DiffusionSpec
    grid: TimeGrid
    M: int
    noise: object
    states: np.ndarray
    current_step: int
    checkpoints: dict = field(default_factory=dict)
    tracker: StorageTracker = field(default_factory=StorageTracker)
    full_storage: bool = False
    trajectory: dict = field(default_factory=dict)
    workers: int = 1

    def checkpoint_list(self):
        return [
            SeedCheckpoint(i, self.noise.cursor(i), snap)
            for i, snap in sorted(self.checkpoints.items())
        ]


def _split_ranges(M, workers):
    workers = max(1, int(workers))
    if workers == 1 or M < 2 * workers:
        return [(0, M)]
    bounds = np.linspace(0, M, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _blocked_apply(fn, out, M, workers, pool=None):
    """Run fn(a, b) for disjoint path ranges, writing into out[a:b].

    Results are independent of the split because the ranges are disjoint and
    fn must be elementwise in the path axis.  ``pool`` lets sweeps reuse one
    executor across steps.
    """
    ranges = _split_ranges(M, workers)
    if len(ranges) == 1 or pool is None and workers == 1:
        for a, b in ranges:
            out[a:b] = fn(a, b)
        return
    if pool is None:
        with ThreadPoolExecutor(max_workers=len(ranges)) as tmp:
            futs = [(a, b, tmp.submit(fn, a, b)) for a, b in ranges]
            for a, b, fut in futs:
                out[a:b] = fut.result()
        return
    futs = [(a, b, pool.submit(fn, a, b)) for a, b in ranges]
    for a, b, fut in futs:
        out[a:b] = fut.result()


def forward_sweep(spec: DiffusionSpec, grid: TimeGrid, M: int, rng_key, x0,
                  noise_mode="counter", full_storage=False, workers=1,
                  on_step=None, tracker=None) -> PathEnsemble:
    """Simulate M Euler paths to the terminal step, snapshotting along the way.

    ``on_step(i, states)`` is invoked at every grid index including 0; states
    must not be mutated by the callback.  Snapshots are taken at the grid's
    checkpoint dates; non-invertible specs additionally snapshot every
    ``DENSE_BLOCK`` steps so the backward sweep can recompute within blocks.
    """
    if M < 1:
        raise ValueError("need at least one path")
    h = grid.h
    _check_reversion_guard(spec, h)
    noise = make_noise_source(rng_key, spec.dim, noise_mode)
    tracker = tracker or StorageTracker()

    states = np.empty((M, spec.dim), dtype=np.float64)
    x0b = _as_block(x0, spec.dim)
    states[:] = np.broadcast_to(x0b, (M, spec.dim))
    tracker.alloc(states.size)

    snap_dates = set(grid.checkpoint_dates)
    if not (spec.invertible_step and spec.inverse is not None) and not full_storage:
        snap_dates.update(range(0, grid.N, DENSE_BLOCK))

    ens = PathEnsemble(spec=spec, grid=grid, M=M, noise=noise, states=states,
                       current_step=0, tracker=tracker, full_storage=full_storage,
                       workers=workers)

    def store(i, arr):
        snap = arr.copy()
        tracker.alloc(snap.size)
        return snap

    if 0 in snap_dates:
        ens.checkpoints[0] = store(0, states)
    if full_storage:
        ens.trajectory[0] = store(0, states)
    if on_step is not None:
        on_step(0, states)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for i in range(grid.N):
            t = grid.time(i)
            eps = noise.forward_block(i, M)

            def step_fn(a, b):
                return euler_step(states[a:b], t, h, eps[a:b], spec, step_index=i)

            _blocked_apply(step_fn, states, M, workers, pool=pool)
            if not np.all(np.isfinite(states)):
                bad = np.where(~np.isfinite(states).all(axis=1))[0]
                raise NumericalOverflow(
                    f"non-finite state at step {i + 1} (paths {bad[:5].tolist()}...)",
                    step=i + 1, paths=bad,
                )
            j = i + 1
            if j in snap_dates and j < grid.N:
                ens.checkpoints[j] = store(j, states)
            if full_storage:
                ens.trajectory[j] = store(j, states)
            if on_step is not None:
                on_step(j, states)
    finally:
        if pool is not None:
            pool.shutdown()

    ens.current_step = grid.N
    return ens


def backward_sweep(ensemble: PathEnsemble, visitor, workers=None):
    """Walk the ensemble from step N down to 0, calling visitor at each step.

    ``visitor(i, states)`` sees the M x d state matrix of step i; states at
    snapshot dates are restored exactly, others are rebuilt through the
    inverted Euler map (or forward recomputation within dense blocks for
    non-invertible specs).  The ensemble ends positioned at step 0.
    """
    grid, spec, noise = ensemble.grid, ensemble.spec, ensemble.noise
    if ensemble.current_step != grid.N:
        raise ValueError("ensemble must be at the terminal step before a backward sweep")
    workers = ensemble.workers if workers is None else workers
    M, h = ensemble.M, grid.h
    tracker = ensemble.tracker
    invertible = spec.invertible_step and spec.inverse is not None
    states_tracked = True  # the current buffer is individually counted

    def drop_current():
        nonlocal states_tracked
        if states_tracked:
            tracker.free(ensemble.states.size)
        states_tracked = False

    visitor(grid.N, ensemble.states)

    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    block_cache: dict = {}
    for i in range(grid.N - 1, -1, -1):
        if ensemble.full_storage:
            drop_current()
            ensemble.states = ensemble.trajectory[i]
        elif i in ensemble.checkpoints:
            snap = ensemble.checkpoints.pop(i)
            drop_current()
            ensemble.states = snap  # adopt the snapshot buffer, no copy
            states_tracked = True
            block_cache.clear()
        elif invertible:
            t = grid.time(i)
            eps = noise.replay_block(i, M)
            out = ensemble.states

            def inv_fn(a, b):
                return inverse_euler_step(out[a:b], t, h, eps[a:b], spec, step_index=i)

            _blocked_apply(inv_fn, out, M, workers, pool=pool)
        else:
            # Dense-block fallback: rebuild the whole block forward once,
            # then serve its steps from the cache while walking down.
            if i not in block_cache:
                covering = [j for j in ensemble.checkpoints if j <= i]
                if not covering:
                    raise UnsupportedSpec(
                        f"spec {spec.label!r} has no per-step inverse and no "
                        f"snapshot covers step {i}"
                    )
                base = max(covering)
                block_cache.clear()
                cur = ensemble.checkpoints[base]
                for j in range(base, i):
                    eps = noise.replay_block(j, M)
                    cur = euler_step(cur, grid.time(j), h, eps, spec, step_index=j)
                    block_cache[j + 1] = cur
            drop_current()
            ensemble.states = block_cache.pop(i)
        ensemble.current_step = i
        visitor(i, ensemble.states)

    if pool is not None:
        pool.shutdown()
    for j in list(ensemble.checkpoints):
        snap = ensemble.checkpoints.pop(j)
        tracker.free(snap.size)
    if not states_tracked and not ensemble.full_storage:
        tracker.alloc(ensemble.states.size)  # the adopted buffer is now the current one


# ---------------------------------------------------------------------------
# Snapshot serialization: 32-byte header + little-endian float64 row-major
# ---------------------------------------------------------------------------


def snapshot_to_bytes(states: np.ndarray, step_index: int) -> bytes:
    states = np.ascontiguousarray(states, dtype="<f8")
    if states.ndim != 2:
        raise ValueError("snapshot must be an M x d matrix")
    m, d = states.shape
    header = struct.pack("<8sIIIq4x", _SNAP_MAGIC, _SNAP_VERSION, m, d, step_index)
    assert len(header) == 32
    return header + states.tobytes()


def snapshot_from_bytes(blob: bytes):
    magic, version, m, d, step_index = struct.unpack_from("<8sIIIq", blob, 0)
    if magic != _SNAP_MAGIC:
        raise ValueError("not a snapshot blob")
    if version != _SNAP_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    data = np.frombuffer(blob, dtype="<f8", offset=32, count=m * d)
    return data.reshape(m, d).copy(), step_index
