"""Backward-induction solver for discretized optimal multiple switching.

The scheme: truncate the horizon, discretize with an Euler grid, localize the
state cloud, then walk backward computing for every path m, regime i

    V(n, m, i) = max over admissible j of
                 h f(t_n, x_m, j) - k(t_n, i, j) + clamp(regression of V(n+1, ., j))

Switching is restricted to decision dates; elsewhere only continuation is
allowed.  Paths come from the reversible Euler engine, so full trajectories
are never stored.  Under irreversibility plus separable costs the q x q max
collapses to a single descending pass over regimes (partial maxima).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    InstanceTooLarge,
    InvalidCosts,
    TerminalValueError,
    UnsupportedProblem,
)
from .localbasis import build_partition, quantile_bounds, regress_layer
from .pathgen import backward_sweep, euler_step, forward_sweep

__all__ = [
    "RegimeSet",
    "CostDecomposition",
    "SwitchingProblem",
    "SolverConfig",
    "PolicySurface",
    "GainDistribution",
    "validate",
    "terminal_layer",
    "backward_induction",
    "fast_max_layer",
    "reference_max_layer",
    "simulate_policy",
    "brute_force_value",
    "lattice_dp",
    "frozen_regime_terminal",
    "policy_to_bytes",
    "policy_from_bytes",
]

_SENTINEL = np.iinfo(np.int64).max  # argmax placeholder that loses every tie


@dataclass(frozen=True)
class RegimeSet:
    """Finite regime set; optionally a product grid ordered lexicographically.

    ``grid_shape`` is set when the regimes form a cartesian product of
    per-dimension axes; the componentwise partial order on that grid is what
    irreversibility and the fast maximum use.
    """

    points: np.ndarray  # (q, d')
    grid_shape: Optional[tuple] = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "points", pts)
        if len(np.unique(pts, axis=0)) != pts.shape[0]:
            raise ValueError("regimes must be distinct")
        if self.grid_shape is not None and int(np.prod(self.grid_shape)) != pts.shape[0]:
            raise ValueError("grid_shape inconsistent with number of regimes")

    @property
    def q(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_axes(cls, axes) -> "RegimeSet":
        """Cartesian product of 1-D axes, raveled lexicographically."""
        axes = [np.asarray(a, dtype=np.float64) for a in axes]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        return cls(points=pts, grid_shape=tuple(len(a) for a in axes))

    def dominates(self) -> np.ndarray:
        """(q, q) boolean: entry [i, j] true iff j >= i componentwise."""
        p = self.points
        return np.all(p[None, :, :] >= p[:, None, :], axis=2)


@dataclass(frozen=True)
class CostDecomposition:
    """Separable switching costs: k(t, i, j) = k1(t)[i] + k2(t)[j] for i != j.

    The diagonal is zero by the problem contract, so a per-switch fixed
    component may live in either part.
    """

    k1: Callable[[float], np.ndarray]
    k2: Callable[[float], np.ndarray]


@dataclass
class SwitchingProblem:
    """Profit/cost/terminal data of a discounted switching problem.

    ``profit`` and ``cost`` are in discounted form: profit(t, x, j) is the
    e^{-rho t}-discounted instantaneous profit rate of running regime j, and
    cost(t, i, j) >= 0 the discounted cost of switching i -> j (zero on the
    diagonal).  ``terminal(T, x, j)`` defaults to zero.
    """

    regimes: RegimeSet
    profit: Callable[[float, np.ndarray, int], np.ndarray]
    cost: Callable[[float, int, int], float]
    rho: float
    terminal: Optional[Callable[[float, np.ndarray, int], np.ndarray]] = None
    irreversible: bool = False
    separable: Optional[CostDecomposition] = None
    profit_layer: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    profit_select: Optional[Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = None
    cost_matrix_fn: Optional[Callable[[float], np.ndarray]] = None
    value_bound: Optional[Callable[[float], float]] = None
    label: str = "problem"

    @property
    def q(self) -> int:
        return self.regimes.q

    def profit_all(self, t, states) -> np.ndarray:
        """(M, q) profit rates across all regimes."""
        if self.profit_layer is not None:
            return self.profit_layer(t, states)
        return np.stack([self.profit(t, states, j) for j in range(self.q)], axis=1)

    def profit_at(self, t, states, regime_idx) -> np.ndarray:
        """(M,) profit rates at per-path regimes."""
        if self.profit_select is not None:
            return self.profit_select(t, states, regime_idx)
        out = np.empty(states.shape[0], dtype=np.float64)
        for j in np.unique(regime_idx):
            mask = regime_idx == j
            out[mask] = np.asarray(self.profit(t, states[mask], int(j)), dtype=np.float64)
        return out

    def costs_at(self, t) -> np.ndarray:
        """(q, q) switching-cost matrix at time t."""
        if self.cost_matrix_fn is not None:
            return self.cost_matrix_fn(t)
        if self.separable is not None:
            k1 = np.asarray(self.separable.k1(t), dtype=np.float64)
            k2 = np.asarray(self.separable.k2(t), dtype=np.float64)
            K = k1[:, None] + k2[None, :]
            np.fill_diagonal(K, 0.0)
            return K
        q = self.q
        K = np.zeros((q, q))
        for i in range(q):
            for j in range(q):
                if i != j:
                    K[i, j] = self.cost(t, i, j)
        return K

    def cost_pairs(self, t, i_idx, j_idx) -> np.ndarray:
        """Vector of costs k(t, i_m, j_m); zero where i_m == j_m."""
        if self.cost_matrix_fn is None and self.separable is not None:
            k1 = np.asarray(self.separable.k1(t), dtype=np.float64)
            k2 = np.asarray(self.separable.k2(t), dtype=np.float64)
            return np.where(i_idx == j_idx, 0.0, k1[i_idx] + k2[j_idx])
        K = self.costs_at(t)
        return K[i_idx, j_idx]

    def terminal_all(self, T, states) -> np.ndarray:
        if self.terminal is None:
            return np.zeros((states.shape[0], self.q))
        return np.stack([self.terminal(T, states, j) for j in range(self.q)], axis=1)


def validate(problem: SwitchingProblem, horizon: float) -> None:
    """Enforce the cost-structure contract at t = 0 and t = horizon.

    Checks: rho > 0; zero diagonal; every switch costs at least some
    kappa > 0; and the strict triangular inequality
    k(t, i->k) < k(t, i->j) + k(t, j->k) by exhaustive enumeration.
    """
    if problem.rho <= 0:
        raise InvalidCosts(f"discount rate must be positive, got {problem.rho}")
    q = problem.q
    for t in (0.0, float(horizon)):
        for i in range(q):
            kii = float(problem.cost(t, i, i))
            if kii != 0.0:
                raise InvalidCosts(f"k(t={t}, i, i) must be 0, got {kii} at regime {i}",
                                   witness=(i, i, i))
        if problem.cost_matrix_fn is not None:
            K = problem.cost_matrix_fn(t)
        elif q <= 256:
            K = np.zeros((q, q))
            for i in range(q):
                for j in range(q):
                    if i != j:
                        K[i, j] = problem.cost(t, i, j)
        else:
            K = problem.costs_at(t)  # too many scalar calls; use declared form
        off = K[~np.eye(q, dtype=bool)]
        if off.size and off.min() <= 0:
            flat = np.where(~np.eye(q, dtype=bool) & (K <= 0))
            i, j = int(flat[0][0]), int(flat[1][0])
            raise InvalidCosts(
                f"every switch needs a positive cost; k(t={t}, {i}->{j}) = {K[i, j]}",
                witness=(i, j),
            )
        if problem.separable is not None:
            k1 = np.asarray(problem.separable.k1(t), dtype=np.float64)
            k2 = np.asarray(problem.separable.k2(t), dtype=np.float64)
            Ksep = k1[:, None] + k2[None, :]
            np.fill_diagonal(Ksep, 0.0)
            # the decomposition only has to match on admissible switches
            scope = problem.regimes.dominates() if problem.irreversible else np.ones_like(Ksep, bool)
            if not np.allclose(K[scope], Ksep[scope], rtol=1e-9, atol=1e-12):
                raise InvalidCosts(
                    f"declared separable decomposition disagrees with the cost "
                    f"matrix on admissible switches at t={t}"
                )
        # strict triangle, blocked over the first index to bound memory
        block = max(1, int(2**22 // max(q * q, 1)))
        for a in range(0, q, block):
            b = min(a + block, q)
            sums = K[a:b, :, None] + K[None, :, :]  # (b-a, q, q): i, j, k
            jj = np.arange(q)
            for row, i in enumerate(range(a, b)):
                sums[row, i, :] = np.inf  # exclude j == i
            sums[:, jj, jj] = np.inf  # exclude j == k
            best = sums.min(axis=1)  # (b-a, q)
            # i == k entries have K[i,i] = 0 < best (positive costs), never flagged
            viol = best <= K[a:b, :]
            if np.any(viol):
                r, k = np.argwhere(viol)[0]
                i = int(a + r)
                j = int(sums[r, :, k].argmin())
                raise InvalidCosts(
                    f"triangular inequality violated at t={t}: "
                    f"k({i}->{k}) = {K[i, k]} >= k({i}->{j}) + k({j}->{k}) "
                    f"= {sums[r, j, k]}",
                    witness=(i, j, int(k)),
                )


def terminal_layer(states_T, problem: SwitchingProblem, T: float) -> np.ndarray:
    """Fill the terminal layer V(N, m, i) = g(T, x_m, i)."""
    vals = problem.terminal_all(T, np.atleast_2d(states_T))
    if not np.all(np.isfinite(vals)):
        raise TerminalValueError("terminal value function returned non-finite values")
    return vals


def frozen_regime_terminal(spec, problem, T, horizon_ext, substeps=10, rng_key=0):
    """Terminal value estimating the post-horizon gain with a frozen regime.

    Continues the diffusion over [T, T + horizon_ext] in ``substeps`` Euler
    steps (midpoint time discounting) and accrues the running profit without
    further switching.  Returns a g(T, states, j) callable.
    """
    from .rng import make_noise_source

    h_sub = horizon_ext / substeps

    def g(T_, states, j):
        states = np.atleast_2d(states)
        noise = make_noise_source(rng_key, spec.dim, "counter")
        x = states.copy()
        acc = np.zeros(states.shape[0])
        for s in range(substeps):
            t_mid = T_ + (s + 0.5) * h_sub
            acc += h_sub * np.asarray(problem.profit(t_mid, x, j), dtype=np.float64)
            eps = noise.forward_block(10**6 + s, states.shape[0])
            x = euler_step(x, T_ + s * h_sub, h_sub, eps, spec)
        return acc

    return g


# ---------------------------------------------------------------------------
# Layer maxima
# ---------------------------------------------------------------------------


def _combine_keep(cur_v, cur_i, new_v, new_i):
    """In-place max with smallest-index tie-break on (value, index) pairs."""
    take = (new_v > cur_v) | ((new_v == cur_v) & (new_i < cur_i))
    np.copyto(cur_v, new_v, where=take)
    np.copyto(cur_i, new_i, where=take)


def _upper_orthant_max(values_t, grid_shape, reuse=False):
    """Max of values[j] over {j >= i} per regime i, plus the winning index.

    values_t: (q, M) regime-major (contiguous per-regime rows), regimes
    raveled lexicographically on grid_shape.  A suffix-max pass per grid axis
    computes the whole table in O(q d') vector ops.  With ``reuse`` the input
    buffer is consumed in place.
    """
    q, m = values_t.shape
    v = values_t.reshape(grid_shape + (m,))
    if not reuse:
        v = v.copy()
    idx = np.broadcast_to(
        np.arange(q, dtype=np.int64).reshape(grid_shape + (1,)), grid_shape + (m,)
    ).copy()
    nd = len(grid_shape)
    for ax in range(nd):
        n = grid_shape[ax]
        for pos in range(n - 2, -1, -1):
            sl_cur = (slice(None),) * ax + (pos,)
            sl_nxt = (slice(None),) * ax + (pos + 1,)
            _combine_keep(v[sl_cur], idx[sl_cur], v[sl_nxt], idx[sl_nxt])
    return v.reshape(q, m), idx.reshape(q, m)


def _strict_upper_max(pm_v, pm_i, grid_shape):
    """Max over {j >= i, j != i} from the orthant table: combine successors."""
    q, m = pm_v.shape
    out_v = np.full(grid_shape + (m,), -np.inf)
    out_i = np.full(grid_shape + (m,), _SENTINEL, dtype=np.int64)
    pv = pm_v.reshape(grid_shape + (m,))
    pi = pm_i.reshape(grid_shape + (m,))
    nd = len(grid_shape)
    for ax in range(nd):
        n = grid_shape[ax]
        if n < 2:
            continue
        head = (slice(None),) * ax + (slice(0, n - 1),)
        tail = (slice(None),) * ax + (slice(1, n),)
        _combine_keep(out_v[head], out_i[head], pv[tail], pi[tail])
    return out_v.reshape(q, m), out_i.reshape(q, m)


def fast_max_layer(continuations, profits, h, decomposition_k1, decomposition_k2,
                   grid_shape):
    """All-regime maxima in O(q) per path for irreversible separable costs.

    Arrays are regime-major (q, M), regimes raveled lexicographically on
    ``grid_shape``.  Computes, for every start regime i,

        value(i) = max( cand[i],
                        max_{j >= i, j != i} (cand[j] - k2[j]) - k1[i] )

    where cand = h * profits + continuations, via descending partial maxima
    over the regime grid.  Ties prefer staying, then the smallest regime.
    Bitwise-equal to :func:`reference_max_layer` on the same inputs.
    """
    if decomposition_k1 is None or decomposition_k2 is None or grid_shape is None:
        raise UnsupportedProblem(
            "the O(q) sweep needs a declared cost decomposition and regime ordering"
        )
    cand = profits * h  # (q, M)
    cand += continuations
    q, m = cand.shape
    c = cand - np.asarray(decomposition_k2, dtype=np.float64)[:, None]
    pm_v, pm_i = _upper_orthant_max(c, grid_shape, reuse=True)
    sm_v, sm_i = _strict_upper_max(pm_v, pm_i, grid_shape)
    with np.errstate(invalid="ignore"):
        sm_v -= np.asarray(decomposition_k1, dtype=np.float64)[:, None]
    idx = np.broadcast_to(np.arange(q, dtype=np.int64)[:, None], (q, m))
    take_stay = cand >= sm_v
    value = np.where(take_stay, cand, sm_v)
    action = np.where(take_stay, idx, sm_i)
    return value, action


def reference_max_layer(continuations, profits, h, decomposition_k1,
                        decomposition_k2, grid_shape):
    """O(q^2) double-loop reference sharing the fast path's term arithmetic.

    Same regime-major (q, M) layout as :func:`fast_max_layer`.
    """
    cand = h * profits + continuations
    q, m = cand.shape
    k1 = np.asarray(decomposition_k1, dtype=np.float64)
    k2 = np.asarray(decomposition_k2, dtype=np.float64)
    c = cand - k2[:, None]
    multi = np.stack(np.unravel_index(np.arange(q), grid_shape), axis=1)
    value = np.empty((q, m))
    action = np.empty((q, m), dtype=np.int64)
    for i in range(q):
        best_v = np.full(m, -np.inf)
        best_i = np.full(m, _SENTINEL, dtype=np.int64)
        for j in range(q):
            if j == i or not np.all(multi[j] >= multi[i]):
                continue
            _combine_keep(best_v, best_i, c[j], np.full(m, j, dtype=np.int64))
        with np.errstate(invalid="ignore"):
            switch_v = best_v - k1[i]
        take_stay = cand[i] >= switch_v
        value[i] = np.where(take_stay, cand[i], switch_v)
        action[i] = np.where(take_stay, i, best_i)
    return value, action


def _general_max_layer(cand, K, dominates):
    """Any-cost decision layer: value/action for all start regimes.

    cand: (M, q) candidate values h f + Phi; K: (q, q) cost matrix;
    dominates: (q, q) admissibility (None -> all switches admissible).
    """
    m, q = cand.shape
    value = np.empty((m, q))
    action = np.empty((m, q), dtype=np.int64)
    for i in range(q):
        scores = cand - K[i][None, :]
        best_v = np.full(m, -np.inf)
        best_i = np.full(m, _SENTINEL, dtype=np.int64)
        for j in range(q):
            if j == i:
                continue
            if dominates is not None and not dominates[i, j]:
                continue
            _combine_keep(best_v, best_i, scores[:, j], np.full(m, j, dtype=np.int64))
        take_stay = cand[:, i] >= best_v
        value[:, i] = np.where(take_stay, cand[:, i], best_v)
        action[:, i] = np.where(take_stay, i, best_i)
    return value, action


# ---------------------------------------------------------------------------
# Backward induction
# ---------------------------------------------------------------------------


@dataclass
class SolverConfig:
    """Numerical knobs of the backward induction."""

    cells: int = 64
    basis: str = "const"  # or "linear"
    partition_mode: str = "adaptive"
    eps: float = 0.01
    domain: object = None  # LocalizationDomain; None -> per-step quantiles
    keep_actions: bool = False
    keep_values: bool = False
    use_fast_max: bool = True


@dataclass
class DecisionLayer:
    step: int
    partition: object
    estimates: list
    actions: Optional[np.ndarray] = None  # (M, q) int32, training-path actions


@dataclass
class PolicySurface:
    """Backward-induction output: values at t0 and per-decision-step policy data."""

    regimes: RegimeSet
    grid: object
    value0: np.ndarray  # (q,)
    decision_layers: dict = field(default_factory=dict)
    value_layers: dict = field(default_factory=dict)
    config: SolverConfig = field(default_factory=SolverConfig)

    def decide(self, problem, step, states, current_idx):
        """Out-of-sample actions at a decision step for fresh states.

        Locates each state's cell in the stored partition (snapping outside
        points), evaluates the stored regression estimates and redoes the
        argmax of the recursion at the paths' current regimes.
        """
        lay = self.decision_layers[step]
        t = self.grid.time(step)
        h = self.grid.h
        states = np.atleast_2d(states)
        ids = lay.partition.assign(states)
        phi = np.stack([e.fitted(ids, states) for e in lay.estimates], axis=1)
        prof = problem.profit_all(t, states)
        cand = h * prof + phi
        if problem.irreversible and problem.separable is not None and self.config.use_fast_max:
            k1 = np.asarray(problem.separable.k1(t), dtype=np.float64)
            k2 = np.asarray(problem.separable.k2(t), dtype=np.float64)
            shape = self.regimes.grid_shape or (self.regimes.q,)
            _, action_t = fast_max_layer(np.ascontiguousarray(phi.T),
                                         np.ascontiguousarray(prof.T), h, k1, k2, shape)
            action = action_t.T
        else:
            K = problem.costs_at(t)
            dom = self.regimes.dominates() if problem.irreversible else None
            _, action = _general_max_layer(cand, K, dom)
        rows = np.arange(states.shape[0])
        return action[rows, current_idx]


def backward_induction(ensemble, problem: SwitchingProblem,
                       config: Optional[SolverConfig] = None) -> PolicySurface:
    """Solve the switching problem on a terminal-positioned ensemble.

    Runs the visitor-driven backward sweep: at each step the regression of
    the next layer per regime is built on the current (localized) states,
    then the per-path maxima fill the current layer.  Only two M x q value
    layers are alive at any time.
    """
    config = config or SolverConfig()
    grid = ensemble.grid
    problem_q = problem.q
    M = ensemble.M
    h = grid.h
    decision_set = set(grid.decision_dates)
    fast_ok = problem.irreversible and problem.separable is not None and config.use_fast_max
    if fast_ok and problem.regimes.grid_shape is None and problem.regimes.q > 1:
        # without a grid, the index order must itself be the total order
        pts = problem.regimes.points
        fast_ok = pts.shape[1] == 1 and bool(np.all(np.diff(pts[:, 0]) > 0))

    surface = PolicySurface(
        regimes=problem.regimes, grid=grid,
        value0=np.zeros(problem_q), config=config,
    )
    state = {"v_next": None}

    def visitor(n, raw_states):
        t = grid.time(n)
        if config.domain is not None:
            x = config.domain.clamp(raw_states, n)
        else:
            lo, hi = quantile_bounds(raw_states, config.eps)
            x = np.clip(raw_states, lo, hi)

        if n == grid.N:
            state["v_next"] = terminal_layer(x, problem, grid.T)
            if config.keep_values:
                surface.value_layers[n] = state["v_next"].copy()
            return

        v_next = state["v_next"]
        if problem.value_bound is not None:
            g_hi = float(problem.value_bound(t))
            g_lo = -g_hi
        else:
            g_hi = 2.0 * float(np.max(np.abs(v_next)))
            g_lo = -g_hi
        cells = min(config.cells, M)
        part, ids = build_partition(x, cells, mode=config.partition_mode,
                                    step=n, return_ids=True)
        ests = regress_layer(x, v_next, part, (g_lo, g_hi), config.basis, ids=ids)
        phi = np.stack([e.fitted(ids, x) for e in ests], axis=1)  # (M, q)
        prof = problem.profit_all(t, x)

        if n in decision_set:
            if fast_ok:
                k1 = np.asarray(problem.separable.k1(t), dtype=np.float64)
                k2 = np.asarray(problem.separable.k2(t), dtype=np.float64)
                shape = problem.regimes.grid_shape or (problem_q,)
                value_t, action_t = fast_max_layer(np.ascontiguousarray(phi.T),
                                                   np.ascontiguousarray(prof.T),
                                                   h, k1, k2, shape)
                value = np.ascontiguousarray(value_t.T)
                action = action_t.T
            else:
                cand = h * prof + phi
                K = problem.costs_at(t)
                dom = problem.regimes.dominates() if problem.irreversible else None
                value, action = _general_max_layer(cand, K, dom)
            surface.decision_layers[n] = DecisionLayer(
                step=n, partition=part, estimates=ests,
                actions=action.astype(np.int32) if config.keep_actions else None,
            )
        else:
            value = h * prof + phi
        if config.keep_values:
            surface.value_layers[n] = value.copy()
        state["v_next"] = value

    backward_sweep(ensemble, visitor)
    surface.value0 = np.mean(state["v_next"], axis=0)
    return surface


# ---------------------------------------------------------------------------
# Policy simulation (out-of-sample lower bound)
# ---------------------------------------------------------------------------


@dataclass
class GainDistribution:
    """Per-path realized gains and regime statistics of a simulated policy."""

    gains: np.ndarray  # (M,)
    switch_counts: np.ndarray  # (M,)
    decision_steps: tuple
    decision_regimes: np.ndarray  # (n_decisions, M) regime indices after deciding

    @property
    def mean(self) -> float:
        return float(np.mean(self.gains))

    @property
    def stderr(self) -> float:
        n = self.gains.size
        return float(np.std(self.gains) / np.sqrt(n)) if n > 1 else 0.0


def simulate_policy(spec, grid, problem: SwitchingProblem, policy, M, rng_key, x0,
                    start_regime=0, workers=1, recorder=None) -> GainDistribution:
    """Forward-apply a policy on fresh paths and accumulate realized gains.

    ``policy`` is a PolicySurface (looked up out-of-sample), an integer array
    indexed by decision date (deterministic schedule), or None (never switch).
    Use an RNG key distinct from the training key for a low-bias estimate.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .pathgen import _blocked_apply
    from .rng import make_noise_source

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    noise = make_noise_source(rng_key, spec.dim, "counter")
    h = grid.h
    states = np.empty((M, spec.dim))
    states[:] = np.broadcast_to(np.atleast_2d(np.asarray(x0, dtype=np.float64)), (M, spec.dim))
    regime = np.full(M, int(start_regime), dtype=np.int64)
    gains = np.zeros(M)
    switches = np.zeros(M, dtype=np.int64)
    decisions = sorted(set(grid.decision_dates))
    dec_regimes = np.empty((len(decisions), M), dtype=np.int32)
    schedule = None
    if isinstance(policy, (np.ndarray, list, tuple)):
        schedule = np.asarray(policy, dtype=np.int64)
        if schedule.shape[0] != len(decisions):
            raise ValueError("schedule must give one regime per decision date")

    dec_pos = {s: k for k, s in enumerate(decisions)}
    for i in range(grid.N):
        t = grid.time(i)
        if i in dec_pos:
            if schedule is not None:
                new = np.full(M, schedule[dec_pos[i]], dtype=np.int64)
            elif policy is None:
                new = regime
            else:
                new = policy.decide(problem, i, states, regime)
            moved = new != regime
            if np.any(moved):
                gains[moved] -= problem.cost_pairs(t, regime[moved], new[moved])
                switches[moved] += 1
                regime = new.copy()
            dec_regimes[dec_pos[i]] = regime
        gains += h * problem.profit_at(t, states, regime)
        if recorder is not None:
            recorder(i, t, states, regime)
        eps = noise.forward_block(i, M)
        nxt = np.empty_like(states)
        _blocked_apply(lambda a, b: euler_step(states[a:b], t, h, eps[a:b], spec,
                                               step_index=i), nxt, M, workers, pool=pool)
        states = nxt
    if pool is not None:
        pool.shutdown()
    if recorder is not None:
        recorder(grid.N, grid.T, states, regime)
    if problem.terminal is not None:
        term = problem.terminal_all(grid.T, states)
        gains += term[np.arange(M), regime]
    return GainDistribution(
        gains=gains, switch_counts=switches,
        decision_steps=tuple(decisions), decision_regimes=dec_regimes,
    )


# ---------------------------------------------------------------------------
# Brute-force lattice oracle (ground truth for tiny instances)
# ---------------------------------------------------------------------------


def lattice_dp(spec, grid, problem: SwitchingProblem, x0, lattice_lo, lattice_hi,
               n_nodes=21, n_quad=64):
    """Exact DP on a 1-D state lattice with Gauss-Hermite transitions.

    Uses the same Euler one-step law as the Monte Carlo solver (so the
    comparison isolates regression/localization error), linear interpolation
    between nodes and constant extrapolation at the edges.  Returns the
    per-regime value vector at (t=0, x0).
    """
    if spec.dim != 1:
        raise InstanceTooLarge("the lattice oracle is one-dimensional")
    nodes = np.linspace(float(lattice_lo), float(lattice_hi), int(n_nodes))
    z, w = np.polynomial.hermite_e.hermegauss(int(n_quad))
    w = w / np.sqrt(2.0 * np.pi)
    q = problem.q
    h = grid.h
    decision_set = set(grid.decision_dates)
    dom = problem.regimes.dominates() if problem.irreversible else None

    V = terminal_layer(nodes[:, None], problem, grid.T)  # (L, q)
    for n in range(grid.N - 1, -1, -1):
        t = grid.time(n)
        xcol = nodes[:, None]
        drift = np.asarray(spec.drift(t, xcol), dtype=np.float64)[:, 0]
        sig = np.asarray(spec.diffusion(t, xcol), dtype=np.float64)
        sig = np.broadcast_to(sig.reshape(-1, 1) if sig.ndim <= 1 else sig, (len(nodes), 1))[:, 0]
        xnext = nodes[:, None] + drift[:, None] * h + sig[:, None] * np.sqrt(h) * z[None, :]
        cont = np.empty((len(nodes), q))
        for j in range(q):
            vals = np.interp(xnext.ravel(), nodes, V[:, j]).reshape(len(nodes), -1)
            cont[:, j] = vals @ w
        prof = problem.profit_all(t, nodes[:, None])
        cand = h * prof + cont  # (L, q)
        if n in decision_set:
            K = problem.costs_at(t)
            newV = np.empty_like(cand)
            for i in range(q):
                scores = cand - K[i][None, :]
                if dom is not None:
                    scores = np.where(dom[i][None, :], scores, -np.inf)
                scores[:, i] = cand[:, i]
                newV[:, i] = scores.max(axis=1)
            V = newV
        else:
            V = cand
    out = np.empty(q)
    for i in range(q):
        out[i] = np.interp(float(np.asarray(x0).ravel()[0]), nodes, V[:, i])
    return out


def policy_to_bytes(surface: PolicySurface) -> bytes:
    """Compact binary action surface: header + int16 matrices per decision step.

    Layout (little-endian): magic 'SWMCPOLI', version u32, n_decisions u32,
    M u32, q u32, pad, then per decision step an i64 step index followed by
    the row-major M x q action matrix.  Requires keep_actions=True layers.
    """
    import struct

    steps = sorted(s for s, lay in surface.decision_layers.items()
                   if lay.actions is not None)
    if not steps:
        raise ValueError("no stored action layers; solve with keep_actions=True")
    m, q = surface.decision_layers[steps[0]].actions.shape
    out = [struct.pack("<8sIIII4x", b"SWMCPOLI", 1, len(steps), m, q)]
    for s in steps:
        acts = surface.decision_layers[s].actions
        out.append(struct.pack("<q", s))
        out.append(np.ascontiguousarray(acts, dtype="<i2").tobytes())
    return b"".join(out)


def policy_from_bytes(blob: bytes):
    """Inverse of policy_to_bytes: {step: (M, q) int16 action matrix}."""
    import struct

    magic, version, n_dec, m, q = struct.unpack_from("<8sIIII", blob, 0)
    if magic != b"SWMCPOLI" or version != 1:
        raise ValueError("not a policy blob")
    off = 28
    layers = {}
    for _ in range(n_dec):
        (step,) = struct.unpack_from("<q", blob, off)
        off += 8
        acts = np.frombuffer(blob, dtype="<i2", count=m * q, offset=off).reshape(m, q)
        off += m * q * 2
        layers[int(step)] = acts.copy()
    return layers


def brute_force_value(spec, grid, problem: SwitchingProblem, x0, lattice_lo,
                      lattice_hi, n_nodes=21, n_quad=64):
    """Ground-truth values for tiny instances (N <= 12, q <= 3, nodes <= 51).

    This is the documented generator of expected values for the solver's
    equivalence tests; larger requests must use the solver itself.
    """
    if grid.N > 12 or problem.q > 3 or n_nodes > 51:
        raise InstanceTooLarge(
            f"brute force limited to N <= 12, q <= 3, nodes <= 51 "
            f"(got N={grid.N}, q={problem.q}, nodes={n_nodes})"
        )
    return lattice_dp(spec, grid, problem, x0, lattice_lo, lattice_hi, n_nodes, n_quad)
