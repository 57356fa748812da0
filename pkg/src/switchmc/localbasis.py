"""Local hypercube bases: state-cloud localization, partitions, regressions.

The conditional expectations of the backward recursion are approximated by
least squares on indicator (or local affine) bases supported on disjoint
axis-aligned boxes partitioning the localized state cloud.  Estimates are
always clamped into known bounds, which is what keeps the recursion stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidPartition

__all__ = [
    "LocalizationDomain",
    "Partition",
    "RegressionEstimate",
    "brownian_radius",
    "quantile_bounds",
    "localize",
    "build_partition",
    "regress",
    "regress_layer",
    "evaluate",
    "min_cell_probability_bound",
]

RIDGE_SCALE = 1e-8  # ridge penalty, relative to the design Gram trace scale

# Coordinate spans at or below this relative width are floating-point dust
# (e.g. backward-replayed copies of a common starting point), not geometry:
# cells must never condition on them.
SPAN_RTOL = 1e-9


def _real_span(lo, hi) -> bool:
    return (hi - lo) > SPAN_RTOL * max(abs(lo), abs(hi), 1.0)


def brownian_radius(t: float, eps: float, d: int = 1) -> float:
    """Clamp radius C(t, eps) = sqrt(t ln(8t / (pi eps^(2/d)))) for a standard
    d-dimensional Brownian motion, chosen so E|W_t - clamp(W_t)| <= eps.

    Returns 0 where the bound degenerates (t so small every point is kept).
    """
    if t <= 0:
        return 0.0
    arg = 8.0 * t / (np.pi * eps ** (2.0 / d))
    return float(np.sqrt(t * max(np.log(arg), 0.0)))


def quantile_bounds(states: np.ndarray, eps: float):
    """Per-coordinate clamp interval from empirical tail quantiles.

    Levels eps/(2d) and 1 - eps/(2d), so the expected clamped fraction of
    coordinate values is eps/d per step.
    """
    d = states.shape[1]
    q = eps / (2.0 * d)
    lo = np.quantile(states, q, axis=0)
    hi = np.quantile(states, 1.0 - q, axis=0)
    return lo, hi


@dataclass
class LocalizationDomain:
    """Per-step, per-coordinate clamp intervals with target tail mass eps."""

    lo: np.ndarray  # (n_steps+1, d)
    hi: np.ndarray
    eps: float

    def clamp(self, states: np.ndarray, step: int) -> np.ndarray:
        if step >= self.lo.shape[0]:
            raise IndexError(f"domain covers steps 0..{self.lo.shape[0] - 1}, got {step}")
        return np.clip(states, self.lo[step], self.hi[step])

    @classmethod
    def brownian(cls, grid, eps: float, d: int = 1) -> "LocalizationDomain":
        radii = np.array([brownian_radius(grid.time(i), eps, d) for i in range(grid.N + 1)])
        lo = -radii[:, None] * np.ones(d)
        return cls(lo=lo, hi=-lo, eps=eps)


def localize(states: np.ndarray, domain: LocalizationDomain, step: int) -> np.ndarray:
    """Project states into the step's box; in-domain points are unchanged."""
    return domain.clamp(states, step)


def _descend(node_dim, node_thr, node_left, node_right, pts):
    """Vectorized kd-descent; returns the leaf cell id of every point."""
    m = pts.shape[0]
    cur = np.zeros(m, dtype=np.int64)  # node pointers; leaves encoded negative
    out = np.empty(m, dtype=np.int64)
    active = np.arange(m)
    while active.size:
        nodes = cur[active]
        left = pts[active, node_dim[nodes]] < node_thr[nodes]
        nxt = np.where(left, node_left[nodes], node_right[nodes])
        done = nxt < 0
        out[active[done]] = -nxt[done] - 1
        cur[active] = nxt
        active = active[~done]
    return out


@dataclass
class Partition:
    """Disjoint axis-aligned boxes covering the localized domain at one step.

    Cell membership is half-open [lo, hi) per dimension except at the top
    edge of the covered box, which is closed; points outside the box snap to
    the nearest cell by center distance.
    """

    step_index: int
    mode: str
    box_lo: np.ndarray
    box_hi: np.ndarray
    cells_lo: np.ndarray  # (K, d)
    cells_hi: np.ndarray
    counts: np.ndarray  # training-sample membership counts
    n_train: int
    delta_min: float
    delta_max: float
    # uniform-grid machinery
    grid_shape: Optional[tuple] = None
    # adaptive-tree machinery
    node_dim: Optional[np.ndarray] = None
    node_thr: Optional[np.ndarray] = None
    node_left: Optional[np.ndarray] = None
    node_right: Optional[np.ndarray] = None
    centers: np.ndarray = field(init=False)

    def __post_init__(self):
        self.centers = 0.5 * (self.cells_lo + self.cells_hi)

    @property
    def n_cells(self) -> int:
        return self.cells_lo.shape[0]

    def assign(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = np.all((pts >= self.box_lo) & (pts <= self.box_hi), axis=1)
        ids = np.empty(pts.shape[0], dtype=np.int64)
        if np.any(inside):
            ids[inside] = self._assign_inside(pts[inside])
        if np.any(~inside):
            far = pts[~inside]
            d2 = ((far[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
            ids[~inside] = np.argmin(d2, axis=1)
        return ids

    def _assign_inside(self, pts):
        if self.mode == "uniform":
            shape = np.asarray(self.grid_shape)
            width = (self.box_hi - self.box_lo) / shape
            scaled = np.where(width > 0, (pts - self.box_lo) / np.where(width > 0, width, 1.0), 0.0)
            idx = np.clip(np.floor(scaled).astype(np.int64), 0, shape - 1)
            return np.ravel_multi_index(tuple(idx.T), self.grid_shape)
        return _descend(self.node_dim, self.node_thr, self.node_left, self.node_right, pts)


def _record_deltas(part):
    edges = part.cells_hi - part.cells_lo
    part.delta_min = float(edges.min())
    part.delta_max = float(edges.max())


def _build_uniform(states, target_cells, step, box):
    m, d = states.shape
    lo, hi = box
    n_per = int(np.ceil(target_cells ** (1.0 / d)))
    shape = tuple(n_per if _real_span(lo[j], hi[j]) else 1 for j in range(d))
    edges = [np.linspace(lo[j], hi[j], shape[j] + 1) for j in range(d)]
    mesh = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    flat = [g.ravel() for g in mesh]
    cells_lo = np.stack([edges[j][flat[j]] for j in range(d)], axis=1)
    cells_hi = np.stack([edges[j][flat[j] + 1] for j in range(d)], axis=1)
    part = Partition(
        step_index=step, mode="uniform", box_lo=lo, box_hi=hi,
        cells_lo=cells_lo, cells_hi=cells_hi,
        counts=np.zeros(cells_lo.shape[0], dtype=np.int64), n_train=m,
        delta_min=0.0, delta_max=0.0, grid_shape=shape,
    )
    ids = part.assign(states)
    part.counts = np.bincount(ids, minlength=part.n_cells).astype(np.int64)
    _record_deltas(part)
    return part, ids


def _build_adaptive(states, target_cells, step, box):
    m, d = states.shape
    lo, hi = box
    node_dim, node_thr, node_left, node_right = [], [], [], []
    leaves = [{"idx": np.arange(m), "lo": lo.copy(), "hi": hi.copy(),
               "depth": 0, "parent": None, "side": None}]

    def leaf_code(i):
        return -(i + 1)

    while len(leaves) < target_cells:
        # split the most populated leaf; ties resolved by creation order
        sizes = [lv["idx"].size for lv in leaves]
        order = sorted(range(len(leaves)), key=lambda i: (-sizes[i], i))
        split_done = False
        for li in order:
            lv = leaves[li]
            vals = states[lv["idx"]]
            for k in range(d):
                dim = (lv["depth"] + k) % d
                col = vals[:, dim]
                if not _real_span(float(col.min()), float(col.max())):
                    continue
                thr = float(np.median(col))
                mask = col < thr
                if not mask.any() or mask.all():
                    continue
                node_id = len(node_dim)
                node_dim.append(dim)
                node_thr.append(thr)
                node_left.append(0)
                node_right.append(0)
                if lv["parent"] is not None:
                    if lv["side"] == "L":
                        node_left[lv["parent"]] = node_id
                    else:
                        node_right[lv["parent"]] = node_id
                left_hi = lv["hi"].copy()
                left_hi[dim] = thr
                right_lo = lv["lo"].copy()
                right_lo[dim] = thr
                left = {"idx": lv["idx"][mask], "lo": lv["lo"], "hi": left_hi,
                        "depth": lv["depth"] + 1, "parent": node_id, "side": "L"}
                right = {"idx": lv["idx"][~mask], "lo": right_lo, "hi": lv["hi"],
                         "depth": lv["depth"] + 1, "parent": node_id, "side": "R"}
                leaves[li] = left
                leaves.append(right)
                split_done = True
                break
            if split_done:
                break
        if not split_done:
            break  # nothing splittable (duplicated points); fewer cells than asked

    for i, lv in enumerate(leaves):
        if lv["parent"] is None:
            continue
        if lv["side"] == "L":
            node_left[lv["parent"]] = leaf_code(i)
        else:
            node_right[lv["parent"]] = leaf_code(i)

    if not node_dim:  # single cell, no tree
        node_dim, node_thr = [0], [np.inf]
        node_left, node_right = [leaf_code(0)], [leaf_code(0)]

    cells_lo = np.stack([lv["lo"] for lv in leaves])
    cells_hi = np.stack([lv["hi"] for lv in leaves])
    counts = np.array([lv["idx"].size for lv in leaves], dtype=np.int64)
    ids = np.empty(m, dtype=np.int64)
    for i, lv in enumerate(leaves):
        ids[lv["idx"]] = i
    part = Partition(
        step_index=step, mode="adaptive", box_lo=lo, box_hi=hi,
        cells_lo=cells_lo, cells_hi=cells_hi, counts=counts, n_train=m,
        delta_min=0.0, delta_max=0.0,
        node_dim=np.array(node_dim), node_thr=np.array(node_thr),
        node_left=np.array(node_left), node_right=np.array(node_right),
    )
    _record_deltas(part)
    return part, ids


def build_partition(states, target_cells, mode="adaptive", step=0, box=None,
                    return_ids=False):
    """Partition the state cloud into ~``target_cells`` hypercubes.

    uniform: regular grid with ceil(K^(1/d)) cells per dimension over the box.
    adaptive: recursive median splits (cycling dimensions, largest cell first)
    until K cells or nothing is splittable, so cells hold approximately equal
    numbers of training points.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    m = states.shape[0]
    if not 1 <= target_cells <= m:
        raise InvalidPartition(f"need 1 <= cells <= {m} training points, got {target_cells}")
    if box is None:
        lo = states.min(axis=0)
        hi = states.max(axis=0)
    else:
        lo = np.asarray(box[0], dtype=np.float64)
        hi = np.asarray(box[1], dtype=np.float64)
    if mode == "uniform":
        part, ids = _build_uniform(states, target_cells, step, (lo, hi))
    elif mode == "adaptive":
        part, ids = _build_adaptive(states, target_cells, step, (lo, hi))
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return (part, ids) if return_ids else part


def min_cell_probability_bound(partition: Partition) -> float:
    """Empirical min over cells of P(X in cell); diagnostic for convergence."""
    return float(partition.counts.min() / partition.n_train)


# ---------------------------------------------------------------------------
# Truncated local least squares
# ---------------------------------------------------------------------------


@dataclass
class RegressionEstimate:
    """Per-cell coefficients with truncation bounds.

    const mode: one scalar per cell (equal to the in-cell sample mean).
    linear mode: intercept plus slopes against (x - cell center).
    evaluate() clamps into [gamma_lo, gamma_hi] always.
    """

    partition: Partition
    mode: str
    coef: np.ndarray  # (K,) or (K, 1+d)
    gamma_lo: float
    gamma_hi: float

    def evaluate(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ids = self.partition.assign(pts)
        vals = np.clip(self._value_at(ids, pts), self.gamma_lo, self.gamma_hi)
        return vals[0] if np.ndim(x) == 1 else vals

    def fitted(self, ids, pts) -> np.ndarray:
        """In-sample evaluation from precomputed cell assignments."""
        return np.clip(self._value_at(ids, pts), self.gamma_lo, self.gamma_hi)

    def _value_at(self, ids, pts):
        if self.mode == "const":
            return self.coef[ids]
        base = self.coef[ids, 0]
        slopes = self.coef[ids, 1:]
        return base + np.sum(slopes * (pts - self.partition.centers[ids]), axis=1)

    def to_json(self) -> str:
        p = self.partition
        return json.dumps(
            {
                "step_index": p.step_index,
                "mode": self.mode,
                "cells_lo": p.cells_lo.tolist(),
                "cells_hi": p.cells_hi.tolist(),
                "counts": p.counts.tolist(),
                "coef": self.coef.tolist(),
                "gamma": [self.gamma_lo, self.gamma_hi],
            },
            sort_keys=True,
        )


def _nearest_nonempty_fill(partition, table):
    """Give empty cells the value of the nearest nonempty cell by center."""
    empty = partition.counts == 0
    if not empty.any():
        return table
    full = np.where(~empty)[0]
    if full.size == 0:
        raise InvalidPartition("all cells empty")
    d2 = ((partition.centers[empty][:, None, :] - partition.centers[full][None, :, :]) ** 2).sum(axis=2)
    table[empty] = table[full[np.argmin(d2, axis=1)]]
    return table


def _cell_sums(ids, values, n_cells):
    """Per-cell sums in deterministic (stable-sorted) order.

    values may be (M,) or (M, ...); returns (K, ...).
    """
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    boundaries = np.flatnonzero(np.diff(sorted_ids)) + 1
    starts = np.concatenate([[0], boundaries])
    present = sorted_ids[starts]
    sums = np.add.reduceat(values[order], starts, axis=0)
    out = np.zeros((n_cells,) + values.shape[1:], dtype=np.float64)
    out[present] = sums
    return out


def regress_layer(x_now, y_next, partition, bounds, mode="const", ids=None):
    """Batched local least squares: columns of ``y_next`` share the partition.

    Returns a list of RegressionEstimate, one per column.  ``ids`` may carry
    precomputed training-cell assignments.
    """
    x_now = np.atleast_2d(np.asarray(x_now, dtype=np.float64))
    Y = np.asarray(y_next, dtype=np.float64)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    if not np.all(np.isfinite(Y)):
        raise ValueError("regression targets must be finite")
    g_lo, g_hi = float(bounds[0]), float(bounds[1])
    if g_lo > g_hi:
        raise ValueError("need gamma_lo <= gamma_hi")
    if ids is None:
        ids = partition.assign(x_now)
    K = partition.n_cells
    counts = partition.counts

    if mode == "const":
        sums = _cell_sums(ids, Y, K)
        with np.errstate(invalid="ignore", divide="ignore"):
            coefs = sums / np.where(counts > 0, counts, 1)[:, None]
        coefs = _nearest_nonempty_fill(partition, coefs)
        return [
            RegressionEstimate(partition, "const", coefs[:, j].copy(), g_lo, g_hi)
            for j in range(Y.shape[1])
        ]

    if mode == "linear":
        d = x_now.shape[1]
        xc = x_now - partition.centers[ids]
        design = np.concatenate([np.ones((x_now.shape[0], 1)), xc], axis=1)  # (M, 1+d)
        gram_terms = design[:, :, None] * design[:, None, :]
        G = _cell_sums(ids, gram_terms, K)  # (K, 1+d, 1+d)
        B = _cell_sums(ids, design[:, :, None] * Y[:, None, :], K)  # (K, 1+d, q)
        trace_scale = np.trace(G, axis1=1, axis2=2) / (1 + d)
        eye = np.eye(1 + d)
        eigmin = np.linalg.eigvalsh(G)[:, 0]
        needs_ridge = eigmin <= 1e-10 * np.maximum(trace_scale, 1e-300)
        lam = np.where(needs_ridge, RIDGE_SCALE * np.maximum(trace_scale, 1e-300), 0.0)
        G_reg = G + lam[:, None, None] * eye
        G_reg[counts == 0] = eye  # placeholder; overwritten by the nearest fill
        coefs = np.linalg.solve(G_reg, B)  # (K, 1+d, q)
        coefs = _nearest_nonempty_fill(partition, coefs)
        return [
            RegressionEstimate(partition, "linear", coefs[:, :, j].copy(), g_lo, g_hi)
            for j in range(Y.shape[1])
        ]

    raise ValueError(f"unknown regression mode {mode!r}")


def regress(x_now, y_next, partition, bounds, mode="const", ids=None) -> RegressionEstimate:
    """Local least squares of one target vector on the partition's basis."""
    return regress_layer(x_now, y_next, partition, bounds, mode, ids)[0]


def evaluate(estimate: RegressionEstimate, x):
    """Clamped estimate value at x (cell lookup, snap rule for outsiders)."""
    return estimate.evaluate(x)
