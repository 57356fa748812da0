"""Built-in test problems: the 1-D mean-reverting two-regime instance used for
oracle equivalence and convergence studies, and a Brownian localization audit
problem.  Both are small enough for the lattice ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pathgen import DiffusionSpec, TimeGrid, brownian_spec, ou_spec
from .switching import CostDecomposition, RegimeSet, SwitchingProblem

__all__ = ["OUTestInstance", "ou_test_instance", "brownian_test_spec"]

# Idle/active switching on an OU signal: run the active regime to collect the
# (discounted) signal level, pay a fixed cost per switch.  The signal mean is
# positive so values are O(1) and relative gaps are well conditioned.
OU_ALPHA = 2.0
OU_MU = 1.0
OU_BETA = 1.0
OU_RHO = 0.5
OU_SWITCH_COST = 0.15
OU_X0 = 1.0
# lattice box: +/- 5 stationary standard deviations around the OU mean
OU_LATTICE_RADIUS = 5.0 * OU_BETA / np.sqrt(2.0 * OU_ALPHA)


@dataclass
class OUTestInstance:
    spec: DiffusionSpec
    problem: SwitchingProblem
    x0: float
    lattice_lo: float
    lattice_hi: float

    def grid(self, T=1.0, N=10, decision_stride=1, n_checkpoints=4) -> TimeGrid:
        return TimeGrid.regular(T, N, decision_stride=decision_stride,
                                n_checkpoints=n_checkpoints)


def ou_test_instance(rho=OU_RHO, switch_cost=OU_SWITCH_COST) -> OUTestInstance:
    """Two regimes (idle, active) on a 1-D OU state.

    Active earns the discounted state level as a running rate; both switch
    directions cost ``switch_cost`` (undiscounted form), so the optimal policy
    chases the sign of the signal with a hysteresis band.
    """
    spec = ou_spec(alpha=OU_ALPHA, mu=OU_MU, beta=OU_BETA)
    regimes = RegimeSet(points=np.array([[0.0], [1.0]]))

    def profit(t, states, j):
        states = np.atleast_2d(states)
        if j == 0:
            return np.zeros(states.shape[0])
        return np.exp(-rho * t) * states[:, 0]

    def cost(t, i, j):
        return 0.0 if i == j else float(np.exp(-rho * t) * switch_cost)

    half = switch_cost / 2.0
    separable = CostDecomposition(
        k1=lambda t: np.exp(-rho * t) * np.array([half, half]),
        k2=lambda t: np.exp(-rho * t) * np.array([half, half]),
    )

    problem = SwitchingProblem(
        regimes=regimes,
        profit=profit,
        cost=cost,
        rho=rho,
        irreversible=False,  # both switch directions allowed
        separable=separable,
        label="ou-test",
    )
    return OUTestInstance(
        spec=spec, problem=problem, x0=OU_X0,
        lattice_lo=OU_MU - OU_LATTICE_RADIUS, lattice_hi=OU_MU + OU_LATTICE_RADIUS,
    )


def brownian_test_spec(dim=1) -> DiffusionSpec:
    """Standard d-dimensional Brownian motion (localization audits)."""
    return brownian_spec(dim)
