"""Structural electricity-generation investment model.

State (dimension 2 d' + 2 for d' technologies):

    x = (Z_demand, Z_avail_1, ..., Z_avail_d', S_co2, S_fuel_1, ..., S_fuel_d')

Demand is a seasonal profile plus a mean-reverting factor; availability rates
map mean-reverting factors through the normal CDF onto [floor, 1]; fuel and
CO2 prices follow a cointegrated geometric dynamics (rank-deficient drift
matrix).  The spot price stacks technologies in merit order and knits
hyperbolic scarcity premiums between fuel-cost levels, capped at m_max.
Capacity investment is the switching control: regimes are fleet vectors on a
1 GW grid, building is irreversible by default.

Units: GW for capacities and demand, EUR/MWh for prices, years for time,
EUR for costs and values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DegenerateKnit, SingularInverse
from .pathgen import DiffusionSpec
from .switching import CostDecomposition, RegimeSet, SwitchingProblem

__all__ = [
    "DemandParams",
    "AvailabilityParams",
    "FuelParams",
    "CostParams",
    "PriceParams",
    "FleetParams",
    "PowerModelConfig",
    "merit_order",
    "knit",
    "spot_price",
    "dispatch_profit",
    "DispatchResult",
    "build_spec",
    "build_problem",
    "initial_state",
    "slice_diagnostics",
    "default_week_profile",
]

HOURS_PER_YEAR = 8766.0  # 365.25 days
MWH_PER_GW_YEAR = 1000.0 * HOURS_PER_YEAR  # converts GW * EUR/MWh to EUR/year

YEAR_DAYS = 365.25
WEEK_SLOTS = 14  # half-day resolution over one week


def default_week_profile() -> tuple:
    """Flat weekday plateau 3 GW above the weekend trough, zero mean."""
    weekday = 3.0 * 4.0 / 14.0
    weekend = weekday - 3.0
    return tuple([weekday] * 10 + [weekend] * 4)


@dataclass(frozen=True)
class DemandParams:
    """Seasonal demand profile plus an OU factor (GW)."""

    d1: float = 70.0 - 10.0 - 6.0 / 7.0  # anchors D(0) = 70 GW
    d2: float = 10.0
    d3: float = 0.0
    week_profile: tuple = field(default_factory=default_week_profile)
    alpha: float = 12.0
    beta: float = 4.0

    def seasonal(self, t):
        t = np.asarray(t, dtype=np.float64)
        base = self.d1 + self.d2 * np.cos(2.0 * np.pi * (t - self.d3))
        slot = np.floor((t * YEAR_DAYS % 7.0) * 2.0).astype(np.int64) % WEEK_SLOTS
        return base + np.asarray(self.week_profile)[slot]


@dataclass(frozen=True)
class AvailabilityParams:
    """Availability-rate factor of one technology: floor + (1-floor) * CDF."""

    c1: float = 2.2
    c2: float = 0.15
    c3: float = 0.0
    alpha: float = 10.0
    beta: float = 0.4
    floor: float = 0.01

    def seasonal(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.c1 + self.c2 * np.cos(2.0 * np.pi * (t - self.c3))

    def rate(self, t, z):
        return self.floor + (1.0 - self.floor) * ndtr(self.seasonal(t) + z)


@dataclass(frozen=True)
class FuelParams:
    """Cointegrated fuel and CO2 price dynamics; index 0 is CO2.

    ``xi`` is the (d'+1)^2 drift matrix; None builds the rank-1 default that
    reverts the fuel spread toward the initial price ratios at speed
    ``coint_kappa``.  ``heat_rates`` fold fuel prices into EUR/MWh of output;
    ``emission_rates`` (t/MWh) load the CO2 price onto each technology.
    """

    s0: tuple = (15.0, 40.0, 80.0)
    sigma: tuple = (0.30, 0.05, 0.15)
    heat_rates: tuple = (1.0, 1.0)
    emission_rates: tuple = (0.4, 0.6)
    coint_kappa: float = 0.3
    xi: Optional[tuple] = None  # rows of the drift matrix

    @property
    def n_tech(self) -> int:
        return len(self.heat_rates)

    def xi_matrix(self) -> np.ndarray:
        if self.xi is not None:
            m = np.asarray(self.xi, dtype=np.float64)
            return m.reshape(self.n_tech + 1, self.n_tech + 1)
        n = self.n_tech
        m = np.zeros((n + 1, n + 1))
        if n >= 2:
            # revert fuel d' against fuel 1 toward the initial ratio
            ratio = self.s0[n] / self.s0[1]
            w = np.zeros(n + 1)
            w[1] = -ratio
            w[n] = 1.0
            load = np.zeros(n + 1)
            load[1] = 0.5 * self.coint_kappa
            load[n] = -0.5 * self.coint_kappa
            m = np.outer(load, w)
        return m

    def s_tilde(self, S):
        """EUR/MWh cost of producing with each technology: h0*S_co2 + h*S_i."""
        S = np.atleast_2d(S)
        h0 = np.asarray(self.emission_rates)
        h = np.asarray(self.heat_rates)
        return h0[None, :] * S[:, :1] + h[None, :] * S[:, 1:]


@dataclass(frozen=True)
class CostParams:
    """Build/dismantle cost schedule (EUR, EUR/GW, EUR/year)."""

    kappa_prop_plus: tuple = (0.24e9, 2.0e9)
    kappa_fixed_plus: tuple = (0.0, 0.0)
    kappa_event: float = 1.0e6
    kappa_prop_minus: tuple = (0.024e9, 0.2e9)
    kappa_fixed_minus: tuple = (0.0, 0.0)
    maintenance: tuple = (0.0, 0.0)
    dismantling: bool = False


@dataclass(frozen=True)
class PriceParams:
    """Spot-price assembly: cap and scarcity-premium shape.

    ``premium_scale`` caps the premium magnitude used to size the knit's a
    parameter on the final (scarcity) segment; None uses the interfuel
    spread, keeping prices near the marginal fuel cost until genuinely
    scarce.
    """

    m_max: float = 3000.0
    premium_ratio: float = 0.1
    premium_scale: Optional[float] = None


@dataclass(frozen=True)
class FleetParams:
    """Initial installed capacities and the investment grid (GW)."""

    i0: tuple = (67.0, 33.0)
    mesh: float = 1.0
    max_build: tuple = (30.0, 30.0)


@dataclass(frozen=True)
class PowerModelConfig:
    demand: DemandParams = field(default_factory=DemandParams)
    availability: tuple = (AvailabilityParams(), AvailabilityParams())
    fuel: FuelParams = field(default_factory=FuelParams)
    costs: CostParams = field(default_factory=CostParams)
    price: PriceParams = field(default_factory=PriceParams)
    fleet: FleetParams = field(default_factory=FleetParams)
    rho: float = 0.08

    @property
    def n_tech(self) -> int:
        return len(self.availability)

    @property
    def state_dim(self) -> int:
        return 2 * self.n_tech + 2

    @classmethod
    def desk(cls) -> "PowerModelConfig":
        """Small-scale demo parameterization (fast runs, marked day/night swing).

        Initial prices, volatilities, fleet and proportional build costs are
        the headline parameters; demand and availability levels are chosen so
        daytime prices sit at the bottom of the peak-fuel segment and nights
        deep inside the base-fuel segment, which is what produces the bimodal
        price density clustered at the two fuel costs.  The CO2 price is set
        to a token level so fuel costs equal the quoted 40/80 EUR/MWh.
        """
        week = (10.75, -21.25) * 5 + (8.75, -21.25) * 2
        return cls(
            demand=DemandParams(d1=57.75, d2=1.5, d3=0.0, week_profile=week,
                                alpha=12.0, beta=4.0),
            availability=(
                AvailabilityParams(c1=1.17, c2=0.10, c3=0.0, alpha=10.0, beta=0.2),
                AvailabilityParams(c1=1.64, c2=0.10, c3=0.0, alpha=10.0, beta=0.2),
            ),
            fuel=FuelParams(s0=(1e-3, 40.0, 80.0), sigma=(0.30, 0.05, 0.15)),
            fleet=FleetParams(i0=(67.0, 33.0), mesh=1.0, max_build=(8.0, 8.0)),
        )

    def validated(self) -> "PowerModelConfig":
        n = self.n_tech
        if self.fleet.mesh <= 0:
            raise ConfigError("fleet.mesh must be positive", key="fleet.mesh")
        for name, tup, length in [
            ("fleet.i0", self.fleet.i0, n),
            ("fleet.max_build", self.fleet.max_build, n),
            ("fuel.heat_rates", self.fuel.heat_rates, n),
            ("fuel.emission_rates", self.fuel.emission_rates, n),
            ("fuel.s0", self.fuel.s0, n + 1),
            ("fuel.sigma", self.fuel.sigma, n + 1),
            ("costs.kappa_prop_plus", self.costs.kappa_prop_plus, n),
            ("costs.kappa_fixed_plus", self.costs.kappa_fixed_plus, n),
            ("costs.kappa_prop_minus", self.costs.kappa_prop_minus, n),
            ("costs.kappa_fixed_minus", self.costs.kappa_fixed_minus, n),
            ("costs.maintenance", self.costs.maintenance, n),
        ]:
            if len(tup) != length:
                raise ConfigError(f"{name} must have {length} entries", key=name)
        if any(i < 0 for i in self.fleet.i0):
            raise ConfigError("installed capacities must be nonnegative", key="fleet.i0")
        if self.rho <= 0:
            raise ConfigError("rho must be positive", key="rho")
        s_tilde0 = self.fuel.s_tilde(np.asarray(self.fuel.s0)[None, :])[0]
        if self.price.m_max <= float(np.max(s_tilde0)):
            raise ConfigError("price.m_max must exceed every initial fuel cost",
                              key="price.m_max")
        xi = self.fuel.xi_matrix()
        if np.linalg.matrix_rank(xi) >= max(n, 1) and n > 1:
            raise ConfigError("rank of the fuel drift matrix must be < number of "
                              "technologies", key="fuel.xi")
        return self


# ---------------------------------------------------------------------------
# price formation
# ---------------------------------------------------------------------------


def merit_order(s_tilde) -> np.ndarray:
    """Ascending stable permutation of technologies by production cost."""
    s = np.asarray(s_tilde, dtype=np.float64)
    return np.argsort(s, axis=-1, kind="stable")


def knit(x, x1, x2, y1, y2, a=None):
    """Hyperbolic interpolant a/(b-x) + c through (x1, y1) and (x2, y2).

    b and c follow from the endpoint conditions for any fixed a > 0:
    b = (x1 + x2 + sqrt((x2-x1)^2 + 4a(x2-x1)/(y2-y1))) / 2, c = y1 - a/(b-x1).
    Evaluated through b - x2 in conjugate form, so the endpoint identities
    hold to ~1e-10 relative even when a is tiny against the segment.
    Default a = 0.1 (x2-x1)(y2-y1): mild premium mid-segment, sharp near x2.
    """
    if not x2 > x1:
        raise ValueError(f"need x1 < x2, got [{x1}, {x2}]")
    if not y2 > y1:
        raise DegenerateKnit(f"need y1 < y2, got [{y1}, {y2}]")
    if a is None:
        a = 0.1 * (x2 - x1) * (y2 - y1)
    if not a > 0:
        raise ValueError("knit parameter a must be positive")
    dx = x2 - x1
    s = 4.0 * a * dx / (y2 - y1)
    tail = 0.5 * s / (np.sqrt(dx * dx + s) + dx)  # = b - x2, stable
    c = y1 - a / (tail + dx)
    return a / (tail + (x2 - np.asarray(x, dtype=np.float64))) + c


def _knit_values(x, x1, x2, y1, y2, a):
    """Vectorized knit with degenerate segments flattened to y1."""
    dx = x2 - x1
    dy = y2 - y1
    ok = (dx > 0) & (dy > 0) & (a > 0)
    safe_dx = np.where(ok, dx, 1.0)
    safe_dy = np.where(ok, dy, 1.0)
    safe_a = np.where(ok, a, 1.0)
    s = 4.0 * safe_a * safe_dx / safe_dy
    tail = 0.5 * s / (np.sqrt(safe_dx * safe_dx + s) + safe_dx)  # b - x2
    denom1 = tail + safe_dx  # b - x1
    denomx = tail + (x2 - np.asarray(x, dtype=np.float64))  # b - x
    denomx = np.where(ok & (denomx > 0), denomx, 1.0)
    vals = safe_a / denomx + (y1 - safe_a / denom1)
    return np.where(ok, vals, y1)


def spot_price(D, C, s_tilde, m_max=3000.0, premium_ratio=0.1, premium_scale=None):
    """Knitted merit-order price, capped at m_max.

    D: (...,) demand in GW.  C: (..., d') available capacities (original tech
    order).  s_tilde: (..., d') production costs.  Below zero demand the
    price is the cheapest fuel cost; above total capacity it is the cap; in
    between, segment i interpolates from the running fuel cost to the next
    one (the cap on the last segment), so scarcity lifts the price sharply
    near the top of the stack.
    """
    D = np.asarray(D, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    s = np.asarray(s_tilde, dtype=np.float64)
    order = merit_order(s)
    s_srt = np.take_along_axis(s, order, axis=-1)
    c_srt = np.take_along_axis(C, order, axis=-1)
    nt = s.shape[-1]
    cum = np.cumsum(c_srt, axis=-1)
    edges = np.concatenate([np.zeros_like(cum[..., :1]), cum], axis=-1)

    spread = s_srt[..., -1] - s_srt[..., 0]
    if premium_scale is not None:
        scale = np.full_like(spread, float(premium_scale))
    else:
        scale = np.maximum(spread, 0.5 * s_srt[..., 0])
        scale = np.maximum(scale, 1e-9)

    P = np.full_like(D, float(m_max))
    for i in range(nt):
        x1 = edges[..., i]
        x2 = edges[..., i + 1]
        y1 = s_srt[..., i]
        y2 = s_srt[..., i + 1] if i + 1 < nt else np.full_like(y1, float(m_max))
        a = premium_ratio * (x2 - x1) * np.minimum(y2 - y1, scale)
        mask = (D >= x1) & (D < x2)
        vals = _knit_values(D, x1, x2, y1, y2, a)
        P = np.where(mask, vals, P)
    P = np.where(D < 0, s_srt[..., 0], P)
    return np.minimum(P, float(m_max))


@dataclass
class DispatchResult:
    outputs: np.ndarray  # (..., d') dispatched GW, original tech order
    total: np.ndarray  # (...,) == min(D+, total capacity), exact
    profit_rate: np.ndarray  # (...,) EUR/year before discounting
    per_tech_rate: np.ndarray  # (..., d') EUR/year


def dispatch_profit(D, C, s_tilde, P, maintenance=None) -> DispatchResult:
    """Merit-order dispatch and instantaneous profit rates.

    Technology j (in merit order) produces clamp(D - stack_below, 0, C_j) and
    earns (P - s_tilde_j)^+ per MWh, minus its maintenance rate.  The total
    dispatched output equals min(D^+, total capacity) exactly.
    """
    D = np.asarray(D, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    s = np.asarray(s_tilde, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    nt = s.shape[-1]
    order = merit_order(s)
    c_srt = np.take_along_axis(C, order, axis=-1)
    cum = np.cumsum(c_srt, axis=-1)
    capped = np.minimum(np.maximum(D, 0.0)[..., None], cum)
    out_srt = np.diff(np.concatenate([np.zeros_like(capped[..., :1]), capped], axis=-1),
                      axis=-1)
    total = capped[..., -1]
    s_srt = np.take_along_axis(s, order, axis=-1)
    margin = np.maximum(P[..., None] - s_srt, 0.0)
    rate_srt = out_srt * margin * MWH_PER_GW_YEAR
    # back to the original technology order
    inv = np.argsort(order, axis=-1, kind="stable")
    outputs = np.take_along_axis(out_srt, inv, axis=-1)
    per_tech = np.take_along_axis(rate_srt, inv, axis=-1)
    if maintenance is not None:
        per_tech = per_tech - np.asarray(maintenance, dtype=np.float64)
    return DispatchResult(outputs=outputs, total=total,
                          profit_rate=per_tech.sum(axis=-1), per_tech_rate=per_tech)


# ---------------------------------------------------------------------------
# diffusion spec and switching problem
# ---------------------------------------------------------------------------


def build_spec(config: PowerModelConfig) -> DiffusionSpec:
    """Exogenous 2d'+2 dimensional diffusion with a closed-form step inverse.

    The mean-reverting block inverts coordinatewise; the price block's one
    step map is linear in S with a noise-dependent matrix, inverted by a
    batched (d'+1) x (d'+1) solve.
    """
    cfg = config.validated()
    n = cfg.n_tech
    dim = cfg.state_dim
    alphas = np.array([cfg.demand.alpha] + [a.alpha for a in cfg.availability])
    betas = np.array([cfg.demand.beta] + [a.beta for a in cfg.availability])
    sig_s = np.asarray(cfg.fuel.sigma, dtype=np.float64)
    xi = cfg.fuel.xi_matrix()
    nz = n + 1  # mean-reverting coordinates

    def drift(t, x):
        out = np.empty_like(x)
        out[:, :nz] = -alphas[None, :] * x[:, :nz]
        out[:, nz:] = x[:, nz:] @ xi.T
        return out

    def diffusion(t, x):
        out = np.empty_like(x)
        out[:, :nz] = betas[None, :]
        out[:, nz:] = sig_s[None, :] * x[:, nz:]
        return out

    eye = np.eye(nz)

    def inverse(t, y, h, eps):
        x = np.empty_like(y)
        x[:, :nz] = (y[:, :nz] - betas[None, :] * eps[:, :nz] * np.sqrt(h)) / (
            1.0 - alphas[None, :] * h)
        # price block: y_S = (I + h Xi + sqrt(h) diag(sigma eps)) S
        m = y.shape[0]
        A = np.broadcast_to(eye + h * xi, (m, nz, nz)).copy()
        diag = np.arange(nz)
        A[:, diag, diag] += np.sqrt(h) * sig_s[None, :] * eps[:, nz:]
        try:
            x[:, nz:] = np.linalg.solve(A, y[:, nz:, None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularInverse(f"price-block one-step map singular at t={t:.6g}: {exc}")
        return x

    return DiffusionSpec(
        dim=dim, drift=drift, diffusion=diffusion, invertible_step=True,
        inverse=inverse, mean_reversion=tuple(float(a) for a in alphas),
        label="power",
    )


def initial_state(config: PowerModelConfig) -> np.ndarray:
    return np.concatenate([np.zeros(config.n_tech + 1), np.asarray(config.fuel.s0)])


def _psi(config: PowerModelConfig, points: np.ndarray) -> np.ndarray:
    """Cumulative proportional build cost of a fleet vector (EUR)."""
    return points @ np.asarray(config.costs.kappa_prop_plus)


def build_problem(config: PowerModelConfig):
    """Assemble (DiffusionSpec, RegimeSet, SwitchingProblem) for the model.

    Regimes are fleet vectors on the mesh grid up to i0 + max_build.  With
    dismantling disabled and zero per-technology fixed costs the problem
    declares irreversibility and cost separability, enabling the O(q)
    partial-maximum sweep.
    """
    cfg = config.validated()
    n = cfg.n_tech
    spec = build_spec(cfg)
    axes = [
        cfg.fleet.i0[j] + cfg.fleet.mesh * np.arange(int(round(cfg.fleet.max_build[j] / cfg.fleet.mesh)) + 1)
        for j in range(n)
    ]
    regimes = RegimeSet.from_axes(axes)
    pts = regimes.points
    rho = cfg.rho
    kp_plus = np.asarray(cfg.costs.kappa_prop_plus)
    kf_plus = np.asarray(cfg.costs.kappa_fixed_plus)
    kp_minus = np.asarray(cfg.costs.kappa_prop_minus)
    kf_minus = np.asarray(cfg.costs.kappa_fixed_minus)
    maint = np.asarray(cfg.costs.maintenance)
    irreversible = not cfg.costs.dismantling
    separable = None
    if irreversible and not np.any(kf_plus):
        psi = _psi(cfg, pts)
        evt = cfg.costs.kappa_event
        separable = CostDecomposition(
            k1=lambda t: np.exp(-rho * t) * (evt - psi),
            k2=lambda t: np.exp(-rho * t) * psi,
        )

    def undiscounted_cost(zeta):
        up = np.maximum(zeta, 0.0)
        dn = np.maximum(-zeta, 0.0)
        c = (up @ kp_plus) + ((up > 0) @ kf_plus) + (dn @ kp_minus) + ((dn > 0) @ kf_minus)
        moved = np.any(zeta != 0, axis=-1)
        return np.where(moved, c + cfg.costs.kappa_event, 0.0)

    def cost(t, i, j):
        zeta = pts[j] - pts[i]
        return float(np.exp(-rho * t) * undiscounted_cost(zeta[None, :])[0])

    def cost_matrix_fn(t):
        zeta = pts[None, :, :] - pts[:, None, :]
        return np.exp(-rho * t) * undiscounted_cost(zeta)

    def slice_inputs(t, states):
        states = np.atleast_2d(states)
        D = cfg.demand.seasonal(t) + states[:, 0]
        A = np.stack(
            [cfg.availability[j].rate(t, states[:, 1 + j]) for j in range(n)], axis=1)
        s_til = cfg.fuel.s_tilde(states[:, n + 1:])
        return D, A, s_til

    def profit_for_fleet(t, D, A, s_til, fleets):
        """fleets: (..., d') broadcastable against the path axis."""
        C = fleets * A
        P = spot_price(D, C, s_til, cfg.price.m_max, cfg.price.premium_ratio,
                       cfg.price.premium_scale)
        res = dispatch_profit(D, C, s_til, P, maintenance=maint)
        return np.exp(-rho * t) * res.profit_rate

    def profit(t, states, j):
        D, A, s_til = slice_inputs(t, states)
        return profit_for_fleet(t, D, A, s_til, pts[j][None, :])

    def profit_layer(t, states):
        D, A, s_til = slice_inputs(t, states)
        m = D.shape[0]
        q = pts.shape[0]
        fleets = np.broadcast_to(pts[None, :, :], (m, q, n))
        out = profit_for_fleet(t, D[:, None], A[:, None, :], s_til[:, None, :], fleets)
        return out

    def profit_select(t, states, regime_idx):
        D, A, s_til = slice_inputs(t, states)
        return profit_for_fleet(t, D, A, s_til, pts[regime_idx])

    problem = SwitchingProblem(
        regimes=regimes,
        profit=profit,
        cost=cost,
        rho=rho,
        irreversible=irreversible,
        separable=separable,
        profit_layer=profit_layer,
        profit_select=profit_select,
        cost_matrix_fn=cost_matrix_fn,
        label="power",
    )
    return spec, regimes, problem


def slice_diagnostics(config: PowerModelConfig, t, states, fleets):
    """Per-slice observables for reports: demand, availability, price, dispatch.

    fleets: (M, d') installed capacities aligned with the states.
    """
    cfg = config
    n = cfg.n_tech
    states = np.atleast_2d(states)
    D = cfg.demand.seasonal(t) + states[:, 0]
    A = np.stack([cfg.availability[j].rate(t, states[:, 1 + j]) for j in range(n)], axis=1)
    s_til = cfg.fuel.s_tilde(states[:, n + 1:])
    C = fleets * A
    P = spot_price(D, C, s_til, cfg.price.m_max, cfg.price.premium_ratio,
                   cfg.price.premium_scale)
    res = dispatch_profit(D, C, s_til, P, maintenance=np.asarray(cfg.costs.maintenance))
    return {"demand": D, "availability": A, "s_tilde": s_til, "capacity": C,
            "price": P, "dispatch": res}
