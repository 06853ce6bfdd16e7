"""Flow right-hand sides and explicit time integration.

Variants
--------
``grf``       dg/dt = -2 Ric + 1/2 h(H,g),  dH/dt = box H (Hodge Laplacian).
``rgrf``      same metric rate; dH/dt = -d d* H, valid for closed H and
              preserving closedness exactly (discrete d o d = 0).
``deturck``   metric rate gains the gauge term grad_i V_j + grad_j V_i with
              V_i = g_ik g^{bc} (Gamma^k_bc - Gamma~^k_bc) against a fixed
              background metric, making the system strictly parabolic.
``extended``  evolves potentials A (1-form) and B (2-form); F = dA and
              H = dB are recomputed every evaluation, so both stay exact
              exterior derivatives.  dg/dt = -2 Ric + 1/2 h + 2 f,
              dA/dt = -d*F, dB/dt = -d*H.

Integration is explicit method-of-lines (Euler/RK2/RK4) with an optional
CFL step-size policy dt = c h^2 / max(1, sup|Rm|, sup|H|^2).  The metric is
symmetrized after every stage to stop round-off drift, and loss of positive
definiteness surfaces as MetricDegenerationError from the tensor module.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import (
    GeometryCache,
    christoffel,
    codifferential,
    covariant_derivative,
    curvature,
    exterior_derivative,
    f_tensor,
    form_norm_squared,
    h_tensor,
    hodge_laplacian,
    second_covariant_derivative,
)
from .grid import Grid
from .tensor import (
    MetricDegenerationError,
    MetricField,
    TensorField,
    antisymmetrize,
    norm_squared,
)

VARIANTS = ("grf", "rgrf", "deturck", "extended")
SCHEMES = ("euler", "rk2", "rk4")

#: default tolerance (relative to sup|H|) for the rgrf closedness precondition
CLOSEDNESS_TOLERANCE = 1e-8


class ClosednessError(ValueError):
    """rgrf requires closed H; raised when sup|dH| exceeds tolerance."""


@dataclass(frozen=True)
class FlowState:
    """Fields at one instant: metric g, 3-form H, optional potentials A, B."""

    time: float
    g: MetricField
    h: TensorField  # 3-form, variance 'lll'
    a: Optional[TensorField] = None  # 1-form potential, extended mode
    b: Optional[TensorField] = None  # 2-form potential, extended mode

    def __post_init__(self):
        if self.h.variance != "lll":
            raise ValueError("H must be a fully lower 3-form")
        if self.h.grid != self.g.grid:
            raise ValueError("H and g live on different grids")
        if self.a is not None and self.a.variance != "l":
            raise ValueError("A must be a lower 1-form")
        if self.b is not None and self.b.variance != "ll":
            raise ValueError("B must be a fully lower 2-form")

    @property
    def grid(self) -> Grid:
        return self.g.grid

    @property
    def extended(self) -> bool:
        return self.a is not None and self.b is not None


@dataclass(frozen=True)
class FlowConfig:
    """Variant, scheme, step policy, and horizon for one integration."""

    variant: str
    t_end: float
    scheme: str = "rk4"
    dt: Optional[float] = None  # fixed step when set, else CFL policy
    cfl_coefficient: float = 0.1
    stencil_order: int = 4
    background: Optional[MetricField] = None  # deturck only
    closedness_tolerance: float = CLOSEDNESS_TOLERANCE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; pick from {SCHEMES}")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0 < self.cfl_coefficient <= 0.5:
            raise ValueError("cfl_coefficient must lie in (0, 0.5]")
        if self.stencil_order not in (2, 4):
            raise ValueError("stencil_order must be 2 or 4")
        if self.variant == "deturck" and self.background is None:
            raise ValueError("deturck variant needs a background metric")


@dataclass(frozen=True)
class FlowRate:
    """Time derivative of a FlowState (raw component arrays)."""

    dg: np.ndarray
    dh: np.ndarray
    da: Optional[np.ndarray] = None
    db: Optional[np.ndarray] = None


@dataclass(frozen=True)
class StepDiagnostics:
    """Per-step scalars recorded along a run."""

    step: int
    t: float
    dt: float
    sup_rm: float
    sup_h: float
    sup_f: float
    min_eig_g: float


@dataclass
class Trajectory:
    """Snapshots plus per-step diagnostics from one run."""

    config: FlowConfig
    snapshots: list[FlowState] = field(default_factory=list)
    snapshot_steps: list[int] = field(default_factory=list)
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    failure: Optional[str] = None

    @property
    def times(self) -> list[float]:
        return [s.time for s in self.snapshots]


# ---------------------------------------------------------------------------
# right-hand sides


def _metric_rate(state: FlowState, cache: GeometryCache) -> np.ndarray:
    """-2 Ric + 1/2 h, the metric rate shared by every variant."""
    h2 = h_tensor(state.h, state.g, check=False)
    return -2.0 * cache.ricci.data + 0.5 * h2.data


def _require_cache(state: FlowState, stencil_order: int,
                   cache: Optional[GeometryCache]) -> GeometryCache:
    if cache is None:
        return curvature(state.g, stencil_order)
    return cache


def grf_rhs(state: FlowState, stencil_order: int = 4,
            cache: Optional[GeometryCache] = None) -> FlowRate:
    """dg/dt = -2 Ric + 1/2 h;  dH/dt = box H."""
    cache = _require_cache(state, stencil_order, cache)
    return FlowRate(
        dg=_metric_rate(state, cache),
        dh=hodge_laplacian(state.h, cache, check=False).data,
    )


def dh_sup(state: FlowState, stencil_order: int = 4) -> float:
    """sup|dH| componentwise; identically 0 when H is a top form."""
    if state.h.rank >= state.grid.dim:
        return 0.0
    dh = exterior_derivative(state.h, stencil_order)
    return state.grid.sup_norm(dh.data)


def rgrf_rhs(state: FlowState, stencil_order: int = 4,
             cache: Optional[GeometryCache] = None,
             closedness_tolerance: float = CLOSEDNESS_TOLERANCE) -> FlowRate:
    """dg/dt as grf;  dH/dt = -d d* H (requires closed H, preserves it)."""
    defect = dh_sup(state, stencil_order)
    scale = max(1.0, float(np.max(np.abs(state.h.data))))
    if defect > closedness_tolerance * scale:
        raise ClosednessError(
            f"rgrf needs closed H: sup|dH| = {defect:.3e} exceeds "
            f"tolerance {closedness_tolerance * scale:.3e}"
        )
    cache = _require_cache(state, stencil_order, cache)
    dstar_h = codifferential(state.h, cache, check=False)
    dh = -exterior_derivative(dstar_h, stencil_order, check=False).data
    return FlowRate(dg=_metric_rate(state, cache), dh=dh)


def deturck_vector(g: MetricField, background: MetricField,
                   stencil_order: int = 4,
                   cache: Optional[GeometryCache] = None) -> TensorField:
    """Gauge 1-form V_i = g_ik g^{bc} (Gamma^k_bc - Gamma~^k_bc)."""
    gamma = cache.christoffel if cache is not None else christoffel(g, stencil_order)
    gamma_bg = christoffel(background, stencil_order)
    diff = gamma.data - gamma_bg.data
    v = np.einsum("...ik,...bc,...kbc->...i", g.value.data, g.inverse.data, diff)
    return TensorField(g.grid, "l", v)


def deturck_rhs(state: FlowState, background: MetricField,
                stencil_order: int = 4,
                cache: Optional[GeometryCache] = None) -> FlowRate:
    """grf rate plus the gauge term grad_i V_j + grad_j V_i."""
    cache = _require_cache(state, stencil_order, cache)
    v = deturck_vector(state.g, background, stencil_order, cache)
    grad_v = covariant_derivative(v, cache).data  # slots (i, j) = cov_i V_j
    gauge = grad_v + np.swapaxes(grad_v, -1, -2)
    return FlowRate(
        dg=_metric_rate(state, cache) + gauge,
        dh=hodge_laplacian(state.h, cache, check=False).data,
    )


def deturck_expanded_rate(state: FlowState, background: MetricField,
                          stencil_order: int = 4) -> np.ndarray:
    """Quasilinear form of the deturck metric rate, assembled independently.

    dg_ij/dt = g^{ab} D_a D_b g_ij
               - g^{ab} g_ip gt^{pq} Rt_{jaqb} - g^{ab} g_jp gt^{pq} Rt_{iaqb}
               + 1/2 g^{ab} g^{pq} ( D_i g_pa D_j g_qb + 2 D_a g_jp D_q g_ib
                 - 2 D_a g_jp D_b g_iq - 2 D_j g_pa D_b g_iq
                 - 2 D_i g_pa D_b g_jq )
               + 1/2 g^{ab} g^{pq} H_iap H_jbq

    with D the background connection, gt/Rt the background inverse metric and
    lowered curvature.  Used only to cross-validate deturck_rhs; the two
    assemblies agree to discretization order.
    """
    g = state.g
    bg_cache = curvature(background, stencil_order)
    ginv = g.inverse.data
    g_as_tensor = TensorField(g.grid, "ll", g.value.data)
    dd = second_covariant_derivative(g_as_tensor, bg_cache).data
    out = np.einsum("...AB,...ABij->...ij", ginv, dd)
    out -= np.einsum(
        "...ab,...ip,...pq,...jaqb->...ij",
        ginv, g.value.data, background.inverse.data, bg_cache.riemann.data,
        optimize=True,
    )
    out -= np.einsum(
        "...ab,...jp,...pq,...iaqb->...ij",
        ginv, g.value.data, background.inverse.data, bg_cache.riemann.data,
        optimize=True,
    )
    d = covariant_derivative(g_as_tensor, bg_cache).data  # d[..., a, i, j]
    quad = np.einsum("...ab,...pq,...ipa,...jqb->...ij", ginv, ginv, d, d,
                     optimize=True)
    quad += 2.0 * np.einsum("...ab,...pq,...ajp,...qib->...ij", ginv, ginv, d, d,
                            optimize=True)
    quad -= 2.0 * np.einsum("...ab,...pq,...ajp,...biq->...ij", ginv, ginv, d, d,
                            optimize=True)
    quad -= 2.0 * np.einsum("...ab,...pq,...jpa,...biq->...ij", ginv, ginv, d, d,
                            optimize=True)
    quad -= 2.0 * np.einsum("...ab,...pq,...ipa,...bjq->...ij", ginv, ginv, d, d,
                            optimize=True)
    out += 0.5 * quad
    out += 0.5 * np.einsum("...ab,...pq,...iap,...jbq->...ij",
                           ginv, ginv, state.h.data, state.h.data, optimize=True)
    return out


def extended_rhs(state: FlowState, stencil_order: int = 4,
                 cache: Optional[GeometryCache] = None) -> FlowRate:
    """Potential-driven system: F = dA, H = dB recomputed each evaluation.

    dg/dt = -2 Ric + 1/2 h(H) + 2 f(F);  dA/dt = -d*F;  dB/dt = -d*H.
    """
    if not state.extended:
        raise ValueError("extended variant needs both potentials A and B")
    cache = _require_cache(state, stencil_order, cache)
    f2 = exterior_derivative(state.a, stencil_order, check=False)
    h3 = exterior_derivative(state.b, stencil_order, check=False)
    dg = (
        -2.0 * cache.ricci.data
        + 0.5 * h_tensor(h3, state.g, check=False).data
        + 2.0 * f_tensor(f2, state.g, check=False).data
    )
    da = -codifferential(f2, cache, check=False).data
    db = -codifferential(h3, cache, check=False).data
    return FlowRate(dg=dg, dh=np.zeros_like(state.h.data), da=da, db=db)


def flow_rate(state: FlowState, cfg: FlowConfig,
              cache: Optional[GeometryCache] = None) -> FlowRate:
    """Dispatch to the configured variant's right-hand side."""
    if cfg.variant == "grf":
        return grf_rhs(state, cfg.stencil_order, cache)
    if cfg.variant == "rgrf":
        return rgrf_rhs(state, cfg.stencil_order, cache, cfg.closedness_tolerance)
    if cfg.variant == "deturck":
        return deturck_rhs(state, cfg.background, cfg.stencil_order, cache)
    return extended_rhs(state, cfg.stencil_order, cache)


# ---------------------------------------------------------------------------
# time stepping


def _combine(rates: list[FlowRate], weights: list[float]) -> FlowRate:
    def mix(parts):
        if parts[0] is None:
            return None
        return sum(w * p for w, p in zip(weights, parts))

    return FlowRate(
        dg=mix([r.dg for r in rates]),
        dh=mix([r.dh for r in rates]),
        da=mix([r.da for r in rates]),
        db=mix([r.db for r in rates]),
    )


def _advance(state: FlowState, rate: FlowRate, dt: float,
             stencil_order: int, project: bool = False) -> FlowState:
    """Apply state + dt * rate, symmetrizing g and revalidating it.

    With ``project`` the 3-form is re-antisymmetrized; the rhs preserves
    antisymmetry up to round-off, so projecting once per accepted step
    (not per stage) is enough to stop drift.
    """
    grid = state.grid
    gdata = state.g.value.data + dt * rate.dg
    gdata = 0.5 * (gdata + np.swapaxes(gdata, -1, -2))
    g = MetricField.from_components(grid, gdata)
    if rate.da is not None:
        a = TensorField(grid, "l", state.a.data + dt * rate.da)
        b = TensorField(grid, "ll", state.b.data + dt * rate.db)
        if project:
            b = antisymmetrize(b)
        h = exterior_derivative(b, stencil_order, check=False)
        return FlowState(time=state.time + dt, g=g, h=h, a=a, b=b)
    h = TensorField(grid, "lll", state.h.data + dt * rate.dh)
    if project:
        h = antisymmetrize(h)
    return FlowState(time=state.time + dt, g=g, h=h, a=state.a, b=state.b)


def cfl_dt(state: FlowState, cfg: FlowConfig,
           cache: Optional[GeometryCache] = None) -> float:
    """dt = c h^2 / max(1, sup|Rm|, sup|H|^2) from the stability analysis."""
    cache = _require_cache(state, cfg.stencil_order, cache)
    sup_rm = float(np.sqrt(max(np.max(norm_squared(cache.riemann, state.g)), 0.0)))
    sup_h2 = float(np.max(form_norm_squared(state.h, state.g)))
    h = state.grid.spacing
    return cfg.cfl_coefficient * h * h / max(1.0, sup_rm, sup_h2)


def step(state: FlowState, cfg: FlowConfig, dt: Optional[float] = None,
         cache: Optional[GeometryCache] = None) -> FlowState:
    """One explicit step of the configured scheme.

    When dt is omitted it comes from the config: the fixed dt if set,
    else the CFL policy.  The supplied cache must belong to state.g.
    """
    cache = _require_cache(state, cfg.stencil_order, cache)
    if dt is None:
        dt = cfg.dt if cfg.dt is not None else cfl_dt(state, cfg, cache)
    order = cfg.stencil_order
    k1 = flow_rate(state, cfg, cache)
    if cfg.scheme == "euler":
        return _advance(state, k1, dt, order, project=True)
    if cfg.scheme == "rk2":  # midpoint
        mid = _advance(state, k1, 0.5 * dt, order)
        k2 = flow_rate(mid, cfg)
        return _advance(state, k2, dt, order, project=True)
    s2 = _advance(state, k1, 0.5 * dt, order)
    k2 = flow_rate(s2, cfg)
    s3 = _advance(state, k2, 0.5 * dt, order)
    k3 = flow_rate(s3, cfg)
    s4 = _advance(state, k3, dt, order)
    k4 = flow_rate(s4, cfg)
    total = _combine([k1, k2, k3, k4],
                     [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0])
    return _advance(state, total, dt, order, project=True)


def _diagnose(state: FlowState, cache: GeometryCache, step_index: int,
              dt: float) -> StepDiagnostics:
    sup_rm = float(np.sqrt(max(np.max(norm_squared(cache.riemann, state.g)), 0.0)))
    sup_h = float(np.sqrt(max(np.max(form_norm_squared(state.h, state.g)), 0.0)))
    if state.a is not None:
        f2 = exterior_derivative(state.a, cache.stencil_order)
        sup_f = float(np.sqrt(max(np.max(form_norm_squared(f2, state.g)), 0.0)))
    else:
        sup_f = 0.0
    return StepDiagnostics(
        step=step_index,
        t=state.time,
        dt=dt,
        sup_rm=sup_rm,
        sup_h=sup_h,
        sup_f=sup_f,
        min_eig_g=state.g.min_eigenvalue(),
    )


def run(initial: FlowState, cfg: FlowConfig, snapshot_every: int = 1,
        max_steps: int = 1_000_000) -> Trajectory:
    """Integrate to cfg.t_end, recording snapshots and diagnostics.

    Degeneration stops the run; the trajectory up to the failure is
    returned with the failure message recorded (never swallowed).
    """
    if snapshot_every < 1:
        raise ValueError("snapshot_every must be >= 1")
    traj = Trajectory(config=cfg)
    state = initial
    traj.snapshots.append(state)
    traj.snapshot_steps.append(0)
    t_end = initial.time + cfg.t_end
    eps = 1e-12 * max(1.0, abs(t_end))
    for n in range(max_steps):
        cache = curvature(state.g, cfg.stencil_order)
        remaining = t_end - state.time
        if remaining <= eps:
            traj.diagnostics.append(_diagnose(state, cache, n, 0.0))
            break
        dt = cfg.dt if cfg.dt is not None else cfl_dt(state, cfg, cache)
        dt = min(dt, remaining)
        traj.diagnostics.append(_diagnose(state, cache, n, dt))
        try:
            state = step(state, cfg, dt=dt, cache=cache)
        except MetricDegenerationError as exc:
            traj.failure = f"degeneration at step {n}, t = {state.time:.6g}: {exc}"
            break
        if (n + 1) % snapshot_every == 0 or state.time >= t_end - eps:
            traj.snapshots.append(state)
            traj.snapshot_steps.append(n + 1)
    else:
        traj.failure = f"max_steps = {max_steps} reached before t_end"
    return traj
