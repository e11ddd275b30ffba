"""Time integration of the constrained negative-gradient Q-curvature flow.

The conformal factor evolves by ``du/dt = lambda(t) f - Q_{g(t)}`` with
``g = e^{2u} g0`` (the metric flow ``dg/dt = -2 (Q - lambda f) g`` written for
the factor).  All integrals are quadrature sums at the collocation nodes, so
the discrete flow conserves ``int f e^{nu}`` and dissipates the discrete energy
exactly at the semi-discrete level; after each step the constraint is
re-imposed by a shift ``u -> u + c f``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .geometry import SPHERE, Geometry, GridField, SpectralField, _check_same
from .operators import BackgroundData, gjms_multiplier

log = logging.getLogger(__name__)

SCHEMES = ("imex-semi-implicit", "explicit-rk4")
DT_POLICIES = ("fixed", "adaptive")


class FlowError(RuntimeError):
    """Base class for flow failures."""


class InfeasibleConstraint(FlowError):
    """No shift along f reaches the constraint value."""


class StepRejected(FlowError):
    """A trial step overflowed or failed to project."""


class BlowUpDetected(FlowError):
    """The conformal factor left the configured bounds."""

    def __init__(self, message, state=None, series=None, concentration=None):
        super().__init__(message)
        self.state = state
        self.series = series
        self.concentration = concentration


class StepSizeUnderflow(FlowError):
    """Repeated rejections drove the time step below its floor."""


@dataclass(frozen=True)
class FlowConfig:
    """Integration settings.

    ``safety`` multiplies the step after a rejection; ``growth`` is applied
    after ``grow_after`` consecutive clean steps under the adaptive policy.
    """

    scheme: str = "imex-semi-implicit"
    dt: float = 1e-3
    dt_policy: str = "adaptive"
    dt_max: float = 0.5
    dt_min: float = 1e-12
    safety: float = 0.5
    growth: float = 1.2
    grow_after: int = 10
    projection_tol: float = 1e-12
    t_max: float = 100.0
    f2_tol: float = 1e-12
    rhs_tol: float = 1e-8
    record_stride: int = 10
    max_steps: int = 10_000_000
    energy_slack: float = 1e-9
    u_ceiling: float = 50.0
    h_ceiling: float = 1e6
    sobolev_orders: tuple = (2,)
    keep_states: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.dt_policy not in DT_POLICIES:
            raise ValueError(f"unknown dt policy {self.dt_policy!r}")
        for name in ("dt", "dt_max", "dt_min", "projection_tol", "t_max", "f2_tol", "rhs_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.safety < 1:
            raise ValueError("safety must lie in (0, 1)")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")

    # fields that change the trajectory; stop criteria and recording excluded
    DYNAMIC_FIELDS = (
        "scheme", "dt", "dt_policy", "dt_max", "dt_min", "safety", "growth",
        "grow_after", "projection_tol", "energy_slack", "u_ceiling", "h_ceiling",
    )


@dataclass(eq=False)
class FlowState:
    """Current point of the flow.

    ``u`` is the canonical representation; grid values are always derived from
    its coefficients so a state reloaded from its coefficients is identical.
    ``volume0`` is the initial volume, re-imposed after each step when
    ``k_n = 0`` (where the continuous flow preserves it).
    """

    t: float
    u: SpectralField
    lam: float
    Q: GridField
    dt: float
    energy: float = float("nan")
    steps: int = 0
    clean_steps: int = 0
    volume0: float | None = None

    @property
    def geometry(self) -> Geometry:
        return self.u.geometry

    def grid(self) -> GridField:
        return GridField(self.geometry, self.geometry.inverse(self.u.coeffs))


# --------------------------------------------------------------------------
# pointwise pieces

@dataclass
class _Eval:
    values: np.ndarray
    pu: np.ndarray
    exp_nu: np.ndarray
    Q: np.ndarray
    lam: float
    rhs: np.ndarray


def _evaluate(coeffs: np.ndarray, bg: BackgroundData) -> _Eval:
    geom = bg.geometry
    n = geom.n
    mu = gjms_multiplier(geom).mu
    values = geom.inverse(coeffs)
    pu = geom.inverse(mu * coeffs)
    if n * np.max(np.abs(values)) > 700.0:
        raise StepRejected("e^{n|u|} exceeds float range")
    exp_nu = np.exp(n * values)
    curv = pu + bg.Q0.values
    Q = curv * np.exp(-n * values)
    f = bg.f.values
    denom = geom.quad(f * f * exp_nu)
    if not denom > 1e-300:
        raise FlowError("degenerate f: int f^2 e^{nu} vanishes")
    lam = geom.quad(f * curv) / denom
    return _Eval(values, pu, exp_nu, Q, lam, lam * f - Q)


def lambda_of(u, background: BackgroundData) -> float:
    """``lambda = int f Q dmu_g / int f^2 dmu_g``."""
    coeffs = u.coeffs if isinstance(u, SpectralField) else u.geometry.forward(u.values)
    return _evaluate(coeffs, background).lam


def rhs(state, background: BackgroundData) -> GridField:
    """``lambda f - Q`` for a state (or a bare field)."""
    u = state.u if isinstance(state, FlowState) else state
    coeffs = u.coeffs if isinstance(u, SpectralField) else u.geometry.forward(u.values)
    return GridField(background.geometry, _evaluate(coeffs, background).rhs)


# --------------------------------------------------------------------------
# constraint projection

def _feasible(f: np.ndarray, k: float) -> bool:
    fmax, fmin = float(np.max(f)), float(np.min(f))
    if fmin < 0 < fmax:
        return True
    if k > 0:
        return fmax > 0
    if k < 0:
        return fmin < 0
    return False


def solve_shift(values: np.ndarray, background: BackgroundData, tol: float = 1e-12) -> float:
    """Solve ``int f e^{n(u + c f)} = k_n`` for ``c``.

    ``G(c)`` is strictly increasing, so a Newton iteration kept inside a
    sign bracket always converges.  Arithmetic is rescaled by the largest
    exponent to stay finite.
    """
    geom = background.geometry
    n = geom.n
    f = background.f.values
    k = background.k_n
    if not _feasible(f, k):
        raise InfeasibleConstraint(
            f"no shift along f attains int f e^(nu) = {k!r} (sup f = {f.max()!r}, inf f = {f.min()!r})"
        )
    w = geom.weights
    fmax = float(np.max(np.abs(f)))
    scale_tol = tol * max(1.0, abs(k))

    def parts(c):
        expo = n * (values + c * f)
        s = float(np.max(expo))
        e = np.exp(expo - s)
        g = float(np.sum(w * f * e))
        dg = n * float(np.sum(w * f * f * e))
        return g, dg, s

    lo, hi = -np.inf, np.inf
    c = 0.0
    max_jump = 1.0 / (n * fmax)
    for _ in range(200):
        g_s, dg_s, s = parts(c)
        gap_s = g_s - k * np.exp(-s)
        if s < 700.0:
            gap = gap_s * np.exp(s)
            if abs(gap) <= 1e-3 * scale_tol:
                return c
        else:
            gap = np.inf if gap_s > 0 else -np.inf
        if gap_s > 0:
            hi = min(hi, c)
        else:
            lo = max(lo, c)
        step = gap_s / dg_s
        if abs(step) > max_jump:
            step = np.sign(step) * max_jump
            max_jump *= 2.0
        c_new = c - step
        if not lo < c_new < hi:
            c_new = 0.5 * (lo + hi) if np.isfinite(lo) and np.isfinite(hi) else c_new
        if c_new == c or (np.isfinite(lo) and np.isfinite(hi) and hi - lo <= 4e-16 * max(1.0, abs(c))):
            if abs(gap) <= scale_tol:
                return c
            break
        c = c_new
    g_s, _, s = parts(c)
    gap = (g_s - k * np.exp(-s)) * np.exp(s) if s < 700 else np.inf
    if abs(gap) <= scale_tol:
        return c
    raise StepRejected(f"constraint projection did not converge (residual {gap!r})")


def project_constraint(u: GridField, background: BackgroundData, tol: float = 1e-12) -> GridField:
    """Shift ``u`` along ``f`` onto ``{int f e^{nu} = k_n}``."""
    _check_same(u.geometry, background.geometry)
    c = solve_shift(u.values, background, tol)
    return GridField(u.geometry, u.values + c * background.f.values)


def constraint_residual(values: np.ndarray, background: BackgroundData) -> float:
    geom = background.geometry
    return geom.quad(background.f.values * np.exp(geom.n * values)) - background.k_n


def _restore_volume(coeffs: np.ndarray, bg: BackgroundData, volume0: float) -> np.ndarray:
    # a constant shift rescales int f e^{nu} = 0 and leaves E unchanged (int Q0 = 0)
    geom = bg.geometry
    vol = geom.quad(np.exp(geom.n * geom.inverse(coeffs)))
    d = np.log(volume0 / vol) / geom.n
    if d == 0.0:
        return coeffs
    return coeffs + d * geom.forward(np.ones(geom.grid_shape))


def _project_coeffs(coeffs: np.ndarray, bg: BackgroundData, tol: float, volume0=None) -> np.ndarray:
    geom = bg.geometry
    f_hat = geom.forward(bg.f.values)
    limit = tol * max(1.0, abs(bg.k_n))
    for _ in range(4):
        values = geom.inverse(coeffs)
        if abs(constraint_residual(values, bg)) <= 0.5 * limit:
            break
        c = solve_shift(values, bg, tol * 0.1)
        if c == 0.0:
            break
        coeffs = coeffs + c * f_hat
    if volume0 is not None:
        # after the f-shift: a constant shift only rescales int f e^{nu} = 0
        coeffs = _restore_volume(coeffs, bg, volume0)
    if abs(constraint_residual(geom.inverse(coeffs), bg)) > limit:
        raise StepRejected("constraint residual above tolerance after projection")
    return coeffs


# --------------------------------------------------------------------------
# stepping

def make_state(u, background: BackgroundData, config: FlowConfig, t: float = 0.0) -> FlowState:
    """Project ``u`` into the constraint set and wrap it as a flow state."""
    geom = background.geometry
    coeffs = u.coeffs if isinstance(u, SpectralField) else geom.forward(u.values)
    coeffs = _project_coeffs(coeffs, background, config.projection_tol)
    vol0 = None
    if background.k_n == 0.0:
        vol0 = geom.quad(np.exp(geom.n * geom.inverse(coeffs)))
    return _finish(t, coeffs, background, config.dt, 0, 0, vol0)


def _finish(t, coeffs, bg, dt, steps, clean, volume0=None) -> FlowState:
    geom = bg.geometry
    ev = _evaluate(coeffs, bg)
    E = _energy_from(coeffs, ev.values, bg)
    return FlowState(t, SpectralField(geom, coeffs), ev.lam, GridField(geom, ev.Q), dt, E, steps, clean,
                     volume0)


def _energy_from(coeffs, values, bg) -> float:
    geom = bg.geometry
    mu = gjms_multiplier(geom).mu
    n = geom.n
    return 0.5 * n * float(np.sum(mu * np.abs(coeffs) ** 2)) + n * geom.quad(bg.Q0.values * values)


def _rhs_hat(coeffs, bg):
    ev = _evaluate(coeffs, bg)
    return bg.geometry.forward(ev.rhs), ev


def step(state: FlowState, background: BackgroundData, config: FlowConfig, dt: float | None = None) -> FlowState:
    """Advance one step of size ``dt`` (default ``state.dt``) and re-project.

    ``imex-semi-implicit`` treats ``m P0 u`` implicitly with the frozen
    coefficient ``m = max e^{-nu}`` and the remainder explicitly:
    ``(1 + dt m mu) u_new = u + dt (lambda f - Q + m P0 u)`` in spectral space.
    ``explicit-rk4`` is the classical four-stage scheme.
    """
    dt = state.dt if dt is None else dt
    geom = background.geometry
    c0 = state.u.coeffs
    if config.scheme == "explicit-rk4":
        k1, _ = _rhs_hat(c0, background)
        k2, _ = _rhs_hat(c0 + 0.5 * dt * k1, background)
        k3, _ = _rhs_hat(c0 + 0.5 * dt * k2, background)
        k4, _ = _rhs_hat(c0 + dt * k3, background)
        c1 = c0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        r_hat, ev = _rhs_hat(c0, background)
        m = float(np.exp(-geom.n * np.min(ev.values)))
        mu = gjms_multiplier(geom).mu
        c1 = c0 + dt * r_hat / (1.0 + dt * m * mu)
    if not np.all(np.isfinite(c1)):
        raise StepRejected("non-finite coefficients")
    c1 = _project_coeffs(c1, background, config.projection_tol, state.volume0)
    return _finish(state.t + dt, c1, background, dt, state.steps + 1, state.clean_steps, state.volume0)


def run_flow(u0, background: BackgroundData, config: FlowConfig, state: FlowState | None = None):
    """Integrate until a stop criterion fires.

    Returns ``(final_state, series)``; ``series.stop_reason`` is one of
    ``"f2"``, ``"stationary"``, ``"time"`` or ``"steps"``.  Pass ``state`` to
    continue from a checkpoint instead of ``u0``.

    Raises
    ------
    BlowUpDetected
        ``sup|u|`` or the ``H^{n/2}`` norm exceeded its ceiling.
    InfeasibleConstraint
        ``u0`` cannot be projected into the constraint set.
    StepSizeUnderflow
        Rejections pushed ``dt`` below ``config.dt_min``.
    """
    from .diagnostics import DiagnosticsSeries, detect_concentration

    geom = background.geometry
    if state is None:
        state = make_state(u0, background, config)
    else:
        _check_same(state.geometry, geom)
    series = DiagnosticsSeries(geom.n, config.sobolev_orders, keep_states=config.keep_states)
    series.record(state, background)

    dt = state.dt
    clean = state.clean_steps
    since_record = 0
    reason = None
    while True:
        reason = _stop_reason(state, series, config)
        if reason:
            break
        try:
            trial = step(replace(state, clean_steps=clean), background, config, dt)
        except StepRejected as exc:
            log.debug("step rejected at t=%r dt=%r: %s", state.t, dt, exc)
            dt, clean = _shrink(dt, config)
            continue
        if trial.energy > state.energy + config.energy_slack:
            log.debug("energy increase %r at t=%r, dt=%r", trial.energy - state.energy, state.t, dt)
            dt, clean = _shrink(dt, config)
            continue
        clean += 1
        if config.dt_policy == "adaptive" and clean >= config.grow_after:
            dt = min(dt * config.growth, config.dt_max)
            clean = 0
        state = replace(trial, dt=dt, clean_steps=clean)
        since_record += 1
        blown = _blow_up(state, config)
        if blown:
            series.record(state, background)
            conc = detect_concentration(state.grid()) if geom.kind == SPHERE else None
            raise BlowUpDetected(blown, state=state, series=series, concentration=conc)
        if since_record >= config.record_stride:
            series.record(state, background)
            since_record = 0
    if since_record:
        series.record(state, background)
    series.stop_reason = reason
    return state, series


def _shrink(dt, config):
    dt = dt * config.safety
    if dt < config.dt_min:
        raise StepSizeUnderflow(f"time step fell below {config.dt_min!r}")
    return dt, 0


def _blow_up(state: FlowState, config: FlowConfig):
    from .operators import sobolev_norm

    values = state.geometry.inverse(state.u.coeffs)
    sup = float(np.max(np.abs(values)))
    if sup > config.u_ceiling:
        return f"sup|u| = {sup!r} exceeds ceiling {config.u_ceiling!r} at t = {state.t!r}"
    h = sobolev_norm(state.u)
    if h > config.h_ceiling:
        return f"H^(n/2) norm {h!r} exceeds ceiling {config.h_ceiling!r} at t = {state.t!r}"
    return None


def _stop_reason(state: FlowState, series, config: FlowConfig):
    last = series.last()
    if last is not None and last["t"] == state.t:
        f2, rhs_norm = last["F2"], last["rhs_l2"]
    else:
        f2, rhs_norm = _f2_and_rhs(state, series.background)
    if f2 <= config.f2_tol:
        return "f2"
    if rhs_norm <= config.rhs_tol:
        return "stationary"
    if state.t >= config.t_max:
        return "time"
    if state.steps >= config.max_steps:
        return "steps"
    return None


def _f2_and_rhs(state: FlowState, bg: BackgroundData):
    geom = bg.geometry
    ev = _evaluate(state.u.coeffs, bg)
    f2 = geom.quad(ev.rhs**2 * ev.exp_nu)
    return f2, float(np.sqrt(geom.quad(ev.rhs**2)))
