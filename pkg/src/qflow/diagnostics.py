"""Time-series recording and analysis of flow runs.

The analysis helpers here are pure functions over recorded arrays, so they
can be exercised on synthetic fixtures as well as on flow output.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import SPHERE, GridField, SpectralField, center_of_mass, spectral_tail
from .operators import BackgroundData, check_beckner, gjms_multiplier, sobolev_norm

EPS = np.finfo(float).eps


class DiagnosticsSeries:
    """Append-only record of the scalar diagnostics of one run.

    Columns: ``t, E, F2, constraint, volume, h_half`` followed by one
    ``h{2k}`` column per configured Laplacian order, then ``sup_u, lam, com,
    tail, dt, rhs_l2, beckner_gap``.  ``com`` and ``beckner_gap`` are NaN on
    the torus.
    """

    BASE = ("t", "E", "F2", "constraint", "volume", "h_half")
    TAIL = ("sup_u", "lam", "com", "tail", "dt", "rhs_l2", "beckner_gap")

    def __init__(self, n: int, sobolev_orders=(2,), keep_states: bool = False):
        self.n = n
        self.sobolev_orders = tuple(int(s) for s in sobolev_orders)
        self.columns = self.BASE + tuple(f"h{s}" for s in self.sobolev_orders) + self.TAIL
        self._rows: list = []
        self.keep_states = keep_states
        self.states: list = []
        self.background: BackgroundData | None = None
        self.stop_reason: str | None = None

    def __len__(self):
        return len(self._rows)

    def record(self, state, background: BackgroundData):
        from .flow import _evaluate

        if self._rows and not state.t > self._rows[-1][0]:
            if state.t == self._rows[-1][0]:
                return
            raise ValueError("recorded times must be strictly increasing")
        self.background = background
        geom = background.geometry
        ev = _evaluate(state.u.coeffs, background)
        u = GridField(geom, ev.values)
        res = ev.rhs
        row = [
            state.t,
            state.energy,
            geom.quad(res**2 * ev.exp_nu),
            geom.quad(background.f.values * ev.exp_nu),
            geom.quad(ev.exp_nu),
            sobolev_norm(state.u),
        ]
        row += [sobolev_norm(state.u, s, form="laplacian") for s in self.sobolev_orders]
        if geom.kind == SPHERE:
            com = center_of_mass(u)
            rep = check_beckner(state.u)
            gap = rep.right - rep.left
        else:
            com = gap = float("nan")
        row += [
            float(np.max(np.abs(ev.values))),
            ev.lam,
            com,
            spectral_tail(u),
            state.dt,
            float(np.sqrt(geom.quad(res**2))),
            gap,
        ]
        self._rows.append(tuple(float(v) for v in row))
        if self.keep_states:
            self.states.append(state)

    def last(self) -> dict | None:
        if not self._rows:
            return None
        return dict(zip(self.columns, self._rows[-1]))

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self._rows])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.column(name)

    @property
    def V0(self) -> float:
        return self._rows[0][self.columns.index("volume")]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self._rows:
            writer.writerow([repr(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n: int) -> "DiagnosticsSeries":
        rows = list(csv.reader(io.StringIO(text)))
        header = tuple(rows[0])
        orders = [int(c[1:]) for c in header if c.startswith("h") and c[1:].isdigit()]
        series = cls(n, orders)
        if header != series.columns:
            raise ValueError(f"unexpected diagnostics header {header}")
        series._rows = [tuple(float(v) for v in r) for r in rows[1:]]
        return series


# --------------------------------------------------------------------------
# differential identities

@dataclass
class IdentityResiduals:
    energy: float
    q: float
    lam: float
    spacing: float


def _three_point(t, y):
    """Second-order derivative at interior points of a non-uniform grid."""
    h1 = t[1:-1] - t[:-2]
    h2 = t[2:] - t[1:-1]
    shape = (-1,) + (1,) * (np.ndim(y) - 1)
    a = (-h2 / (h1 * (h1 + h2))).reshape(shape)
    b = ((h2 - h1) / (h1 * h2)).reshape(shape)
    c = (h1 / (h2 * (h1 + h2))).reshape(shape)
    return a * y[:-2] + b * y[1:-1] + c * y[2:]


def _rel(diff, ref, atol):
    if diff <= atol and ref <= atol:
        return 0.0
    return float(diff / max(ref, atol))


def check_flow_identities(states, background: BackgroundData, max_spacing: float = 1e-4,
                          atol: float = 1e-10) -> IdentityResiduals:
    """Compare finite differences along a trajectory with the flow identities.

    Checks ``dE/dt = -n F2``, ``dQ/dt = -P_g(Q - lambda f) + n Q (Q - lambda f)``
    and ``dlambda/dt = (int f^2 dmu_g)^{-1} int (P_g f - n lambda f^2)(lambda f - Q) dmu_g``
    at every interior record and returns the largest relative error of each.
    ``P_g = e^{-nu} P0`` is the operator of the evolved metric.
    """
    from .flow import _evaluate

    if len(states) < 3:
        raise ValueError("identity check needs at least three consecutive records")
    t = np.array([s.t for s in states])
    spacing = float(np.max(np.diff(t)))
    if spacing > max_spacing * (1 + 1e-9):
        raise ValueError(f"record spacing {spacing!r} exceeds identity-check dt {max_spacing!r}")
    geom = background.geometry
    n = geom.n
    mu = gjms_multiplier(geom).mu
    f = background.f.values
    pf = geom.inverse(mu * geom.forward(f))
    evs = [_evaluate(s.u.coeffs, background) for s in states]
    E = np.array([s.energy for s in states])
    Q = np.array([ev.Q for ev in evs])
    lam = np.array([ev.lam for ev in evs])
    dE = _three_point(t, E)
    dQ = _three_point(t, Q)
    dlam = _three_point(t, lam)

    def l2(v):
        return float(np.sqrt(geom.quad(v**2)))

    res_e = res_q = res_l = 0.0
    for j, ev in enumerate(evs[1:-1]):
        corr = ev.Q - ev.lam * f
        f2 = geom.quad(corr**2 * ev.exp_nu)
        res_e = max(res_e, _rel(abs(dE[j] + n * f2), n * f2, atol))
        p_corr = geom.inverse(mu * geom.forward(corr)) * np.exp(-n * ev.values)
        q_rhs = -p_corr + n * ev.Q * corr
        res_q = max(res_q, _rel(l2(dQ[j] - q_rhs), l2(q_rhs), atol))
        denom = geom.quad(f * f * ev.exp_nu)
        l_rhs = geom.quad((pf - n * ev.lam * f * f * ev.exp_nu) * ev.rhs) / denom
        res_l = max(res_l, _rel(abs(dlam[j] - l_rhs), abs(l_rhs), atol))
    return IdentityResiduals(res_e, res_q, res_l, spacing)


# --------------------------------------------------------------------------
# convergence rates

@dataclass
class RateFit:
    """Least-squares decay model ``delta ~ A e^{-rate t}`` or ``A (1+t)^{-rate}``."""

    model: str
    rate: float
    r2: float
    window: tuple
    prefactor: float
    r2_exponential: float
    r2_polynomial: float
    samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    fitted = slope * x + icpt
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), min(max(r2, 0.0), 1.0)


def fit_rate(t, delta, exclude_tail: float = 0.05, floor_factor: float = 100.0,
             dead_band: float = 0.005) -> RateFit:
    """Classify the decay of ``delta(t)`` as exponential or polynomial.

    The final ``exclude_tail`` fraction of samples and every sample below
    ``floor_factor * eps * max(delta)`` are dropped.  The polynomial model is
    kept unless the exponential fit's R^2 beats it by more than ``dead_band``.
    """
    t = np.asarray(t, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if t.shape != delta.shape or t.ndim != 1:
        raise ValueError("t and delta must be 1-D arrays of equal length")
    if t.size < 20:
        raise ValueError(f"rate fit needs at least 20 samples, got {t.size}")
    keep = t.size - int(np.ceil(exclude_tail * t.size)) if exclude_tail > 0 else t.size
    t, delta = t[:keep], delta[:keep]
    floor = floor_factor * EPS * np.max(np.abs(delta))
    mask = np.isfinite(delta) & (delta > floor)
    t, delta = t[mask], delta[mask]
    if t.size < 3:
        raise ValueError("too few samples above the roundoff floor")
    if not delta[-1] < delta[0]:
        raise ValueError("series is not decreasing")
    y = np.log(delta)
    s_exp, i_exp, r2_exp = _linfit(t, y)
    s_pol, i_pol, r2_pol = _linfit(np.log1p(t), y)
    window = (float(t[0]), float(t[-1]))
    if r2_exp > r2_pol + dead_band:
        return RateFit("exponential", -s_exp, r2_exp, window, float(np.exp(i_exp)), r2_exp, r2_pol, int(t.size))
    return RateFit("polynomial", -s_pol, r2_pol, window, float(np.exp(i_pol)), r2_exp, r2_pol, int(t.size))


def distance_to_final(states) -> tuple:
    """``(t_i, ||u(t_i) - u(T_end)||_{H^{n/2}})`` from kept states."""
    if not states:
        raise ValueError("no states recorded; run with keep_states")
    end = states[-1].u
    geom = end.geometry
    t = np.array([s.t for s in states])
    d = np.array([sobolev_norm(SpectralField(geom, s.u.coeffs - end.coeffs)) for s in states])
    return t, d


@dataclass
class LojasiewiczEstimate:
    theta: float
    r2: float
    samples: int
    slope: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def estimate_lojasiewicz(energy_gap, de_norm, min_samples: int = 10) -> LojasiewiczEstimate:
    """Fit ``log ||DE|| = s log(E - E_end) + c`` and report ``theta = 1 - s``.

    ``de_norm`` is ``sqrt(F2)``, since ``||DE[u]||_{L^2(g0)}^2 = F2``.
    """
    gap = np.asarray(energy_gap, dtype=float)
    de = np.asarray(de_norm, dtype=float)
    mask = np.isfinite(gap) & np.isfinite(de) & (gap > 0) & (de > 0)
    if np.count_nonzero(mask) < min_samples:
        raise ValueError(f"fewer than {min_samples} usable samples for the exponent fit")
    slope, _, r2 = _linfit(np.log(gap[mask]), np.log(de[mask]))
    theta = min(max(1.0 - slope, np.finfo(float).tiny), 0.5)
    return LojasiewiczEstimate(float(theta), r2, int(np.count_nonzero(mask)), slope)


def series_lojasiewicz(series: DiagnosticsSeries, exclude_tail: float = 0.05,
                       floor: float = 1e5, transient: float = 0.25) -> LojasiewiczEstimate:
    """Exponent estimate from a recorded run.

    Gaps below ``floor * eps * max(1, |E_end|)`` are roundoff (the energy is
    a sum of many terms) and are dropped, as is the first ``transient``
    fraction of the remaining samples.
    """
    E = series["E"]
    F2 = series["F2"]
    keep = len(E) - int(np.ceil(exclude_tail * len(E)))
    gap = E[:keep] - E[-1]
    de = np.sqrt(F2[:keep])
    usable = np.flatnonzero(gap > floor * EPS * max(1.0, abs(E[-1])))
    usable = usable[int(transient * usable.size):]
    return estimate_lojasiewicz(gap[usable], de[usable])


# --------------------------------------------------------------------------
# concentration

CAP_RADII = (np.pi / 16, np.pi / 8, np.pi / 4)


@dataclass
class ConcentrationReport:
    """Fractions of ``int e^{nu}`` in polar caps (by radius, both poles)."""

    radii: tuple
    north: tuple
    south: tuple
    center_of_mass: float
    h_norm: float
    flag: bool

    def to_dict(self) -> dict:
        return asdict(self)


def detect_concentration(u: GridField, h_ceiling: float = 10.0, ratio: float = 0.9,
                         radii=CAP_RADII) -> ConcentrationReport:
    """Polar-cap mass fractions of ``e^{nu}`` on the zonal sphere.

    Cap masses are quadrature sums over the nodes inside each cap.  The flag
    is raised when the smallest cap about either pole holds more than
    ``ratio`` of the total and the ``H^{n/2}`` norm exceeds ``h_ceiling``.
    """
    geom = u.geometry
    if geom.kind != SPHERE:
        raise ValueError("concentration detection is defined on the zonal sphere")
    density = geom.weights * np.exp(geom.n * (u.values - u.values.max()))
    total = float(np.sum(density))
    theta = geom.theta
    north = tuple(float(np.sum(density[theta <= r]) / total) for r in radii)
    south = tuple(float(np.sum(density[theta >= np.pi - r]) / total) for r in radii)
    h = sobolev_norm(u)
    smallest = max(north[0], south[0])
    return ConcentrationReport(tuple(float(r) for r in radii), north, south,
                               center_of_mass(u), h, bool(smallest > ratio and h > h_ceiling))
