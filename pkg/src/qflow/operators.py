"""GJMS operator, Q-curvature transformation law, energy and norms.

On both model spaces the GJMS operator ``P0`` is diagonal in the orthonormal
basis of :mod:`qflow.geometry`:

* flat torus: ``P0 = (-Delta)^{n/2}``, multiplier ``|k|^n``;
* round sphere: ``P0 = prod_{k=0}^{n/2-1} (-Delta + k(n-1-k))``, multiplier
  ``prod_k (l(l+n-1) + k(n-1-k))`` on degree-``l`` zonal harmonics.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from math import factorial

import numpy as np

from .geometry import (
    SPHERE,
    TORUS,
    Geometry,
    GridField,
    SpectralField,
    _check_same,
    constant_field,
    sphere_volume,
)


def threshold(n: int) -> float:
    """Critical total Q-curvature ``(n-1)! * vol(S^n)``."""
    if n % 2 != 0 or n < 2:
        raise ValueError(f"dimension must be a positive even integer, got {n}")
    return factorial(n - 1) * sphere_volume(n)


@dataclass(frozen=True, eq=False)
class GjmsMultiplier:
    geometry: Geometry
    mu: np.ndarray
    lambda1: float


def _sphere_multiplier_int(ell: int, n: int) -> int:
    value = 1
    for k in range(n // 2):
        value *= ell * (ell + n - 1) + k * (n - 1 - k)
    return value


_MULTIPLIER_CACHE: dict = {}


def gjms_multiplier(geometry: Geometry) -> GjmsMultiplier:
    """Diagonal spectral representation of ``P0`` (integer-exact)."""
    key = (geometry.kind, geometry.n, geometry.resolution)
    cached = _MULTIPLIER_CACHE.get(key)
    if cached is not None:
        return cached
    n = geometry.n
    if geometry.kind == TORUS:
        k2 = np.rint(geometry.laplace_eigs).astype(np.int64)
        mu = (k2 ** (n // 2)).astype(float)
        lambda1 = 1.0
    else:
        mu = np.array(
            [float(_sphere_multiplier_int(ell, n)) for ell in range(geometry.resolution + 1)]
        )
        lambda1 = float(mu[1])
    op = GjmsMultiplier(geometry, mu, lambda1)
    _MULTIPLIER_CACHE[key] = op
    return op


def multiplier_table_csv(op: GjmsMultiplier) -> str:
    """CSV of (mode index, multiplier) rows for external verification."""
    geom = op.geometry
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if geom.kind == SPHERE:
        writer.writerow(["ell", "mu"])
        for ell, m in enumerate(op.mu):
            writer.writerow([ell, repr(float(m))])
    else:
        writer.writerow([f"k{i + 1}" for i in range(geom.n)] + ["mu"])
        freqs = np.fft.fftfreq(geom.resolution, d=1.0 / geom.resolution).astype(int)
        grids = np.meshgrid(*([freqs] * geom.n), indexing="ij")
        for idx in np.ndindex(*geom.spectral_shape):
            writer.writerow([int(g[idx]) for g in grids] + [repr(float(op.mu[idx]))])
    return buf.getvalue()


def _coeffs(u) -> np.ndarray:
    if isinstance(u, SpectralField):
        return u.coeffs
    return u.geometry.forward(u.values)


def _values(u) -> np.ndarray:
    if isinstance(u, GridField):
        return u.values
    return u.geometry.inverse(u.coeffs)


def apply_gjms(op: GjmsMultiplier, u: SpectralField) -> SpectralField:
    _check_same(op.geometry, u.geometry)
    return SpectralField(u.geometry, op.mu * u.coeffs)


def quadratic_form(op: GjmsMultiplier, coeffs: np.ndarray) -> float:
    """``int u P0 u`` from coefficients (exact by discrete Parseval)."""
    return float(np.sum(op.mu * np.abs(coeffs) ** 2))


@dataclass(eq=False)
class BackgroundData:
    """Background curvature ``Q0`` and candidate curvature ``f``.

    ``synthetic`` marks a ``Q0`` that was supplied by the user instead of the
    curvature of the model metric.
    """

    Q0: GridField
    f: GridField
    k_n: float
    synthetic: bool = False

    @property
    def geometry(self) -> Geometry:
        return self.f.geometry

    @property
    def target(self) -> float:
        return self.k_n


def metric_q_curvature(geometry: Geometry) -> GridField:
    """Q-curvature of the model metric: 0 on the flat torus, (n-1)! on S^n."""
    value = 0.0 if geometry.kind == TORUS else float(factorial(geometry.n - 1))
    return constant_field(geometry, value)


def make_background(f: GridField, Q0: GridField | None = None) -> BackgroundData:
    geom = f.geometry
    if not np.any(f.values != 0.0):
        raise ValueError("candidate curvature f must not vanish identically")
    synthetic = Q0 is not None
    if Q0 is None:
        Q0 = metric_q_curvature(geom)
    _check_same(geom, Q0.geometry)
    k = geom.quad(Q0.values)
    # zero-mean synthetic profiles integrate to roundoff; treat as k_n = 0
    if abs(k) <= 1e-13 * geom.quad(np.abs(Q0.values)):
        k = 0.0
    return BackgroundData(Q0, f, k, synthetic)


def _exp_checked(values: np.ndarray, scale: float) -> np.ndarray:
    peak = scale * values
    if np.max(peak) > 700.0:
        raise OverflowError("exponential of the conformal factor exceeds float range")
    return np.exp(peak)


def q_curvature(u, background: BackgroundData) -> GridField:
    """``Q_{g_u} = e^{-nu} (P0 u + Q0)`` at the nodes."""
    geom = background.geometry
    _check_same(geom, u.geometry)
    op = gjms_multiplier(geom)
    coeffs = _coeffs(u)
    pu = geom.inverse(op.mu * coeffs)
    values = _values(u)
    return GridField(geom, _exp_checked(values, -geom.n) * (pu + background.Q0.values))


def energy(u, background: BackgroundData) -> float:
    """``E[u] = n/2 int u P0 u + n int Q0 u``."""
    geom = background.geometry
    op = gjms_multiplier(geom)
    n = geom.n
    return 0.5 * n * quadratic_form(op, _coeffs(u)) + n * geom.quad(background.Q0.values * _values(u))


def sobolev_norm(u, s=None, *, form: str | None = None) -> float:
    """Sobolev norm of ``u``.

    ``s = None`` or ``s = n/2`` gives the operator form
    ``sqrt(int u P0 u + int u^2)``; any other ``s >= 0`` (or
    ``form="laplacian"``) gives ``sqrt(int |(-Delta)^{s/2} u|^2 + int u^2)``.
    """
    geom = u.geometry
    if form not in (None, "operator", "laplacian"):
        raise ValueError(f"unknown norm form {form!r}")
    if s is not None and s < 0:
        raise ValueError(f"unsupported Sobolev order {s}")
    c2 = np.abs(_coeffs(u)) ** 2
    if form is None:
        form = "operator" if (s is None or s == geom.n / 2) else "laplacian"
    if form == "operator":
        weight = gjms_multiplier(geom).mu
    else:
        if s is None:
            s = geom.n / 2
        weight = geom.laplace_eigs ** s if s > 0 else np.ones_like(geom.laplace_eigs)
    return float(np.sqrt(np.sum((weight + 1.0) * c2)))


def total_q(u, background: BackgroundData) -> float:
    """``int Q_{g_u} dmu_{g_u} = int (P0 u + Q0) dmu_0``."""
    geom = background.geometry
    op = gjms_multiplier(geom)
    pu = geom.inverse(op.mu * _coeffs(u))
    return geom.quad(pu + background.Q0.values)


@dataclass
class InequalityReport:
    name: str
    left: float
    right: float
    satisfied: bool
    constant: float | None = None


def check_beckner(u) -> InequalityReport:
    """Beckner's inequality ``avg(e^{nu}) <= exp(E[u] / ((n-1)! vol(S^n)))``."""
    geom = u.geometry
    if geom.kind != SPHERE:
        raise ValueError("Beckner's inequality is checked on the round sphere only")
    n = geom.n
    omega = sphere_volume(n)
    values = _values(u)
    bg = BackgroundData(metric_q_curvature(geom), constant_field(geom, 1.0), threshold(n))
    left = geom.quad(_exp_checked(values, n)) / omega
    right = float(np.exp(energy(u, bg) / threshold(n)))
    return InequalityReport("beckner", left, right, bool(left <= right + 1e-10))


def trudinger_ratio(u, alpha: float) -> float:
    """``int exp(alpha (u - ubar)) / exp(alpha^2 / (2 n! w_n) int u P0 u)``."""
    geom = u.geometry
    n = geom.n
    values = _values(u)
    mean = geom.quad(values) / geom.volume
    quad = quadratic_form(gjms_multiplier(geom), _coeffs(u))
    exponent = alpha**2 / (2.0 * factorial(n) * sphere_volume(n)) * quad
    return float(geom.quad(np.exp(alpha * (values - mean))) / np.exp(exponent))


def estimate_adams_constant(samples, alpha: float = 1.0) -> InequalityReport:
    """Empirical lower bound for the Trudinger/Adams constant over samples.

    The true constant is unknown; the report's ``constant`` is the largest
    observed ratio, which any valid constant must dominate.
    """
    ratios = [trudinger_ratio(u, alpha) for u in samples]
    best = max(ratios)
    return InequalityReport("trudinger", best, best, True, constant=best)
