"""Model geometries, quadrature and grid/spectral transforms.

Two even-dimensional model spaces are supported:

* ``torus``: the flat torus ``[0, 2pi)^n`` sampled on a uniform tensor grid,
  with the orthonormal Fourier basis ``exp(i k.x) / sqrt(vol)``.
* ``zonal-sphere``: functions on the round ``S^n`` that depend only on the
  polar angle.  With ``x = cos(theta)`` the volume form is
  ``vol(S^{n-1}) (1 - x^2)^{(n-2)/2} dx`` and the zonal eigenfunctions of the
  Laplacian are Gegenbauer polynomials ``C_l^{(n-1)/2}(x)``.  Nodes are the
  Gauss-Jacobi points, so a degree-``L`` basis lives on ``L + 1`` nodes.

Both discretizations are collocation schemes: grid values and spectral
coefficients are in one-to-one correspondence, and the discrete Parseval
identity is exact.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import lru_cache
from math import gamma, pi

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

TORUS = "torus"
SPHERE = "zonal-sphere"
KINDS = (TORUS, SPHERE)
SUPPORTED_DIMENSIONS = (2, 4, 6)


def sphere_volume(n: int) -> float:
    """Volume of the unit sphere S^n in R^{n+1}."""
    return 2.0 * pi ** ((n + 1) / 2) / gamma((n + 1) / 2)


def gegenbauer_table(x, degree: int, alpha: float) -> np.ndarray:
    """Values ``C_l^alpha(x)`` for ``l = 0..degree`` by forward recurrence.

    Returns an array of shape ``(len(x), degree + 1)``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = 2.0 * alpha * x
    for ell in range(2, degree + 1):
        out[..., ell] = (
            2.0 * x * (ell + alpha - 1.0) * out[..., ell - 1]
            - (ell + 2.0 * alpha - 2.0) * out[..., ell - 2]
        ) / ell
    return out


@dataclass(frozen=True, eq=False)
class Geometry:
    """A discretized model space.

    Use :func:`make_geometry` rather than constructing this directly.

    Attributes
    ----------
    kind : str
        ``"torus"`` or ``"zonal-sphere"``.
    n : int
        Even dimension of the manifold.
    resolution : int
        Torus: grid points per axis.  Sphere: maximal degree ``L``.
    nodes : ndarray
        Torus: the 1-D axis coordinates (the grid is their tensor product).
        Sphere: ``x = cos(theta)`` at the Gauss-Jacobi nodes.
    weights : ndarray
        Quadrature weights, shaped like a grid field.
    """

    kind: str
    n: int
    resolution: int
    nodes: np.ndarray
    weights: np.ndarray
    volume: float
    laplace_eigs: np.ndarray
    _basis: np.ndarray | None = field(default=None, repr=False)
    _norms: np.ndarray | None = field(default=None, repr=False)

    @property
    def grid_shape(self) -> tuple:
        return self.weights.shape

    @property
    def spectral_shape(self) -> tuple:
        return self.laplace_eigs.shape

    @property
    def node_count(self) -> int:
        return self.weights.size

    @property
    def mode_count(self) -> int:
        """Maximal frequency (torus) or degree (sphere)."""
        return self.resolution // 2 if self.kind == TORUS else self.resolution

    @property
    def coefficient_dtype(self):
        return complex if self.kind == TORUS else float

    @property
    def theta(self) -> np.ndarray:
        if self.kind != SPHERE:
            raise ValueError("polar angle is only defined on the zonal sphere")
        return np.arccos(self.nodes)

    def coordinates(self) -> list:
        """Node coordinates as a list of grid-shaped arrays (one per axis)."""
        if self.kind == SPHERE:
            return [self.nodes.copy()]
        return list(np.meshgrid(*([self.nodes] * self.n), indexing="ij"))

    def descriptor(self) -> dict:
        return {"kind": self.kind, "n": self.n, "resolution": self.resolution}

    def same_as(self, other: "Geometry") -> bool:
        return self is other or self.descriptor() == other.descriptor()

    # raw-array transforms --------------------------------------------------
    def forward(self, values: np.ndarray) -> np.ndarray:
        """Grid values to orthonormal-basis coefficients."""
        if self.kind == TORUS:
            scale = np.sqrt(self.volume) / self.node_count
            return np.fft.fftn(values) * scale
        return self._basis.T @ (self.weights * values)

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        """Orthonormal-basis coefficients to grid values."""
        if self.kind == TORUS:
            scale = self.node_count / np.sqrt(self.volume)
            return np.fft.ifftn(coeffs).real * scale
        return self._basis @ coeffs

    def quad(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights * values))

    def basis_at(self, x) -> np.ndarray:
        """Orthonormal zonal basis evaluated at arbitrary ``x = cos(theta)``."""
        if self.kind != SPHERE:
            raise ValueError("basis_at is only available on the zonal sphere")
        table = gegenbauer_table(x, self.resolution, (self.n - 1) / 2.0)
        return table / np.sqrt(self._norms)

    def evaluate(self, coeffs: np.ndarray, x) -> np.ndarray:
        return self.basis_at(x) @ coeffs


@lru_cache(maxsize=64)
def make_geometry(kind: str, n: int, resolution: int) -> Geometry:
    """Build a model geometry.

    Parameters
    ----------
    kind : {"torus", "zonal-sphere"}
    n : int
        Even dimension, one of 2, 4, 6.
    resolution : int
        Torus: grid points per axis (even, >= 8).  Sphere: maximal degree
        ``L >= 8``; ``L + 1`` Gauss-Jacobi nodes integrate polynomials of
        degree ``2L + 1`` exactly.
    """
    if kind not in KINDS:
        raise ValueError(f"unsupported geometry kind {kind!r}")
    if n % 2 != 0:
        raise ValueError(f"dimension must be even, got {n}")
    if n not in SUPPORTED_DIMENSIONS:
        raise ValueError(f"dimension must be one of {SUPPORTED_DIMENSIONS}, got {n}")
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")

    if kind == TORUS:
        if resolution % 2:
            raise ValueError("torus resolution must be even")
        N = resolution
        axis = 2.0 * pi * np.arange(N) / N
        shape = (N,) * n
        volume = (2.0 * pi) ** n
        weights = np.full(shape, volume / N**n)
        freqs = np.fft.fftfreq(N, d=1.0 / N)
        k2 = np.zeros(shape)
        for d in range(n):
            sl = [None] * n
            sl[d] = slice(None)
            k2 = k2 + (freqs**2)[tuple(sl)]
        return Geometry(TORUS, n, N, axis, weights, float(volume), k2)

    L = resolution
    a = (n - 2) / 2.0
    if a == 0:
        x, w = roots_legendre(L + 1)
    else:
        x, w = roots_jacobi(L + 1, a, a)
    weights = w * sphere_volume(n - 1)
    table = gegenbauer_table(x, L, (n - 1) / 2.0)
    norms = np.einsum("i,il,il->l", weights, table, table)
    basis = table / np.sqrt(norms)
    ell = np.arange(L + 1, dtype=float)
    eigs = ell * (ell + n - 1)
    return Geometry(
        SPHERE, n, L, x, weights, float(weights.sum()), eigs, _basis=basis, _norms=norms
    )


def coarser_or_finer(geometry: Geometry, factor: int) -> Geometry:
    """Same model space at ``factor`` times the resolution."""
    return make_geometry(geometry.kind, geometry.n, geometry.resolution * factor)


@dataclass(eq=False)
class GridField:
    """Pointwise values of a function at the geometry's nodes."""

    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.geometry.grid_shape:
            raise ValueError(
                f"grid field shape {self.values.shape} does not match "
                f"geometry grid {self.geometry.grid_shape}"
            )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass(eq=False)
class SpectralField:
    """Coefficients in the geometry's orthonormal basis.

    Torus coefficients are complex and indexed like ``numpy.fft.fftn``
    output (Hermitian for real fields); sphere coefficients are real and
    indexed by degree.
    """

    geometry: Geometry
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=self.geometry.coefficient_dtype)
        if self.coeffs.shape != self.geometry.spectral_shape:
            raise ValueError(
                f"coefficient shape {self.coeffs.shape} does not match "
                f"geometry modes {self.geometry.spectral_shape}"
            )


def _check_same(a: Geometry, b: Geometry):
    if not a.same_as(b):
        raise ValueError(f"geometry mismatch: {a.descriptor()} vs {b.descriptor()}")


def grid_field(geometry: Geometry, fn) -> GridField:
    """Sample a callable ``fn(*coords)`` at the nodes."""
    return GridField(geometry, np.broadcast_to(fn(*geometry.coordinates()), geometry.grid_shape))


def constant_field(geometry: Geometry, value: float) -> GridField:
    return GridField(geometry, np.full(geometry.grid_shape, float(value)))


def to_spectral(field: GridField) -> SpectralField:
    if not field.is_finite():
        raise ValueError("cannot transform a field with non-finite values")
    return SpectralField(field.geometry, field.geometry.forward(field.values))


def to_grid(field: SpectralField) -> GridField:
    return GridField(field.geometry, field.geometry.inverse(field.coeffs))


def integrate(field: GridField) -> float:
    """Quadrature of a grid field against the background volume form."""
    return field.geometry.quad(field.values)


def l2_norm(field: GridField) -> float:
    return float(np.sqrt(integrate(GridField(field.geometry, field.values**2))))


def spectral_tail(u: GridField, n_exp: float | None = None) -> float:
    """Fraction of the spectral energy of ``exp(n u)`` beyond the base band.

    ``exp(n u)`` is evaluated on a 2x refined grid, transformed there, and the
    energy in modes that the base grid cannot represent is reported.
    """
    geom = u.geometry
    n_exp = geom.n if n_exp is None else n_exp
    fine = coarser_or_finer(geom, 2)
    coeffs = geom.forward(u.values)
    if geom.kind == TORUS:
        padded = _pad_torus(coeffs, geom, fine)
        values = fine.inverse(padded)
        g_hat = fine.forward(np.exp(n_exp * values))
        mask = _base_band_mask(geom, fine)
        total = np.sum(np.abs(g_hat) ** 2)
        tail = np.sum(np.abs(g_hat[~mask]) ** 2)
    else:
        values = fine.basis_at(fine.nodes)[:, : geom.resolution + 1] @ coeffs
        g_hat = fine.forward(np.exp(n_exp * values))
        total = np.sum(g_hat**2)
        tail = np.sum(g_hat[geom.resolution + 1 :] ** 2)
    return float(tail / total) if total > 0 else 0.0


def _axis_index_map(N: int, M: int) -> np.ndarray:
    freqs = np.fft.fftfreq(N, d=1.0 / N).astype(int)
    return np.mod(freqs, M)


def _pad_torus(coeffs, geom: Geometry, fine: Geometry) -> np.ndarray:
    idx = _axis_index_map(geom.resolution, fine.resolution)
    out = np.zeros(fine.spectral_shape, dtype=complex)
    out[np.ix_(*([idx] * geom.n))] = coeffs
    return out


def _base_band_mask(geom: Geometry, fine: Geometry) -> np.ndarray:
    idx = _axis_index_map(geom.resolution, fine.resolution)
    mask = np.zeros(fine.spectral_shape, dtype=bool)
    mask[np.ix_(*([idx] * geom.n))] = True
    return mask


# --------------------------------------------------------------------------
# conformal dilations of the zonal sphere

@dataclass(eq=False)
class DilationMap:
    """Conformal dilation ``phi_{y,r}`` of the sphere fixing the axis.

    In stereographic coordinates centred at the pole ``y`` the map is
    ``xi -> r xi``, i.e. ``tan(theta'/2) = r tan(theta/2)`` with ``theta``
    measured from ``y``.  Its linear conformal factor is
    ``2r / ((1 + r^2) - (r^2 - 1) cos(theta))`` and the Jacobian determinant is
    that factor to the power ``n``; for ``r > 1`` volume is pushed towards
    ``y``.
    """

    geometry: Geometry
    pole: str
    r: float
    image: np.ndarray
    jacobian: np.ndarray
    log_jacobian: np.ndarray


def _dilation_arrays(x, n: int, pole: str, r: float):
    s = 1.0 if pole == "north" else -1.0
    xp = s * np.asarray(x, dtype=float)
    one_minus = 1.0 - xp
    one_plus = 1.0 + xp
    r2 = r * r
    den = one_plus + r2 * one_minus
    image = s * (one_plus - r2 * one_minus) / den
    log_factor = np.log(2.0 * r) - np.log(den)
    return image, n * log_factor


def dilation(geometry: Geometry, y: str, r: float) -> DilationMap:
    """Conformal dilation about the pole ``y`` ("north" or "south")."""
    if geometry.kind != SPHERE:
        raise ValueError("conformal dilations are only defined on the zonal sphere")
    if y not in ("north", "south"):
        raise ValueError(f"pole must be 'north' or 'south', got {y!r}")
    if not r >= 1.0:
        raise ValueError(f"dilation parameter must be >= 1, got {r}")
    image, logj = _dilation_arrays(geometry.nodes, geometry.n, y, float(r))
    return DilationMap(geometry, y, float(r), image, np.exp(logj), logj)


def compose(u: GridField, phi: DilationMap) -> GridField:
    """``u o phi`` using the spectral interpolant of ``u``."""
    _check_same(u.geometry, phi.geometry)
    geom = u.geometry
    coeffs = geom.forward(u.values)
    return GridField(geom, geom.evaluate(coeffs, phi.image))


def pullback(u: GridField, phi: DilationMap) -> GridField:
    """Conformal pullback ``u o phi + (1/n) log det(d phi)``."""
    if phi.r == 1.0:
        return GridField(u.geometry, u.values.copy())
    base = compose(u, phi)
    return GridField(u.geometry, base.values + phi.log_jacobian / u.geometry.n)


def center_of_mass(u: GridField) -> float:
    """Axis component of ``int x e^{nu} / int e^{nu}`` on the zonal sphere."""
    geom = u.geometry
    if geom.kind != SPHERE:
        raise ValueError("center of mass is computed on the zonal sphere only")
    shift = u.values.max()
    density = np.exp(geom.n * (u.values - shift))
    return float(geom.quad(geom.nodes * density) / geom.quad(density))


# --------------------------------------------------------------------------
# serialization

def geometry_to_text(geometry: Geometry) -> str:
    d = geometry.descriptor()
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def geometry_from_text(text: str) -> Geometry:
    d = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        d[key.strip()] = value.strip()
    try:
        return make_geometry(d["kind"], int(d["n"]), int(d["resolution"]))
    except KeyError as exc:
        raise ValueError(f"geometry descriptor is missing {exc}") from None


def field_to_csv(u: GridField) -> str:
    geom = u.geometry
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if geom.kind == SPHERE:
        writer.writerow(["theta", "x", "value"])
        for th, x, v in zip(geom.theta, geom.nodes, u.values):
            writer.writerow([repr(float(th)), repr(float(x)), repr(float(v))])
    else:
        writer.writerow([f"x{i + 1}" for i in range(geom.n)] + ["value"])
        coords = [c.ravel() for c in geom.coordinates()]
        for row in zip(*coords, u.values.ravel()):
            writer.writerow([repr(float(c)) for c in row])
    return buf.getvalue()


def field_from_csv(text: str, geometry: Geometry) -> GridField:
    rows = list(csv.reader(io.StringIO(text)))
    values = np.array([float(r[-1]) for r in rows[1:]])
    if values.size != geometry.node_count:
        raise ValueError("CSV row count does not match the geometry")
    return GridField(geometry, values.reshape(geometry.grid_shape))


def spectral_to_json(field: SpectralField) -> str:
    geom = field.geometry
    c = field.coeffs.ravel()
    if geom.kind == TORUS:
        freqs = np.fft.fftfreq(geom.resolution, d=1.0 / geom.resolution).astype(int)
        modes = np.stack(np.meshgrid(*([freqs] * geom.n), indexing="ij"), -1).reshape(-1, geom.n)
        coeffs = [[float(z.real), float(z.imag)] for z in c]
        payload = {"geometry": geom.descriptor(), "modes": modes.tolist(), "coefficients": coeffs}
    else:
        payload = {
            "geometry": geom.descriptor(),
            "modes": list(range(geom.resolution + 1)),
            "coefficients": [float(v) for v in c],
        }
    return json.dumps(payload)


def spectral_from_json(text: str) -> SpectralField:
    payload = json.loads(text)
    d = payload["geometry"]
    geom = make_geometry(d["kind"], int(d["n"]), int(d["resolution"]))
    raw = np.asarray(payload["coefficients"], dtype=float)
    if geom.kind == TORUS:
        coeffs = (raw[:, 0] + 1j * raw[:, 1]).reshape(geom.spectral_shape)
    else:
        coeffs = raw
    return SpectralField(geom, coeffs)
