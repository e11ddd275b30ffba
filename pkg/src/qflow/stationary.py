"""Stationary solutions by routes independent of the flow.

* :func:`direct_minimize` minimizes ``int u P0 u`` over
  ``{int f e^{nu} = 0, int e^{nu} = vol}`` (the ``k_n = 0`` variational
  problem) and extracts the Lagrange multipliers.
* :func:`newton_refine` polishes an approximate solution of
  ``P0 u + Q0 = lambda f e^{nu}`` by Newton-Krylov.
* :func:`hessian_coercivity` evaluates the second variation at a stationary
  point on a truncated spectral basis.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh, null_space
from scipy.sparse.linalg import LinearOperator, gmres

from .flow import InfeasibleConstraint, solve_shift
from .geometry import TORUS, GridField, SpectralField, _check_same
from .operators import BackgroundData, gjms_multiplier

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


def _values(u):
    return u.values if isinstance(u, GridField) else u.geometry.inverse(u.coeffs)


def _apply_p(geom, values):
    return geom.inverse(gjms_multiplier(geom).mu * geom.forward(values))


def _l2(geom, v):
    return float(np.sqrt(geom.quad(v * v)))


def residual(u, lam: float, background: BackgroundData) -> float:
    """``||P0 u + Q0 - lambda f e^{nu}||_{L^2(g0)}``."""
    geom = background.geometry
    v = _values(u)
    r = _apply_p(geom, v) + background.Q0.values - lam * background.f.values * np.exp(geom.n * v)
    return _l2(geom, r)


def _bordered_solve(geom, pot, cols, rows, rhs_u, rhs_c):
    """Solve ``(P0 - pot) h - sum_j x_j cols_j = rhs_u``, ``int rows_i h = rhs_c_i``.

    GMRES with the ``(P0 + sigma)^{-1}`` preconditioner on the ``h`` block.
    """
    mu = gjms_multiplier(geom).mu
    w = geom.weights.ravel()
    m = geom.node_count
    b = len(cols)
    sigma = 1.0 + float(np.max(np.abs(pot)))
    cols = [c.ravel() for c in cols]
    rows = [r.ravel() * w for r in rows]
    pot = pot.ravel()

    def matvec(x):
        h = x[:m]
        out = _apply_p(geom, h.reshape(geom.grid_shape)).ravel() - pot * h
        for j in range(b):
            out = out - x[m + j] * cols[j]
        return np.concatenate([out, [float(np.dot(r, h)) for r in rows]])

    def precond(x):
        h = x[:m].reshape(geom.grid_shape)
        h = geom.inverse(geom.forward(h) / (mu + sigma))
        return np.concatenate([h.ravel(), x[m:]])

    A = LinearOperator((m + b, m + b), matvec=matvec, dtype=float)
    M = LinearOperator((m + b, m + b), matvec=precond, dtype=float)
    rhs = np.concatenate([rhs_u.ravel(), np.asarray(rhs_c, dtype=float)])
    sol, info = gmres(A, rhs, M=M, rtol=1e-13, atol=0.0, restart=200, maxiter=50)
    if info < 0 or not np.all(np.isfinite(sol)):
        raise SolverError(f"GMRES breakdown (info={info})")
    return sol[:m].reshape(geom.grid_shape), sol[m:]


# --------------------------------------------------------------------------
# Newton refinement

@dataclass
class NewtonResult:
    u: SpectralField
    lam: float
    iterations: int
    history: list
    converged: bool


def newton_refine(u, lam: float, background: BackgroundData, tol: float = 1e-11,
                  max_iter: int = 30, basin: float = 1e-1, volume: float | None = None) -> NewtonResult:
    """Newton-Krylov on the stationary equation bordered by one constraint.

    The border row is ``int f e^{nu} = k_n`` when ``k_n != 0``.  For
    ``k_n = 0`` the pair ``(u + c, lambda e^{-nc})`` is a family of solutions,
    so the volume ``int e^{nu}`` is pinned instead (to its input value unless
    ``volume`` is given).  Linear solves use GMRES preconditioned with
    ``(P0 + sigma)^{-1}`` on the ``u`` block.

    ``history`` holds ``residual`` after each iteration (index 0 is the
    input).  Iteration also stops when the residual stagnates at its roundoff
    floor; ``converged`` reports whether ``tol`` was reached.
    """
    geom = background.geometry
    _check_same(geom, u.geometry)
    n = geom.n
    f = background.f.values
    Q0 = background.Q0.values
    k = background.k_n
    v = np.array(_values(u), dtype=float)
    use_volume = k == 0.0
    if use_volume and volume is None:
        volume = geom.quad(np.exp(n * v))

    def F(v, lam):
        e = np.exp(n * v)
        r = _apply_p(geom, v) + Q0 - lam * f * e
        c = geom.quad(e) - volume if use_volume else geom.quad(f * e) - k
        return r, c, e

    def norm(r, c):
        return float(np.sqrt(geom.quad(r * r) + c * c))

    r, c, e = F(v, lam)
    hist = [norm(r, c)]
    if hist[0] > basin:
        raise SolverError(f"initial residual {hist[0]!r} outside the Newton basin ({basin!r})")
    it = 0
    while hist[-1] > tol and it < max_iter:
        it += 1
        fe = f * e
        row = (e if use_volume else fe) * n
        sol = _bordered_solve(geom, n * lam * fe, [fe], [row], -r, [-c])
        dv, dlam = sol[0], float(sol[1][0])
        step = 1.0
        best = hist[-1]
        for _ in range(20):
            v_try = v + step * dv
            lam_try = lam + step * dlam
            if n * np.max(np.abs(v_try)) < 700:
                r_t, c_t, e_t = F(v_try, lam_try)
                nt = norm(r_t, c_t)
                if nt < best or step < 1e-3:
                    break
            step *= 0.5
        else:
            raise SolverError("Newton line search failed")
        if not nt < best:
            # stagnation at roundoff: keep the better iterate and stop
            log.debug("newton stagnated at %r", best)
            break
        v, lam, r, c, e = v_try, lam_try, r_t, c_t, e_t
        hist.append(nt)
    if it >= max_iter and hist[-1] > tol:
        raise SolverError(f"Newton did not converge in {max_iter} iterations (residual {hist[-1]!r})")
    return NewtonResult(SpectralField(geom, geom.forward(v)), float(lam), len(hist) - 1, hist, hist[-1] <= tol)


# --------------------------------------------------------------------------
# direct minimization of the k_n = 0 problem

@dataclass
class MultiplierReport:
    """Multipliers of ``P0 u = alpha e^{nu} + beta f e^{nu}``."""

    alpha: float
    beta: float
    residual: float
    beta_quotient: float
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def shift(self) -> float:
        return float(np.log(self.beta)) if self.beta > 0 else float("nan")


def extract_multipliers(u, background: BackgroundData) -> MultiplierReport:
    """Least-squares ``(alpha, beta)`` in ``L^2(g0)`` plus the quotient check."""
    geom = background.geometry
    n = geom.n
    v = _values(u)
    e = np.exp(n * v)
    fe = background.f.values * e
    pu = _apply_p(geom, v)
    G = np.array([[geom.quad(e * e), geom.quad(e * fe)], [geom.quad(e * fe), geom.quad(fe * fe)]])
    b = np.array([geom.quad(e * pu), geom.quad(fe * pu)])
    alpha, beta = np.linalg.solve(G, b)
    res = _l2(geom, pu - alpha * e - beta * fe)
    beta_q = geom.quad(pu * fe) / geom.quad(fe * fe)
    return MultiplierReport(float(alpha), float(beta), res, float(beta_q))


def _retract(v, background, vol, tol):
    geom = background.geometry
    n = geom.n
    zero = BackgroundData(background.Q0, background.f, 0.0, background.synthetic)
    s = solve_shift(v, zero, tol)
    v = v + s * background.f.values
    c = np.log(vol / geom.quad(np.exp(n * v))) / n
    return v + c


def _kkt_newton(v, alpha, beta, background, vol, tol, hist, max_iter=20):
    geom = background.geometry
    n = geom.n
    f = background.f.values

    def F(v, alpha, beta):
        e = np.exp(n * v)
        r = _apply_p(geom, v) - (alpha + beta * f) * e
        return r, [geom.quad(f * e), geom.quad(e) - vol], e

    def norm(r, c):
        return float(np.sqrt(geom.quad(r * r) + c[0] ** 2 + c[1] ** 2))

    r, c, e = F(v, alpha, beta)
    best = norm(r, c)
    for _ in range(max_iter):
        if best <= 0.1 * tol:
            break
        fe = f * e
        dv, dx = _bordered_solve(geom, n * (alpha + beta * f) * e, [e, fe], [n * fe, n * e], -r, [-c[0], -c[1]])
        r_t, c_t, e_t = F(v + dv, alpha + dx[0], beta + dx[1])
        nt = norm(r_t, c_t)
        if not nt < best:
            break
        v, alpha, beta, r, c, e, best = v + dv, alpha + dx[0], beta + dx[1], r_t, c_t, e_t, nt
        hist.append(nt)
    return v


def direct_minimize(background: BackgroundData, seed: int | None = None, u0=None,
                                    tol: float = 1e-11, max_iter: int = 20000, newton_switch: float = 1e-6):
    """Minimize ``J[u] = int u P0 u`` on ``{int f e^{nu} = 0, int e^{nu} = vol}``.

    Projected gradient in the ``(P0 + 1)`` inner product with Armijo
    backtracking; after each trial the point is retracted onto both
    constraints (a shift along ``f`` for the first, then a constant for the
    second, which leaves the first intact).  Stops once the multiplier
    residual ``||P0 u - alpha e^{nu} - beta f e^{nu}||`` is below
    ``newton_switch``; Newton on the Lagrange system ``(u, alpha, beta)``
    then takes it to ``tol``, below the ``sqrt(eps)`` level at which the
    Armijo test on ``J`` loses resolution.

    Returns ``(u, MultiplierReport)``.  ``v = u + log(beta)/n`` then solves
    ``P0 v = f e^{nv}``.

    Raises
    ------
    InfeasibleConstraint
        ``f`` does not change sign, or ``int f >= 0``.
    SolverError
        Line search failure, non-convergence, or ``beta <= 0``.
    """
    geom = background.geometry
    n = geom.n
    vol = geom.volume
    f = background.f.values
    if background.k_n != 0.0 or np.any(background.Q0.values != 0.0):
        raise ValueError("direct minimization expects Q0 = 0 and k_n = 0")
    if not (f.max() > 0 > f.min()):
        raise InfeasibleConstraint("f must change sign")
    if not geom.quad(f) < 0:
        raise InfeasibleConstraint("f must have negative mean")
    mu = gjms_multiplier(geom).mu
    if u0 is not None:
        v = np.array(_values(u0), dtype=float)
    else:
        v = np.zeros(geom.grid_shape)
        if seed is not None:
            rng = np.random.default_rng(seed)
            hat = np.zeros(geom.spectral_shape, dtype=geom.coefficient_dtype)
            low = geom.laplace_eigs <= 4
            noise = rng.normal(size=hat.shape)
            if geom.kind == TORUS:
                noise = noise + 1j * rng.normal(size=hat.shape)
            hat[low] = 0.05 * noise[low]
            v = geom.inverse(hat)
    v = _retract(v, background, vol, 1e-14)

    def J(v):
        c = geom.forward(v)
        return float(np.sum(mu * np.abs(c) ** 2))

    def inner(a_hat, b_hat):
        return float(np.sum(((mu + 1.0) * np.conj(a_hat) * b_hat).real))

    Jv = J(v)
    tau = 1.0
    hist = []
    mult = extract_multipliers(GridField(geom, v), background)
    for it in range(1, max_iter + 1):
        if mult.residual <= newton_switch:
            break
        e = np.exp(n * v)
        c = geom.forward(v)
        # Riesz representers in the (P0 + 1) product
        grad = 2.0 * mu * c / (mu + 1.0)
        z = [geom.forward(e) / (mu + 1.0), geom.forward(f * e) / (mu + 1.0)]
        Gm = np.array([[inner(zi, zj) for zj in z] for zi in z])
        a = np.linalg.solve(Gm, [inner(zi, grad) for zi in z])
        d_hat = -(grad - a[0] * z[0] - a[1] * z[1])
        slope = -inner(d_hat, d_hat)
        d = geom.inverse(d_hat)
        tau = min(tau * 2.0, 1e3)
        for _ in range(60):
            try:
                cand = _retract(v + tau * d, background, vol, 1e-14)
                Jc = J(cand)
            except (InfeasibleConstraint, ArithmeticError):
                Jc = np.inf
            if Jc <= Jv + 1e-4 * tau * slope:
                break
            tau *= 0.5
        else:
            # J stalls near sqrt(eps) relative; hand over to Newton if close
            if mult.residual <= 1e3 * newton_switch:
                break
            raise SolverError("line search failed in direct minimization")
        v, Jv = cand, Jc
        mult = extract_multipliers(GridField(geom, v), background)
        hist.append(mult.residual)
    else:
        raise SolverError(f"direct minimization did not converge (residual {mult.residual!r})")
    v = _kkt_newton(v, mult.alpha, mult.beta, background, vol, tol, hist)
    mult = extract_multipliers(GridField(geom, v), background)
    if mult.residual > tol:
        raise SolverError(f"direct minimization stalled at residual {mult.residual!r}")
    mult.iterations = len(hist)
    mult.history = hist
    if not mult.beta > 0:
        raise SolverError(f"multiplier beta = {mult.beta!r} is not positive")
    return SpectralField(geom, geom.forward(v)), mult


# --------------------------------------------------------------------------
# second variation

@dataclass
class CoercivityReport:
    min_eigenvalue: float
    min_eigenvalue_h: float
    basis_size: int
    convention: str
    eigenvalues: np.ndarray = field(repr=False, default=None)


def _truncated_basis(geom, modes):
    """Orthonormal basis functions (nodes x modes) and their multipliers."""
    mu = gjms_multiplier(geom).mu
    if geom.kind == TORUS:
        N = geom.resolution
        freqs = np.fft.fftfreq(N, d=1.0 / N).astype(int)
        keep_axis = np.abs(freqs) <= modes
        ks = freqs[keep_axis]
        grids = np.meshgrid(*([ks] * geom.n), indexing="ij")
        K = np.stack([g.ravel() for g in grids], axis=1)
        coords = np.stack([c.ravel() for c in geom.coordinates()], axis=1)
        Phi = np.exp(1j * coords @ K.T) / np.sqrt(geom.volume)
        mus = np.sum(K.astype(float) ** 2, axis=1) ** (geom.n // 2)
        return Phi, mus
    Phi = geom._basis[:, : modes + 1]
    return Phi, mu[: modes + 1]


def hessian_coercivity(u, lam: float, background: BackgroundData, convention: str = "weighted",
                       modes: int | None = None, stationarity_tol: float = 1e-8) -> CoercivityReport:
    """Minimum of ``n int (h P0 h - n lambda f e^{nu} h^2)`` on the tangent space.

    ``convention="weighted"`` uses ``{h : int f e^{nu} h = 0}``, the
    linearization of the constraint set; ``"literal"`` uses
    ``{h : int f h = 0}``.  ``min_eigenvalue`` is per unit ``L^2`` norm and
    ``min_eigenvalue_h`` per unit ``H^{n/2}`` norm.  ``modes`` bounds
    ``|k|_inf`` on the torus (default ``N/4``) or the degree on the sphere
    (default ``L/2``).
    """
    if convention not in ("weighted", "literal"):
        raise ValueError(f"unknown tangent convention {convention!r}")
    geom = background.geometry
    res = residual(u, lam, background)
    if res > stationarity_tol:
        raise SolverError(f"input is not stationary (residual {res!r})")
    n = geom.n
    if modes is None:
        modes = geom.resolution // 4 if geom.kind == TORUS else geom.resolution // 2
    v = _values(u)
    e = np.exp(n * v)
    f = background.f.values
    Phi, mus = _truncated_basis(geom, modes)
    wts = geom.weights.ravel()
    pot = (n * lam * f * e).ravel() * wts
    M = Phi.conj().T @ (pot[:, None] * Phi)
    A = n * (np.diag(mus) - M)
    A = 0.5 * (A + A.conj().T)
    g = (f * e if convention == "weighted" else f).ravel() * wts
    a = Phi.conj().T @ g
    Z = null_space(a[None, :].conj())
    B = Z.conj().T @ A @ Z
    B = 0.5 * (B + B.conj().T)
    ev = eigh(B, eigvals_only=True)
    H = Z.conj().T @ np.diag(mus + 1.0) @ Z
    ev_h = eigh(B, 0.5 * (H + H.conj().T), eigvals_only=True)
    return CoercivityReport(float(ev[0]), float(ev_h[0]), int(B.shape[0]), convention, ev)
