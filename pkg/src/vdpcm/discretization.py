"""Uniform 1D finite volumes: mesh, Robin Poisson solve and two-point fluxes.

Edge fluxes are oriented from cell ``K`` to cell ``K+1`` (positive means
transport towards ``x = 1``).  Boundary fluxes are returned as
``J . nu`` with the outward normal, i.e. positive when carriers leave the
oxide layer.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dgttrf, dgttrs
from scipy.special import exprel

from . import physics
from .physics import ModelSpec, Variant


class FluxScheme(str, enum.Enum):
    SCHARFETTER_GUMMEL = "scharfetter-gummel"
    SQRA = "sqra-geometric"
    CENTERED = "centered"


DEFAULT_SCHEMES = {1: FluxScheme.SQRA, 2: FluxScheme.SCHARFETTER_GUMMEL}


@dataclass(frozen=True)
class Mesh:
    """Uniform cell layout of ``(0, 1)``."""

    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            raise ValueError(f"mesh needs at least 2 cells, got {self.n_cells!r}")

    @property
    def h(self):
        return 1.0 / self.n_cells

    @property
    def centers(self):
        return (np.arange(self.n_cells) + 0.5) * self.h

    @property
    def faces(self):
        return np.arange(self.n_cells + 1) * self.h

    def check_field(self, field, name="field"):
        field = np.asarray(field, dtype=float)
        if field.shape != (self.n_cells,):
            raise ValueError(f"{name} has shape {field.shape}, mesh has {self.n_cells} cells")
        return field


# ---------------------------------------------------------------------------
# Poisson with Robin conditions
# ---------------------------------------------------------------------------

def _boundary_conductance(spec, mesh, gamma):
    # half cell in series with the capacitor: eliminates the trace unknown
    c = 2.0 * spec.lambda2 / mesh.h
    beta = spec.beta(gamma)
    return c * beta / (c + beta), c * spec.f(gamma) / (c + beta)


@functools.lru_cache(maxsize=64)
def poisson_matrix(spec: ModelSpec, mesh: Mesh):
    """Tridiagonal operator of the discrete Poisson problem.

    Returns ``(lower, diag, upper, bc)`` such that row ``K`` reads
    ``lower[K] v[K-1] + diag[K] v[K] + upper[K] v[K+1] = h u0[K] + bc[K]``.
    """
    n, h = mesh.n_cells, mesh.h
    a = spec.lambda2 / h
    lower = np.full(n, -a)
    upper = np.full(n, -a)
    lower[0] = 0.0
    upper[-1] = 0.0
    diag = np.full(n, 2.0 * a)
    bc = np.zeros(n)
    for gamma, k in ((0, 0), (1, n - 1)):
        g_eff, f_eff = _boundary_conductance(spec, mesh, gamma)
        diag[k] = a + g_eff
        bc[k] = f_eff
    for arr in (lower, diag, upper, bc):
        arr.setflags(write=False)
    return lower, diag, upper, bc


@functools.lru_cache(maxsize=64)
def _poisson_factor(spec: ModelSpec, mesh: Mesh):
    lower, diag, upper, _ = poisson_matrix(spec, mesh)
    dl, d, du, du2, ipiv, info = dgttrf(lower[1:], diag, upper[:-1])
    if info != 0:
        raise ArithmeticError("singular Poisson operator")
    return dl, d, du, du2, ipiv


def potential_traces(v0, spec: ModelSpec, mesh: Mesh):
    """Boundary values of ``v0`` from the Robin ghost relation."""
    c = 2.0 * spec.lambda2 / mesh.h
    t0 = (spec.f0 + c * v0[0]) / (spec.beta0 + c)
    t1 = (spec.f1 + c * v0[-1]) / (spec.beta1 + c)
    return np.array([t0, t1])


def solve_poisson(u0, spec: ModelSpec, mesh: Mesh):
    """Solve ``-lambda2 v0'' = u0`` with ``lambda2 dv0/dnu + beta v0 = f``.

    Returns cell values and the two boundary traces.
    """
    u0 = mesh.check_field(u0, "u0")
    bc = poisson_matrix(spec, mesh)[3]
    dl, d, du, du2, ipiv = _poisson_factor(spec, mesh)
    v0, info = dgttrs(dl, d, du, du2, ipiv, mesh.h * u0 + bc)
    if not np.all(np.isfinite(v0)):
        raise ArithmeticError("Poisson solve produced non-finite values")
    return v0, potential_traces(v0, spec, mesh)


def dirichlet_energy(v0, traces, spec: ModelSpec, mesh: Mesh):
    """``lambda2/2 int |v0'|^2 + sum beta/2 v0(G)^2`` with two-point gradients."""
    h = mesh.h
    grad = np.diff(v0) / h
    c = 2.0 * spec.lambda2 / h
    interior = 0.5 * spec.lambda2 * h * np.sum(grad ** 2)
    half = 0.5 * c * ((v0[0] - traces[0]) ** 2 + (v0[-1] - traces[1]) ** 2)
    cap = 0.5 * (spec.beta0 * traces[0] ** 2 + spec.beta1 * traces[1] ** 2)
    return interior + half + cap


def h1_norm(v0, traces, mesh: Mesh):
    """``(1/2 int |w'|^2 + 1/2 sum w(G)^2)^(1/2)`` on the discrete field."""
    h = mesh.h
    interior = h * np.sum(np.square(np.diff(v0) / h))
    half = (2.0 / h) * ((v0[0] - traces[0]) ** 2 + (traces[1] - v0[-1]) ** 2)
    return float(np.sqrt(0.5 * (interior + half) + 0.5 * (traces[0] ** 2 + traces[1] ** 2)))


# ---------------------------------------------------------------------------
# two-point fluxes
# ---------------------------------------------------------------------------

_SERIES_CUT = 1e-4


def bernoulli(x):
    """``B(x) = x / (e^x - 1)`` with ``B(0) = 1``."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    xs = np.where(small, 1.0, x)
    with np.errstate(over="ignore"):
        big = np.where(xs > 700.0, xs * np.exp(-np.minimum(xs, 745.0)), xs / np.expm1(np.minimum(xs, 700.0)))
    out = np.where(small, 1.0 - x / 2.0 + x * x / 12.0, big)
    return out if np.ndim(out) else float(out)


def bernoulli_prime(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    xs = np.where(small, 1.0, np.clip(x, -700.0, 700.0))
    em = np.expm1(xs)
    # (e^x - 1 - x e^x) / (e^x - 1)^2 written as B(x)/x * (1 - B(-x))
    b = xs / em
    big = b / xs * (1.0 - xs - b)
    out = np.where(small, -0.5 + x / 6.0, big)
    return out if np.ndim(out) else float(out)


def sg_edge_flux(u_K, u_L, dv0, d, h):
    """Scharfetter-Gummel flux of ``J = -d (u' + u phi')`` across one edge.

    ``dv0`` is the drift potential jump ``z (v0_L - v0_K)``.  Exact for the
    equilibrium ratio ``u_L / u_K = exp(-dv0)``.
    """
    return d / h * (bernoulli(dv0) * np.asarray(u_K) - bernoulli(-np.asarray(dv0)) * np.asarray(u_L))


def sqra_edge_flux(v1_K, v1_L, xi_K, xi_L, spec: ModelSpec, h):
    """Cation flux with geometric-mean mobility times the potential jump."""
    sig = np.sqrt(physics.mobility_sigma(1, v1_K, spec) * physics.mobility_sigma(1, v1_L, spec))
    return sig / h * (np.asarray(xi_K) - np.asarray(xi_L))


def centered_edge_flux(sigma_K, sigma_L, xi_K, xi_L, h):
    return 0.5 * (np.asarray(sigma_K) + np.asarray(sigma_L)) / h * (np.asarray(xi_K) - np.asarray(xi_L))


def sg_edge_mobility(v_K, v_L, v0_K, v0_L, z, d, ubar):
    """Edge mobility that turns the SG flux into ``mob * (xi_K - xi_L) / h``.

    Valid for Boltzmann statistics ``u = ubar e^v``:
    ``mob = d u_L exprel(xi_K - xi_L) / exprel(phi_K - phi_L)`` with
    ``phi = z v0``.
    """
    phi_K, phi_L = z * v0_K, z * v0_L
    dxi = (v_K + phi_K) - (v_L + phi_L)
    return d * ubar * np.exp(v_L) * exprel(dxi) / exprel(phi_K - phi_L)


def edge_mobility(i, scheme, v, v0, spec: ModelSpec):
    """Mobility on each interior edge for potentials ``v`` (species) and ``v0``."""
    scheme = FluxScheme(scheme)
    vK, vL = v[:-1], v[1:]
    if scheme is FluxScheme.SQRA:
        return np.sqrt(physics.mobility_sigma(i, vK, spec) * physics.mobility_sigma(i, vL, spec))
    if scheme is FluxScheme.CENTERED:
        return 0.5 * (physics.mobility_sigma(i, vK, spec) + physics.mobility_sigma(i, vL, spec))
    if i == 1:
        raise ValueError("cation Scharfetter-Gummel flux is only defined in u1 form (legacy variant)")
    return sg_edge_mobility(vK, vL, v0[:-1], v0[1:], spec.z(i), spec.d(i), spec.ubar(i))


def interior_fluxes(i, scheme, v, v0, spec: ModelSpec, mesh: Mesh):
    """Edge fluxes of species ``i`` evaluated at a single potential set."""
    xi = v + spec.z(i) * v0
    if i == 1 and spec.variant is Variant.LEGACY:
        u = physics.density(1, v, spec)
        return sg_edge_flux(u[:-1], u[1:], spec.z1 * (v0[1:] - v0[:-1]), spec.d1, mesh.h)
    return edge_mobility(i, scheme, v, v0, spec) * (xi[:-1] - xi[1:]) / mesh.h


def boundary_flux(i, gamma, state, spec: ModelSpec, mu=None, prev=None, M=None):
    """Outward flux ``J_i . nu`` through interface ``gamma``.

    Potentials at the interface are the adjacent-cell values.  The rate
    prefactor ``r`` is evaluated at ``prev`` when given (semi-implicit
    freezing), otherwise at ``state``.
    """
    k = 0 if gamma == 0 else -1
    v_i = np.asarray(state.v1 if i == 1 else state.v2)[k]
    v0 = np.asarray(state.v0)[k]
    if i == 2 and gamma == 1 and spec.variant is Variant.LEGACY:
        return physics.legacy_electron_metal_flux(spec.ubar2 * np.exp(v_i), v0, spec)
    src = state if prev is None else prev
    v_r = np.asarray(src.v1 if i == 1 else src.v2)[k]
    r = physics.kinetic_prefactor_r(i, gamma, physics.truncate(v_r, M), spec)
    xi = v_i + spec.z(i) * v0
    return r * physics.kinetic_g_regularized(i, gamma, xi - spec.xi_ext[i - 1][gamma], mu)


def resolve_schemes(spec: ModelSpec, schemes=None):
    """Per-species flux schemes with defaults and variant constraints."""
    out = dict(DEFAULT_SCHEMES)
    for i, s in (schemes or {}).items():
        out[int(i)] = FluxScheme(s)
    if spec.variant is Variant.LEGACY:
        # the cation scheme setting applies to vDPCM only
        out[1] = FluxScheme.SCHARFETTER_GUMMEL
    elif out[1] is FluxScheme.SCHARFETTER_GUMMEL:
        raise ValueError("vDPCM cations have a nonlinear mobility; use sqra-geometric or centered")
    return out


def step_fluxes(prev, new, spec: ModelSpec, mesh: Mesh, *, schemes=None, mu=None, M=None,
                implicit=False):
    """Fluxes of one semi-implicit step.

    Mobilities and rate prefactors are frozen at ``prev`` (at ``new`` when
    ``implicit``); electrochemical potentials are taken from ``new``.  The
    legacy cation drift-diffusion flux and the legacy electron/metal law
    have no frozen-mobility form and are always implicit.

    Returns ``{i: (interior_fluxes, outward_boundary_fluxes)}``.
    """
    schemes = resolve_schemes(spec, schemes)
    frozen = new if implicit else prev
    out = {}
    for i in physics.SPECIES:
        v_new = new.v1 if i == 1 else new.v2
        if i == 1 and spec.variant is Variant.LEGACY:
            u = physics.density(1, physics.truncate(v_new, M), spec)
            interior = sg_edge_flux(u[:-1], u[1:], spec.z1 * (new.v0[1:] - new.v0[:-1]), spec.d1, mesh.h)
        else:
            v_fr = frozen.v1 if i == 1 else frozen.v2
            mob = edge_mobility(i, schemes[i], physics.truncate(v_fr, M), frozen.v0, spec)
            xi = v_new + spec.z(i) * new.v0
            interior = mob * (xi[:-1] - xi[1:]) / mesh.h
        bnd = np.array([boundary_flux(i, g, new, spec, mu=mu, prev=frozen, M=M) for g in physics.BOUNDARIES])
        out[i] = (interior, bnd)
    return out
