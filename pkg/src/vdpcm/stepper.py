"""Semi-implicit Euler stepping solved by damped Newton.

Each step solves, for the new potentials ``(v1, v2, v0)``,

    (u_i(v_new) - u_i^prev) / dt + div_h J_i = 0,     i = 1, 2
    -lambda2 lap_h v0 = z1 u1 + z2 u2 + rho_hl

with edge mobilities and interface rate prefactors frozen at the previous
step and all electrochemical potentials implicit.  Unknowns are
interleaved per cell as ``(v1_K, v2_K, v0_K)`` which makes the Jacobian
banded with five sub- and super-diagonals.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded
from scipy.linalg.lapack import dgbsv

from . import discretization as disc
from . import energy
from . import physics
from .physics import ModelSpec, Variant

log = logging.getLogger(__name__)

_BAND = 5


class H5Error(ValueError):
    """Initial densities with unbounded chemical potentials."""


class InvariantViolation(AssertionError):
    """A state breaks a structural invariant (bounds, charge identity)."""


class SimulationFailure(RuntimeError):
    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class EnergyDecayError(SimulationFailure):
    """Total free energy increased beyond tolerance in a vDPCM run."""


@dataclass(frozen=True, eq=False)
class State:
    """Cell-centred densities and potentials at one time level."""

    time: float
    v1: np.ndarray
    v2: np.ndarray
    v0: np.ndarray
    traces: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    u0: np.ndarray

    @classmethod
    def from_potentials(cls, time, v1, v2, v0, spec: ModelSpec, mesh: disc.Mesh, M=None):
        v1 = mesh.check_field(v1, "v1").copy()
        v2 = mesh.check_field(v2, "v2").copy()
        v0 = mesh.check_field(v0, "v0").copy()
        u1 = physics.density(1, physics.truncate(v1, M), spec)
        u2 = physics.density(2, physics.truncate(v2, M), spec)
        u0 = physics.charge_density(u1, u2, spec)
        return cls(float(time), v1, v2, v0, disc.potential_traces(v0, spec, mesh), u1, u2, u0)

    def xi(self, i, spec):
        return (self.v1 if i == 1 else self.v2) + spec.z(i) * self.v0

    def u(self, i):
        return self.u1 if i == 1 else self.u2

    def max_abs_potential(self):
        return float(max(np.max(np.abs(self.v1)), np.max(np.abs(self.v2))))

    def check_invariants(self, spec, M=None, atol_charge=1e-13):
        """Raise :class:`InvariantViolation` if a structural invariant fails."""
        e1 = physics.density(1, physics.truncate(self.v1, M), spec)
        e2 = physics.density(2, physics.truncate(self.v2, M), spec)
        if not (np.array_equal(e1, self.u1) and np.array_equal(e2, self.u2)):
            raise InvariantViolation(f"t={self.time:.6g}: densities differ from ubar e(v)")
        err = float(np.max(np.abs(physics.charge_density(self.u1, self.u2, spec) - self.u0)))
        if err > atol_charge:
            raise InvariantViolation(f"t={self.time:.6g}: charge identity off by {err:.3e}")
        if not (np.all(self.u1 > 0) and np.all(self.u1 < spec.ubar1)):
            raise InvariantViolation(f"t={self.time:.6g}: u1 leaves (0, ubar1)")
        if not np.all(self.u2 > 0):
            raise InvariantViolation(f"t={self.time:.6g}: u2 not positive")

    def with_time(self, t):
        return dataclasses.replace(self, time=float(t))


@dataclass
class SolverConfig:
    dt: float = 1e-3
    newton_tol: float = 1e-10  # max norm of the weighted residual, see residual_weights
    newton_max_iter: int = 30
    armijo: float = 1e-4
    min_damping: float = 2.0 ** -12
    M: float | None = None
    mu: float | None = None
    steady_tol: float = 1e-6
    schemes: dict = field(default_factory=dict)
    implicit: bool = False
    jacobian: str = "analytic"
    dt_floor_factor: float = 2.0 ** -8
    restore_after: int = 4
    energy_tol_factor: float = 10.0

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be > 0, got {self.dt!r}")
        if not self.newton_tol > 0 or not self.steady_tol > 0:
            raise ValueError("tolerances must be > 0")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be >= 1")
        if self.M is not None and not self.M > 0:
            raise ValueError("truncation level M must be > 0")
        if self.mu is not None and not self.mu > 0:
            raise ValueError("regularization mu must be > 0")
        if self.jacobian not in ("analytic", "fd"):
            raise ValueError("jacobian must be 'analytic' or 'fd'")
        self.schemes = {int(k): disc.FluxScheme(v) for k, v in self.schemes.items()}

    @property
    def energy_tol(self):
        return self.energy_tol_factor * self.newton_tol

    def flux_options(self):
        return dict(schemes=self.schemes, mu=self.mu, M=self.M, implicit=self.implicit)


@dataclass
class StepReport:
    iterations: int = 0
    residual: float = math.inf
    damping_events: int = 0
    energy_decrement: float = 0.0
    diss_bulk: float = 0.0
    diss_boundary: float = 0.0
    accepted: bool = False
    dt: float = 0.0
    cond_mu_ok: bool = True


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

def initial_state(u1_in, u2_in, spec: ModelSpec, mesh: disc.Mesh, time=0.0):
    """Consistent state from admissible initial densities."""
    u1_in = mesh.check_field(u1_in, "u1_in")
    u2_in = mesh.check_field(u2_in, "u2_in")
    bad1 = np.flatnonzero(~((u1_in > 0) & (u1_in < spec.ubar1)))
    if bad1.size:
        k = int(bad1[0])
        raise H5Error(f"u1_in[{k}] = {float(u1_in[k])!r} is not in (0, ubar1={spec.ubar1}); "
                      "chemical potential would be unbounded")
    bad2 = np.flatnonzero(~((u2_in > 0) & np.isfinite(u2_in)))
    if bad2.size:
        k = int(bad2[0])
        raise H5Error(f"u2_in[{k}] = {float(u2_in[k])!r} is not > 0; chemical potential would be unbounded")
    v1 = physics.statistics_e_inv(1, u1_in / spec.ubar1)
    v2 = physics.statistics_e_inv(2, u2_in / spec.ubar2)
    u0 = physics.charge_density(physics.density(1, v1, spec), physics.density(2, v2, spec), spec)
    v0, _ = disc.solve_poisson(u0, spec, mesh)
    return State.from_potentials(time, v1, v2, v0, spec, mesh)


def equilibrium_state(spec: ModelSpec, mesh: disc.Mesh, tol=1e-13, max_iter=100):
    """Thermodynamic equilibrium for compatible interface data.

    Requires ``xi_i^0 == xi_i^1`` for both species; then ``xi_i`` is
    constant and ``v0`` solves the nonlinear Poisson-Boltzmann problem.
    """
    xis = []
    for i in physics.SPECIES:
        a, b = spec.xi_ext[i - 1]
        if abs(a - b) > 1e-12 * max(1.0, abs(a)):
            raise ValueError(f"species {i}: xi^0={a} and xi^1={b} admit no common equilibrium")
        xis.append(a)
    xi1, xi2 = xis
    lower, diag, upper, bc = disc.poisson_matrix(spec, mesh)
    h = mesh.h
    v0 = np.zeros(mesh.n_cells)

    def resid(v):
        u1 = physics.density(1, xi1 - spec.z1 * v, spec)
        u2 = physics.density(2, xi2 - spec.z2 * v, spec)
        lap = diag * v + lower * np.r_[0.0, v[:-1]] + upper * np.r_[v[1:], 0.0]
        return (lap - bc) / h - physics.charge_density(u1, u2, spec), u1, u2

    r, u1, u2 = resid(v0)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= tol:
            break
        e1p = u1 * (1.0 - u1 / spec.ubar1)
        dd = diag / h + spec.z1 ** 2 * e1p + spec.z2 ** 2 * u2
        ab = np.vstack([np.r_[0.0, upper[:-1]] / h, dd, np.r_[lower[1:], 0.0] / h])
        step = solve_banded((1, 1), ab, -r)
        alpha = 1.0
        norm = np.max(np.abs(r))
        while True:
            trial = resid(v0 + alpha * step)
            if np.all(np.isfinite(trial[0])) and np.max(np.abs(trial[0])) < norm or alpha < 1e-6:
                break
            alpha /= 2
        v0 = v0 + alpha * step
        r, u1, u2 = trial
    else:
        raise SimulationFailure("equilibrium Poisson-Boltzmann solve did not converge")
    return State.from_potentials(0.0, xi1 - spec.z1 * v0, xi2 - spec.z2 * v0, v0, spec, mesh)


# ---------------------------------------------------------------------------
# residual and Jacobian
# ---------------------------------------------------------------------------

def pack(state):
    return np.column_stack([state.v1, state.v2, state.v0]).ravel()


def _unpack(x):
    x = x.reshape(-1, 3)
    return x[:, 0], x[:, 1], x[:, 2]


def _divergence(interior, outward):
    # net outflow per cell, boundary cells include the interface exchange
    out = np.empty(interior.size + 1)
    out[:-1] = interior
    out[-1] = outward[1]
    inn = np.empty(interior.size + 1)
    inn[1:] = interior
    inn[0] = -outward[0]
    return out - inn


def assemble_residual(x, state_prev, spec: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig):
    """Residual of one step at unknowns ``x`` (interleaved potentials).

    Rows are scaled per unit length: species rows are density rates and
    Poisson rows are charge densities.  This is the reference evaluation
    through :func:`discretization.step_fluxes`; Newton uses the equivalent
    :class:`StepProblem`.  Returns ``(residual, new_state, fluxes)``.
    """
    v1, v2, v0 = _unpack(np.asarray(x, dtype=float))
    new = State.from_potentials(state_prev.time, v1, v2, v0, spec, mesh, M=cfg.M)
    fluxes = disc.step_fluxes(state_prev, new, spec, mesh, **cfg.flux_options())
    return _residual_from(new, state_prev, fluxes, spec, mesh, cfg.dt), new, fluxes


def _residual_from(new, prev, fluxes, spec, mesh, dt):
    h = mesh.h
    res = np.empty((mesh.n_cells, 3))
    for i in physics.SPECIES:
        interior, outward = fluxes[i]
        res[:, i - 1] = (new.u(i) - prev.u(i)) / dt + _divergence(interior, outward) / h
    lower, diag, upper, bc = disc.poisson_matrix(spec, mesh)
    v0 = new.v0
    lap = diag * v0
    lap[1:] += lower[1:] * v0[:-1]
    lap[:-1] += upper[:-1] * v0[1:]
    res[:, 2] = (lap - bc) / h - new.u0
    return res.ravel()


class _Banded:
    """Accumulates entries of an ``n x n`` matrix with bandwidth ``_BAND``."""

    def __init__(self, n, ab=None):
        self.n = n
        self.ab = np.zeros((2 * _BAND + 1, n)) if ab is None else ab

    def copy(self):
        return _Banded(self.n, self.ab.copy())

    def add(self, rows, cols, vals):
        # callers never repeat a (row, col) pair within one call
        flat = self.ab.reshape(-1)
        flat[(_BAND + np.asarray(rows) - cols) * self.n + cols] += vals

    def add_many(self, entries):
        """Add a list of ``(rows, cols, vals)`` triples; duplicates accumulate."""
        flat = np.concatenate([(_BAND + np.asarray(r) - c) * self.n + c for r, c, _ in entries])
        vals = np.concatenate([np.broadcast_to(v, np.shape(r)) for r, _, v in entries])
        self.ab += np.bincount(flat, weights=vals, minlength=self.ab.size).reshape(self.ab.shape)

    def matvec(self, x):
        y = np.zeros(self.n)
        for k in range(2 * _BAND + 1):
            off = _BAND - k  # column - row
            if off >= 0:
                y[: self.n - off] += self.ab[k, off:] * x[off:]
            else:
                y[-off:] += self.ab[k, : self.n + off] * x[: self.n + off]
        return y

    def solve(self, rhs):
        # LAPACK gbsv wants _BAND extra rows on top for the LU fill-in
        ab = np.empty((3 * _BAND + 1, self.n))
        ab[_BAND:] = self.ab
        lu, piv, x, info = dgbsv(_BAND, _BAND, ab, rhs, overwrite_ab=1)
        if info != 0:
            raise np.linalg.LinAlgError(f"singular step Jacobian (info={info})")
        return x


def _e_prime(i, v, spec, M):
    vt = physics.truncate(v, M)
    u = physics.density(i, vt, spec)
    d = u * (1.0 - u / spec.ubar1) if i == 1 else u
    if M is not None:
        d = np.where(np.abs(v) < M, d, 0.0)
    return d


def _band_add(ab, rc, rs, cc, cs, vals):
    # entry (3 (K + rs) + rc, 3 (K + cs) + cc) for K = 0 .. len(vals) - 1
    off = 3 * (cs - rs) + cc - rc
    start = 3 * cs + cc
    ab[_BAND - off, start:start + 3 * len(vals):3] += vals


class StepProblem:
    """Nonlinear system of one time step with the frozen coefficients cached.

    With semi-implicit freezing the edge mobilities, the rate prefactors
    and the linear part of the Jacobian do not change during the Newton
    iteration, so they are assembled once here.
    """

    def __init__(self, state_prev, spec: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig):
        self.prev, self.spec, self.mesh, self.cfg = state_prev, spec, mesh, cfg
        self.schemes = disc.resolve_schemes(spec, cfg.schemes)
        self.generic = cfg.implicit or cfg.jacobian == "fd"
        n, h = mesh.n_cells, mesh.h
        self.lower, self.diag, self.upper, self.bc = disc.poisson_matrix(spec, mesh)
        cells = np.arange(n)
        self.idx = {1: 3 * cells, 2: 3 * cells + 1, 0: 3 * cells + 2}
        if self.generic:
            return
        M = cfg.M
        self.legacy_cation = spec.variant is Variant.LEGACY
        self.legacy_metal = spec.variant is Variant.LEGACY
        self.mob = {}
        self.r = {}
        for i in physics.SPECIES:
            vf = physics.truncate(state_prev.v1 if i == 1 else state_prev.v2, M)
            if not (i == 1 and self.legacy_cation):
                self.mob[i] = disc.edge_mobility(i, self.schemes[i], vf, state_prev.v0, spec) / h
            self.r[i] = [physics.kinetic_prefactor_r(i, g, vf[k], spec) for g, k in ((0, 0), (1, -1))]
        base = _Banded(3 * n)
        ab = base.ab
        ab[_BAND, 2::3] = self.diag / h
        ab[_BAND + 3, 2:-3:3] = self.lower[1:] / h
        ab[_BAND - 3, 5::3] = self.upper[:-1] / h
        for i, mob in self.mob.items():
            c, z, w = i - 1, spec.z(i), mob / h
            # edge K|L couples rows (i, K), (i, L) to (i, K), (i, L), (v0, K), (v0, L)
            for rs, sign in ((0, 1.0), (1, -1.0)):
                for cc, cs, dF in ((c, 0, w), (c, 1, -w), (2, 0, z * w), (2, 1, -z * w)):
                    _band_add(ab, c, rs, cc, cs, sign * dF)
        self.base = base

    def evaluate(self, x):
        """Residual, new state and step fluxes at ``x``."""
        if self.generic:
            return assemble_residual(x, self.prev, self.spec, self.mesh, self.cfg)
        spec, mesh, cfg = self.spec, self.mesh, self.cfg
        v1, v2, v0 = _unpack(np.asarray(x, dtype=float))
        new = State.from_potentials(self.prev.time, v1, v2, v0, spec, mesh, M=cfg.M)
        fluxes = {}
        for i in physics.SPECIES:
            v = v1 if i == 1 else v2
            if i == 1 and self.legacy_cation:
                u = new.u1
                interior = disc.sg_edge_flux(u[:-1], u[1:], spec.z1 * (v0[1:] - v0[:-1]), spec.d1, mesh.h)
            else:
                xi = v + spec.z(i) * v0
                interior = self.mob[i] * (xi[:-1] - xi[1:])
            outward = np.empty(2)
            for g, k in ((0, 0), (1, -1)):
                if i == 2 and g == 1 and self.legacy_metal:
                    outward[g] = physics.legacy_electron_metal_flux(spec.ubar2 * math.exp(v[k]), v0[k], spec)
                else:
                    y = v[k] + spec.z(i) * v0[k] - spec.xi_ext[i - 1][g]
                    outward[g] = self.r[i][g] * physics.kinetic_g_regularized(i, g, y, cfg.mu)
            fluxes[i] = (interior, outward)
        return _residual_from(new, self.prev, fluxes, spec, mesh, cfg.dt), new, fluxes

    def jacobian(self, x):
        if self.generic:
            return _fd_jacobian(np.asarray(x, dtype=float), self)
        spec, mesh, cfg = self.spec, self.mesh, self.cfg
        v1, v2, v0 = _unpack(np.asarray(x, dtype=float))
        n, h, dt, M = mesh.n_cells, mesh.h, cfg.dt, cfg.M
        idx = self.idx
        J = self.base.copy()
        for i in physics.SPECIES:
            ep = _e_prime(i, v1 if i == 1 else v2, spec, M)
            # diagonal and the Poisson row two or one places above it
            J.ab[_BAND, i - 1::3] += ep / dt
            J.ab[_BAND + 3 - i, i - 1::3] -= spec.z(i) * ep
        if self.legacy_cation:
            K, L = np.arange(n - 1), np.arange(1, n)
            z = spec.z1
            u = physics.density(1, physics.truncate(v1, M), spec)
            du = _e_prime(1, v1, spec, M)
            dphi = z * (v0[L] - v0[K])
            dF_dphi = spec.d1 / h * (disc.bernoulli_prime(dphi) * u[K] + disc.bernoulli_prime(-dphi) * u[L])
            entries = []
            for var, where, dF in ((idx[1], K, spec.d1 / h * disc.bernoulli(dphi) * du[K]),
                                   (idx[1], L, -spec.d1 / h * disc.bernoulli(-dphi) * du[L]),
                                   (idx[0], K, -z * dF_dphi), (idx[0], L, z * dF_dphi)):
                entries.append((idx[1][K], var[where], dF / h))
                entries.append((idx[1][L], var[where], -dF / h))
            J.add_many(entries)
        for i in physics.SPECIES:
            z = spec.z(i)
            vi = v1 if i == 1 else v2
            for g, k in ((0, 0), (1, n - 1)):
                if i == 2 and g == 1 and self.legacy_metal:
                    m, kk = spec.metal_rates()
                    d_vi = m * spec.ubar2 * math.exp(vi[k])
                    d_v0 = kk * spec.ubar2_met * spec.z2 * physics.statistics_e(1, spec.z2 * (spec.V - v0[k]))
                else:
                    y = vi[k] + z * v0[k] - spec.xi_ext[i - 1][g]
                    gp = physics.kinetic_g_regularized_prime(i, g, y, cfg.mu)
                    d_vi, d_v0 = self.r[i][g] * gp, z * self.r[i][g] * gp
                J.ab[_BAND, idx[i][k]] += d_vi / h
                J.ab[_BAND + idx[i][k] - idx[0][k], idx[0][k]] += d_v0 / h
        return J


def assemble_jacobian(x, state_prev, spec: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig):
    """Jacobian of the step residual in banded storage.

    Analytic for the semi-implicit scheme; colored finite differences for
    the fully implicit option or when ``cfg.jacobian == "fd"``.
    """
    return StepProblem(state_prev, spec, mesh, cfg).jacobian(x)


def _fd_jacobian(x, problem, eps=1e-7):
    # columns 2*_BAND+1 apart never share a row
    n = x.size
    J = _Banded(n)
    r0 = problem.evaluate(x)[0]
    width = 2 * _BAND + 1
    rows_all = np.arange(n)
    for color in range(width):
        cols = np.arange(color, n, width)
        step = eps * np.maximum(1.0, np.abs(x[cols]))
        xp = x.copy()
        xp[cols] += step
        dr = problem.evaluate(xp)[0] - r0
        for c, s in zip(cols, step):
            rows = rows_all[max(0, c - _BAND): c + _BAND + 1]
            J.add(rows, np.full(rows.size, c), dr[rows] / s)
    return J


def jacobian_vector_product(x, direction, state_prev, spec, mesh, cfg):
    return assemble_jacobian(x, state_prev, spec, mesh, cfg).matvec(np.asarray(direction, dtype=float))


# ---------------------------------------------------------------------------
# Newton and time loop
# ---------------------------------------------------------------------------

def _norm(r, w):
    return float(np.max(np.abs(r * w))) if np.all(np.isfinite(r)) else math.inf


def residual_weights(n_cells, dt):
    """Row weights of the stopping test: species rows in increment form (times ``dt``)."""
    return np.tile([dt, dt, 1.0], n_cells)


def newton_solve(state_prev, spec: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig, guess=None):
    """One time step by damped Newton with Armijo backtracking.

    Returns ``(new_state, report, fluxes)``; ``report.accepted`` is False
    when the iteration failed (the caller decides about retrying).
    """
    report = StepReport(dt=cfg.dt)
    problem = StepProblem(state_prev, spec, mesh, cfg)
    if guess is None:
        x = pack(state_prev)
    else:
        x = np.array(guess, dtype=float) if isinstance(guess, np.ndarray) else pack(guess)
    w = residual_weights(mesh.n_cells, cfg.dt)
    r, new, fluxes = problem.evaluate(x)
    norm = _norm(r, w)
    while norm > cfg.newton_tol:
        if report.iterations >= cfg.newton_max_iter or not math.isfinite(norm):
            report.residual = norm
            return new, report, fluxes
        report.iterations += 1
        try:
            delta = problem.jacobian(x).solve(-r)
        except (np.linalg.LinAlgError, ValueError):
            report.residual = norm
            return new, report, fluxes
        alpha = 1.0
        while True:
            x_try = x + alpha * delta
            with np.errstate(over="ignore", invalid="ignore"):
                r_try, new_try, fl_try = problem.evaluate(x_try)
            n_try = _norm(r_try, w)
            if n_try <= (1.0 - cfg.armijo * alpha) * norm or n_try <= cfg.newton_tol:
                break
            alpha /= 2.0
            report.damping_events += 1
            if alpha < cfg.min_damping:
                report.residual = norm
                return new, report, fluxes
        x, r, new, fluxes, norm = x_try, r_try, new_try, fl_try, n_try
    report.residual = norm
    report.accepted = True
    return new.with_time(state_prev.time + cfg.dt), report, fluxes


def detect_steady(state_prev, state_new, cfg: SolverConfig, spec=None, mesh=None):
    """Density rates and spatial variation of the total current below ``steady_tol``."""
    dt = state_new.time - state_prev.time
    if dt <= 0:
        dt = cfg.dt
    rate = max(float(np.max(np.abs(state_new.u1 - state_prev.u1))),
               float(np.max(np.abs(state_new.u2 - state_prev.u2)))) / dt
    if rate > cfg.steady_tol:
        return False
    if spec is None or mesh is None:
        return True
    from .experiments import total_current
    _, variation = total_current(state_new, spec, mesh, cfg)
    return variation <= cfg.steady_tol


def _cond_mu_ok(cfg, spec, c1):
    if cfg.M is None or cfg.mu is None:
        return True
    bound = cfg.M - max(abs(spec.z(i)) * c1 + max(abs(x) for x in spec.xi_ext[i - 1]) for i in physics.SPECIES)
    return cfg.mu <= bound


def advance(state, spec: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig, t_end, ledger=None, *,
            stop=None, on_step=None, reports=None):
    """Integrate from ``state.time`` to ``t_end``.

    Failed steps are retried with halved ``dt`` down to
    ``dt * dt_floor_factor``; the nominal ``dt`` is restored after
    ``restore_after`` consecutive successes.  With a ledger in vDPCM mode an
    increase of the total free energy beyond ``cfg.energy_tol`` aborts the
    run.  ``stop(prev, new)`` may end the run early.
    """
    if not t_end > state.time:
        raise ValueError(f"t_end={t_end} must exceed the current time {state.time}")
    if ledger is not None and len(ledger) == 0:
        ledger.start(state, spec, mesh)
    dt_nominal = cfg.dt
    dt = dt_nominal
    dt_floor = dt_nominal * cfg.dt_floor_factor
    streak = 0
    c1 = disc.h1_norm(state.v0, state.traces, mesh)
    check_energy = ledger is not None and spec.variant is Variant.VDPCM
    last = None
    step_cfg = None
    seg = None
    while state.time < t_end:
        remaining = t_end - state.time
        step_dt = remaining if remaining <= dt * (1 + 1e-9) else dt
        if step_cfg is None or step_cfg.dt != step_dt:
            step_cfg = dataclasses.replace(cfg, dt=step_dt)
        guess = None
        if last is not None and abs(last[0] - step_dt) <= 1e-12 * step_dt:
            # linear extrapolation of the previous two steps
            guess = 2.0 * pack(state) - last[1]
        new, report, fluxes = newton_solve(state, spec, mesh, step_cfg, guess=guess)
        if not report.accepted and guess is not None:
            new, report, fluxes = newton_solve(state, spec, mesh, step_cfg)
        if not report.accepted:
            dt /= 2.0
            streak = 0
            log.debug("step at t=%g rejected (residual %.3e), dt -> %g", state.time, report.residual, dt)
            if dt < dt_floor * (1 - 1e-12):
                raise SimulationFailure(
                    f"Newton failed at t={state.time:.6g} with dt down to {dt * 2:.3g}", last_state=state)
            continue
        if step_dt == remaining:
            new = new.with_time(t_end)
        else:
            # count steps of equal size so times do not accumulate rounding
            if seg is None or seg[1] != step_dt or seg[3] != state.time:
                seg = [state.time, step_dt, 0, None]
            seg[2] += 1
            new = new.with_time(seg[0] + seg[2] * step_dt)
            seg[3] = new.time
        c1 = max(c1, disc.h1_norm(new.v0, new.traces, mesh))
        report.cond_mu_ok = _cond_mu_ok(cfg, spec, c1)
        if not report.cond_mu_ok:
            log.warning("mu=%g violates the regularization bound at t=%g", cfg.mu, new.time)
        if ledger is not None:
            fo = step_cfg.flux_options()
            g0, g1 = energy.boundary_energy_increment(state, new, step_dt, spec, mesh, fluxes=fluxes, **fo)
            bulk, bdry = energy.dissipation_rates(state, new, step_dt, spec, mesh, fluxes=fluxes, **fo)
            psi_new = energy.helmholtz_energy(new.u1, new.u2, spec, mesh)
            breg = (ledger.psi[-1] - psi_new
                    - energy.pairing(state, new, mesh) + energy.pairing(new, new, mesh))
            before = ledger.last_psi_tot()
            ledger.append(new.time, new, spec, mesh, g0, g1, bulk, bdry, breg, psi=psi_new)
            report.energy_decrement = before - ledger.last_psi_tot()
            report.diss_bulk, report.diss_boundary = bulk, bdry
            if check_energy and -report.energy_decrement > cfg.energy_tol:
                raise EnergyDecayError(
                    f"total free energy rose by {-report.energy_decrement:.3e} at t={new.time:.6g} "
                    f"(tolerance {cfg.energy_tol:.1e})", last_state=state)
        if reports is not None:
            reports.append(report)
        last = (step_dt, pack(state))
        prev, state = state, new
        if on_step is not None:
            on_step(prev, state, report)
        streak += 1
        if dt < dt_nominal and streak >= cfg.restore_after:
            dt = min(dt_nominal, 2.0 * dt)
            streak = 0
        if stop is not None and stop(prev, state):
            break
    return state
