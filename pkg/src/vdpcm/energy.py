"""Free energies, dissipation rates and the per-step energy ledger.

All quadratures use the same two-point gradients and cell values as the
finite-volume scheme, so the discrete energy balance of a time step can be
checked term by term.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from . import discretization as disc
from . import physics
from .physics import ModelSpec

LEDGER_COLUMNS = ("t", "phi", "psi", "psi_g0", "psi_g1", "psi_tot",
                  "diss_bulk", "diss_boundary", "diss_time")


def phi_species(i, v):
    """Primitive of ``e_i`` vanishing at 0."""
    v = np.asarray(v, dtype=float)
    if i == 1:
        out = np.logaddexp(0.0, v) - math.log(2.0)
    else:
        out = np.expm1(v)
    return out if np.ndim(out) else float(out)


def psi_species(i, w):
    """Convex conjugate of :func:`phi_species`, ``+inf`` outside its domain."""
    w = np.asarray(w, dtype=float)
    with np.errstate(invalid="ignore"):
        if i == 1:
            inside = (w >= 0) & (w <= 1)
            wc = np.clip(w, 0.0, 1.0)
            val = xlogy(wc, wc) + xlogy(1.0 - wc, 1.0 - wc) + math.log(2.0)
        else:
            inside = w >= 0
            wc = np.maximum(w, 0.0)
            val = xlogy(wc, wc) - wc + 1.0
    out = np.where(inside, val, np.inf)
    return out if np.ndim(out) else float(out)


def landau_energy(v0, traces, v1, v2, spec: ModelSpec, mesh: disc.Mesh):
    """Discrete Landau free energy of a potential set."""
    h = mesh.h
    bulk = (spec.ubar1 * np.sum(phi_species(1, v1)) + spec.ubar2 * np.sum(phi_species(2, v2))) * h
    field_part = disc.dirichlet_energy(np.asarray(v0), traces, spec, mesh)
    return float(bulk + field_part - spec.f0 * traces[0] - spec.f1 * traces[1])


def helmholtz_energy(u1, u2, spec: ModelSpec, mesh: disc.Mesh):
    """Discrete Helmholtz free energy; solves the Robin Poisson problem for ``u0``."""
    u1 = mesh.check_field(u1, "u1")
    u2 = mesh.check_field(u2, "u2")
    v0, traces = disc.solve_poisson(physics.charge_density(u1, u2, spec), spec, mesh)
    chem = (spec.ubar1 * np.sum(psi_species(1, u1 / spec.ubar1))
            + spec.ubar2 * np.sum(psi_species(2, u2 / spec.ubar2))) * mesh.h
    return float(chem + disc.dirichlet_energy(v0, traces, spec, mesh))


def duality_gap(state, spec: ModelSpec, mesh: disc.Mesh):
    """``Phi(v) + Psi(u) - <u, v>``; zero when ``u = E v``."""
    phi = landau_energy(state.v0, state.traces, state.v1, state.v2, spec, mesh)
    psi = helmholtz_energy(state.u1, state.u2, spec, mesh)
    pairing = mesh.h * np.sum(state.u0 * state.v0 + state.u1 * state.v1 + state.u2 * state.v2)
    return phi + psi - float(pairing)


def pairing(u_state, v_state, mesh):
    return float(mesh.h * np.sum(u_state.u0 * v_state.v0 + u_state.u1 * v_state.v1
                                 + u_state.u2 * v_state.v2))


def boundary_energy_increment(state_prev, state_new, dt, spec: ModelSpec, mesh=None, *,
                              fluxes=None, **flux_opts):
    """Energy carried across each interface during one step.

    Returns ``(dPsi^0, dPsi^1)`` with ``dPsi^G = dt sum_i (J_i . nu) xi_i^G``.
    ``fluxes`` may be the output of :func:`discretization.step_fluxes`; the
    rate factors are otherwise recomputed with the same freezing.
    """
    if fluxes is None:
        fluxes = disc.step_fluxes(state_prev, state_new, spec, mesh, **flux_opts)
    out = []
    for gamma in physics.BOUNDARIES:
        out.append(dt * sum(fluxes[i][1][gamma] * spec.xi_ext[i - 1][gamma] for i in physics.SPECIES))
    return tuple(float(x) for x in out)


def dissipation_rates(state_prev, state_new, dt, spec: ModelSpec, mesh, *, fluxes=None, **flux_opts):
    """Bulk and interface dissipation of one step.

    ``bulk = dt sum_edges J_e (xi_K - xi_L)``, which equals
    ``dt sum mob (dxi / h)^2 h``; ``boundary = dt sum r g(y) y`` with
    ``y = xi - xi_ext``.
    """
    if fluxes is None:
        fluxes = disc.step_fluxes(state_prev, state_new, spec, mesh, **flux_opts)
    bulk = 0.0
    bdry = 0.0
    for i in physics.SPECIES:
        xi = state_new.xi(i, spec)
        interior, outward = fluxes[i]
        bulk += float(np.sum(interior * (xi[:-1] - xi[1:])))
        bdry += float(outward[0] * (xi[0] - spec.xi_ext[i - 1][0])
                      + outward[1] * (xi[-1] - spec.xi_ext[i - 1][1]))
    return dt * bulk, dt * bdry


@dataclass
class EnergyLedger:
    """Time series of free energies and per-step dissipation."""

    times: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    psi_gamma0: list = field(default_factory=list)
    psi_gamma1: list = field(default_factory=list)
    diss_bulk: list = field(default_factory=list)
    diss_boundary: list = field(default_factory=list)
    diss_time: list = field(default_factory=list)

    @property
    def psi_tot(self):
        return [p + a + b for p, a, b in zip(self.psi, self.psi_gamma0, self.psi_gamma1)]

    def last_psi_tot(self):
        return self.psi[-1] + self.psi_gamma0[-1] + self.psi_gamma1[-1]

    def __len__(self):
        return len(self.times)

    def start(self, state, spec, mesh):
        self.append(state.time, state, spec, mesh, 0.0, 0.0, 0.0, 0.0, 0.0)

    def append(self, t, state, spec, mesh, dpsi_g0, dpsi_g1, bulk, boundary, time_part, psi=None):
        g0 = (self.psi_gamma0[-1] if self.psi_gamma0 else 0.0) + dpsi_g0
        g1 = (self.psi_gamma1[-1] if self.psi_gamma1 else 0.0) + dpsi_g1
        self.times.append(float(t))
        self.phi.append(landau_energy(state.v0, state.traces, state.v1, state.v2, spec, mesh))
        self.psi.append(helmholtz_energy(state.u1, state.u2, spec, mesh) if psi is None else float(psi))
        self.psi_gamma0.append(g0)
        self.psi_gamma1.append(g1)
        self.diss_bulk.append(float(bulk))
        self.diss_boundary.append(float(boundary))
        self.diss_time.append(float(time_part))

    def increments(self):
        return np.diff(np.asarray(self.psi_tot))

    def balance_residuals(self):
        """``dPsi_tot + diss_bulk + diss_boundary`` per step."""
        return self.increments() + np.asarray(self.diss_bulk[1:]) + np.asarray(self.diss_boundary[1:])

    def closed_residuals(self):
        """Balance residual with the implicit-Euler remainder included."""
        return self.balance_residuals() + np.asarray(self.diss_time[1:])

    def max_increase(self):
        inc = self.increments()
        return float(inc.max()) if inc.size else 0.0

    def is_nonincreasing(self, tol):
        return self.max_increase() <= tol

    def rows(self):
        tot = self.psi_tot
        for k in range(len(self.times)):
            yield (self.times[k], self.phi[k], self.psi[k], self.psi_gamma0[k], self.psi_gamma1[k],
                   tot[k], self.diss_bulk[k], self.diss_boundary[k], self.diss_time[k])

    def to_csv(self, path):
        from .io import write_csv
        write_csv(list(self.rows()), LEDGER_COLUMNS, path)


def read_ledger_column(path, column):
    with open(path, newline="") as fh:
        return [float(row[column]) for row in csv.DictReader(fh)]
