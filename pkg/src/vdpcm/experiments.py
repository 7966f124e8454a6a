"""Steady-state IV sweeps, profile snapshots and the two-model comparison."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import discretization as disc
from . import physics
from .energy import EnergyLedger
from .physics import ModelSpec, Variant
from .stepper import SimulationFailure, SolverConfig, State, advance, detect_steady, initial_state

log = logging.getLogger(__name__)

DEFAULT_SNAPSHOT_TIMES = (18.0, 1510.0)


def edge_currents(state: State, spec: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig | None = None):
    """Charge current ``z1 J1 + z2 J2`` on all ``n + 1`` edges, oriented along +x.

    Fluxes are evaluated with the stepper's schemes, with frozen
    coefficients taken from the state itself.
    """
    opts = {} if cfg is None else cfg.flux_options()
    fluxes = disc.step_fluxes(state, state, spec, mesh, **opts)
    total = np.zeros(mesh.n_cells + 1)
    for i in physics.SPECIES:
        interior, outward = fluxes[i]
        z = spec.z(i)
        total[1:-1] += z * interior
        # outward normal points to -x at the left interface
        total[0] -= z * outward[0]
        total[-1] += z * outward[1]
    return total


def total_current(state: State, spec: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig | None = None):
    """Spatial mean of the edge currents and their max deviation from it."""
    cur = edge_currents(state, spec, mesh, cfg)
    mean = float(np.mean(cur))
    return mean, float(np.max(np.abs(cur - mean)))


def uniform_neutral_profile(spec: ModelSpec, mesh: disc.Mesh, u2=None):
    """Constant densities with zero net charge.

    ``u2`` defaults to ``ubar2``; ``u1`` then follows from neutrality.
    """
    u2 = spec.ubar2 if u2 is None else float(u2)
    u1 = -(spec.z2 * u2 + spec.rho_hl) / spec.z1
    if not 0 < u1 < spec.ubar1:
        raise physics.ModelError(f"no admissible neutral profile for u2={u2}: u1={u1} outside (0, {spec.ubar1})")
    return np.full(mesh.n_cells, u1), np.full(mesh.n_cells, u2)


def run_to_steady(state: State, spec: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig, t_max,
                  ledger: EnergyLedger | None = None):
    """Advance until :func:`stepper.detect_steady` fires or ``t_max`` is reached.

    Returns ``(state, t_steady)`` with ``t_steady = None`` if not detected.
    """
    hit = []

    def stop(prev, new):
        if detect_steady(prev, new, cfg, spec, mesh):
            hit.append(new.time)
            return True
        return False

    if state.time >= t_max:
        return state, None
    final = advance(state, spec, mesh, cfg, t_max, ledger, stop=stop)
    return final, (hit[0] if hit else None)


@dataclass
class SweepPoint:
    V: float
    current: float
    t_steady: float | None
    converged: bool
    state: State | None = None
    message: str = ""


@dataclass
class SweepResult:
    """IV-curve records sorted by applied potential."""

    points: list = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.V)

    def __len__(self):
        return len(self.points)

    @property
    def V(self):
        return np.array([p.V for p in self.points])

    @property
    def currents(self):
        return np.array([p.current for p in self.points])

    def converged(self):
        return [p for p in self.points if p.converged]

    def all_converged(self):
        return all(p.converged for p in self.points)

    def curve(self, include_flagged=False):
        pts = self.points if include_flagged else self.converged()
        return [p.V for p in pts], [p.current for p in pts]

    def records(self):
        return [(p.V, p.current, math.nan if p.t_steady is None else p.t_steady, int(p.converged))
                for p in self.points]


IV_COLUMNS = ("V", "current", "t_steady", "converged")


def _sweep_point(args):
    V, spec_template, mesh, cfg, u1_in, u2_in, t_max, keep_state = args
    spec = spec_template.with_applied_potential(V)
    try:
        state = initial_state(u1_in, u2_in, spec, mesh)
        ledger = EnergyLedger() if spec.variant is Variant.VDPCM else None
        final, t_steady = run_to_steady(state, spec, mesh, cfg, t_max, ledger)
    except (SimulationFailure, ArithmeticError, physics.ModelError) as exc:
        return SweepPoint(V, math.nan, None, False, None, f"{type(exc).__name__}: {exc}")
    current, _ = total_current(final, spec, mesh, cfg)
    msg = "" if t_steady is not None else f"no steady state before t={t_max}"
    return SweepPoint(V, current, t_steady, t_steady is not None, final if keep_state else None, msg)


def potential_sweep(V_values, spec_template: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig, *,
                    t_max, initial=None, jobs=1, keep_states=True):
    """Steady total current for each applied potential.

    Parameters
    ----------
    V_values : sequence of float
        Applied potentials; each one updates the metal-side equilibrium
        potentials and the Robin datum through
        :meth:`ModelSpec.with_applied_potential`.
    initial : tuple of arrays, optional
        ``(u1_in, u2_in)``; defaults to :func:`uniform_neutral_profile`.
    jobs : int
        Worker processes.  Points are independent and the result is sorted,
        so the output does not depend on ``jobs``.

    Failed points are recorded with ``converged=False``; the sweep goes on.
    """
    V_values = [float(V) for V in V_values]
    if not all(math.isfinite(V) for V in V_values):
        raise ValueError("applied potentials must be finite")
    u1_in, u2_in = initial if initial is not None else uniform_neutral_profile(spec_template, mesh)
    tasks = [(V, spec_template, mesh, cfg, u1_in, u2_in, t_max, keep_states) for V in V_values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_sweep_point, tasks))
    else:
        points = [_sweep_point(t) for t in tasks]
    for p in points:
        if not p.converged:
            log.warning("sweep point V=%g not converged: %s", p.V, p.message)
    return SweepResult(points)


def profile_discrepancy(a: State, b: State, mesh: disc.Mesh):
    """L-infinity and L2 differences of ``u1``, ``u2`` and ``v0``."""
    out = {}
    for name in ("u1", "u2", "v0"):
        d = getattr(a, name) - getattr(b, name)
        out[name] = {"linf": float(np.max(np.abs(d))), "l2": float(np.sqrt(mesh.h * np.sum(d * d)))}
    return out


@dataclass
class Comparison:
    """Paired snapshots of the two model variants and their IV curves."""

    snapshots: dict = field(default_factory=dict)  # t -> {"vdpcm": State, "legacy": State}
    discrepancies: dict = field(default_factory=dict)  # t -> profile_discrepancy
    sweeps: dict = field(default_factory=dict)  # variant name -> SweepResult
    errors: dict = field(default_factory=dict)  # variant name -> message

    def report(self):
        """JSON-ready summary."""
        rep = {
            "snapshot_times": sorted(self.discrepancies),
            "discrepancies": {repr(t): self.discrepancies[t] for t in sorted(self.discrepancies)},
            "errors": dict(sorted(self.errors.items())),
        }
        if len(self.sweeps) == 2:
            a, b = self.sweeps[Variant.VDPCM.value], self.sweeps[Variant.LEGACY.value]
            ca, cb = a.currents, b.currents
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.abs(ca - cb) / np.maximum(np.abs(ca), np.abs(cb))
            rep["iv_max_relative_difference"] = float(np.nanmax(rel)) if np.any(np.isfinite(rel)) else None
            rep["iv_converged"] = {k: v.all_converged() for k, v in sorted(self.sweeps.items())}
        return rep


def _snapshots(state, spec, mesh, cfg, times):
    out = {}
    for t in times:
        if t > state.time:
            state = advance(state, spec, mesh, cfg, t)
        out[t] = state
    return out


def compare_models(spec_vdpcm: ModelSpec, spec_legacy: ModelSpec, mesh: disc.Mesh, cfg: SolverConfig,
                   snapshot_times=DEFAULT_SNAPSHOT_TIMES, *, initial=None, V_values=None, t_max=None, jobs=1):
    """Run both variants from identical data and compare them.

    Snapshots are taken at ``snapshot_times``; with ``V_values`` both IV
    curves are computed as well (``t_max`` is then required).  A failing
    run is recorded in ``errors`` and does not stop the other one.
    """
    if spec_vdpcm.with_variant(Variant.LEGACY) != spec_legacy.with_variant(Variant.LEGACY):
        raise ValueError("the two specs must differ only in their variant")
    times = sorted(float(t) for t in snapshot_times)
    if any(t < 0 for t in times):
        raise ValueError("snapshot times must be >= 0")
    u1_in, u2_in = initial if initial is not None else uniform_neutral_profile(spec_vdpcm, mesh)
    res = Comparison()
    runs = {}
    for spec in (spec_vdpcm, spec_legacy):
        name = spec.variant.value
        try:
            runs[name] = _snapshots(initial_state(u1_in, u2_in, spec, mesh), spec, mesh, cfg, times)
        except (SimulationFailure, ArithmeticError, physics.ModelError) as exc:
            res.errors[name] = f"{type(exc).__name__}: {exc}"
    for t in times:
        pair = {name: snaps[t] for name, snaps in runs.items()}
        res.snapshots[t] = pair
        if len(pair) == 2:
            res.discrepancies[t] = profile_discrepancy(pair["vdpcm"], pair["legacy"], mesh)
    if V_values is not None:
        if t_max is None:
            raise ValueError("t_max is required for the IV sweeps")
        for spec in (spec_vdpcm, spec_legacy):
            res.sweeps[spec.variant.value] = potential_sweep(
                V_values, spec, mesh, cfg, t_max=t_max, initial=(u1_in, u2_in), jobs=jobs, keep_states=False)
    return res
