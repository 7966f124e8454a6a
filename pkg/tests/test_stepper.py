from __future__ import annotations

import dataclasses
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdpcm import discretization as disc
from vdpcm import physics
from vdpcm.energy import EnergyLedger
from vdpcm.physics import Variant
from vdpcm.stepper import (EnergyDecayError, H5Error, InvariantViolation, SimulationFailure, SolverConfig,
                           State, StepProblem, advance, assemble_jacobian, assemble_residual, detect_steady,
                           equilibrium_state, initial_state, jacobian_vector_product, newton_solve, pack)

from conftest import bumped_profile, make_spec, random_state


def test_initial_state_half_occupancy(spec, mesh):
    n = mesh.n_cells
    s = initial_state(np.full(n, spec.ubar1 / 2), np.full(n, spec.ubar2), spec, mesh)
    assert np.allclose(s.v1, 0, atol=1e-15)
    assert np.allclose(s.v2, 0, atol=1e-15)
    s.check_invariants(spec)


def test_initial_state_names_offending_cell(spec, mesh):
    u1, u2 = bumped_profile(mesh)
    u1[5] = 0.0
    with pytest.raises(H5Error, match=r"u1_in\[5\]"):
        initial_state(u1, u2, spec, mesh)
    u1[5] = spec.ubar1
    with pytest.raises(H5Error, match=r"u1_in\[5\]"):
        initial_state(u1, u2, spec, mesh)
    u1, u2 = bumped_profile(mesh)
    u2[7] = -1.0
    with pytest.raises(H5Error, match=r"u2_in\[7\]"):
        initial_state(u1, u2, spec, mesh)


def test_invariant_violation_detected(spec, mesh):
    s = random_state(np.random.default_rng(0), spec, mesh)
    bad = dataclasses.replace(s, u0=s.u0 + 1e-10)
    with pytest.raises(InvariantViolation, match="charge"):
        bad.check_invariants(spec)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0)
    with pytest.raises(ValueError):
        SolverConfig(newton_tol=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(jacobian="magic")
    assert SolverConfig(schemes={"1": "centered"}).schemes == {1: disc.FluxScheme.CENTERED}


def test_residual_vanishes_at_equilibrium(compatible_spec, mesh, cfg):
    eq = equilibrium_state(compatible_spec, mesh)
    res, _, _ = assemble_residual(pack(eq), eq, compatible_spec, mesh, cfg)
    assert np.max(np.abs(res)) <= 1e-12


def test_equilibrium_requires_compatible_data(spec, mesh):
    with pytest.raises(ValueError):
        equilibrium_state(spec, mesh)


def test_residual_time_term_scales_with_inverse_dt(spec, mesh):
    rng = np.random.default_rng(4)
    prev = random_state(rng, spec, mesh)
    x = pack(prev) + 0.01 * rng.normal(size=3 * mesh.n_cells)
    r1, new, _ = assemble_residual(x, prev, spec, mesh, SolverConfig(dt=1e-3))
    r2, _, _ = assemble_residual(x, prev, spec, mesh, SolverConfig(dt=2e-3))
    du = np.column_stack([new.u1 - prev.u1, new.u2 - prev.u2, np.zeros(mesh.n_cells)]).ravel()
    assert np.allclose(r1 - r2, du / 2e-3, rtol=1e-9, atol=1e-9)


CASES = [
    ("vdpcm", {}),
    ("vdpcm", {"mu": 0.4}),
    ("vdpcm", {"M": 3.0}),
    ("vdpcm", {"schemes": {1: "centered"}}),
    ("legacy", {}),
    ("legacy", {"mu": 0.4}),
]


@pytest.mark.parametrize("variant,opts", CASES)
def test_fast_residual_matches_reference(variant, opts, mesh):
    s = make_spec(V=0.3, variant=Variant(variant))
    cfg = SolverConfig(dt=1e-3, **opts)
    rng = np.random.default_rng(7)
    prev = random_state(rng, s, mesh)
    x = pack(prev) + 0.05 * rng.normal(size=3 * mesh.n_cells)
    r_fast, _, fl_fast = StepProblem(prev, s, mesh, cfg).evaluate(x)
    r_ref, _, fl_ref = assemble_residual(x, prev, s, mesh, cfg)
    assert np.allclose(r_fast, r_ref, rtol=1e-13, atol=1e-12)
    for i in physics.SPECIES:
        assert np.allclose(fl_fast[i][0], fl_ref[i][0], rtol=1e-13, atol=1e-13)
        assert np.allclose(fl_fast[i][1], fl_ref[i][1], rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("variant,opts", CASES + [("vdpcm", {"implicit": True})])
def test_jacobian_matches_finite_differences(variant, opts, mesh):
    s = make_spec(V=0.3, variant=Variant(variant))
    cfg = SolverConfig(dt=1e-3, **opts)
    rng = np.random.default_rng(11)
    prev = random_state(rng, s, mesh)
    x = pack(prev) + 0.05 * rng.normal(size=3 * mesh.n_cells)
    for _ in range(3):
        d = rng.normal(size=x.size)
        eps = 1e-6
        rp = assemble_residual(x + eps * d, prev, s, mesh, cfg)[0]
        rm = assemble_residual(x - eps * d, prev, s, mesh, cfg)[0]
        fd = (rp - rm) / (2 * eps)
        jv = jacobian_vector_product(x, d, prev, s, mesh, cfg)
        assert np.linalg.norm(jv - fd) <= 1e-6 * np.linalg.norm(fd)


def test_banded_solve_matches_dense(spec, mesh, cfg):
    prev = random_state(np.random.default_rng(1), spec, mesh)
    J = assemble_jacobian(pack(prev), prev, spec, mesh, cfg)
    n = 3 * mesh.n_cells
    dense = np.column_stack([J.matvec(e) for e in np.eye(n)])
    b = np.arange(n, dtype=float)
    x = J.solve(b)
    # entries span many decades, so compare residuals rather than solutions
    assert np.linalg.norm(dense @ x - b) <= 1e-12 * np.linalg.norm(dense) * np.linalg.norm(x)


def test_newton_at_equilibrium(compatible_spec, mesh, cfg):
    eq = equilibrium_state(compatible_spec, mesh)
    new, rep, _ = newton_solve(eq, compatible_spec, mesh, cfg)
    assert rep.accepted and rep.iterations <= 1
    assert np.max(np.abs(pack(new) - pack(eq))) <= 1e-12


def test_newton_quadratic_contraction(compatible_spec, mesh):
    eq = equilibrium_state(compatible_spec, mesh)
    cfg = SolverConfig(dt=1e-2)
    rng = np.random.default_rng(2)
    prev = State.from_potentials(0.0, eq.v1 + 0.5 * rng.normal(size=32), eq.v2, eq.v0, compatible_spec, mesh)
    prob = StepProblem(prev, compatible_spec, mesh, cfg)
    x = pack(prev)
    norms = []
    for _ in range(8):
        r = prob.evaluate(x)[0]
        norms.append(np.max(np.abs(r)))
        if norms[-1] < 1e-13:
            break
        x = x + prob.jacobian(x).solve(-r)
    assert min(norms) < 1e-10
    # once in the basin, each residual is bounded by the square of the previous one
    pairs = [(a, b) for a, b in zip(norms, norms[1:]) if 1e-9 < a < 1.0]
    assert len(pairs) >= 2, norms
    for a, b in pairs:
        assert b <= a ** 2, norms


def test_newton_report_fields(spec, mesh, cfg):
    prev = initial_state(*bumped_profile(mesh), spec, mesh)
    new, rep, _ = newton_solve(prev, spec, mesh, dataclasses.replace(cfg, dt=1e-4))
    assert rep.accepted and rep.residual <= cfg.newton_tol
    assert new.time == pytest.approx(1e-4)
    new.check_invariants(spec)


def test_advance_equilibrium_is_stationary(compatible_spec, mesh, cfg):
    eq = equilibrium_state(compatible_spec, mesh)
    ledger = EnergyLedger()
    out = advance(eq, compatible_spec, mesh, cfg, 0.05, ledger)
    assert np.max(np.abs(pack(out) - pack(eq))) <= 1e-12
    assert np.ptp(ledger.psi_tot) <= 1e-12


def test_advance_rejects_bad_horizon(spec, mesh, cfg):
    s = initial_state(*bumped_profile(mesh), spec, mesh)
    with pytest.raises(ValueError):
        advance(s, spec, mesh, cfg, 0.0)


def test_advance_gives_up_below_dt_floor(spec, mesh):
    s = initial_state(*bumped_profile(mesh), spec, mesh)
    cfg = SolverConfig(dt=0.5, newton_max_iter=1, newton_tol=1e-14)
    with pytest.raises(SimulationFailure) as info:
        advance(s, spec, mesh, cfg, 1.0)
    assert info.value.last_state is not None
    assert info.value.last_state.time >= 0.0


def test_advance_halves_and_restores_dt(spec, mesh, monkeypatch):
    from vdpcm import stepper
    real = stepper.newton_solve
    calls = {"n": 0}

    def flaky(prev, spec_, mesh_, cfg_, guess=None):
        calls["n"] += 1
        new, rep, fl = real(prev, spec_, mesh_, cfg_, guess=guess)
        if calls["n"] <= 2:
            rep = dataclasses.replace(rep, accepted=False)
        return new, rep, fl

    monkeypatch.setattr(stepper, "newton_solve", flaky)
    s = initial_state(*bumped_profile(mesh), spec, mesh)
    reports = []
    advance(s, spec, mesh, SolverConfig(dt=1e-3), 0.02, reports=reports)
    dts = [r.dt for r in reports]
    assert dts[0] == pytest.approx(2.5e-4)  # two rejections
    assert 1e-3 in [pytest.approx(d) for d in dts]
    assert sum(dts) == pytest.approx(0.02)


def test_energy_decay_violation_aborts(spec, mesh):
    s = initial_state(*bumped_profile(mesh), spec, mesh)
    cfg = SolverConfig(dt=1e-3, energy_tol_factor=-1e12)  # demands a decrease of at least 100 per step
    with pytest.raises(EnergyDecayError):
        advance(s, spec, mesh, cfg, 0.01, EnergyLedger())


def test_legacy_run_not_asserted(legacy_spec, mesh):
    s = initial_state(*bumped_profile(mesh), legacy_spec, mesh)
    cfg = SolverConfig(dt=1e-3, energy_tol_factor=-1e12)
    out = advance(s, legacy_spec, mesh, cfg, 0.01, EnergyLedger())
    out.check_invariants(legacy_spec)


def test_cond_mu_violation_warns(spec, mesh, caplog):
    s = initial_state(*bumped_profile(mesh), spec, mesh)
    cfg = SolverConfig(dt=1e-3, M=1.0, mu=0.9)
    reports = []
    with caplog.at_level(logging.WARNING, logger="vdpcm.stepper"):
        advance(s, spec, mesh, cfg, 0.002, reports=reports)
    assert not reports[0].cond_mu_ok
    assert "regularization bound" in caplog.text


def test_detect_steady_examples(spec, mesh):
    s = random_state(np.random.default_rng(0), spec, mesh)
    cfg = SolverConfig(dt=1.0, steady_tol=0.5)
    assert detect_steady(s, s.with_time(1.0), cfg)
    u2 = s.u2.copy()
    u2[3] += 1.0
    other = initial_state(s.u1, u2, spec, mesh, time=1.0)
    assert not detect_steady(s, other, cfg)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1e-3, 1e-2]))
def test_step_preserves_invariants(seed, dt):
    s = make_spec(V=0.5)
    mesh = disc.Mesh(12)
    prev = random_state(np.random.default_rng(seed), s, mesh)
    new, rep, _ = newton_solve(prev, s, mesh, SolverConfig(dt=dt))
    if rep.accepted:
        new.check_invariants(s)
