from __future__ import annotations

import numpy as np
import pytest

from vdpcm import discretization as disc
from vdpcm import physics
from vdpcm.physics import ModelSpec, RawKinetics, Variant
from vdpcm.stepper import SolverConfig, initial_state


def make_spec(V=0.0, variant=Variant.VDPCM, raw=None, **kw):
    raw = physics.default_raw_kinetics() if raw is None else raw
    args = dict(lambda2=0.05, alpha0=1.0, alpha1=1.0, V=V)
    args.update(kw)
    return ModelSpec.from_interface(raw, variant=variant, **args)


def bumped_profile(mesh):
    x = mesh.centers
    return 2.0 + 0.5 * np.cos(np.pi * x), 1.0 + 0.3 * np.sin(np.pi * x)


def random_state(rng, spec, mesh, time=0.0):
    u1 = rng.uniform(0.2, 0.9, mesh.n_cells) * spec.ubar1
    u2 = rng.uniform(0.3, 2.0, mesh.n_cells)
    return initial_state(u1, u2, spec, mesh, time=time)


@pytest.fixture
def spec():
    return make_spec(V=0.5)


@pytest.fixture
def legacy_spec():
    return make_spec(V=0.5, variant=Variant.LEGACY)


@pytest.fixture
def mesh():
    return disc.Mesh(32)


@pytest.fixture
def cfg():
    return SolverConfig(dt=1e-3)


@pytest.fixture
def compatible_spec():
    # xi_i^0 == xi_i^1 for both species, nonzero and with a nonzero Robin datum
    raw = RawKinetics(k=((1.0, 2.0), (0.5, 1.5)), m=((2.0, 1.0), (1.5, 0.5)))
    return make_spec(raw=raw, dpsi_pzc0=0.3, dpsi_pzc1=-0.2)


ACCEPTANCE = {}


def record_verdict(n, ok, detail):
    """Store and print one acceptance line."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
