"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 simulation
failure, 3 invariant or energy-decay violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from . import io
from .config import ConfigError, load_config
from .energy import EnergyLedger
from .physics import Variant
from .stepper import EnergyDecayError, InvariantViolation, SimulationFailure, advance

log = logging.getLogger("vdpcm")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE, EXIT_VIOLATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for simulation failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", type=Path, default=None, help="YAML config (default: shipped defaults)")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: $VDPCM_OUT or ./vdpcm_out)")
    p.add_argument("--mesh", type=int, default=None, help="number of cells")
    p.add_argument("--dt", type=float, default=None, help="time step")
    p.add_argument("--t-end", type=float, default=None, help="final time of run / check-energy")
    p.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    p.add_argument("--seed", type=int, default=None, help="accepted for compatibility; runs are deterministic")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="vdpcm", description="Drift-diffusion-Poisson corrosion model simulations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "run": "integrate from the initial profile to t_end, write ledger and profiles",
        "sweep": "steady total current over the configured V grid",
        "compare": "vDPCM vs legacy snapshots and IV curves",
        "check-energy": "vDPCM run asserting free-energy decay",
        "validate-config": "load and validate a config, then exit",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text, description=text))
    return parser


def _load(args):
    cfg = load_config(args.config)
    overrides = {"mesh.cells": args.mesh, "solver.dt": args.dt, "run.t_end": args.t_end,
                 "model.variant": args.variant}
    for key, val in overrides.items():
        if val is not None:
            cfg = cfg.override(key, val)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return cfg


def _export(state, spec, mesh, out, tag, M):
    state.check_invariants(spec, M)
    io.write_profile(state, spec, mesh, out / f"profile_{tag}.csv")


def cmd_run(cfg, out, args, check_energy=False):
    spec, mesh, solver = cfg.spec(), cfg.mesh(), cfg.solver()
    if check_energy and spec.variant is not Variant.VDPCM:
        raise UsageError("check-energy needs the vdpcm variant")
    t_end = cfg.data["run"]["t_end"]
    state = cfg.initial_state(spec, mesh)
    ledger = EnergyLedger()
    ledger.start(state, spec, mesh)
    _export(state, spec, mesh, out, io.time_tag(0.0), solver.M)
    times = sorted({t for t in cfg.data["run"]["snapshot_times"] if 0 < t < t_end} | {t_end})
    try:
        for t in times:
            state = advance(state, spec, mesh, solver, t, ledger)
            _export(state, spec, mesh, out, io.time_tag(t), solver.M)
    finally:
        ledger.to_csv(out / "ledger.csv")
    io.emit_svg_plot([("psi_tot", ledger.times, ledger.psi_tot), ("psi", ledger.times, ledger.psi)],
                     "t", "free energy", out / "energy.svg")
    x = mesh.centers
    io.emit_svg_plot([("u1", x, state.u1), ("u2", x, state.u2), ("v0", x, state.v0)],
                     "x", f"profiles at t={t_end:g}", out / "profiles.svg")
    current, variation = ex.total_current(state, spec, mesh, solver)
    print(f"t={state.time:g} steps={len(ledger) - 1} psi_tot={ledger.psi_tot[-1]:.10g} "
          f"current={current:.6g} (spatial variation {variation:.2e})")
    if check_energy:
        inc = ledger.max_increase()
        print(f"max psi_tot increase per step: {inc:.3e} (tolerance {solver.energy_tol:.1e})")
        if inc > solver.energy_tol:
            raise InvariantViolation(f"psi_tot increased by {inc:.3e}")
    return EXIT_OK


def _sweep_solver(cfg, section):
    return cfg.solver(dt=cfg.data[section]["dt"])


def _axis(cfg):
    o = cfg.data["output"]
    return lambda V: [o["V_offset"] + o["V_scale"] * v for v in V]


def _write_iv(result, path_csv, cfg):
    io.write_csv(result.records(), ex.IV_COLUMNS, path_csv)


def cmd_sweep(cfg, out, args):
    spec, mesh = cfg.spec(), cfg.mesh()
    solver = _sweep_solver(cfg, "sweep")
    initial = cfg.initial_fields(mesh) if cfg.data["sweep"]["initial"] == "profile" else None
    res = ex.potential_sweep(cfg.sweep_values(), spec, mesh, solver, t_max=cfg.data["sweep"]["t_max"],
                             initial=initial, jobs=args.jobs, keep_states=False)
    _write_iv(res, out / "iv_curve.csv", cfg)
    V, cur = res.curve()
    if V:
        io.emit_svg_plot([(spec.variant.value, _axis(cfg)(V), cur)], "V", "steady total current",
                         out / "iv_curve.svg")
    for p in res.points:
        flag = "" if p.converged else f"  NOT CONVERGED ({p.message})"
        print(f"V={p.V:+.6g} current={p.current:.10g}{flag}")
    return EXIT_OK if res.all_converged() else EXIT_FAILURE


def cmd_compare(cfg, out, args):
    spec = cfg.spec()
    mesh = cfg.mesh()
    solver = _sweep_solver(cfg, "compare")
    spec_v, spec_l = spec.with_variant(Variant.VDPCM), spec.with_variant(Variant.LEGACY)
    times = cfg.data["compare"]["snapshot_times"]
    initial = cfg.initial_fields(mesh)
    sweep_solver = _sweep_solver(cfg, "sweep")
    res = ex.compare_models(spec_v, spec_l, mesh, solver, times, initial=initial)
    for name, s in ((Variant.VDPCM.value, spec_v), (Variant.LEGACY.value, spec_l)):
        res.sweeps[name] = ex.potential_sweep(cfg.sweep_values(), s, mesh, sweep_solver,
                                              t_max=cfg.data["sweep"]["t_max"], jobs=args.jobs, keep_states=False)
    x = mesh.centers
    for t, pair in sorted(res.snapshots.items()):
        tag = io.time_tag(t)
        for name, state in sorted(pair.items()):
            _export(state, spec_v if name == "vdpcm" else spec_l, mesh, out, f"{tag}_{name}", solver.M)
        series = [(f"{q} {name}", x, getattr(st, q)) for name, st in sorted(pair.items()) for q in ("u1", "u2")]
        io.emit_svg_plot(series, "x", f"scaled densities at t={t:g}", out / f"profiles_{tag}.svg")
    series = []
    for name, sw in sorted(res.sweeps.items()):
        _write_iv(sw, out / f"iv_curve_{name}.csv", cfg)
        V, cur = sw.curve()
        if V:
            series.append((name, _axis(cfg)(V), cur))
    if series:
        io.emit_svg_plot(series, "V", "steady total current", out / "iv_curves.svg")
    report = res.report()
    (out / "comparison_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
    print(json.dumps(report, indent=2, sort_keys=True))
    if res.errors or not all(sw.all_converged() for sw in res.sweeps.values()):
        return EXIT_FAILURE
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load(args)
        if args.command == "validate-config":
            print(f"{cfg.source}: ok")
            return EXIT_OK
        out = args.out if args.out is not None else cfg.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            return cmd_run(cfg, out, args)
        if args.command == "check-energy":
            return cmd_run(cfg, out, args, check_energy=True)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args)
        return cmd_compare(cfg, out, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EnergyDecayError, InvariantViolation) as exc:
        print(f"violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (SimulationFailure, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
