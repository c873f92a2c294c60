"""Command-line front end: ``ybspin <command> [options]``.

Every command reads a TOML run configuration (``--config``, default: the
bundled one), writes a headed CSV to ``--out`` (atomically, so a failed run
leaves no file) and exits nonzero on any error or flagged result.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

import numpy as np

from . import io as csvio
from .config import ConfigError, RunConfig, default_table1_path, load_config
from .fitting import (
    ConvergenceError,
    DecayTrace,
    FitError,
    FitResult,
    PeakObservation,
    fit_exponential,
    fit_lorentzian,
    fit_mims,
    fit_spin_hamiltonian,
)
from .photophysics import absorption_table, aggregate_radiative_rate, branching_ratio, records_from_adjacency
from .spectra import (
    GridError,
    allowed_lines,
    boltzmann_populations,
    default_grid,
    field_ramp_map,
    synth_spectrum,
    transition_catalog,
)
from .spinham import FieldVector, LabelingError, UnsupportedLabelingError, manifold_levels
from .zefoz import DegeneracyError, ParamSet, TransitionSpec, zefoz_search

EXIT_ERROR = 1
EXIT_FLAGGED = 3
# flags that describe the request rather than a problem with the result
INFO_FLAGS = {"x_fixed"}


class UsageError(ValueError):
    pass


def parse_field(text: str) -> FieldVector:
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--field expects 'bx,by,bz' in tesla, got {text!r}") from exc
    if len(parts) != 3:
        raise UsageError(f"--field expects three components, got {len(parts)}")
    return FieldVector(*parts)


def parse_range(text: str) -> np.ndarray:
    """``start:stop:steps`` -> inclusive linspace with ``steps`` points."""
    try:
        start, stop, steps = text.split(":")
        start, stop, n = float(start), float(stop), int(steps)
    except ValueError as exc:
        raise UsageError(f"--range expects 'start:stop:steps', got {text!r}") from exc
    if n < 1:
        raise UsageError("--range needs at least one step")
    if n == 1:
        return np.array([start])
    return np.linspace(start, stop, n)


def parse_domain(text: str) -> list[tuple[float, float]]:
    """``lo:hi,lo:hi,lo:hi`` or a single half-width ``w`` (cube centred on 0)."""
    try:
        if ":" not in text:
            w = float(text)
            return [(-w, w)] * 3
        axes = [tuple(float(v) for v in part.split(":")) for part in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--domain expects 'lo:hi,lo:hi,lo:hi' or a half-width, got {text!r}") from exc
    if len(axes) != 3 or any(len(a) != 2 for a in axes):
        raise UsageError("--domain needs three lo:hi pairs")
    return axes


_ORIENTATIONS = {"parallel": (0.0, 0.0, 1.0), "perpendicular": (1.0, 0.0, 0.0), "x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


def parse_orientation(text: str) -> tuple[float, float, float]:
    if text in _ORIENTATIONS:
        return _ORIENTATIONS[text]
    try:
        v = tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"unknown orientation {text!r}") from exc
    if len(v) != 3 or not np.linalg.norm(v) > 0:
        raise UsageError("orientation must be a nonzero 'x,y,z' vector")
    return v


def _levels(cfg: RunConfig, manifold: str, b: FieldVector):
    p = cfg.ground if manifold == "ground" else cfg.excited
    return manifold_levels(p, b, cfg.constants, cfg.nuclear_zeeman)


def _catalog(cfg: RunConfig, b: FieldVector, pol: str | None = None):
    lg = _levels(cfg, "ground", b)
    le = _levels(cfg, "excited", b)
    moments = [m for m in cfg.moments if pol is None or m.pol == pol]
    return lg, le, transition_catalog(lg, le, moments, adjacency=cfg.adjacency if b.magnitude == 0 else None)


def _fit_outputs(res: FitResult, out: str | None) -> int:
    sys.stdout.write(res.to_text())
    if out:
        csvio.write_atomic(out, csvio.render_csv(res.csv_header(), [res.csv_row()]))
    problems = [f for f in res.flags if f not in INFO_FLAGS]
    if not res.converged or problems:
        print(f"flagged: {'; '.join(problems) or 'not converged'}", file=sys.stderr)
        return EXIT_FLAGGED
    return 0


# -- commands ----------------------------------------------------------------


def cmd_levels(args, cfg: RunConfig) -> int:
    b = parse_field(args.field)
    lv = _levels(cfg, args.manifold, b)
    rows = [(k + 1, lv.labels[k], e) for k, e in enumerate(lv.energies)]
    for k, label, e in rows:
        print(f"{k}  {label:8s} {csvio.fmt(e)} GHz")
    if args.out:
        csvio.write_csv(args.out, ["index", "label", "energy_ghz"], rows)
    return 0


def cmd_spectrum(args, cfg: RunConfig) -> int:
    b = parse_field(args.field)
    lg, _, cat = _catalog(cfg, b, args.pol)
    pops = boltzmann_populations(lg, cfg.temperature, cfg.constants)
    grid = parse_range(args.range) if args.range else default_grid(cat, cfg.lineshape, args.pol)
    spec = synth_spectrum(cat, pops, cfg.lineshape, grid, scale=args.scale, pol=args.pol)
    print(f"{len(allowed_lines(cat, args.pol))} allowed {args.pol} lines, {grid.size} grid points")
    if args.out:
        csvio.write_csv(args.out, ["detuning_ghz", "alpha"], zip(spec.detunings, spec.alpha))
    return 0


def cmd_ramp(args, cfg: RunConfig) -> int:
    b_values = parse_range(args.range)
    orient = parse_orientation(args.orientation)
    if args.detuning:
        grid = parse_range(args.detuning)
    else:
        ends = [FieldVector.from_array(np.multiply(orient, bv) / np.linalg.norm(orient)) for bv in (b_values[0], b_values[-1])]
        cats = [_catalog(cfg, e, args.pol)[2] for e in ends]
        lines = [ln for c in cats for ln in allowed_lines(c, args.pol)]
        grid = default_grid(lines, cfg.lineshape, args.pol)
    ramp = field_ramp_map(
        cfg.ground,
        cfg.excited,
        orient,
        b_values,
        cfg.moments,
        cfg.lineshape,
        cfg.temperature,
        grid,
        pol=args.pol,
        consts=cfg.constants,
        scale=args.scale,
        nuclear_zeeman=cfg.nuclear_zeeman,
        workers=args.workers,
    )
    print(f"{ramp.alpha.shape[0]} field steps x {ramp.alpha.shape[1]} detunings")
    if args.out:
        header = ["field_t"] + [csvio.fmt(d) for d in ramp.detunings]
        csvio.write_csv(args.out, header, ([bv, *row] for bv, row in zip(ramp.b_values, ramp.alpha)))
    return 0


def read_observations(path: str) -> list[PeakObservation]:
    cols = csvio.read_table(path, ["bx", "by", "bz", "pol", "freq", "uncertainty"], ["label", "ground_index", "excited_index"])
    n = len(cols["freq"])
    num = {c: csvio.floats(path, c, cols[c]) for c in ("bx", "by", "bz", "freq", "uncertainty")}
    out = []
    for k in range(n):
        gi = cols.get("ground_index", [""] * n)[k]
        ei = cols.get("excited_index", [""] * n)[k]
        try:
            out.append(
                PeakObservation(
                    field=FieldVector(num["bx"][k], num["by"][k], num["bz"][k]),
                    pol=cols["pol"][k],
                    freq=num["freq"][k],
                    uncertainty=num["uncertainty"][k],
                    label=cols.get("label", [""] * n)[k] or None,
                    ground_index=int(gi) if gi else None,
                    excited_index=int(ei) if ei else None,
                )
            )
        except ValueError as exc:
            raise csvio.CsvError(f"{path}: line {k + 2}: {exc}") from exc
    return out


def cmd_fit_ham(args, cfg: RunConfig) -> int:
    obs = read_observations(args.input)
    res = fit_spin_hamiltonian(
        obs,
        cfg.ground,
        cfg.excited,
        moments=cfg.moments,
        consts=cfg.constants,
        nuclear_zeeman=cfg.nuclear_zeeman,
        adjacency=cfg.adjacency,
        n_starts=args.starts,
        seed=args.seed,
        weighted=not args.unweighted,
    )
    return _fit_outputs(res, args.out)


def read_trace(path: str, model: str):
    if model == "lorentzian":
        cols = csvio.read_table(path, ["frequency", "value"], ["sigma"])
        x = csvio.floats(path, "frequency", cols["frequency"])
    else:
        cols = csvio.read_table(path, ["time", "value"], ["sigma"])
        x = csvio.floats(path, "time", cols["time"])
    y = csvio.floats(path, "value", cols["value"])
    sigma = csvio.floats(path, "sigma", cols["sigma"]) if "sigma" in cols else None
    return np.array(x), np.array(y), None if sigma is None else np.array(sigma)


def cmd_fit_decay(args, cfg: RunConfig | None) -> int:
    x, y, sigma = read_trace(args.input, args.model)
    if args.model == "lorentzian":
        res = fit_lorentzian(x, y, sigma)
    else:
        order = np.argsort(x, kind="stable")
        trace = DecayTrace(x[order], y[order], None if sigma is None else sigma[order])
        if args.model == "exp":
            res = fit_exponential(trace)
        else:
            res = fit_mims(trace, mode=args.mode, fix_x=args.fix_x)
    return _fit_outputs(res, args.out)


def read_absorption(path) -> list[tuple[str, str, float]]:
    cols = csvio.read_table(path, ["label", "pol", "integrated_absorption_ghz_per_cm"])
    values = csvio.floats(path, "integrated_absorption_ghz_per_cm", cols["integrated_absorption_ghz_per_cm"])
    return list(zip(cols["label"], cols["pol"], values))


def cmd_table1(args, cfg: RunConfig) -> int:
    rows = read_absorption(args.input or default_table1_path())
    records = records_from_adjacency(rows, cfg.adjacency)
    lg = _levels(cfg, "ground", FieldVector())
    pops = boltzmann_populations(lg, cfg.temperature, cfg.constants)
    table = absorption_table(records, pops, cfg.number_density, cfg.medium)
    rate, tau = aggregate_radiative_rate([(r, t.rate) for r, t in zip(records, table)], mode=cfg.rate_aggregation)
    header = ["label", "pol", "integrated_absorption_ghz_per_cm", "oscillator_strength", "emission_oscillator_strength", "radiative_rate_per_s"]
    out_rows = [(t.label, t.pol, t.integrated_alpha, t.f_abs, t.f_em, t.rate) for t in table]
    for row in out_rows:
        print(",".join(csvio.fmt(v) for v in row))
    print(f"radiative lifetime {csvio.fmt(tau)} s ({cfg.rate_aggregation})")
    tau_f = args.tau_f if args.tau_f is not None else cfg.fluorescence_lifetime
    if tau_f is not None:
        print(f"branching ratio {csvio.fmt(branching_ratio(tau_f, tau))}")
    if args.out:
        csvio.write_csv(args.out, header, out_rows)
    return 0


def cmd_zefoz(args, cfg: RunConfig) -> int:
    spec = TransitionSpec.parse(args.transition)
    params = ParamSet(cfg.ground, cfg.excited, cfg.constants, cfg.nuclear_zeeman)
    domain = parse_domain(args.domain)
    reports = zefoz_search(spec, params, domain, args.starts, rng_seed=args.seed, threshold=args.threshold)
    header = ["bx", "by", "bz", "freq_ghz", "grad_x", "grad_y", "grad_z", "gradient_norm"] + [
        f"hess_{a}{b}" for a in "xyz" for b in "xyz"
    ]
    rows = [[*r.field.as_array(), r.freq, *r.gradient, r.gradient_norm, *r.hessian.ravel()] for r in reports]
    print(f"{len(reports)} ZEFOZ point(s) for {spec} with |grad| < {args.threshold:g} GHz/T")
    for r in reports:
        print("  B = (" + ", ".join(csvio.fmt(v) for v in r.field.as_array()) + f") T, f = {csvio.fmt(r.freq)} GHz")
    if args.out:
        csvio.write_csv(args.out, header, rows)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ybspin", description="171Yb:YVO4 spin Hamiltonian, spectra and fits")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="TOML run configuration (default: bundled)")
        p.add_argument("--out", help="output CSV path")
        return p

    p = common(sub.add_parser("levels", help="energy levels of one manifold"))
    p.add_argument("--field", default="0,0,0", help="bx,by,bz in tesla")
    p.add_argument("--manifold", choices=["ground", "excited"], default="ground")
    p.set_defaults(func=cmd_levels)

    p = common(sub.add_parser("spectrum", help="synthetic absorption spectrum"))
    p.add_argument("--field", default="0,0,0")
    p.add_argument("--pol", choices=["pi", "sigma"], default="pi")
    p.add_argument("--range", help="detuning grid start:stop:steps in GHz")
    p.add_argument("--scale", type=float, default=1.0, help="absorption per unit line amplitude")
    p.set_defaults(func=cmd_spectrum)

    p = common(sub.add_parser("ramp", help="spectra along a field ramp (2D map)"))
    p.add_argument("--orientation", default="perpendicular", help="parallel|perpendicular|x|y|z or 'x,y,z'")
    p.add_argument("--range", required=True, help="field magnitudes start:stop:steps in tesla")
    p.add_argument("--detuning", help="detuning grid start:stop:steps in GHz")
    p.add_argument("--pol", choices=["pi", "sigma"], default="sigma")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_ramp)

    p = common(sub.add_parser("fit-ham", help="fit excited-state parameters to line positions"))
    p.add_argument("--input", required=True, help="observations CSV: bx,by,bz,pol,freq,uncertainty[,label,ground_index,excited_index]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--starts", type=int, default=1, help="number of multi-start initial guesses")
    p.add_argument("--unweighted", action="store_true", help="ignore per-line uncertainties in the objective")
    p.set_defaults(func=cmd_fit_ham)

    p = common(sub.add_parser("fit-decay", help="fit a decay trace or a spin line"), config=False)
    p.add_argument("--input", required=True, help="CSV with time,value[,sigma] (frequency,value for lorentzian)")
    p.add_argument("--model", choices=["exp", "mims", "lorentzian"], required=True)
    p.add_argument("--mode", choices=["field", "intensity"], default="field")
    p.add_argument("--fix-x", type=float, default=None, help="hold the Mims exponent fixed")
    p.set_defaults(func=cmd_fit_decay, needs_config=False)

    p = common(sub.add_parser("table1", help="oscillator strengths and radiative rates"))
    p.add_argument("--input", help="CSV label,pol,integrated_absorption_ghz_per_cm (default: bundled)")
    p.add_argument("--tau-f", type=float, default=None, help="fluorescence lifetime in s")
    p.set_defaults(func=cmd_table1)

    p = common(sub.add_parser("zefoz", help="search for zero first-order Zeeman points"))
    p.add_argument("--transition", default="g3-g4", help="e.g. g3-g4, e1-e2")
    p.add_argument("--domain", default="0.05", help="lo:hi,lo:hi,lo:hi in tesla, or a half-width")
    p.add_argument("--starts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4, help="gradient norm limit in GHz/T")
    p.set_defaults(func=cmd_zefoz)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = None if not getattr(args, "needs_config", True) else load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (
        ConfigError,
        csvio.CsvError,
        GridError,
        FitError,
        ConvergenceError,
        DegeneracyError,
        LabelingError,
        UnsupportedLabelingError,
        ValueError,
        KeyError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
