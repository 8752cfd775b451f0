"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 a verification did not
pass, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
from pathlib import Path

import numpy as np

from . import fixtures, oracle, plotting
from .decompose import CRITICAL, LARGE, SMALL, split
from .model import ModelValidationError, check_hypotheses, load_model
from .moments import ConvolutionMoments, MomentTable, moment_ode, variance_constants, variance_limit_check
from .simulate import DEFAULT_CAP, ensemble, ensemble_csv, ensemble_summary, observe, read_ensemble_csv
from .spectral import SpectralError, spectrum_for, spectrum_report
from .verify import (
    KS_TOL,
    LIL_BAND,
    LIL_FRACTION,
    LIL_MIN_TRAJECTORIES,
    V_TOL,
    InsufficientData,
    clt_check,
    heyde_crosscheck,
    lil_envelope,
    lln_check,
    martingale_check,
    martingale_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_FAILED, EXIT_INTERNAL = 0, 1, 2, 3
DEFAULT_SEED = 20240917
LIL_CAP = 2_000_000_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers


def clean(obj):
    """JSON-ready copy with numpy scalars unwrapped and non-finite floats as null."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, complex):
        return {"re": clean(obj.real), "im": clean(obj.imag)}
    return obj


def dumps(obj) -> str:
    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _resolve_model(spec: str):
    """A fixture name or a path to a model JSON file.  Returns ``(model, fixture_name)``."""
    if spec in fixtures.NAMES:
        return fixtures.load_fixture(spec), spec
    p = Path(spec)
    if not p.exists():
        raise ModelValidationError([f"no fixture or file named {spec!r}"])
    name = p.stem if p.stem in fixtures.NAMES and p.read_text() == fixtures.fixture_path(p.stem).read_text() else None
    return load_model(p), name


def _resolve_f(spec: str | None, model, fixture: str | None) -> np.ndarray:
    if spec is None:
        if fixture is None:
            raise UsageError("--f is required for models that are not bundled fixtures")
        return fixtures.default_f(fixture)
    text = spec.strip().strip("[]")
    try:
        f = np.array([float(x) for x in text.split(",")])
    except ValueError:
        if fixture is None:
            raise UsageError(f"--f {spec!r} is neither a numeric list nor usable as a fixture name") from None
        try:
            return fixtures.named_f(fixture, spec)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
    if f.shape != (model.d,) or not np.all(np.isfinite(f)):
        raise UsageError(f"--f must have {model.d} finite entries")
    return f


def _grid(t_max: float, step: float, start: float = 0.0) -> np.ndarray:
    if step <= 0 or t_max < start:
        raise UsageError("grid needs step > 0 and t_max >= start")
    n = int(math.floor((t_max - start) / step + 1e-9))
    grid = start + step * np.arange(n + 1)
    if abs(grid[-1] - t_max) <= 1e-9 * max(1.0, t_max):
        grid[-1] = t_max
    return grid


def _init(spec: str | None, model) -> np.ndarray:
    if spec is None:
        return fixtures.initial_state(model)
    try:
        init = np.array([int(x) for x in spec.split(",")], dtype=np.int64)
    except ValueError:
        raise UsageError(f"--init must be comma-separated integers, got {spec!r}") from None
    if init.shape != (model.d,) or np.any(init < 0):
        raise UsageError(f"--init must list {model.d} non-negative counts")
    return init


def _ks(spec: str | None) -> list[int]:
    if not spec:
        return []
    out = []
    for tok in spec.split(","):
        tok = tok.strip()
        if tok in ("W", ""):
            continue
        if not tok.startswith("H") or not tok[1:].isdigit():
            raise UsageError(f"unknown observable {tok!r}; use W or H<k>")
        out.append(int(tok[1:]))
    return out


def _emit(args, name: str, report: dict, csv_text: str | None = None, figure=None):
    if getattr(args, "constants", None):
        report = {**report, "constants_input": json.loads(Path(args.constants).read_text())}
    text = dumps(report)
    sys.stdout.write(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text)
        if csv_text is not None:
            (out / f"{name}.csv").write_text(csv_text)
        if figure is not None:
            figure(out / f"{name}.png")


def _basis(model):
    return spectrum_for(model)


# --------------------------------------------------------------------------
# subcommands


def cmd_spectrum(args) -> int:
    model, _ = _resolve_model(args.model)
    sp, basis = _basis(model)
    report = spectrum_report(sp, basis)
    report["hypotheses"] = check_hypotheses(model)
    _emit(args, "spectrum", report, figure=lambda p: plotting.plot_spectrum(sp, p))
    return EXIT_OK


def cmd_decompose(args) -> int:
    model, fx = _resolve_model(args.model)
    f = _resolve_f(args.f, model, fx)
    _, basis = _basis(model)
    dec = split(basis, f)
    _emit(args, "decompose", {"f": f, **dec.to_dict()})
    return EXIT_OK


def cmd_constants(args) -> int:
    model, fx = _resolve_model(args.model)
    f = _resolve_f(args.f, model, fx)
    _, basis = _basis(model)
    report = {"f": f, **variance_constants(model, basis, f).to_dict()}
    if args.check_t is not None:
        report["limit_check"] = variance_limit_check(model, basis, f, args.check_t)
    _emit(args, "constants", report)
    return EXIT_OK


def cmd_moments(args) -> int:
    model, fx = _resolve_model(args.model)
    f = _resolve_f(args.f, model, fx)
    grid = _grid(args.t_max, args.step)
    if args.method == "ode":
        table = moment_ode(model, f, grid, order=args.order)
    else:
        _, basis = _basis(model)
        cm = ConvolutionMoments(model, basis, f)
        fns = [cm.m1, cm.m2, cm.m3, cm.m4][: args.order]
        table = MomentTable(t=grid, m=np.stack([np.array([fn(t) for t in grid]) for fn in fns]))
    x = args.state
    if not 0 <= x < model.d:
        raise UsageError(f"--state must lie in [0, {model.d})")
    rows = ["t," + ",".join(f"m{j + 1}" for j in range(table.order))]
    for i, t in enumerate(table.t):
        rows.append(",".join([repr(float(t))] + [repr(float(table.m[j, i, x])) for j in range(table.order)]))
    report = {"method": args.method, "state": x, "f": f, "t": table.t, "moments": table.m[:, :, x]}
    one = MomentTable(t=table.t, m=table.m[:, :, x])
    _emit(args, "moments", report, "\n".join(rows) + "\n", lambda p: plotting.plot_moments(one, p))
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, fx = _resolve_model(args.model)
    f = _resolve_f(args.f, model, fx)
    grid = _grid(args.t_max, args.step)
    ks = _ks(args.observables)
    _, basis = _basis(model)
    if any(k >= basis.spectrum.count for k in ks):
        raise UsageError(f"H indices must be below {basis.spectrum.count}")
    ens = ensemble(model, _init(args.init, model), grid, args.reps, args.seed, cap=args.cap)
    ok = ens.ok
    counts = np.where(ok[:, None, None], ens.counts, 0)
    path = observe(counts, grid, basis, f, requested_k=ks)
    summary = ensemble_summary(ens, path)
    summary.update({"seed": args.seed, "f": f, "initial": ens.initial})
    csv_text = ensemble_csv(ens, path, ks)
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(csv_text)
    _emit(args, "simulate", summary, csv_text, lambda p: plotting.plot_paths(grid, path.W[ok], p))
    return EXIT_OK if not ens.errors else EXIT_INTERNAL


def _ensemble_for(args, model, grid_default):
    """Counts from ``--ensemble`` CSV, or a fresh seeded ensemble."""
    if args.ensemble:
        _, grid, counts = read_ensemble_csv(Path(args.ensemble).read_text())
        keep = np.all(counts.reshape(len(counts), -1) >= 0, axis=1)
        return grid, counts[keep], []
    ens = ensemble(model, _init(args.init, model), grid_default, args.reps, args.seed, cap=args.cap)
    return ens.grid, ens.counts[ens.ok], ens.errors


def cmd_verify(args) -> int:
    mode = args.mode
    if mode == "heyde":
        pmf = [float(x) for x in args.pmf.split(",")]
        report = heyde_crosscheck(pmf, beta=args.beta)
        report["heyde_pmf_only"] = {"sigma_sq": report["sigma_sq"]}
        _emit(args, "verify_heyde", report)
        return EXIT_OK if report["pass"] else EXIT_FAILED

    model, fx = _resolve_model(args.model)
    f = _resolve_f(args.f, model, fx)
    _, basis = _basis(model)

    if mode == "clt":
        t = args.t
        grid, counts, errors = _ensemble_for(args, model, np.array([t]) if args.component != LARGE else np.array([t, t + 4]))
        rep = clt_check(counts, grid, model, basis, f, t, args.component, args.ks_tol, args.v_tol)
        report = {**rep.to_dict(), "errors": errors, "seed": None if args.ensemble else args.seed}
        _emit(args, "verify_clt", report, rep.distribution_csv(), lambda p: plotting.plot_clt(rep, p))
        return EXIT_OK if rep.passed else EXIT_FAILED

    if mode == "lil":
        grid, counts, errors = _ensemble_for(args, model, _grid(args.horizon, args.step))
        rep = lil_envelope(
            counts, grid, model, basis, f, band=(args.lo, args.hi), required_fraction=args.fraction,
            min_trajectories=args.min_trajectories,
        )
        report = {**rep.to_dict(), "errors": errors, "seed": None if args.ensemble else args.seed}
        _emit(args, "verify_lil", report, rep.ratios_csv(), lambda p: plotting.plot_lil(rep, p))
        return EXIT_OK if rep.passed else EXIT_FAILED

    if mode == "martingale":
        grid, counts, errors = _ensemble_for(args, model, _grid(args.t_max, args.step))
        rep = martingale_check(counts, grid, basis, args.k)
        report = {k: v for k, v in rep.items() if k != "rows"}
        report["errors"] = errors
        _emit(args, "verify_martingale", report, martingale_csv(rep), lambda p: plotting.plot_martingale(rep, p))
        return EXIT_OK if rep["pass"] else EXIT_FAILED

    if mode == "lln":
        grid, counts, errors = _ensemble_for(args, model, _grid(args.t_max, args.step, start=args.step))
        rep = lln_check(counts, grid, basis, f)
        rows = ["t,mean_residual,se"] + [
            f"{t!r},{m!r},{s!r}" for t, m, s in zip(rep["t"], rep["mean_residual"], rep["se"])
        ]
        _emit(args, "verify_lln", {**rep, "errors": errors}, "\n".join(rows) + "\n", lambda p: plotting.plot_lln(rep, p))
        return EXIT_OK if rep["pass"] else EXIT_FAILED

    raise UsageError(f"unknown verify mode {mode!r}")


def cmd_oracle(args) -> int:
    report = {
        "yule_moments": oracle.yule_moments(args.beta, args.t, 4),
        "yule_w_variance": oracle.yule_w_variance(args.beta, args.t),
        "birth_death_extinction": oracle.birth_death_extinction(args.beta, args.p0, 1 - args.p0, args.t),
    }
    _emit(args, "oracle", report)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="branchlil", description="Spectral analysis, moments and simulation of branching Markov processes.")
    sub = p.add_subparsers(
        dest="command", parser_class=_Parser, metavar="{spectrum,decompose,constants,moments,simulate,verify}"
    )

    def common(q, f=True):
        q.add_argument("model", help="bundled fixture name or path to a model JSON file")
        if f:
            q.add_argument("--f", help="test function: comma list, or a named function of the fixture")
        q.add_argument("--out-dir", help="also write JSON/CSV/PNG artifacts here")

    q = sub.add_parser("spectrum", help="ordered spectrum, Jordan structure and residuals")
    common(q, f=False)
    q.set_defaults(func=cmd_spectrum)

    q = sub.add_parser("decompose", help="projections, gamma/zeta/tau and the large/critical/small split")
    common(q)
    q.set_defaults(func=cmd_decompose)

    q = sub.add_parser("constants", help="variance constants")
    common(q)
    q.add_argument("--check-t", type=float, help="also compare normalised moments at this time")
    q.set_defaults(func=cmd_constants)

    q = sub.add_parser("moments", help="moments of <f, X_t> on a time grid")
    common(q)
    q.add_argument("--t-max", type=float, default=2.0)
    q.add_argument("--step", type=float, default=0.5)
    q.add_argument("--order", type=int, choices=[1, 2, 3, 4], default=4)
    q.add_argument("--method", choices=["convolution", "ode"], default="convolution")
    q.add_argument("--state", type=int, default=0, help="initial state x of the single starting particle")
    q.set_defaults(func=cmd_moments)

    def sim(q, t_max, step, reps, cap=DEFAULT_CAP):
        q.add_argument("--init", help="initial counts per state (default: one particle at state 0)")
        q.add_argument("--t-max", type=float, default=t_max)
        q.add_argument("--step", type=float, default=step)
        q.add_argument("--reps", type=int, default=reps)
        q.add_argument("--seed", type=int, default=DEFAULT_SEED)
        q.add_argument("--cap", type=int, default=cap, help="population cap per replicate")

    q = sub.add_parser("simulate", help="exact ensemble simulation")
    common(q)
    sim(q, 4.0, 1.0, 1000)
    q.add_argument("--observables", default="W", help="comma list of W and H<k>, e.g. W,H1,H2")
    q.add_argument("--csv", help="path for the per-replicate CSV")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("verify", help="statistical checks: clt, lil, martingale, lln, heyde")
    q.add_argument("mode", choices=["clt", "lil", "martingale", "lln", "heyde"])
    q.add_argument("model", nargs="?", default="two_state_small")
    q.add_argument("--f")
    q.add_argument("--out-dir")
    q.add_argument("--ensemble", help="ensemble CSV written by `simulate`; otherwise one is simulated")
    q.add_argument("--constants", help="constants JSON from `constants`; echoed into the report")
    sim(q, 4.0, 1.0, 20000)
    q.add_argument("--t", type=float, default=8.0, help="clt: evaluation time")
    q.add_argument("--component", choices=[SMALL, CRITICAL, LARGE], default=SMALL)
    q.add_argument("--ks-tol", type=float, default=KS_TOL)
    q.add_argument("--v-tol", type=float, default=V_TOL)
    q.add_argument("--horizon", type=float, default=18.0, help="lil: horizon T")
    q.add_argument("--lo", type=float, default=LIL_BAND[0])
    q.add_argument("--hi", type=float, default=LIL_BAND[1])
    q.add_argument("--fraction", type=float, default=LIL_FRACTION)
    q.add_argument("--min-trajectories", type=int, default=LIL_MIN_TRAJECTORIES)
    q.add_argument("--k", type=int, default=0, help="martingale: eigenvalue index")
    q.add_argument("--pmf", default="0.25,0,0.75", help="heyde: offspring law p_0,p_1,...")
    q.add_argument("--beta", type=float, default=1.0, help="heyde: branching rate of the continuous model")
    q.set_defaults(func=cmd_verify)

    q = sub.add_parser("oracle")
    q.add_argument("--beta", type=float, default=1.0)
    q.add_argument("--t", type=float, default=math.log(2))
    q.add_argument("--p0", type=float, default=0.25)
    q.add_argument("--out-dir")
    q.set_defaults(func=cmd_oracle)
    return p


def _apply_mode_defaults(args, argv):
    """Mode-specific defaults for ``verify`` where one flag serves several modes."""
    if args.command != "verify":
        return
    given = set(argv)
    if args.mode == "lil":
        if "--reps" not in given:
            args.reps = LIL_MIN_TRAJECTORIES
        if "--step" not in given:
            args.step = 0.25
        if "--cap" not in given:
            args.cap = LIL_CAP
    if args.mode == "clt" and "--reps" not in given:
        args.reps = 20000


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_INPUT
        _apply_mode_defaults(args, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ModelValidationError, SpectralError, InsufficientData, ValueError, KeyError, FileNotFoundError) as exc:
        msg = "; ".join(exc.problems) if isinstance(exc, ModelValidationError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
