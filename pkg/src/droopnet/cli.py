"""Command-line entry point: ``droopnet {check,simulate,share,spectrum} SCENARIO``.

Exit codes: 0 success / feasible, 1 input or solver error, 2 infeasible or a violated
constraint.
"""

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import scenario as scn
from .analysis import (
    check_sync,
    classify_spectrum,
    dapi_spectrum,
    droop_jacobian_spectrum,
    is_proportional,
    parallel_condition,
    robust_stress,
    sharing_check,
)
from .dynamics import SimOptions, measure_sync, simulate_dapi, simulate_droop, simulate_voltage_droop_ext
from .exceptions import DroopNetError, InfeasibleError, PreconditionError, StructuralError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


class _Outcome:
    def __init__(self, code, text="", data=None, warnings=()):
        self.code = code
        self.text = text
        self.data = data
        self.warnings = list(warnings)


def _load(path, load_override):
    s = scn.load(path)
    if load_override is not None:
        s = s.with_load(load_override)
    return s


def check_document(s):
    """Machine-readable feasibility report for a parsed scenario."""
    report = check_sync(s.net, s.params)
    doc = {"scenario": s.path, "digest": s.digest, "sync": report.to_dict()}
    try:
        doc["parallel_stress"] = parallel_condition(s.net, s.params)
    except StructuralError:
        doc["parallel_stress"] = None
    if s.robust is not None:
        stress = robust_stress(s.net, s.params, *s.robust)
        doc["robust"] = {"stress": stress, "feasible": stress < 1.0}
    return report, doc


def _check_text(s, report, doc):
    lines = [f"scenario = {s.path}"]
    lines.append(report.to_text())
    if doc.get("parallel_stress") is not None:
        lines.append(f"parallel_stress = {doc['parallel_stress']:.12g}")
    if "robust" in doc:
        lines.append(f"robust_stress = {doc['robust']['stress']:.12g}")
        lines.append(f"robust_feasible = {'yes' if doc['robust']['feasible'] else 'no'}")
    lines.append(f"verdict = {'feasible' if report.feasible else 'infeasible'}")
    return "\n".join(lines)


def cmd_check(path, load=None):
    s = _load(path, load)
    report, doc = check_document(s)
    code = EXIT_OK if report.feasible else EXIT_INFEASIBLE
    return _Outcome(code, _check_text(s, report, doc), doc)


def cmd_share(path, load=None):
    s = _load(path, load)
    warnings = []
    if not is_proportional(s.params):
        warnings.append(
            "warning: droop coefficients are not proportional (P*/D and P*/rating differ "
            "across inverters); injections will not be shared in proportion to ratings"
        )
    report = check_sync(s.net, s.params)
    if not report.feasible:
        raise InfeasibleError(report.stress, f"flows are infeasible (stress {report.stress:.6g} >= 1); run 'droopnet check' for details")
    share = sharing_check(s.net, s.params, report, require_proportional=False)
    names = [s.net.names[k] for k in s.net.inverter_nodes]
    lines = [f"scenario = {s.path}", f"total_load_W = {share.total_load:.12g}"]
    for name, P, r in zip(names, share.injections, share.ratios):
        lines.append(f"{name}: injection_W = {P:.12g}  ratio = {r:.12g}")
    if share.ratios_equal:
        lines.append(f"common_ratio = {share.ratios[0]:.12g}")
    if share.at_rating:
        lines.append("status = at rating (load equals total capacity)")
    elif share.at_zero:
        lines.append("status = at zero load")
    elif share.within_limits:
        lines.append("status = within limits")
    else:
        lines.append(f"status = VIOLATED: need -{np.sum(s.params.ratings):.12g} <= total load <= 0 W")
    doc = {
        "scenario": s.path,
        "inverters": names,
        "injections_W": share.injections.tolist(),
        "ratios": share.ratios.tolist(),
        "total_load_W": share.total_load,
        "within_limits": share.within_limits,
        "ratios_equal": share.ratios_equal,
        "at_rating": share.at_rating,
        "at_zero": share.at_zero,
    }
    code = EXIT_OK if share.within_limits else EXIT_INFEASIBLE
    return _Outcome(code, "\n".join(lines), doc, warnings)


def spectrum_of(s, controller):
    report = check_sync(s.net, s.params)
    if not report.feasible:
        raise InfeasibleError(report.stress, f"no equilibrium: stress {report.stress:.6g} >= 1")
    if controller == "droop":
        ev = droop_jacobian_spectrum(s.net, s.params, report.equilibrium).astype(complex)
    else:
        if s.comm is None:
            raise PreconditionError("the dapi spectrum needs a [comm] section")
        ev = dapi_spectrum(s.net, s.params, s.comm, report.equilibrium)
    return ev, classify_spectrum(ev)


def cmd_spectrum(path, controller="dapi"):
    s = scn.load(path)
    ev, verdict = spectrum_of(s, controller)
    radius = float(np.max(np.abs(ev))) if ev.size else 0.0
    lines = [f"scenario = {s.path}", f"controller = {controller}"]
    for k, lam in enumerate(ev):
        mark = "  (structural zero)" if abs(lam) <= 1e-8 * radius else ""
        lines.append(f"eig_{k} = {lam.real:.12g} {lam.imag:+.6g}j{mark}")
    lines.append(f"zero = {verdict.n_zero}  negative = {verdict.n_negative}  positive = {verdict.n_positive}")
    lines.append(f"verdict = {'stable' if verdict.stable else 'NOT stable'}")
    doc = {
        "scenario": s.path,
        "controller": controller,
        "eigenvalues_real": ev.real.tolist(),
        "eigenvalues_imag": ev.imag.tolist(),
        "n_zero": verdict.n_zero,
        "n_negative": verdict.n_negative,
        "n_positive": verdict.n_positive,
        "stable": verdict.stable,
    }
    return _Outcome(EXIT_OK if verdict.stable else EXIT_INFEASIBLE, "\n".join(lines), doc)


def run_simulation(s, controller, opts=None):
    opts = opts or s.opts
    if controller == "droop":
        return simulate_droop(s.net, s.params, s.schedule, s.state0, s.tspan, opts)
    if s.comm is None:
        raise PreconditionError(f"controller {controller!r} needs a [comm] section in the scenario")
    if controller == "dapi":
        return simulate_dapi(s.net, s.params, s.comm, s.schedule, s.state0, s.tspan, opts)
    if s.extension is None:
        raise PreconditionError("controller 'dapi-volt' needs an [extension] section in the scenario")
    return simulate_voltage_droop_ext(s.net, s.params, s.extension, s.comm, s.schedule, s.state0, s.tspan, opts)


def cmd_simulate(path, controller=None, out=None, overrides=None):
    s = scn.load(path)
    controller = controller or s.controller
    opts = s.opts
    if overrides:
        opts = SimOptions(**{**opts.to_dict(), **overrides})
    traj = run_simulation(s, controller, opts)
    traj.metadata["scenario_digest"] = s.digest
    if out is not None:
        traj.to_csv(out)
    duration = traj.t[-1] - traj.t[0]
    window = min(0.5, duration / 4)
    meas = measure_sync(traj, window)
    f_end = traj.frequency_hz(s.frequency_hz)[-1]
    lines = [
        f"scenario = {s.path}",
        f"controller = {controller}",
        f"samples = {traj.t.shape[0]}",
        f"omega_sync_rad_s = {meas.omega_sync:.12g}",
        f"omega_sync_Hz = {meas.omega_sync / (2 * math.pi):.12g}",
        f"sync_error_rad = {meas.sync_error:.6g}",
        f"decay_rate_per_s = {meas.decay_rate:.6g}",
        "final_frequency_Hz = " + " ".join(f"{v:.9f}" for v in f_end),
        "final_injection_W = " + " ".join(f"{v:.9g}" for v in traj.injections[-1]),
    ]
    if traj.voltages is not None:
        lines.append("final_voltage_V = " + " ".join(f"{v:.9g}" for v in traj.voltages[-1]))
    if out is not None:
        lines.append(f"csv = {out}")
    doc = {
        "scenario": s.path,
        "controller": controller,
        "omega_sync": meas.omega_sync,
        "sync_error": meas.sync_error,
        "decay_rate": None if math.isnan(meas.decay_rate) else meas.decay_rate,
        "final_frequency_Hz": f_end.tolist(),
        "final_injection_W": traj.injections[-1].tolist(),
    }
    return _Outcome(EXIT_OK, "\n".join(lines), doc)


def _guard(fn, *args, **kwargs):
    """Run a command, mapping library errors onto exit codes."""
    try:
        return fn(*args, **kwargs)
    except InfeasibleError as exc:
        return _Outcome(EXIT_INFEASIBLE, "", None, [f"error: {exc}"])
    except DroopNetError as exc:
        return _Outcome(EXIT_ERROR, "", None, [f"error: {exc}"])
    except (OSError, ValueError) as exc:
        return _Outcome(EXIT_ERROR, "", None, [f"error: {exc}"])


def _emit(outcome, as_json, stdout, stderr):
    for w in outcome.warnings:
        print(w, file=stderr)
    if as_json and outcome.data is not None:
        print(json.dumps(outcome.data, indent=2, sort_keys=True), file=stdout)
    elif outcome.text:
        print(outcome.text, file=stdout)


def build_parser():
    p = argparse.ArgumentParser(prog="droopnet", description="Droop-controlled microgrid analysis and simulation.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", help="synchronization feasibility report")
    c.add_argument("scenarios", nargs="+", metavar="SCENARIO")
    c.add_argument("--load", type=float, help="hold every load at this power (W)")
    c.add_argument("--json", action="store_true", help="machine-readable output")
    c.add_argument("--sweep", action="store_true", help="check scenarios concurrently")
    c.add_argument("--workers", type=int, default=4)

    s = sub.add_parser("simulate", help="integrate the closed loop and write a CSV trajectory")
    s.add_argument("scenario", metavar="SCENARIO")
    s.add_argument("--controller", choices=["droop", "dapi", "dapi-volt"])
    s.add_argument("--out", help="CSV output path")
    s.add_argument("--method", choices=["rk4", "adaptive"])
    s.add_argument("--mode", choices=["newton", "perturbation"])
    s.add_argument("--frame", choices=["nominal", "rotating"])
    s.add_argument("--step", type=float, help="fixed RK4 step (s)")
    s.add_argument("--json", action="store_true")

    h = sub.add_parser("share", help="steady-state power sharing table")
    h.add_argument("scenario", metavar="SCENARIO")
    h.add_argument("--load", type=float, help="hold every load at this power (W)")
    h.add_argument("--json", action="store_true")

    e = sub.add_parser("spectrum", help="linearization eigenvalues at the equilibrium")
    e.add_argument("scenario", metavar="SCENARIO")
    e.add_argument("--controller", choices=["droop", "dapi"], default="dapi")
    e.add_argument("--json", action="store_true")
    return p


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)

    if args.command == "check":
        if args.sweep and len(args.scenarios) > 1:
            with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
                outcomes = list(pool.map(lambda path: _guard(cmd_check, path, args.load), args.scenarios))
        else:
            outcomes = [_guard(cmd_check, path, args.load) for path in args.scenarios]
        if args.json and len(outcomes) > 1:
            docs = [o.data for o in outcomes]
            for o in outcomes:
                for w in o.warnings:
                    print(w, file=stderr)
            print(json.dumps(docs, indent=2, sort_keys=True), file=stdout)
        else:
            for k, o in enumerate(outcomes):
                if k:
                    print("", file=stdout)
                _emit(o, args.json, stdout, stderr)
        # any input error dominates, then infeasibility
        codes = [o.code for o in outcomes]
        return EXIT_ERROR if EXIT_ERROR in codes else max(codes)

    if args.command == "simulate":
        overrides = {k: v for k, v in (("method", args.method), ("mode", args.mode), ("frame", args.frame), ("step", args.step)) if v is not None}
        outcome = _guard(cmd_simulate, args.scenario, args.controller, args.out, overrides)
    elif args.command == "share":
        outcome = _guard(cmd_share, args.scenario, args.load)
    else:
        outcome = _guard(cmd_spectrum, args.scenario, args.controller)
    _emit(outcome, args.json, stdout, stderr)
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())
