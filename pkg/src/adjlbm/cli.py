"""Command-line front end: ``adjlbm <command> CONFIG [options]``.

CONFIG is a path to a case file or ``preset:NAME`` for a bundled preset
(``adjlbm presets`` lists them).

Exit codes:

    0  success
    1  other solver error
    2  configuration error
    3  divergence (non-finite or non-positive densities)
    4  a solve did not converge
    5  file input/output error
    6  partition protocol error
    7  verification failed (grad-check tolerance, partition mismatch)
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import io as fio
from .adjoint import CaseObjective, fd_gradient, param_gradient, solve_adjoint
from .cases import poiseuille_deviation
from .collision import solve_fixed_point
from .config import build_case, parse_config, penalty_schedule, preset_names, preset_text, serialize
from .errors import ConvergenceError, LBMError
from .objective import evaluate, outlet_report, raw_objective
from .optimizer import MMAConfig, OneShotConfig, mma_run, one_shot_run, report
from .partition import partitioned_adjoint, partitioned_fixed_point, scaling_report
from .records import RunRecord
from .topology import apply_threshold, design_histogram, threshold_sweep

log = logging.getLogger("adjlbm")

EXIT_IO = 5
EXIT_VERIFY = 7


class VerificationFailed(Exception):
    exit_code = EXIT_VERIFY


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _outdir(cfg, args):
    d = args.out or cfg.output.directory
    os.makedirs(d, exist_ok=True)
    return d


def _path(cfg, args, name):
    return os.path.join(_outdir(cfg, args), f"{cfg.output.prefix}_{name}")


def _load_case(args):
    cfg = parse_config(args.config)
    design = None
    if getattr(args, "design", None):
        design = fio.read_design(args.design, cfg.shape)
    return cfg, build_case(cfg, design)


def _solve(case, cfg, args, f0=None, design=None):
    design = case.design if design is None else design
    f0 = case.initial_state() if f0 is None else f0
    tol = args.tol or cfg.optimizer.tol
    max_iter = args.max_iter or cfg.optimizer.max_iter
    return solve_fixed_point(f0, design, case.model, case.tags, tol=tol, max_iter=max_iter, log_every=1)


def _dump_fields(case, f, design, cfg, args, name):
    csv_path = _path(cfg, args, f"{name}.csv")
    table = fio.field_table(f, design, case.model, case.shape)
    fio.write_field_table(table, csv_path)
    out = [csv_path]
    if cfg.output.vtk:
        vtk = csv_path[:-4] + ".vtk"
        fio.write_vtk(table, case.shape, vtk)
        out.append(vtk)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    cfg, case = _load_case(args)
    f, rec = _solve(case, cfg, args)
    written = _dump_fields(case, f, case.design, cfg, args, "fields")
    state = _path(cfg, args, "state.npz")
    fio.save_state(state, f, case.shape, residual=rec.summary["residual"], tol=args.tol or cfg.optimizer.tol,
                   converged=rec.converged, design=case.design.w, mask=case.design.mask)
    rec.to_csv(_path(cfg, args, "convergence.csv"), ["iter", "residual"])
    obj = raw_objective(case.objective, f, case.model)
    print(f"converged = {str(rec.converged).lower()}")
    print(f"iterations = {rec.summary['iterations']}")
    print(f"residual = {rec.summary['residual']:.3e}")
    print(f"objective = {obj:.12g}")
    for k, v in outlet_report(case.objective, f, case.model).items():
        print(f"outlet_{k} = {v:.6g}")
    if args.poiseuille:
        dev, _, _ = poiseuille_deviation(f, case.model, case.shape)
        print(f"poiseuille_max_deviation = {dev:.4%}")
    for p in written + [state]:
        print(f"wrote {p}")
    if not rec.converged:
        raise ConvergenceError(f"primal solve stopped at residual {rec.summary['residual']:.3e} after {rec.summary['iterations']} iterations")
    return 0


def cmd_adjoint(args):
    cfg, case = _load_case(args)
    snap = fio.load_state(args.state)
    f = snap["f"]
    if snap["shape"] != case.shape:
        raise LBMError(f"snapshot lattice {snap['shape']} does not match the configuration {case.shape}")
    if not bool(snap.get("converged", False)):
        raise ConvergenceError(f"{args.state} holds an unconverged primal state; rerun simulate with more iterations")
    design = case.design
    if "design" in snap:
        design = type(case.design)(snap["design"], snap["mask"])
    tol = args.tol or cfg.optimizer.tol
    v, rec = solve_adjoint(f, design, case.model, case.tags, case.objective, tol=tol,
                           max_iter=args.max_iter or cfg.optimizer.max_iter)
    gv = param_gradient(v, f, design, case.model, case.tags)
    gpath = _path(cfg, args, "gradient.csv")
    fio.write_gradient(gv, case.shape, gpath)
    np.savez(_path(cfg, args, "adjoint.npz"), v=v)
    print(f"converged = {str(rec.converged).lower()}")
    print(f"iterations = {rec.summary['iterations']}")
    print(f"residual = {rec.summary['residual']:.3e}")
    print(f"gradient_norm = {gv.norm:.6e}")
    for k, val in gv.globals.items():
        print(f"dF_d{k} = {val:.12g}")
    print(f"wrote {gpath}")
    if not rec.converged:
        raise ConvergenceError("adjoint solve did not reach the tolerance")
    return 0


def cmd_grad_check(args):
    cfg, case = _load_case(args)
    tol = args.tol or cfg.optimizer.tol
    t0 = time.perf_counter()
    f, prec = solve_fixed_point(case.initial_state(), case.design, case.model, case.tags, tol=tol,
                                max_iter=cfg.optimizer.max_iter, log_every=0)
    if not prec.converged:
        raise ConvergenceError("primal solve did not converge")
    v, arec = solve_adjoint(f, case.design, case.model, case.tags, case.objective, tol=tol,
                            max_iter=cfg.optimizer.max_iter)
    gv = param_gradient(v, f, case.design, case.model, case.tags)
    fobj = CaseObjective(case, f, tol=tol, max_iter=cfg.optimizer.max_iter)
    x0 = fobj.vector()
    rng = np.random.default_rng(cfg.optimizer.seed)
    n_design = len(gv.design)
    k = min(args.components or cfg.optimizer.grad_components, n_design)
    comps = sorted(rng.choice(n_design, size=k, replace=False).tolist()) + [len(x0) - 1]
    steps = list(cfg.optimizer.fd_steps)
    fd = fd_gradient(fobj, x0, comps, step=steps)
    adj = gv.as_array()[comps]
    rel = np.abs(fd - adj[None, :]) / np.maximum(np.abs(adj[None, :]), 1e-300)
    best = rel.min(axis=0)
    best_step = np.asarray(steps)[rel.argmin(axis=0)]
    coords = case.shape.coords()
    print(f"{'component':>16} {'adjoint':>22} {'finite difference':>22} {'step':>8} {'rel. error':>11}")
    rows = []
    for c, (i, a, e, h) in enumerate(zip(comps, adj, best, best_step)):
        if i < n_design:
            node = gv.design_nodes[i]
            label = f"w({coords[0][node]},{coords[1][node]},{coords[2][node]})"
        else:
            label = "inlet_dp"
        fdv = fd[int(np.argmin(rel[:, c])), c]
        rows.append((label, a, fdv, h, e))
        print(f"{label:>16} {a:22.14e} {fdv:22.14e} {h:8.0e} {e:11.3e}")
    worst = float(best.max())
    print(f"max_relative_error = {worst:.3e}")
    print(f"seconds = {time.perf_counter() - t0:.1f}")
    with open(_path(cfg, args, "gradcheck.csv"), "w") as fh:
        fh.write("component,adjoint,finite_difference,step,relative_error\n")
        for r in rows:
            fh.write(f"{r[0]},{fio.fmt(r[1])},{fio.fmt(r[2])},{r[3]:g},{fio.fmt(r[4])}\n")
    if worst >= args.threshold:
        raise VerificationFailed(f"max relative error {worst:.3e} exceeds {args.threshold:g}")
    return 0


def cmd_optimize(args):
    cfg, case = _load_case(args)
    op = cfg.optimizer
    conv_path = _path(cfg, args, "convergence.csv")
    record = RunRecord()
    snap_every = cfg.output.snapshot_every
    last = {"design": case.design}

    def snapshot(it, design, f, v):
        last["design"] = design.copy()
        if snap_every and (it + 1) % snap_every == 0:
            fio.write_design(design, case.shape, _path(cfg, args, f"design_{it + 1:08d}.csv"))
            _dump_fields(case, f, design, cfg, args, f"fields_{it + 1:08d}")

    try:
        if op.method == "oneshot":
            conf = OneShotConfig(zeta=op.zeta, total_iterations=args.iterations or op.iterations,
                                 penalty=penalty_schedule(cfg), snapshot_interval=op.snapshot_interval,
                                 normalize=op.normalize, snapshot_callback=snapshot)
            design, record, f, _ = one_shot_run(case, conf, record=record)
        else:
            conf = MMAConfig(outer_iterations=args.iterations or op.outer_iterations, tol=op.tol,
                             max_inner=op.max_iter, adjoint_mode=op.adjoint_mode, move=op.move,
                             penalty=penalty_schedule(cfg), stop_change=op.stop_change)
            design, record, f = mma_run(case, conf, record=record)
    except LBMError:
        fio.write_design(last["design"], case.shape, _path(cfg, args, "design_last.csv"))
        if len(record):
            record.to_csv(conv_path)
        raise
    record.to_csv(conv_path, _trace_columns(record))
    dpath = _path(cfg, args, "design.csv")
    fio.write_design(design, case.shape, dpath)
    # final converged evaluation of the optimised design
    f, prec = _solve(case, cfg, args, f0=f, design=design)
    _dump_fields(case, f, design, cfg, args, "fields")
    rep = report(case, f, design)
    for k, v in rep.items():
        print(f"{k} = {v:.8g}")
    print(f"primal_iterations = {record.summary['primal_iterations']}")
    print(f"wrote {dpath}")
    print(f"wrote {conv_path}")
    return 0


def _trace_columns(record):
    head = ["iter", "objective", "penalty", "weight", "composite"]
    return head + sorted(c for c in record.history if c not in head)


def cmd_threshold(args):
    cfg, case = _load_case(args)
    if not args.design and not cfg.tags.design_file and cfg.tags.fins is None:
        log.warning("no design given; sweeping the configured initial design")
    a, b, n = cfg.optimizer.eta_grid
    grid = np.linspace(a, b, n)
    f_warm = case.initial_state()

    def evaluator(d):
        f, rec = solve_fixed_point(f_warm, d, case.model, case.tags, tol=args.tol or cfg.optimizer.tol,
                                   max_iter=cfg.optimizer.max_iter, log_every=0)
        if not rec.converged:
            raise ConvergenceError("threshold evaluation did not converge")
        return evaluate(case.objective, f, d, case.model, penalty_weight=0.0)

    best_eta, curve = threshold_sweep(case.design, grid, evaluator)
    cpath = _path(cfg, args, "threshold.csv")
    fio.write_curve(curve, cpath)
    for eta, val in curve:
        print(f"eta = {eta:.4f}  objective = {val:.10g}")
    if best_eta is None:
        raise ConvergenceError("no threshold level produced a converged evaluation")
    binary = apply_threshold(case.design, best_eta)
    fio.write_design(binary, case.shape, _path(cfg, args, "design_thresholded.csv"))
    print(f"best_eta = {best_eta:.4f}")
    print(f"wrote {cpath}")
    return 0


def cmd_partition_test(args):
    cfg, case = _load_case(args)
    from .adjoint import Linearization, adjoint_step
    from .collision import primal_step

    n = args.workers or cfg.optimizer.workers
    steps = args.steps
    ref = case.initial_state()
    worst = {"primal": 0.0, "adjoint": 0.0}

    state = {"f": ref}

    def check_primal(step, f):
        state["f"] = primal_step(state["f"], case.design, case.model, case.tags)
        worst["primal"] = max(worst["primal"], float(np.max(np.abs(f - state["f"]))))

    res = partitioned_fixed_point(case, n, n_steps=steps, callback=check_primal)
    f_hat = res.field
    lin = Linearization(f_hat, case.design, case.model, case.tags)
    vstate = {"v": np.zeros_like(f_hat)}

    def check_adjoint(step, v):
        vstate["v"] = adjoint_step(vstate["v"], f_hat, case.design, case.model, case.tags, case.objective,
                                   linearization=lin)
        worst["adjoint"] = max(worst["adjoint"], float(np.max(np.abs(v - vstate["v"]))))

    partitioned_adjoint(f_hat, n, case.design, case.model, case.tags, case.objective, n_steps=steps,
                        callback=check_adjoint)
    print(f"workers = {n}")
    print(f"steps = {steps}")
    print(f"halo_slots_per_step = {res.slots_per_step}")
    print(f"primal_max_diff = {worst['primal']:.3e}")
    print(f"adjoint_max_diff = {worst['adjoint']:.3e}")
    if args.scaling:
        rows = scaling_report(case, workers=sorted({1, n}), n_steps=min(steps, 200),
                              path=_path(cfg, args, "scaling.csv"))
        for r in rows:
            print(f"scaling workers={r[0]} primal={r[1]:.1f}/s adjoint={r[2]:.1f}/s ratio={r[3]:.3f}")
    if max(worst.values()) >= args.threshold:
        raise VerificationFailed(f"partitioned run differs from monolithic by {max(worst.values()):.3e}")
    return 0


def cmd_presets(args):
    if args.name:
        sys.stdout.write(preset_text(args.name))
    else:
        for name in preset_names():
            print(name)
    return 0


def cmd_show_config(args):
    cfg = parse_config(args.config)
    sys.stdout.write(serialize(cfg))
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="adjlbm", description="Adjoint lattice Boltzmann topology optimisation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, design=True):
        sp.add_argument("config", help="case file or preset:NAME")
        sp.add_argument("--out", help="output directory (overrides [output] directory)")
        sp.add_argument("--tol", type=float, help="fixed-point tolerance (overrides [optimizer] tol)")
        sp.add_argument("--max-iter", type=int, help="iteration cap for fixed-point solves")
        if design:
            sp.add_argument("--design", help="design CSV (x,y,z,w[,design]) to use instead of the configured one")

    sp = sub.add_parser("simulate", help="primal fixed point and field dump")
    common(sp)
    sp.add_argument("--poiseuille", action="store_true", help="report deviation from the Poiseuille parabola")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("adjoint", help="adjoint solve and gradient dump from a converged primal snapshot")
    common(sp, design=False)
    sp.add_argument("--state", required=True, help="state .npz written by simulate")
    sp.set_defaults(func=cmd_adjoint)

    sp = sub.add_parser("grad-check", help="adjoint gradient against central finite differences")
    common(sp)
    sp.add_argument("--components", type=int, help="number of random design components")
    sp.add_argument("--threshold", type=float, default=1e-5, help="fail above this relative error")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("optimize", help="one-shot or MMA optimisation as configured")
    common(sp)
    sp.add_argument("--iterations", type=int, help="override the iteration (one-shot) or outer-iteration (MMA) count")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("threshold", help="threshold sweep of a design and the eta,objective curve")
    common(sp)
    sp.set_defaults(func=cmd_threshold)

    sp = sub.add_parser("partition-test", help="partitioned against monolithic stepping")
    common(sp)
    sp.add_argument("--workers", type=int, help="number of slabs (overrides [optimizer] workers)")
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--threshold", type=float, default=1e-12)
    sp.add_argument("--scaling", action="store_true", help="also write the steps-per-second scaling CSV")
    sp.set_defaults(func=cmd_partition_test)

    sp = sub.add_parser("presets", help="list bundled presets or print one")
    sp.add_argument("name", nargs="?")
    sp.set_defaults(func=cmd_presets)

    sp = sub.add_parser("show-config", help="print a configuration with every default filled in")
    sp.add_argument("config")
    sp.set_defaults(func=cmd_show_config)
    return p


def run_command(argv=None) -> int:
    """Parse ``argv``, run the command and map failures to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (LBMError, VerificationFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
