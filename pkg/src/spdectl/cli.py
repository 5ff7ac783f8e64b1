"""Command-line experiment runner.

    spdectl {check,simulate,energy,optimize,compare} --config run.toml
            [--set section.key=value ...] [--seed N] [--out DIR] [--threads N]

Each run writes its data files plus ``manifest.txt`` into the output
directory.  The manifest is the resolved config preceded by comment lines
(version, backend, timing), so ``spdectl <cmd> --config manifest.txt``
repeats the run.  Data files never contain timestamps.
"""

from __future__ import annotations

import argparse
import csv
import math
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy
import tomli
import tomli_w

from . import __version__, kernels
from . import config as C
from .control import CostSpec, FeedbackFamily, convergence_diag, minimize, path_costs
from .energy import GapWeights, aldous_statistic, energy_stats, uniqueness_gap
from .errors import ConfigError, DivergenceError, OptimizationError, SpdeCtlError
from .hypotheses import run_checks
from .operators import (HypothesisParams, OperatorTriple, TimeTable, make_convection_diffusion,
                        make_heat, make_quasilinear, make_sign_flipped_heat, make_step_operator,
                        v_norm_weight, zero_weight)
from .sim import (THREADS_ENV, SimConfig, default_threads, exit_indices, map_batches,
                  post_process, run_ensemble)
from .space import build_space

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_HYPOTHESIS = 3
EXIT_DIVERGENCE = 4
EXIT_OPTIMIZER = 5
EXIT_IO = 6

COMMANDS = ("check", "simulate", "energy", "optimize", "compare")


# ---------------------------------------------------------------------------
# building objects from a resolved config


def make_space(cfg, m=None):
    s = cfg["space"]
    m = s["m"] if m is None else m
    q = s["quad_order"] if m == s["m"] else None
    return build_space(L=s["L"], m=m, alpha=s["alpha"], quad_order=q)


def make_operator(cfg, space):
    """Operator triple plus the (rho, eta) witnesses and the optional f_B."""
    o = cfg["operator"]
    name = o["name"]
    if name == "heat":
        op = make_heat(space, o["nu"], o["sigma"], o["noise"])
    elif name == "sign_flipped_heat":
        op = make_sign_flipped_heat(space, o["nu"])
    elif name == "step":
        op = make_step_operator(space)
    elif name == "convection_diffusion":
        op = make_convection_diffusion(space, o["nu"], o["b"], o["sigma"], o["noise"])
    else:
        op = make_quasilinear(space, sigma=o["sigma"], noise=o["noise"])
    if o["beta"] is not None:
        p = op.params
        op = OperatorTriple(op.space, op.A, op.Phi, op.B,
                            HypothesisParams(beta=o["beta"], alpha_growth=p.alpha_growth,
                                             zeta=p.zeta, f_A=p.f_A, g_B=p.g_B, f_Phi=p.f_Phi,
                                             C_coerc=p.C_coerc, C_growth=p.C_growth,
                                             C_rho_eta=p.C_rho_eta, C_control=p.C_control),
                            op.label, op.linear_drift)
    beta = op.params.beta
    rho = v_norm_weight(space, o["rho_c"], beta) if o["rho_c"] else zero_weight
    eta = v_norm_weight(space, o["eta_c"], beta) if o["eta_c"] else zero_weight
    f_B = None if o["f_B"] is None else TimeTable.constant(o["f_B"])
    return op, rho, eta, f_B


def pad(values, m):
    out = np.zeros(m)
    if values:
        out[: len(values)] = values
    return out


def make_family(cfg, m=None):
    c = cfg["control"]
    m = cfg["space"]["m"] if m is None else m
    return FeedbackFamily(m, c["gain"], c["n_knots"], c["kappa"], cfg["sim"]["T"])


def control_theta(cfg, family):
    c = cfg["control"]
    if c["kind"] == "zero" or c["theta"] is None:
        return np.zeros(family.dim)
    theta = np.asarray(c["theta"], dtype=float)
    if theta.size != family.dim:
        raise ConfigError(f"control.theta: expected {family.dim} entries for this family, "
                          f"got {theta.size}")
    return theta


def make_sim(cfg, threads, m=None):
    """SimConfig; ``k_noise = 0`` drives all m modes."""
    s = dict(cfg["sim"])
    if s["k_noise"] == 0:
        s["k_noise"] = cfg["space"]["m"] if m is None else m
    return SimConfig(seed=cfg["seed"], threads=threads, **s)


def make_cost(cfg, m):
    c = cfg["cost"]
    return CostSpec(f_mode=c["f_mode"], q=c["q"], r=c["r"], q_T=c["q_T"],
                    x_ref=None if c["x_ref"] is None else pad(c["x_ref"], m),
                    x_T=None if c["x_T"] is None else pad(c["x_T"], m),
                    cap=c["cap"], joint=c["joint"], s=c["s"], exit_level=c["exit_level"])


def resolve_theta_file(cfg, base: Path):
    """Inline a saved control artifact so the manifest is self-contained."""
    path = cfg["control"]["theta_file"]
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_absolute():
        p = base / p
    try:
        doc = tomli.loads(p.read_text())
    except OSError as e:
        raise OSError(f"cannot read control.theta_file {p}: {e.strerror}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"control.theta_file {p}: {e}") from None
    table = doc.get("control")
    if not isinstance(table, dict):
        raise ConfigError(f"control.theta_file {p} has no [control] table")
    cfg = C._merge(cfg, {"control": table})
    cfg["control"]["theta_file"] = None
    cfg["control"]["kind"] = "feedback"
    return C.validate(cfg)


# ---------------------------------------------------------------------------
# output


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(r[h]) for h in header] if isinstance(r, dict) else map(fmt, r))


# ---------------------------------------------------------------------------
# subcommands; each returns (exit code, list of files written)


def cmd_check(cfg, out: Path, threads: int):
    space = make_space(cfg)
    op, rho, eta, f_B = make_operator(cfg, space)
    family = make_family(cfg)
    control = family.feedback(control_theta(cfg, family))
    run = cfg["run"]
    reps = run_checks(op, space, n_samples=run["n_samples"], seed=cfg["seed"],
                      T=cfg["sim"]["T"], r_max=run["r_max"], rho=rho, eta=eta, f_B=f_B,
                      p=run["p"][0], k=cfg["sim"]["k_noise"] or None, control=control)
    rows = [r.row() for r in reps]
    header = list(rows[0])
    write_csv(out / "report.csv", header, rows)
    print(f"hypothesis check: operator={op.label} m={space.m} samples={run['n_samples']} "
          f"r_max={run['r_max']} (certified on the sampled ball only)")
    for r in reps:
        print(f"  {r.hypothesis:4s} {r.status:13s} margin={r.margin: .6e} tol={r.tolerance:.3e}")
    code = EXIT_HYPOTHESIS if any(not r.passed for r in reps) else EXIT_OK
    return code, ["report.csv"]


PATH_HEADER = ["path", "step", "t", "h_norm", "v_norm", "v_beta_running", "exited"]
COST_HEADER = ["J", "stderr", "n_paths", "f", "g", "h", "divergent_fraction",
               "mean_terminal_h_sq", "exit_fraction"]


def cmd_simulate(cfg, out: Path, threads: int):
    space = make_space(cfg)
    op, *_ = make_operator(cfg, space)
    family = make_family(cfg)
    control = family.feedback(control_theta(cfg, family))
    sim = make_sim(cfg, threads)
    spec = make_cost(cfg, space.m)
    run = cfg["run"]
    x0 = pad(cfg["initial"]["x0"], space.m)
    times = sim.times
    steps = np.arange(0, sim.n_steps + 1, run["record_every"])
    if steps[-1] != sim.n_steps:
        steps = np.append(steps, sim.n_steps)

    def reduce(ids, states, status, dW):
        h2, vn, vbr, _ = post_process(space, op, states, status, sim)
        first_exit = exit_indices(h2, vbr, sim)
        ok = status < 0
        f, g, h = path_costs(space, spec, control, times, states[ok])
        rec = []
        for j in np.nonzero(ids < run["n_record"])[0]:
            for s in steps:
                rec.append([int(ids[j]), int(s), float(times[s]), math.sqrt(h2[j, s]),
                            float(vn[j, s]), float(vbr[j, s]), bool(s >= first_exit[j]),
                            *map(float, states[j, s])])
        ex = None
        if spec.exit_level is not None:
            ex = np.max(vn[ok] ** 2, axis=1) >= spec.exit_level
        return f, g, h, rec, int(np.sum(~ok)), h2[ok, -1], ex

    parts = map_batches(space, op, control, x0, sim, run["n_paths"], reduce)
    n_bad = sum(p[4] for p in parts)
    frac = n_bad / run["n_paths"]
    if frac > sim.divergence_cap:
        raise DivergenceError(f"{frac:.2%} of paths diverged (cap {sim.divergence_cap:.2%})",
                              fraction=frac)
    f, g, h, term = (np.concatenate([p[i] for p in parts]) for i in (0, 1, 2, 5))
    rows = [r for p in parts for r in p[3]]
    header = PATH_HEADER + [f"c{k}" for k in range(1, space.m + 1)]
    write_csv(out / "paths.csv", header, rows)
    tot = f + g + h
    n = tot.size
    ex = (float(np.mean(np.concatenate([p[6] for p in parts])))
          if spec.exit_level is not None else None)
    cost = {"J": float(np.mean(f)) + float(np.mean(g)) + float(np.mean(h)),
            "stderr": float(np.std(tot, ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
            "n_paths": n, "f": float(np.mean(f)), "g": float(np.mean(g)), "h": float(np.mean(h)),
            "divergent_fraction": frac, "mean_terminal_h_sq": float(np.mean(term)),
            "exit_fraction": ex}
    write_csv(out / "cost.csv", COST_HEADER, [cost])
    print(f"simulated {run['n_paths']} paths: J = {cost['J']:.6g} ± {cost['stderr']:.2g}, "
          f"E‖X(T)‖² = {cost['mean_terminal_h_sq']:.6g}")
    return EXIT_OK, ["paths.csv", "cost.csv"]


ENERGY_HEADER = ["quantity", "m", "p", "delta", "estimate", "stderr", "bound", "satisfied"]


def cmd_energy(cfg, out: Path, threads: int):
    run = cfg["run"]
    ms = run["m_list"] or [cfg["space"]["m"]]
    for m in ms:
        if cfg["sim"]["k_noise"] > m or len(cfg["initial"]["x0"]) > m:
            raise ConfigError(f"run.m_list: m={m} is smaller than sim.k_noise or initial.x0")
    rows = []
    need_states = bool(run["delta"]) or run["pair_scale"] is not None
    for m in ms:
        sim = make_sim(cfg, threads, m)
        space = make_space(cfg, m)
        op, rho, eta, _ = make_operator(cfg, space)
        family = make_family(cfg, m)
        control = family.feedback(control_theta(cfg, family) if m == cfg["space"]["m"]
                                  else np.zeros(family.dim))
        x0 = pad(cfg["initial"]["x0"], m)
        ens = run_ensemble(space, op, control, x0, sim, run["n_paths"],
                           keep_states=need_states, keep_noise=need_states)
        for p in run["p"]:
            st = energy_stats(ens, space, p=p, C_p=run["C_p"])
            rows.append(dict(quantity="sup_H", m=m, p=p, delta=None, estimate=st.est_sup_H,
                             stderr=st.se_sup_H, bound=st.bound_rhs, satisfied=st.satisfied))
            rows.append(dict(quantity="int_V", m=m, p=p, delta=None, estimate=st.est_int_V,
                             stderr=st.se_int_V, bound=st.bound_rhs, satisfied=st.satisfied))
        for d in run["delta"]:
            est, se = aldous_statistic(ens, space, d, beta=op.params.beta)
            rows.append(dict(quantity="aldous", m=m, p=op.params.beta, delta=d, estimate=est,
                             stderr=se, bound=None, satisfied=None))
        if run["pair_scale"] is not None:
            ens2 = run_ensemble(space, op, control, run["pair_scale"] * x0, sim, run["n_paths"],
                                keep_states=True, keep_noise=True)
            w = GapWeights(op.params.f_A, rho, eta, op.params.f_Phi)
            gap = uniqueness_gap(ens, ens2, space, w)
            i = gap.argmax
            bound = gap.initial_gap
            rows.append(dict(quantity="uniqueness_max", m=m, p=2.0, delta=None,
                             estimate=gap.max_mean, stderr=float(gap.stderr[i]), bound=bound,
                             satisfied=bool(gap.max_mean - 3.0 * gap.stderr[i] <= bound)))
            rows.append(dict(quantity="uniqueness_rate", m=m, p=2.0, delta=None,
                             estimate=gap.growth_rate(), stderr=None, bound=None, satisfied=None))
    write_csv(out / "energy.csv", ENERGY_HEADER, rows)
    for r in rows:
        print("  " + "  ".join(f"{k}={fmt(r[k])}" for k in ENERGY_HEADER if r[k] is not None))
    return EXIT_OK, ["energy.csv"]


HISTORY_HEADER = ["iteration", "J", "stderr", "accepted", "theta_norm"]


def cmd_optimize(cfg, out: Path, threads: int):
    space = make_space(cfg)
    op, *_ = make_operator(cfg, space)
    family = make_family(cfg)
    sim = make_sim(cfg, threads)
    spec = make_cost(cfg, space.m)
    run = cfg["run"]
    theta0 = control_theta(cfg, family)
    x0 = pad(cfg["initial"]["x0"], space.m)
    res = minimize(space, op, family, spec, x0, sim, run["n_paths"], method=run["method"],
                   budget=run["budget"], seed=run["opt_seed"], theta0=theta0, step=run["step"])
    rows = [dict(iteration=h.iteration, J=h.J, stderr=h.stderr, accepted=h.accepted,
                 theta_norm=h.theta_norm) for h in res.history]
    write_csv(out / "history.csv", HISTORY_HEADER, rows)
    artifact = {"control": {"kind": "feedback", "gain": family.gain, "n_knots": family.n_knots,
                            "kappa": family.kappa, "theta": [float(x) for x in res.theta]},
                "result": {"J": res.J, "stderr": res.stderr, "method": res.method,
                           "n_evals": res.n_evals}}
    (out / "theta.toml").write_text(tomli_w.dumps(artifact))
    print(f"{res.method}: best J = {res.J:.8g} ± {res.stderr:.2g} after {res.n_evals} "
          f"evaluations ({len(res.accepted_J)} accepted)")
    return EXIT_OK, ["history.csv", "theta.toml"]


GAPS_HEADER = ["n", "control_gap", "aux_gap", "aux_se", "direct_gap", "direct_se"]


def cmd_compare(cfg, out: Path, threads: int):
    space = make_space(cfg)
    op, *_ = make_operator(cfg, space)
    family = make_family(cfg)
    sim = make_sim(cfg, threads)
    run = cfg["run"]
    lim = control_theta(cfg, family)
    seq = [(1.0 - 2.0**-n) * lim for n in range(1, run["n_seq"] + 1)]
    x0 = pad(cfg["initial"]["x0"], space.m)
    rows = convergence_diag(space, op, family, seq, lim, x0, sim, run["n_paths"],
                            n_probe=run["n_probe"], r_max=run["r_max"], probe_seed=cfg["seed"])
    write_csv(out / "gaps.csv", GAPS_HEADER, [r.__dict__ for r in rows])
    for r in rows:
        print(f"  n={r.n}  control={r.control_gap:.4e}  aux={r.aux_gap:.4e}  "
              f"direct={r.direct_gap:.4e}")
    return EXIT_OK, ["gaps.csv"]


HANDLERS = {"check": cmd_check, "simulate": cmd_simulate, "energy": cmd_energy,
            "optimize": cmd_optimize, "compare": cmd_compare}


# ---------------------------------------------------------------------------


def write_manifest(out: Path, command, cfg, threads, started, wall, code, files):
    lines = [
        "# spdectl run manifest; the config below reproduces the data files",
        f"# subcommand: {command}",
        f"# version: {__version__}",
        f"# backend: {kernels.BACKEND}",
        f"# python: {platform.python_version()}",
        f"# numpy: {np.__version__}",
        f"# scipy: {scipy.__version__}",
        f"# threads: {threads}",
        f"# started: {started}",
        f"# wall_time_s: {wall:.3f}",
        f"# exit_code: {code}",
        f"# outputs: {', '.join(files)}",
        "",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + C.serialize(cfg))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spdectl", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="TOML experiment config (defaults apply when omitted)")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a config entry, e.g. sim.n_steps=500")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--threads", type=int,
                    help=f"worker threads; default from ${THREADS_ENV} or 1")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.config:
            cfg = C.load_config(args.config, overrides)
            base = Path(args.config).parent
        else:
            cfg = C.parse_config("", overrides)
            base = Path.cwd()
        if args.out is not None:
            cfg["output_dir"] = args.out
        cfg = resolve_theta_file(cfg, base)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    threads = args.threads if args.threads is not None else default_threads()
    if threads < 1:
        print("config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"io error: cannot create {out}: {e.strerror}", file=sys.stderr)
        return EXIT_IO
    files: list[str] = []
    try:
        code, files = HANDLERS[args.command](cfg, out, threads)
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        code = EXIT_DIVERGENCE
    except OptimizationError as e:
        print(f"optimizer failure: {e}", file=sys.stderr)
        code = EXIT_OPTIMIZER
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except SpdeCtlError as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        write_manifest(out, args.command, cfg, threads, started, time.perf_counter() - t0,
                       code, files)
    except OSError as e:
        print(f"io error: cannot write manifest: {e.strerror}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
