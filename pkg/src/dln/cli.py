"""Command-line harness: coefficient dumps, convergence tables, adaptive runs.

Every output embeds its full configuration and a content hash; reruns with the
same configuration and seed reproduce the data columns byte for byte (the
wall-time column is informational and excluded from the hash).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from dln.adaptive import (
    ControllerConfig,
    adapt_loop_lte,
    adapt_loop_nd,
)
from dln.coefficients import StepPair, Theta, one_leg_coefficients, refactor_coefficients
from dln.ivp import IvpProblem, StageSolveConfig, integrate_fixed
from dln.nse2d import (
    NSE_EXTRA_COLUMNS,
    ManufacturedCase,
    NseDlnStepper,
    run_fixed,
    stability_monitor,
    write_snapshot,
)
from dln.spectral import Grid2D, bochner_l2_beta

DEFAULT_THETAS = (2.0 / 3.0, 2.0 / math.sqrt(5.0), 1.0)


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(" ", "").split(",") if v]


def write_table(path: Path, columns: list[str], rows: list[list], config: dict,
                unhashed: tuple[str, ...] = ("wall_time",)) -> None:
    """CSV with a config echo and a hash over the deterministic columns."""
    hashed_idx = [i for i, c in enumerate(columns) if c not in unhashed]

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    data_lines = [",".join(columns)] + [",".join(fmt(v) for v in row) for row in rows]
    hashed_lines = [",".join(columns[i] for i in hashed_idx)] + [
        ",".join(fmt(row[i]) for i in hashed_idx) for row in rows
    ]
    digest = hashlib.sha256("\n".join(hashed_lines).encode()).hexdigest()
    with open(path, "w") as fh:
        fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        fh.write("# sha256: " + digest + "\n")
        fh.write("\n".join(data_lines) + "\n")


def rate_column(errors: list[float]) -> list[float]:
    """R = log(error(k)/error(k/2)) / log 2, aligned with the finer level."""
    rates = [float("nan")]
    for a, b in zip(errors, errors[1:]):
        rates.append(math.log(a / b) / math.log(2.0) if a > 0 and b > 0 else float("nan"))
    return rates


def make_ode_problem() -> IvpProblem:
    """Manufactured linear test y' = -y + sin t with a known solution."""

    def exact(t):
        return np.array([1.5 * math.exp(-t) + 0.5 * (math.sin(t) - math.cos(t))])

    return IvpProblem(
        dimension=1,
        rhs=lambda t, y: -y + math.sin(t),
        jacobian=lambda t, y: np.array([[-1.0]]),
        exact_solution=exact,
    )


def random_schedule(t_span: float, k_base: float, rng: np.random.Generator) -> np.ndarray:
    """Positive steps covering t_span with consecutive ratios inside [0.5, 2]."""
    steps = []
    k = k_base
    total = 0.0
    while total < t_span:
        steps.append(k)
        total += k
        ratio = rng.uniform(0.5, 2.0)
        k = min(max(k * ratio, 0.5 * k_base), 2.0 * k_base)
    # rescale proportionally so the span is covered exactly and every
    # consecutive ratio stays inside [0.5, 2]
    return np.array(steps) * (t_span / total)


def cmd_coeffs(args, config: dict) -> int:
    thetas = args.theta or [0.0, 0.25, 2.0 / 3.0, 2.0 / math.sqrt(5.0), 1.0]
    eps_list = args.eps or [-0.5, 0.0, 0.5]
    columns = [
        "theta", "eps",
        "alpha0", "alpha1", "alpha2",
        "beta0", "beta1", "beta2",
        "gamma0", "gamma1", "gamma2",
        "khat_unit", "sum_alpha", "sum_beta",
        "a1", "a0", "b", "c2", "c1", "c0",
    ]
    rows = []
    for th in thetas:
        for eps in eps_list:
            pair = StepPair(1.0 + eps, 1.0 - eps)  # unit total step, prescribed eps
            c = one_leg_coefficients(Theta(th), pair)
            rc = refactor_coefficients(Theta(th), pair)
            rows.append([
                th, eps,
                float(c.alpha[0]), float(c.alpha[1]), float(c.alpha[2]),
                float(c.beta[0]), float(c.beta[1]), float(c.beta[2]),
                float(c.gamma[0]), float(c.gamma[1]), float(c.gamma[2]),
                float(c.khat), float(c.alpha.sum()), float(c.beta.sum()),
                rc.a1, rc.a0, rc.b, rc.c2, rc.c1, rc.c0,
            ])
    out = Path(args.out) / "coeffs.csv"
    write_table(out, columns, rows, config)
    print(f"wrote {out}")
    bad = [r for r in rows if abs(r[12]) > 1e-13 or abs(r[13] - 1.0) > 1e-13]
    if bad:
        print(f"INVARIANT FAIL: {len(bad)} rows violate the consistency sums")
        return 1
    return 0


def cmd_ivp_converge(args, config: dict) -> int:
    thetas = args.theta or list(DEFAULT_THETAS)
    problem = make_ode_problem()
    stage = StageSolveConfig(method="linear-direct")
    rng = np.random.default_rng(args.seed)
    t_end = args.t_end or 5.0
    k0 = args.k0 or 1.0 / 20.0
    levels = args.levels

    columns = ["theta", "schedule", "level", "k_max", "err_max", "rate", "wall_time"]
    rows = []
    failures = []
    curves = {}
    for th in thetas:
        for schedule in (["constant", "random"] if args.schedule == "both" else [args.schedule]):
            errs, kmaxes = [], []
            for lev in range(levels):
                k = k0 / 2**lev
                tick = time.perf_counter()
                if schedule == "constant":
                    steps = np.full(int(round(t_end / k)), k)
                else:
                    steps = random_schedule(t_end, k, rng)
                y0 = problem.exact_solution(0.0)
                y1 = problem.exact_solution(steps[0])
                traj = integrate_fixed(problem, 0.0, y0, y1, steps, Theta(th), stage)
                err = float(traj.errors_vs_exact(problem.exact_solution).max())
                wall = time.perf_counter() - tick
                errs.append(err)
                kmaxes.append(float(steps.max()))
                rows.append([th, schedule, lev, kmaxes[-1], err, float("nan"), wall])
            rates = rate_column(errs)
            for i, r in enumerate(rates):
                rows[len(rows) - levels + i][5] = r
            observed = [r for r in rates if not math.isnan(r)]
            mean_rate = sum(observed) / len(observed)
            bound = 2.0 - 0.2 if schedule == "constant" else 1.8
            if schedule == "constant" and abs(mean_rate - 2.0) > 0.2:
                failures.append(f"theta={th} constant rate {mean_rate:.3f} outside 2.0 +/- 0.2")
            if schedule == "random" and mean_rate < bound:
                failures.append(f"theta={th} random rate {mean_rate:.3f} < {bound}")
            curves[f"theta={th:.4g} ({schedule})"] = errs
    out = Path(args.out) / "ivp_converge.csv"
    write_table(out, columns, rows, config)
    print(f"wrote {out}")
    if args.plot:
        from dln.plots import plot_convergence

        ks = [k0 / 2**lev for lev in range(levels)]
        fig_path = Path(args.out) / "ivp_converge.svg"
        plot_convergence(ks, curves, fig_path, "ODE temporal convergence")
        print(f"wrote {fig_path}")
    for msg in failures:
        print("INVARIANT FAIL:", msg)
    return 1 if failures else 0


def cmd_nse_converge(args, config: dict) -> int:
    thetas = args.theta or list(DEFAULT_THETAS)
    n = args.grid or 64
    tau = args.tau or 100.0
    case = ManufacturedCase(args.case or "taylor_green_decay", omega=1.0, tau=tau)
    grid = Grid2D(n, 2.0)
    t_end = args.t_end or 1.0
    ks = args.k_list or [1 / 16, 1 / 32, 1 / 64, 1 / 128]

    columns = ["theta", "k", "err_u_inf0", "rate_u_inf0", "err_u_inf1", "rate_u_inf1",
               "err_p_l2beta", "rate_p", "max_identity_residual", "max_div_rel", "wall_time"]
    rows = []
    failures = []
    curves = {}
    for th in thetas:
        eu, eh, ep = [], [], []
        block = []
        for k in ks:
            run = run_fixed(grid, case, Theta(th), k=k, t_end=t_end, t0=-k, measure_from=0.0)
            if not stability_monitor(run).ok:
                failures.append(f"theta={th} k={k}: stability bound violated")
            eu.append(float(run.err_u_l2.max()))
            eh.append(float(run.err_u_h1.max()))
            ep.append(bochner_l2_beta(run.step_sums, run.err_p_l2))
            block.append([th, k, eu[-1], float("nan"), eh[-1], float("nan"), ep[-1], float("nan"),
                          float(np.abs(run.identity_residual).max()), float(run.div_rel.max()),
                          run.wall_time])
        for col, errs in ((3, eu), (5, eh), (7, ep)):
            for i, r in enumerate(rate_column(errs)):
                block[i][col] = r
        rows.extend(block)
        u_rates = [r[3] for r in block[1:]]
        p_rates = [r[7] for r in block[1:]]
        mean_u = sum(u_rates) / len(u_rates)
        mean_p = sum(p_rates) / len(p_rates)
        if mean_u < 2.0:
            failures.append(f"theta={th} velocity order {mean_u:.3f} < 2.0")
        if abs(mean_p - 2.0) > 0.4:
            failures.append(f"theta={th} pressure order {mean_p:.3f} outside 2.0 +/- 0.4")
        if any(r[8] > 1e-8 for r in block):
            failures.append(f"theta={th} energy-identity residual above 1e-8")
        if any(r[9] > 1e-10 for r in block):
            failures.append(f"theta={th} relative divergence above 1e-10")
        curves[f"u theta={th:.4g}"] = eu
        curves[f"p theta={th:.4g}"] = ep
    out = Path(args.out) / "nse_converge.csv"
    write_table(out, columns, rows, config)
    print(f"wrote {out}")
    if args.plot:
        from dln.plots import plot_convergence

        fig_path = Path(args.out) / "nse_converge.svg"
        plot_convergence(ks, curves, fig_path, f"NSE temporal convergence ({n}x{n})")
        print(f"wrote {fig_path}")
    h = grid.length / n
    print(f"time-diameter check: k_max={max(ks):.4g} vs h^(1/4)={h ** 0.25:.4g} "
          f"({'satisfied' if max(ks) <= h ** 0.25 else 'violated (logged only)'})")
    for msg in failures:
        print("INVARIANT FAIL:", msg)
    return 1 if failures else 0


def cmd_nse_adapt(args, config: dict) -> int:
    thetas = args.theta or [2.0 / 3.0, 2.0 / math.sqrt(5.0)]
    n = args.grid or 48
    tau = args.tau or 2500.0
    case = ManufacturedCase(args.case or "taylor_green_growth", omega=1.0, tau=tau)
    grid = Grid2D(n, 2.0)
    t_end = args.t_end or 10.0
    k0 = args.k0 or 5e-4
    algorithms = ["lte", "nd"] if args.algorithm == "both" else [args.algorithm]

    failures = []
    summary_rows = []
    counts = {}
    for th in thetas:
        stepper = NseDlnStepper(grid, case, Theta(th))
        u0, u1 = stepper.initial_states(0.0, k0)
        for alg in algorithms:
            tol = args.tol or (1e-7 if alg == "lte" else 1e-14)
            cfg = ControllerConfig(
                tol=tol,
                kappa=args.kappa or 0.95,
                k_min=args.kmin or 5e-4,
                k_max=args.kmax or 0.05,
                estimator_kind="relative",
            )
            final = {}

            def keep_final(t, y, row):
                final.update(t=t, y=y, k=row.k_n, index=row.attempt_index)

            tick = time.perf_counter()
            if alg == "lte":
                ledger = adapt_loop_lte(stepper, Theta(th), cfg, 0.0, u0, u1, k0, t_end,
                                        extra_columns=NSE_EXTRA_COLUMNS, on_accept=keep_final)
            else:
                ledger = adapt_loop_nd(stepper, Theta(th), cfg, 0.0, u0, u1, k0, t_end,
                                       extra_columns=NSE_EXTRA_COLUMNS, on_accept=keep_final)
            wall = time.perf_counter() - tick
            tag = f"{alg}_theta{th:.4f}".replace(".", "p")
            out = Path(args.out) / f"nse_adapt_{tag}.csv"
            ledger.write_csv(out, metadata={**config, "algorithm": alg, "theta": th, "tol": tol})
            print(f"wrote {out}  ({ledger.summary()}, wall {wall:.1f}s)")
            if final:
                snap = Path(args.out) / f"nse_adapt_{tag}_final.bin"
                write_snapshot(snap, final["y"], final["index"], final["t"], th,
                               final["k"], case.kind)
                print(f"wrote {snap} (+.json sidecar)")

            acc = ledger.accepted_rows
            adaptive_acc = [r for r in acc if r.extra.get("phase") not in ("startup",)]
            ks = [r.k_n for r in ledger.rows]
            if any(k < cfg.k_min - 1e-15 or k > cfg.k_max + 1e-15 for k in ks):
                failures.append(f"{tag}: step left [k_min, k_max]")
            over = [r for r in adaptive_acc
                    if r.estimator >= tol and r.extra.get("phase") != "forced_accept"]
            if over:
                failures.append(f"{tag}: {len(over)} accepted steps with criterion >= Tol")
            bad_id = [r for r in acc if abs(r.extra.get("identity_residual", 0.0)) > 1e-8]
            if bad_id:
                failures.append(f"{tag}: energy-identity residual above 1e-8")
            counts[(alg, th)] = len(acc)
            summary_rows.append([alg, th, tol, len(ledger.rows), len(acc),
                                 len(ledger.rejected_rows), wall])
            if args.plot:
                from dln.plots import plot_adapt_traces

                fig_path = Path(args.out) / f"nse_adapt_{tag}.svg"
                plot_adapt_traces(ledger, tol, fig_path,
                                  f"{alg} adaptivity, theta={th:.4f}, {n}x{n}")
                print(f"wrote {fig_path}")
    out = Path(args.out) / "nse_adapt_summary.csv"
    write_table(out, ["algorithm", "theta", "tol", "attempts", "accepted", "rejected", "wall_time"],
                summary_rows, config)
    print(f"wrote {out}")
    if set(a for a, _ in counts) == {"lte", "nd"}:
        for th in thetas:
            a1, a2 = counts[("lte", th)], counts[("nd", th)]
            trend = "matches" if a1 <= a2 else "does NOT match"
            print(f"theta={th:.4f}: accepted steps lte={a1} nd={a2} ({trend} the expected lte <= nd trend)")
    for msg in failures:
        print("INVARIANT FAIL:", msg)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dln", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--config", default=None, help="JSON config file; flags override")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--theta", type=_float_list, default=None, help="comma-separated list")
        p.add_argument("--plot", dest="plot", action="store_true", default=True)
        p.add_argument("--no-plot", dest="plot", action="store_false")

    p = sub.add_parser("coeffs", help="dump coefficient tables over a (theta, eps) grid")
    common(p)
    p.add_argument("--eps", type=_float_list, default=None)

    p = sub.add_parser("ivp-converge", help="temporal-order table for a manufactured ODE")
    common(p)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--k0", type=float, default=None)
    p.add_argument("--t-end", type=float, default=None)
    p.add_argument("--schedule", choices=["constant", "random", "both"], default="both")

    p = sub.add_parser("nse-converge", help="temporal-order table for the decay vortex")
    common(p)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--case", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--t-end", type=float, default=None)
    p.add_argument("--k-list", type=_float_list, default=None)

    p = sub.add_parser("nse-adapt", help="adaptive runs on the growing vortex")
    common(p)
    p.add_argument("--algorithm", choices=["lte", "nd", "both"], default="both")
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--case", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--t-end", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--k0", type=float, default=None)
    p.add_argument("--kmin", type=float, default=None)
    p.add_argument("--kmax", type=float, default=None)

    return parser


def merge_config(args: argparse.Namespace, parser_defaults: dict) -> dict:
    """File values fill in flags left at their defaults; flags win otherwise."""
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        for key, value in file_cfg.items():
            attr = key.replace("-", "_")
            if hasattr(args, attr) and getattr(args, attr) == parser_defaults.get(attr):
                setattr(args, attr, value)
    config = {k: v for k, v in vars(args).items() if k not in ("config", "plot") and v is not None}
    config["package_version"] = "0.1.0"
    return config


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default for a in parser._subparsers._group_actions[0]
                .choices[args.command]._actions}
    config = merge_config(args, defaults)
    Path(args.out).mkdir(parents=True, exist_ok=True)

    handlers = {
        "coeffs": cmd_coeffs,
        "ivp-converge": cmd_ivp_converge,
        "nse-converge": cmd_nse_converge,
        "nse-adapt": cmd_nse_adapt,
    }
    return handlers[args.command](args, config)


if __name__ == "__main__":
    sys.exit(main())
