"""Command-line entry point: ``slope-design <command> [options]``.

Configuration files are INI files (``key = value`` under ``[section]``)::

    [amp]      delta, sigma_w, p, mc_samples, tol, iters
    [prior]    kind (bernoulli | gauss_bernoulli | gaussian_binomial), eps, value,
               sigma_b, trials, prob
    [pgd]      step, step_schedule, momentum, momentum_coef, d_mode, max_iters,
               tol, projection, line_search
    [cd]       k (comma list), magnitude_evals, grid_points, split_grid,
               split_method, max_sweeps, order, lasso_grid
    [data]     csv, response, screen_top_m, task, standardize, design, n, p,
               sigma_w, ar, ma, column_scale, folds, metric
    [experiment] seeds (e.g. ``0-9`` or ``1,4,7``), k (comma list)

Every command writes its CSV files plus ``manifest_<command>.json`` into ``--out``.
"""

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np

from . import amp, data, design, experiments
from .amp import AmpConfig, CalibrationError, DegenerateTauError, Prior
from .solver import Dataset, SolverConfig, fit_slope, fit_slope_logistic, slope_objective
from .sorted_l1 import prox_sorted_l1, sorted_l1_norm

log = logging.getLogger("slope_design")

THREADS_ENV = "SLOPE_DESIGNER_THREADS"


class UsageError(Exception):
    """Bad input or configuration; reported without a traceback."""


# ---------------------------------------------------------------------------
# parsing helpers

def parse_vector(text, where="vector"):
    """Parse ``"1,2,3"`` or ``"(1, 2, 3)"`` into a float array."""
    body = text.strip().strip("()[]")
    if not body:
        raise UsageError(f"{where}: empty vector")
    try:
        return np.array([float(tok) for tok in body.split(",")])
    except ValueError:
        raise UsageError(f"{where}: cannot parse {text!r} as numbers") from None


def read_vectors(path):
    """One vector per non-empty line (comma separated); a non-numeric first line is a header."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(np.array([float(tok) for tok in line.strip().split(",")]))
            except ValueError:
                if lineno == 1:
                    continue
                raise UsageError(f"{path}: row {lineno} is not numeric: {line.strip()!r}") from None
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return rows


def parse_seeds(text):
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        else:
            seeds.append(int(part))
    return seeds


def parse_ints(text):
    return [int(tok) for tok in str(text).split(",") if tok.strip()]


def fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


class Run:
    """Collects output files and writes the manifest."""

    def __init__(self, command, args, config):
        self.command = command
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.config = config
        self.files = []
        self.seeds = []
        self.notes = []
        self.start = time.time()

    def write_csv(self, name, header, rows):
        path = self.out / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
        self.files.append(name)
        return path

    def finish(self):
        manifest = {
            "command": self.command,
            "config": {s: dict(self.config[s]) for s in self.config.sections()},
            "arguments": {k: v for k, v in vars(self.args).items() if k != "func"},
            "seeds": self.seeds,
            "code_version": _version(),
            "wall_clock_seconds": round(time.time() - self.start, 3),
            "outputs": self.files,
            "notes": self.notes,
        }
        with open(self.out / f"manifest_{self.command}.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, default=str)


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def load_config(path):
    cp = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise UsageError(f"config file {path} does not exist")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from None
    for section in ("amp", "prior", "pgd", "cd", "data", "experiment"):
        if not cp.has_section(section):
            cp.add_section(section)
    return cp


def _get(cp, section, key, kind, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        if kind is bool:
            return cp.getboolean(section, key)
        return kind(raw)
    except ValueError:
        raise UsageError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None


def prior_from(cp):
    kind = _get(cp, "prior", "kind", str, "bernoulli")
    try:
        return Prior(
            kind,
            eps=_get(cp, "prior", "eps", float, 0.5),
            value=_get(cp, "prior", "value", float, 1.0),
            sigma_b=_get(cp, "prior", "sigma_b", float, 1.0),
            trials=_get(cp, "prior", "trials", int, 5),
            prob=_get(cp, "prior", "prob", float, 0.3),
        )
    except ValueError as exc:
        raise UsageError(f"[prior] {exc}") from None


def amp_config_from(cp, seed):
    try:
        return AmpConfig(
            delta=_get(cp, "amp", "delta", float, 0.3),
            sigma_w=_get(cp, "amp", "sigma_w", float, 0.0),
            p=_get(cp, "amp", "p", int, 1000),
            mc_samples=_get(cp, "amp", "mc_samples", int, 64),
            tol=_get(cp, "amp", "tol", float, 1e-10),
            seed=seed,
        )
    except ValueError as exc:
        raise UsageError(f"[amp] {exc}") from None


def pgd_from(cp):
    defaults = design.PGDConfig()
    try:
        return design.PGDConfig(
            step=_get(cp, "pgd", "step", float, defaults.step),
            step_schedule=_get(cp, "pgd", "step_schedule", str, defaults.step_schedule),
            momentum=_get(cp, "pgd", "momentum", str, defaults.momentum),
            momentum_coef=_get(cp, "pgd", "momentum_coef", float, defaults.momentum_coef),
            d_mode=_get(cp, "pgd", "d_mode", str, defaults.d_mode),
            max_iters=_get(cp, "pgd", "max_iters", int, defaults.max_iters),
            tol=_get(cp, "pgd", "tol", float, defaults.tol),
            projection=_get(cp, "pgd", "projection", str, defaults.projection),
            line_search=_get(cp, "pgd", "line_search", bool, defaults.line_search),
        )
    except ValueError as exc:
        raise UsageError(f"[pgd] {exc}") from None


def search_from(cp, jobs, upper_cap=None):
    d = design.SearchConfig()
    try:
        return design.SearchConfig(
            magnitude_evals=_get(cp, "cd", "magnitude_evals", int, d.magnitude_evals),
            grid_points=_get(cp, "cd", "grid_points", int, d.grid_points),
            split_grid=_get(cp, "cd", "split_grid", int, d.split_grid),
            split_method=_get(cp, "cd", "split_method", str, d.split_method),
            max_sweeps=_get(cp, "cd", "max_sweeps", int, d.max_sweeps),
            order=_get(cp, "cd", "order", str, d.order),
            upper_cap=upper_cap,
            jobs=jobs,
        )
    except ValueError as exc:
        raise UsageError(f"[cd] {exc}") from None


def spec_from(cp, seeds=None):
    try:
        return data.ExperimentSpec(
            design=_get(cp, "data", "design", str, "gaussian_iid"),
            n=_get(cp, "data", "n", int, 300),
            p=_get(cp, "data", "p", int, 1000),
            prior=prior_from(cp),
            sigma_w=_get(cp, "data", "sigma_w", float, 0.0),
            ar=_get(cp, "data", "ar", float, 0.8),
            ma=_get(cp, "data", "ma", float, 0.8),
            seeds=seeds if seeds is not None else [0],
            folds=_get(cp, "data", "folds", int, 10),
            metric=_get(cp, "data", "metric", str, "prediction_mse"),
            column_scale=_get(cp, "data", "column_scale", str, "none"),
        )
    except ValueError as exc:
        raise UsageError(f"[data] {exc}") from None


def resolve_jobs(args):
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            jobs = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV}={env!r} is not an integer") from None
    else:
        jobs = args.jobs
    if jobs < 1:
        raise UsageError("the number of jobs must be >= 1")
    return jobs


def _penalty_arg(text, p):
    """``v1,v2,...`` (length p), ``const:c`` or ``bh:q[:scale]``."""
    if text.startswith("const:"):
        return np.full(p, float(text.split(":", 1)[1]))
    if text.startswith("bh:"):
        parts = text.split(":")
        scale = float(parts[2]) if len(parts) > 2 else 1.0
        return design.bh_sequence(p, float(parts[1]), scale)
    lam = parse_vector(text, "penalty")
    if lam.size != p:
        raise UsageError(f"penalty has length {lam.size}, expected {p}")
    return lam


# ---------------------------------------------------------------------------
# commands

def cmd_prox(args, cp, run):
    inputs = [parse_vector(args.y, "--y")] if args.y else read_vectors(args.input)
    theta = parse_vector(args.theta, "--theta")
    rows = []
    for r, y in enumerate(inputs):
        if y.size != theta.size:
            raise UsageError(f"input row {r + 1} has length {y.size}, theta has {theta.size}")
        b = prox_sorted_l1(y, theta)
        obj = 0.5 * float(np.sum((y - b) ** 2)) + sorted_l1_norm(b, theta)
        print(f"row {r + 1}: prox = ({', '.join(fmt(v) for v in b)}), objective = {fmt(obj)}")
        rows.extend((r + 1, i + 1, y[i], b[i]) for i in range(y.size))
    run.write_csv("prox.csv", ["row", "index", "input", "value"], rows)


def cmd_project(args, cp, run):
    inputs = [parse_vector(args.gamma, "--gamma")] if args.gamma else read_vectors(args.input)
    rows = []
    for r, g in enumerate(inputs):
        x = design.project_on_S(g)
        print(f"row {r + 1}: projection = ({', '.join(fmt(v) for v in x)}), "
              f"distance = {fmt(float(np.linalg.norm(x - g)))}")
        rows.extend((r + 1, i + 1, g[i], x[i]) for i in range(g.size))
    run.write_csv("projection.csv", ["row", "index", "input", "value"], rows)


def _load_dataset(cp, task, seed):
    path = _get(cp, "data", "csv", str, None)
    if path is None:
        spec = spec_from(cp)
        return data.make_dataset(spec, seed), [f"x{j + 1}" for j in range(spec.p)]
    response = _get(cp, "data", "response", str, "y")
    m = _get(cp, "data", "screen_top_m", int, None)
    standardize = _get(cp, "data", "standardize", bool, True)
    try:
        return data.load_csv(path, response, m, task=task, standardize=standardize)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_solve(args, cp, run):
    task = args.task or _get(cp, "data", "task", str, "linear")
    if args.data:
        cp.set("data", "csv", args.data)
    if args.response:
        cp.set("data", "response", args.response)
    ds, names = _load_dataset(cp, task, args.seed)
    lam = _penalty_arg(args.penalty, ds.p)
    config = SolverConfig(max_iters=args.max_iters)
    fit = fit_slope(ds, lam, config) if task == "linear" else fit_slope_logistic(ds, lam, config)
    obj = slope_objective(ds, fit.beta, lam) if task == "linear" else fit.objective[-1]
    print(f"objective = {fmt(obj)}, iterations = {fit.n_iter}, converged = {fit.converged}")
    run.write_csv("coefficients.csv", ["feature", "coefficient"], zip(names, fit.beta))
    run.seeds = [args.seed]


def cmd_design_pgd(args, cp, run):
    prior = prior_from(cp)
    cfg = amp_config_from(cp, args.seed)
    pgd = pgd_from(cp)
    try:
        res = design.pgd_design(prior, cfg, pgd)
    except (CalibrationError, DegenerateTauError) as exc:
        raise UsageError(f"design-pgd aborted: {exc}") from None
    rows = [(t, tau, amp.asymptotic_mse(tau, cfg)) for t, tau in enumerate(res.tau_history)]
    run.write_csv("pgd_trajectory.csv", ["iteration", "tau", "asymptotic_mse"], rows)
    run.write_csv("pgd_alpha.csv", ["index", "alpha"], enumerate(res.alpha, start=1))
    run.write_csv("pgd_lambda.csv", ["index", "lambda"], enumerate(res.lam, start=1))
    run.seeds = [args.seed]
    print(f"tuned Lasso asymptotic MSE = {fmt(rows[0][2])}, "
          f"PGD asymptotic MSE = {fmt(amp.asymptotic_mse(res.tau, cfg))}")


def _cd_objective(cp, ds, task, seed):
    metric = _get(cp, "data", "metric", str, "prediction_mse")
    folds = _get(cp, "data", "folds", int, 10)
    if metric == "estimation_mse":
        if ds.beta_true is None:
            raise UsageError("metric estimation_mse needs a synthetic dataset with ground truth")
        config = SolverConfig(max_iters=2000, rel_tolerance=1e-9)
        cache = {}

        def objective(lam):
            fit = fit_slope(ds, lam, config, beta0=cache.get("beta"))
            cache["beta"] = fit.beta
            return data.estimation_mse(ds.beta_true, fit.beta)

        return objective
    return experiments.cv_objective(ds, folds, task=task, seed=seed)


def _cd_pipeline(cp, ds, task, seed, jobs):
    ks = parse_ints(_get(cp, "cd", "k", str, "2"))
    objective = _cd_objective(cp, ds, task, seed)
    grid = experiments.lasso_lambda_grid(ds, _get(cp, "cd", "lasso_grid", int, 40))
    search = search_from(cp, jobs, upper_cap=float(grid[-1]))
    return experiments.k_level_sweep(objective, ds.p, grid, ks, search), objective


def cmd_design_cd(args, cp, run):
    task = _get(cp, "data", "task", str, "linear")
    jobs = resolve_jobs(args)
    ds, _ = _load_dataset(cp, task, args.seed)
    sweep, objective = _cd_pipeline(cp, ds, task, args.seed, jobs)
    run.write_csv("cd_lasso_grid.csv", ["lambda", "objective"], zip(sweep.grid, sweep.lasso_curve))
    summary = [("lasso", sweep.lasso_objective)]
    traj_rows, eval_rows, pen_rows = [], [], []
    for k, res in sweep.results.items():
        traj_rows.extend((k, i, v) for i, v in enumerate(res.trajectory))
        eval_rows.extend((k, i + 1, v) for i, (_, v) in enumerate(res.evaluations))
        bounds = [*res.penalty.splits, ds.p]
        pen_rows.extend((k, i + 1, m, bounds[i]) for i, m in enumerate(res.penalty.magnitudes))
        summary.append((f"slope-k{k}", res.objective))
        if res.skipped:
            run.notes.append(f"k={k}: {len(res.skipped)} coordinate searches had failed evaluations")
    run.write_csv("cd_trajectory.csv", ["k", "update", "objective"], traj_rows)
    run.write_csv("cd_evaluations.csv", ["k", "evaluation", "objective"], eval_rows)
    run.write_csv("cd_penalty.csv", ["k", "level", "magnitude", "block_end"], pen_rows)
    run.write_csv("cd_summary.csv", ["method", "objective"], summary)
    run.seeds = [args.seed]
    for name, value in summary:
        print(f"{name}: {fmt(value)}")


def cmd_amp(args, cp, run):
    prior = prior_from(cp)
    cfg = amp_config_from(cp, args.seed)
    iters = _get(cp, "amp", "iters", int, 100)
    ks = parse_ints(_get(cp, "cd", "k", str, "2"))
    with_pgd = _get(cp, "amp", "with_pgd", bool, True)
    search = search_from(cp, resolve_jobs(args), upper_cap=10.0)
    alphas, predicted = experiments.design_amp_thresholds(
        prior, cfg, ks, pgd_from(cp), search, with_pgd=with_pgd
    )
    n = int(round(cfg.n))
    spec = data.ExperimentSpec("gaussian_iid", n=n, p=cfg.p, prior=prior, sigma_w=cfg.sigma_w,
                               folds=2)
    ds = data.make_dataset(spec, args.seed)
    with_mmse = prior.kind == "gauss_bernoulli"
    if not with_mmse:
        run.notes.append("MMSE AMP skipped: it needs a gauss_bernoulli prior")
    trajs = experiments.run_amp_comparison(ds, alphas, prior, cfg, iters, with_mmse)
    rows = []
    for name, tr in trajs.items():
        for t, mse in enumerate(tr.mse):
            tau = tr.tau[t] if t < len(tr.tau) else math.nan
            rows.append((name, t, mse, tau, tr.diverged))
    run.write_csv("amp.csv", ["method", "t", "mse", "tau", "diverged"], rows)
    run.write_csv("amp_predicted.csv", ["method", "asymptotic_mse"], predicted.items())
    run.seeds = [args.seed]
    for name, tr in trajs.items():
        print(f"{name}: final MSE = {fmt(tr.mse[-1])}" + (" (diverged)" if tr.diverged else ""))


def _experiment_seed(cp, seed, ks):
    task = _get(cp, "data", "task", str, "linear")
    ds, _ = _load_dataset(cp, task, seed)
    sweep, _ = _cd_pipeline(cp, ds, task, seed, 1)
    out = {"lasso": sweep.lasso_objective}
    for k in ks:
        out[f"slope-k{k}"] = sweep.results[k].objective
    return out


def cmd_experiment(args, cp, run):
    seeds = parse_seeds(_get(cp, "experiment", "seeds", str, str(args.seed)))
    if not seeds:
        raise UsageError("[experiment] seeds is empty")
    ks = parse_ints(_get(cp, "experiment", "k", str, _get(cp, "cd", "k", str, "2")))
    cp.set("cd", "k", ",".join(map(str, ks)))
    jobs = resolve_jobs(args)

    def one(seed):
        try:
            return seed, _experiment_seed(cp, seed, ks), None
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return seed, None, str(exc)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    methods = ["lasso"] + [f"slope-k{k}" for k in ks]
    run_rows = []
    per_method = {m: [] for m in methods}
    for seed, values, err in results:
        if err is not None:
            run_rows.extend((seed, m, math.nan, f"failed: {err}") for m in methods)
            run.notes.append(f"seed {seed} failed: {err}")
            continue
        for m in methods:
            run_rows.append((seed, m, values[m], "ok"))
            per_method[m].append(values[m])
    run.write_csv("experiment_runs.csv", ["seed", "method", "objective", "status"], run_rows)
    agg = []
    for m in methods:
        v = np.asarray(per_method[m])
        mean = float(v.mean()) if v.size else math.nan
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0 if v.size else math.nan
        agg.append((m, mean, std, v.size, len(seeds) - v.size))
        print(f"{m}: {fmt(mean)} +- {fmt(std)} over {v.size} seeds")
    run.write_csv("experiment.csv", ["method", "mean", "std", "n_ok", "n_failed"], agg)
    run.seeds = seeds


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=1,
                        help=f"parallel workers; {THREADS_ENV} overrides")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="slope-design", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prox", parents=[common], help="sorted-L1 proximal operator")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--y", help="inline vector, e.g. '3,1,-2'")
    src.add_argument("--input", help="file with one comma-separated vector per line")
    p.add_argument("--theta", required=True, help="non-increasing penalty vector")
    p.set_defaults(func=cmd_prox)

    p = sub.add_parser("project", parents=[common],
                       help="projection onto non-negative non-increasing vectors")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--gamma", help="inline vector, e.g. '(1,3)'")
    src.add_argument("--input", help="file with one comma-separated vector per line")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("solve", parents=[common], help="fit SLOPE on a CSV or synthetic dataset")
    p.add_argument("--data", help="CSV file (overrides [data] csv)")
    p.add_argument("--response", help="response column name")
    p.add_argument("--penalty", required=True, help="'v1,...,vp', 'const:c' or 'bh:q[:scale]'")
    p.add_argument("--task", choices=["linear", "logistic"])
    p.add_argument("--max-iters", type=int, default=5000)
    p.set_defaults(func=cmd_solve)

    for name, func, text in (
        ("amp", cmd_amp, "compare Lasso, k-level, PGD and MMSE AMP on one dataset"),
        ("design-pgd", cmd_design_pgd, "design a full penalty by projected gradient descent"),
        ("design-cd", cmd_design_cd, "design a k-level penalty by coordinate descent"),
        ("experiment", cmd_experiment, "repeat the CD protocol over seeds and aggregate"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = load_config(args.config)
        run = Run(args.command, args, cp)
        args.func(args, cp, run)
        run.finish()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
