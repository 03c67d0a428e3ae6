"""Command-line front end: ``forward``, ``generate``, ``invert`` and ``reproduce``.

Exit codes: 0 success, 1 invalid input, 2 forward solve did not converge,
3 inversion stopped at its iteration cap (``reproduce``: 4 when a cell misses
its band).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import reference
from .config import ConfigError, RunConfig, load_config
from .forward import classify_measurement, manufactured_rhs, max_grad_sq, solve_forward, solve_forward_many
from .grid import linf_diff, make_field, torque
from .irekm import PredictionError, PriorSpec, run_irekm
from .observe import ForwardNonConvergenceError, ObservationSet, SolverSettings, generate_data
from .plasticity import MaterialParams, ramberg_osgood, rational

log = logging.getLogger("torsion")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_MAX_ITER, EXIT_BAND = 0, 1, 2, 3, 4

TEST_PROBLEMS = {
    "test1": lambda: ramberg_osgood(MaterialParams(0.5, 0.02, 42.3)),
    "test2": rational,
}


def _manufactured(x, y):
    return (x - x * x) * (y - y * y)


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _resolved(cfg: RunConfig, seed: int | None = None) -> dict:
    """The configuration as run, without knobs that must not affect outputs."""
    doc = {k: v for k, v in cfg.raw.items() if k not in ("jobs", "output", "data")}
    if seed is not None:
        doc["seed"] = seed
    return doc


def cmd_forward(cfg: RunConfig) -> int:
    """Solve one direct problem and write the field, its convergence history and a summary."""
    settings = cfg.solver()
    grid = settings.grid
    test = cfg.raw.get("test")
    if test is not None:
        if test not in TEST_PROBLEMS:
            raise ConfigError(f"test: unknown test problem {test!r}; choose from {sorted(TEST_PROBLEMS)}")
        g = TEST_PROBLEMS[test]()
        exact = make_field(grid, _manufactured)
        rhs = manufactured_rhs(exact, g)
        xi0_sq = g.params.xi0_sq if g.params is not None else None
        phi = None
    else:
        theta = cfg.material()
        g = ramberg_osgood(theta)
        phi = cfg.phi()
        rhs, exact, xi0_sq = 2.0 * phi, None, theta.xi0_sq
    result = solve_forward(g, rhs, grid, settings.tol, settings.max_iter, settings.linear_tol, settings.method)
    out = cfg.output()
    result.write(out, "solution")
    with (out / "history.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "h1_diff"])
        writer.writerows((k + 1, f"{d:.17g}") for k, d in enumerate(result.diff_history))
    stress = max_grad_sq(result.u_star)
    summary = {
        "problem": test if test is not None else g.name,
        "phi": phi,
        "torque": torque(result.u_star),
        "max_grad_sq": stress,
        "classification": None if xi0_sq is None else classify_measurement(stress, xi0_sq).value,
        "iterations": result.iterations,
        "converged": result.converged,
    }
    if exact is not None:
        summary["max_abs_error"] = linf_diff(result.u_star, exact)
    _dump(out / "summary.json", summary)
    print(json.dumps(summary, indent=2))
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def _stresses(theta: MaterialParams, angles, settings: SolverSettings) -> list[float]:
    results = solve_forward_many(
        [ramberg_osgood(theta)] * len(angles),
        [2.0 * phi for phi in angles],
        settings.grid,
        settings.tol,
        settings.max_iter,
        settings.linear_tol,
        settings.method,
    )
    failed = [phi for phi, r in zip(angles, results) if not r.converged]
    if failed:
        raise ForwardNonConvergenceError([(None, phi) for phi in failed])
    return [max_grad_sq(r.u_star) for r in results]


def cmd_generate(cfg: RunConfig) -> int:
    """Write synthetic observations and report each angle as plastic (P) or elastic (E)."""
    theta, angles, sigma, seed = cfg.material(), cfg.angles(), cfg.sigma(), cfg.seed()
    settings = cfg.solver()
    data = generate_data(theta, angles, sigma, seed, settings)
    out = cfg.output()
    out.mkdir(parents=True, exist_ok=True)
    data.to_json(out / "data.json")
    stresses = _stresses(theta, angles, settings)
    types = [classify_measurement(m, theta.xi0_sq).value for m in stresses]
    for phi, m, t in zip(angles, stresses, types):
        print(f"phi={phi:g}  M={m:.6g}  {t}")
    print(f"types: {','.join(types)}")
    return EXIT_OK


def cmd_invert(cfg: RunConfig) -> int:
    """Recover material parameters from an observation file."""
    data_path = cfg.raw.get("data")
    if data_path is None:
        raise ConfigError("data: an observation file is required (--data path)")
    try:
        data = ObservationSet.from_json(data_path)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"data: cannot load {data_path}: {exc}") from exc
    if not data.sigma > 0:
        raise ConfigError("data: sigma must be positive for inversion")
    k = cfg.irekm()
    out = cfg.output()
    seed = cfg.seed()
    try:
        trace = run_irekm(
            cfg.prior(),
            data,
            rho=k["rho"],
            gamma0=k["gamma0"],
            tau=k["tau"],
            max_iter=k["max_iter"],
            n_members=k["n_ensemble"],
            seed=seed,
            settings=cfg.solver(),
            delta=k["delta"],
            n_jobs=cfg.jobs(),
            gamma_rule=k["gamma_rule"],
            callback=lambda r: log.info("n=%d R=%.6g gamma=%s", r.n, r.R, r.gamma),
        )
    except PredictionError as exc:
        if exc.trace is not None and exc.trace.records:
            exc.trace.write(out)
        raise
    trace.write(out)
    _dump(out / "config.json", _resolved(cfg, seed))
    print(json.dumps(trace.summary(), indent=2))
    return EXIT_OK if trace.stop_reason == "discrepancy" else EXIT_MAX_ITER


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v)


def _stress_cells(table_id: str, cfg: RunConfig) -> list[dict]:
    spec = reference.STRESS_TABLES[table_id]
    mat = spec["material"]
    settings = cfg.solver()
    rows = []
    for case, (kappa, values) in spec["cases"].items():
        theta = MaterialParams(kappa, mat["xi0_sq"], mat["G"])
        try:
            got = _stresses(theta, mat["angles"], settings)
        except (ForwardNonConvergenceError, ValueError) as exc:
            log.error("%s %s failed: %s", table_id, case, exc)
            got = [None] * len(values)
        for phi, ref, m in zip(mat["angles"], values, got):
            ok = m is not None and abs(m - ref) <= reference.STRESS_REL_TOL * abs(ref)
            rows.append(
                {"cell": f"{case} phi={phi:g}", "quantity": "M", "reference": ref, "obtained": m,
                 "band": f"+-{reference.STRESS_REL_TOL:.0%}", "status": "PASS" if ok else "FAIL"}
            )
    return rows


def _inversion_run(job) -> dict:
    """One seeded inversion; runs in a worker process."""
    raw, table_id, dtype, sigma, seed, run_dir = job
    cfg = RunConfig(raw)
    spec = reference.INVERSION_TABLES[table_id]
    mat = spec["material"]
    truth = MaterialParams(spec["kappa"], mat["xi0_sq"], mat["G"])
    angles = [mat["angles"][i] for i in reference.DATA_TYPES[dtype]]
    settings = cfg.solver()
    prior_doc = dict(cfg.raw["prior"], G=list(mat["prior_G"]))
    k = cfg.irekm()
    try:
        data = generate_data(truth, angles, sigma, seed, settings)
        trace = run_irekm(
            PriorSpec.from_dict(prior_doc),
            data,
            rho=k["rho"],
            gamma0=k["gamma0"],
            tau=k["tau"],
            max_iter=k["max_iter"],
            n_members=k["n_ensemble"],
            seed=seed,
            settings=settings,
            gamma_rule=k["gamma_rule"],
        )
    except (PredictionError, ForwardNonConvergenceError) as exc:
        return {"error": str(exc)}
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data.to_json(run_dir / "data.json")
    trace.write(run_dir)
    return {"e_n": trace.records[-1].errors["e_n"], "n": trace.n, "stop_reason": trace.stop_reason}


def _inversion_cells(table_id: str, cfg: RunConfig, n_seeds: int, jobs: int) -> list[dict]:
    spec = reference.INVERSION_TABLES[table_id]
    opts = cfg.raw["reproduce"]
    types = opts.get("types") or list(reference.DATA_TYPES)
    sigmas = opts.get("sigmas") or list(reference.SIGMAS)
    for t in types:
        if t not in reference.DATA_TYPES:
            raise ConfigError(f"reproduce.types: unknown data type {t!r}; choose from {list(reference.DATA_TYPES)}")
    for s in sigmas:
        if s not in reference.SIGMAS:
            raise ConfigError(f"reproduce.sigmas: {s!r} is not one of {list(reference.SIGMAS)}")
    base_seed = cfg.seed()
    out = cfg.output() / table_id
    cells = [(t, s) for t in types for s in sigmas]
    jobs_list = [
        (cfg.raw, table_id, t, s, base_seed + r, str(out / f"{t}_sigma{s:g}_seed{base_seed + r}"))
        for t, s in cells
        for r in range(n_seeds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_inversion_run, jobs_list))
    else:
        results = [_inversion_run(j) for j in jobs_list]
    rows = []
    for ci, (t, s) in enumerate(cells):
        runs = results[ci * n_seeds : (ci + 1) * n_seeds]
        ref_e, ref_n = spec["rows"][t][s]
        limit = reference.ERROR_BAND[s] * ref_e
        errors = [r["error"] for r in runs if "error" in r]
        if errors:
            median_e, median_n, status = None, None, "FAIL"
            log.error("%s %s sigma=%g failed: %s", table_id, t, s, errors[0])
        else:
            median_e = statistics.median(r["e_n"] for r in runs)
            median_n = statistics.median(r["n"] for r in runs)
            status = "PASS" if median_e <= limit else "FAIL"
        rows.append(
            {"cell": f"{t} sigma={s:g}", "quantity": "e_n", "reference": ref_e, "obtained": median_e,
             "band": f"<={limit:.3g}", "status": status, "reference_n": ref_n, "median_n": median_n}
        )
    return rows


def cmd_reproduce(cfg: RunConfig, table_id: str, n_seeds: int) -> int:
    """Rerun a benchmark table and write a comparison report."""
    if table_id not in reference.TABLE_IDS:
        raise ConfigError(f"unknown table {table_id!r}; choose from {list(reference.TABLE_IDS)}")
    if n_seeds < 1:
        raise ConfigError(f"seeds: must be >= 1, got {n_seeds}")
    out = cfg.output()
    out.mkdir(parents=True, exist_ok=True)
    if table_id in reference.STRESS_TABLES:
        rows = _stress_cells(table_id, cfg)
    else:
        rows = _inversion_cells(table_id, cfg, n_seeds, cfg.jobs())
    fields = ["cell", "quantity", "reference", "obtained", "band", "status", "reference_n", "median_n"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fields, lineterminator="\n", restval="")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
    (out / f"{table_id}_report.csv").write_text(buf.getvalue())
    width = max(len(r["cell"]) for r in rows)
    lines = [f"{table_id}: {sum(r['status'] == 'PASS' for r in rows)}/{len(rows)} cells within band"]
    for r in rows:
        lines.append(
            f"{r['status']}  {r['cell']:<{width}}  {r['quantity']} reference={_fmt(r['reference'])} "
            f"obtained={_fmt(r['obtained'])} band {r['band']}"
        )
    text = "\n".join(lines) + "\n"
    (out / f"{table_id}_report.txt").write_text(text)
    _dump(out / f"{table_id}_config.json", _resolved(cfg, cfg.seed()))
    print(text, end="")
    return EXIT_OK if all(r["status"] == "PASS" for r in rows) else EXIT_BAND


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs, i = [], 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or token == "--":
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for --{key}")
        pairs.append((key, value))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="torsion",
        description="Elastoplastic torsion: forward solves and ensemble Kalman parameter recovery.",
        epilog="Any config value can be overridden with --dotted.key value, e.g. --grid.Nx 20 --material.kappa 0.7.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--output", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes (results do not depend on it)")
    sub.add_parser("forward", parents=[common], help="solve one direct problem")
    sub.add_parser("generate", parents=[common], help="write synthetic torque data")
    inv = sub.add_parser("invert", parents=[common], help="recover (kappa, xi0_sq, G) from data")
    inv.add_argument("--data", help="observation JSON file")
    rep = sub.add_parser("reproduce", parents=[common], help="rerun a benchmark table")
    rep.add_argument("table", help=f"one of {', '.join(reference.TABLE_IDS)}")
    rep.add_argument("--seeds", type=int, help="seeds per cell (default 3)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = _split_overrides(extra)
        for key in ("output", "jobs", "data"):
            value = getattr(args, key, None)
            if value is not None:
                overrides.append((key, value))
        cfg = load_config(args.config, overrides)
        if args.command == "forward":
            return cmd_forward(cfg)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "invert":
            return cmd_invert(cfg)
        seeds = args.seeds if args.seeds is not None else cfg.raw["reproduce"]["seeds"]
        return cmd_reproduce(cfg, args.table, seeds)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ForwardNonConvergenceError, PredictionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
