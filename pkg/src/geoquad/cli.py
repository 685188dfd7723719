"""Command-line front end: data generation, mixture fits, and benchmarks.

Subcommands
-----------
``gen-data``
    Write a synthetic dataset (optionally embedded in higher dimension) to a
    points file with a provenance header; identical flags give a
    byte-identical file.
``fit-land``
    Fit a mixture of Riemannian normal components per a configuration file;
    writes the iteration trace, the corpus of integration problems the fit
    generated, and the final parameters.
``bench-corpus``
    Fixed-budget protocol over a corpus: every quadrature method solves every
    problem ``repeats`` times at each sample budget, then Monte Carlo rows
    are drawn from the ground-truth pool at a runtime budget equal to the
    measured mean runtime of the slowest quadrature method.
``bench-runtime``
    Error-versus-runtime protocol on one corpus problem: every method runs at
    each wall-clock limit, stopping acquisition once the limit is reached
    (realized runtime therefore exceeds the limit; finalization is included).

Exit codes: 0 success; 2 validation problems (bad flags, config, or files);
3 numerical failures (solver or estimate breakdown).  Every output file
embeds the fully resolved configuration.  All non-timing output fields are
deterministic given flags and seed; fields derived from measured wall-clock
(Monte Carlo subsample sizes, hence their errors, and everything in
``bench-runtime`` that depends on how many samples fit in a limit) vary
between runs unless the budget is pinned (``--mc-budget-s``).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .bq import IntegrationProblem, RuntimeBudget, SampleBudget, run_integration
from .config import (
    BENCHMARK_METHODS,
    RunConfig,
    build_metric,
    load_config,
    parse_config,
)
from .data_io import generate_dataset, load_points, save_points
from .errors import NumericalError, ValidationError
from .geodesics import GeodesicCache
from .land import fit
from .mc_integrate import (
    build_ground_truth_pool,
    load_pool,
    mc_subsample,
    pool_estimate,
    save_pool,
)

__all__ = ["main", "default_runtime_limits"]

ERROR_DEFINITION = (
    "mean over problems of |estimate - truth| / truth "
    "(aggregation across a fit's problems is an inferred convention)"
)


def default_runtime_limits() -> list[float]:
    """The default wall-clock grid: 30 evenly spaced limits in [5 s, 65 s]."""
    return np.linspace(5.0, 65.0, 30).tolist()


# ---------------------------------------------------------------------------
# serialization helpers


def _np_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_np_default)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_table(path, header_obj: dict, columns: list[str], rows) -> None:
    lines = ["# " + _json_line(header_obj), "\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_json_line(obj) + "\n")


def _write_records(path, header_obj: dict, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + _json_line(header_obj) + "\n")
        for record in records:
            fh.write(_json_line(record) + "\n")


# ---------------------------------------------------------------------------
# shared plumbing


@contextlib.contextmanager
def _pinned(enabled: bool):
    """Restrict BLAS/LAPACK thread pools to one core while measuring."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError as exc:  # pragma: no cover - present in test env
        raise ValidationError(
            "single-core pinning needs the threadpoolctl package"
        ) from exc
    with threadpool_limits(limits=1):
        yield


def _parse_csv(text: str, flag: str, convert):
    items = [part.strip() for part in text.split(",") if part.strip()]
    if not items:
        raise ValidationError(f"{flag} must list at least one value")
    try:
        return [convert(item) for item in items]
    except ValueError:
        raise ValidationError(f"{flag} has a malformed entry in {text!r}") from None


def _parse_methods(text: str) -> list[str]:
    methods = _parse_csv(text, "--methods", str)
    for m in methods:
        if m not in BENCHMARK_METHODS:
            raise ValidationError(
                f"--methods must name only {BENCHMARK_METHODS}, got {m!r}"
            )
    return methods


def _cell_seed(root: int, *indices: int) -> int:
    if root < 0:
        raise ValidationError("seed must be non-negative")
    return int(np.random.SeedSequence([root, *indices]).generate_state(1)[0])


def _read_corpus(path) -> tuple[dict, list[dict]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read corpus file {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# "):
        raise ValidationError(
            f"corpus file {path} is missing its provenance header line"
        )
    try:
        header = json.loads(lines[0][2:])
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corpus file {path} is malformed: {exc}") from exc
    if "config" not in header:
        raise ValidationError(
            f"corpus file {path} has no embedded config; regenerate it with fit-land"
        )
    if not rows:
        raise ValidationError(f"corpus file {path} contains no problems")
    return header, rows


def _corpus_problems(rows: list[dict], metric, max_problems: int | None) -> list[dict]:
    """Extract (mu, Sigma) problems in corpus order, verifying identities."""
    if max_problems is not None:
        rows = rows[:max_problems]
    problems = []
    for i, row in enumerate(rows):
        try:
            mu = np.asarray(row["mu"], dtype=float)
            Sigma = np.asarray(row["Sigma"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"corpus problem {i} is malformed: {exc}") from exc
        pid = IntegrationProblem(metric, mu, Sigma).problem_id
        recorded = row.get("problem_id")
        if recorded is not None and recorded != pid:
            raise ValidationError(
                f"corpus problem {i} id mismatch (recorded {recorded[:12]}…, "
                f"recomputed {pid[:12]}…): the corpus rows or the metric's "
                "input files changed since the corpus was written"
            )
        problems.append({"index": i, "mu": mu, "Sigma": Sigma, "problem_id": pid})
    return problems


def _truth_seed(problem_id: str) -> int:
    # derived from the problem identity so pools are reproducible regardless
    # of corpus ordering or the benchmark seed
    return int(problem_id[:8], 16)


def _ensure_truth(
    problems: list[dict],
    metric,
    truth_dir: str,
    truth_samples: int,
    exp_tol: float,
    workers: int,
    require: bool,
) -> dict[str, dict]:
    """Load or build the per-problem ground-truth pools and estimates."""
    truth: dict[str, dict] = {}
    for problem in problems:
        pid = problem["problem_id"]
        if pid in truth:
            continue
        try:
            pool = load_pool(truth_dir, pid)
        except ValidationError:
            if require:
                raise ValidationError(
                    f"no ground-truth pool for problem {problem['index']} "
                    f"(id {pid[:12]}…) in {truth_dir}; rerun without "
                    f"--require-truth to generate it "
                    f"({truth_samples} samples)"
                ) from None
            print(
                f"building ground-truth pool for problem {problem['index']} "
                f"(id {pid[:12]}…, {truth_samples} samples)",
                flush=True,
            )
            pool = build_ground_truth_pool(
                metric,
                problem["mu"],
                problem["Sigma"],
                truth_samples,
                seed=_truth_seed(pid),
                workers=workers,
                exp_tol=exp_tol,
            )
            save_pool(pool, truth_dir)
        attempted = pool.size + pool.n_failures
        if attempted != truth_samples:
            raise ValidationError(
                f"ground-truth pool for problem {problem['index']} was built "
                f"from {attempted} samples but {truth_samples} were requested; "
                "delete the pool file or match --truth-samples"
            )
        est = pool_estimate(pool)
        truth[pid] = {
            "pool": pool,
            "value": float(est.value),
            "se": float(est.standard_error),
        }
    return truth


def _corpus_cell(task):
    """One benchmark cell: a (method, budget, repeat) pass over all problems.

    Top-level so worker processes can unpickle it; wall-clock is measured
    inside ``run_integration`` on the worker executing the cell.
    """
    metric, problems, method, budget, seeds, config, solver = task
    out = []
    for problem, seed in zip(problems, seeds):
        res = run_integration(
            IntegrationProblem(metric, problem["mu"], problem["Sigma"]),
            method,
            budget,
            seed=seed,
            config=config,
            solver=solver,
        )
        out.append((float(res.mean), float(res.wall_clock_s), int(res.n_observations)))
    return out


def _run_cells(tasks: list, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [_corpus_cell(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_corpus_cell, tasks))


def _overridden_resolved(run_cfg: RunConfig, **bench_overrides) -> dict:
    resolved = json.loads(_json_line(run_cfg.resolved))
    resolved["benchmark"].update(bench_overrides)
    return resolved


# ---------------------------------------------------------------------------
# gen-data


def _cmd_gen_data(args) -> int:
    flags = {
        "dataset": args.dataset,
        "n": args.n,
        "noise": args.noise,
        "seed": args.seed,
        "embed_dim": args.embed_dim,
        "embed_noise_var": args.embed_noise_var,
    }
    points = generate_dataset(
        args.dataset,
        args.n,
        args.noise,
        args.seed,
        embed_dim=args.embed_dim,
        embed_noise_var=args.embed_noise_var,
    )
    meta = {"command": "gen-data", "config": flags}
    save_points(args.out, points, meta=meta)
    print(f"wrote {points.shape[0]}x{points.shape[1]} points to {args.out}")
    print("# " + _json_line(meta))
    return 0


# ---------------------------------------------------------------------------
# fit-land


def _cache_paths(cache: str, k: int) -> list[str]:
    root, ext = os.path.splitext(cache)
    return [f"{root}.c{j}{ext or '.npz'}" for j in range(k)]


def _cmd_fit_land(args) -> int:
    cfg = load_config(args.config)
    if cfg.data is None:
        raise ValidationError("missing config key: data")
    points = load_points(cfg.data)
    metric = build_metric(cfg.metric)

    caches = None
    cache_paths: list[str] = []
    if cfg.cache is not None:
        cache_paths = _cache_paths(cfg.cache, cfg.land.n_components)
        caches = [
            GeodesicCache.load(p)
            if os.path.exists(p)
            else GeodesicCache(epsilon=cfg.solver.cache_epsilon)
            for p in cache_paths
        ]

    result = fit(
        points, metric, cfg.land, cfg.integrator, solver=cfg.solver, caches=caches
    )

    if caches is not None:
        for cache, path in zip(caches, cache_paths):
            cache.save(path)

    out_dir = os.path.abspath(args.out_dir) if args.out_dir else cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    header = {"command": "fit-land", "config": cfg.resolved}
    _write_records(
        os.path.join(out_dir, "fit_trace.jsonl"), header, result.iteration_records()
    )
    _write_records(os.path.join(out_dir, "corpus.jsonl"), header, result.problems)
    model = {
        "command": "fit-land",
        "config": cfg.resolved,
        "components": [c.to_record() for c in result.components],
        "nll_trace": result.nll_trace,
        "iterations": len(result.iterations),
        "n_problems": len(result.problems),
        "alpha_mu": result.alpha_mu.tolist(),
        "alpha_sigma": result.alpha_sigma,
        "diagnostics": result.diagnostics,
        "wall_clock_s": result.wall_clock_s,
    }
    _write_json(os.path.join(out_dir, "model.json"), model)
    print(
        f"fit complete: {len(result.iterations)} iterations, "
        f"objective {result.nll_trace[-1]:.6g}, "
        f"{len(result.problems)} integration problems"
    )
    print(f"outputs in {out_dir}: model.json, fit_trace.jsonl, corpus.jsonl")
    return 0


# ---------------------------------------------------------------------------
# bench-corpus


def _cmd_bench_corpus(args) -> int:
    header, rows = _read_corpus(args.corpus)
    base_dir = os.path.dirname(os.path.abspath(args.corpus))
    run_cfg = parse_config(header["config"], base_dir=base_dir)
    bench = run_cfg.benchmark

    methods = _parse_methods(args.methods) if args.methods else list(bench.methods)
    budgets = (
        _parse_csv(args.budgets, "--budgets", int) if args.budgets else list(bench.budgets)
    )
    if any(b < 1 for b in budgets):
        raise ValidationError("--budgets must be positive")
    repeats = args.repeats if args.repeats is not None else bench.repeats
    if repeats < 1:
        raise ValidationError("--repeats must be positive")
    seed = args.seed if args.seed is not None else bench.seed
    workers = args.workers if args.workers is not None else bench.workers
    truth_samples = (
        args.truth_samples if args.truth_samples is not None else bench.truth_samples
    )
    max_problems = (
        args.max_problems if args.max_problems is not None else bench.max_problems
    )
    pin = args.pin_blas or bench.pin_blas
    out_dir = os.path.abspath(args.out_dir) if args.out_dir else base_dir
    os.makedirs(out_dir, exist_ok=True)
    truth_dir = (
        os.path.abspath(args.truth_dir)
        if args.truth_dir
        else (bench.truth or os.path.join(out_dir, "truth"))
    )

    bq_methods = [m for m in methods if m != "mc"]
    if "mc" in methods and not bq_methods and args.mc_budget_s is None:
        raise ValidationError(
            "Monte Carlo rows take their runtime budget from the measured "
            "quadrature methods; include a quadrature method or pin "
            "--mc-budget-s"
        )

    with _pinned(pin):
        metric = build_metric(run_cfg.metric)
        problems = _corpus_problems(rows, metric, max_problems)
        truth = _ensure_truth(
            problems,
            metric,
            truth_dir,
            truth_samples,
            run_cfg.solver.exp_tol,
            workers,
            args.require_truth,
        )

        ref = run_cfg.resolved["integrator"]
        table_rows = []
        bq_means: dict[str, dict] = {}
        mc_budgets: dict[str, dict] = {}
        for bi, budget in enumerate(budgets):
            rays = max(2, round(budget * ref["rays"] / ref["samples"]))
            budget_obj = SampleBudget(samples=budget, rays=rays)

            tasks, meta = [], []
            for method in bq_methods:
                mi = BENCHMARK_METHODS.index(method)
                for rep in range(repeats):
                    seeds = [
                        _cell_seed(seed, bi, mi, rep, p["index"]) for p in problems
                    ]
                    tasks.append(
                        (
                            metric,
                            problems,
                            method,
                            budget_obj,
                            seeds,
                            run_cfg.integrator.config,
                            run_cfg.solver,
                        )
                    )
                    meta.append((method, rep))
            results = _run_cells(tasks, workers)

            times = {m: {p["problem_id"]: [] for p in problems} for m in bq_methods}
            for (method, rep), cell in zip(meta, results):
                errors, wall = [], 0.0
                for problem, (est, clock, _) in zip(problems, cell):
                    truth_value = truth[problem["problem_id"]]["value"]
                    errors.append(abs(est - truth_value) / truth_value)
                    times[method][problem["problem_id"]].append(clock)
                    wall += clock
                table_rows.append(
                    (method, budget, rep, float(np.mean(errors)), wall, len(problems))
                )

            key = str(budget)
            bq_means[key] = {
                p["problem_id"]: {
                    m: float(np.mean(times[m][p["problem_id"]])) for m in bq_methods
                }
                for p in problems
            }
            if "mc" in methods:
                mc_budgets[key] = {
                    p["problem_id"]: (
                        args.mc_budget_s
                        if args.mc_budget_s is not None
                        else max(bq_means[key][p["problem_id"]].values())
                    )
                    for p in problems
                }
                mi = BENCHMARK_METHODS.index("mc")
                for rep in range(repeats):
                    errors, wall = [], 0.0
                    for problem in problems:
                        pid = problem["problem_id"]
                        est = mc_subsample(
                            truth[pid]["pool"],
                            runtime_budget_s=mc_budgets[key][pid],
                            seed=_cell_seed(seed, bi, mi, rep, problem["index"]),
                        )
                        errors.append(
                            abs(float(est.value) - truth[pid]["value"])
                            / truth[pid]["value"]
                        )
                        wall += est.wall_clock_s
                    table_rows.append(
                        ("mc", budget, rep, float(np.mean(errors)), wall, len(problems))
                    )

    medians = {
        m: {
            str(b): float(
                np.median(
                    [r[3] for r in table_rows if r[0] == m and r[1] == b]
                )
            )
            for b in budgets
        }
        for m in methods
    }

    resolved = _overridden_resolved(
        run_cfg,
        methods=list(methods),
        budgets=list(budgets),
        repeats=repeats,
        seed=seed,
        truth_samples=truth_samples,
        workers=workers,
        max_problems=max_problems,
        pin_blas=pin,
        truth=truth_dir,
    )
    columns = ["method", "budget", "repeat", "mean_rel_error", "wall_clock_s", "n_problems"]
    table_header = {"command": "bench-corpus", "config": resolved}
    _write_table(os.path.join(out_dir, "bench_corpus.tsv"), table_header, columns, table_rows)
    manifest = {
        "command": "bench-corpus",
        "config": resolved,
        "corpus": os.path.abspath(args.corpus),
        "error_definition": ERROR_DEFINITION,
        "problems": [
            {
                "index": p["index"],
                "problem_id": p["problem_id"],
                "truth": truth[p["problem_id"]]["value"],
                "truth_se": truth[p["problem_id"]]["se"],
                "pool_size": truth[p["problem_id"]]["pool"].size,
            }
            for p in problems
        ],
        "bq_mean_wall_clock_s": bq_means,
        "mc_budget_s": mc_budgets,
        "mc_budget_pinned": args.mc_budget_s is not None,
        "medians": medians,
        "timing_derived": ["wall_clock_s", "bq_mean_wall_clock_s"]
        + ([] if args.mc_budget_s is not None else ["mc_budget_s", "mc rows' mean_rel_error"]),
    }
    _write_json(os.path.join(out_dir, "bench_corpus_manifest.json"), manifest)
    if args.svg:
        _corpus_svg(os.path.join(out_dir, "bench_corpus.svg"), table_rows, methods, budgets)
    for method in methods:
        for b in budgets:
            print(f"{method} budget={b}: median mean-relative-error {medians[method][str(b)]:.4g}")
    print(f"outputs in {out_dir}: bench_corpus.tsv, bench_corpus_manifest.json")
    return 0


# ---------------------------------------------------------------------------
# bench-runtime


def _cmd_bench_runtime(args) -> int:
    header, rows = _read_corpus(args.problem)
    base_dir = os.path.dirname(os.path.abspath(args.problem))
    run_cfg = parse_config(header["config"], base_dir=base_dir)
    bench = run_cfg.benchmark

    if not 0 <= args.index < len(rows):
        raise ValidationError(
            f"--index {args.index} is out of range; the corpus holds {len(rows)} problems"
        )
    methods = _parse_methods(args.methods) if args.methods else list(bench.methods)
    if args.limits:
        limits = _parse_csv(args.limits, "--limits", float)
    elif bench.limits is not None:
        limits = list(bench.limits)
    else:
        limits = default_runtime_limits()
    if any(not s > 0 for s in limits):
        raise ValidationError("--limits must be positive")
    repeats = args.repeats if args.repeats is not None else bench.repeats
    if repeats < 1:
        raise ValidationError("--repeats must be positive")
    seed = args.seed if args.seed is not None else bench.seed
    workers = args.workers if args.workers is not None else bench.workers
    truth_samples = (
        args.truth_samples if args.truth_samples is not None else bench.truth_samples
    )
    pin = args.pin_blas or bench.pin_blas
    out_dir = os.path.abspath(args.out_dir) if args.out_dir else base_dir
    os.makedirs(out_dir, exist_ok=True)
    truth_dir = (
        os.path.abspath(args.truth_dir)
        if args.truth_dir
        else (bench.truth or os.path.join(out_dir, "truth"))
    )

    with _pinned(pin):
        metric = build_metric(run_cfg.metric)
        problems = _corpus_problems(rows, metric, None)
        problem = problems[args.index]
        truth = _ensure_truth(
            [problem],
            metric,
            truth_dir,
            truth_samples,
            run_cfg.solver.exp_tol,
            workers,
            args.require_truth,
        )[problem["problem_id"]]

        table_rows = []
        for li, limit in enumerate(limits):
            for method in methods:
                mi = BENCHMARK_METHODS.index(method)
                for rep in range(repeats):
                    res = run_integration(
                        IntegrationProblem(metric, problem["mu"], problem["Sigma"]),
                        method,
                        RuntimeBudget(limit),
                        seed=_cell_seed(seed, li, mi, rep),
                        config=run_cfg.integrator.config,
                        solver=run_cfg.solver,
                    )
                    rel = abs(float(res.mean) - truth["value"]) / truth["value"]
                    table_rows.append(
                        (
                            method,
                            float(limit),
                            rep,
                            float(res.wall_clock_s),
                            rel,
                            float(res.mean),
                            int(res.n_observations),
                        )
                    )

    aggregates: dict[str, list[dict]] = {m: [] for m in methods}
    for method in methods:
        for limit in limits:
            errs = [r[4] for r in table_rows if r[0] == method and r[1] == float(limit)]
            mean = float(np.mean(errs))
            ci95 = (
                1.96 * float(np.std(errs, ddof=1)) / np.sqrt(len(errs))
                if len(errs) > 1
                else 0.0
            )
            aggregates[method].append(
                {
                    "limit_s": float(limit),
                    "mean_rel_error": mean,
                    "ci95": float(ci95),
                    "repeats": len(errs),
                }
            )

    resolved = _overridden_resolved(
        run_cfg,
        methods=list(methods),
        limits=[float(s) for s in limits],
        repeats=repeats,
        seed=seed,
        truth_samples=truth_samples,
        workers=workers,
        pin_blas=pin,
        truth=truth_dir,
    )
    columns = [
        "method", "limit_s", "repeat", "realized_s", "rel_error", "estimate",
        "n_observations",
    ]
    table_header = {"command": "bench-runtime", "config": resolved}
    _write_table(
        os.path.join(out_dir, "bench_runtime.tsv"), table_header, columns, table_rows
    )
    manifest = {
        "command": "bench-runtime",
        "config": resolved,
        "corpus": os.path.abspath(args.problem),
        "error_definition": ERROR_DEFINITION,
        "problem": {
            "index": problem["index"],
            "problem_id": problem["problem_id"],
            "mu": problem["mu"].tolist(),
            "Sigma": problem["Sigma"].tolist(),
            "truth": truth["value"],
            "truth_se": truth["se"],
            "pool_size": truth["pool"].size,
        },
        "aggregates": aggregates,
        "timing_derived": [
            "realized_s",
            "estimate, rel_error, and n_observations (runtime-budgeted acquisition)",
        ],
    }
    _write_json(os.path.join(out_dir, "bench_runtime_manifest.json"), manifest)
    if args.svg:
        _runtime_svg(os.path.join(out_dir, "bench_runtime.svg"), aggregates)
    for method in methods:
        first, last = aggregates[method][0], aggregates[method][-1]
        print(
            f"{method}: mean rel error {first['mean_rel_error']:.4g} at "
            f"{first['limit_s']:g}s -> {last['mean_rel_error']:.4g} at "
            f"{last['limit_s']:g}s"
        )
    print(f"outputs in {out_dir}: bench_runtime.tsv, bench_runtime_manifest.json")
    return 0


# ---------------------------------------------------------------------------
# optional SVG summaries


def _load_pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - present in test env
        raise ValidationError("SVG summaries need the matplotlib package") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _corpus_svg(path, table_rows, methods, budgets) -> None:
    plt = _load_pyplot()
    labels, data = [], []
    for method in methods:
        for budget in budgets:
            values = [r[3] for r in table_rows if r[0] == method and r[1] == budget]
            labels.append(f"{method}\nn={budget}")
            data.append(values)
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(data), 4.0))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(data) + 1))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("mean relative error")
    flat = [v for values in data for v in values]
    if flat and min(flat) > 0:
        ax.set_yscale("log")
    ax.set_title("fixed-budget protocol")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _runtime_svg(path, aggregates) -> None:
    plt = _load_pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for method, entries in aggregates.items():
        xs = [e["limit_s"] for e in entries]
        ys = [e["mean_rel_error"] for e in entries]
        es = [e["ci95"] for e in entries]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=method)
    ax.set_xlabel("runtime limit (s)")
    ax.set_ylabel("mean relative error")
    flat = [e["mean_rel_error"] for entries in aggregates.values() for e in entries]
    if flat and min(flat) > 0:
        ax.set_yscale("log")
    ax.legend()
    ax.set_title("error versus runtime")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# parser and entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoquad",
        description=(
            "Generate manifold datasets, fit mixtures of Riemannian normal "
            "distributions, and benchmark normalization-constant estimators."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset to a points file")
    g.add_argument("--dataset", required=True, help="circle, curly, or two-circles")
    g.add_argument("--n", type=int, default=1000, help="number of points")
    g.add_argument("--noise", type=float, default=0.05, help="noise stddev")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--embed-dim", type=int, default=None,
                   help="embed into this dimension via a random orthonormal map")
    g.add_argument("--embed-noise-var", type=float, default=0.01,
                   help="per-coordinate noise variance added before standardizing")
    g.add_argument("--out", required=True, help="output points file")
    g.set_defaults(func=_cmd_gen_data)

    f = sub.add_parser("fit-land", help="fit a mixture per a configuration file")
    f.add_argument("--config", required=True, help="YAML configuration file")
    f.add_argument("--out-dir", default=None, help="override the config's output_dir")
    f.set_defaults(func=_cmd_fit_land)

    def bench_common(p):
        p.add_argument("--methods", default=None,
                       help="comma-separated subset of wsabi-l,wsabi-m,dcv,mc")
        p.add_argument("--repeats", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--truth-dir", default=None,
                       help="directory holding ground-truth sample pools")
        p.add_argument("--truth-samples", type=int, default=None,
                       help="ground-truth pool size (default from config: 40000)")
        p.add_argument("--require-truth", action="store_true",
                       help="fail instead of generating missing ground truth")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes for cells and pool building")
        p.add_argument("--pin-blas", action="store_true",
                       help="restrict linear algebra to a single core")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--svg", action="store_true",
                       help="also write a static SVG summary plot")

    c = sub.add_parser(
        "bench-corpus",
        help="fixed-budget benchmark over a corpus of integration problems",
    )
    c.add_argument("--corpus", required=True, help="corpus file from fit-land")
    c.add_argument("--budgets", default=None, help="comma-separated sample budgets")
    c.add_argument("--max-problems", type=int, default=None,
                   help="only benchmark the first N corpus problems")
    c.add_argument("--mc-budget-s", type=float, default=None,
                   help="pin the Monte Carlo runtime budget instead of measuring it")
    bench_common(c)
    c.set_defaults(func=_cmd_bench_corpus)

    r = sub.add_parser(
        "bench-runtime", help="error-versus-runtime benchmark on one problem"
    )
    r.add_argument("--problem", required=True,
                   help="corpus file holding the problem definition")
    r.add_argument("--index", type=int, default=0,
                   help="which corpus problem to benchmark (default: first)")
    r.add_argument("--limits", default=None,
                   help="comma-separated wall-clock limits in seconds "
                        "(default: 30 points from 5 to 65)")
    bench_common(r)
    r.set_defaults(func=_cmd_bench_runtime)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
