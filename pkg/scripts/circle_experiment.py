#!/usr/bin/env python3
"""End-to-end study on the unit-circle dataset.

Pipeline (each stage is skipped when its outputs already exist, so an
interrupted run can be resumed by re-running the script):

1. gen-data        sample noisy points on the unit circle.
2. fit-land        fit a two-component mixture under the learned kernel
                   metric; every normalization integral the fit requests
                   is recorded as a benchmark corpus.
3. bench-corpus    replay the corpus with all four estimators at the
                   reference sample budget, 16 repeats each, against
                   40,000-sample ground-truth pools; draws boxplots.
4. bench-runtime   sweep 30 wall-clock limits evenly spaced from 5 to 65
                   seconds on one corpus problem, 30 repeats per limit
                   and method; draws the error-versus-runtime curve.

At full scale this is hours of single-core CPU time.  Pass --desk for a
minutes-scale rehearsal with the same shape: fewer points, fewer
repeats, smaller budgets and truth pools, and two short runtime limits.
"""

from __future__ import annotations

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from geoquad.cli import main as cli_main

FULL_CONFIG = """\
data: circle.txt
output_dir: .
metric:
  family: kernel
  sigma: 0.1
  rho: 0.001
land:
  n_components: 2
  max_iterations: 7
  initial_mu_step: 0.3
  mu_gradient_tol: 0.01
  nll_tol: 2.0
  seed: {seed}
integrator:
  method: wsabi-l
  samples: 80
  rays: 18
  reuse_samples: 10
  reuse_rays: 2
benchmark:
  methods: [wsabi-l, wsabi-m, dcv, mc]
  budgets: [80]
  repeats: 16
  seed: {seed}
  truth_samples: 40000
"""

DESK_CONFIG = """\
data: circle.txt
output_dir: .
metric:
  family: kernel
  sigma: 0.1
  rho: 0.001
land:
  n_components: 2
  max_iterations: 2
  initial_mu_step: 0.3
  mu_gradient_tol: 0.01
  nll_tol: 2.0
  seed: {seed}
integrator:
  method: wsabi-l
  samples: 20
  rays: 6
  reuse_samples: 6
  reuse_rays: 2
  us_pool_size: 50
  us_starts: 2
  us_max_steps: 5
benchmark:
  methods: [wsabi-l, wsabi-m, dcv, mc]
  budgets: [20]
  repeats: 3
  seed: {seed}
  truth_samples: 2000
"""


def run(argv: list[str]) -> None:
    print("+ geoquad " + " ".join(argv), flush=True)
    rc = cli_main(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/circle", help="working directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1,
                    help="parallel benchmark workers")
    ap.add_argument("--desk", action="store_true",
                    help="minutes-scale rehearsal instead of the full protocol")
    ap.add_argument("--svg", action="store_true", default=True,
                    help="draw SVG figures (default on)")
    args = ap.parse_args()

    out = os.path.abspath(args.out_dir)
    os.makedirs(out, exist_ok=True)
    points = os.path.join(out, "circle.txt")
    config = os.path.join(out, "circle.yaml")
    template = DESK_CONFIG if args.desk else FULL_CONFIG
    n_points = 200 if args.desk else 1000

    with open(config, "w", encoding="utf-8") as fh:
        fh.write(template.format(seed=args.seed))

    if not os.path.exists(points):
        run(["gen-data", "--dataset", "circle", "--n", str(n_points),
             "--noise", "0.05", "--seed", str(args.seed), "--out", points])
    else:
        print(f"skip gen-data: {points} exists")

    fit_dir = os.path.join(out, "fit")
    corpus = os.path.join(fit_dir, "corpus.jsonl")
    if not os.path.exists(corpus):
        run(["fit-land", "--config", config, "--out-dir", fit_dir])
    else:
        print(f"skip fit-land: {corpus} exists")

    truth_dir = os.path.join(out, "truth")
    bench_dir = os.path.join(out, "bench_corpus")
    bench_argv = ["bench-corpus", "--corpus", corpus,
                  "--truth-dir", truth_dir, "--out-dir", bench_dir,
                  "--workers", str(args.workers)]
    if args.desk:
        bench_argv += ["--max-problems", "2"]
    if args.svg:
        bench_argv += ["--svg"]
    if not os.path.exists(os.path.join(bench_dir, "bench_corpus.tsv")):
        run(bench_argv)
    else:
        print(f"skip bench-corpus: {bench_dir} has results")

    runtime_dir = os.path.join(out, "bench_runtime")
    runtime_argv = ["bench-runtime", "--problem", corpus, "--index", "0",
                    "--truth-dir", truth_dir, "--out-dir", runtime_dir,
                    "--workers", str(args.workers)]
    if args.desk:
        runtime_argv += ["--limits", "0.5,2.0", "--repeats", "2",
                         "--methods", "wsabi-l,mc"]
    else:
        # default grid: 30 limits evenly spaced over [5s, 65s]
        runtime_argv += ["--repeats", "30"]
    if args.svg:
        runtime_argv += ["--svg"]
    if not os.path.exists(os.path.join(runtime_dir, "bench_runtime.tsv")):
        run(runtime_argv)
    else:
        print(f"skip bench-runtime: {runtime_dir} has results")

    print(f"done; results under {out}")


if __name__ == "__main__":
    main()
