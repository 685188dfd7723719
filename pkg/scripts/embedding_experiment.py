#!/usr/bin/env python3
"""Circle-in-higher-dimensions study.

Embeds the noisy unit circle into R^d for d in {3, 4, 5} via a random
isometry plus small off-manifold noise, fits a two-component mixture on
each embedded dataset, and replays the recorded integration corpora with
all four estimators.  The metric regularizer rho grows with the ambient
dimension (0.01, 0.0316, 0.063) because the far-field volume element
scales with rho^(-d/2) and would otherwise dwarf the on-manifold signal.

Stages are skipped when their outputs already exist.  Pass --desk for a
minutes-scale rehearsal (fewer points, repeats, and truth samples).
"""

from __future__ import annotations

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from geoquad.cli import main as cli_main

DIMS = (3, 4, 5)
RHO = {3: 0.01, 4: 0.0316, 5: 0.063}

CONFIG = """\
data: circle{dim}d.txt
output_dir: .
metric:
  family: kernel
  sigma: 0.25
  rho: {rho}
land:
  n_components: 2
  max_iterations: {t_max}
  initial_mu_step: 0.3
  mu_gradient_tol: 0.01
  nll_tol: 2.0
  seed: {seed}
integrator:
  method: wsabi-l
  samples: {samples}
  rays: {rays}
  reuse_samples: {reuse_samples}
  reuse_rays: 2
{extra}benchmark:
  methods: [wsabi-l, wsabi-m, dcv, mc]
  budgets: [{samples}]
  repeats: {repeats}
  seed: {seed}
  truth_samples: {truth}
"""

DESK_EXTRA = """\
  us_pool_size: 50
  us_starts: 2
  us_max_steps: 5
"""


def run(argv: list[str]) -> None:
    print("+ geoquad " + " ".join(argv), flush=True)
    rc = cli_main(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/embedding")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--dims", default=",".join(str(d) for d in DIMS),
                    help="comma-separated ambient dimensions (subset of 3,4,5)")
    ap.add_argument("--desk", action="store_true",
                    help="minutes-scale rehearsal instead of the full protocol")
    args = ap.parse_args()

    dims = [int(tok) for tok in args.dims.split(",") if tok.strip()]
    for d in dims:
        if d not in RHO:
            sys.exit(f"error: no regularizer table entry for dimension {d}")

    scale = dict(samples=20, rays=6, reuse_samples=6, repeats=3,
                 truth=2000, t_max=2, n=200, extra=DESK_EXTRA) if args.desk \
        else dict(samples=80, rays=18, reuse_samples=10, repeats=16,
                  truth=40000, t_max=4, n=1000, extra="")

    for d in dims:
        out = os.path.abspath(os.path.join(args.out_dir, f"{d}d"))
        os.makedirs(out, exist_ok=True)
        points = os.path.join(out, f"circle{d}d.txt")
        config = os.path.join(out, f"circle{d}d.yaml")
        with open(config, "w", encoding="utf-8") as fh:
            fh.write(CONFIG.format(dim=d, rho=RHO[d], seed=args.seed, **scale))

        if not os.path.exists(points):
            run(["gen-data", "--dataset", "circle", "--n", str(scale["n"]),
                 "--noise", "0.05", "--seed", str(args.seed),
                 "--embed-dim", str(d), "--embed-noise-var", "0.01",
                 "--out", points])
        else:
            print(f"skip gen-data: {points} exists")

        fit_dir = os.path.join(out, "fit")
        corpus = os.path.join(fit_dir, "corpus.jsonl")
        if not os.path.exists(corpus):
            run(["fit-land", "--config", config, "--out-dir", fit_dir])
        else:
            print(f"skip fit-land: {corpus} exists")

        bench_dir = os.path.join(out, "bench_corpus")
        bench_argv = ["bench-corpus", "--corpus", corpus,
                      "--truth-dir", os.path.join(out, "truth"),
                      "--out-dir", bench_dir, "--workers", str(args.workers),
                      "--svg"]
        if args.desk:
            bench_argv += ["--max-problems", "2"]
        if not os.path.exists(os.path.join(bench_dir, "bench_corpus.tsv")):
            run(bench_argv)
        else:
            print(f"skip bench-corpus: {bench_dir} has results")

    print("done")


if __name__ == "__main__":
    main()
