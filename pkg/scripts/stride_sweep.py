"""Patch-size / stride sweep: one pipeline run per seed, one summary row per (n, stride).

    python scripts/stride_sweep.py --seeds 0 1 2 --out sweep --environment indoor

Writes <out>/seed<k>/... for each seed plus <out>/sweep.csv with all rows.
"""
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = "1"  # deterministic reductions, as in the CLI

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

from canehsi.pipeline import RunConfig, load_summary_csv, run_pipeline  # noqa: E402

DEFAULT_SIZES = [[19, 9], [19, 19], [15, 9], [15, 15]]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--sizes", type=int, nargs=2, action="append", metavar=("N", "STRIDE"))
    p.add_argument("--environment", choices=("indoor", "outdoor"), default="indoor")
    p.add_argument("--per-class", type=int, default=6)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--with-svm", action="store_true", help="also train the flat SVC/SVR per size")
    p.add_argument("--out", default="sweep")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    stages = ["generate", "calibrate", "segment", "patch", "resnet"]
    if args.with_svm:
        stages.insert(4, "svm")
    rows = []
    for seed in args.seeds:
        cfg = RunConfig.from_json({
            "stages": stages,
            "environment": args.environment,
            "per_class": args.per_class,
            "patches": {"sizes": [list(s) for s in (args.sizes or DEFAULT_SIZES)]},
            "resnet": {"epochs": args.epochs},
            "seed": seed,
            "out": str(Path(args.out) / f"seed{seed}"),
        })
        run_pipeline(cfg)
        for r in load_summary_csv(Path(cfg.out) / "summary.csv"):
            rows.append({"seed": seed, **r})
            print(f"seed {seed} n={r['patch_size']} stride={r['stride']} train={r['n_train']} test_acc={r['test_accuracy']}")
    with open(Path(args.out) / "sweep.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
