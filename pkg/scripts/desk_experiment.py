"""Desk-scale comparison of the self-supervised equilibrium model with FBP and TV.

Trains one model per sparsity level on 32x32 random-ellipse phantoms and
writes ``metrics.csv`` (per validation image), ``summary.csv`` and the
training histories to ``--out``.

    python scripts/desk_experiment.py --out runs/desk --s 12 20
"""

import argparse
import time

from sparsedeq.cli import resolve_workers
from sparsedeq.config import load_config
from sparsedeq.experiments import run_desk


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="config file ('section.key = value' lines)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--s", type=int, nargs="+", default=[12, 20], help="sparsity levels")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args(argv)

    cfg = load_config(args.config, args.set)
    cfg.values["run"]["workers"] = resolve_workers(args.workers, cfg)
    cfg.write_resolved(args.out)
    t0 = time.time()
    summary = run_desk(cfg, args.s, args.out, log=lambda m: print(f"{time.time() - t0:8.1f}s  {m}", flush=True))
    print(f"{'method':>6s} {'s':>3s} {'psnr':>8s} {'ssim':>7s}")
    for method, s, _, p, q in summary:
        print(f"{method:>6s} {s:3d} {p:8.3f} {q:7.4f}")


if __name__ == "__main__":
    main()
