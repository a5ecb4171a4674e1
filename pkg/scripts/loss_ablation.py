"""Training curves of the three losses (weighted self-supervised, operator-weighted
supervised, plain image-domain supervised) on the desk-scale setting.

Writes ``history_<kind>.csv``, ``ablation.csv`` and ``ablation.png`` to ``--out``.

    python scripts/loss_ablation.py --out runs/ablation
"""

import argparse
import time

from sparsedeq.cli import resolve_workers
from sparsedeq.config import load_config
from sparsedeq.experiments import run_ablation
from sparsedeq.training import LOSS_KINDS


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--kinds", nargs="+", default=list(LOSS_KINDS), choices=LOSS_KINDS)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--no-plot", action="store_true")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args(argv)

    cfg = load_config(args.config, args.set)
    cfg.values["run"]["workers"] = resolve_workers(args.workers, cfg)
    cfg.write_resolved(args.out)
    t0 = time.time()
    results = run_ablation(cfg, args.out, args.kinds, plot=not args.no_plot,
                           log=lambda m: print(f"{time.time() - t0:8.1f}s  {m}", flush=True))
    for kind, res in results.items():
        last = res.history[-1] if res.history else {}
        print(f"{kind:>10s}: final val PSNR {last.get('val_psnr', float('nan')):.3f} dB")


if __name__ == "__main__":
    main()
