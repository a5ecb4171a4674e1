"""Batch command line: simulate, reconstruct, train, verify, evaluate.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .classical import fbp, tv_reconstruct
from .config import ConfigError, RunConfig, load_config
from .denoiser import load_checkpoint, save_checkpoint
from .deq import resolve_gamma
from .experiments import METRIC_COLUMNS, SUMMARY_COLUMNS, desk_images, score, summarize, tuned_lambda
from .io import ContainerError, export_pgm, read_container, read_csv, write_container, write_csv
from .sampling import AngleMask, sample_mask
from .tomo import radon_forward
from .training import (HISTORY_COLUMNS, NumericalError, ValidationSet, deq_reconstruct, load_train_state,
                       save_train_state, train)
from .verify import SuiteConfig, format_reports, verification_suite, write_reports_csv

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERICAL = 0, 1, 2, 3
MANIFEST_COLUMNS = ["id", "split", "s", "mask", "sigma", "phantom", "sinogram", "measurement"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_workers(flag: int | None, cfg: RunConfig) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("TSDQ_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"TSDQ_WORKERS={env!r} is not an integer") from None
    return int(cfg.values["run"]["workers"])


def _load(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.values["run"]["seed"] = args.seed
    cfg.values["run"]["workers"] = resolve_workers(args.workers, cfg)
    if cfg.values["run"]["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    """Phantoms, full sinograms and masked noisy measurements plus ``manifest.csv``.

    Validation items use the fixed equispaced mask and the same noise as the
    training-time validation; training items draw a mask from ``sampling``.
    """
    g = cfg.geometry()
    train_imgs, val_imgs = desk_images(cfg)
    noise = cfg.noise()
    seed = cfg.values["run"]["seed"]
    rows = []
    val = ValidationSet.build(val_imgs, g, cfg.validation_s, noise)
    items = [("train", x, None) for x in train_imgs] + [("val", x, y) for x, y in zip(val.images, val.y)]
    dist = cfg.sampling()
    for i, (split, x, y) in enumerate(items):
        full = radon_forward(x, g)
        sigma = noise.relative_level * float(np.max(np.abs(full)))
        if split == "val":
            mask = val.mask
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 104729, i]))
            mask = sample_mask(dist, rng) if dist.kind != "complementary" else None
            if mask is None:
                raise ConfigError("simulate needs a uniform or equispaced sampling kind")
            y = full[mask.array] + (sigma * rng.standard_normal((len(mask), g.n_detectors)) if sigma else 0.0)
        names = [f"phantom_{i:03d}.tsdq", f"sinogram_{i:03d}.tsdq", f"measurement_{i:03d}.tsdq"]
        write_container(out / names[0], x, "image")
        write_container(out / names[1], full, "sinogram")
        write_container(out / names[2], y, "sinogram")
        rows.append([i, split, len(mask), mask.to_string(), sigma, *names])
    write_csv(out / "manifest.csv", MANIFEST_COLUMNS, rows)
    cfg.write_resolved(out)
    print(f"wrote {len(rows)} items to {out}")
    return EXIT_OK


def _read_manifest(data_dir: Path) -> list[dict]:
    path = data_dir / "manifest.csv"
    if not path.is_file():
        raise ConfigError(f"{path} not found; run 'simulate' first")
    return read_csv(path)


def cmd_reconstruct(cfg: RunConfig, method: str, data_dir: Path, out: Path, checkpoint: str | None,
                    split: str = "val", pgm: bool = False) -> int:
    """Reconstruct every measurement of ``split`` and score it when the phantom is present."""
    g = cfg.geometry()
    manifest = [r for r in _read_manifest(data_dir) if split == "all" or r["split"] == split]
    if not manifest:
        raise ConfigError(f"no items of split {split!r} in {data_dir}")
    params = None
    if method == "deq":
        if checkpoint is None:
            raise ConfigError("method 'deq' needs --checkpoint")
        if not Path(checkpoint).is_file():
            raise ConfigError(f"checkpoint {checkpoint} does not exist")
        params = load_checkpoint(checkpoint)[0]
    lam = {}
    rows = []
    for r in manifest:
        y = read_container(data_dir / r["measurement"]).data
        mask = AngleMask.from_string(r["mask"], g.n_angles_total)
        s = len(mask)
        if method == "fbp":
            rec = fbp(y, mask, g)
        elif method == "tv":
            if s not in lam:
                lam[s] = tuned_lambda(cfg, g, read_container(data_dir / _first_train(data_dir)).data, s)
            rec = tv_reconstruct(y, mask, g, cfg.tv(lam[s])).image
        else:
            deq = cfg.deq()
            rec, _ = deq_reconstruct(y, mask, params, deq, g, resolve_gamma(deq, g, s_default=s))
        name = f"recon_{int(r['id']):03d}"
        write_container(out / f"{name}.tsdq", rec, "image")
        if pgm:
            export_pgm(rec, out / f"{name}.pgm", (0.0, 1.0))
        truth = data_dir / r["phantom"]
        if truth.is_file():
            rows.append([int(r["id"]), method, s, *score(rec, read_container(truth).data)])
    if rows:
        write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    if lam:
        write_csv(out / "tv_lambda.csv", ["s", "lambda"], sorted(lam.items()))
    cfg.write_resolved(out)
    print(f"reconstructed {len(manifest)} items with {method} into {out}")
    return EXIT_OK


def _first_train(data_dir: Path) -> str:
    for r in _read_manifest(data_dir):
        if r["split"] == "train":
            return r["phantom"]
    raise ConfigError("TV weight 'auto' needs a training phantom in the data directory")


def cmd_train(cfg: RunConfig, out: Path, resume: bool = False, quiet: bool = False) -> int:
    """One run per entry of ``train.loss_kind``; each writes a checkpoint, a state file and its history."""
    g = cfg.geometry()
    train_imgs, val_imgs = desk_images(cfg)
    every = int(cfg.values["train"]["checkpoint_every"])
    for kind in cfg.values["train"]["loss_kind"]:
        tcfg = cfg.train(kind)
        sub = out / kind
        sub.mkdir(parents=True, exist_ok=True)
        state_path = sub / "state.tsdn"
        hist_path = sub / "history.csv"
        state, start, history = None, 0, []
        if resume and state_path.is_file():
            state, start, _ = load_train_state(state_path)
            if hist_path.is_file():
                history = [[_num(row[c]) for c in HISTORY_COLUMNS] for row in read_csv(hist_path)
                           if int(row["epoch"]) <= start]
        meta = {"loss_kind": kind, "s": tcfg.sampling.s}

        def on_epoch(epoch, res, kind=kind, sub=sub, history=history):
            h = res.history[-1]
            history.append([h[c] for c in HISTORY_COLUMNS])
            if not quiet:
                print(f"[{kind}] epoch {epoch}: loss={h['train_loss']:.5g} val_psnr={h['val_psnr']:.2f} "
                      f"val_ssim={h['val_ssim']:.4f} iters={h['mean_fp_iters']:.1f}", flush=True)
            if every and epoch % every == 0:
                save_train_state(sub / "state.tsdn", res.state, epoch, meta)
                write_csv(sub / "history.csv", HISTORY_COLUMNS, history)

        result = train(train_imgs, tcfg, g, val_imgs, state=state, start_epoch=start, on_epoch=on_epoch)
        save_train_state(state_path, result.state, max(start, tcfg.n_epochs), meta)
        save_checkpoint(sub / "model.tsdn", result.params, meta)
        write_csv(hist_path, HISTORY_COLUMNS, history)
    cfg.write_resolved(out)
    return EXIT_OK


def _num(text: str):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    v = cfg.values["verify"]
    suite = SuiteConfig(thm1_seeds=v["thm1_seeds"], thm1_images=v["thm1_images"], mc_reps=v["mc_reps"],
                        prop2_draws=v["prop2_draws"])
    reports = verification_suite(cfg.values["run"]["seed"], suite)
    text = format_reports(reports)
    (out / "reports.txt").write_text(text)
    write_reports_csv(out / "reports.csv", reports)
    cfg.write_resolved(out)
    print(text, end="")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_evaluate(recon_dirs: list[str], out: Path) -> int:
    """Average every ``metrics.csv`` found in ``recon_dirs`` per ``(method, s)``."""
    rows = []
    for d in recon_dirs:
        path = Path(d) / "metrics.csv"
        if not path.is_file():
            raise ConfigError(f"{d} holds no metrics.csv")
        found = read_csv(path)
        if not found:
            raise ConfigError(f"{path} is empty")
        rows += [[int(r["id"]), r["method"], int(r["s"]), float(r["psnr"]), float(r["ssim"])] for r in found]
    summary = summarize(rows)
    summary.sort(key=lambda r: (r[0], r[1]))
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    for m, s, n, p, q in summary:
        print(f"{m:>6s}  s={s:<3d} n={n:<3d} psnr={p:7.3f}  ssim={q:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="config file with 'section.key = value' lines")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    common.add_argument("--workers", type=int, help="worker processes (fallback: TSDQ_WORKERS)")
    common.add_argument("--out", required=True, help="output directory")

    parser = _Parser(prog="sparsedeq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="generate phantoms and measurements")
    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct simulated measurements")
    p.add_argument("--method", choices=["fbp", "tv", "deq"], required=True)
    p.add_argument("--in", dest="data", required=True, help="directory written by simulate")
    p.add_argument("--checkpoint", help="trained model (method deq)")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--pgm", action="store_true", help="also export 16-bit PGM images")
    p = sub.add_parser("train", parents=[common], help="train the equilibrium model")
    p.add_argument("--resume", action="store_true", help="continue from <out>/<loss_kind>/state.tsdn")
    p.add_argument("--quiet", action="store_true")
    sub.add_parser("verify", parents=[common], help="run the identity and gradient checks")
    p = sub.add_parser("evaluate", parents=[common], help="summarise metrics per (method, s)")
    p.add_argument("recon_dirs", nargs="+")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _load(args)
        out = _out(args)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.method, Path(args.data), out, args.checkpoint, args.split, args.pgm)
        if args.command == "train":
            return cmd_train(cfg, out, args.resume, args.quiet)
        if args.command == "verify":
            return cmd_verify(cfg, out)
        cfg.write_resolved(out)
        return cmd_evaluate(args.recon_dirs, out)
    except (UsageError, ConfigError, ContainerError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
