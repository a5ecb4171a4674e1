"""Desk-scale comparison against the baselines and the loss ablation.

Both experiments are driven by a :class:`~sparsedeq.config.RunConfig` and
write only CSV files whose contents depend on the seeds, never on the
worker count.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np

from .classical import fbp, select_tv_lambda, tv_reconstruct
from .config import RunConfig
from .deq import resolve_gamma
from .io import write_csv
from .metrics import psnr, ssim
from .phantoms import phantom_set
from .sampling import AngleMask, equispaced_indices
from .tomo import Geometry, radon_forward
from .training import (HISTORY_COLUMNS, LOSS_KINDS, NoiseConfig, TrainResult, ValidationSet, deq_reconstruct,
                       save_train_state, train)

METRIC_COLUMNS = ["id", "method", "s", "psnr", "ssim"]
SUMMARY_COLUMNS = ["method", "s", "n", "psnr", "ssim"]


def desk_images(cfg: RunConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Training and validation phantoms from the ``data`` section."""
    d = cfg.values["data"]
    if d["kind"] != "random-ellipses":
        raise ValueError(f"unsupported data kind {d['kind']!r}")
    imgs = phantom_set(d["n_train"] + d["n_val"], cfg.values["geometry"]["n_pixels"], d["seed"],
                       d["n_min"], d["n_max"])
    return imgs[:d["n_train"]], imgs[d["n_train"]:]


def tuning_measurement(x: np.ndarray, g: Geometry, s: int, noise: NoiseConfig) -> tuple[np.ndarray, AngleMask]:
    """Equispaced noisy measurement of the held-out tuning phantom."""
    mask = AngleMask(tuple(equispaced_indices(s, g.n_angles_total)), g.n_angles_total)
    full = radon_forward(x, g)
    sigma = noise.relative_level * float(np.max(np.abs(full)))
    rng = np.random.default_rng(np.random.SeedSequence([noise.seed, 4241, s]))
    y = full[mask.array] + (sigma * rng.standard_normal((len(mask), g.n_detectors)) if sigma else 0.0)
    return y, mask


def tuned_lambda(cfg: RunConfig, g: Geometry, x_tune: np.ndarray, s: int) -> float:
    """The configured TV weight, or a grid search on one held-out phantom when it is ``auto``."""
    lam = cfg.values["tv"]["lambda"]
    if not isinstance(lam, str):
        return float(lam)
    y, mask = tuning_measurement(x_tune, g, s, cfg.noise())
    best, _ = select_tv_lambda(x_tune, y, mask, g, base=cfg.tv(1.0))
    return best


def score(rec: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    s = ssim(rec, ref) if min(ref.shape) >= 11 else float("nan")
    return psnr(rec, ref), s


def baseline_rows(cfg: RunConfig, g: Geometry, val: ValidationSet, s: int, lam: float) -> list[list]:
    rows = []
    tv_cfg = cfg.tv(lam)
    for i, (x, y) in enumerate(zip(val.images, val.y)):
        rows.append([i, "fbp", s, *score(fbp(y, val.mask, g), x)])
        rows.append([i, "tv", s, *score(tv_reconstruct(y, val.mask, g, tv_cfg).image, x)])
    return rows


def deq_rows(result: TrainResult, cfg: RunConfig, g: Geometry, val: ValidationSet, s: int,
             method: str = "deq") -> list[list]:
    deq = cfg.deq()
    gamma = resolve_gamma(deq, g, s_default=s)
    rows = []
    for i, (x, y) in enumerate(zip(val.images, val.y)):
        rec, _ = deq_reconstruct(y, val.mask, result.params, deq, g, gamma)
        rows.append([i, method, s, *score(rec, x)])
    return rows


def summarize(rows: list[list]) -> list[list]:
    """Mean PSNR and SSIM per ``(method, s)`` in first-seen order."""
    groups: dict[tuple[str, int], list[list]] = {}
    for r in rows:
        groups.setdefault((r[1], int(r[2])), []).append(r)
    return [[m, s, len(g), float(np.mean([r[3] for r in g])), float(np.mean([r[4] for r in g]))]
            for (m, s), g in groups.items()]


def _train_logged(train_imgs, cfg: RunConfig, g, val_imgs, kind: str, log: Callable[[str], None] | None):
    tcfg = cfg.train(kind)

    def on_epoch(epoch, res):
        if log is not None:
            h = res.history[-1]
            log(f"[{kind} s={tcfg.sampling.s}] epoch {epoch}: loss={h['train_loss']:.5g} "
                f"val_psnr={h['val_psnr']:.2f} iters={h['mean_fp_iters']:.1f}")

    return train(train_imgs, tcfg, g, val_imgs, on_epoch=on_epoch), tcfg


def run_desk(cfg: RunConfig, s_values, out_dir, log: Callable[[str], None] | None = None) -> list[list]:
    """Self-supervised DEQ against FBP and TV for each sparsity level.

    Writes ``metrics.csv`` (per validation image), ``summary.csv`` and
    ``history_s<s>.csv`` and returns the summary rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = cfg.geometry()
    train_imgs, val_imgs = desk_images(cfg)
    rows = []
    for s in s_values:
        sub = cfg_for_s(cfg, s)
        val = ValidationSet.build(val_imgs, g, s, sub.noise())
        lam = tuned_lambda(sub, g, train_imgs[0], s)
        rows += baseline_rows(sub, g, val, s, lam)
        result, _ = _train_logged(train_imgs, sub, g, val_imgs, "self", log)
        rows += deq_rows(result, sub, g, val, s)
        write_csv(out / f"history_s{s}.csv", HISTORY_COLUMNS, result.history_rows())
        save_train_state(out / f"model_s{s}.tsdn", result.state, sub.values["train"]["n_epochs"],
                         {"s": s, "loss_kind": "self", "tv_lambda": lam})
    write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    summary = summarize(rows)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    return summary


def cfg_for_s(cfg: RunConfig, s: int) -> RunConfig:
    sub = RunConfig({k: dict(v) for k, v in cfg.values.items()})
    sub.values["sampling"]["s"] = int(s)
    sub.values["train"]["val_s"] = int(s)
    return sub


def run_ablation(cfg: RunConfig, out_dir, kinds=LOSS_KINDS, plot: bool = True,
                 log: Callable[[str], None] | None = None) -> dict[str, TrainResult]:
    """Train once per loss kind and write ``history_<kind>.csv``, ``ablation.csv`` and a plot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = cfg.geometry()
    train_imgs, val_imgs = desk_images(cfg)
    results = {}
    rows = []
    for kind in kinds:
        res, _ = _train_logged(train_imgs, cfg, g, val_imgs, kind, log)
        results[kind] = res
        write_csv(out / f"history_{kind}.csv", HISTORY_COLUMNS, res.history_rows())
        last = res.history[-1]
        rows.append([kind, last["epoch"], last["val_psnr"], last["val_ssim"]])
    write_csv(out / "ablation.csv", ["loss_kind", "epochs", "final_val_psnr", "final_val_ssim"], rows)
    if plot:
        plot_histories({k: r.history for k, r in results.items()}, out / "ablation.png")
    return results


LOSS_LABELS = {"self": "self-supervised", "sup": "supervised (operator norm)", "sup-plain": "supervised (image)"}


def plot_histories(histories: dict[str, list[dict]], path) -> None:
    """Validation PSNR and SSIM against epochs, one curve per loss kind."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for kind, hist in histories.items():
        ep = [h["epoch"] for h in hist]
        axes[0].plot(ep, [h["val_psnr"] for h in hist], label=LOSS_LABELS.get(kind, kind))
        axes[1].plot(ep, [h["val_ssim"] for h in hist], label=LOSS_LABELS.get(kind, kind))
    axes[0].set_ylabel("validation PSNR (dB)")
    axes[1].set_ylabel("validation SSIM")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
