"""Measurement pairs, the three training losses, JFB gradients, Adam and the epoch loop."""

from __future__ import annotations

import concurrent.futures as cf
import multiprocessing as mp
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .denoiser import (DenoiserParams, DenoiserSpec, denoiser_vjp, init_denoiser, load_checkpoint,
                       save_checkpoint, spectral_normalize)
from .deq import DEQConfig, apply_t_batch, initial_guess, resolve_gamma, solve_batch
from .metrics import psnr, ssim
from .sampling import (AngleMask, MaskDistribution, WeightDiagonal, compute_weight_diagonal,
                       equispaced_indices, sample_pair)
from .tomo import Geometry, embed_masked, radon_adjoint, radon_forward

LOSS_KINDS = ("self", "sup", "sup-plain")
HISTORY_COLUMNS = ["epoch", "loss_kind", "train_loss", "val_psnr", "val_ssim", "mean_fp_iters"]


class NumericalError(RuntimeError):
    """A non-finite loss or gradient; the optimiser step is aborted."""


@dataclass(frozen=True)
class NoiseConfig:
    """White Gaussian noise with ``sigma = relative_level * max |A x|``."""

    relative_level: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.relative_level < 0:
            raise ValueError("relative_level must be >= 0")


@dataclass
class MeasurementPair:
    y: np.ndarray
    mask: AngleMask
    y_prime: np.ndarray
    mask_prime: AngleMask
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        if self.y.shape[0] != len(self.mask) or self.y_prime.shape[0] != len(self.mask_prime):
            raise ValueError("measurement rows do not match their masks")


@dataclass
class TrainConfig:
    """Training settings.

    ``averaging`` selects the evaluated parameters: ``None`` (the Adam
    iterate) or ``"ema"`` (an exponential moving average of the iterates,
    weight ``ema_decay``).
    """

    loss_kind: str = "self"
    lr: float = 2e-4
    batch_size: int = 8
    n_epochs: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    averaging: str | None = None
    ema_decay: float = 0.99
    deq: DEQConfig = field(default_factory=DEQConfig)
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    sampling: MaskDistribution = field(default_factory=lambda: MaskDistribution("uniform", 12, 60))
    pair_mode: str = "iid"
    val_s: int | None = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    sn_init_iters: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")
        if self.lr <= 0 or self.batch_size < 1 or self.n_epochs < 0:
            raise ValueError("need lr > 0, batch_size >= 1, n_epochs >= 0")
        if self.averaging not in (None, "ema"):
            raise ValueError(f"unknown averaging {self.averaging!r}")
        if self.pair_mode not in ("iid", "complementary"):
            raise ValueError(f"unknown pair mode {self.pair_mode!r}")

    @property
    def validation_s(self) -> int:
        return self.val_s if self.val_s is not None else self.sampling.s


# ---------------------------------------------------------------------------
# data


def _noisy(clean: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0.0:
        return clean.copy()
    return clean + sigma * rng.standard_normal(clean.shape)


def make_training_pair(x: np.ndarray, g: Geometry, sampling: MaskDistribution, noise: NoiseConfig,
                       rng: np.random.Generator, pair_mode: str = "iid",
                       keep_truth: bool = True) -> MeasurementPair:
    """Two independent noisy masked acquisitions ``y = M A x + e``, ``y' = M' A x + e'``."""
    x = np.asarray(x, dtype=np.float64)
    full = radon_forward(x, g)
    sigma = noise.relative_level * float(np.max(np.abs(full)))
    mask, mask_p = sample_pair(sampling, rng, pair_mode)
    y = _noisy(full[mask.array], sigma, rng)
    y_p = _noisy(full[mask_p.array], sigma, rng)
    return MeasurementPair(y, mask, y_p, mask_p, x.copy() if keep_truth else None)


def pair_weights(cfg: TrainConfig, g: Geometry) -> WeightDiagonal:
    """Weight diagonal for the law of ``M'`` under ``cfg``."""
    dist = cfg.sampling
    if cfg.pair_mode == "complementary":
        dist = MaskDistribution("complementary", 2 * dist.s, dist.n_angles_total)
    return compute_weight_diagonal(dist, g.n_detectors)


# ---------------------------------------------------------------------------
# losses


def loss_self(x_bar: np.ndarray, pair: MeasurementPair, w: WeightDiagonal, g: Geometry):
    """``0.5 ||M' A x - y'||_W^2`` and its gradient ``(M' A)^T W (M' A x - y')``."""
    x_bar = np.asarray(x_bar, dtype=np.float64)
    if x_bar.shape != g.image_shape:
        raise ValueError(f"image shape {x_bar.shape} does not match geometry {g.image_shape}")
    idx = pair.mask_prime.array
    r = radon_forward(x_bar, g)[idx] - pair.y_prime
    wa = w.per_angle[idx][:, None] ** 2
    value = 0.5 * float(np.sum(wa * r * r))
    cot = radon_adjoint(embed_masked(wa * r, idx, g), g)
    return value, cot


def loss_sup_operator(x_bar: np.ndarray, x_gt: np.ndarray, g: Geometry):
    """``0.5 ||A (x - x_gt)||^2`` and ``A^T A (x - x_gt)``."""
    x_bar = np.asarray(x_bar, dtype=np.float64)
    x_gt = np.asarray(x_gt, dtype=np.float64)
    if x_bar.shape != x_gt.shape or x_bar.shape != g.image_shape:
        raise ValueError("image shapes do not match")
    r = radon_forward(x_bar - x_gt, g)
    return 0.5 * float(np.sum(r * r)), radon_adjoint(r, g)


def loss_sup_plain(x_bar: np.ndarray, x_gt: np.ndarray):
    """``0.5 ||x - x_gt||^2`` (the half keeps it on the scale of the other losses)."""
    x_bar = np.asarray(x_bar, dtype=np.float64)
    x_gt = np.asarray(x_gt, dtype=np.float64)
    if x_bar.shape != x_gt.shape:
        raise ValueError("image shapes do not match")
    d = x_bar - x_gt
    return 0.5 * float(np.sum(d * d)), d


def evaluate_loss(kind: str, x_bar: np.ndarray, pair: MeasurementPair, g: Geometry,
                  w: WeightDiagonal | None = None):
    if kind == "self":
        if w is None:
            raise ValueError("the self-supervised loss needs a weight diagonal")
        return loss_self(x_bar, pair, w, g)
    if pair.ground_truth is None:
        raise ValueError(f"loss {kind!r} needs the ground truth")
    if kind == "sup":
        return loss_sup_operator(x_bar, pair.ground_truth, g)
    if kind == "sup-plain":
        return loss_sup_plain(x_bar, pair.ground_truth)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# JFB


def _full_measurement(y: np.ndarray, mask: AngleMask, g: Geometry):
    ind = np.zeros((1, g.n_angles_total))
    ind[0, mask.array] = 1.0
    return embed_masked(y, mask.array, g)[None], ind


def single_layer_vjp(x_in: np.ndarray, y: np.ndarray, mask: AngleMask, p: DenoiserParams, alpha: float,
                     gamma: float, g: Geometry, cotangent: np.ndarray):
    """Parameter gradient of ``<cotangent, T(x_in)>`` through one operator application.

    The projection passes the cotangent where its argument is positive and
    blocks it elsewhere; only the ``alpha * f(s)`` branch depends on the
    parameters, and ``s`` is held fixed.
    """
    y_full, ind = _full_measurement(y, mask, g)
    _, cache = apply_t_batch(np.asarray(x_in)[None], y_full, ind, p, alpha, gamma, g, keep=True)
    d_pre = np.where(cache.pre[0] > 0, cotangent, 0.0)
    grads, _ = denoiser_vjp(p, cache.s[0], alpha * d_pre)
    return grads


@dataclass
class ItemOutcome:
    leaves: list[np.ndarray]
    loss: float
    n_iters: int


def _item_gradient(pair: MeasurementPair, p: DenoiserParams, cfg: TrainConfig, g: Geometry, gamma: float,
                   w: WeightDiagonal | None, x0: np.ndarray | None = None) -> ItemOutcome:
    y_full, ind = _full_measurement(pair.y, pair.mask, g)
    if x0 is None:
        x0 = initial_guess(pair.y, pair.mask, g, cfg.deq)
    res = solve_batch(y_full, ind, p, cfg.deq, g, gamma, x0=x0[None], strict=False)[0]
    # T(x_prev) reproduces x_bar, so the single-layer backward pass is taken there
    loss, cot = evaluate_loss(cfg.loss_kind, res.x_bar, pair, g, w)
    grads = single_layer_vjp(res.x_prev, pair.y, pair.mask, p, cfg.deq.alpha, gamma, g, cot)
    return ItemOutcome(grads.leaves(), loss, res.n_iters)


def _reduce(outcomes: list[ItemOutcome], p: DenoiserParams) -> tuple[DenoiserParams, float, float]:
    n = len(outcomes)
    leaves = [np.zeros_like(a) for a in p.leaves()]
    for o in outcomes:  # fixed order keeps the sum bit-reproducible
        for acc, a in zip(leaves, o.leaves):
            acc += a
    leaves = [a / n for a in leaves]
    loss = float(np.mean([o.loss for o in outcomes]))
    iters = float(np.mean([o.n_iters for o in outcomes]))
    if not (np.isfinite(loss) and all(np.all(np.isfinite(a)) for a in leaves)):
        raise NumericalError("non-finite loss or gradient in JFB step")
    return DenoiserParams(p.spec, leaves[0::2], leaves[1::2], None), loss, iters


class _Runner:
    """Maps per-item work over a process pool (or inline); results keep item order."""

    def __init__(self, workers: int):
        self.workers = max(1, int(workers))
        self.pool = None
        if self.workers > 1:
            self.pool = cf.ProcessPoolExecutor(self.workers, mp_context=mp.get_context("fork"))

    def map(self, fn: Callable, items: list) -> list:
        if self.pool is None:
            return [fn(*it) for it in items]
        return list(self.pool.map(_star, [(fn, it) for it in items]))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _star(job):
    fn, args = job
    return fn(*args)


def _gamma_for(cfg: TrainConfig, g: Geometry) -> float:
    return resolve_gamma(cfg.deq, g, s_default=cfg.validation_s)


def jfb_step(batch: list[MeasurementPair], p: DenoiserParams, cfg: TrainConfig, g: Geometry,
             runner: _Runner | None = None, w: WeightDiagonal | None = None):
    """Batch-mean JFB gradient together with the mean loss and mean solver iterations."""
    gamma = _gamma_for(cfg, g)
    if w is None and cfg.loss_kind == "self":
        w = pair_weights(cfg, g)
    own = runner is None
    runner = runner or _Runner(1)
    try:
        outcomes = runner.map(_item_gradient, [(pair, p, cfg, g, gamma, w) for pair in batch])
    finally:
        if own:
            runner.close()
    return _reduce(outcomes, p)


def jfb_gradient(batch: list[MeasurementPair], p: DenoiserParams, cfg: TrainConfig, g: Geometry,
                 w: WeightDiagonal | None = None) -> DenoiserParams:
    """Jacobian-free gradient of the selected loss, averaged over ``batch``.

    For every item the fixed point is found without derivative tracking, the
    loss cotangent is taken at it, and that cotangent is pulled back through a
    single application of the operator.
    """
    return jfb_step(batch, p, cfg, g, w=w)[0]


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    params: DenoiserParams
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    average: DenoiserParams | None = None

    @classmethod
    def create(cls, params: DenoiserParams, averaging: bool = False) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.leaves()]
        return cls(params, zeros, [z.copy() for z in zeros], 0, params.copy() if averaging else None)

    @property
    def eval_params(self) -> DenoiserParams:
        return self.average if self.average is not None else self.params


def adam_step(state: AdamState, grads: DenoiserParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, ema_decay: float | None = None) -> AdamState:
    """One bias-corrected Adam update; the input state is left untouched."""
    t = state.t + 1
    new_leaves, ms, vs = [], [], []
    for a, g_, m, v in zip(state.params.leaves(), grads.leaves(), state.m, state.v):
        m = beta1 * m + (1 - beta1) * g_
        v = beta2 * v + (1 - beta2) * g_ * g_
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_leaves.append(a - lr * m_hat / (np.sqrt(v_hat) + eps))
        ms.append(m)
        vs.append(v)
    params = state.params.with_leaves(new_leaves)
    avg = state.average
    if avg is not None and ema_decay is not None:
        avg = avg.with_leaves([ema_decay * a + (1 - ema_decay) * b
                               for a, b in zip(avg.leaves(), params.leaves())])
    return AdamState(params, ms, vs, t, avg)


def _normalize_state(state: AdamState, n_iters: int | None = None) -> AdamState:
    params = spectral_normalize(state.params, n_iters)
    return replace(state, params=params)


# ---------------------------------------------------------------------------
# validation and the epoch loop


@dataclass
class ValidationSet:
    images: list[np.ndarray]
    y: list[np.ndarray]
    mask: AngleMask

    @classmethod
    def build(cls, images: list[np.ndarray], g: Geometry, s: int, noise: NoiseConfig) -> "ValidationSet":
        mask = AngleMask(tuple(equispaced_indices(s, g.n_angles_total)), g.n_angles_total)
        ys = []
        for i, x in enumerate(images):
            rng = np.random.default_rng(np.random.SeedSequence([noise.seed, 7919, i]))
            full = radon_forward(x, g)
            sigma = noise.relative_level * float(np.max(np.abs(full)))
            ys.append(_noisy(full[mask.array], sigma, rng))
        return cls([np.asarray(x, dtype=np.float64) for x in images], ys, mask)


def deq_reconstruct(y: np.ndarray, mask: AngleMask, p: DenoiserParams, cfg: DEQConfig, g: Geometry,
                    gamma: float) -> tuple[np.ndarray, int]:
    """Fixed point for one measurement and its iteration count (as used for validation)."""
    y_full, ind = _full_measurement(y, mask, g)
    x0 = initial_guess(y, mask, g, cfg)
    res = solve_batch(y_full, ind, p, cfg, g, gamma, x0=x0[None], strict=False)[0]
    return res.x_bar, res.n_iters


def evaluate(val: ValidationSet, p: DenoiserParams, cfg: TrainConfig, g: Geometry,
             runner: _Runner | None = None) -> tuple[float, float, list[np.ndarray]]:
    """Mean PSNR and SSIM of the DEQ reconstructions on a validation set."""
    gamma = _gamma_for(cfg, g)
    own = runner is None
    runner = runner or _Runner(1)
    try:
        outs = runner.map(deq_reconstruct, [(y, val.mask, p, cfg.deq, g, gamma) for y in val.y])
    finally:
        if own:
            runner.close()
    recs = [o[0] for o in outs]
    ps = [psnr(r, x) for r, x in zip(recs, val.images)]
    ss = [ssim(r, x) if min(x.shape) >= 11 else float("nan") for r, x in zip(recs, val.images)]
    return float(np.mean(ps)), float(np.mean(ss)), recs


@dataclass
class TrainResult:
    params: DenoiserParams
    history: list[dict]
    state: AdamState

    def history_rows(self) -> list[list]:
        return [[h[c] for c in HISTORY_COLUMNS] for h in self.history]


def initial_params(cfg: TrainConfig) -> DenoiserParams:
    return spectral_normalize(init_denoiser(cfg.denoiser, cfg.seed), cfg.sn_init_iters)


def train(dataset: list[np.ndarray], cfg: TrainConfig, g: Geometry,
          val_images: list[np.ndarray] | None = None, state: AdamState | None = None,
          start_epoch: int = 0, on_epoch: Callable[[int, TrainResult], None] | None = None) -> TrainResult:
    """Run epochs ``start_epoch + 1 .. n_epochs`` of shuffled mini-batch JFB training.

    Masks and noise are redrawn for every batch from a stream keyed on
    ``(seed, epoch, batch)``, so resuming from a saved state reproduces an
    uninterrupted run. Validation uses a fixed equispaced mask and fixed
    noise; the evaluated parameters are the averaged ones when enabled.
    """
    if not dataset:
        raise ValueError("training set is empty")
    if state is None:
        state = AdamState.create(initial_params(cfg), cfg.averaging is not None)
    images = [np.asarray(x, dtype=np.float64) for x in dataset]
    val = ValidationSet.build(val_images, g, cfg.validation_s, cfg.noise) if val_images else None
    w = pair_weights(cfg, g) if cfg.loss_kind == "self" else None
    history: list[dict] = []
    result = TrainResult(state.eval_params, history, state)
    n = len(images)
    with _Runner(cfg.workers) as runner:
        for epoch in range(start_epoch + 1, cfg.n_epochs + 1):
            order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
            losses, iters = [], []
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, b + 1]))
                batch = [make_training_pair(images[i], g, cfg.sampling, cfg.noise, rng, cfg.pair_mode,
                                            keep_truth=cfg.loss_kind != "self")
                         for i in order[start:start + cfg.batch_size]]
                grads, loss, it = jfb_step(batch, state.params, cfg, g, runner, w)
                state = adam_step(state, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                                  cfg.ema_decay if cfg.averaging == "ema" else None)
                state = _normalize_state(state)
                losses.append(loss)
                iters.append(it)
            row = {"epoch": epoch, "loss_kind": cfg.loss_kind, "train_loss": float(np.mean(losses)),
                   "val_psnr": float("nan"), "val_ssim": float("nan"),
                   "mean_fp_iters": float(np.mean(iters))}
            if val is not None:
                row["val_psnr"], row["val_ssim"], _ = evaluate(val, state.eval_params, cfg, g, runner)
            history.append(row)
            result = TrainResult(state.eval_params, history, state)
            if on_epoch is not None:
                on_epoch(epoch, result)
    return result


# ---------------------------------------------------------------------------
# resumable checkpoints


def save_train_state(path, state: AdamState, epoch: int, meta: dict | None = None) -> None:
    extra = {}
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        extra[f"m{i:03d}"] = m
        extra[f"v{i:03d}"] = v
    if state.average is not None:
        for i, a in enumerate(state.average.leaves()):
            extra[f"a{i:03d}"] = a
    info = dict(meta or {})
    info.update({"epoch": epoch, "adam_t": state.t, "averaged": state.average is not None})
    save_checkpoint(path, state.params, info, extra)


def load_train_state(path) -> tuple[AdamState, int, dict]:
    params, meta, extra = load_checkpoint(path)
    k = len(params.leaves())
    m = [extra[f"m{i:03d}"] for i in range(k)]
    v = [extra[f"v{i:03d}"] for i in range(k)]
    avg = params.with_leaves([extra[f"a{i:03d}"] for i in range(k)]) if meta.get("averaged") else None
    return AdamState(params, m, v, int(meta["adam_t"]), avg), int(meta["epoch"]), meta
