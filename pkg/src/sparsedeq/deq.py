"""The nonnegative DEQ operator and its (Anderson-accelerated) fixed-point solve.

``T(x) = P+(alpha * f(s) + (1 - alpha) * s)`` with ``s = x - gamma * grad g(x)``,
where ``g(x) = 0.5 ||y - M A x||^2`` and ``P+`` clamps at zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .denoiser import DenoiserParams, denoiser_forward
from .tomo import Geometry, embed_masked, equispaced_norm, radon_adjoint, radon_forward

EPS = 1e-12


@dataclass
class DEQConfig:
    """Fixed-point settings.

    ``gamma`` is a number, ``"auto"`` (``1 / ||M_s A||``, ``s = s_ref``
    equispaced angles) or ``"auto-lipschitz"`` (``gamma_scale / ||M_s A||^2``).
    """

    alpha: float = 0.1
    gamma: float | str = "auto"
    gamma_scale: float = 1.0
    s_ref: int | None = None
    fp_tol: float = 1e-3
    fp_max_iter: int = 100
    anderson: bool = True
    anderson_depth: int = 5
    anderson_ridge: float = 1e-8
    anderson_damping: float = 1.0
    anderson_safeguard: bool = True
    init: str = "zero"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.fp_tol <= 0 or self.fp_max_iter < 1 or self.anderson_depth < 1:
            raise ValueError("need fp_tol > 0, fp_max_iter >= 1, anderson_depth >= 1")
        if isinstance(self.gamma, str) and self.gamma not in ("auto", "auto-lipschitz"):
            raise ValueError(f"unknown gamma rule {self.gamma!r}")
        if not isinstance(self.gamma, str) and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.init not in ("zero", "fbp"):
            raise ValueError(f"unknown init {self.init!r}")


def resolve_gamma(cfg: DEQConfig, g: Geometry, s_default: int | None = None) -> float:
    if not isinstance(cfg.gamma, str):
        return float(cfg.gamma)
    s = cfg.s_ref if cfg.s_ref is not None else s_default
    if s is None:
        raise ValueError("automatic gamma needs s_ref")
    norm = equispaced_norm(g, s)
    if cfg.gamma == "auto":
        return 1.0 / norm
    return cfg.gamma_scale / norm ** 2


@dataclass
class FixedPointResult:
    """``x_bar = T(x_prev)``; ``final_residual`` is ``||x_bar - x_prev|| / ||x_prev||``."""

    x_bar: np.ndarray
    n_iters: int
    final_residual: float
    converged: bool
    residual_history: list[float] = field(default_factory=list)
    x_prev: np.ndarray | None = None
    accelerated: bool = False
    plain_residual: float = float("nan")

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for i, r in enumerate(self.residual_history, start=1):
                w.writerow([i, repr(float(r))])


@dataclass
class TCache:
    """Intermediates of one operator application, reused by the JFB backward pass."""

    s: np.ndarray
    pre: np.ndarray
    out: np.ndarray


def apply_t_batch(x: np.ndarray, y_full: np.ndarray, ind: np.ndarray, p: DenoiserParams,
                  alpha: float, gamma: float, g: Geometry, keep: bool = False):
    """Batched operator on ``(B, n, n)`` images.

    ``y_full`` holds zero-filled full sinograms and ``ind`` the ``(B, n_angles)``
    0/1 angle indicators, so ``(M A)^T (M A x - y) = A^T (ind * A x - y_full)``.
    """
    resid = radon_forward(x, g) * ind[:, :, None] - y_full
    s = x - gamma * radon_adjoint(resid, g)
    pre = alpha * denoiser_forward(p, s) + (1.0 - alpha) * s
    out = np.maximum(pre, 0.0)
    return (out, TCache(s, pre, out)) if keep else out


def _resolve(cfg: DEQConfig, g: Geometry, mask) -> float:
    return resolve_gamma(cfg, g, s_default=len(mask))


def apply_t_theta(x: np.ndarray, y: np.ndarray, mask, p: DenoiserParams, cfg: DEQConfig,
                  g: Geometry) -> np.ndarray:
    """One application of the operator to a single image with a masked sinogram ``y``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != g.image_shape:
        raise ValueError(f"image shape {x.shape} does not match geometry {g.image_shape}")
    idx = np.asarray(mask.indices)
    y_full = embed_masked(y, idx, g)[None]
    ind = np.zeros((1, g.n_angles_total))
    ind[0, idx] = 1.0
    return apply_t_batch(x[None], y_full, ind, p, cfg.alpha, _resolve(cfg, g, mask), g)[0]


def _rel(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, num.ndim))
    return np.sqrt(np.sum(num ** 2, axis=axes)) / np.maximum(np.sqrt(np.sum(den ** 2, axis=axes)), EPS)


class _Anderson:
    """Type-II Anderson mixing for one item, on flattened vectors."""

    def __init__(self, depth: int, ridge: float, damping: float):
        self.depth, self.ridge, self.damping = depth, ridge, damping
        self.xs: list[np.ndarray] = []
        self.gs: list[np.ndarray] = []

    def step(self, x: np.ndarray, gx: np.ndarray) -> np.ndarray:
        self.xs.append(x)
        self.gs.append(gx)
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.gs.pop(0)
        f = [gi - xi for gi, xi in zip(self.gs, self.xs)]
        if len(f) == 1:
            return gx
        df = np.stack([f[i + 1] - f[i] for i in range(len(f) - 1)], axis=1)
        dg = np.stack([self.gs[i + 1] - self.gs[i] for i in range(len(f) - 1)], axis=1)
        gram = df.T @ df
        gram += self.ridge * max(np.trace(gram), EPS) * np.eye(gram.shape[0])
        try:
            coef = np.linalg.solve(gram, df.T @ f[-1])
        except np.linalg.LinAlgError:
            coef = np.full(gram.shape[0], np.nan)
        if not np.all(np.isfinite(coef)):
            self.xs, self.gs = [x], [gx]
            return gx
        new = gx - dg @ coef
        if self.damping != 1.0:
            dx = np.stack([self.xs[i + 1] - self.xs[i] for i in range(len(f) - 1)], axis=1)
            new = self.damping * new + (1 - self.damping) * (x - dx @ coef)
        return new


def _solve_plain(x0, y_full, ind, p, alpha, gamma, g, cfg):
    b = x0.shape[0]
    x = x0.copy()
    active = np.ones(b, dtype=bool)
    iters = np.zeros(b, dtype=int)
    hist: list[list[float]] = [[] for _ in range(b)]
    x_prev = x0.copy()
    for _ in range(cfg.fp_max_iter):
        ids = np.flatnonzero(active)
        if ids.size == 0:
            break
        new = apply_t_batch(x[ids], y_full[ids], ind[ids], p, alpha, gamma, g)
        r = _rel(new - x[ids], x[ids])
        x_prev[ids] = x[ids]
        x[ids] = new
        for j, i in enumerate(ids):
            hist[i].append(float(r[j]))
            iters[i] += 1
            if r[j] < cfg.fp_tol or not np.isfinite(r[j]):
                active[i] = False
    return [FixedPointResult(x[i], int(iters[i]), hist[i][-1], hist[i][-1] < cfg.fp_tol,
                             hist[i], x_prev[i], plain_residual=hist[i][-1]) for i in range(b)]


def _solve_anderson(x0, y_full, ind, p, alpha, gamma, g, cfg):
    b = x0.shape[0]
    acc = [_Anderson(cfg.anderson_depth, cfg.anderson_ridge, cfg.anderson_damping) for _ in range(b)]
    x = x0.copy()
    gx = np.zeros_like(x0)
    active = np.ones(b, dtype=bool)
    iters = np.zeros(b, dtype=int)
    hist: list[list[float]] = [[] for _ in range(b)]
    for _ in range(cfg.fp_max_iter):
        ids = np.flatnonzero(active)
        if ids.size == 0:
            break
        gx[ids] = apply_t_batch(x[ids], y_full[ids], ind[ids], p, alpha, gamma, g)
        r = _rel(gx[ids] - x[ids], x[ids])
        for j, i in enumerate(ids):
            hist[i].append(float(r[j]))
            iters[i] += 1
            if r[j] < cfg.fp_tol or not np.isfinite(r[j]) or iters[i] == cfg.fp_max_iter:
                active[i] = False
                continue
            nxt = acc[i].step(x[i].ravel().copy(), gx[i].ravel().copy()).reshape(x[i].shape)
            # iterates stay in the nonnegative orthant
            x[i] = np.maximum(nxt, 0.0)
    return [FixedPointResult(gx[i].copy(), int(iters[i]), hist[i][-1], hist[i][-1] < cfg.fp_tol,
                             hist[i], x[i].copy(), accelerated=True) for i in range(b)]


def solve_batch(y_full: np.ndarray, ind: np.ndarray, p: DenoiserParams, cfg: DEQConfig,
                g: Geometry, gamma: float, x0: np.ndarray | None = None,
                strict: bool = True) -> list[FixedPointResult]:
    """Fixed-point solves for a batch; every item stops on its own criterion.

    With Anderson mixing and ``cfg.anderson_safeguard`` the accelerated point
    is checked against plain iteration. ``strict=True`` always runs the plain
    solve and keeps the accelerated point only if its plain-iteration residual
    ``||T(x) - x|| / ||x||`` is no larger than the plain run's final residual;
    ``strict=False`` only re-solves the items Anderson failed to converge.
    """
    b = y_full.shape[0]
    if x0 is None:
        x0 = np.zeros((b, *g.image_shape))
    if not cfg.anderson:
        return _solve_plain(x0, y_full, ind, p, cfg.alpha, gamma, g, cfg)
    res = _solve_anderson(x0, y_full, ind, p, cfg.alpha, gamma, g, cfg)
    if not cfg.anderson_safeguard:
        return res
    redo = list(range(b)) if strict else [i for i, r in enumerate(res) if not r.converged]
    if not redo:
        return res
    xb = np.stack([res[i].x_bar for i in redo])
    t_xb = apply_t_batch(xb, y_full[redo], ind[redo], p, cfg.alpha, gamma, g)
    true_r = _rel(t_xb - xb, xb)
    plain = _solve_plain(x0[redo], y_full[redo], ind[redo], p, cfg.alpha, gamma, g, cfg)
    for j, (i, rp) in enumerate(zip(redo, plain)):
        res[i].plain_residual = float(true_r[j])
        if not (np.isfinite(true_r[j]) and true_r[j] <= rp.final_residual):
            res[i] = rp
    return res


def initial_guess(y: np.ndarray, mask, g: Geometry, cfg: DEQConfig) -> np.ndarray:
    if cfg.init == "zero":
        return np.zeros(g.image_shape)
    from .classical import fbp

    return np.maximum(fbp(y, mask, g), 0.0)


def fixed_point_solve(y: np.ndarray, mask, p: DenoiserParams, cfg: DEQConfig, g: Geometry,
                      x0: np.ndarray | None = None) -> FixedPointResult:
    """Iterate ``x_k = T(x_{k-1})`` from ``x0`` until the relative step is below ``fp_tol``.

    With Anderson mixing enabled the accelerated result is only returned when
    its final residual is no worse than that of plain iteration (unless
    ``anderson_safeguard`` is off).
    """
    idx = np.asarray(mask.indices)
    y_full = embed_masked(y, idx, g)[None]
    ind = np.zeros((1, g.n_angles_total))
    ind[0, idx] = 1.0
    if x0 is None:
        x0 = initial_guess(y, mask, g, cfg)
    return solve_batch(y_full, ind, p, cfg, g, _resolve(cfg, g, mask), x0=np.asarray(x0)[None])[0]
