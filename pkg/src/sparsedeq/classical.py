"""Baselines: filtered back-projection and TV-regularised nonnegative least squares."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import psnr
from .tomo import Geometry, embed_masked, masked_operator, radon_adjoint, spectral_norm

FILTERS = ("ram-lak", "shepp-logan", "none")


def _ramp_response(n_det: int, ds: float, kind: str) -> tuple[np.ndarray, int]:
    """Frequency response of the band-limited ramp, built from its spatial kernel.

    Sampling the spatial Ram-Lak kernel (``1 / (4 ds^2)`` at zero,
    ``-1 / (pi k ds)^2`` at odd ``k``) and transforming it avoids the DC
    error of a sampled ``|w|``.
    """
    size = int(2 ** np.ceil(np.log2(2 * n_det)))
    k = np.fft.fftfreq(size) * size  # signed integer offsets in circular order
    h = np.zeros(size)
    h[0] = 1.0 / (4.0 * ds ** 2)
    odd = (k.astype(int) % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * ds) ** 2
    resp = np.real(np.fft.fft(h)) * ds
    if kind == "shepp-logan":
        resp = resp * np.sinc(np.fft.fftfreq(size))
    return resp, size


def ramp_filter(y: np.ndarray, ds: float, kind: str = "ram-lak") -> np.ndarray:
    """Filter every sinogram row (last axis) with the chosen ramp."""
    if kind not in FILTERS:
        raise ValueError(f"unknown filter {kind!r}; expected one of {FILTERS}")
    y = np.asarray(y, dtype=np.float64)
    if kind == "none":
        return y.copy()
    n_det = y.shape[-1]
    resp, size = _ramp_response(n_det, ds, kind)
    spec = np.fft.fft(y, n=size, axis=-1) * resp
    return np.real(np.fft.ifft(spec, axis=-1))[..., :n_det]


def fbp(y: np.ndarray, mask, g: Geometry, filter: str = "ram-lak") -> np.ndarray:
    """Filtered back-projection from a masked sinogram.

    Rows are ramp filtered, then back-projected with the projector's own
    adjoint and scaled by ``pi / (2 |mask|)``. The back-projector sums
    ``ps^2 / ds`` per unit of sinogram, and the ``2 ds / ps^2`` factor on the
    filtered rows turns the adjoint into the continuous back-projection
    integral, so the ram-lak result is an estimate of the image itself.
    ``filter="none"`` skips the filtering and the factor (plain scaled adjoint).
    """
    idx = np.asarray(getattr(mask, "indices", mask), dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (len(idx), g.n_detectors):
        raise ValueError(f"sinogram shape {y.shape} does not match mask of {len(idx)} angles")
    q = ramp_filter(y, g.detector_spacing, filter)
    if filter != "none":
        q *= 2.0 * g.detector_spacing / g.pixel_spacing ** 2
    return np.pi / (2.0 * len(idx)) * radon_adjoint(embed_masked(q, idx, g), g)


# ---------------------------------------------------------------------------
# total variation


def grad2(x: np.ndarray) -> np.ndarray:
    """Forward differences with Neumann boundary, shape ``(2, H, W)``."""
    d = np.zeros((2, *x.shape))
    d[0, :-1, :] = x[1:, :] - x[:-1, :]
    d[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return d


def div2(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad2`."""
    out = np.zeros(p.shape[1:])
    out[:-1, :] += p[0, :-1, :]
    out[1:, :] -= p[0, :-1, :]
    out[:, :-1] += p[1, :, :-1]
    out[:, 1:] -= p[1, :, :-1]
    return out


def total_variation(x: np.ndarray) -> float:
    """Isotropic TV: sum of pixelwise gradient magnitudes."""
    d = grad2(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.sqrt(d[0] ** 2 + d[1] ** 2)))


@dataclass(frozen=True)
class TVConfig:
    """``lambda_`` weights TV against ``0.5 ||y - M A x||^2``.

    ``step_rule="adaptive"`` backtracks on the Lipschitz estimate starting
    from the spectral norm; ``"fixed"`` uses the step ``tau`` as given.
    """

    lambda_: float = 1e-3
    max_iters: int = 300
    tol: float = 1e-6
    step_rule: str = "adaptive"
    tau: float | None = None
    inner_iters: int = 20

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda_ must be >= 0")
        if self.max_iters < 1 or self.tol <= 0 or self.inner_iters < 1:
            raise ValueError("need max_iters >= 1, tol > 0, inner_iters >= 1")
        if self.step_rule not in ("adaptive", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.step_rule == "fixed" and (self.tau is None or self.tau <= 0):
            raise ValueError("fixed step rule needs tau > 0")


@dataclass
class TVResult:
    image: np.ndarray
    n_iters: int
    converged: bool
    objective: list[float] = field(default_factory=list)


def _prox_tv_nonneg(v: np.ndarray, weight: float, p0: np.ndarray, n_iter: int):
    """``argmin_{x >= 0} 0.5 ||x - v||^2 + weight * TV(x)`` by fast gradient projection on the dual."""
    if weight == 0.0:
        return np.maximum(v, 0.0), p0
    p = p0.copy()
    r = p.copy()
    t = 1.0
    step = 1.0 / (8.0 * weight)
    for _ in range(n_iter):
        x = np.maximum(v + weight * div2(r), 0.0)
        q = r + step * grad2(x)
        norm = np.maximum(1.0, np.sqrt(q[0] ** 2 + q[1] ** 2))
        p_new = q / norm
        t_new = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        r = p_new + ((t - 1.0) / t_new) * (p_new - p)
        p, t = p_new, t_new
    return np.maximum(v + weight * div2(p), 0.0), p


def tv_reconstruct(y: np.ndarray, mask, g: Geometry, cfg: TVConfig, x0: np.ndarray | None = None) -> TVResult:
    """Monotone FISTA on ``0.5 ||y - M A x||^2 + lambda TV(x)`` over ``x >= 0``.

    The TV proximal step is solved inexactly by a warm-started dual method;
    the monotone variant only accepts a candidate that lowers the objective,
    so the recorded objective never increases.
    """
    idx = np.asarray(getattr(mask, "indices", mask), dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (len(idx), g.n_detectors):
        raise ValueError(f"sinogram shape {y.shape} does not match mask of {len(idx)} angles")
    op = masked_operator(g, idx)
    lam = cfg.lambda_
    yv = y.ravel()

    def data(x):
        return op.matvec(x.ravel()) - yv

    def objective(x, r=None):
        r = data(x) if r is None else r
        return 0.5 * float(r @ r) + lam * total_variation(x)

    if cfg.step_rule == "fixed":
        lip = 1.0 / cfg.tau
    else:
        lip = spectral_norm(op, tol=1e-6, seed=0).value ** 2 * 1.01
    shape = g.image_shape
    x = np.zeros(shape) if x0 is None else np.maximum(np.asarray(x0, dtype=np.float64), 0.0)
    dual = np.zeros((2, *shape))
    z_pt = x.copy()
    t = 1.0
    f_x = objective(x)
    hist = [f_x]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        r = data(z_pt)
        grad = op.rmatvec(r).reshape(shape)
        f_smooth = 0.5 * float(r @ r)
        while True:
            cand, dual_new = _prox_tv_nonneg(z_pt - grad / lip, lam / lip, dual, cfg.inner_iters)
            if cfg.step_rule == "fixed":
                break
            rc = data(cand)
            diff = cand - z_pt
            bound = f_smooth + float(np.sum(grad * diff)) + 0.5 * lip * float(np.sum(diff * diff))
            if 0.5 * float(rc @ rc) <= bound * (1 + 1e-12) + 1e-300:
                break
            lip *= 2.0
        dual = dual_new
        f_cand = objective(cand)
        x_old = x
        if f_cand <= f_x:
            x, f_x = cand, f_cand
        t_new = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        z_pt = x + (t / t_new) * (cand - x) + ((t - 1.0) / t_new) * (x - x_old)
        t = t_new
        hist.append(f_x)
        change = np.linalg.norm(x - x_old) / max(np.linalg.norm(x_old), 1e-12)
        if it > 1 and change < cfg.tol and f_cand <= f_x:
            converged = True
            break
    return TVResult(x, it, converged, hist)


def lambda_grid(y: np.ndarray, n_values: int = 10, lo: float = 1e-6, hi: float = 1e-2) -> np.ndarray:
    """Log-spaced TV weights, scaled by the data magnitude ``max |y|``."""
    scale = float(np.max(np.abs(y))) or 1.0
    return scale * np.logspace(np.log10(lo), np.log10(hi), n_values)


def select_tv_lambda(x_ref: np.ndarray, y: np.ndarray, mask, g: Geometry, grid=None,
                     base: TVConfig | None = None) -> tuple[float, list[tuple[float, float]]]:
    """Grid search for the TV weight maximising PSNR on one held-out phantom."""
    base = base or TVConfig()
    grid = lambda_grid(y) if grid is None else np.asarray(grid, dtype=np.float64)
    scores = []
    for lam in grid:
        cfg = TVConfig(float(lam), base.max_iters, base.tol, base.step_rule, base.tau, base.inner_iters)
        rec = tv_reconstruct(y, mask, g, cfg).image
        scores.append((float(lam), psnr(rec, x_ref)))
    best = max(scores, key=lambda s: s[1])[0]
    return best, scores
