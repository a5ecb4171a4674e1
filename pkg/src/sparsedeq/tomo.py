"""Parallel-beam Radon transform, its exact adjoint and the data-fidelity gradient.

The projector is ray driven: every detector bin is covered by a few parallel
sub-rays, each ray is sampled at a fixed step and the image is read with
bilinear interpolation. All weights are assembled once per geometry into a
sparse matrix, so the adjoint is the transpose of the very same weights.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, aslinearoperator

# sub-rays per detector bin, the fraction of the bin they span, and samples
# per pixel along a ray
SUB_RAYS = 2
SUB_RAY_SPAN = 0.85
SUPERSAMPLING = 5


@dataclass(frozen=True)
class Geometry:
    """2-D parallel-beam geometry over the half-open angle range [0, pi).

    ``n_detectors``, ``pixel_spacing`` and ``detector_spacing`` default to the
    smallest odd detector count covering the image diagonal, a unit field of
    view (``1 / n_pixels``) and the pixel spacing respectively.
    """

    n_pixels: int
    n_angles_total: int
    n_detectors: int | None = None
    pixel_spacing: float | None = None
    detector_spacing: float | None = None

    def __post_init__(self):
        if self.n_pixels < 1 or self.n_angles_total < 1:
            raise ValueError("geometry counts must be >= 1")
        if self.n_detectors is None:
            nd = math.ceil(math.sqrt(2.0) * self.n_pixels)
            object.__setattr__(self, "n_detectors", nd + (nd % 2 == 0))
        if self.n_detectors < 1:
            raise ValueError("n_detectors must be >= 1")
        if self.pixel_spacing is None:
            object.__setattr__(self, "pixel_spacing", 1.0 / self.n_pixels)
        if self.detector_spacing is None:
            object.__setattr__(self, "detector_spacing", self.pixel_spacing)
        if self.pixel_spacing <= 0 or self.detector_spacing <= 0:
            raise ValueError("spacings must be positive")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles_total) * np.pi / self.n_angles_total

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n_pixels, self.n_pixels)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.n_angles_total, self.n_detectors)

    @property
    def n_measurements(self) -> int:
        return self.n_angles_total * self.n_detectors


def _angle_block(g: Geometry, theta: float, row0: int):
    n, ps = g.n_pixels, g.pixel_spacing
    c0 = (n - 1) / 2.0
    step = ps / SUPERSAMPLING
    half = math.sqrt(2.0) * n * ps / 2.0 + ps
    k = math.ceil(half / step)
    u = np.arange(-k, k + 1) * step
    sub = ((np.arange(SUB_RAYS) + 0.5) / SUB_RAYS - 0.5) * SUB_RAY_SPAN * g.detector_spacing
    t = ((np.arange(g.n_detectors) - (g.n_detectors - 1) / 2.0) * g.detector_spacing)
    t = (t[:, None] + sub[None, :]).reshape(-1)
    det = np.repeat(np.arange(g.n_detectors), SUB_RAYS)

    c, s = math.cos(theta), math.sin(theta)
    # ray point = t * (c, s) + u * (-s, c); column j sits at x = (j - c0) ps,
    # row i at y = (c0 - i) ps
    fj = (t[:, None] * c - u[None, :] * s) / ps + c0
    fi = c0 - (t[:, None] * s + u[None, :] * c) / ps
    j0 = np.floor(fj).astype(np.int64)
    i0 = np.floor(fi).astype(np.int64)
    wj = fj - j0
    wi = fi - i0
    rows = np.broadcast_to((row0 + det)[:, None], fj.shape)
    scale = step / SUB_RAYS

    out_r, out_c, out_v = [], [], []
    for di, dj, w in ((0, 0, (1 - wi) * (1 - wj)), (0, 1, (1 - wi) * wj),
                      (1, 0, wi * (1 - wj)), (1, 1, wi * wj)):
        ii = i0 + di
        jj = j0 + dj
        ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n) & (w > 0)
        out_r.append(rows[ok])
        out_c.append(ii[ok] * n + jj[ok])
        out_v.append(w[ok] * scale)
    return np.concatenate(out_r), np.concatenate(out_c), np.concatenate(out_v)


@functools.lru_cache(maxsize=32)
def _matrices(g: Geometry) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    blocks = []
    for th in g.angles:
        r, c, v = _angle_block(g, th, 0)
        # collapse repeated (row, pixel) samples per angle to keep memory bounded
        blk = sp.coo_matrix((v, (r, c)), shape=(g.n_detectors, g.n_pixels ** 2)).tocsr()
        blk.sum_duplicates()
        blocks.append(blk)
    a = sp.vstack(blocks, format="csr")
    a.sort_indices()
    at = a.T.tocsr()
    at.sort_indices()
    return a, at


def projection_matrix(g: Geometry) -> sp.csr_matrix:
    """Sparse ``(n_angles_total * n_detectors, n_pixels**2)`` system matrix."""
    return _matrices(g)[0]


def _check_image(x: np.ndarray, g: Geometry) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != g.image_shape:
        raise ValueError(f"image shape {x.shape[-2:]} does not match geometry {g.image_shape}")
    return x


def radon_forward(x: np.ndarray, g: Geometry) -> np.ndarray:
    """Full sinogram ``A x``; leading batch axes are kept."""
    x = _check_image(x, g)
    a = _matrices(g)[0]
    lead = x.shape[:-2]
    flat = x.reshape(-1, g.n_pixels ** 2)
    out = (a @ flat.T).T
    return np.ascontiguousarray(out).reshape(*lead, *g.sinogram_shape)


def radon_adjoint(y: np.ndarray, g: Geometry) -> np.ndarray:
    """Transpose of :func:`radon_forward` applied to a full sinogram."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-2:] != g.sinogram_shape:
        raise ValueError(f"sinogram shape {y.shape[-2:]} does not match geometry {g.sinogram_shape}")
    at = _matrices(g)[1]
    lead = y.shape[:-2]
    flat = y.reshape(-1, g.n_measurements)
    out = (at @ flat.T).T
    return np.ascontiguousarray(out).reshape(*lead, *g.image_shape)


def embed_masked(y: np.ndarray, indices, g: Geometry) -> np.ndarray:
    """Scatter a masked sinogram back into a zero-filled full sinogram."""
    y = np.asarray(y, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    if y.shape[-2:] != (len(idx), g.n_detectors):
        raise ValueError(
            f"masked sinogram shape {y.shape[-2:]} does not match mask of {len(idx)} angles"
        )
    full = np.zeros((*y.shape[:-2], *g.sinogram_shape))
    full[..., idx, :] = y
    return full


def _mask_indices(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "indices", mask), dtype=np.int64)


def masked_forward(x: np.ndarray, mask, g: Geometry) -> np.ndarray:
    """``M A x`` as an array of shape ``(len(mask), n_detectors)``."""
    return radon_forward(x, g)[..., _mask_indices(mask), :]


def masked_adjoint(y: np.ndarray, mask, g: Geometry) -> np.ndarray:
    """``(M A)^T y`` for a masked sinogram ``y``."""
    return radon_adjoint(embed_masked(y, _mask_indices(mask), g), g)


def masked_operator(g: Geometry, mask=None) -> LinearOperator:
    """``M A`` (or ``A`` when ``mask`` is None) acting on flattened images."""
    a, at = _matrices(g)
    if mask is None:
        return aslinearoperator(a)
    idx = _mask_indices(mask)
    rows = (idx[:, None] * g.n_detectors + np.arange(g.n_detectors)[None, :]).ravel()
    sub = a[rows]
    sub_t = sub.T.tocsr()
    return LinearOperator(sub.shape, matvec=lambda v: sub @ v, rmatvec=lambda v: sub_t @ v,
                          dtype=np.float64)


def grad_data_fidelity(x: np.ndarray, y: np.ndarray, mask, g: Geometry) -> np.ndarray:
    """Gradient of ``0.5 * ||y - M A x||^2``, i.e. ``(M A)^T (M A x - y)``."""
    idx = _mask_indices(mask)
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-2:] != (len(idx), g.n_detectors):
        raise ValueError(
            f"measurement has {y.shape[-2]} angles but the mask selects {len(idx)}"
        )
    resid = radon_forward(x, g)[..., idx, :] - y
    return radon_adjoint(embed_masked(resid, idx, g), g)


class NormEstimate(NamedTuple):
    value: float
    converged: bool
    n_iter: int


def spectral_norm(op, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0) -> NormEstimate:
    """Largest singular value of ``op`` by power iteration on ``op^T op``.

    ``op`` is anything :func:`scipy.sparse.linalg.aslinearoperator` accepts.
    Iteration stops once two successive estimates differ by less than ``tol``
    relatively; otherwise the last estimate is returned with
    ``converged=False``.
    """
    op = aslinearoperator(op)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iter + 1):
        u = op.matvec(v)
        new = float(np.linalg.norm(u))
        if new == 0.0:
            return NormEstimate(0.0, True, it)
        w = op.rmatvec(u / new)
        # ||A^T u|| >= ||A v|| for unit u = A v / ||A v||: the tighter lower bound
        new = float(np.linalg.norm(w))
        v = w / new
        if it > 1 and abs(new - est) <= tol * new:
            return NormEstimate(new, True, it)
        est = new
    return NormEstimate(est, False, max_iter)


@functools.lru_cache(maxsize=64)
def _cached_equispaced_norm(g: Geometry, s: int) -> float:
    idx = np.floor(np.arange(s) * g.n_angles_total / s).astype(np.int64)
    return spectral_norm(masked_operator(g, idx), tol=1e-10, max_iter=5000, seed=0).value


def equispaced_norm(g: Geometry, s: int) -> float:
    """``||M_s A||_2`` for the mask of ``s`` equispaced angles (cached)."""
    return _cached_equispaced_norm(g, int(s))
