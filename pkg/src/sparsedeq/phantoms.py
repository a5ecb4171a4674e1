"""Synthetic test objects: the modified Shepp-Logan head and random ellipse sums."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# (intensity, semi-axis a, semi-axis b, centre x, centre y, rotation in degrees)
MODIFIED_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "random-ellipses"
    side: int = 32
    seed: int = 0
    n_min: int = 3
    n_max: int = 6

    def __post_init__(self):
        if self.kind not in ("shepp-logan", "random-ellipses"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.side < 8:
            raise ValueError("phantom side must be >= 8")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")


def pixel_grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates on [-1, 1]^2 with y pointing up (row 0 at the top)."""
    c = (np.arange(side) - (side - 1) / 2.0) * (2.0 / side)
    return c[None, :].repeat(side, 0), -c[:, None].repeat(side, 1)


def ellipse_indicator(x, y, a, b, x0, y0, phi_deg) -> np.ndarray:
    phi = np.deg2rad(phi_deg)
    c, s = np.cos(phi), np.sin(phi)
    xr = (x - x0) * c + (y - y0) * s
    yr = -(x - x0) * s + (y - y0) * c
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def shepp_logan(side: int) -> np.ndarray:
    x, y = pixel_grid(side)
    img = np.zeros((side, side))
    for rho, a, b, x0, y0, phi in MODIFIED_SHEPP_LOGAN:
        img += rho * ellipse_indicator(x, y, a, b, x0, y0, phi)
    return np.clip(img, 0.0, 1.0)


def random_ellipses(side: int, rng: np.random.Generator, n_min: int = 3, n_max: int = 6) -> np.ndarray:
    x, y = pixel_grid(side)
    img = np.zeros((side, side))
    for _ in range(int(rng.integers(n_min, n_max + 1))):
        r = 0.6 * np.sqrt(rng.random())
        ang = 2 * np.pi * rng.random()
        a, b = rng.uniform(0.1, 0.45, size=2)
        img += rng.uniform(0.2, 1.0) * ellipse_indicator(
            x, y, a, b, r * np.cos(ang), r * np.sin(ang), rng.uniform(0.0, 180.0))
    # keep the object inside the inscribed circle
    img[x ** 2 + y ** 2 > 1.0] = 0.0
    return np.clip(img, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    if spec.kind == "shepp-logan":
        return shepp_logan(spec.side)
    return random_ellipses(spec.side, np.random.default_rng(spec.seed), spec.n_min, spec.n_max)


def phantom_set(n: int, side: int, seed: int, n_min: int = 3, n_max: int = 6) -> list[np.ndarray]:
    """``n`` random-ellipse phantoms with per-item seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_phantom(PhantomSpec("random-ellipses", side, int(s), n_min, n_max)) for s in seeds]
