"""Angle masks, mask distributions and the per-row weighting of the self-supervised loss."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

ENUMERATION_BUDGET = 10**6

KINDS = ("uniform", "equispaced", "complementary")


@dataclass(frozen=True)
class AngleMask:
    """Sorted, distinct angle indices; selects every detector row of those angles."""

    indices: tuple[int, ...]
    n_angles_total: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise ValueError("mask must select at least one angle")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("mask indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.n_angles_total:
            raise ValueError(f"mask index out of range [0, {self.n_angles_total})")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)

    def indicator(self) -> np.ndarray:
        out = np.zeros(self.n_angles_total)
        out[list(self.indices)] = 1.0
        return out

    def to_string(self) -> str:
        return ",".join(str(i) for i in self.indices)

    @classmethod
    def from_string(cls, text: str, n_angles_total: int) -> "AngleMask":
        return cls(tuple(int(t) for t in text.split(",") if t.strip()), n_angles_total)

    @classmethod
    def full(cls, n_angles_total: int) -> "AngleMask":
        return cls(tuple(range(n_angles_total)), n_angles_total)


@dataclass(frozen=True)
class MaskDistribution:
    """Law of a random angle mask.

    ``kind`` is ``"uniform"`` (``s`` angles without replacement),
    ``"equispaced"`` (the fixed mask ``floor(j * n / s)``) or
    ``"complementary"`` (``s`` angles split into two disjoint halves).
    """

    kind: str
    s: int
    n_angles_total: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.s <= self.n_angles_total:
            raise ValueError("need 1 <= s <= n_angles_total")
        if self.kind == "complementary" and self.s % 2:
            raise ValueError("complementary split needs an even number of angles")

    @property
    def marginal_size(self) -> int:
        """Number of angles in one drawn mask."""
        return self.s // 2 if self.kind == "complementary" else self.s


def uniform_subset(s: int, n_angles_total: int) -> MaskDistribution:
    return MaskDistribution("uniform", s, n_angles_total)


def equispaced_fixed(s: int, n_angles_total: int) -> MaskDistribution:
    return MaskDistribution("equispaced", s, n_angles_total)


def complementary_split(s_total: int, n_angles_total: int) -> MaskDistribution:
    return MaskDistribution("complementary", s_total, n_angles_total)


def equispaced_indices(s: int, n_angles_total: int) -> np.ndarray:
    return np.floor(np.arange(s) * n_angles_total / s).astype(np.int64)


def sample_mask(dist: MaskDistribution, rng: np.random.Generator) -> AngleMask:
    n = dist.n_angles_total
    if dist.kind == "equispaced":
        return AngleMask(tuple(equispaced_indices(dist.s, n)), n)
    if dist.kind == "complementary":
        raise ValueError("use split_complementary for complementary distributions")
    idx = np.sort(rng.choice(n, size=dist.s, replace=False))
    return AngleMask(tuple(idx), n)


def split_complementary(dist: MaskDistribution, rng: np.random.Generator) -> tuple[AngleMask, AngleMask]:
    """Draw ``s`` angles uniformly and split them at random into two disjoint halves."""
    if dist.kind != "complementary":
        raise ValueError("split_complementary needs a complementary distribution")
    n = dist.n_angles_total
    drawn = rng.choice(n, size=dist.s, replace=False)
    perm = rng.permutation(drawn)
    half = dist.s // 2
    return (AngleMask(tuple(np.sort(perm[:half])), n),
            AngleMask(tuple(np.sort(perm[half:])), n))


def sample_pair(dist: MaskDistribution, rng: np.random.Generator, mode: str = "iid") -> tuple[AngleMask, AngleMask]:
    """Masks ``(M, M')`` for one training pair.

    ``mode="iid"`` draws both independently from ``dist``; ``"complementary"``
    splits one acquisition of ``2 * s`` angles (``dist.s`` is the size of one half).
    """
    if mode == "iid":
        return sample_mask(dist, rng), sample_mask(dist, rng)
    if mode == "complementary":
        return split_complementary(complementary_split(2 * dist.s, dist.n_angles_total), rng)
    raise ValueError(f"unknown pair mode {mode!r}")


def expected_mask_gram(dist: MaskDistribution, mode: str = "exact", n_draws: int = 10**5,
                       seed: int = 0) -> np.ndarray:
    """Diagonal of ``E[M^T M]`` per angle, i.e. each angle's selection probability.

    ``mode="exact"`` enumerates every subset the marginal law can produce;
    ``mode="monte-carlo"`` averages ``n_draws`` indicator vectors.
    """
    n = dist.n_angles_total
    if mode == "exact":
        if dist.kind == "equispaced":
            out = np.zeros(n)
            out[equispaced_indices(dist.s, n)] = 1.0
            return out
        k = dist.marginal_size
        count = math.comb(n, k)
        if count > ENUMERATION_BUDGET:
            raise ValueError(
                f"C({n}, {k}) = {count} subsets exceeds the enumeration budget; "
                "use mode='monte-carlo'"
            )
        acc = np.zeros(n)
        for subset in itertools.combinations(range(n), k):
            acc[list(subset)] += 1.0
        return acc / count
    if mode == "monte-carlo":
        rng = np.random.default_rng(seed)
        acc = np.zeros(n)
        if dist.kind == "equispaced":
            acc[equispaced_indices(dist.s, n)] = n_draws
        else:
            k = dist.marginal_size
            # the k smallest of n uniform keys form a uniformly random k-subset
            chunk = max(1, min(n_draws, 2**22 // n))
            done = 0
            while done < n_draws:
                m = min(chunk, n_draws - done)
                keys = rng.random((m, n))
                picks = np.argpartition(keys, k - 1, axis=1)[:, :k]
                acc += np.bincount(picks.ravel(), minlength=n)
                done += m
        return acc / n_draws
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True, eq=False)
class WeightDiagonal:
    """Per-row weights ``w_k``; constant over the detector rows of one angle."""

    per_angle: np.ndarray
    n_detectors: int = 1

    @property
    def values(self) -> np.ndarray:
        """Weights for all ``n_angles_total * n_detectors`` measurement rows."""
        return np.repeat(self.per_angle, self.n_detectors)


def weights_from_gram(gram: np.ndarray, n_detectors: int = 1) -> WeightDiagonal:
    gram = np.asarray(gram, dtype=np.float64)
    w = np.zeros_like(gram)
    nz = gram != 0
    w[nz] = 1.0 / np.sqrt(gram[nz])
    return WeightDiagonal(w, n_detectors)


def compute_weight_diagonal(dist: MaskDistribution, n_detectors: int = 1) -> WeightDiagonal:
    """``w_k = 1 / sqrt(E[M'^T M']_kk)`` where the expectation is nonzero, else 0."""
    n = dist.n_angles_total
    if dist.kind == "uniform":
        return WeightDiagonal(np.full(n, math.sqrt(n / dist.s)), n_detectors)
    try:
        gram = expected_mask_gram(dist, mode="exact")
    except ValueError:
        # beyond the budget the marginal law is still a uniform subset
        gram = np.full(n, dist.marginal_size / n)
    return weights_from_gram(gram, n_detectors)


def weighted_residual_norm_sq(z: np.ndarray, mask: AngleMask, w: WeightDiagonal) -> float:
    """``z^T W z`` for a masked sinogram ``z`` (rows ordered as in ``mask``)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != len(mask):
        raise ValueError(f"masked sinogram with {z.shape[0] if z.ndim else 0} angles "
                         f"does not match mask of {len(mask)} angles")
    if w.n_detectors not in (1, z.shape[1]):
        raise ValueError("weight diagonal detector count does not match the sinogram")
    wa = w.per_angle[mask.array]
    return float(np.sum((wa[:, None] ** 2) * z * z))
