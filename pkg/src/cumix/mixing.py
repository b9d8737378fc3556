"""Triplet mixing, mixing-coefficient samplers and the curriculum schedule.

A mix of anchor ``i`` combines it with a cross-domain partner ``j`` or an
intra-domain partner ``k``::

    lam * a_i + (1 - lam) * (gam * a_j + (1 - gam) * a_k)

with ``lam ~ Beta(beta, beta)`` and ``gam ~ Bernoulli(alpha)``. The same
``(lam, gam)`` pair is applied to a sample and to its one-hot label.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .numerics import DimensionError

log = logging.getLogger(__name__)

# below this shape Beta(b, b) is replaced by its b -> 0 limit: mass 1/2 on each endpoint
ENDPOINT_BETA = 1e-3


@dataclass(frozen=True)
class MixSchedule:
    warmup: int
    beta_max: float
    curriculum: bool = True

    def __post_init__(self):
        if int(self.warmup) != self.warmup or self.warmup < 1:
            raise ValueError(f"warmup must be an integer >= 1, got {self.warmup}")
        if not 0.0 < self.beta_max <= 10.0:
            raise ValueError(f"beta_max must lie in (0, 10], got {self.beta_max}")


@dataclass(frozen=True)
class MixCoefficients:
    lam: float
    gam: int

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.gam not in (0, 1):
            raise ValueError(f"gamma must be 0 or 1, got {self.gam}")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    cross: int
    intra: int
    # False when the batch holds no other domain; gamma is then forced to 0
    cross_available: bool = True


@dataclass
class MixDraw:
    """Per-anchor triplets and coefficients for a whole batch."""

    cross: np.ndarray
    intra: np.ndarray
    lam: np.ndarray
    gam: np.ndarray

    def __len__(self) -> int:
        return len(self.lam)

    @property
    def n_cross(self) -> int:
        return int(self.gam.sum())

    @classmethod
    def fixed(cls, cross, intra, lam, gam) -> "MixDraw":
        n = len(cross)
        return cls(
            np.asarray(cross, dtype=np.int64),
            np.asarray(intra, dtype=np.int64),
            np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy(),
            np.broadcast_to(np.asarray(gam, dtype=np.int64), (n,)).copy(),
        )


def schedule_coeffs(epoch: int, schedule: MixSchedule) -> tuple[float, float]:
    """Return ``(alpha, beta)`` for a 0-based epoch.

    beta ramps linearly to beta_max over the warm-up, then alpha ramps from
    0 to 1 over the following warm-up length. Computed in exact rationals.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    bmax = Fraction(schedule.beta_max)
    if not schedule.curriculum:
        return 1.0, float(bmax)
    n = schedule.warmup
    beta = min(Fraction(epoch, n) * bmax, bmax)
    alpha = max(Fraction(0), min(Fraction(epoch - n, n), Fraction(1)))
    return float(alpha), float(beta)


def _log_gamma_variates(shape: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """log of Gamma(shape, 1) draws (Marsaglia-Tsang, boosted for shape < 1)."""
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size)
    todo = np.arange(size)
    while todo.size:
        x = rng.standard_normal(todo.size)
        u = rng.random(todo.size)
        v = 1.0 + c * x
        ok = v > 0.0
        v = np.where(ok, v, 1.0) ** 3
        ok &= (u < 1.0 - 0.0331 * x**4) | (
            np.log(u) < 0.5 * x**2 + d * (1.0 - v + np.log(v))
        )
        out[todo[ok]] = np.log(d * v[ok])
        todo = todo[~ok]
    if boost:
        # G(a) = G(a + 1) * U^(1/a); kept in log space so tiny shapes don't underflow
        out += np.log(rng.random(size)) / shape
    return out


def sample_lambdas(beta: float, rng: np.random.Generator, size: int) -> np.ndarray:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if beta < ENDPOINT_BETA:
        return (rng.random(size) < 0.5).astype(np.float64)
    log_x = _log_gamma_variates(beta, rng, size)
    log_y = _log_gamma_variates(beta, rng, size)
    # X / (X + Y) written as a logistic in the log-ratio
    d = log_y - log_x
    e = np.exp(-np.abs(d))
    return np.where(d > 0, e / (1.0 + e), 1.0 / (1.0 + e))


def sample_lambda(beta: float, rng: np.random.Generator) -> float:
    return float(sample_lambdas(beta, rng, 1)[0])


def sample_gammas(alpha: float, rng: np.random.Generator, size: int) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (rng.random(size) < alpha).astype(np.int64)


def sample_gamma(alpha: float, rng: np.random.Generator) -> int:
    return int(sample_gammas(alpha, rng, 1)[0])


def _pick_partners(domains: np.ndarray, anchors: np.ndarray, u: np.ndarray):
    """Map uniform draws ``u[:, 0]`` / ``u[:, 1]`` to cross / intra partners."""
    n = len(domains)
    cross = np.empty(len(anchors), dtype=np.int64)
    intra = np.empty(len(anchors), dtype=np.int64)
    has_cross = np.ones(len(anchors), dtype=bool)
    all_idx = np.arange(n)
    for d in np.unique(domains[anchors]):
        rows = np.flatnonzero(domains[anchors] == d)
        same = all_idx[domains == d]
        other = all_idx[domains != d]
        a = anchors[rows]
        if other.size:
            cross[rows] = other[np.minimum((u[rows, 0] * other.size).astype(np.int64), other.size - 1)]
        else:
            # single-domain batch: cross partner falls back to a same-domain sample
            has_cross[rows] = False
            pool = same.size - 1 if same.size > 1 else 1
            p = np.minimum((u[rows, 0] * pool).astype(np.int64), pool - 1)
            pos = np.searchsorted(same, a)
            cross[rows] = same[np.where((p >= pos) & (same.size > 1), p + 1, p)]
        if same.size > 1:
            m = same.size - 1
            p = np.minimum((u[rows, 1] * m).astype(np.int64), m - 1)
            pos = np.searchsorted(same, a)
            intra[rows] = same[np.where(p >= pos, p + 1, p)]
        else:
            log.warning("domain %s has a single sample in this batch; intra partner falls back to the anchor", d)
            intra[rows] = a
    return cross, intra, has_cross


def sample_triplet(domains, anchor: int, rng: np.random.Generator) -> Triplet:
    domains = np.asarray(domains)
    if not 0 <= anchor < len(domains):
        raise IndexError(f"anchor {anchor} outside batch of size {len(domains)}")
    u = rng.random((1, 2))
    cross, intra, has_cross = _pick_partners(domains, np.array([anchor]), u)
    return Triplet(anchor, int(cross[0]), int(intra[0]), bool(has_cross[0]))


def draw_mix(domains, alpha: float, beta: float, rng: np.random.Generator) -> MixDraw:
    """Sample one triplet and one (lambda, gamma) pair for every anchor of a batch."""
    domains = np.asarray(domains)
    n = len(domains)
    if n == 0:
        raise ValueError("cannot draw mixes for an empty batch")
    u = rng.random((n, 2))
    cross, intra, has_cross = _pick_partners(domains, np.arange(n), u)
    gam = sample_gammas(alpha, rng, n)
    gam[~has_cross] = 0
    lam = sample_lambdas(beta, rng, n)
    return MixDraw(cross, intra, lam, gam)


def mix3(a_i, a_j, a_k, coeffs: MixCoefficients) -> np.ndarray:
    a_i, a_j, a_k = (np.asarray(a, dtype=np.float64) for a in (a_i, a_j, a_k))
    if not a_i.shape == a_j.shape == a_k.shape:
        raise DimensionError(f"cannot mix shapes {a_i.shape}, {a_j.shape}, {a_k.shape}")
    lam, gam = coeffs.lam, coeffs.gam
    return lam * a_i + (1.0 - lam) * (gam * a_j + (1 - gam) * a_k)


def mix2(a_i, a_j, lam: float) -> np.ndarray:
    a_i, a_j = np.asarray(a_i, dtype=np.float64), np.asarray(a_j, dtype=np.float64)
    if a_i.shape != a_j.shape:
        raise DimensionError(f"cannot mix shapes {a_i.shape} and {a_j.shape}")
    return lam * a_i + (1.0 - lam) * a_j


def mix_rows(rows: np.ndarray, draw: MixDraw) -> np.ndarray:
    """Apply the triplet mix to every row of a batch matrix at once."""
    lam = draw.lam[:, None]
    gam = draw.gam[:, None]
    return lam * rows + (1.0 - lam) * (gam * rows[draw.cross] + (1 - gam) * rows[draw.intra])


def mix_rows_backward(grad_mixed: np.ndarray, draw: MixDraw) -> np.ndarray:
    """Scatter the gradient of :func:`mix_rows` back onto anchor, cross and intra rows."""
    lam = draw.lam[:, None]
    gam = draw.gam[:, None]
    out = lam * grad_mixed
    np.add.at(out, draw.cross, (1.0 - lam) * gam * grad_mixed)
    np.add.at(out, draw.intra, (1.0 - lam) * (1 - gam) * grad_mixed)
    return out
