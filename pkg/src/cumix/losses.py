"""Batch objectives: aggregation, input-level mix, feature-level mix, their
weighted sum, and the two-sample mixup baseline.

Every loss is a batch mean and returns ``(value, grads)`` where ``grads``
maps trainable tensor names to gradients of that value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixing import MixDraw, MixSchedule, draw_mix, mix_rows, mix_rows_backward, sample_lambdas, schedule_coeffs
from .model import (
    ModelParams,
    backward,
    extract_backward,
    extract_features,
    forward,
    head_backward,
    head_forward,
)
from .numerics import DimensionError, one_hot, soft_cross_entropy_mean

Grads = dict[str, np.ndarray]


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray  # index into the model's class rows, not global class ids
    domains: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != n or len(self.domains) != n:
            raise DimensionError(
                f"batch parts disagree: inputs {self.inputs.shape}, "
                f"{n} labels, {len(self.domains)} domains"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, order) -> "Batch":
        return Batch(self.inputs[order], self.labels[order], self.domains[order])


@dataclass(frozen=True)
class LossWeights:
    eta_img: float = 0.0
    eta_feat: float = 0.0

    def __post_init__(self):
        for v in (self.eta_img, self.eta_feat):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite and >= 0, got {v}")


@dataclass
class BatchLossReport:
    loss_agg: float
    loss_mix_img: float
    loss_mix_feat: float
    total: float
    n_cross: int
    n_intra: int
    alpha: float
    beta: float


def _targets(params: ModelParams, batch: Batch) -> np.ndarray:
    c = params.config.num_classes
    labels = np.asarray(batch.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} outside the {c} seen classes")
    return one_hot(labels, c)


def loss_agg(params: ModelParams, batch: Batch) -> tuple[float, Grads]:
    targets = _targets(params, batch)
    cache = forward(params, batch.inputs)
    loss, grad_logits = soft_cross_entropy_mean(cache.logits, targets)
    return loss, backward(params, cache, grad_logits)


def loss_mix_input(params: ModelParams, batch: Batch, draw: MixDraw) -> tuple[float, Grads]:
    """Mix raw inputs and labels with one draw, then score the mixed inputs."""
    targets = mix_rows(_targets(params, batch), draw)
    cache = forward(params, mix_rows(np.asarray(batch.inputs, dtype=np.float64), draw))
    loss, grad_logits = soft_cross_entropy_mean(cache.logits, targets)
    return loss, backward(params, cache, grad_logits)


def loss_mix_feature(params: ModelParams, batch: Batch, draw: MixDraw) -> tuple[float, Grads]:
    """Extract features of every sample, mix them, and score the mixed features.

    Gradients reach f through the anchor and both partners.
    """
    targets = mix_rows(_targets(params, batch), draw)
    feats, layer_inputs, pre = extract_features(params, batch.inputs)
    mixed = mix_rows(feats, draw)
    proj, logits = head_forward(params, mixed)
    loss, grad_logits = soft_cross_entropy_mean(logits, targets)
    grads, grad_mixed = head_backward(params, mixed, proj, grad_logits)
    grads.update(extract_backward(params, layer_inputs, pre, mix_rows_backward(grad_mixed, draw)))
    return loss, grads


def combine_grads(params: ModelParams, parts: list[tuple[float, Grads]]) -> Grads:
    out: Grads = {}
    for name in params.trainable_names():
        acc = np.zeros_like(params.tensors[name])
        for w, g in parts:
            acc = acc + w * g[name]
        out[name] = acc
    return out


def loss_cumix(
    params: ModelParams,
    batch: Batch,
    epoch: int,
    schedule: MixSchedule,
    weights: LossWeights,
    rng_img: np.random.Generator | None = None,
    rng_feat: np.random.Generator | None = None,
    draws: tuple[MixDraw, MixDraw] | None = None,
    collapse: bool = False,
) -> tuple[BatchLossReport, Grads]:
    """Aggregation loss plus the weighted input- and feature-level mix losses.

    Triplets and coefficients are drawn separately for each level, from
    ``rng_img`` and ``rng_feat``, unless ``draws`` supplies them. With
    ``collapse`` (identity f) a single input-level mix stands in for both
    terms and carries weight ``eta_img + eta_feat``.
    """
    alpha, beta = schedule_coeffs(epoch, schedule)
    if draws is None:
        if rng_img is None or (rng_feat is None and not collapse):
            raise ValueError("loss_cumix needs rng streams or explicit draws")
        draw_img = draw_mix(batch.domains, alpha, beta, rng_img)
        draw_feat = draw_img if collapse else draw_mix(batch.domains, alpha, beta, rng_feat)
    else:
        draw_img, draw_feat = draws

    agg, g_agg = loss_agg(params, batch)
    if collapse:
        img, g_img = loss_mix_input(params, batch, draw_img)
        feat = img
        total = agg + (weights.eta_img + weights.eta_feat) * img
        grads = combine_grads(params, [(1.0, g_agg), (weights.eta_img + weights.eta_feat, g_img)])
        n_cross = draw_img.n_cross
        n_mix = len(draw_img)
    else:
        img, g_img = loss_mix_input(params, batch, draw_img)
        feat, g_feat = loss_mix_feature(params, batch, draw_feat)
        total = agg + weights.eta_img * img + weights.eta_feat * feat
        grads = combine_grads(
            params, [(1.0, g_agg), (weights.eta_img, g_img), (weights.eta_feat, g_feat)]
        )
        n_cross = draw_img.n_cross + draw_feat.n_cross
        n_mix = len(draw_img) + len(draw_feat)
    report = BatchLossReport(agg, img, feat, total, n_cross, n_mix - n_cross, alpha, beta)
    return report, grads


def loss_mixup_baseline(
    params: ModelParams,
    batch: Batch,
    beta: float,
    rng: np.random.Generator,
    partners=None,
) -> tuple[float, Grads]:
    """Two-sample mixup with random in-batch partners, ignoring domains."""
    if beta <= 0:
        raise ValueError(f"mixup needs beta > 0, got {beta}")
    n = len(batch)
    if partners is None:
        partners = rng.permutation(n)
    lam = sample_lambdas(beta, rng, n)
    draw = MixDraw.fixed(partners, partners, lam, 1)
    return loss_mix_input(params, batch, draw)
