"""Local training objectives: CE, feature distillation, contrastive alignment.

All functions accept numpy arrays or torch tensors, compute in the input's
precision, and return differentiable torch scalars. Zero-weighted terms are
skipped entirely so disabling a term reproduces the plain baseline bit for
bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError
from .models import ModelOutput


@dataclass(frozen=True)
class LossWeights:
    """Balance factors of the unified objective."""

    lambda_kd: float = 1.0
    lambda_con: float = 0.01
    tau: float = 0.05
    mu_prox: float = 0.0

    def validate(self) -> None:
        vals = (self.lambda_kd, self.lambda_con, self.tau, self.mu_prox)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInputError("loss weights must be finite")
        if self.lambda_kd < 0 or self.lambda_con < 0 or self.mu_prox < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if self.tau <= 0:
            raise InvalidInputError("tau must be strictly positive")


@dataclass
class LossBreakdown:
    """Component values; total = ce + lambda_kd * kd + lambda_con * con.

    Fields hold 0-dim torch tensors when produced by total_loss (keeping the
    graph alive for backward) or plain floats for disabled terms.
    """

    ce: object
    kd: object
    con: object
    total: object

    def as_floats(self) -> "LossBreakdown":
        def value(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)
        return LossBreakdown(*(value(v) for v in (self.ce, self.kd,
                                                  self.con, self.total)))


def _to_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x))


def _to_labels(labels, num_classes: int) -> torch.Tensor:
    y = _to_tensor(labels).long()
    if y.ndim != 1:
        raise InvalidInputError("labels must be one-dimensional")
    if y.numel() and (y.min() < 0 or y.max() >= num_classes):
        raise InvalidInputError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(y.min())}, {int(y.max())}]")
    return y


def cross_entropy(logits, labels) -> torch.Tensor:
    """Mean negative log softmax probability of the true class."""
    z = _to_tensor(logits)
    if z.ndim != 2 or z.shape[0] == 0:
        raise InvalidInputError("logits must be a non-empty B x C matrix")
    y = _to_labels(labels, z.shape[1])
    if y.numel() != z.shape[0]:
        raise InvalidInputError("one label per row required")
    # Max subtraction keeps the log-sum-exp in range.
    shifted = z - z.max(dim=1, keepdim=True).values
    lse = shifted.exp().sum(dim=1).log()
    picked = shifted[torch.arange(z.shape[0]), y]
    return (lse - picked).mean()


def kd_loss(diffusion_features, local_features) -> torch.Tensor:
    """Mean KL(softmax(z) || softmax(f)) over the feature dimensions."""
    z = _to_tensor(diffusion_features)
    f = _to_tensor(local_features)
    if z.shape != f.shape or z.ndim != 2:
        raise InvalidInputError(
            f"feature shapes {tuple(z.shape)} and {tuple(f.shape)} must match")
    lp = torch.log_softmax(z, dim=1)
    lq = torch.log_softmax(f, dim=1)
    # p * (lp - lq) is 0 wherever p underflows to 0, matching the convention.
    return (lp.exp() * (lp - lq)).sum(dim=1).mean()


def contrastive_loss(local_features, text_features, labels, tau: float) -> torch.Tensor:
    """InfoNCE over cosine similarity to the class text anchors.

    The positive is the anchor of the sample's own class; every other class
    anchor is a negative.
    """
    if tau <= 0:
        raise InvalidInputError("tau must be strictly positive")
    f = _to_tensor(local_features)
    z = _to_tensor(text_features)
    if f.ndim != 2 or z.ndim != 2 or f.shape[1] != z.shape[1]:
        raise InvalidInputError("feature matrices must share their last dimension")
    y = _to_labels(labels, z.shape[0])
    if y.numel() != f.shape[0]:
        raise InvalidInputError("one label per feature row required")
    fn = f / f.norm(dim=1, keepdim=True).clamp_min(1e-12)
    zn = z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)
    sims = (fn @ zn.T) / tau
    positive = sims[torch.arange(f.shape[0]), y]
    return (torch.logsumexp(sims, dim=1) - positive).mean()


def prox_term(local_params, global_params, mu: float) -> torch.Tensor:
    """Proximal penalty (mu/2) * ||w_k - w_r||^2."""
    w = _to_tensor(local_params)
    g = _to_tensor(global_params)
    if w.shape != g.shape:
        raise InvalidInputError(
            f"parameter vectors differ in shape: {tuple(w.shape)} vs {tuple(g.shape)}")
    return 0.5 * mu * ((w - g.to(w.dtype)) ** 2).sum()


def total_loss(outputs: ModelOutput, visual_anchors, text_anchors,
               labels, weights: LossWeights) -> LossBreakdown:
    """Unified objective: ce + lambda_kd * kd + lambda_con * con.

    Terms with a zero weight are neither computed nor added, so the returned
    total is literally the ce tensor when both extra terms are off.
    """
    weights.validate()
    ce = cross_entropy(outputs.logits, labels)
    total = ce
    if weights.lambda_kd != 0.0:
        kd = kd_loss(visual_anchors, outputs.features)
        total = total + weights.lambda_kd * kd
    else:
        kd = 0.0
    if weights.lambda_con != 0.0:
        con = contrastive_loss(outputs.features, text_anchors, labels, weights.tau)
        total = total + weights.lambda_con * con
    else:
        con = 0.0
    return LossBreakdown(ce=ce, kd=kd, con=con, total=total)
