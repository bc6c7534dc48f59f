"""Differentiable objectives shared by the gradient op and the attack loops.

Three specs are understood by `vit.loss_and_input_gradient`:

  CrossEntropy            plain classification loss
  CwMargin(kappa)         hinge on the logit margin, max(Z_y - max_others + kappa, 0)
  Composite(...)          the detection-aware objective: the full CW loss
                          (squared pixel distance to a reference plus the
                          weighted hinge) plus per-block L2 distances, in
                          attention maps and CLS rows, between the input
                          and its autoencoder reconstruction

Everything returns per-sample losses, shape (B,), with gradients intact.
The composite reconstruction uses the raw head-averaged per-layer maps,
not rollout products, and its gradient flows through the classifier on
both paths and through the autoencoder itself.
"""

from dataclasses import dataclass
from typing import Any, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigurationError
from .mae import MaskSpec, reconstruct, sample_mask


@dataclass
class CrossEntropy:
    pass


@dataclass
class CwMargin:
    kappa: float = 0.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ConfigurationError(f"kappa must be non-negative, got {self.kappa}")


@dataclass
class Composite:
    """Reconstruction-aware attack objective.

    reference: the clean image(s) the pixel-distance term is measured
    against. mask: a frozen MaskSpec, or None to draw a fresh random mask
    from `generator` on every evaluation (the deployed-defense behaviour).
    """
    reference: Any
    mae: Any
    beta_attn: float = 1.0
    beta_cls: float = 1.0
    kappa: float = 0.0
    c: float = 1.0
    ratio: float = 0.5
    mask: Optional[MaskSpec] = None
    generator: Optional[torch.Generator] = None

    def __post_init__(self):
        if self.beta_attn < 0 or self.beta_cls < 0:
            raise ConfigurationError("composite weights must be non-negative")
        if self.kappa < 0:
            raise ConfigurationError(f"kappa must be non-negative, got {self.kappa}")


def margin_hinge(logits, labels, kappa):
    """max(Z_y - max_{j != y} Z_j + kappa, 0) per sample."""
    z_y = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, labels.view(-1, 1), float("-inf"))
    z_other = masked.max(dim=1).values
    return (z_y - z_other + kappa).clamp(min=0)


def trace_term(model, mae, x_adv, mask, beta_attn, beta_cls):
    """beta_attn * sum_l ||A_l(x_adv) - A_l(x')||_F + beta_cls * sum_l ||cls_l(x_adv) - cls_l(x')||_2

    with x' the autoencoder reconstruction of x_adv under `mask`.
    Differentiable end to end.
    """
    x_rec = reconstruct(mae, x_adv, mask).x_prime
    t_adv = model.trace(x_adv)
    t_rec = model.trace(x_rec)
    j_attn = torch.linalg.norm(
        t_adv.attentions - t_rec.attentions, dim=(-2, -1)).sum(dim=-1)   # (B,)
    j_cls = torch.linalg.norm(
        t_adv.cls_reps - t_rec.cls_reps, dim=-1).sum(dim=-1)             # (B,)
    return beta_attn * j_attn + beta_cls * j_cls


def evaluate(model, x, labels, spec):
    """Per-sample objective values for a batched input; see module docstring."""
    if isinstance(spec, CrossEntropy):
        return F.cross_entropy(model(x), labels, reduction="none")

    if isinstance(spec, CwMargin):
        return margin_hinge(model(x), labels, spec.kappa)

    if isinstance(spec, Composite):
        ref = torch.as_tensor(spec.reference, dtype=x.dtype)
        if ref.dim() == 3:
            ref = ref.unsqueeze(0)
        dist = ((x - ref) ** 2).flatten(1).sum(dim=1)
        hinge = margin_hinge(model(x), labels, spec.kappa)
        loss = dist + spec.c * hinge
        if spec.beta_attn != 0 or spec.beta_cls != 0:
            mask = spec.mask
            if mask is None:
                mask = sample_mask(model.config.num_patches, spec.ratio, "random",
                                   spec.generator, batch=x.shape[0])
            loss = loss + trace_term(model, spec.mae, x, mask,
                                     spec.beta_attn, spec.beta_cls)
        return loss

    raise ConfigurationError(f"unknown objective spec {type(spec).__name__!r}")
