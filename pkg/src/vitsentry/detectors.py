"""Reconstruction-comparison detectors.

An input x is re-synthesized by the masked autoencoder into x', and the
classifier's instrumented forward pass is compared between the two:

    attention distance   d_attn = || attn_l(x) - attn_l(x') ||_2     (CLS rollout rows)
    cls distance         d_cls  = || cls_l(x)  - cls_l(x')  ||_2     (block outputs)

Clean inputs survive reconstruction with little change in either view;
adversarial ones do not. A score above its calibrated threshold (strict
inequality; ties count as normal) flags the input, and the joint
detector ORs the two flags while sharing one reconstruction per input.

The working layer l is picked once by `select_layer`: the layer whose
attention distance best separates clean inputs from successful one-step
adversarials on a validation set; both detectors then use that layer.

Reconstruction masks are drawn fresh per call unless a generator is
passed, so detection is intentionally nondeterministic in deployment and
reproducible in tests.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import metrics
from .attacks import FgsmConfig, fgsm, filter_successful
from .errors import ConfigurationError, EvaluationError, StateError
from .mae import full_recover, reconstruct, sample_mask, saliency_from_trace
from .rollout import rollout_all

FEATURES = ("attention", "cls")
RECOVERY_MODES = ("half", "full")


@dataclass
class DetectorConfig:
    feature: str
    layer: int
    recovery_mode: str = "half"
    ratio: float = 0.5
    strategy: str = "random"

    def __post_init__(self):
        if self.feature not in FEATURES:
            raise ConfigurationError(f"feature must be one of {FEATURES}, got {self.feature!r}")
        if self.recovery_mode not in RECOVERY_MODES:
            raise ConfigurationError(
                f"recovery_mode must be one of {RECOVERY_MODES}, got {self.recovery_mode!r}")
        if not isinstance(self.layer, int) or self.layer < 0:
            raise ConfigurationError(f"layer must be a non-negative integer, got {self.layer!r}")
        if not (0.0 < self.ratio < 1.0):
            raise ConfigurationError(f"masking ratio must be in (0, 1), got {self.ratio}")
        if self.recovery_mode == "full" and self.ratio != 0.5:
            raise ConfigurationError("full recovery requires masking ratio 0.5")


@dataclass
class Threshold:
    tau: float
    target_fpr: float
    calibration_size: int

    def __post_init__(self):
        if not math.isfinite(self.tau):
            raise ConfigurationError(f"threshold must be finite, got {self.tau}")
        if not (0.0 < self.target_fpr < 1.0):
            raise ConfigurationError(f"target FPR must be in (0, 1), got {self.target_fpr}")


@dataclass
class DetectionVerdict:
    d_attn: Optional[float]
    d_cls: Optional[float]
    adversarial: bool
    triggered_by: tuple


def calibrate_threshold(clean_scores, target_fpr) -> Threshold:
    """Threshold at the empirical (1 - target_fpr) quantile of clean scores:
    the smallest score whose strictly-greater fraction is <= target_fpr."""
    scores = np.asarray(clean_scores, dtype=np.float64).reshape(-1)
    tau = metrics.empirical_threshold(scores, target_fpr)
    return Threshold(tau=tau, target_fpr=float(target_fpr), calibration_size=scores.size)


def _to_f64(tensor):
    return tensor.detach().cpu().to(torch.float64).numpy()


def _check_layer(layer, depth):
    if not (0 <= layer < depth):
        raise ConfigurationError(f"layer {layer} out of range for a {depth}-layer model")


def score_attn(trace_x, trace_x_prime, layer):
    """Euclidean distance between the CLS rollout rows of two traces at one
    layer. Accepts single or batched traces; float64 throughout."""
    rx = rollout_all(trace_x.attentions)
    rp = rollout_all(trace_x_prime.attentions)
    _check_layer(layer, rx.shape[-3])
    diff = rx[..., layer, 0, :] - rp[..., layer, 0, :]
    d = np.linalg.norm(diff, axis=-1)
    return float(d) if d.ndim == 0 else d


def score_cls(trace_x, trace_x_prime, layer):
    """Euclidean distance between CLS representations at one layer."""
    cx = _to_f64(trace_x.cls_reps)
    cp = _to_f64(trace_x_prime.cls_reps)
    _check_layer(layer, cx.shape[-2])
    diff = cx[..., layer, :] - cp[..., layer, :]
    d = np.linalg.norm(diff, axis=-1)
    return float(d) if d.ndim == 0 else d


def recover(model, mae, images, *, ratio=0.5, strategy="random",
            recovery_mode="half", generator=None, clean_trace=None):
    """Build the detection-side reconstruction x' for a batch.

    half: one autoencoder pass under a fresh mask; kept patches stay
    original. full: two complementary passes so every patch is
    re-synthesized. Saliency-driven strategies rank patches with the
    target model's own rollout on the clean input.
    """
    x = torch.as_tensor(images, dtype=mae.dtype)
    n = mae.config.num_patches
    saliency = None
    if strategy in ("salient", "non_salient"):
        if clean_trace is None:
            with torch.no_grad():
                clean_trace = model.trace(x)
        saliency = torch.from_numpy(np.asarray(saliency_from_trace(clean_trace)))
    mask = sample_mask(n, ratio, strategy, generator, saliency=saliency, batch=x.shape[0])
    if recovery_mode == "half":
        return reconstruct(mae, x, mask).x_prime
    if recovery_mode == "full":
        return full_recover(mae, x, ratio=ratio, mask=mask)
    raise ConfigurationError(f"unknown recovery mode {recovery_mode!r}")


def pair_scores(model, mae, images, *, ratio=0.5, strategy="random",
                recovery_mode="half", generator=None, chunk_size=128):
    """Both detection scores for every layer at once.

    Returns (d_attn, d_cls), each (B, L) float64: one reconstruction per
    input feeds both features, as in a joint detection call.
    """
    x = torch.as_tensor(images, dtype=model.dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    out_attn, out_cls = [], []
    with torch.no_grad():
        for start in range(0, x.shape[0], chunk_size):
            part = x[start:start + chunk_size]
            trace_x = model.trace(part)
            x_prime = recover(model, mae, part, ratio=ratio, strategy=strategy,
                              recovery_mode=recovery_mode, generator=generator,
                              clean_trace=trace_x)
            trace_p = model.trace(x_prime)
            rx = rollout_all(trace_x.attentions)[..., 0, :]   # (b, L, T)
            rp = rollout_all(trace_p.attentions)[..., 0, :]
            out_attn.append(np.linalg.norm(rx - rp, axis=-1))
            out_cls.append(np.linalg.norm(
                _to_f64(trace_x.cls_reps) - _to_f64(trace_p.cls_reps), axis=-1))
    return np.concatenate(out_attn), np.concatenate(out_cls)


def _feature_scores(model, mae, image, config, generator):
    x = torch.as_tensor(image, dtype=model.dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    _check_layer(config.layer, model.config.depth)
    d_attn, d_cls = pair_scores(
        model, mae, x, ratio=config.ratio, strategy=config.strategy,
        recovery_mode=config.recovery_mode, generator=generator)
    return d_attn[:, config.layer], d_cls[:, config.layer]


def detect(image, model, mae, config: DetectorConfig, threshold: Threshold,
           generator=None) -> DetectionVerdict:
    """Single-detector verdict for one image: reconstruct, score the
    configured feature at the configured layer, compare strictly against
    tau."""
    if threshold is None:
        raise StateError("detector is not calibrated; calibrate_threshold first")
    d_attn, d_cls = _feature_scores(model, mae, image, config, generator)
    score = float(d_attn[0] if config.feature == "attention" else d_cls[0])
    fired = score > threshold.tau
    return DetectionVerdict(
        d_attn=float(d_attn[0]) if config.feature == "attention" else None,
        d_cls=float(d_cls[0]) if config.feature == "cls" else None,
        adversarial=bool(fired),
        triggered_by=(config.feature,) if fired else (),
    )


def joint_detect(image, model, mae, config_attn: DetectorConfig,
                 config_cls: DetectorConfig, thresholds, generator=None) -> DetectionVerdict:
    """OR-rule verdict: both features scored from one shared reconstruction,
    each compared against its own threshold; thresholds is the
    (attention, cls) pair."""
    thr_attn, thr_cls = thresholds
    if thr_attn is None or thr_cls is None:
        raise StateError("joint detector is not fully calibrated")
    if config_attn.feature != "attention" or config_cls.feature != "cls":
        raise ConfigurationError("joint detection expects (attention, cls) configs in order")
    for field in ("ratio", "strategy", "recovery_mode"):
        if getattr(config_attn, field) != getattr(config_cls, field):
            raise ConfigurationError(
                f"joint detection shares one reconstruction; {field} differs between configs")
    _check_layer(config_attn.layer, model.config.depth)
    _check_layer(config_cls.layer, model.config.depth)
    x = torch.as_tensor(image, dtype=model.dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    # both layer columns come from the same pair_scores call, i.e. one x'
    full_attn, full_cls = pair_scores(
        model, mae, x, ratio=config_attn.ratio, strategy=config_attn.strategy,
        recovery_mode=config_attn.recovery_mode, generator=generator)
    da = float(full_attn[0, config_attn.layer])
    dc = float(full_cls[0, config_cls.layer])
    triggered = tuple(
        name for name, value, thr in
        (("attention", da, thr_attn), ("cls", dc, thr_cls)) if value > thr.tau)
    return DetectionVerdict(d_attn=da, d_cls=dc,
                            adversarial=bool(triggered), triggered_by=triggered)


@dataclass
class JointDetector:
    """Calibrated OR-detector bundle used by the evaluation harness."""
    mae: object
    config_attn: DetectorConfig
    config_cls: DetectorConfig
    threshold_attn: Threshold
    threshold_cls: Threshold

    def flags(self, model, images, generator=None):
        """Boolean array: which images the OR rule calls adversarial."""
        d_attn, d_cls = pair_scores(
            model, self.mae, images, ratio=self.config_attn.ratio,
            strategy=self.config_attn.strategy,
            recovery_mode=self.config_attn.recovery_mode, generator=generator)
        return ((d_attn[:, self.config_attn.layer] > self.threshold_attn.tau)
                | (d_cls[:, self.config_cls.layer] > self.threshold_cls.tau))


def layer_aucs(model, mae, images, labels, fgsm_config: FgsmConfig, *,
               ratio=0.5, strategy="random", recovery_mode="half", generator=None):
    """Attention-detector AUC per layer against successful one-step
    adversarials on a validation set. Returns a (L,) float array."""
    x = torch.as_tensor(images, dtype=model.dtype)
    y = torch.as_tensor(labels)
    adv = fgsm(model, x, y, fgsm_config.eps)
    kept = filter_successful(model, x, adv, y)
    if len(kept) == 0:
        raise EvaluationError("no successful adversarials; cannot rank layers")
    kwargs = dict(ratio=ratio, strategy=strategy, recovery_mode=recovery_mode,
                  generator=generator)
    clean_attn, _ = pair_scores(model, mae, kept.originals, **kwargs)
    adv_attn, _ = pair_scores(model, mae, kept.adversarials, **kwargs)
    scores = np.concatenate([clean_attn, adv_attn])
    is_adv = np.r_[np.zeros(len(clean_attn), bool), np.ones(len(adv_attn), bool)]
    return np.array([metrics.roc_auc(scores[:, l], is_adv)
                     for l in range(scores.shape[1])])


def select_layer(model, mae, images, labels, fgsm_config: FgsmConfig, **kwargs):
    """The layer whose attention distance best separates clean inputs from
    successful one-step adversarials; ties go to the smallest index. Both
    detectors then use this layer."""
    aucs = layer_aucs(model, mae, images, labels, fgsm_config, **kwargs)
    return int(np.argmax(aucs))
