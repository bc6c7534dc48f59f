"""Adversarial example generation.

L-inf attacks (fgsm / pgd / apgd) keep every output inside the eps-ball
around the input and inside [0, 1], as exact set membership on the stored
floats: after the usual ball-and-range projection, iterates get a one-ulp
repair toward the original wherever IEEE rounding of x + delta made the
recomputed difference overshoot eps. The repair changes nothing
semantically but makes ``(x_adv - x).abs() <= eps`` hold bitwise.

Reductions that hold bit-exactly by construction:
  pgd with steps=1 and eps_step=eps runs the same ops as fgsm;
  apgd with rho=0 and momentum=0 takes pgd's trajectory at equal step;
  adaptive_cw with both betas zero runs exactly the cw loop.

Every attack is a pure function of (model, input, config, rng): nothing
here touches global random state; only adaptive_cw consumes an rng at
all (for the defense-mirroring fresh reconstruction masks).
"""

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, StateError
from .mae import sample_mask
from .objectives import margin_hinge, trace_term
from .vit import predict, unpatchify

CW_ATANH_CLIP = 1e-6


# ---------------------------------------------------------------------------
# configs

@dataclass
class FgsmConfig:
    eps: float = 0.03
    name = "fgsm"

    def __post_init__(self):
        if self.eps < 0:
            raise ConfigurationError(f"eps must be non-negative, got {self.eps}")


@dataclass
class PgdConfig:
    eps: float = 0.03
    eps_step: float = 0.003
    steps: int = 10
    name = "pgd"

    def __post_init__(self):
        if self.eps < 0 or self.eps_step <= 0 or self.steps < 1:
            raise ConfigurationError(
                f"bad pgd config: eps={self.eps} eps_step={self.eps_step} steps={self.steps}")


@dataclass
class ApgdConfig:
    eps: float = 0.03
    steps: int = 10
    rho: float = 0.75
    momentum: float = 0.25     # weight on the previous direction; 0 = plain ascent
    eps_step: Optional[float] = None   # initial step size; None means 2 * eps
    name = "apgd"

    def __post_init__(self):
        if self.eps < 0 or self.steps < 1 or not (0.0 <= self.rho < 1.0):
            raise ConfigurationError(
                f"bad apgd config: eps={self.eps} steps={self.steps} rho={self.rho}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.eps_step is not None and self.eps_step <= 0:
            raise ConfigurationError(f"eps_step must be positive, got {self.eps_step}")


@dataclass
class CwConfig:
    confidence: float = 0.0    # margin kappa
    steps: int = 30
    lr: float = 0.01
    c: float = 1.0             # trade-off weight on the hinge; fixed, no binary search

    name = "cw"

    def __post_init__(self):
        if self.confidence < 0 or self.steps < 1 or self.lr <= 0 or self.c <= 0:
            raise ConfigurationError(
                f"bad cw config: confidence={self.confidence} steps={self.steps} "
                f"lr={self.lr} c={self.c}")


@dataclass
class PatchConfig:
    num_patches: int = 1
    alpha: float = 0.002
    steps: int = 250
    lr: float = 0.05
    variant: str = "post_softmax"   # 'post_softmax' | 'pre_softmax'
    name = "patch"

    def __post_init__(self):
        if self.num_patches < 1 or self.steps < 1 or self.lr <= 0 or self.alpha < 0:
            raise ConfigurationError(
                f"bad patch config: num_patches={self.num_patches} alpha={self.alpha} "
                f"steps={self.steps} lr={self.lr}")
        if self.variant not in ("post_softmax", "pre_softmax"):
            raise ConfigurationError(f"unknown patch loss variant {self.variant!r}")


@dataclass
class TransferConfig:
    inner: PgdConfig = field(default_factory=PgdConfig)
    name = "transfer"


@dataclass
class AdaptiveCwConfig:
    inner: CwConfig = field(default_factory=CwConfig)
    beta_attn: float = 1e-2
    beta_cls: float = 1e-3
    ratio: float = 0.5
    name = "adaptive_cw"

    def __post_init__(self):
        if self.beta_attn < 0 or self.beta_cls < 0:
            raise ConfigurationError("adaptive weights must be non-negative")


# ---------------------------------------------------------------------------
# shared numerics

def _prep(model, x, y):
    x = torch.as_tensor(x, dtype=model.dtype)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if len(y) != len(x):
        raise InputError(f"{len(x)} images but {len(y)} labels")
    return x.detach().clone(), y, single


def _ce_loss_grad(model, x, y):
    x = x.detach().clone().requires_grad_(True)
    losses = F.cross_entropy(model(x), y, reduction="none")
    grad, = torch.autograd.grad(losses.sum(), x)
    return losses.detach(), grad.detach()


def _repair_linf(x_adv, x, eps):
    # nudge one ulp toward x wherever rounding pushed the recomputed
    # difference past eps; terminates because each nudge moves toward x
    diff = (x_adv - x).abs()
    bad = diff > eps
    while bool(bad.any()):
        x_adv = torch.where(bad, torch.nextafter(x_adv, x), x_adv)
        bad = (x_adv - x).abs() > eps
    return x_adv


def _project(x_adv, x, eps):
    """Exact projection onto ball(x, eps) intersected with [0, 1]."""
    x_adv = torch.clamp(x_adv, x - eps, x + eps)
    x_adv = x_adv.clamp(0.0, 1.0)
    return _repair_linf(x_adv, x, eps)


# ---------------------------------------------------------------------------
# L-inf attacks

def fgsm(model, x, y, eps):
    """One signed-gradient step: clip_[0,1](x + eps * sign(grad CE))."""
    x0, y, single = _prep(model, x, y)
    _, grad = _ce_loss_grad(model, x0, y)
    x_adv = _project(x0 + eps * torch.sign(grad), x0, eps)
    return x_adv[0] if single else x_adv


def pgd(model, x, y, eps, eps_step, steps, return_trajectory=False):
    """Iterative signed ascent from x (no random start), projected onto the
    eps-ball and [0, 1] after every step."""
    x0, y, single = _prep(model, x, y)
    x_adv = x0.clone()
    trajectory = []
    for _ in range(int(steps)):
        _, grad = _ce_loss_grad(model, x_adv, y)
        x_adv = _project(x_adv + eps_step * torch.sign(grad), x0, eps)
        if return_trajectory:
            trajectory.append(x_adv.clone())
    out = x_adv[0] if single else x_adv
    return (out, trajectory) if return_trajectory else out


def _apgd_checkpoints(steps):
    # fractional checkpoint schedule from the budget-aware PGD variant:
    # p_0 = 0, p_1 = 0.22, p_(j+1) = p_j + max(p_j - p_(j-1) - 0.03, 0.06)
    fracs = [0.0, 0.22]
    while fracs[-1] < 1.0:
        fracs.append(fracs[-1] + max(fracs[-1] - fracs[-2] - 0.03, 0.06))
    points = []
    for p in fracs[1:]:
        w = int(math.ceil(p * steps))
        if 1 <= w <= steps and (not points or w > points[-1]):
            points.append(w)
    return points


def apgd(model, x, y, eps, steps, rho, momentum=0.25, eps_step=None,
         return_trajectory=False):
    """Momentum ascent with checkpointed per-sample step halving.

    At each checkpoint the step is halved (and the iterate restarted from
    the best point so far) for every sample whose fraction of
    loss-increasing steps since the previous checkpoint fell below rho.
    Always returns the best-loss iterate seen. With rho=0 and momentum=0
    the halving never fires and the trajectory is plain pgd at the given
    step size.
    """
    x0, y, single = _prep(model, x, y)
    b = x0.shape[0]
    eta = torch.full((b, 1, 1, 1), float(eps_step) if eps_step is not None else 2.0 * eps,
                     dtype=x0.dtype)
    checkpoints = set(_apgd_checkpoints(int(steps)))

    x_prev = x0.clone()
    x_cur = x0.clone()
    loss_cur, grad = _ce_loss_grad(model, x_cur, y)
    best_x = x_cur.clone()
    best_loss = loss_cur.clone()
    increases = torch.zeros(b)
    window = 0
    trajectory = []

    for t in range(1, int(steps) + 1):
        z = _project(x_cur + eta * torch.sign(grad), x0, eps)
        if momentum == 0:
            x_next = z
        else:
            x_next = _project(
                x_cur + (1.0 - momentum) * (z - x_cur) + momentum * (x_cur - x_prev),
                x0, eps)
        if return_trajectory:
            trajectory.append(x_next.clone())
        loss_next, grad = _ce_loss_grad(model, x_next, y)
        increases = increases + (loss_next > loss_cur).to(increases.dtype)
        window += 1
        improved = loss_next > best_loss
        best_x = torch.where(improved.view(-1, 1, 1, 1), x_next, best_x)
        best_loss = torch.where(improved, loss_next, best_loss)
        x_prev, x_cur, loss_cur = x_cur, x_next, loss_next

        if t in checkpoints and t < steps:
            halve = (increases / window) < rho
            if bool(halve.any()):
                eta = torch.where(halve.view(-1, 1, 1, 1), eta * 0.5, eta)
                x_cur = torch.where(halve.view(-1, 1, 1, 1), best_x, x_cur)
                x_prev = torch.where(halve.view(-1, 1, 1, 1), best_x, x_prev)
                loss_cur, grad = _ce_loss_grad(model, x_cur, y)
            increases = torch.zeros(b)
            window = 0

    out = best_x[0] if single else best_x
    return (out, trajectory) if return_trajectory else out


# ---------------------------------------------------------------------------
# CW family

def _cw_loop(model, x0, y, cfg: CwConfig, extra=None):
    """Adam descent in tanh space on ||delta||^2 + c * hinge (+ extra terms).

    extra: optional callable giving per-sample additions to the objective;
    when None the loop is the plain CW attack. Returns the iterate with the
    lowest objective seen.
    """
    xc = x0.clamp(CW_ATANH_CLIP, 1.0 - CW_ATANH_CLIP)
    w = torch.atanh(2.0 * xc - 1.0).detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.lr)
    best_x = x0.clone()
    best_obj = torch.full((x0.shape[0],), float("inf"), dtype=x0.dtype)

    def objective(x_adv):
        dist = ((x_adv - x0) ** 2).flatten(1).sum(dim=1)
        hinge = margin_hinge(model(x_adv), y, cfg.confidence)
        obj = dist + cfg.c * hinge
        if extra is not None:
            obj = obj + extra(x_adv)
        return obj

    for _ in range(int(cfg.steps)):
        x_adv = 0.5 * (torch.tanh(w) + 1.0)
        obj = objective(x_adv)
        with torch.no_grad():
            better = obj < best_obj
            best_x = torch.where(better.view(-1, 1, 1, 1), x_adv.detach(), best_x)
            best_obj = torch.where(better, obj.detach(), best_obj)
        opt.zero_grad()
        obj.sum().backward()
        opt.step()

    with torch.no_grad():
        x_adv = 0.5 * (torch.tanh(w) + 1.0)
        obj = objective(x_adv)
        better = obj < best_obj
        best_x = torch.where(better.view(-1, 1, 1, 1), x_adv, best_x)

    with torch.no_grad():
        logits = model(best_x)
    margin = _attack_margin(logits, y)
    return best_x, margin >= cfg.confidence


def _attack_margin(logits, y):
    # max_{j != y} Z_j - Z_y: positive once the sample is misclassified
    z_y = logits.gather(1, y.view(-1, 1)).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, y.view(-1, 1), float("-inf"))
    return masked.max(dim=1).values - z_y


def cw(model, x, y, confidence=0.0, steps=30, lr=0.01, c=1.0):
    """Margin attack via change of variables; returns (x_adv, success)
    where success means the logit margin reached the confidence."""
    x0, y, single = _prep(model, x, y)
    cfg = CwConfig(confidence=confidence, steps=steps, lr=lr, c=c)
    x_adv, success = _cw_loop(model, x0, y, cfg, extra=None)
    if single:
        return x_adv[0], bool(success[0])
    return x_adv, success


def adaptive_cw(model, mae, x, y, beta_attn, beta_cls, inner: CwConfig,
                mask_rng=None, ratio=0.5, frozen_mask=None):
    """Detection-aware CW: adds per-block attention-map and CLS distances
    between x_adv and its autoencoder reconstruction to the CW objective.

    The reconstruction mask is resampled fresh from mask_rng on every
    iteration, mirroring the deployed defense; frozen_mask pins one mask
    (gradient tests only). With both betas zero the extra terms are
    skipped entirely and the run is bit-identical to cw.
    """
    x0, y, single = _prep(model, x, y)
    if beta_attn == 0 and beta_cls == 0:
        extra = None
    else:
        n_patches = model.config.num_patches

        def extra(x_adv):
            mask = frozen_mask
            if mask is None:
                mask = sample_mask(n_patches, ratio, "random", mask_rng,
                                   batch=x_adv.shape[0])
            return trace_term(model, mae, x_adv, mask, beta_attn, beta_cls)

    x_adv, success = _cw_loop(model, x0, y, inner, extra=extra)
    if single:
        return x_adv[0], bool(success[0])
    return x_adv, success


# ---------------------------------------------------------------------------
# patch attack

def rank_patches(model, x):
    """Patches by aggregate incoming attention: for each patch column, the
    post-softmax attention directed at it summed over layers, heads and
    query tokens, from the clean trace. Returns (B, N) scores."""
    with torch.no_grad():
        trace = model.trace(x)
    # head-averaged maps summed over layers and queries; the head mean is a
    # constant factor off the per-head sum, which cannot change the ranking
    return trace.attentions[..., 1:].sum(dim=(1, 2)) * model.config.num_heads


def _patch_pixel_mask(model, sel):
    # sel: (B, k) patch indices -> (B, H, W, C) bool via the patch layout
    cfg = model.config
    b = sel.shape[0]
    flags = torch.zeros(b, cfg.num_patches, dtype=torch.bool)
    flags.scatter_(1, sel, True)
    patch_px = flags.unsqueeze(-1).expand(-1, -1, cfg.patch_size ** 2 * cfg.channels)
    return unpatchify(patch_px.to(torch.float32), cfg.image_size, cfg.patch_size,
                      cfg.channels).bool()


def patch_attack(model, x, y, cfg: PatchConfig):
    """Unbounded perturbation confined to the most-attended patches.

    Ascends CE + alpha * (attention directed at the selected patches);
    the attention term reads post-softmax maps or pre-softmax scores
    depending on cfg.variant. Pixels outside the selected patches are
    bit-identical to the input.
    """
    x0, y, single = _prep(model, x, y)
    n = model.config.num_patches
    if cfg.num_patches > n:
        raise ConfigurationError(f"num_patches {cfg.num_patches} exceeds patch count {n}")

    scores = rank_patches(model, x0)
    sel = scores.topk(cfg.num_patches, dim=-1).indices            # (B, k)
    mask = _patch_pixel_mask(model, sel)
    cols = sel + 1                                                # trace columns, CLS at 0
    b, length = x0.shape[0], model.config.depth
    t = n + 1

    param = x0.clone().requires_grad_(True)
    opt = torch.optim.Adam([param], lr=cfg.lr)
    for _ in range(int(cfg.steps)):
        trace = model.trace(param)
        loss_vec = F.cross_entropy(trace.logits, y, reduction="none")
        if cfg.alpha != 0:
            maps = trace.attentions if cfg.variant == "post_softmax" else trace.attention_scores
            idx = cols.view(b, 1, 1, -1).expand(b, length, t, -1)
            drawn = maps.gather(-1, idx).sum(dim=(1, 2, 3))
            loss_vec = loss_vec + cfg.alpha * drawn
        opt.zero_grad()
        (-loss_vec.sum()).backward()
        param.grad.mul_(mask.to(param.dtype))
        opt.step()
        with torch.no_grad():
            param.clamp_(0.0, 1.0)
            param.copy_(torch.where(mask, param, x0))
    x_adv = torch.where(mask, param.detach().clamp(0.0, 1.0), x0)
    return x_adv[0] if single else x_adv


def transfer_attack(surrogate, x, y, inner: PgdConfig):
    """PGD against a separately trained surrogate; the caller evaluates the
    output against the real target."""
    return pgd(surrogate, x, y, inner.eps, inner.eps_step, inner.steps)


# ---------------------------------------------------------------------------
# batches and archives

@dataclass
class AdversarialBatch:
    originals: torch.Tensor      # (B, H, W, C)
    adversarials: torch.Tensor   # (B, H, W, C), in [0, 1]
    labels: torch.Tensor         # (B,)
    success: torch.Tensor        # (B,) bool: clean correct and adversarial wrong
    linf: torch.Tensor           # (B,) per-sample max |delta|
    l2: torch.Tensor             # (B,) per-sample ||delta||_2
    attack: str = ""
    config: Optional[object] = None

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        return AdversarialBatch(
            originals=self.originals[index], adversarials=self.adversarials[index],
            labels=self.labels[index], success=self.success[index],
            linf=self.linf[index], l2=self.l2[index],
            attack=self.attack, config=self.config)


def _norms(originals, adversarials):
    delta = (adversarials - originals).to(torch.float64).flatten(1)
    return delta.abs().max(dim=1).values, torch.linalg.norm(delta, dim=1)


def make_batch(model, originals, adversarials, labels, attack="", config=None):
    """Bundle attack output with footnote-style success flags: a sample
    counts as successful iff the clean input is classified correctly and
    the adversarial one is not."""
    originals = torch.as_tensor(originals, dtype=model.dtype)
    adversarials = torch.as_tensor(adversarials, dtype=model.dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if not (len(originals) == len(adversarials) == len(labels)):
        raise InputError("originals, adversarials and labels must be aligned")
    clean_pred, _ = predict(model, originals)
    adv_pred, _ = predict(model, adversarials)
    success = (clean_pred == labels) & (adv_pred != labels)
    linf, l2 = _norms(originals, adversarials)
    return AdversarialBatch(originals, adversarials, labels, success, linf, l2,
                            attack=attack, config=config)


def filter_successful(model, originals, adversarials, labels):
    """Keep exactly the samples where the clean input is correctly
    classified and the adversarial counterpart is misclassified."""
    batch = make_batch(model, originals, adversarials, labels)
    return batch.subset(batch.success)


def generate(model, x, y, cfg, mae=None, surrogate=None, generator=None):
    """Dispatch one attack config against a batch; returns an
    AdversarialBatch (unfiltered, success flags included)."""
    x0, y, _ = _prep(model, x, y)
    if isinstance(cfg, FgsmConfig):
        adv = fgsm(model, x0, y, cfg.eps)
    elif isinstance(cfg, PgdConfig):
        adv = pgd(model, x0, y, cfg.eps, cfg.eps_step, cfg.steps)
    elif isinstance(cfg, ApgdConfig):
        adv = apgd(model, x0, y, cfg.eps, cfg.steps, cfg.rho,
                   momentum=cfg.momentum, eps_step=cfg.eps_step)
    elif isinstance(cfg, CwConfig):
        adv, _ = cw(model, x0, y, cfg.confidence, cfg.steps, cfg.lr, cfg.c)
    elif isinstance(cfg, PatchConfig):
        adv = patch_attack(model, x0, y, cfg)
    elif isinstance(cfg, TransferConfig):
        if surrogate is None:
            raise ConfigurationError("transfer attack needs a surrogate model")
        adv = transfer_attack(surrogate, x0, y, cfg.inner)
    elif isinstance(cfg, AdaptiveCwConfig):
        if mae is None:
            raise ConfigurationError("adaptive attack needs the autoencoder")
        adv, _ = adaptive_cw(model, mae, x0, y, cfg.beta_attn, cfg.beta_cls,
                             cfg.inner, mask_rng=generator, ratio=cfg.ratio)
    else:
        raise ConfigurationError(f"unknown attack config {type(cfg).__name__!r}")
    return make_batch(model, x0, adv, y, attack=cfg.name, config=cfg)


def config_from_name(name, **overrides):
    table = {c.name: c for c in
             (FgsmConfig, PgdConfig, ApgdConfig, CwConfig, PatchConfig,
              TransferConfig, AdaptiveCwConfig)}
    if name not in table:
        raise ConfigurationError(f"unknown attack {name!r}; choose from {sorted(table)}")
    cls = table[name]
    inner = {}
    if cls is TransferConfig:
        inner = {k: overrides.pop(k) for k in ("eps", "eps_step", "steps") if k in overrides}
        if inner:
            overrides["inner"] = PgdConfig(**inner)
    if cls is AdaptiveCwConfig:
        inner = {k: overrides.pop(k) for k in ("confidence", "steps", "lr", "c")
                 if k in overrides}
        if inner:
            overrides["inner"] = CwConfig(**inner)
    try:
        return cls(**overrides)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for attack {name!r}: {exc}") from exc


def save_batch(path, batch: AdversarialBatch):
    """Archive an adversarial batch: arrays plus a JSON echo of the attack
    config. Written atomically; round-trips bit-exactly."""
    import os
    import tempfile

    meta = {
        "format": "vitsentry-adversarial-batch",
        "version": 1,
        "attack": batch.attack,
        "config": asdict(batch.config) if batch.config is not None else None,
        "n": len(batch),
        "n_success": int(batch.success.sum()),
    }
    payload = {
        "originals": batch.originals.cpu().numpy(),
        "adversarials": batch.adversarials.cpu().numpy(),
        "labels": batch.labels.cpu().numpy(),
        "success": batch.success.cpu().numpy(),
        "linf": batch.linf.cpu().numpy(),
        "l2": batch.l2.cpu().numpy(),
        "meta_json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_batch(path):
    """Load an archive written by save_batch; returns (AdversarialBatch, meta)."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise StateError(f"cannot read adversarial archive {path!r}: {exc}") from exc
    required = {"originals", "adversarials", "labels", "success", "linf", "l2", "meta_json"}
    if not required.issubset(set(data.files)):
        raise StateError(f"archive {path!r} is missing fields "
                         f"{sorted(required - set(data.files))}")
    meta = json.loads(bytes(data["meta_json"]).decode())
    batch = AdversarialBatch(
        originals=torch.from_numpy(data["originals"]),
        adversarials=torch.from_numpy(data["adversarials"]),
        labels=torch.from_numpy(data["labels"]),
        success=torch.from_numpy(data["success"]),
        linf=torch.from_numpy(data["linf"]),
        l2=torch.from_numpy(data["l2"]),
        attack=meta.get("attack", ""),
        config=None,
    )
    return batch, meta
