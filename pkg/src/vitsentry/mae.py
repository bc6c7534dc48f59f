"""Masked autoencoder used to re-synthesize inputs before detection.

A mask keeps a subset of patches (keep flag = 1) and hides the rest. The
encoder runs over the kept tokens only; the decoder sees the full token
grid with a learnable mask token standing in for hidden patches, plus
decoder position embeddings; a linear head predicts raw pixels per patch.

The recovered image is

    x_prime = x (.) m + mae(x (.) m)

composited patch-wise: kept patches are copied from x bit-exactly, hidden
patches come from the decoder (clamped to [0, 1]). The composite is built
with differentiable ops end to end, so gradients flow through both the
copy path and the decoder path; the detection-aware attack relies on
that.

Masking ratio p = 1 - (sum m_i) / N, i.e. the fraction hidden. Three
strategies: random (uniform without replacement), salient (hide the
k highest-saliency patches), non_salient (hide the k lowest). Training
is self-supervised on clean images only, MSE on hidden patches.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, InputError
from .rollout import patch_saliency
from .vit import Block, TrainSpec, patchify, unpatchify


@dataclass
class MAEConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    encoder_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    encoder_mlp_dim: int = 256
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    decoder_mlp_dim: int = 256

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "encoder_dim", "encoder_depth",
                     "encoder_heads", "encoder_mlp_dim", "decoder_dim", "decoder_depth",
                     "decoder_heads", "decoder_mlp_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size != 0:
            raise DimensionError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.encoder_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise ConfigurationError("head count must divide the embedding dim")

    @property
    def num_patches(self):
        g = self.image_size // self.patch_size
        return g * g


@dataclass
class MaskSpec:
    """keep: bool tensor (..., N), True where the patch stays visible.

    ratio is the realized hidden fraction, k_hidden / N exactly; strategy
    records how the mask was drawn.
    """
    keep: torch.Tensor
    ratio: float
    strategy: str

    def __post_init__(self):
        self.keep = torch.as_tensor(self.keep, dtype=torch.bool)

    @property
    def num_patches(self):
        return self.keep.shape[-1]

    def complement(self):
        n = self.num_patches
        kept = int(self.keep.reshape(-1, n)[0].sum())   # kept patches become hidden
        return MaskSpec(~self.keep, kept / n, self.strategy)


def sample_mask(num_patches, ratio, strategy="random", generator=None,
                saliency=None, batch=None):
    """Draw a MaskSpec hiding k = round(N * ratio) patches.

    generator: torch.Generator for reproducible draws (random strategy).
    saliency: per-patch scores, (N,) or (batch, N); required for the
    salient / non_salient strategies. batch=None gives a single (N,) mask,
    an integer gives independent per-sample masks (batch, N).
    """
    n = int(num_patches)
    if not (0.0 < ratio < 1.0):
        raise ConfigurationError(f"masking ratio must be in (0, 1), got {ratio}")
    k = int(round(n * ratio))
    if k <= 0 or k >= n:
        raise ConfigurationError(f"ratio {ratio} hides {k} of {n} patches; nothing to do")
    b = 1 if batch is None else int(batch)

    if strategy == "random":
        rows = [torch.randperm(n, generator=generator)[:k] for _ in range(b)]
        hidden = torch.stack(rows)                                   # (b, k)
    elif strategy in ("salient", "non_salient"):
        if saliency is None:
            raise ConfigurationError(f"strategy {strategy!r} requires saliency scores")
        s = torch.as_tensor(saliency, dtype=torch.float64)
        if s.dim() == 1:
            s = s.unsqueeze(0).expand(b, -1)
        if s.shape != (b, n):
            raise DimensionError(f"saliency shape {tuple(s.shape)} does not match ({b}, {n})")
        # stable sort so equal scores resolve by patch index
        order = torch.argsort(-s if strategy == "salient" else s, dim=-1, stable=True)
        hidden = order[:, :k]
    else:
        raise ConfigurationError(f"unknown masking strategy {strategy!r}")

    keep = torch.ones(b, n, dtype=torch.bool)
    keep.scatter_(1, hidden, False)
    if batch is None:
        keep = keep[0]
    return MaskSpec(keep=keep, ratio=k / n, strategy=strategy)


def saliency_from_trace(trace):
    """Per-patch saliency from a classifier trace: the patch entries of the
    final-layer rollout CLS row. Returns (N,) or (B, N) float64 numpy."""
    return patch_saliency(trace.attentions)


@dataclass
class ReconstructionResult:
    x_prime: torch.Tensor
    mask_used: MaskSpec
    patch_losses: torch.Tensor   # squared error per hidden patch position, 0 where kept


class MaskedAutoencoder(nn.Module):
    def __init__(self, config: MAEConfig):
        super().__init__()
        self.config = config
        n = config.num_patches
        patch_dim = config.patch_size ** 2 * config.channels
        self.patch_proj = nn.Linear(patch_dim, config.encoder_dim)
        self.enc_pos = nn.Parameter(torch.zeros(1, n, config.encoder_dim))
        self.encoder = nn.ModuleList(
            Block(config.encoder_dim, config.encoder_heads, config.encoder_mlp_dim)
            for _ in range(config.encoder_depth))
        self.enc_norm = nn.LayerNorm(config.encoder_dim)
        self.enc_to_dec = nn.Linear(config.encoder_dim, config.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.decoder_dim))
        self.dec_pos = nn.Parameter(torch.zeros(1, n, config.decoder_dim))
        self.decoder = nn.ModuleList(
            Block(config.decoder_dim, config.decoder_heads, config.decoder_mlp_dim)
            for _ in range(config.decoder_depth))
        self.dec_norm = nn.LayerNorm(config.decoder_dim)
        self.head = nn.Linear(config.decoder_dim, patch_dim)
        nn.init.trunc_normal_(self.enc_pos, std=0.02)
        nn.init.trunc_normal_(self.dec_pos, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @property
    def dtype(self):
        return self.patch_proj.weight.dtype

    def predict_patches(self, patches, keep):
        """Decoder pixel predictions for all N patch positions.

        patches: (B, N, P*P*C); keep: (B, N) bool with the same number of
        True entries per row. Only kept tokens enter the encoder.
        """
        b, n, _ = patches.shape
        counts = keep.sum(dim=-1)
        k = int(counts[0])
        if not bool((counts == k).all()):
            raise InputError("per-sample masks must keep the same number of patches")
        if k == 0:
            raise InputError("mask keeps no patches; the encoder needs at least one token")

        # same [-1, 1] input mapping as the classifier; the head still
        # predicts raw [0, 1] pixels
        tokens = self.patch_proj(patches * 2.0 - 1.0) + self.enc_pos  # (B, N, De)
        kept_idx = torch.argsort(keep.long(), dim=-1, stable=True, descending=True)[:, :k]
        kept_idx, _ = kept_idx.sort(dim=-1)                       # ascending patch order
        x = torch.gather(tokens, 1, kept_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))
        for block in self.encoder:
            x, _, _ = block(x)
        x = self.enc_to_dec(self.enc_norm(x))                     # (B, k, Dd)

        full = self.mask_token.to(x.dtype).expand(b, n, -1).clone()
        full = full.scatter(1, kept_idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        full = full + self.dec_pos
        for block in self.decoder:
            full, _, _ = block(full)
        return self.head(self.dec_norm(full))                     # (B, N, P*P*C)


def _batched_keep(mask: MaskSpec, batch):
    keep = mask.keep
    if keep.dim() == 1:
        keep = keep.unsqueeze(0).expand(batch, -1)
    if keep.shape[0] != batch:
        raise DimensionError(f"mask batch {keep.shape[0]} does not match image batch {batch}")
    return keep


def reconstruct(mae, images, mask: MaskSpec) -> ReconstructionResult:
    """Recover an image from its kept patches: kept patches are bit-exact
    copies of the input, hidden ones are decoder predictions clamped to
    [0, 1]. Differentiable with respect to the input."""
    cfg = mae.config
    x = torch.as_tensor(images, dtype=mae.dtype)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise DimensionError(
            f"input shape {tuple(x.shape)} does not match configured geometry "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})")
    if mask.num_patches != cfg.num_patches:
        raise DimensionError(
            f"mask covers {mask.num_patches} patches, model has {cfg.num_patches}")

    patches = patchify(x, cfg.patch_size)                         # (B, N, D_patch)
    keep = _batched_keep(mask, x.shape[0])
    pred = mae.predict_patches(patches, keep)
    keep3 = keep.unsqueeze(-1)
    out_patches = torch.where(keep3, patches, pred.clamp(0.0, 1.0))
    x_prime = unpatchify(out_patches, cfg.image_size, cfg.patch_size, cfg.channels)

    with torch.no_grad():
        per_patch = ((pred - patches) ** 2).mean(dim=-1)
        per_patch = torch.where(keep, torch.zeros_like(per_patch), per_patch)
    if single:
        x_prime = x_prime[0]
        per_patch = per_patch[0]
    return ReconstructionResult(x_prime=x_prime, mask_used=mask, patch_losses=per_patch)


def full_recover(mae, images, ratio=0.5, generator=None, mask=None):
    """Recover every patch by applying the autoencoder twice.

    The first pass hides half the patches; the second pass runs on the
    first pass's output with the complementary mask, so the two hidden
    sets partition the patch grid and no original patch survives into the
    result. Only ratio 0.5 makes the complement construction meaningful.

    mask overrides the sampled first-pass mask (tests); otherwise a fresh
    random mask is drawn from `generator`.
    """
    if ratio != 0.5:
        raise ConfigurationError(f"complementary recovery requires ratio 0.5, got {ratio}")
    x = torch.as_tensor(images, dtype=mae.dtype)
    single = x.dim() == 3
    batch = 1 if single else x.shape[0]
    if mask is None:
        mask = sample_mask(mae.config.num_patches, ratio, "random", generator,
                           batch=None if single else batch)
    first = reconstruct(mae, x, mask)
    second = reconstruct(mae, first.x_prime, mask.complement())
    return second.x_prime


def train_mae(images, config: MAEConfig, spec: TrainSpec, ratio=0.5,
              dtype=torch.float32, log=None):
    """Self-supervised training on clean images: hide a fresh random mask
    per image per step, regress raw pixels of hidden patches, MSE loss on
    hidden patches only. Adam with cosine-annealed learning rate;
    deterministic given spec.seed.

    Returns (model, history).
    """
    x = torch.as_tensor(images, dtype=dtype)
    if len(x) == 0:
        raise InputError("cannot train on an empty dataset")
    if x.shape[1:] != (config.image_size, config.image_size, config.channels):
        raise DimensionError(f"image shape {tuple(x.shape[1:])} does not match config")

    torch.manual_seed(spec.seed)
    model = MaskedAutoencoder(config).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    sched = None
    if spec.schedule == "cosine" and spec.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=spec.epochs)

    rng = torch.Generator().manual_seed(spec.seed)
    n = len(x)
    n_patch = config.num_patches
    all_patches = patchify(x, config.patch_size)
    history = []
    for epoch in range(spec.epochs):
        model.train()
        perm = torch.randperm(n, generator=rng)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            patches = all_patches[idx]
            mask = sample_mask(n_patch, ratio, "random", rng, batch=len(idx))
            pred = model.predict_patches(patches, mask.keep)
            hidden = ~mask.keep
            loss = ((pred - patches) ** 2 * hidden.unsqueeze(-1)).sum() \
                / (hidden.sum() * patches.shape[-1])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if sched is not None:
            sched.step()
        record = {"epoch": epoch, "loss": total / n}
        history.append(record)
        if log is not None:
            log(record)
    model.eval()
    return model, history
