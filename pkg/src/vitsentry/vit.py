"""Vision transformer classifier with an instrumented forward pass.

Layout is the usual pre-norm encoder: patchify -> linear patch embedding ->
learnable CLS token prepended at position 0 -> learnable position embeddings
-> depth transformer blocks (attention + MLP, both with residuals) -> final
layer norm -> linear head on the CLS row.

The instrumented entry point is ``VitClassifier.trace``: one pass that
records, per block, the head-averaged post-softmax attention map, the
head-averaged pre-softmax scores, and the CLS row of the block output,
plus the final logits. Everything downstream (rollout, detection scores,
attention-aware attacks) reads from that structure, so repeated calls on
the same input must stay bit-identical; keep this path free of dropout
and other train-time randomness.

Images are H x W x C float tensors in [0, 1] throughout the package.
"""

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, InputError


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 6
    num_heads: int = 4
    mlp_hidden_dim: int = 256
    num_classes: int = 10

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "embed_dim",
                     "depth", "num_heads", "mlp_hidden_dim", "num_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size != 0:
            raise DimensionError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}")
        if self.num_classes < 2:
            raise ConfigurationError("a classifier needs at least two classes")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid_size * self.grid_size


@dataclass
class TransformerTrace:
    """Everything recorded by one instrumented forward pass.

    attentions: (B, L, T, T) head-averaged post-softmax attention, T = N + 1.
        Every row of every layer sums to 1 (up to softmax rounding).
    attention_scores: (B, L, T, T) head-averaged pre-softmax scores (q k^T,
        scaled). Used by the attention-steering patch attack variant.
    cls_reps: (B, L, D) CLS row of each block's output, residuals included,
        taken before the final layer norm.
    logits: (B, K).
    """
    attentions: torch.Tensor
    attention_scores: torch.Tensor
    cls_reps: torch.Tensor
    logits: torch.Tensor

    def squeeze(self):
        return TransformerTrace(self.attentions[0], self.attention_scores[0],
                                self.cls_reps[0], self.logits[0])


def patchify(images, patch_size):
    """Split images into non-overlapping flattened patches.

    images: (H, W, C) or (B, H, W, C). Returns (N, P*P*C) or (B, N, P*P*C).
    Patches are ordered row-major over the grid; within a patch the layout
    is row-major over pixels with channels last, so `unpatchify` inverts
    this losslessly.
    """
    x = torch.as_tensor(images)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise DimensionError(f"expected (H, W, C) or (B, H, W, C), got shape {tuple(x.shape)}")
    b, h, w, c = x.shape
    p = int(patch_size)
    if p <= 0:
        raise ConfigurationError(f"patch_size must be positive, got {patch_size!r}")
    if h % p != 0 or w % p != 0:
        raise DimensionError(f"patch_size {p} does not divide image shape ({h}, {w})")
    gh, gw = h // p, w // p
    x = x.reshape(b, gh, p, gw, p, c)            # (B, gh, P, gw, P, C)
    x = x.permute(0, 1, 3, 2, 4, 5)              # (B, gh, gw, P, P, C)
    x = x.reshape(b, gh * gw, p * p * c)         # (B, N, P*P*C)
    return x[0] if single else x


def unpatchify(patches, image_size, patch_size, channels):
    """Inverse of `patchify` for square images."""
    x = torch.as_tensor(patches)
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    b, n, d = x.shape
    p = int(patch_size)
    g = image_size // p
    if g * g != n or d != p * p * channels:
        raise DimensionError(
            f"patch tensor {tuple(x.shape)} does not match image_size={image_size}, "
            f"patch_size={patch_size}, channels={channels}")
    x = x.reshape(b, g, g, p, p, channels)
    x = x.permute(0, 1, 3, 2, 4, 5)              # (B, g, P, g, P, C)
    x = x.reshape(b, g * p, g * p, channels)
    return x[0] if single else x


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, capture=False):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]         # each (B, heads, T, head_dim)
        scores = (q @ k.transpose(-2, -1)) * self.scale   # (B, heads, T, T)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        out = self.proj(out)
        if capture:
            return out, attn.mean(dim=1), scores.mean(dim=1)
        return out, None, None


class Mlp(nn.Module):
    def __init__(self, dim, hidden_dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block. Shared by the classifier and the autoencoder."""

    def __init__(self, dim, num_heads, mlp_hidden_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_hidden_dim)

    def forward(self, x, capture=False):
        y, attn, scores = self.attn(self.norm1(x), capture=capture)
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn, scores


class VitClassifier(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n, d = config.num_patches, config.embed_dim
        self.patch_proj = nn.Linear(config.patch_size ** 2 * config.channels, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_hidden_dim) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.num_classes)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    @property
    def dtype(self):
        return self.patch_proj.weight.dtype

    def _check_geometry(self, x):
        c = self.config
        if x.dim() != 4 or x.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise DimensionError(
                f"input shape {tuple(x.shape)} does not match configured geometry "
                f"({c.image_size}, {c.image_size}, {c.channels})")

    def embed(self, x):
        # x: (B, H, W, C) -> token sequence (B, N+1, D). Pixels arrive in
        # [0, 1]; mapping them to [-1, 1] before the linear projection makes
        # from-scratch training on raw images behave much better.
        tokens = self.patch_proj(patchify(x, self.config.patch_size) * 2.0 - 1.0)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def forward(self, images):
        """Plain forward: logits only. Used by training and the attack loops."""
        x = torch.as_tensor(images, dtype=self.dtype)
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        self._check_geometry(x)
        x = self.embed(x)
        for block in self.blocks:
            x, _, _ = block(x)
        logits = self.head(self.norm(x[:, 0]))
        return logits[0] if single else logits

    def trace(self, images) -> TransformerTrace:
        """Instrumented forward pass; see the module docstring for field semantics."""
        x = torch.as_tensor(images, dtype=self.dtype)
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        self._check_geometry(x)
        x = self.embed(x)
        attns, scores, cls_reps = [], [], []
        for block in self.blocks:
            x, a, s = block(x, capture=True)
            attns.append(a)
            scores.append(s)
            cls_reps.append(x[:, 0])
        trace = TransformerTrace(
            attentions=torch.stack(attns, dim=1),          # (B, L, T, T)
            attention_scores=torch.stack(scores, dim=1),   # (B, L, T, T)
            cls_reps=torch.stack(cls_reps, dim=1),         # (B, L, D)
            logits=self.head(self.norm(x[:, 0])),          # (B, K)
        )
        return trace.squeeze() if single else trace


def predict(model, images):
    """Predicted labels and softmax probabilities.

    Returns (labels, probs): (B,) int64 and (B, K) with rows summing to 1,
    unbatched if the input was a single image.
    """
    with torch.no_grad():
        logits = model(images)
    probs = logits.softmax(dim=-1)
    labels = probs.argmax(dim=-1)
    return labels, probs


def accuracy(model, images, labels, batch_size=256):
    """Fraction of images whose argmax prediction matches the label."""
    labels = torch.as_tensor(labels)
    if len(images) == 0:
        raise InputError("cannot compute accuracy on an empty batch")
    hits = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(images[start:start + batch_size])
            hits += (logits.argmax(dim=-1) == labels[start:start + batch_size]).sum().item()
    return hits / len(images)


@dataclass
class TrainSpec:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    schedule: str = "cosine"   # 'cosine' | 'constant'
    # Gaussian pixel noise added to training batches (clamped back to
    # [0, 1]). Stabilizes the attention maps under the small natural
    # perturbations a reconstruction introduces, which is what the
    # detector's clean noise floor is made of.
    noise_std: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigurationError(
                f"bad training spec: epochs={self.epochs} batch_size={self.batch_size} lr={self.lr}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")


def train_classifier(images, labels, config: ModelConfig, spec: TrainSpec,
                     dtype=torch.float32, log=None):
    """Train a classifier from scratch with Adam and cross-entropy.

    Deterministic given spec.seed: model init, batch order and every update
    are driven by generators seeded here, so two runs with the same inputs
    produce identical parameters. With epochs=0 the returned parameters are
    exactly the seeded initialization.

    Returns (model, history) where history has one dict per epoch with the
    mean training loss and training accuracy.
    """
    images = torch.as_tensor(images, dtype=dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(images) != len(labels):
        raise InputError(f"{len(images)} images but {len(labels)} labels")
    if len(images) == 0:
        raise InputError("cannot train on an empty dataset")
    if int(labels.max()) >= config.num_classes or int(labels.min()) < 0:
        raise InputError("labels out of range for configured num_classes")

    torch.manual_seed(spec.seed)
    model = VitClassifier(config).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    sched = None
    if spec.schedule == "cosine" and spec.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=spec.epochs)

    order_rng = torch.Generator().manual_seed(spec.seed)
    n = len(images)
    history = []
    for epoch in range(spec.epochs):
        model.train()
        perm = torch.randperm(n, generator=order_rng)
        total_loss, hits = 0.0, 0
        for start in range(0, n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            xb = images[idx]
            if spec.noise_std > 0:
                jitter = torch.randn(xb.shape, generator=order_rng, dtype=xb.dtype)
                xb = (xb + spec.noise_std * jitter).clamp(0.0, 1.0)
            logits = model(xb)
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            hits += (logits.argmax(dim=-1) == labels[idx]).sum().item()
        if sched is not None:
            sched.step()
        record = {"epoch": epoch, "loss": total_loss / n, "accuracy": hits / n}
        history.append(record)
        if log is not None:
            log(record)
    model.eval()
    return model, history


def loss_and_input_gradient(model, images, labels, objective):
    """Objective value and its gradient with respect to the input pixels.

    objective is one of the dataclasses in `objectives` (cross-entropy,
    hinge margin, or the reconstruction-aware composite); anything else
    raises ConfigurationError. Accepts a single image or a batch; returns
    (loss, grad) with loss a float for a single image and a (B,) tensor
    for a batch, grad shaped like the input.
    """
    from . import objectives

    x = torch.as_tensor(images, dtype=model.dtype)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    y = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if len(y) != len(x):
        raise InputError(f"{len(x)} images but {len(y)} labels")
    x = x.clone().requires_grad_(True)
    losses = objectives.evaluate(model, x, y, objective)   # (B,)
    grad, = torch.autograd.grad(losses.sum(), x)
    losses = losses.detach()
    if single:
        return losses[0].item(), grad[0].detach()
    return losses, grad.detach()
