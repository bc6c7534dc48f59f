"""Attention rollout.

Per layer the head-averaged attention map is blended with the identity to
account for the residual branch,

    A_l = 0.5 * W_att(l) + 0.5 * I,

and layers are accumulated by left multiplication,

    roll_0 = A_0,   roll_l = A_l @ roll_(l-1)  for l > 0,

so roll_l is the matrix product A_l A_(l-1) ... A_0. The CLS attention
vector of layer l is row 0 of roll_l. Each A_l is row-stochastic and the
product of row-stochastic matrices is row-stochastic, so every rollout
row sums to 1 up to float rounding.

All arithmetic here happens in float64 regardless of the model dtype.
Functions accept arbitrary leading batch dimensions: maps are (..., T, T)
and stacks are (..., L, T, T).
"""

import numpy as np

from .errors import DimensionError, InputError

ROW_SUM_TOL = 1e-5


def _as_square(w):
    a = np.asarray(w, dtype=np.float64)
    if hasattr(w, "detach"):
        a = np.asarray(w.detach().cpu().numpy(), dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"attention map must be square, got shape {a.shape}")
    return a


def normalize_layer(attn):
    """Blend a row-stochastic attention map with the identity: 0.5*W + 0.5*I.

    Rows of the input must sum to 1 within 1e-5 (softmax output); rows of
    the result then sum to 1 within the same tolerance.
    """
    a = _as_square(attn)
    sums = a.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=ROW_SUM_TOL, rtol=0.0):
        worst = float(np.abs(sums - 1.0).max())
        raise InputError(f"attention rows must sum to 1 (worst deviation {worst:.3g})")
    t = a.shape[-1]
    return 0.5 * a + 0.5 * np.eye(t, dtype=np.float64)


def rollout(attn_stack, layer=None):
    """Accumulated rollout map.

    attn_stack: raw head-averaged attention maps, (..., L, T, T); each map
    is normalized here, so pass softmax output as recorded in the trace.
    Returns roll_layer (..., T, T); layer=None means the final layer.
    """
    maps = rollout_all(attn_stack)
    n_layers = maps.shape[-3]
    if layer is None:
        layer = n_layers - 1
    if not (0 <= layer < n_layers):
        raise InputError(f"layer {layer} out of range for a {n_layers}-layer stack")
    return maps[..., layer, :, :]


def rollout_all(attn_stack):
    """Rollout maps for every layer at once, (..., L, T, T).

    One pass of the left-multiplication recursion; cheaper than calling
    `rollout` per layer when all layers are needed (layer selection,
    per-layer detection scores).
    """
    stack = np.asarray(
        attn_stack.detach().cpu().numpy() if hasattr(attn_stack, "detach") else attn_stack,
        dtype=np.float64)
    if stack.ndim < 3 or stack.shape[-1] != stack.shape[-2]:
        raise DimensionError(f"expected (..., L, T, T) stack, got shape {stack.shape}")
    n_layers = stack.shape[-3]
    if n_layers == 0:
        raise InputError("empty attention stack")
    out = np.empty_like(stack)
    acc = None
    for l in range(n_layers):
        a = normalize_layer(stack[..., l, :, :])
        acc = a if acc is None else a @ acc
        out[..., l, :, :] = acc
    return out


def cls_attention(rollout_map):
    """CLS row of a rollout map: the (N+1)-vector of attention mass the CLS
    token assigns to every token (itself included) after accumulation."""
    m = _as_square(rollout_map)
    return m[..., 0, :]


def patch_saliency(attn_stack):
    """Per-patch saliency from the final-layer rollout CLS row.

    Drops the CLS-to-CLS entry, so the result has one score per patch,
    shape (..., N). This is what the salient / non-salient masking
    strategies rank by.
    """
    final = rollout(attn_stack)
    return cls_attention(final)[..., 1:]
