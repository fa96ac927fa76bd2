"""Toy frame encoder and the multi-view self-attention uncertainty estimator.

A frame-wise MLP trunk feeds two heads: the mean head yields the frame
representations ``z_t`` directly, while the precision head reads the output
of a stack of pre-norm transformer blocks whose attention heads each see a
band of ``2**(h+1) + 1`` frames.  The precision head emits log-precision
logits; positivization happens in :mod:`uaspk.pooling`.
"""
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numkit import DTYPE, RandomStream, as_tensor

ACTIVATIONS = {
    "relu": torch.relu,
    "identity": lambda x: x,
    "tanh": torch.tanh,
}


def window_size(h, n_heads=None):
    """Temporal window of head ``h``: ``2**(h+1) + 1`` frames."""
    if h < 0 or (n_heads is not None and h >= n_heads):
        raise ValueError(f"head index {h} out of range for {n_heads} heads")
    return 2 ** (h + 1) + 1


def banded_mask(T, w, device=None):
    """Boolean T x T mask, true where ``|i - j| <= (w - 1) / 2``."""
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {w}")
    idx = torch.arange(T, device=device)
    return (idx[:, None] - idx[None, :]).abs() <= (w - 1) // 2


@dataclass
class MVAConfig:
    n_heads: int = 8
    d_model: int = 64
    d_ff: int = 128
    layers: int = 1

    def __post_init__(self):
        if self.n_heads < 1:
            raise ValueError("need at least one attention head")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by {self.n_heads} heads")

    @property
    def windows(self):
        return [window_size(h, self.n_heads) for h in range(self.n_heads)]


@dataclass
class EncoderConfig:
    feature_dim: int = 20
    trunk_widths: list = field(default_factory=lambda: [64, 64])
    trunk_activations: list = field(default_factory=lambda: ["relu", "relu"])
    embed_dim: int = 16
    mva: MVAConfig = field(default_factory=MVAConfig)
    final_norm: bool = False

    def __post_init__(self):
        if isinstance(self.mva, dict):
            self.mva = MVAConfig(**self.mva)
        if len(self.trunk_widths) != len(self.trunk_activations):
            raise ValueError("one activation tag per trunk layer")
        for tag in self.trunk_activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        width = self.trunk_widths[-1] if self.trunk_widths else self.feature_dim
        if self.mva.layers and width != self.mva.d_model:
            raise ValueError(f"trunk output width {width} != MVA d_model {self.mva.d_model}")


def attention_mask(T, w, valid=None):
    """Band mask combined with a key-padding mask.

    ``valid`` is a (B, T) boolean tensor or None.  Rows left without any
    admissible key (padded queries) fall back to attending to themselves so
    the softmax never sees an all -inf row.
    """
    band = banded_mask(T, w, device=None if valid is None else valid.device)
    if valid is None:
        return band
    mask = band[None] & valid[:, None, :]
    empty = ~mask.any(-1)
    if empty.any():
        eye = torch.eye(T, dtype=torch.bool, device=valid.device)
        mask = mask | (empty[..., None] & eye)
    return mask


class MultiViewAttention(nn.Module):
    """Multi-head self-attention where head ``h`` is restricted to a band.

    Masked logits are set to -inf before normalization, so a head's output at
    frame ``i`` does not depend on frames outside its window at all.
    """

    def __init__(self, d_model, n_heads):
        super().__init__()
        self.d_model, self.n_heads = d_model, n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.k = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.v = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.out = nn.Linear(d_model, d_model, dtype=DTYPE)

    def head_outputs(self, x, valid=None):
        """Per-head attention outputs, shape (B, H, T, d_head)."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        B, T, _ = x.shape
        if x.shape[-1] != self.d_model:
            raise ValueError(f"expected width {self.d_model}, got {x.shape[-1]}")
        split = lambda t: t.view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        heads = []
        for h in range(self.n_heads):
            mask = attention_mask(T, window_size(h), valid)
            lg = logits[:, h].masked_fill(~mask, float("-inf"))
            heads.append(torch.softmax(lg, dim=-1) @ v[:, h])
        out = torch.stack(heads, dim=1)
        return out[0] if squeeze else out

    def forward(self, x, valid=None):
        heads = self.head_outputs(x, valid)
        if heads.dim() == 3:
            return self.out(heads.transpose(0, 1).reshape(x.shape[0], self.d_model))
        B, H, T, _ = heads.shape
        return self.out(heads.transpose(1, 2).reshape(B, T, self.d_model))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MVA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, cfg: MVAConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.attn = MultiViewAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff, dtype=DTYPE)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model, dtype=DTYPE)

    def forward(self, x, valid=None):
        x = x + self.attn(self.norm1(x), valid)
        return x + self.ff2(F.relu(self.ff1(self.norm2(x))))


@dataclass
class FrameOutputs:
    z: torch.Tensor
    logit: torch.Tensor


class FrameEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.feature_dim] + list(cfg.trunk_widths)
        self.trunk = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )
        hidden = widths[-1]
        self.blocks = nn.ModuleList(TransformerBlock(cfg.mva) for _ in range(cfg.mva.layers))
        # closes the pre-norm stack; the precision head sees normalized frames
        self.final_norm = nn.LayerNorm(hidden, dtype=DTYPE) if cfg.final_norm else nn.Identity()
        self.mean_head = nn.Linear(hidden, cfg.embed_dim, dtype=DTYPE)
        self.precision_head = nn.Linear(hidden, cfg.embed_dim, dtype=DTYPE)

    def forward(self, x, valid=None):
        return encode_frames(x, self, valid)


def _finite(t, where):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite activations in {where}")
    return t


def encode_frames(features, params: FrameEncoder, valid=None):
    """Run the encoder on (T, F) or padded (B, T, F) features.

    ``valid`` marks real frames in the padded case.  Returns ``FrameOutputs``
    with ``z`` and ``logit`` shaped like the input with width ``embed_dim``.
    """
    x = as_tensor(features)
    cfg = params.cfg
    if x.shape[-1] != cfg.feature_dim:
        raise ValueError(f"feature dim {x.shape[-1]} != encoder input {cfg.feature_dim}")
    h = x
    for i, (layer, tag) in enumerate(zip(params.trunk, cfg.trunk_activations)):
        h = _finite(ACTIVATIONS[tag](layer(h)), f"trunk layer {i}")
    z = _finite(params.mean_head(h), "mean head")
    u = h
    for i, block in enumerate(params.blocks):
        u = _finite(block(u, valid), f"transformer block {i}")
    logit = _finite(params.precision_head(params.final_norm(u)), "precision head")
    return FrameOutputs(z=z, logit=logit)


def init_parameters(module: nn.Module, stream: RandomStream):
    """Deterministic initialization from a :class:`RandomStream`.

    Linear weights are uniform in +-1/sqrt(fan_in), biases zero, layer norms
    unit gain.  Parameters are visited in registration order.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            elif p.dim() == 2:
                bound = 1.0 / math.sqrt(p.shape[1])
                p.copy_(torch.from_numpy(stream.uniform(-bound, bound, size=tuple(p.shape))))
            else:
                p.copy_(torch.from_numpy(np.asarray(stream.normal(size=tuple(p.shape)))))
    return module
