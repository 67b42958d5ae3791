"""Prompt-guided adapter: cross-attention bridge, Prime/Slim blocks and the K-stage pipeline."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, GroupNorm, Linear, Module
from .tensor import DimensionError, Tensor

VARIANTS = ("prime", "slim")


def as_text_batch(text, batch: int) -> Tensor:
    """Coerce a text embedding (``n x d`` or ``B x n x d``) to a ``batch x n x d`` tensor."""
    if hasattr(text, "tokens"):
        text = text.tokens
    text = T.as_tensor(text)
    if text.ndim == 2:
        text = T.reshape(text, (1,) + text.shape)
    if text.shape[0] == batch:
        return text
    if text.shape[0] == 1:
        return T.concat([text] * batch, axis=0)
    raise DimensionError(f"text batch {text.shape[0]} does not match feature batch {batch}")


class CrossAttentionBridge(Module):
    """Single- or multi-head cross-attention from spatial features to text tokens.

    Queries are the feature map flattened to ``m = H*W`` tokens (optionally
    projected), keys and values are projections of the text embedding, and an
    output projection maps back to the feature channels. ``forward`` returns
    only the attention term; callers add the residual.
    """

    def __init__(self, channels: int, text_dim: int, attn_dim: int | None = None, heads: int = 1,
                 query_proj: bool = False, zero_init_out: bool = True, rng=None):
        attn_dim = attn_dim or channels
        if not query_proj and attn_dim != channels:
            raise DimensionError(
                f"without a query projection the attention dim must equal channels ({channels})")
        if attn_dim % heads:
            raise DimensionError(f"attention dim {attn_dim} not divisible by {heads} heads")
        self.channels, self.text_dim, self.attn_dim, self.heads = channels, text_dim, attn_dim, heads
        self.to_q = Linear(channels, attn_dim, bias=False, rng=rng) if query_proj else None
        self.to_k = Linear(text_dim, attn_dim, bias=False, rng=rng)
        self.to_v = Linear(text_dim, attn_dim, bias=False, rng=rng)
        self.to_out = Linear(attn_dim, channels, rng=rng, init="zero" if zero_init_out else "he_normal")
        # scale he_normal projections so initial logits stay O(1)
        for lin in (self.to_q, self.to_k, self.to_v):
            if lin is not None:
                lin.weight.data = lin.weight.data / math.sqrt(2.0)
        self.keep_weights = False
        self.last_weights = None

    def forward(self, feat: Tensor, text) -> Tensor:
        N, C, H, W = feat.shape
        if C != self.channels:
            raise DimensionError(f"bridge expects {self.channels} channels, got {C}")
        text = as_text_batch(text, N)
        if text.shape[-1] != self.text_dim:
            raise DimensionError(f"text dim {text.shape[-1]} != bridge text dim {self.text_dim}")
        n = text.shape[1]
        m = H * W
        h, dh = self.heads, self.attn_dim // self.heads
        x = T.transpose(T.reshape(feat, (N, C, m)), (0, 2, 1))
        q = self.to_q(x) if self.to_q is not None else x
        k = self.to_k(text)
        v = self.to_v(text)
        if h > 1:
            q = T.reshape(T.transpose(T.reshape(q, (N, m, h, dh)), (0, 2, 1, 3)), (N * h, m, dh))
            k = T.reshape(T.transpose(T.reshape(k, (N, n, h, dh)), (0, 2, 1, 3)), (N * h, n, dh))
            v = T.reshape(T.transpose(T.reshape(v, (N, n, h, dh)), (0, 2, 1, 3)), (N * h, n, dh))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        weights = T.softmax_rows(scores)
        if self.keep_weights:
            self.last_weights = weights.data
        mixed = T.matmul(weights, v)
        if h > 1:
            mixed = T.reshape(T.transpose(T.reshape(mixed, (N, h, m, dh)), (0, 2, 1, 3)),
                              (N, m, self.attn_dim))
        out = self.to_out(mixed)
        return T.reshape(T.transpose(out, (0, 2, 1)), (N, C, H, W))


class PrimeBlock(Module):
    """Two dense sub-blocks (3x3 conv, ReLU, 1x1 conv), norm, then prompt cross-attention."""

    def __init__(self, in_channels: int, out_channels: int, text_dim: int, attn_dim=None,
                 heads: int = 1, query_proj: bool = False, zero_init_attn_out: bool = True,
                 input_residual: bool = False, rng=None):
        self.in_channels, self.out_channels = in_channels, out_channels
        c = out_channels
        self.entry = Conv2d(in_channels, c, 1, rng=rng) if in_channels != c else None
        self.conv3a = Conv2d(c, c, 3, rng=rng)
        self.conv1a = Conv2d(c, c, 1, rng=rng)
        self.conv3b = Conv2d(c, c, 3, rng=rng)
        self.conv1b = Conv2d(c, c, 1, rng=rng)
        self.norm = GroupNorm(c)
        self.attn = CrossAttentionBridge(c, text_dim, attn_dim, heads, query_proj,
                                         zero_init_attn_out, rng=rng)
        self.input_residual = input_residual

    def forward(self, x: Tensor, text) -> Tensor:
        x = self.entry(x) if self.entry is not None else x
        p1 = T.relu(self.conv3a(x))
        p2 = self.conv1a(p1)
        p3 = T.relu(self.conv3b(p2))
        p4 = self.conv1b(p3)
        fn = self.norm(p4)
        out = fn + self.attn(fn, text)
        return out + x if self.input_residual else out


class SlimBlock(Module):
    """Two grouped transformation units (grouped 3x3, 1x1, ReLU, 1x1), norm, then cross-attention.

    Unit one keeps the ``ReLU(S1 + S2)`` skip around its first pointwise conv.
    """

    def __init__(self, in_channels: int, out_channels: int, text_dim: int, groups: int = 2,
                 attn_dim=None, heads: int = 1, query_proj: bool = False,
                 zero_init_attn_out: bool = True, input_residual: bool = False, rng=None):
        self.in_channels, self.out_channels, self.groups = in_channels, out_channels, groups
        c = out_channels
        self.entry = Conv2d(in_channels, c, 1, rng=rng) if in_channels != c else None
        self.dwconv = Conv2d(c, c, 3, groups=groups, rng=rng)
        self.pw1 = Conv2d(c, c, 1, rng=rng)
        self.pw2 = Conv2d(c, c, 1, rng=rng)
        self.dwconv2 = Conv2d(c, c, 3, groups=groups, rng=rng)
        self.pw3 = Conv2d(c, c, 1, rng=rng)
        self.pw4 = Conv2d(c, c, 1, rng=rng)
        self.norm = GroupNorm(c)
        self.attn = CrossAttentionBridge(c, text_dim, attn_dim, heads, query_proj,
                                         zero_init_attn_out, rng=rng)
        self.input_residual = input_residual

    def forward(self, x: Tensor, text) -> Tensor:
        x = self.entry(x) if self.entry is not None else x
        s1 = self.dwconv(x)
        s2 = self.pw1(s1)
        s3 = T.relu(s1 + s2)
        s4 = self.pw2(s3)
        s5 = T.relu(self.pw3(self.dwconv2(s4)))
        s6 = self.pw4(s5)
        fn = self.norm(s6)
        out = fn + self.attn(fn, text)
        return out + x if self.input_residual else out


@dataclass
class AdapterConfig:
    variant: str = "prime"
    stages: int = 4
    channels: list = field(default_factory=lambda: [32, 64, 128, 128])
    unshuffle: int = 8
    groups: int = 2
    attn_dim: object = "channels"
    heads: int = 1
    query_proj: bool = False
    zero_init_attn_out: bool = True
    input_residual: bool = False
    text_dim: int = 64
    in_channels: int = 3

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 <= self.stages <= 4:
            raise ValueError(f"stages must be in 0..4, got {self.stages}")
        if len(self.channels) != self.stages:
            raise ValueError(f"channel schedule {self.channels} has length != stages={self.stages}")
        for k in range(1, self.stages):
            want = self.channels[k - 1] * (2 if k < 3 else 1)
            if self.channels[k] != want:
                raise ValueError(
                    f"schedule {self.channels} breaks the doubled/doubled/equal pattern at stage {k + 1}")
        if self.attn_dim != "channels" and not isinstance(self.attn_dim, int):
            raise ValueError("attn_dim must be 'channels' or an int")
        if self.variant == "slim":
            for c in self.channels:
                if c % self.groups:
                    raise ValueError(f"{c} channels not divisible by groups={self.groups}")

    def stage_attn_dim(self, c: int) -> int:
        return c if self.attn_dim == "channels" else int(self.attn_dim)

    @property
    def input_stage_channels(self) -> int:
        return self.in_channels * self.unshuffle ** 2

    @property
    def divisor(self) -> int:
        return self.unshuffle * 2 ** max(self.stages - 1, 0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown AdapterConfig keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "AdapterConfig":
        return cls.from_dict(json.loads(text))


class Adapter(Module):
    """Pixel unshuffle, then K blocks separated by depthwise strided 3x3 downsamples."""

    def __init__(self, cfg: AdapterConfig, rng=None):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng or 0)
        self.cfg = cfg
        self.blocks = []
        self.downs = []
        prev = cfg.input_stage_channels
        for k, c in enumerate(cfg.channels):
            kw = dict(attn_dim=cfg.stage_attn_dim(c), heads=cfg.heads, query_proj=cfg.query_proj,
                      zero_init_attn_out=cfg.zero_init_attn_out,
                      input_residual=cfg.input_residual, rng=rng)
            if cfg.variant == "prime":
                self.blocks.append(PrimeBlock(prev, c, cfg.text_dim, **kw))
            else:
                self.blocks.append(SlimBlock(prev, c, cfg.text_dim, groups=cfg.groups, **kw))
            if k < cfg.stages - 1:
                self.downs.append(Conv2d(c, c, 3, stride=2, groups=c, rng=rng))
            prev = c

    def bridges(self) -> list[CrossAttentionBridge]:
        return [b.attn for b in self.blocks]

    def forward(self, cond: Tensor, text) -> list[Tensor]:
        cfg = self.cfg
        if cond.ndim == 3:
            cond = T.reshape(cond, (1,) + cond.shape)
        N, C, H, W = cond.shape
        if C != cfg.in_channels:
            raise DimensionError(f"condition has {C} channels, adapter expects {cfg.in_channels}")
        if H % cfg.divisor or W % cfg.divisor:
            raise DimensionError(
                f"condition {H}x{W} must be divisible by {cfg.divisor} "
                f"(unshuffle {cfg.unshuffle} x 2^{cfg.stages - 1})")
        text = as_text_batch(text, N)
        x = T.pixel_unshuffle(cond, cfg.unshuffle)
        feats = []
        for k, block in enumerate(self.blocks):
            e = block(x, text)
            feats.append(e)
            if k < len(self.downs):
                x = self.downs[k](e)
        return feats


def adapter_forward(cfg_or_adapter, cond: Tensor, text) -> list[Tensor]:
    adapter = cfg_or_adapter if isinstance(cfg_or_adapter, Adapter) else Adapter(cfg_or_adapter)
    return adapter(cond, text)
