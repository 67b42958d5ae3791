"""Small denoising UNet with timestep embedding, text cross-attention and additive fusion points."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adapter import CrossAttentionBridge, as_text_batch
from .nn import Conv2d, GroupNorm, Linear, Module
from .tensor import DimensionError, Tensor


@dataclass
class UNetConfig:
    base: int = 32
    mults: list = field(default_factory=lambda: [1, 2, 4, 4])
    res_blocks: int = 2
    attn_scales: list = field(default_factory=lambda: [3, 4])
    time_dim: int = 128
    image_channels: int = 3
    image_size: int = 32
    patch: int = 1
    text_dim: int = 64
    heads: int = 1

    def __post_init__(self):
        self.mults = [int(m) for m in self.mults]
        self.attn_scales = [int(s) for s in self.attn_scales]
        if self.image_size % (self.patch * 2 ** (len(self.mults) - 1)):
            raise ValueError(f"image_size {self.image_size} not divisible by "
                             f"patch*2^(scales-1) = {self.patch * 2 ** (len(self.mults) - 1)}")
        if any(s < 1 or s > len(self.mults) for s in self.attn_scales):
            raise ValueError(f"attn_scales {self.attn_scales} outside 1..{len(self.mults)}")

    @property
    def channels(self) -> list[int]:
        return [self.base * m for m in self.mults]

    def scale_shapes(self) -> list[tuple[int, int, int]]:
        """``(C, H, W)`` of the encoder activation U^k at each scale."""
        s = self.image_size // self.patch
        return [(c, s >> k, s >> k) for k, c in enumerate(self.channels)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise KeyError(f"unknown UNetConfig keys: {unknown}")
        return cls(**d)


def _norm_groups(c: int) -> int:
    return math.gcd(8, c)


def timestep_features(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class TimestepEmbedding(Module):
    def __init__(self, dim: int, out_dim: int, rng=None):
        self.dim = dim
        self.fc1 = Linear(dim, out_dim, rng=rng)
        self.fc2 = Linear(out_dim, out_dim, rng=rng)

    def forward(self, t) -> Tensor:
        feats = Tensor(timestep_features(t, self.dim).astype(self.fc1.weight.dtype))
        return self.fc2(T.silu(self.fc1(feats)))


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, rng=None):
        self.norm1 = GroupNorm(cin, _norm_groups(cin))
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.temb = Linear(temb_dim, cout, rng=rng)
        self.norm2 = GroupNorm(cout, _norm_groups(cout))
        self.conv2 = Conv2d(cout, cout, 3, rng=rng, init="zero")
        self.skip = Conv2d(cin, cout, 1, rng=rng) if cin != cout else None
        self.cout = cout

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        h = h + T.reshape(self.temb(T.silu(temb)), (x.shape[0], self.cout, 1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class TextAttention(Module):
    """Pre-norm text cross-attention with a residual connection."""

    def __init__(self, channels: int, text_dim: int, heads: int = 1, rng=None):
        self.norm = GroupNorm(channels, _norm_groups(channels))
        self.attn = CrossAttentionBridge(channels, text_dim, channels, heads, query_proj=True,
                                         zero_init_out=True, rng=rng)

    def forward(self, x: Tensor, text: Tensor) -> Tensor:
        return x + self.attn(self.norm(x), text)


class UNet(Module):
    """Encoder/decoder over ``len(mults)`` scales.

    The encoder activation at the entry of scale k (right after the stem or the
    strided downsample) is ``U^k``; adapter features are added there.
    """

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        ch = cfg.channels
        tdim = cfg.time_dim
        self.time_embed = TimestepEmbedding(tdim, tdim, rng=rng)
        cin = cfg.image_channels * cfg.patch ** 2
        self.stem = Conv2d(cin, ch[0], 3, rng=rng)
        self.downs = [Conv2d(ch[k - 1], ch[k], 3, stride=2, rng=rng) for k in range(1, len(ch))]
        self.enc_blocks, self.enc_attn = [], []
        skip_ch = [ch[0]]
        for k, c in enumerate(ch):
            for _ in range(cfg.res_blocks):
                self.enc_blocks.append(ResBlock(c, c, tdim, rng=rng))
                self.enc_attn.append(self._attn(k, c, rng))
                skip_ch.append(c)
            if k < len(ch) - 1:
                skip_ch.append(ch[k + 1])
        self.mid1 = ResBlock(ch[-1], ch[-1], tdim, rng=rng)
        self.mid_attn = TextAttention(ch[-1], cfg.text_dim, cfg.heads, rng=rng)
        self.mid2 = ResBlock(ch[-1], ch[-1], tdim, rng=rng)
        self.dec_blocks, self.dec_attn, self.ups = [], [], []
        cur = ch[-1]
        for k in reversed(range(len(ch))):
            for _ in range(cfg.res_blocks + 1):
                self.dec_blocks.append(ResBlock(cur + skip_ch.pop(), ch[k], tdim, rng=rng))
                self.dec_attn.append(self._attn(k, ch[k], rng))
                cur = ch[k]
            if k > 0:
                self.ups.append(Conv2d(cur, cur, 3, rng=rng))
        self.out_norm = GroupNorm(ch[0], _norm_groups(ch[0]))
        if cfg.patch > 1:
            # predict sub-pixel features, then a full-resolution conv mixes neighbouring
            # sub-pixels (predicting them as independent channels leaves a period-p grid)
            self.out_conv = Conv2d(ch[0], ch[0] * cfg.patch ** 2, 3, rng=rng)
            self.refine = Conv2d(ch[0], cfg.image_channels, 3, rng=rng, init="zero")
        else:
            self.out_conv = Conv2d(ch[0], cin, 3, rng=rng, init="zero")

    def _attn(self, k: int, c: int, rng):
        return TextAttention(c, self.cfg.text_dim, self.cfg.heads, rng=rng) \
            if (k + 1) in self.cfg.attn_scales else None

    def freeze(self, flag: bool = True) -> "UNet":
        self.requires_grad_(not flag)
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def forward(self, x_t: Tensor, t, text, E: list | None = None, capture: dict | None = None) -> Tensor:
        cfg = self.cfg
        N = x_t.shape[0]
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (N,))
        text = as_text_batch(text, N)
        temb = self.time_embed(t)
        nk = len(cfg.channels)
        if E is not None and len(E) != nk:
            raise DimensionError(f"expected {nk} adapter features, got {len(E)}")
        h = self.stem(T.pixel_unshuffle(x_t, cfg.patch) if cfg.patch > 1 else x_t)
        skips = []
        bi = 0
        for k in range(nk):
            if k > 0:
                h = self.downs[k - 1](h)
            h = self._fuse(h, k, E, capture)
            skips.append(h)
            for _ in range(cfg.res_blocks):
                h = self.enc_blocks[bi](h, temb)
                if self.enc_attn[bi] is not None:
                    h = self.enc_attn[bi](h, text)
                skips.append(h)
                bi += 1
        h = self.mid2(self.mid_attn(self.mid1(h, temb), text), temb)
        bi = 0
        for k in reversed(range(nk)):
            for _ in range(cfg.res_blocks + 1):
                h = self.dec_blocks[bi](T.concat([h, skips.pop()], axis=1), temb)
                if self.dec_attn[bi] is not None:
                    h = self.dec_attn[bi](h, text)
                bi += 1
            if k > 0:
                h = self.ups[nk - 1 - k](T.upsample_nearest(h, 2))
        out = self.out_conv(T.silu(self.out_norm(h)))
        if cfg.patch > 1:
            out = self.refine(T.silu(T.pixel_shuffle(out, cfg.patch)))
        return out

    @staticmethod
    def _fuse(u: Tensor, k: int, E, capture):
        if capture is not None:
            capture[f"U{k + 1}"] = u.data.copy()
        if E is None:
            return u
        e = E[k]
        if e.shape != u.shape:
            raise DimensionError(
                f"fusion at scale {k + 1}: adapter feature {e.shape} != backbone activation {u.shape}")
        fused = u + e
        if capture is not None:
            capture[f"Uhat{k + 1}"] = fused.data.copy()
        return fused


def freeze_backbone(model: UNet, flag: bool = True) -> UNet:
    return model.freeze(flag)
