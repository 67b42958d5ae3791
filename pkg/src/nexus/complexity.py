"""Closed-form parameter and multiply-accumulate counts for adapter configurations.

Counts follow the layer list that :class:`nexus.adapter.Adapter` instantiates,
so the totals can be cross-checked against a built model. Norm layers carry
parameters but no MACs. ``flop_factor`` converts MACs to reported FLOPs: 1
counts one multiply-accumulate as one FLOP, 2 counts it as two.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

from .adapter import AdapterConfig

DEFAULT_FLOP_FACTOR = 1


@dataclass
class LayerCount:
    name: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    rows: list = field(default_factory=list)
    resolution: int = 512
    n_text: int = 77
    flop_factor: int = DEFAULT_FLOP_FACTOR
    config: dict = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    @property
    def gflops(self) -> float:
        return self.flop_factor * self.total_macs / 1e9

    def add(self, name: str, params: int, macs: int) -> None:
        self.rows.append(LayerCount(name, int(params), int(macs)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "macs"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.macs])
        w.writerow(["total", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'MACs':>16}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>12,d}  {r.macs:>16,d}")
        lines.append(f"{'total':<{width}}  {self.total_params:>12,d}  {self.total_macs:>16,d}")
        lines.append(f"params {self.params_m:.2f}M  GFLOPs {self.gflops:.2f} "
                     f"(flop_factor={self.flop_factor}, input {self.resolution}x{self.resolution}, "
                     f"{self.n_text} text tokens)")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "total_params": self.total_params,
                "total_macs": self.total_macs, "gflops": self.gflops,
                "resolution": self.resolution, "n_text": self.n_text,
                "flop_factor": self.flop_factor, "config": self.config}


def conv_params(cin: int, cout: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def conv_macs(cin: int, cout: int, k: int, out_h: int, out_w: int, groups: int = 1) -> int:
    return cout * out_h * out_w * (cin // groups) * k * k


def _conv(rep, name, cin, cout, k, hw, groups=1, bias=True):
    rep.add(name, conv_params(cin, cout, k, groups, bias), conv_macs(cin, cout, k, hw, hw, groups))


def analyze(cfg: AdapterConfig, resolution: int = 512, n_text: int = 77,
            flop_factor: int = DEFAULT_FLOP_FACTOR) -> ComplexityReport:
    """Per-layer parameters and MACs of ``Adapter(cfg)`` on a ``resolution``-square input."""
    if cfg.stages and resolution % cfg.divisor:
        raise ValueError(f"resolution {resolution} must be divisible by {cfg.divisor}")
    rep = ComplexityReport(resolution=resolution, n_text=n_text, flop_factor=flop_factor,
                           config=asdict(cfg))
    hw = resolution // cfg.unshuffle
    prev = cfg.input_stage_channels
    d = cfg.text_dim
    for k, c in enumerate(cfg.channels):
        pre = f"blocks.{k}"
        m = hw * hw
        if prev != c:
            _conv(rep, f"{pre}.entry", prev, c, 1, hw)
        if cfg.variant == "prime":
            for nm, kk in (("conv3a", 3), ("conv1a", 1), ("conv3b", 3), ("conv1b", 1)):
                _conv(rep, f"{pre}.{nm}", c, c, kk, hw)
        else:
            G = cfg.groups
            for nm, kk, g in (("dwconv", 3, G), ("pw1", 1, 1), ("pw2", 1, 1),
                              ("dwconv2", 3, G), ("pw3", 1, 1), ("pw4", 1, 1)):
                _conv(rep, f"{pre}.{nm}", c, c, kk, hw, g)
        rep.add(f"{pre}.norm", 2 * c, 0)
        da = cfg.stage_attn_dim(c)
        if cfg.query_proj:
            rep.add(f"{pre}.attn.to_q", c * da, m * c * da)
        rep.add(f"{pre}.attn.to_k", d * da, n_text * d * da)
        rep.add(f"{pre}.attn.to_v", d * da, n_text * d * da)
        rep.add(f"{pre}.attn.scores", 0, m * n_text * da)
        rep.add(f"{pre}.attn.mix", 0, m * n_text * da)
        rep.add(f"{pre}.attn.to_out", da * c + c, m * da * c)
        if k < cfg.stages - 1:
            hw //= 2
            _conv(rep, f"downs.{k}", c, c, 3, hw, groups=c)
        prev = c
    return rep


def count_params(cfg: AdapterConfig, d_text: int | None = None, **kw) -> ComplexityReport:
    if d_text is not None and d_text != cfg.text_dim:
        cfg = AdapterConfig(**{**asdict(cfg), "text_dim": d_text})
    return analyze(cfg, **kw)


def count_flops(cfg: AdapterConfig, resolution: int = 512, d_text: int | None = None,
                **kw) -> ComplexityReport:
    return count_params(cfg, d_text, resolution=resolution, **kw)


def grouped_share(cfg: AdapterConfig) -> int:
    """Weights of the grouped convolutions at G=1; the total is ``A + grouped_share / G``."""
    if cfg.variant != "slim":
        return 0
    return sum(2 * 9 * c * c for c in cfg.channels)


FULL_CHANNELS = [320, 640, 1280, 1280]


def preset(name: str) -> AdapterConfig:
    if name == "prime-full":
        return AdapterConfig("prime", 4, list(FULL_CHANNELS), 8, text_dim=768)
    if name == "slim-full":
        return AdapterConfig("slim", 4, list(FULL_CHANNELS), 8, groups=2, text_dim=768)
    raise KeyError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


PRESET_NAMES = ("prime-full", "slim-full", "t2i-full")


def t2i_reference_count(channels=FULL_CHANNELS, unshuffle: int = 8, resolution: int = 512,
                        res_blocks: int = 2, flop_factor: int = DEFAULT_FLOP_FACTOR) -> ComplexityReport:
    """Cost model of the full T2I-Adapter: 3x3 stem, per scale (avg-pool down, 1x1 channel
    map on change, ``res_blocks`` x (3x3, ReLU, 1x1) residual blocks)."""
    rep = ComplexityReport(resolution=resolution, n_text=0, flop_factor=flop_factor,
                           config={"model": "t2i-adapter", "channels": list(channels),
                                   "unshuffle": unshuffle, "res_blocks": res_blocks})
    hw = resolution // unshuffle
    _conv(rep, "conv_in", 3 * unshuffle ** 2, channels[0], 3, hw)
    prev = channels[0]
    for k, c in enumerate(channels):
        if k > 0:
            hw //= 2
        if prev != c:
            _conv(rep, f"body.{k}.in_conv", prev, c, 1, hw)
        for j in range(res_blocks):
            _conv(rep, f"body.{k}.resnets.{j}.block1", c, c, 3, hw)
            _conv(rep, f"body.{k}.resnets.{j}.block2", c, c, 1, hw)
        prev = c
    return rep


def report_for(name: str, resolution: int = 512, flop_factor: int = DEFAULT_FLOP_FACTOR) -> ComplexityReport:
    if name == "t2i-full":
        return t2i_reference_count(resolution=resolution, flop_factor=flop_factor)
    return analyze(preset(name), resolution=resolution, n_text=77, flop_factor=flop_factor)
