"""Toy pipeline: text-encoder pretraining, backbone pretraining, adapter training and evaluation.

Every stage is cached under an artifact directory, keyed by its resolved
configuration and a hash of the package sources, so reruns are free and any
code change retrains.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapter import Adapter, AdapterConfig
from .data import Dataset, generate, parse_caption
from .diffusion import Denoiser, DiffusionSchedule, TrainConfig, TrainState, ddpm_loss, p_sample_loop, train
from .metrics import EvalReport, color_accuracy, edge_f1, frechet_fixed_features
from .nn import load_checkpoint, save_checkpoint
from .text import COLORS, TextEncoder
from .unet import UNet, UNetConfig

DEFAULT_ROOT = Path(os.environ.get("NEXUS_ARTIFACTS", Path.cwd() / "artifacts"))


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def apply_numerics(cfg: TrainConfig) -> None:
    T.set_default_dtype(np.dtype(cfg.dtype))
    try:
        T.set_conv_backend(cfg.conv_backend)
    except ImportError:
        # torch is an optional extra; the numpy kernel gives the same results, slower
        T.set_conv_backend("numpy")


@dataclass
class ToySetup:
    """Everything shared by the backbone and its adapters."""

    n_train: int = 5000
    n_eval: int = 200
    size: int = 32
    kind: str = "edge"
    data_seed: int = 0
    eval_seed: int = 1
    text_seed: int = 0
    text_steps: int = 3000
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(
        base=16, mults=[1, 2, 4, 4], res_blocks=1, attn_scales=[3, 4], time_dim=64,
        image_size=32, patch=2, text_dim=64))
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=12000, lr=5e-4, warmup=200, batch=32, seed=0))

    def adapter_config(self, variant="prime", groups=2, stages=4) -> AdapterConfig:
        ch = self.unet.channels
        return AdapterConfig(variant=variant, stages=stages, channels=ch[:stages],
                             unshuffle=self.unet.patch, groups=groups, text_dim=self.unet.text_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdapterRun:
    variant: str = "prime"
    groups: int = 2
    stages: int = 4
    prompt_to_adapter: bool = True
    prompt_to_backbone: bool = True
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=3000, lr=5e-4, warmup=100, batch=32, seed=0))


class Pipeline:
    def __init__(self, setup: ToySetup | None = None, root=None, log=print):
        self.setup = setup or ToySetup()
        self.root = Path(root or DEFAULT_ROOT)
        self.root.mkdir(parents=True, exist_ok=True)
        self.log = log
        self.src = source_hash()
        self._train = self._eval = self._encoder = None
        self._text_cache: dict = {}

    # -- shared pieces ---------------------------------------------------
    @property
    def train_set(self) -> Dataset:
        if self._train is None:
            s = self.setup
            self._train = generate(s.n_train, s.kind, s.data_seed, s.size)
        return self._train

    @property
    def eval_set(self) -> Dataset:
        if self._eval is None:
            s = self.setup
            self._eval = generate(s.n_eval, s.kind, s.eval_seed, s.size)
        return self._eval

    @property
    def encoder(self) -> TextEncoder:
        if self._encoder is None:
            s = self.setup
            path = self.root / f"text-{_key(s.text_seed, s.text_steps, self.src)}.nxc"
            if path.exists():
                self._encoder = TextEncoder.load(path)
            else:
                from .data import caption_corpus

                enc = TextEncoder(seed=s.text_seed)
                enc.pretrain_and_freeze(caption_corpus(2000, seed=s.text_seed), steps=s.text_steps,
                                        seed=s.text_seed)
                enc.save(path)
                self._encoder = enc
        return self._encoder

    def texts(self, captions, dtype) -> np.ndarray:
        return np.stack([self._text(c) for c in captions]).astype(dtype)

    def _text(self, cap: str) -> np.ndarray:
        if cap not in self._text_cache:
            self._text_cache[cap] = self.encoder.encode(cap).tokens.data
        return self._text_cache[cap]

    def null_text(self, dtype) -> np.ndarray:
        return self._text("").astype(dtype)

    # -- backbone --------------------------------------------------------
    def backbone_path(self) -> Path:
        s = self.setup
        return self.root / f"backbone-{_key(s.to_dict(), self.src)}.nxc"

    def backbone(self) -> UNet:
        s = self.setup
        cfg = s.pretrain
        apply_numerics(cfg)
        unet = UNet(s.unet, seed=cfg.seed).astype(np.dtype(cfg.dtype))
        path = self.backbone_path()
        if path.exists():
            load_checkpoint(path, {"unet": unet})
            return unet.freeze()
        ds = self.train_set
        images = ds.images.astype(cfg.dtype)
        texts = self.texts(ds.captions, cfg.dtype)
        null = self.null_text(cfg.dtype)
        sched = DiffusionSchedule(cfg.T)
        model = Denoiser(unet, None, null)

        def loss_fn(rng):
            idx = rng.integers(0, len(ds), cfg.batch)
            return ddpm_loss(model, images[idx], texts[idx], None, rng, sched, cfg.cond_dropout, null)

        state = TrainState(cfg)
        t0 = time.time()
        self.log(f"pretraining backbone ({unet.num_parameters()} params, {cfg.steps} steps)")
        train(dict(unet.named_parameters()), loss_fn, state, cfg.steps, log_every=500, log=self.log)
        save_checkpoint(path, {"unet": unet}, {"losses": state.losses, "seconds": time.time() - t0,
                                               "setup": s.to_dict()})
        return unet.freeze()

    # -- adapters --------------------------------------------------------
    def adapter_path(self, run: AdapterRun) -> Path:
        return self.root / f"adapter-{_key(self.setup.to_dict(), asdict(run), self.src)}.nxc"

    def denoiser(self, run: AdapterRun) -> Denoiser:
        s = self.setup
        cfg = run.train
        unet = self.backbone()
        apply_numerics(cfg)
        acfg = s.adapter_config(run.variant, run.groups, run.stages)
        adapter = Adapter(acfg, rng=cfg.seed).astype(np.dtype(cfg.dtype))
        null = self.null_text(cfg.dtype)
        model = Denoiser(unet, adapter, null, prompt_to_adapter=run.prompt_to_adapter)
        if acfg.stages < len(s.unet.channels):
            model.adapter = _PaddedAdapter(adapter, s.unet.scale_shapes())
        path = self.adapter_path(run)
        if path.exists():
            load_checkpoint(path, {"adapter": adapter})
            return model
        ds = self.train_set
        images = ds.images.astype(cfg.dtype)
        conds = ds.conditions.astype(cfg.dtype)
        texts = self.texts(ds.captions, cfg.dtype)
        if not run.prompt_to_backbone:
            texts = np.broadcast_to(null, texts.shape).copy()
        sched = DiffusionSchedule(cfg.T)

        def loss_fn(rng):
            idx = rng.integers(0, len(ds), cfg.batch)
            return ddpm_loss(model, images[idx], texts[idx], T.Tensor(conds[idx]), rng, sched,
                             cfg.cond_dropout, null)

        state = TrainState(cfg)
        t0 = time.time()
        self.log(f"training adapter {asdict(run)['variant']} G={run.groups} K={run.stages} "
                 f"p2a={run.prompt_to_adapter} seed={cfg.seed} ({adapter.num_parameters()} params)")
        train(dict(adapter.named_parameters()), loss_fn, state, cfg.steps, log_every=500, log=self.log)
        save_checkpoint(path, {"adapter": adapter}, {"losses": state.losses, "seconds": time.time() - t0,
                                                     "run": asdict(run)})
        return model

    # -- evaluation ------------------------------------------------------
    def evaluate(self, run: AdapterRun | None, n: int | None = None, guidance: float | None = None,
                 steps: int | None = None, seed: int = 0, batch: int = 100) -> EvalReport:
        """Sample from the eval conditions and score; ``run=None`` samples the bare backbone unconditionally."""
        s = self.setup
        cfg = run.train if run is not None else s.pretrain
        key = _key(s.to_dict(), asdict(run) if run else None, n, guidance, steps, seed, self.src)
        path = self.root / f"eval-{key}.json"
        if path.exists():
            d = json.loads(path.read_text())
            return EvalReport(**d)
        guidance = cfg.guidance if guidance is None else guidance
        steps = cfg.sample_steps if steps is None else steps
        ds = self.eval_set
        n = n or len(ds)
        if run is None:
            model = Denoiser(self.backbone(), None, self.null_text(s.pretrain.dtype))
        else:
            model = self.denoiser(run)
        dtype = cfg.dtype
        texts = self.texts(ds.captions[:n], dtype)
        if run is not None and not run.prompt_to_backbone:
            texts = np.broadcast_to(self.null_text(dtype), texts.shape).copy()
        sched = DiffusionSchedule(cfg.T)
        t0 = time.time()
        outs = []
        for a in range(0, n, batch):
            b = min(n, a + batch)
            if run is None:
                img = p_sample_loop(model, None, None, steps, guidance, seed + a, sched,
                                    shape=(b - a, 3, s.size, s.size))
            else:
                img = p_sample_loop(model, ds.conditions[a:b].astype(dtype), texts[a:b], steps,
                                    guidance, seed + a, sched)
            outs.append(img)
        gen = np.concatenate(outs)
        rng = np.random.default_rng(seed + 7)
        f1 = [edge_f1(gen[i], ds.conditions[i]) for i in range(n)]
        col = [color_accuracy(gen[i], ds.scenes[i], ds.captions[i]) for i in range(n)]
        scrambled = [color_accuracy(gen[i], ds.scenes[i], _scramble(ds.captions[i], rng)) for i in range(n)]
        fd = frechet_fixed_features(gen, ds.images[:n])
        rep = EvalReport(float(np.mean(f1)), float(np.mean(col)), fd, n,
                         config={"run": asdict(run) if run else None, "guidance": guidance,
                                 "steps": steps, "seed": seed},
                         extra={"color_accuracy_scrambled": float(np.mean(scrambled)),
                                "seconds": time.time() - t0})
        path.write_text(json.dumps(rep.to_dict(), indent=1))
        np.save(self.root / f"samples-{key}.npy", gen[:16])
        return rep


def _scramble(caption: str, rng) -> str:
    """Replace every colour word with an independently drawn colour."""
    return " ".join(COLORS[int(rng.integers(len(COLORS)))] if parse_caption(f"{w} circle") else w
                    for w in caption.split())


class _PaddedAdapter:
    """Adapter with fewer stages than backbone scales: missing scales receive zero features."""

    def __init__(self, adapter: Adapter, shapes):
        self.inner = adapter
        self.shapes = shapes
        self.cfg = adapter.cfg

    def __call__(self, cond, text):
        feats = self.inner(cond, text)
        N = feats[0].shape[0]
        dtype = feats[0].dtype
        for c, h, w in self.shapes[len(feats):]:
            feats.append(T.Tensor(np.zeros((N, c, h, w), dtype=dtype)))
        return feats

    def parameters(self):
        return self.inner.parameters()

    def named_parameters(self, prefix=""):
        return self.inner.named_parameters(prefix)
