"""Noise schedule, training loss, guided ancestral sampling and the AdamW training loop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .io import read_container, write_container
from .nn import Module, Parameter
from .tensor import NumericError, Tensor


class NumericAbort(NumericError):
    """Training hit a non-finite gradient or loss."""

    def __init__(self, what: str):
        self.what = what
        super().__init__(f"non-finite value in {what}; aborting")


# ---------------------------------------------------------------- schedule

@dataclass
class DiffusionSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unsupported schedule {self.kind!r}")
        if self.T < 2:
            raise ValueError("T must be at least 2")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)
        self.alpha_bar_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.posterior_var = self.betas * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise IndexError(f"timestep out of range [0, {self.T}): {t}")
        return t

    def sampling_timesteps(self, steps: int) -> np.ndarray:
        """Descending, evenly strided subset of ``steps`` timesteps ending at 0."""
        if steps < 1 or steps > self.T:
            raise IndexError(f"sampling steps must be in [1, {self.T}], got {steps}")
        return np.unique(np.round(np.linspace(0, self.T - 1, steps)).astype(np.int64))[::-1]


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def q_sample(sched: DiffusionSchedule, x0, t, eps):
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; arrays or Tensors."""
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    ed = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if x0d.shape != ed.shape:
        raise T.DimensionError(f"eps shape {ed.shape} != x0 shape {x0d.shape}")
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    if t.ndim == 1 and x0d.ndim > 1:
        ab = _bcast(ab, x0d.ndim)
    out = np.sqrt(ab) * x0d + np.sqrt(1.0 - ab) * ed
    out = out.astype(x0d.dtype, copy=False)
    return Tensor(out) if isinstance(x0, Tensor) else out


# ---------------------------------------------------------------- model wrapper

class Denoiser(Module):
    """Backbone UNet plus optional adapter; ``forward`` predicts the noise.

    ``prompt_to_adapter=False`` feeds the adapter the null (all-PAD) embedding
    instead of the prompt.
    """

    def __init__(self, unet, adapter=None, null_text=None, prompt_to_adapter: bool = True):
        self.unet = unet
        self.adapter = adapter
        self.null_text = null_text
        self.prompt_to_adapter = prompt_to_adapter

    def adapter_features(self, cond, text):
        if self.adapter is None or cond is None:
            return None
        if not self.prompt_to_adapter:
            text = self.null_text
        return self.adapter(cond, text)

    def forward(self, x_t, t, text, cond=None, E=None):
        if E is None:
            E = self.adapter_features(cond, text)
        return self.unet(x_t, t, text, E=E)


def _rows(text, n: int) -> np.ndarray:
    d = text.data if isinstance(text, Tensor) else np.asarray(text)
    if d.ndim == 2:
        d = np.broadcast_to(d, (n,) + d.shape)
    return d


def ddpm_loss(model, x0, text, cond=None, rng=None, sched: DiffusionSchedule | None = None,
              cond_dropout: float = 0.1, null_text=None, noise=None, t=None) -> Tensor:
    """Mean squared error between sampled noise and the model's prediction.

    ``model(x_t, t, text, cond)`` returns the noise estimate. With probability
    ``cond_dropout`` per sample the text given to the model is replaced by
    ``null_text`` (the adapter still sees the prompt).
    """
    sched = sched or DiffusionSchedule()
    rng = rng if rng is not None else np.random.default_rng(0)
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    N = x0d.shape[0]
    if t is None:
        t = rng.integers(0, sched.T, N)
    if noise is None:
        noise = rng.standard_normal(x0d.shape).astype(x0d.dtype)
    noise = noise.data if isinstance(noise, Tensor) else np.asarray(noise)
    x_t = Tensor(q_sample(sched, x0d, t, noise))
    text_rows = _rows(text, N)
    adapter_text = Tensor(text_rows)
    if cond_dropout > 0 and null_text is not None:
        drop = rng.random(N) < cond_dropout
        if drop.any():
            nd = null_text.data if isinstance(null_text, Tensor) else np.asarray(null_text)
            text_rows = np.where(drop[:, None, None], nd[None].astype(text_rows.dtype), text_rows)
    backbone_text = Tensor(np.ascontiguousarray(text_rows))
    if isinstance(model, Denoiser):
        E = model.adapter_features(cond, adapter_text)
        pred = model(x_t, t, backbone_text, E=E)
    else:
        pred = model(x_t, t, backbone_text, cond)
    diff = pred - Tensor(noise)
    return T.mean(diff * diff)


# ---------------------------------------------------------------- sampling

def guide(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance written as ``(1 - s) eps_u + s eps_c``, exact at s in {0, 1}."""
    return (1.0 - scale) * eps_uncond + scale * eps_cond


def p_sample_loop(model: Denoiser, cond, text, steps: int = 35, guidance: float = 7.5, seed: int = 0,
                  sched: DiffusionSchedule | None = None, null_text=None, shape=None,
                  clip_denoised: bool = True, trace: list | None = None) -> np.ndarray:
    """Strided ancestral sampling with classifier-free guidance.

    Adapter features are computed once from ``cond`` and used in both guidance
    branches. ``text=None`` samples unconditionally (no guidance). Returns an
    array clamped to [-1, 1].
    """
    sched = sched or DiffusionSchedule()
    if guidance < 0:
        raise ValueError("guidance must be >= 0")
    ts = sched.sampling_timesteps(steps)
    null_text = null_text if null_text is not None else model.null_text
    if shape is None:
        if cond is None:
            raise ValueError("shape is required without a condition")
        shape = cond.shape
    N = shape[0]
    dtype = model.unet.parameters()[0].dtype
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dtype)
    null_rows = _rows(null_text, N).astype(dtype)
    cond_rows = None if text is None else _rows(text, N).astype(dtype)
    with T.no_grad():
        E = None
        if cond is not None and model.adapter is not None:
            E = model.adapter_features(T.as_tensor(cond), Tensor(cond_rows if cond_rows is not None else null_rows))
        for i, t in enumerate(ts):
            tt = np.full(N, t)
            if cond_rows is None:
                eps_u = model.unet(Tensor(x), tt, Tensor(null_rows), E=E).data
                eps_c = eps_u
                eps = eps_u
            else:
                xx = Tensor(np.concatenate([x, x]))
                txt = Tensor(np.concatenate([cond_rows, null_rows]))
                EE = None if E is None else [T.concat([e, e], axis=0) for e in E]
                both = model.unet(xx, np.concatenate([tt, tt]), txt, E=EE).data
                eps_c, eps_u = both[:N], both[N:]
                eps = guide(eps_u, eps_c, guidance)
            if trace is not None:
                trace.append({"t": int(t), "eps_cond": eps_c, "eps_uncond": eps_u, "eps": eps})
            ab = sched.alpha_bar[t]
            ab_prev = sched.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
            beta = 1.0 - ab / ab_prev
            x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
            if clip_denoised:
                x0 = np.clip(x0, -1.0, 1.0)
            mean = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 \
                + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * x
            if i + 1 < len(ts):
                var = beta * (1.0 - ab_prev) / (1.0 - ab)
                x = mean + np.sqrt(var) * rng.standard_normal(shape)
            else:
                x = mean
            x = x.astype(dtype, copy=False)
    return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------- optimisation

@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    warmup: int = 100
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 1e-2
    grad_accum: int = 1
    batch: int = 32
    cond_dropout: float = 0.1
    T: int = 1000
    schedule: str = "linear"
    guidance: float = 7.5
    sample_steps: int = 35
    seed: int = 0
    dtype: str = "float32"
    conv_backend: str = "torch"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise KeyError(f"unknown training config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "toy": TrainConfig(),
    # full-scale fine-tuning hyperparameters; echoed by the CLI, never run at desk scale
    "sd-paper": TrainConfig(steps=0, lr=5e-6, warmup=500, betas=[0.9, 0.999], eps=1e-8,
                            weight_decay=1e-2, grad_accum=4, batch=2, T=1000, guidance=7.5,
                            sample_steps=35, dtype="float64", conv_backend="numpy"),
}


class TrainState:
    """AdamW moments, step counters and the data RNG; snapshotting it makes runs resumable."""

    def __init__(self, cfg: TrainConfig, seed: int | None = None):
        self.cfg = cfg
        self.step = 0
        self.micro = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.accum: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.losses: list[float] = []

    @property
    def cond_dropout(self) -> float:
        return self.cfg.cond_dropout

    def lr_at(self, step: int) -> float:
        if self.cfg.warmup <= 0:
            return self.cfg.lr
        return self.cfg.lr * min(1.0, step / self.cfg.warmup)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, d in (("m", self.m), ("v", self.v), ("accum", self.accum)):
            for k, a in d.items():
                out[f"{prefix}/{k}"] = a
        return out

    def manifest(self) -> dict:
        return {"step": self.step, "micro": self.micro, "config": self.cfg.to_dict(),
                "rng": json.loads(json.dumps(self.rng.bit_generator.state, default=int)),
                "losses": self.losses}

    @classmethod
    def restore(cls, manifest: dict, arrays: dict) -> "TrainState":
        st = cls(TrainConfig.from_dict(manifest["config"]))
        st.step, st.micro = manifest["step"], manifest["micro"]
        st.rng.bit_generator.state = manifest["rng"]
        st.losses = list(manifest["losses"])
        for key, a in arrays.items():
            prefix, _, name = key.partition("/")
            if prefix in ("m", "v", "accum"):
                getattr(st, prefix)[name] = np.array(a)
        return st


def save_train_state(path, state: TrainState, modules: dict | None = None) -> None:
    """Snapshot optimizer state (and optionally module weights) to one container file."""
    arrays = dict(state.arrays())
    for prefix, mod in (modules or {}).items():
        for name, arr in mod.state_dict().items():
            arrays[f"param:{prefix}/{name}"] = arr
    write_container(path, state.manifest(), arrays)


def load_train_state(path, modules: dict | None = None) -> TrainState:
    manifest, arrays = read_container(path)
    for prefix, mod in (modules or {}).items():
        tag = f"param:{prefix}/"
        mod.load_state_dict({k[len(tag):]: v for k, v in arrays.items() if k.startswith(tag)})
    return TrainState.restore(manifest, {k: v for k, v in arrays.items() if not k.startswith("param:")})


def optimizer_step(state: TrainState, params: dict[str, Parameter]) -> bool:
    """Accumulate gradients; every ``grad_accum`` micro-batches apply one AdamW update.

    Returns True when an update was applied.
    """
    cfg = state.cfg
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericAbort(f"gradient of {name}")
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name in state.accum:
            state.accum[name] = state.accum[name] + g
        else:
            state.accum[name] = np.array(g, dtype=p.data.dtype)
    state.micro += 1
    if state.micro % cfg.grad_accum:
        return False
    state.step += 1
    lr = state.lr_at(state.step)
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = state.accum.pop(name) / cfg.grad_accum
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
        p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)
    return True


def train(params: dict[str, Parameter], loss_fn, state: TrainState, steps: int,
          log_every: int = 0, log=print) -> list[float]:
    """Run ``steps`` micro-batches of ``loss_fn(rng) -> scalar Tensor`` with AdamW."""
    for _ in range(steps):
        for p in params.values():
            p.grad = None
        with T.Tape(retain_grads=False):
            loss = loss_fn(state.rng)
            val = float(loss.item())
            if not np.isfinite(val):
                raise NumericAbort("loss")
            loss.backward()
        optimizer_step(state, params)
        state.losses.append(val)
        if log_every and state.micro % log_every == 0:
            window = state.losses[-log_every:]
            log(f"step {state.micro:6d}  loss {np.mean(window):.4f}")
    for p in params.values():
        p.grad = None
    return state.losses
