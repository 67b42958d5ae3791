"""Frozen toy text encoder mapping micro-prompts to token embeddings ``T[n, d]``."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .io import read_container, write_container
from .tensor import Tensor

PAD, EOS = 0, 1
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
SYNONYMS = {"crimson": "red", "emerald": "green", "azure": "blue", "golden": "yellow"}
WORDS = ("<pad>", "<eos>", "a", "and", "one", "two", "three",
         *COLORS, *SYNONYMS, *SHAPES)


class VocabularyError(KeyError):
    def __init__(self, words):
        self.words = list(words)
        super().__init__(f"unknown token(s): {', '.join(self.words)}")

    def __str__(self):
        return self.args[0]


class Vocabulary:
    def __init__(self, words=WORDS):
        if words[PAD] != "<pad>" or words[EOS] != "<eos>":
            raise ValueError("vocabulary must start with <pad>, <eos>")
        self.words = tuple(words)
        self.ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def tokenize(self, prompt: str) -> list[int]:
        toks = prompt.lower().split()
        unknown = [w for w in toks if w not in self.ids or w.startswith("<")]
        if unknown:
            raise VocabularyError(unknown)
        return [self.ids[w] for w in toks]


def canonical_color(word: str) -> str | None:
    if word in COLORS:
        return word
    return SYNONYMS.get(word)


def sinusoidal(n: int, d: int, base: float = 10000.0) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freqs = base ** (-np.arange(0, d, 2) / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * freqs)
    out[:, 1::2] = np.cos(pos * freqs[: d // 2])
    return out


@dataclass
class TextEmbedding:
    """Token embeddings of one prompt (``tokens`` is ``n x d``) or a batch (``B x n x d``)."""

    tokens: Tensor
    ids: np.ndarray
    frozen: bool = True

    @property
    def shape(self):
        return self.tokens.shape


def stack(embs: list[TextEmbedding]) -> Tensor:
    return Tensor(np.stack([e.tokens.data for e in embs]))


class TextEncoder:
    """Token lookup + sinusoidal positions + causal self-attention layers.

    Only the token table is learned (skip-gram, :meth:`pretrain_and_freeze`);
    attention weights are seed-pinned random projections. Attention logits carry
    a recency bias so each token mixes mostly with its left neighbours, which
    binds a colour word to the shape word that follows it.
    """

    def __init__(self, d: int = 64, n: int = 16, layers: int = 2, seed: int = 0,
                 recency: float = 1.0, vocab: Vocabulary | None = None):
        self.vocab = vocab or Vocabulary()
        self.d, self.n, self.recency = d, n, recency
        rng = np.random.default_rng(seed)
        self.embed = rng.standard_normal((len(self.vocab), d))
        self.layers = []
        for _ in range(layers):
            self.layers.append({k: rng.standard_normal((d, d)) / np.sqrt(d) for k in "qkvo"})
        self.pos = sinusoidal(n, d)
        self.frozen = False
        self._cache: dict[str, TextEmbedding] = {}

    # -- parameters ------------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"layers.{i}.{k}"] = v
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        for arr in self.arrays().values():
            arr.flags.writeable = False
        self.frozen = True

    # -- training --------------------------------------------------------
    def pretrain_and_freeze(self, corpus: list[str], steps: int = 3000, seed: int = 0,
                            window: int = 2, negatives: int = 4, batch: int = 64,
                            lr: float = 0.05) -> None:
        """Skip-gram with negative sampling on ``corpus``, then freeze every parameter."""
        if self.frozen:
            raise RuntimeError("encoder is frozen")
        if not corpus:
            raise ValueError("corpus must be nonempty")
        rng = np.random.default_rng(seed)
        pairs = []
        for caption in corpus:
            ids = self.vocab.tokenize(caption) + [EOS]
            for i, c in enumerate(ids):
                for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                    if j != i:
                        pairs.append((c, ids[j]))
        pairs = np.asarray(pairs)
        V, d = self.embed.shape
        emb = self.embed * 0.1
        ctx = np.zeros((V, d))
        for _ in range(steps):
            sel = pairs[rng.integers(0, len(pairs), batch)]
            c, o = sel[:, 0], sel[:, 1]
            neg = rng.integers(2, V, (batch, negatives))
            ec = emb[c]
            targets = np.concatenate([o[:, None], neg], axis=1)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            ct = ctx[targets]
            score = np.einsum("bd,bkd->bk", ec, ct)
            g = T.sigmoid_np(score) - labels
            np.add.at(emb, c, -lr * np.einsum("bk,bkd->bd", g, ct))
            np.add.at(ctx, targets, -lr * g[..., None] * ec[:, None, :])
        # unit-RMS rows
        norms = np.sqrt((emb ** 2).mean(axis=1, keepdims=True))
        self.embed = emb / np.maximum(norms, 1e-12)
        self._cache.clear()
        self.freeze()

    # -- encoding --------------------------------------------------------
    def token_ids(self, prompt: str) -> np.ndarray:
        ids = self.vocab.tokenize(prompt)
        if ids:
            ids = ids + [EOS]
        if len(ids) > self.n:
            raise ValueError(f"prompt longer than context length {self.n}: {prompt!r}")
        return np.asarray(ids + [PAD] * (self.n - len(ids)), dtype=np.int64)

    def encode(self, prompt: str) -> TextEmbedding:
        cached = self._cache.get(prompt)
        if cached is not None and self.frozen:
            return cached
        ids = self.token_ids(prompt)
        h = self.embed[ids] + self.pos
        n = self.n
        causal = np.tril(np.ones((n, n), dtype=bool))
        dist = np.arange(n)[:, None] - np.arange(n)[None, :]
        bias = np.where(causal, -self.recency * dist, -1e9)
        with T.no_grad():
            for layer in self.layers:
                x = _layer_norm(h)
                q = T.matmul(Tensor(x), Tensor(layer["q"]))
                k = T.matmul(Tensor(x), Tensor(layer["k"]))
                v = T.matmul(Tensor(x), Tensor(layer["v"]))
                logits = T.matmul(q, k.T).data / np.sqrt(self.d) + bias
                a = T.softmax_rows(Tensor(logits))
                h = h + T.matmul(T.matmul(a, v), Tensor(layer["o"])).data
        h = np.where((ids == PAD)[:, None], self.embed[PAD][None, :], h)
        emb = TextEmbedding(Tensor(np.ascontiguousarray(h)), ids, frozen=self.frozen)
        if self.frozen:
            self._cache[prompt] = emb
        return emb

    def encode_batch(self, prompts: list[str], dtype=None) -> Tensor:
        arr = np.stack([self.encode(p).tokens.data for p in prompts])
        return Tensor(arr.astype(dtype) if dtype is not None else arr)

    # -- persistence -----------------------------------------------------
    def save(self, path) -> None:
        manifest = {"kind": "text-encoder", "vocab": list(self.vocab.words), "d": self.d,
                    "n": self.n, "layers": len(self.layers), "recency": self.recency,
                    "frozen": self.frozen}
        write_container(path, manifest, self.arrays())

    @classmethod
    def load(cls, path) -> "TextEncoder":
        manifest, arrays = read_container(path)
        enc = cls(d=manifest["d"], n=manifest["n"], layers=manifest["layers"],
                  recency=manifest["recency"], vocab=Vocabulary(tuple(manifest["vocab"])))
        enc.embed = arrays["embed"]
        for i, layer in enumerate(enc.layers):
            for k in layer:
                layer[k] = arrays[f"layers.{i}.{k}"]
        if manifest.get("frozen", True):
            enc.freeze()
        return enc


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)
