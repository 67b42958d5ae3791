"""Structural fidelity, prompt-colour adherence and a fixed-feature Frechet distance."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .data import PALETTE, Scene, extract_edges, parse_caption, visible_masks

_PALETTE_NAMES = tuple(PALETTE)
_PALETTE_RGB = np.array([PALETTE[c] for c in _PALETTE_NAMES])


def _binary(edge_map) -> np.ndarray:
    e = np.asarray(edge_map)
    if e.ndim == 3:
        e = e[0]
    return e > 0


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    if r <= 0:
        return mask
    return ndimage.binary_dilation(mask, structure=np.ones((2 * r + 1, 2 * r + 1), bool))


def edge_f1_maps(pred, ref, dilation: int = 1) -> float:
    """F1 between two binary edge maps with a +/-``dilation`` pixel match tolerance.

    Precision counts predicted pixels within tolerance of a reference pixel,
    recall counts reference pixels within tolerance of a predicted pixel. Two
    empty maps score 1.
    """
    p, r = _binary(pred), _binary(ref)
    if not p.any() and not r.any():
        return 1.0
    if not p.any() or not r.any():
        return 0.0
    precision = (p & _dilate(r, dilation)).sum() / p.sum()
    recall = (r & _dilate(p, dilation)).sum() / r.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def edge_f1(generated, condition, dilation: int = 1) -> float:
    """Re-extract edges from a generated image and score them against the edge condition."""
    return edge_f1_maps(extract_edges(generated), condition, dilation)


def classify_color(rgb) -> str:
    d = ((_PALETTE_RGB - np.asarray(rgb)[None]) ** 2).sum(axis=1)
    return _PALETTE_NAMES[int(np.argmin(d))]


def color_accuracy(generated, scene: Scene, prompt: str) -> float:
    """Fraction of primitives whose mean (eroded, visible) colour matches the prompt's colour for that shape."""
    img = np.asarray(generated)
    S = img.shape[-1]
    want = parse_caption(prompt)
    hits, total = 0, 0
    for prim, vis in zip(scene.primitives, visible_masks(scene, S)):
        if not vis.any():
            continue
        core = ndimage.binary_erosion(vis)
        region = core if core.any() else vis
        label = classify_color(img[:, region].mean(axis=1))
        total += 1
        hits += label == want.get(prim.shape)
    return 1.0 if total == 0 else hits / total


# ---------------------------------------------------------------- Frechet distance

class FixedFeatures:
    """Seed-pinned random conv net (three stride-2 3x3 convs, ReLU, global mean pool) -> 64 features."""

    def __init__(self, seed: int = 1234, widths=(3, 16, 32, 64)):
        rng = np.random.default_rng(seed)
        self.weights = [rng.standard_normal((o, i, 3, 3)) * np.sqrt(2.0 / (9 * i))
                        for i, o in zip(widths[:-1], widths[1:])]

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[0]

    def __call__(self, images) -> np.ndarray:
        from .tensor import _conv_np

        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        for w in self.weights:
            x, _ = _conv_np(x, w, 2, 1, 1)
            x = np.maximum(x, 0)
        return x.mean(axis=(2, 3))


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition, negative eigenvalues clamped to 0."""
    a = (a + a.T) / 2
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    ca = np.atleast_2d(np.cov(fa, rowvar=False))
    cb = np.atleast_2d(np.cov(fb, rowvar=False))
    # tr((Ca Cb)^1/2) = tr((Ca^1/2 Cb Ca^1/2)^1/2), the inner matrix being symmetric PSD
    ra = sqrtm_psd(ca)
    cross = np.trace(sqrtm_psd(ra @ cb @ ra))
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2 * cross)
    return max(d, 0.0)


def frechet_fixed_features(set_a, set_b, extractor: FixedFeatures | None = None) -> float:
    ext = extractor or FixedFeatures()
    return frechet_from_features(ext(set_a), ext(set_b))


@dataclass
class EvalReport:
    edge_f1: float
    color_accuracy: float
    frechet: float
    n: int
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("edge_f1", "color_accuracy", "frechet"):
            if not np.isfinite(getattr(self, k)):
                raise ValueError(f"{k} is not finite")

    def to_dict(self) -> dict:
        return asdict(self)
