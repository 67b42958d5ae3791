"""Procedural shape scenes, their captions, and edge / pseudo-depth condition maps.

Dataset files use the container layout of :mod:`nexus.io`: a u64 LE manifest
length, a JSON manifest (kind, size, seed, scenes, captions, tensor index) and
NXTN records ``images`` and ``conditions``, both ``n x 3 x S x S`` float32.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .io import read_container, write_container
from .text import COLORS, SHAPES, SYNONYMS

SIZES = (32, 64, 128)
KINDS = ("edge", "depth")
PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
EDGE_THRESHOLD = 0.2
MAX_OVERLAP = 0.25
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sample_seed(master: int, index: int) -> int:
    return splitmix64((master * 0x100000001B3 + index) & _MASK64)


@dataclass
class Primitive:
    shape: str
    color: str
    cx: float
    cy: float
    size: float  # radius, half side, or triangle half width; in units of the canvas side

    def mask(self, S: int) -> np.ndarray:
        c = (np.arange(S) + 0.5) / S
        x, y = c[None, :], c[:, None]
        dx, dy, r = x - self.cx, y - self.cy, self.size
        if self.shape == "circle":
            return dx * dx + dy * dy <= r * r
        if self.shape == "square":
            return (np.abs(dx) <= r) & (np.abs(dy) <= r)
        if self.shape == "triangle":
            # apex up, base at cy + r, apex at cy - r
            inside = (dy <= r) & (dy >= -r)
            return inside & (np.abs(dx) <= (dy + r) / 2.0)
        raise ValueError(f"unknown shape {self.shape!r}")


@dataclass
class Scene:
    primitives: list = field(default_factory=list)
    background: float = -0.25
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls([Primitive(**p) for p in d["primitives"]], d["background"], d["seed"])

    def to_dict(self) -> dict:
        return asdict(self)


def random_scene(seed: int, max_primitives: int = 3) -> Scene:
    """1..max_primitives primitives of distinct shape types with bounded pairwise overlap."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_primitives + 1))
    background = float(rng.integers(-4, 3)) / 8.0
    check = 64
    while True:
        shapes = rng.permutation(len(SHAPES))[:n]
        prims = []
        for s in shapes:
            r = float(rng.uniform(0.14, 0.24))
            prims.append(Primitive(SHAPES[s], COLORS[int(rng.integers(len(COLORS)))],
                                   float(rng.uniform(r, 1 - r)), float(rng.uniform(r, 1 - r)), r))
        masks = [p.mask(check) for p in prims]
        ok = True
        for i in range(n):
            for j in range(i + 1, n):
                inter = np.logical_and(masks[i], masks[j]).sum()
                if inter > MAX_OVERLAP * min(masks[i].sum(), masks[j].sum()):
                    ok = False
        if ok:
            return Scene(prims, background, seed)


def render(scene: Scene, size: int = 32) -> np.ndarray:
    """Rasterise without anti-aliasing to a ``3 x S x S`` array in [-1, 1]."""
    if size not in SIZES:
        raise ValueError(f"size must be one of {SIZES}")
    img = np.full((3, size, size), scene.background)
    for p in scene.primitives:
        m = p.mask(size)
        img[:, m] = np.asarray(PALETTE[p.color])[:, None]
    return img


def visible_masks(scene: Scene, size: int) -> list[np.ndarray]:
    masks = [p.mask(size) for p in scene.primitives]
    out = []
    for i, m in enumerate(masks):
        vis = m.copy()
        for later in masks[i + 1:]:
            vis &= ~later
        out.append(vis)
    return out


def sobel_magnitude(image: np.ndarray) -> np.ndarray:
    """Per-pixel max over channels of the Sobel gradient norm (kernels scaled by 1/8)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (p[:, :-2, 2:] + 2 * p[:, 1:-1, 2:] + p[:, 2:, 2:]
          - p[:, :-2, :-2] - 2 * p[:, 1:-1, :-2] - p[:, 2:, :-2]) / 8.0
    gy = (p[:, 2:, :-2] + 2 * p[:, 2:, 1:-1] + p[:, 2:, 2:]
          - p[:, :-2, :-2] - 2 * p[:, :-2, 1:-1] - p[:, :-2, 2:]) / 8.0
    return np.sqrt(gx * gx + gy * gy).max(axis=0)


def extract_edges(image: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Binary edge map in {-1, +1}, replicated to 3 channels."""
    edges = sobel_magnitude(image) > threshold
    return np.repeat(np.where(edges, 1.0, -1.0)[None], 3, axis=0)


def extract_depth(scene: Scene, size: int = 32) -> np.ndarray:
    """Constant depth per primitive by draw order (later = nearer = larger); background -1."""
    depth = np.full((size, size), -1.0)
    for i, p in enumerate(scene.primitives):
        depth[p.mask(size)] = -1.0 + 2.0 * (i + 1) / 3.0
    return np.repeat(depth[None], 3, axis=0)


def caption(scene: Scene) -> str:
    return " and ".join(f"a {p.color} {p.shape}" for p in scene.primitives)


def parse_caption(text: str) -> dict[str, str]:
    """Map shape -> canonical colour for a caption of the toy grammar."""
    from .text import canonical_color

    words = text.split()
    out = {}
    for a, b in zip(words, words[1:]):
        col = canonical_color(a)
        if col is not None and b in SHAPES:
            out[b] = col
    return out


def caption_corpus(n: int = 2000, seed: int = 0) -> list[str]:
    """Captions of random scenes, each also written with colour synonyms."""
    inv = {v: k for k, v in SYNONYMS.items()}
    out = []
    for i in range(n):
        cap = caption(random_scene(sample_seed(seed, i)))
        out.append(cap)
        out.append(" ".join(inv.get(w, w) for w in cap.split()))
    return out


@dataclass
class Sample:
    image: np.ndarray
    condition: np.ndarray
    caption: str
    kind: str
    scene: Scene


def make_sample(seed: int, size: int = 32, kind: str = "edge") -> Sample:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    scene = random_scene(seed)
    image = render(scene, size)
    cond = extract_edges(image) if kind == "edge" else extract_depth(scene, size)
    return Sample(image, cond, caption(scene), kind, scene)


@dataclass
class Dataset:
    images: np.ndarray
    conditions: np.ndarray
    captions: list
    scenes: list
    kind: str
    size: int
    seed: int

    def __len__(self) -> int:
        return len(self.captions)


def generate(n: int, kind: str = "edge", seed: int = 0, size: int = 32, offset: int = 0) -> Dataset:
    """Pure function of ``(n, kind, seed, size, offset)``; sample i uses seed splitmix(seed, offset + i)."""
    samples = [make_sample(sample_seed(seed, offset + i), size, kind) for i in range(n)]
    shape = (n, 3, size, size)
    images = np.stack([s.image for s in samples]).astype(np.float32) if n else np.zeros(shape, np.float32)
    conds = np.stack([s.condition for s in samples]).astype(np.float32) if n else np.zeros(shape, np.float32)
    return Dataset(images, conds, [s.caption for s in samples], [s.scene for s in samples],
                   kind, size, seed)


def write_dataset(ds: Dataset, path) -> None:
    manifest = {"kind": ds.kind, "size": ds.size, "seed": ds.seed, "n": len(ds),
                "captions": ds.captions, "scenes": [s.to_dict() for s in ds.scenes]}
    write_container(path, manifest, {"images": ds.images, "conditions": ds.conditions})


def read_dataset(path) -> Dataset:
    m, arrays = read_container(path)
    return Dataset(arrays["images"], arrays["conditions"], list(m["captions"]),
                   [Scene.from_dict(s) for s in m["scenes"]], m["kind"], m["size"], m["seed"])
