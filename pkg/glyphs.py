"""
Glyph catalog: M shapes x S fill styles rasterised with Pillow at 4x resolution
and box-downsampled. Pixels are in [-1, 1], background -1.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from errors import InvalidArgumentError

SUPERSAMPLE = 4

# unit-square primitives: ("poly", points) | ("ellipse", box) | ("pie", box, start, end)
SHAPES = {
    "circle": [("ellipse", (0.15, 0.15, 0.85, 0.85))],
    "square": [("poly", [(0.2, 0.2), (0.8, 0.2), (0.8, 0.8), (0.2, 0.8)])],
    "triangle-up": [("poly", [(0.5, 0.12), (0.88, 0.85), (0.12, 0.85)])],
    "triangle-down": [("poly", [(0.12, 0.15), (0.88, 0.15), (0.5, 0.88)])],
    "diamond": [("poly", [(0.5, 0.1), (0.9, 0.5), (0.5, 0.9), (0.1, 0.5)])],
    "plus": [("poly", [(0.4, 0.1), (0.6, 0.1), (0.6, 0.9), (0.4, 0.9)]),
             ("poly", [(0.1, 0.4), (0.9, 0.4), (0.9, 0.6), (0.1, 0.6)])],
    "cross": [("poly", [(0.15, 0.27), (0.27, 0.15), (0.85, 0.73), (0.73, 0.85)]),
              ("poly", [(0.73, 0.15), (0.85, 0.27), (0.27, 0.85), (0.15, 0.73)])],
    "wide-ellipse": [("ellipse", (0.08, 0.3, 0.92, 0.7))],
    "tall-ellipse": [("ellipse", (0.3, 0.08, 0.7, 0.92))],
    "wide-bar": [("poly", [(0.08, 0.35), (0.92, 0.35), (0.92, 0.65), (0.08, 0.65)])],
    "tall-bar": [("poly", [(0.35, 0.08), (0.65, 0.08), (0.65, 0.92), (0.35, 0.92)])],
    "pentagon": [("poly", [(0.5, 0.1), (0.88, 0.38), (0.74, 0.86), (0.26, 0.86), (0.12, 0.38)])],
    "hexagon": [("poly", [(0.28, 0.14), (0.72, 0.14), (0.92, 0.5), (0.72, 0.86), (0.28, 0.86), (0.08, 0.5)])],
    "star": [("poly", [(0.5, 0.05), (0.61, 0.38), (0.95, 0.38), (0.67, 0.58), (0.78, 0.92),
                       (0.5, 0.72), (0.22, 0.92), (0.33, 0.58), (0.05, 0.38), (0.39, 0.38)])],
    "arrow-right": [("poly", [(0.1, 0.4), (0.55, 0.4), (0.55, 0.2), (0.92, 0.5), (0.55, 0.8), (0.55, 0.6), (0.1, 0.6)])],
    "arrow-left": [("poly", [(0.9, 0.4), (0.45, 0.4), (0.45, 0.2), (0.08, 0.5), (0.45, 0.8), (0.45, 0.6), (0.9, 0.6)])],
    "ell": [("poly", [(0.2, 0.1), (0.42, 0.1), (0.42, 0.68), (0.85, 0.68), (0.85, 0.9), (0.2, 0.9)])],
    "tee": [("poly", [(0.1, 0.12), (0.9, 0.12), (0.9, 0.34), (0.61, 0.34), (0.61, 0.9), (0.39, 0.9), (0.39, 0.34), (0.1, 0.34)])],
    "half-disc": [("pie", (0.1, 0.25, 0.9, 1.05), 180, 360)],
    "trapezoid": [("poly", [(0.3, 0.2), (0.7, 0.2), (0.92, 0.8), (0.08, 0.8)])],
}
SHAPE_NAMES = list(SHAPES)

STYLE_NAMES = ["solid", "outline-thick", "outline-thin", "stripes-h", "stripes-v", "checker"]


@dataclass(frozen=True)
class GlyphSpec:
    shape_id: int
    style_id: int
    jitter_seed: int = 0
    resolution: int = 16

    def __post_init__(self):
        if not 0 <= self.shape_id < len(SHAPE_NAMES):
            raise InvalidArgumentError(f"shape_id {self.shape_id} outside [0, {len(SHAPE_NAMES)})")
        if not 0 <= self.style_id < len(STYLE_NAMES):
            raise InvalidArgumentError(f"style_id {self.style_id} outside [0, {len(STYLE_NAMES)})")


def _scaled(points, size):
    return [(x * (size - 1), y * (size - 1)) for x, y in points]


def _draw(shape: str, size: int, filled: bool, width: int) -> np.ndarray:
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    fill = 255 if filled else None
    outline = None if filled else 255
    for prim in SHAPES[shape]:
        if prim[0] == "poly":
            draw.polygon(_scaled(prim[1], size), fill=fill, outline=outline, width=width)
        else:
            box = [c * (size - 1) for c in prim[1]]
            if prim[0] == "ellipse":
                draw.ellipse(box, fill=fill, outline=outline, width=width)
            else:
                draw.pieslice(box, prim[2], prim[3], fill=fill, outline=outline, width=width)
    return np.asarray(img, dtype=np.float64) / 255.0


def _pattern(style: str, size: int) -> np.ndarray:
    period = 2 * SUPERSAMPLE
    rows, cols = np.indices((size, size))
    if style == "stripes-h":
        return ((rows // period) % 2 == 0).astype(np.float64)
    if style == "stripes-v":
        return ((cols // period) % 2 == 0).astype(np.float64)
    return (((rows // period) + (cols // period)) % 2 == 0).astype(np.float64)


@lru_cache(maxsize=None)
def template(shape_id: int, style_id: int, resolution: int = 16) -> np.ndarray:
    """Un-jittered glyph as a (resolution, resolution) array in [-1, 1]"""
    GlyphSpec(shape_id, style_id, 0, resolution)
    size = resolution * SUPERSAMPLE
    shape, style = SHAPE_NAMES[shape_id], STYLE_NAMES[style_id]
    if style == "solid":
        hi = _draw(shape, size, True, 1)
    elif style == "outline-thick":
        hi = _draw(shape, size, False, 5)
    elif style == "outline-thin":
        hi = _draw(shape, size, False, 2)
    else:
        hi = _draw(shape, size, True, 1) * _pattern(style, size)
    img = Image.fromarray(np.uint8(np.rint(hi * 255)))
    low = np.asarray(img.resize((resolution, resolution), Image.Resampling.BOX), dtype=np.float64) / 255.0
    out = 2.0 * low - 1.0
    out.setflags(write=False)
    return out


def shift_image(img: np.ndarray, dy: int, dx: int, fill: float = -1.0) -> np.ndarray:
    h, w = img.shape
    out = np.full_like(img, fill)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def render_glyph(spec: GlyphSpec, jitter: bool = True, max_shift: int = 1, intensity_jitter: float = 0.15) -> np.ndarray:
    """Flattened glyph with seeded positional shift and contrast jitter"""
    img = template(spec.shape_id, spec.style_id, spec.resolution)
    if jitter:
        rng = np.random.default_rng(spec.jitter_seed)
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        contrast = 1.0 - rng.uniform(0.0, intensity_jitter)
        img = shift_image(img, int(dy), int(dx)) * contrast
    return np.clip(img, -1.0, 1.0).ravel()


class GlyphOracle:
    """Nearest-template classifier (cosine similarity) over shifted templates of every (shape, style)"""

    def __init__(self, n_shapes: int, n_styles: int, resolution: int = 16, max_shift: int = 1):
        bank, labels = [], []
        shifts = range(-max_shift, max_shift + 1)
        for m in range(n_shapes):
            for s in range(n_styles):
                base = template(m, s, resolution)
                for dy in shifts:
                    for dx in shifts:
                        bank.append(shift_image(base, dy, dx).ravel())
                        labels.append((m, s))
        bank = np.asarray(bank)
        self.bank = bank / np.linalg.norm(bank, axis=1, keepdims=True)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.n_shapes = n_shapes
        self.n_styles = n_styles

    def classify(self, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(shape_ids, style_ids) for a batch of flattened images"""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        norms = np.maximum(np.linalg.norm(xs, axis=1, keepdims=True), 1e-12)
        best = np.argmax((xs / norms) @ self.bank.T, axis=1)
        return self.labels[best, 0], self.labels[best, 1]

    def accuracy(self, xs: np.ndarray, shape_ids: Sequence[int]) -> float:
        pred, _ = self.classify(xs)
        return float(np.mean(pred == np.asarray(shape_ids)))

    def style_accuracy(self, xs: np.ndarray, style_ids: Sequence[int]) -> float:
        _, pred = self.classify(xs)
        return float(np.mean(pred == np.asarray(style_ids)))


def catalog(n_shapes: int, n_styles: int) -> List[Tuple[str, str]]:
    if n_shapes > len(SHAPE_NAMES) or n_styles > len(STYLE_NAMES):
        raise InvalidArgumentError(f"catalog holds {len(SHAPE_NAMES)} shapes and {len(STYLE_NAMES)} styles")
    return [(SHAPE_NAMES[m], STYLE_NAMES[s]) for m in range(n_shapes) for s in range(n_styles)]
