"""Dynamic-aware reward for generated next-state images.

Pipeline: find the regions that changed between the current raster and the
real / generated next raster, match the two region sets with the Hungarian
algorithm on IoU, and score matched pairs by IoU minus a pixel MSE penalty,
with a penalty for every unmatched region.
"""
from __future__ import annotations

import itertools
import zlib
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .gridworld import render
from .vision import detokenize


class DimensionMismatch(ValueError):
    pass


class BadKernel(ValueError):
    pass


class NonFinite(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def union(self, other: "BBox") -> "BBox":
        return BBox(min(self.x0, other.x0), min(self.y0, other.y0), max(self.x1, other.x1), max(self.y1, other.y1))

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class RewardParams:
    iou_threshold: float = 0.3
    mse_weight: float = 1.0
    penalty: float = 0.5
    blur_ksize: int = 5
    blur_sigma: float = 1.0
    diff_threshold: float = 0.1
    closing_size: int = 3
    nms_iou: float = 0.5
    min_area: int = 4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")


# --------------------------------------------------------------------------
# image ops


def to_gray(raster: np.ndarray) -> np.ndarray:
    """Luma in [0, 1]."""
    r = np.asarray(raster, dtype=np.float64)
    if r.ndim == 2:
        return r / 255.0
    return (0.299 * r[..., 0] + 0.587 * r[..., 1] + 0.114 * r[..., 2]) / 255.0


def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    if ksize < 1 or ksize % 2 == 0:
        raise BadKernel(f"kernel size must be odd and positive, got {ksize}")
    if sigma <= 0:
        raise BadKernel(f"sigma must be positive, got {sigma}")
    x = np.arange(ksize) - ksize // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def gaussian_blur(gray: np.ndarray, sigma: float = 1.0, ksize: int = 5) -> np.ndarray:
    """Separable Gaussian blur with replicated borders."""
    k = gaussian_kernel(sigma, ksize)
    out = ndimage.correlate1d(np.asarray(gray, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def closing(mask: np.ndarray, size: int = 3) -> np.ndarray:
    """Binary closing (dilate then erode) with a square element and replicated borders."""
    m = np.asarray(mask, dtype=np.uint8)
    m = ndimage.maximum_filter(m, size=size, mode="nearest")
    return ndimage.minimum_filter(m, size=size, mode="nearest").astype(bool)


_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def component_boxes(mask: np.ndarray) -> list[BBox]:
    """Bounding boxes of 4-connected components, in label order."""
    labels, _ = ndimage.label(mask, structure=_FOUR)
    return [BBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop) for sl in ndimage.find_objects(labels) if sl]


def blurred_gray(x: np.ndarray, p: RewardParams) -> np.ndarray:
    return gaussian_blur(to_gray(x), p.blur_sigma, p.blur_ksize)


def change_mask(x_a: np.ndarray, x_b: np.ndarray, p: RewardParams) -> np.ndarray:
    """Thresholded blurred gray difference, before closing."""
    if np.shape(x_a) != np.shape(x_b):
        raise DimensionMismatch(f"raster shapes differ: {np.shape(x_a)} vs {np.shape(x_b)}")
    return np.abs(blurred_gray(x_a, p) - blurred_gray(x_b, p)) > p.diff_threshold


def detect_regions(x_a: np.ndarray, x_b: np.ndarray, p: RewardParams | None = None) -> list[BBox]:
    """Boxes around regions that differ between two rasters, sorted by ``(y0, x0)``."""
    p = p or RewardParams()
    return _regions(change_mask(x_a, x_b, p), p)


def _regions(mask: np.ndarray, p: RewardParams) -> list[BBox]:
    if not mask.any():
        return []
    boxes = [b for b in component_boxes(closing(mask, p.closing_size)) if b.area >= p.min_area]
    boxes = nms(boxes, [b.area for b in boxes], p.nms_iou)
    return sorted(boxes, key=lambda b: (b.y0, b.x0))


# --------------------------------------------------------------------------
# boxes


def iou(a: BBox, b: BBox) -> float:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def pairwise_iou(A: list[BBox], B: list[BBox]) -> np.ndarray:
    out = np.zeros((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            out[i, j] = iou(a, b)
    return out


def nms(boxes: list[BBox], scores, iou_thresh: float) -> list[BBox]:
    """Greedy suppression by descending score; ties broken by ``(y0, x0)``."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], boxes[i].y0, boxes[i].x0))
    kept: list[BBox] = []
    for i in order:
        if all(iou(boxes[i], k) <= iou_thresh for k in kept):
            kept.append(boxes[i])
    return kept


# --------------------------------------------------------------------------
# assignment


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` pairs.

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^2 m). Rectangular inputs are handled by assigning along the shorter
    side. Returns ``(pairs sorted by row, total cost)``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise NonFinite("cost matrix contains non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return [], 0.0
    transposed = n > m
    if transposed:
        c = c.T
        n, m = m, n

    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # match[j] = row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = INF, -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    pairs = [(int(match[j]) - 1, j - 1) for j in range(1, m + 1) if match[j]]
    if transposed:
        pairs = [(j, i) for i, j in pairs]
    pairs.sort()
    total = float(sum(np.asarray(cost, dtype=np.float64)[i, j] for i, j in pairs))
    return pairs, total


def brute_force_assignment(cost) -> float:
    """Minimum assignment cost by enumerating every injection (small inputs only)."""
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if n == 0 or m == 0:
        return 0.0
    if n > m:
        c, n, m = c.T, m, n
    return min(sum(c[i, j] for i, j in enumerate(cols)) for cols in itertools.permutations(range(m), n))


# --------------------------------------------------------------------------
# reward


@dataclass
class Match:
    label: int
    gen: int
    iou: float
    mse: float


@dataclass
class RewardDetail:
    reward: float
    label_boxes: list[BBox]
    gen_boxes: list[BBox]
    matches: list[Match]

    def to_json(self) -> dict:
        return {
            "reward": self.reward,
            "label_boxes": [b.as_list() for b in self.label_boxes],
            "gen_boxes": [b.as_list() for b in self.gen_boxes],
            "matches": [asdict(m) for m in self.matches],
        }


def composite_reward(ious, mses, n_label: int, n_gen: int, p: RewardParams) -> float:
    """Penalised, normalised score of a fixed match set."""
    score = sum(i - p.mse_weight * e for i, e in zip(ious, mses))
    unmatched = n_label + n_gen - 2 * len(ious)
    return (score - p.penalty * unmatched) / max(1, min(n_label, n_gen))


def crop_mse(a: np.ndarray, b: np.ndarray, box: BBox) -> float:
    ca = np.asarray(a[box.y0:box.y1, box.x0:box.x1], dtype=np.float64) / 255.0
    cb = np.asarray(b[box.y0:box.y1, box.x0:box.x1], dtype=np.float64) / 255.0
    return float(np.mean((ca - cb) ** 2))


def match_regions(label_boxes, gen_boxes, x_real, x_gen, p: RewardParams) -> list[Match]:
    M = pairwise_iou(label_boxes, gen_boxes)
    pairs, _ = hungarian(-M)
    out = []
    for i, j in pairs:
        if M[i, j] >= p.iou_threshold:
            box = label_boxes[i].union(gen_boxes[j])
            out.append(Match(i, j, float(M[i, j]), crop_mse(x_real, x_gen, box)))
    return out


def dynamic_reward_detail(x_t, x_gen, x_real, p: RewardParams | None = None) -> RewardDetail:
    p = p or RewardParams()
    if not (np.shape(x_t) == np.shape(x_gen) == np.shape(x_real)):
        raise DimensionMismatch("x_t, x_gen and x_real must share a shape")
    label = detect_regions(x_t, x_real, p)
    gen = detect_regions(x_t, x_gen, p)
    matches = match_regions(label, gen, x_real, x_gen, p)
    r = composite_reward([m.iou for m in matches], [m.mse for m in matches], len(label), len(gen), p)
    return RewardDetail(r, label, gen, matches)


def dynamic_reward(x_t, x_gen, x_real, p: RewardParams | None = None) -> float:
    return dynamic_reward_detail(x_t, x_gen, x_real, p).reward


class TransitionScorer:
    """``reward_fn(transition, tokens)`` for training loops.

    Renders a generated token image and scores it against the transition's
    real next state. Per-transition work (rendering, blurring ``x_t``, the
    label boxes) and repeated samples are cached; results equal
    :func:`dynamic_reward` exactly.
    """

    def __init__(self, p: RewardParams | None = None, max_cache: int = 100_000):
        self.p = p or RewardParams()
        self.max_cache = max_cache
        self._transitions: dict[bytes, tuple] = {}
        self._samples: dict[bytes, float] = {}

    def _prepare(self, t):
        key = t.x_t.astype(np.int8).tobytes() + t.x_t1.astype(np.int8).tobytes()
        entry = self._transitions.get(key)
        if entry is None:
            if len(self._transitions) > self.max_cache:
                self._transitions.clear()
            x_t, x_real = render(t.x_t), render(t.x_t1)
            g_t = blurred_gray(x_t, self.p)
            label = _regions(np.abs(g_t - blurred_gray(x_real, self.p)) > self.p.diff_threshold, self.p)
            entry = self._transitions[key] = (key, x_real, g_t, label)
        return entry

    def __call__(self, t, tokens) -> float:
        key, x_real, g_t, label = self._prepare(t)
        tokens = np.asarray(tokens)
        skey = key + tokens.astype(np.int8).tobytes()
        r = self._samples.get(skey)
        if r is None:
            if len(self._samples) > self.max_cache:
                self._samples.clear()
            x_gen = render(detokenize(tokens, t.x_t.shape[0]))
            gen = _regions(np.abs(g_t - blurred_gray(x_gen, self.p)) > self.p.diff_threshold, self.p)
            matches = match_regions(label, gen, x_real, x_gen, self.p)
            r = composite_reward([m.iou for m in matches], [m.mse for m in matches], len(label), len(gen), self.p)
            self._samples[skey] = r
        return r


class CompressibilityScorer:
    """``reward_fn(transition, tokens)`` that ignores the transition and scores deflate size."""

    def __init__(self, sign: str = "compress"):
        compressibility_reward(np.zeros((1, 1, 3), np.uint8), sign)
        self.sign = sign

    def __call__(self, t, tokens) -> float:
        return compressibility_reward(render(detokenize(tokens, t.x_t.shape[0])), self.sign)


# --------------------------------------------------------------------------
# compressibility

COMPRESS_LEVEL = 9


def compressibility_reward(raster: np.ndarray, sign: str = "compress") -> float:
    """Minus (``compress``) or plus (``incompress``) the deflate size ratio."""
    raw = np.ascontiguousarray(raster, dtype=np.uint8).tobytes()
    ratio = len(zlib.compress(raw, COMPRESS_LEVEL)) / len(raw)
    if sign == "compress":
        return -ratio
    if sign == "incompress":
        return ratio
    raise ValueError(f"sign must be 'compress' or 'incompress', got {sign!r}")
