"""Layout adherence scoring for generated images.

Pixels are snapped to the nearest palette entry (background included),
connected components become detections, and detections are greedily matched
to scene primitives of the same color by mask IoU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .diffusion import BACKGROUND_COLOR, PALETTE
from .pathclip import DimensionMismatch, LayoutScene, PolygonMask, polygon_iou, rasterize

DEFAULT_IOU_TOLERANCE = 0.5
DEFAULT_MIN_COMPONENT_AREA = 4


class UnknownPaletteToken(ValueError):
    pass


@dataclass(frozen=True)
class LayoutAdherenceReport:
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    zero_tp: bool  # no detections at all: precision denominator was empty
    matches: tuple[tuple[int, str, float], ...]  # (primitive index, color, IoU)

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "zero_tp": self.zero_tp,
            "matches": [
                {"primitive": i, "color": c, "iou": v} for i, c, v in self.matches
            ],
        }


def primitive_color(tokens: tuple[str, ...]) -> str:
    """First appearance token naming a palette color."""
    for tok in tokens:
        if tok in PALETTE:
            return tok
    raise UnknownPaletteToken(f"no palette color among tokens {tokens!r}")


def quantize_to_palette(image: np.ndarray) -> np.ndarray:
    """Label grid: 0 = background, i >= 1 = i-th palette color (nearest RGB)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionMismatch(f"expected (H, W, 3) image, got {arr.shape}")
    colors = np.array([BACKGROUND_COLOR] + list(PALETTE.values()))
    dist = ((arr[:, :, None, :] - colors[None, None, :, :]) ** 2).sum(axis=-1)
    return dist.argmin(axis=-1)


def detect_components(
    image: np.ndarray, min_area: int = DEFAULT_MIN_COMPONENT_AREA
) -> list[tuple[str, PolygonMask]]:
    """Connected same-color regions of at least min_area pixels."""
    labels = quantize_to_palette(image)
    names = list(PALETTE)
    out = []
    for idx, name in enumerate(names, start=1):
        comp, ncomp = ndimage.label(labels == idx)
        for c in range(1, ncomp + 1):
            mask = comp == c
            if int(mask.sum()) >= min_area:
                out.append((name, PolygonMask.from_array(mask)))
    return out


def evaluate_layout_adherence(
    image: np.ndarray,
    scene: LayoutScene,
    tolerance: float = DEFAULT_IOU_TOLERANCE,
    min_component_area: int = DEFAULT_MIN_COMPONENT_AREA,
) -> LayoutAdherenceReport:
    """Greedy IoU matching of color-quantized detections to scene primitives.

    A detection matches a primitive when their colors agree and the mask IoU
    reaches the tolerance; precision, recall, and accuracy are
    TP/(TP+FP), TP/(TP+FN), and TP/(TP+FP+FN).
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape[:2] != (scene.canvas_h, scene.canvas_w):
        raise DimensionMismatch(
            f"image {arr.shape[:2]} vs scene canvas {(scene.canvas_h, scene.canvas_w)}"
        )
    detections = detect_components(arr, min_area=min_component_area)
    truths = []
    for i, prim in enumerate(scene.primitives):
        color = primitive_color(prim.appearance.tokens)
        truths.append((i, color, rasterize(prim, scene.canvas_w, scene.canvas_h)))
    candidates = []
    for d_idx, (d_color, d_mask) in enumerate(detections):
        for t_idx, (p_idx, t_color, t_mask) in enumerate(truths):
            if d_color != t_color:
                continue
            iou = polygon_iou(d_mask, t_mask)
            if iou >= tolerance:
                candidates.append((iou, d_idx, t_idx, p_idx, d_color))
    candidates.sort(key=lambda c: -c[0])
    used_d: set[int] = set()
    used_t: set[int] = set()
    matches = []
    for iou, d_idx, t_idx, p_idx, color in candidates:
        if d_idx in used_d or t_idx in used_t:
            continue
        used_d.add(d_idx)
        used_t.add(t_idx)
        matches.append((p_idx, color, iou))
    tp = len(matches)
    fp = len(detections) - tp
    fn = len(truths) - tp
    zero_tp = (tp + fp) == 0
    precision = 0.0 if zero_tp else tp / (tp + fp)
    recall = 0.0 if (tp + fn) == 0 else tp / (tp + fn)
    accuracy = 0.0 if (tp + fp + fn) == 0 else tp / (tp + fp + fn)
    return LayoutAdherenceReport(
        precision=precision,
        recall=recall,
        accuracy=accuracy,
        tp=tp,
        fp=fp,
        fn=fn,
        zero_tp=zero_tp,
        matches=tuple(sorted(matches)),
    )
