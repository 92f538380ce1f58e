"""Polygon fitting: particle swarm search maximizing mask IoU.

Fits a k-vertex polygon to a binary instance mask.  Candidate polygons go
through the same normalize-then-rasterize path as the rest of the package, so
the fitness of the returned polygon equals its reported IoU exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .pathclip import (
    AppearanceDescription,
    DegeneratePolygon,
    DimensionMismatch,
    LayoutScene,
    PathClipPrimitive,
    PathParams,
    PolygonMask,
    normalize_vertices,
    polygon_area,
)

K_MIN, K_MAX = 4, 6


class EmptyMask(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PsoConfig:
    swarm_size: int = 64
    iterations: int = 200
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    k: int = 4
    seed: int = 0
    velocity_clamp: float = 0.2  # fraction of the canvas diagonal

    def __post_init__(self):
        if self.swarm_size < 2:
            raise ValueError(f"swarm_size must be >= 2, got {self.swarm_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 < self.inertia < 1.0:
            raise ValueError(f"inertia must lie in (0, 1), got {self.inertia}")
        if not K_MIN <= self.k <= K_MAX:
            raise ValueError(f"k must lie in [{K_MIN}, {K_MAX}], got {self.k}")
        if self.velocity_clamp <= 0:
            raise ValueError("velocity_clamp must be positive")


def _batch_inside(stack: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # Same even-odd test as pathclip._even_odd_inside, broadcast over a batch
    # of polygons: stack (B, k, 2) against flat query points (N,) -> (B, N).
    x0 = stack[:, :, 0][:, :, None]
    y0 = stack[:, :, 1][:, :, None]
    x1 = np.roll(stack[:, :, 0], -1, axis=1)[:, :, None]
    y1 = np.roll(stack[:, :, 1], -1, axis=1)[:, :, None]
    crosses = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_int = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    hits = crosses & (px < x_int)
    return hits.sum(axis=1) % 2 == 1


def _grid_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    return jj.ravel() + 0.5, ii.ravel() + 0.5


def _batch_fitness(
    positions: np.ndarray, mask_flat: np.ndarray, px: np.ndarray, py: np.ndarray
) -> np.ndarray:
    """IoU of each candidate (row of flat vertex coordinates) against the mask.

    Candidates are normalized exactly as PathParams would normalize them;
    degenerate ones (zero area after rounding) score 0.
    """
    n = positions.shape[0]
    fits = np.zeros(n)
    stack, rows = [], []
    for s in range(n):
        pts = positions[s].reshape(-1, 2)
        try:
            norm = normalize_vertices((float(x), float(y)) for x, y in pts)
        except DegeneratePolygon:
            continue
        if polygon_area(norm) == 0.0:
            continue
        stack.append(norm)
        rows.append(s)
    if not rows:
        return fits
    inside = _batch_inside(np.asarray(stack, dtype=np.float64), px, py)
    inter = (inside & mask_flat).sum(axis=1)
    union = (inside | mask_flat).sum(axis=1)
    fits[rows] = inter / union
    return fits


def fitness(position: np.ndarray, mask: PolygonMask) -> float:
    """IoU in [0, 1] of one candidate vertex vector against the mask."""
    if mask.foreground_count() == 0:
        raise EmptyMask("mask has no foreground cells")
    px, py = _grid_centers(mask.width, mask.height)
    mask_flat = mask.cells.ravel().astype(bool)
    pos = np.asarray(position, dtype=np.float64).reshape(1, -1)
    return float(_batch_fitness(pos, mask_flat, px, py)[0])


def _largest_component(mask: PolygonMask) -> PolygonMask:
    labels, ncomp = ndimage.label(mask.cells)
    if ncomp <= 1:
        return mask
    warnings.warn(
        f"mask has {ncomp} connected components; fitting the largest only",
        stacklevel=3,
    )
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, ncomp + 1))
    keep = 1 + int(np.argmax(sizes))
    return PolygonMask.from_array(labels == keep)


def _base_polygon(mask: PolygonMask, k: int) -> np.ndarray:
    """Axis-aligned bounding box of the foreground, padded to k vertices with
    edge midpoints.  Rasterizing it back recovers at least the box cells, so
    its IoU against any nonempty mask is positive."""
    rows, cols = np.nonzero(mask.cells)
    x0, x1 = float(cols.min()), float(cols.max() + 1)
    y0, y1 = float(rows.min()), float(rows.max() + 1)
    pts = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    if k >= 5:
        pts.append(((x0 + x1) / 2, y1))
    if k >= 6:
        pts.append(((x0 + x1) / 2, y0))
    return np.asarray(pts, dtype=np.float64).ravel()


def fit_polygon(
    mask: PolygonMask, cfg: PsoConfig, history: list | None = None
) -> tuple[PathParams, float]:
    """Particle swarm search for the k-vertex polygon maximizing IoU.

    Returns the global-best polygon (canonical vertex order, derived box) and
    its achieved IoU.  Deterministic for a fixed config.  If `history` is
    given, the global-best fitness after each iteration is appended to it.
    """
    if mask.foreground_count() == 0:
        raise EmptyMask("mask has no foreground cells")
    mask = _largest_component(mask)
    width, height = mask.width, mask.height
    px, py = _grid_centers(width, height)
    mask_flat = mask.cells.ravel().astype(bool)
    gen = np.random.Generator(np.random.PCG64(cfg.seed))
    dim = 2 * cfg.k
    diag = float(np.hypot(width, height))
    vmax = cfg.velocity_clamp * diag

    base = _base_polygon(mask, cfg.k)
    positions = base[None, :] + gen.normal(0.0, 0.05 * diag, size=(cfg.swarm_size, dim))
    positions[0] = base  # one exact bounding-box particle anchors the swarm
    lo = np.zeros(dim)
    hi = np.tile([float(width), float(height)], cfg.k)
    positions = np.clip(positions, lo, hi)
    velocities = gen.uniform(-vmax, vmax, size=(cfg.swarm_size, dim))

    fits = _batch_fitness(positions, mask_flat, px, py)
    best_positions = positions.copy()
    best_fits = fits.copy()
    g = int(np.argmax(best_fits))
    g_pos, g_fit = best_positions[g].copy(), float(best_fits[g])

    for _ in range(cfg.iterations):
        r1 = gen.random(size=(cfg.swarm_size, dim))
        r2 = gen.random(size=(cfg.swarm_size, dim))
        velocities = (
            cfg.inertia * velocities
            + cfg.cognitive * r1 * (best_positions - positions)
            + cfg.social * r2 * (g_pos[None, :] - positions)
        )
        np.clip(velocities, -vmax, vmax, out=velocities)
        positions = np.clip(positions + velocities, lo, hi)
        fits = _batch_fitness(positions, mask_flat, px, py)
        improved = fits > best_fits
        best_positions[improved] = positions[improved]
        best_fits[improved] = fits[improved]
        g = int(np.argmax(best_fits))
        if best_fits[g] > g_fit:
            g_pos, g_fit = best_positions[g].copy(), float(best_fits[g])
        if history is not None:
            history.append(g_fit)

    params = PathParams.from_points(g_pos.reshape(-1, 2))
    return params, g_fit


def _spawned_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0])


def fit_scene(
    instance_masks: list[PolygonMask], captions: list[str], cfg: PsoConfig
) -> LayoutScene:
    """Fit one polygon per mask and assemble a scene.

    The vertex count is chosen per mask: every k in [4, 6] is tried and the
    best achieved IoU wins, ties going to fewer vertices.  Appearance tokens
    come from the caption (whitespace split).
    """
    if len(instance_masks) != len(captions):
        raise LengthMismatch(
            f"{len(instance_masks)} masks vs {len(captions)} captions"
        )
    if instance_masks:
        w, h = instance_masks[0].width, instance_masks[0].height
        for m in instance_masks[1:]:
            if (m.width, m.height) != (w, h):
                raise DimensionMismatch("instance masks must share dimensions")
    else:
        w, h = 1, 1
    prims = []
    for i, (mask, caption) in enumerate(zip(instance_masks, captions)):
        best: tuple[PathParams, float] | None = None
        for k in range(K_MIN, K_MAX + 1):
            kcfg = replace(cfg, k=k, seed=_spawned_seed(cfg.seed, i, k))
            try:
                params, iou = fit_polygon(mask, kcfg)
            except EmptyMask as e:
                raise EmptyMask(f"mask {i}: {e}") from e
            if best is None or iou > best[1]:
                best = (params, iou)
        appearance = AppearanceDescription(tokens=tuple(caption.split()))
        prims.append(PathClipPrimitive(path=best[0], appearance=appearance))
    return LayoutScene(canvas_w=w, canvas_h=h, global_caption="", primitives=tuple(prims))
