"""Polygonal clip-path primitives: CSS-style text grammar and raster geometry.

A primitive binds a simple polygon (a clipped rectangle described by its
bounding box plus clip vertices) to a textual appearance description.  All
types are immutable values; all operations are pure functions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MIN_VERTICES = 4
DEFAULT_MAX_VERTICES = 6
COORD_DECIMALS = 2  # canonical serialization precision


class PathClipError(ValueError):
    """Base for grammar errors; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MissingField(PathClipError):
    pass


class MalformedNumber(PathClipError):
    pass


class VertexCountOutOfRange(PathClipError):
    pass


class UnbalancedBrackets(PathClipError):
    pass


class DegeneratePolygon(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometry helpers


def normalize_vertices(points: Iterable[tuple[float, float]]) -> tuple[tuple[float, float], ...]:
    """Canonical vertex order: rounded to 2 decimals, sorted by angle around
    the centroid (ties by radius, then coordinates).

    The input order is never trusted; angular sorting guarantees a simple,
    star-shaped polygon for vertices in general position.
    """
    pts = [(round(float(x), COORD_DECIMALS), round(float(y), COORD_DECIMALS)) for x, y in points]
    if len(pts) < 3:
        raise DegeneratePolygon(f"need at least 3 vertices, got {len(pts)}")
    cx = sum(p[0] for p in pts) / len(pts)
    cy = sum(p[1] for p in pts) / len(pts)

    def key(p):
        dx, dy = p[0] - cx, p[1] - cy
        return (math.atan2(dy, dx), dx * dx + dy * dy, p[0], p[1])

    return tuple(sorted(pts, key=key))


def polygon_area(points: Sequence[tuple[float, float]]) -> float:
    """Unsigned shoelace area."""
    acc = 0.0
    n = len(points)
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2.0


def bounding_box(clip_points: Sequence[tuple[float, float]]) -> list[float]:
    """Axis-aligned box [cx, cy, w, h] of a vertex set."""
    if len(clip_points) < 3:
        raise DegeneratePolygon(f"need at least 3 vertices, got {len(clip_points)}")
    xs = [p[0] for p in clip_points]
    ys = [p[1] for p in clip_points]
    w = max(xs) - min(xs)
    h = max(ys) - min(ys)
    if w == 0 or h == 0:
        raise DegeneratePolygon("bounding box collapses to a segment or point")
    return [min(xs) + w / 2.0, min(ys) + h / 2.0, w, h]


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class PathParams:
    """Polygon path parameters: derived bounding box plus clip vertices.

    The box [cx, cy, w, h] is always recomputed from the (canonically
    ordered) clip points; vertices are absolute canvas coordinates.
    """

    cx: float
    cy: float
    w: float
    h: float
    clip_points: tuple[tuple[float, float], ...]

    @classmethod
    def from_points(
        cls, points: Iterable[tuple[float, float]], max_vertices: int = DEFAULT_MAX_VERTICES
    ) -> "PathParams":
        pts = normalize_vertices(points)
        if not MIN_VERTICES <= len(pts) <= max_vertices:
            raise VertexCountOutOfRange(
                f"vertex count {len(pts)} outside [{MIN_VERTICES}, {max_vertices}]"
            )
        cx, cy, w, h = bounding_box(pts)
        return cls(cx=cx, cy=cy, w=w, h=h, clip_points=pts)

    @property
    def tau(self) -> list[float]:
        """Flat parameter vector [cx, cy, w, h, x1, y1, ..., xk, yk]."""
        out = [self.cx, self.cy, self.w, self.h]
        for x, y in self.clip_points:
            out.extend([x, y])
        return out


@dataclass(frozen=True)
class AppearanceDescription:
    """Token sequence describing one object; the first token is the category."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens or not self.tokens[0]:
            raise ValueError("appearance needs a non-empty category token")

    @property
    def category(self) -> str:
        return self.tokens[0]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class PathClipPrimitive:
    path: PathParams
    appearance: AppearanceDescription


@dataclass(frozen=True)
class LayoutScene:
    canvas_w: int
    canvas_h: int
    global_caption: str
    primitives: tuple[PathClipPrimitive, ...]

    def __post_init__(self):
        if self.canvas_w < 1 or self.canvas_h < 1:
            raise ValueError("canvas dimensions must be positive")


@dataclass(frozen=True, eq=False)
class PolygonMask:
    """Binary raster grid, row-major, 1 = inside the polygon."""

    width: int
    height: int
    cells: np.ndarray  # (height, width) uint8 in {0, 1}, read-only

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"cells shape {cells.shape} != (height={self.height}, width={self.width})"
            )
        if cells.max(initial=0) > 1:
            raise ValueError("mask cells must be 0 or 1")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PolygonMask":
        arr = np.asarray(arr)
        return cls(width=arr.shape[1], height=arr.shape[0], cells=(arr > 0).astype(np.uint8))

    def foreground_count(self) -> int:
        return int(self.cells.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolygonMask):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and bool(np.array_equal(self.cells, other.cells))
        )


# ---------------------------------------------------------------------------
# CSS grammar

_FIELD_ORDER = ("cx", "cy", "w", "h", "clip-path")


class _Scanner:
    """Hand-written recursive-descent scanner over the primitive grammar."""

    def __init__(self, text: str):
        self.text = text
        self.i = 0

    def byte_offset(self, i: int | None = None) -> int:
        pos = self.i if i is None else i
        return len(self.text[:pos].encode("utf-8"))

    def skip_ws(self):
        while self.i < len(self.text) and self.text[self.i].isspace():
            self.i += 1

    def at_end(self) -> bool:
        return self.i >= len(self.text)

    def peek(self) -> str:
        return self.text[self.i] if self.i < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            raise UnbalancedBrackets(f"expected {ch!r}", self.byte_offset())
        self.i += 1

    def read_word(self) -> str:
        start = self.i
        while self.i < len(self.text) and (
            self.text[self.i].isalnum() or self.text[self.i] in "-_'"
        ):
            self.i += 1
        return self.text[start : self.i]

    def read_px_number(self) -> float:
        self.skip_ws()
        start = self.i
        while self.i < len(self.text) and (self.text[self.i].isdigit() or self.text[self.i] in "+-.eE"):
            self.i += 1
        token = self.text[start : self.i]
        try:
            value = float(token)
        except ValueError:
            raise MalformedNumber(f"bad numeric token {token!r}", self.byte_offset(start)) from None
        if not self.text[self.i : self.i + 2] == "px":
            raise MalformedNumber(f"number {token!r} missing px suffix", self.byte_offset(start))
        self.i += 2
        return value


def parse_css(text: str, max_vertices: int = DEFAULT_MAX_VERTICES) -> PathClipPrimitive:
    """Parse one primitive declaration of the form

        name... [cx: ?px, cy: ?px, w: ?px, h: ?px, clip-path: polygon(?px ?px, ...)]

    Whitespace between tokens is ignored; the px suffix is mandatory on
    every number.  Errors carry the byte offset of the offending token.
    """
    sc = _Scanner(text)
    bracket = text.find("[")
    if bracket < 0:
        raise UnbalancedBrackets("no '[' found", sc.byte_offset(len(text)))
    name_tokens = tuple(text[:bracket].split())
    if not name_tokens:
        raise MissingField("category name before '['", 0)

    sc.i = bracket + 1
    fields: dict[str, float] = {}
    points: list[tuple[float, float]] | None = None
    while True:
        sc.skip_ws()
        if sc.at_end():
            raise UnbalancedBrackets("missing closing ']'", sc.byte_offset())
        if sc.peek() == "]":
            sc.i += 1
            break
        key_start = sc.i
        key = sc.read_word()
        # the template sometimes spells the clip key with a space
        if key == "clip":
            sc.skip_ws()
            rest = sc.read_word()
            key = "clip-path" if rest in ("path", "-path") else key
        if key not in _FIELD_ORDER:
            raise MissingField(f"unknown field {key!r}", sc.byte_offset(key_start))
        sc.skip_ws()
        if sc.peek() != ":":
            raise MissingField(f"field {key!r} missing ':'", sc.byte_offset())
        sc.i += 1
        if key == "clip-path":
            points = _parse_polygon(sc)
        else:
            fields[key] = sc.read_px_number()
        sc.skip_ws()
        if sc.peek() == ",":
            sc.i += 1

    sc.skip_ws()
    if not sc.at_end():
        raise UnbalancedBrackets("trailing text after ']'", sc.byte_offset())

    for key in ("cx", "cy", "w", "h"):
        if key not in fields:
            raise MissingField(f"field {key!r} absent", sc.byte_offset())
    if points is None:
        raise MissingField("field 'clip-path' absent", sc.byte_offset())
    if not MIN_VERTICES <= len(points) <= max_vertices:
        raise VertexCountOutOfRange(
            f"vertex count {len(points)} outside [{MIN_VERTICES}, {max_vertices}]",
            sc.byte_offset(),
        )
    # the rectangle is derived, never authoritative: recompute it from the points
    path = PathParams.from_points(points, max_vertices=max_vertices)
    return PathClipPrimitive(path=path, appearance=AppearanceDescription(tokens=name_tokens))


def _parse_polygon(sc: _Scanner) -> list[tuple[float, float]]:
    sc.skip_ws()
    word_start = sc.i
    if sc.read_word() != "polygon":
        raise MissingField("clip-path value must be polygon(...)", sc.byte_offset(word_start))
    sc.skip_ws()
    sc.expect("(")
    points: list[tuple[float, float]] = []
    while True:
        x = sc.read_px_number()
        y = sc.read_px_number()
        points.append((x, y))
        sc.skip_ws()
        if sc.peek() == ",":
            sc.i += 1
            continue
        if sc.peek() == ")":
            sc.i += 1
            return points
        raise UnbalancedBrackets("expected ',' or ')' in polygon()", sc.byte_offset())


def serialize_css(p: PathClipPrimitive) -> str:
    """Canonical single-line form; parse_css inverts it exactly."""
    fmt = f"%.{COORD_DECIMALS}f"
    nums = [p.path.cx, p.path.cy, p.path.w, p.path.h]
    cx, cy, w, h = (fmt % v for v in nums)
    pts = ", ".join(f"{fmt % x}px {fmt % y}px" for x, y in p.path.clip_points)
    return (
        f"{p.appearance.text} [cx: {cx}px, cy: {cy}px, w: {w}px, h: {h}px, "
        f"clip-path: polygon({pts})]"
    )


# ---------------------------------------------------------------------------
# rasterization and mask algebra


def _even_odd_inside(points: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd (crossing number) test of query points against one polygon.

    points: (k, 2); px, py: flat query coordinates.  Uses the half-open edge
    rule so results on boundaries are deterministic.
    """
    x0 = points[:, 0][:, None]
    y0 = points[:, 1][:, None]
    x1 = np.roll(points[:, 0], -1)[:, None]
    y1 = np.roll(points[:, 1], -1)[:, None]
    crosses = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_int = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    hits = crosses & (px < x_int)
    return hits.sum(axis=0) % 2 == 1


def rasterize(p: PathClipPrimitive, width: int, height: int) -> PolygonMask:
    """Rasterize on a width x height grid; cell (i, j) is 1 iff its center
    (j + 0.5, i + 0.5) lies inside the polygon under the even-odd rule."""
    if width < 1 or height < 1:
        raise ValueError("raster dimensions must be >= 1")
    pts = np.asarray(p.path.clip_points, dtype=np.float64)
    if polygon_area(p.path.clip_points) == 0.0:
        raise DegeneratePolygon("polygon has zero area after normalization")
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    px = jj.ravel() + 0.5
    py = ii.ravel() + 0.5
    inside = _even_odd_inside(pts, px, py)
    return PolygonMask(width=width, height=height, cells=inside.reshape(height, width).astype(np.uint8))


def polygon_iou(a: PolygonMask, b: PolygonMask) -> float:
    """Intersection over union of two equal-size masks; 0 when both empty."""
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(
            f"mask dimensions differ: {(a.width, a.height)} vs {(b.width, b.height)}"
        )
    inter = int(np.logical_and(a.cells, b.cells).sum())
    union = int(np.logical_or(a.cells, b.cells).sum())
    if union == 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# scene JSON file format


class SceneFormatError(ValueError):
    pass


def scene_to_json(scene: LayoutScene) -> str:
    obj = {
        "canvas": [scene.canvas_w, scene.canvas_h],
        "caption": scene.global_caption,
        "objects": [
            {"css": serialize_css(p), "appearance": p.appearance.text}
            for p in scene.primitives
        ],
    }
    return json.dumps(obj, indent=2)


def scene_from_json(text: str, max_vertices: int = DEFAULT_MAX_VERTICES) -> LayoutScene:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"not valid JSON: {e}") from e
    try:
        canvas_w, canvas_h = (int(v) for v in obj["canvas"])
        caption = str(obj.get("caption", ""))
        raw_objects = obj["objects"]
    except (KeyError, TypeError, ValueError) as e:
        raise SceneFormatError(f"bad scene structure: {e}") from e
    prims = []
    for idx, entry in enumerate(raw_objects):
        prim = parse_css(entry["css"], max_vertices=max_vertices)
        appearance = str(entry.get("appearance", ""))
        if appearance and appearance != prim.appearance.text:
            raise SceneFormatError(
                f"object {idx}: appearance field {appearance!r} disagrees with css tokens"
            )
        prims.append(prim)
    return LayoutScene(
        canvas_w=canvas_w, canvas_h=canvas_h, global_caption=caption, primitives=tuple(prims)
    )
