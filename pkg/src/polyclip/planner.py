"""Layout planning: prompt construction, completion backends, response parsing.

The planner turns a free-form user prompt into a scene of polygon primitives
by prompting an external text-completion service with in-context exemplars.
A fixture-replay mock stands in for the remote service in tests and CI.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import requests

from .pathclip import (
    LayoutScene,
    PathClipError,
    PathClipPrimitive,
    PathParams,
    parse_css,
    polygon_iou,
    rasterize,
    serialize_css,
)

ENV_PLANNER_URL = "POLYCLIP_PLANNER_URL"
ENV_PLANNER_API_KEY = "POLYCLIP_PLANNER_API_KEY"

# Original instruction prose for the shipped default template.
DEFAULT_INSTRUCTION = (
    "You place every object mentioned in the input prompt onto a square canvas. "
    "For each object, answer with its appearance words followed by a bracketed "
    "declaration giving cx, cy, w, h and a clip-path polygon, all in px units. "
    "Separate objects with commas and output nothing else."
)


# Shipped few-shot exemplars; layouts must parse under the primitive grammar.
DEFAULT_EXEMPLARS: tuple[tuple[str, str], ...] = (
    (
        "a red square in the upper left and a blue square in the lower right",
        "red [cx: 8.00px, cy: 8.00px, w: 10.00px, h: 10.00px, "
        "clip-path: polygon(3.00px 3.00px, 13.00px 3.00px, 13.00px 13.00px, 3.00px 13.00px)], "
        "blue [cx: 24.00px, cy: 24.00px, w: 10.00px, h: 10.00px, "
        "clip-path: polygon(19.00px 19.00px, 29.00px 19.00px, 29.00px 29.00px, 19.00px 29.00px)]",
    ),
    (
        "a green pentagon centered on the canvas",
        "green [cx: 16.00px, cy: 15.33px, w: 13.32px, h: 12.66px, "
        "clip-path: polygon(16.00px 9.00px, 22.66px 13.84px, 20.11px 21.66px, "
        "11.89px 21.66px, 9.34px 13.84px)]",
    ),
)


class EmptyExemplars(ValueError):
    pass


class InvalidExemplar(ValueError):
    pass


class NoPrimitivesFound(ValueError):
    pass


class BlockParseError(ValueError):
    def __init__(self, block_index: int, cause: Exception):
        super().__init__(f"block {block_index}: {cause}")
        self.block_index = block_index
        self.cause = cause


class FixtureMissing(FileNotFoundError):
    pass


class PlannerHTTPError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    task_instruction: str
    exemplars: tuple[tuple[str, str], ...]  # (input_prompt, output_layout)
    inference_condition: str

    def __post_init__(self):
        if not self.task_instruction:
            raise ValueError("task_instruction must be non-empty")
        for inp, out in self.exemplars:
            _require_parseable_layout(out)

    def render(self) -> str:
        return build_prompt(self.inference_condition, list(self.exemplars), self.task_instruction)


def _require_parseable_layout(layout: str) -> None:
    blocks = _extract_blocks(layout)
    if not blocks:
        raise InvalidExemplar(f"exemplar layout has no primitive blocks: {layout!r}")
    for idx, (name, body) in enumerate(blocks, start=1):
        try:
            parse_css(f"{name} [{body}]")
        except PathClipError as e:
            raise InvalidExemplar(f"exemplar block {idx} does not parse: {e}") from e


def build_prompt(
    user_text: str, exemplars: Sequence[tuple[str, str]], instruction: str
) -> str:
    """Deterministic concatenation: instruction, then each exemplar as an
    Input/Output block, then the open Input/Output block for the user text."""
    if not exemplars:
        raise EmptyExemplars("at least one exemplar is required")
    for inp, out in exemplars:
        _require_parseable_layout(out)
    parts = [instruction, ""]
    for inp, out in exemplars:
        parts.append(f"Input: {inp}")
        parts.append(f"Output: {out}")
        parts.append("")
    parts.append(f"Input: {user_text}")
    parts.append("Output:")
    return "\n".join(parts)


_WORD_RE = re.compile(r"^[A-Za-z0-9_'-]+$")


def _extract_blocks(text: str) -> list[tuple[str, str]]:
    """Find every "name [ ... ]" block; the name is the maximal trailing run
    of word tokens before the opening bracket."""
    blocks = []
    cursor = 0
    while True:
        open_i = text.find("[", cursor)
        if open_i < 0:
            break
        close_i = text.find("]", open_i + 1)
        if close_i < 0:
            break
        prefix_tokens = text[cursor:open_i].split()
        name_tokens: list[str] = []
        for tok in reversed(prefix_tokens):
            if _WORD_RE.match(tok):
                name_tokens.append(tok)
            else:
                break
        name_tokens.reverse()
        blocks.append((" ".join(name_tokens), text[open_i + 1 : close_i]))
        cursor = close_i + 1
    return blocks


def parse_response(
    text: str, canvas_w: int, canvas_h: int, caption: str = ""
) -> LayoutScene:
    """Extract every primitive block from a completion, clamp vertices to the
    canvas, and assemble a scene carrying the user prompt as its caption."""
    blocks = _extract_blocks(text)
    if not blocks:
        raise NoPrimitivesFound(f"no primitive blocks in response: {text[:80]!r}")
    prims = []
    for idx, (name, body) in enumerate(blocks, start=1):
        try:
            if not name:
                raise PathClipError("block has no name tokens", 0)
            prim = parse_css(f"{name} [{body}]")
            clamped = [
                (min(max(x, 0.0), float(canvas_w)), min(max(y, 0.0), float(canvas_h)))
                for x, y in prim.path.clip_points
            ]
            path = PathParams.from_points(clamped)
        except (PathClipError, ValueError) as e:
            raise BlockParseError(idx, e) from e
        prims.append(PathClipPrimitive(path=path, appearance=prim.appearance))
    return LayoutScene(
        canvas_w=canvas_w, canvas_h=canvas_h, global_caption=caption, primitives=tuple(prims)
    )


def scene_layout_text(scene: LayoutScene) -> str:
    """Scene primitives in the exemplar output format (round trips through
    parse_response)."""
    return ", ".join(serialize_css(p) for p in scene.primitives)


# ---------------------------------------------------------------------------
# backends


class PlannerBackend:
    """Completion interface; implementations must be safe for concurrent calls."""

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class MockBackend(PlannerBackend):
    """Fixture replay: responses stored as <sha256-of-prompt>.txt files."""

    def __init__(self, fixture_dir: str | os.PathLike):
        self.fixture_dir = Path(fixture_dir)

    def fixture_path(self, prompt: str) -> Path:
        return self.fixture_dir / f"{prompt_digest(prompt)}.txt"

    def complete(self, prompt: str) -> str:
        path = self.fixture_path(prompt)
        if not path.is_file():
            raise FixtureMissing(f"no fixture for prompt digest {prompt_digest(prompt)}")
        return path.read_text(encoding="utf-8")

    def record(self, prompt: str, response: str) -> Path:
        self.fixture_dir.mkdir(parents=True, exist_ok=True)
        path = self.fixture_path(prompt)
        path.write_text(response, encoding="utf-8")
        return path


class RemoteBackend(PlannerBackend):
    """Single-POST JSON protocol: {"prompt": ..., "max_tokens": ...} in,
    {"text": ...} out."""

    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        max_tokens: int = 512,
        max_in_flight: int = 4,
    ):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.max_tokens = max_tokens
        self._gate = threading.BoundedSemaphore(max_in_flight)

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteBackend":
        url = os.environ.get(ENV_PLANNER_URL)
        if not url:
            raise PlannerHTTPError(f"{ENV_PLANNER_URL} is not set")
        return cls(url=url, api_key=os.environ.get(ENV_PLANNER_API_KEY), **kwargs)

    def complete(self, prompt: str) -> str:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"prompt": prompt, "max_tokens": self.max_tokens}
        last_error: Exception | None = None
        with self._gate:
            for _ in range(self.retries + 1):
                try:
                    resp = requests.post(
                        self.url, json=body, headers=headers, timeout=self.timeout
                    )
                    if resp.status_code >= 500:
                        last_error = PlannerHTTPError(f"server error {resp.status_code}")
                        continue
                    resp.raise_for_status()
                    return str(resp.json()["text"])
                except (requests.ConnectionError, requests.Timeout) as e:
                    last_error = e
        raise PlannerHTTPError(f"planner request failed after retries: {last_error}")


# ---------------------------------------------------------------------------
# scene validation


@dataclass(frozen=True)
class SceneWarning:
    kind: str  # "out_of_canvas" | "overlap" | "duplicate"
    message: str
    indices: tuple[int, ...]
    value: float = 0.0


def validate_scene(scene: LayoutScene, overlap_iou: float = 0.7) -> list[SceneWarning]:
    """Report suspicious layouts without mutating the scene: vertices outside
    the canvas, pairwise mask overlaps above the IoU threshold, and repeated
    category+appearance pairs."""
    warnings: list[SceneWarning] = []
    for i, prim in enumerate(scene.primitives):
        for x, y in prim.path.clip_points:
            if not (0 <= x <= scene.canvas_w and 0 <= y <= scene.canvas_h):
                warnings.append(
                    SceneWarning(
                        kind="out_of_canvas",
                        message=f"primitive {i} vertex ({x}, {y}) outside canvas",
                        indices=(i,),
                    )
                )
                break
    masks = [rasterize(p, scene.canvas_w, scene.canvas_h) for p in scene.primitives]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            iou = polygon_iou(masks[i], masks[j])
            if iou > overlap_iou:
                warnings.append(
                    SceneWarning(
                        kind="overlap",
                        message=f"primitives {i} and {j} overlap with IoU {iou:.3f}",
                        indices=(i, j),
                        value=iou,
                    )
                )
    seen: dict[tuple[str, ...], int] = {}
    for i, prim in enumerate(scene.primitives):
        key = prim.appearance.tokens
        if key in seen:
            warnings.append(
                SceneWarning(
                    kind="duplicate",
                    message=f"primitives {seen[key]} and {i} share appearance {prim.appearance.text!r}",
                    indices=(seen[key], i),
                )
            )
        else:
            seen[key] = i
    return warnings
