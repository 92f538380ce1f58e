"""Flat `key = value` pipeline configuration.

One dataclass holds every tunable: schedule lengths, PSO parameters, guidance
strengths, planner backend, training knobs, and paths.  The file format is
UTF-8 lines of `key = value` with `#` comments; unknown keys are rejected.
The `full_scale_*` entries record the reference large-model settings and are
not consumed by the toy pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .guidance import GuidanceConfig
from .polyfit import PsoConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    canvas: int = 32
    # diffusion schedule (toy scale; full-scale reference settings below)
    steps_sample: int = 50
    steps_invert: int = 100
    full_scale_steps_sample: int = 200
    full_scale_steps_invert: int = 1000
    full_scale_guided_steps: int = 120
    # polygon fitting
    pso_swarm_size: int = 64
    pso_iterations: int = 200
    pso_inertia: float = 0.72
    pso_cognitive: float = 1.49
    pso_social: float = 1.49
    pso_velocity_clamp: float = 0.2
    pso_k: int = 0  # 0 selects k per mask by best IoU
    # guidance
    omega: float = 1.0
    lambda_s: float = 600.0
    lambda_a: float = 120.0
    balance_s: float = 1.0
    n_aux: int = 2
    guided_steps: int = 0  # 0 resolves to 60% of steps_sample
    rank: int = 0  # 0 selects rank by retained energy (cap 16)
    gradient_mode: str = "analytic"
    attention_masks: bool = True
    # planner
    planner_backend: str = "mock"
    planner_fixtures: str = "fixtures"
    planner_max_tokens: int = 512
    # encoder dims
    d_theta: int = 64
    d_b: int = 64
    num_freqs: int = 8
    # toy training
    train_samples: int = 256
    train_epochs: int = 30
    batch_size: int = 16
    lr: float = 0.001
    momentum: float = 0.9
    caption_dropout: float = 0.5
    channels: int = 32
    # evaluation
    iou_tolerance: float = 0.5
    min_component_area: int = 4
    # paths
    weights: str = "toy_denoiser.pt"

    def to_pso_config(self, k: int = 0, seed: int | None = None) -> PsoConfig:
        chosen_k = k or self.pso_k or 4
        return PsoConfig(
            swarm_size=self.pso_swarm_size,
            iterations=self.pso_iterations,
            inertia=self.pso_inertia,
            cognitive=self.pso_cognitive,
            social=self.pso_social,
            k=chosen_k,
            seed=self.seed if seed is None else seed,
            velocity_clamp=self.pso_velocity_clamp,
        )

    def to_guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(
            omega=self.omega,
            lambda_s=self.lambda_s,
            lambda_a=self.lambda_a,
            balance_s=self.balance_s,
            n_aux=self.n_aux,
            guided_steps=self.guided_steps or None,
            rank=self.rank or None,
            gradient_mode=self.gradient_mode,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return raw


def parse_config(text: str) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return PipelineConfig(**values)


def serialize_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
