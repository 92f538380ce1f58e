"""Structure and appearance guidance for the toy sampler.

Per timestep, features from auxiliary primitive-generation runs define a
semantic basis (top right-singular vectors of the mean-centered feature
matrix).  Projections onto that basis — structure coordinates — drive three
energies: foreground structure agreement with an inverted condition image,
background suppression above per-channel thresholds, and appearance-statistic
matching.  Their gradients with respect to x_t steer classifier-free-guided
DDIM sampling for the first `guided_steps` steps.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import (
    Denoiser,
    FeatureMap,
    NoiseSchedule,
    SceneConditioning,
    Trajectory,
    ddim_invert,
    ddim_step,
    derive_seed,
    downsample_mask,
    image_to_tensor,
    seeded_noise,
)
from .pathclip import LayoutScene, PolygonMask, rasterize
from .polyfit import LengthMismatch

DEFAULT_RANK_CAP = 16
ENERGY_KEYS = ("g_sf", "g_sb", "g_a")


class ShapeMismatch(ValueError):
    pass


class RankTooLarge(ValueError):
    pass


class NonFiniteEnergy(ValueError):
    pass


@dataclass(frozen=True)
class SemanticBasis:
    """Top-r right singular vectors (rows) of one timestep's centered features."""

    t: int
    basis: torch.Tensor  # (r, C_f), orthonormal rows
    mean: torch.Tensor  # (C_f,), the centering subtracted before SVD
    singular_values: torch.Tensor  # full spectrum, non-increasing
    retained_energy: float

    @property
    def rank(self) -> int:
        return self.basis.shape[0]


@dataclass(frozen=True)
class StructureCoordinates:
    values: torch.Tensor  # (h_f, w_f, r)


@dataclass(frozen=True)
class ChannelThresholds:
    values: torch.Tensor  # (r,)


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 1.0
    lambda_s: float = 600.0
    lambda_a: float | None = None  # defaults to 0.2 * lambda_s
    balance_s: float = 1.0
    n_aux: int = 2
    guided_steps: int | None = None  # defaults to 60% of the schedule length
    rank: int | None = None  # defaults to energy-based selection, capped at 16
    gradient_mode: str = "analytic"

    def __post_init__(self):
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be >= 0")
        if self.lambda_a is None:
            object.__setattr__(self, "lambda_a", 0.2 * self.lambda_s)
        if self.lambda_a < 0:
            raise ValueError("lambda_a must be >= 0")
        if self.n_aux < 1:
            raise ValueError("n_aux must be >= 1")
        if self.gradient_mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")

    def resolved_guided_steps(self, T: int) -> int:
        steps = self.guided_steps if self.guided_steps is not None else round(0.6 * T)
        return max(0, min(steps, T))


# ---------------------------------------------------------------------------
# semantic basis


def _check_same_grid(runs: Sequence[Trajectory]) -> None:
    shapes = set()
    for run in runs:
        for _, _, f in run.entries:
            if f is not None:
                shapes.add(tuple(f.values.shape))
    if len(shapes) != 1:
        raise ShapeMismatch(f"feature grids differ across runs: {sorted(shapes)}")


def compute_semantic_basis(
    runs: Sequence[Trajectory], r: int | None = None
) -> dict[int, SemanticBasis]:
    """Per timestep shared by all runs: stack every spatial feature vector,
    mean-center the columns, SVD, keep the top-r right singular vectors.

    With r = None the rank is the smallest one retaining >= 90% of the
    squared-singular-value energy, capped at 16.
    """
    if not runs:
        raise ShapeMismatch("no trajectories given")
    _check_same_grid(runs)
    per_t = [run.features_by_t() for run in runs]
    common = set(per_t[0])
    for d in per_t[1:]:
        common &= set(d)
    if not common:
        raise ShapeMismatch("runs share no feature timesteps")
    out: dict[int, SemanticBasis] = {}
    for t in sorted(common):
        rows = np.concatenate(
            [d[t].values.detach().numpy().reshape(-1, d[t].values.shape[-1]) for d in per_t]
        )
        c_f = rows.shape[1]
        if r is not None and r > c_f:
            raise RankTooLarge(f"rank {r} exceeds channel count {c_f}")
        mean = rows.mean(axis=0)
        _, sv, vt = np.linalg.svd(rows - mean, full_matrices=False)
        energy = sv**2
        total = float(energy.sum())
        if total <= 0.0:
            cum = np.ones_like(energy)
        else:
            cum = np.cumsum(energy) / total
        if r is None:
            rank = min(DEFAULT_RANK_CAP, int(np.searchsorted(cum, 0.9) + 1), c_f)
        else:
            rank = r
        out[t] = SemanticBasis(
            t=t,
            basis=torch.from_numpy(vt[:rank].copy()),
            mean=torch.from_numpy(mean),
            singular_values=torch.from_numpy(sv.copy()),
            retained_energy=float(cum[rank - 1]),
        )
    return out


def project_features(f_t: FeatureMap, basis: SemanticBasis) -> StructureCoordinates:
    """S[i, j] = B (F[i, j] - mean); differentiable in the features."""
    c_f = f_t.values.shape[-1]
    if basis.basis.shape[1] != c_f:
        raise ShapeMismatch(
            f"basis channel count {basis.basis.shape[1]} != features {c_f}"
        )
    return StructureCoordinates(values=(f_t.values - basis.mean) @ basis.basis.T)


def channel_thresholds(coords: StructureCoordinates) -> ChannelThresholds:
    """Per-channel spatial maximum of the coordinates."""
    return ChannelThresholds(values=coords.values.amax(dim=(0, 1)))


# ---------------------------------------------------------------------------
# energies


def cfg_combine(
    eps_cond: torch.Tensor, eps_uncond: torch.Tensor, omega: float
) -> torch.Tensor:
    """Classifier-free combination (1 + omega) * cond - omega * uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatch(
            f"eps shapes differ: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def appearance_stats(coords: StructureCoordinates, f_t: FeatureMap) -> torch.Tensor:
    """One feature-space vector per retained channel: the spatial average of
    F weighted by the logistic sigmoid of that channel's coordinates.
    Returns (r, C_f)."""
    s, f = coords.values, f_t.values
    if s.shape[:2] != f.shape[:2]:
        raise ShapeMismatch(f"grids differ: {tuple(s.shape[:2])} vs {tuple(f.shape[:2])}")
    w = torch.sigmoid(s)  # (h, w, r); strictly positive, so sums never vanish
    num = torch.einsum("ijk,ijc->kc", w, f)
    return num / w.sum(dim=(0, 1))[:, None]


def appearance_energy(
    stats_current: torch.Tensor, stats_reference: torch.Tensor, n_stats: int | None = None
) -> torch.Tensor:
    """Mean squared distance between matched stat vectors."""
    if stats_current.shape != stats_reference.shape:
        raise LengthMismatch(
            f"stat shapes differ: {tuple(stats_current.shape)} vs {tuple(stats_reference.shape)}"
        )
    if n_stats is not None and stats_current.shape[0] != n_stats:
        raise LengthMismatch(f"expected {n_stats} stats, got {stats_current.shape[0]}")
    return ((stats_current - stats_reference) ** 2).sum(dim=-1).mean()


def structure_energy_fg(
    coords: StructureCoordinates, coords_ref: StructureCoordinates, mask: PolygonMask
) -> torch.Tensor:
    """Mask-weighted mean squared coordinate gap against the reference."""
    s, s_ref = coords.values, coords_ref.values
    if s.shape != s_ref.shape:
        raise ShapeMismatch(f"coordinate shapes differ: {tuple(s.shape)} vs {tuple(s_ref.shape)}")
    if (mask.height, mask.width) != tuple(s.shape[:2]):
        raise ShapeMismatch(
            f"mask grid {(mask.height, mask.width)} != coordinates {tuple(s.shape[:2])}"
        )
    m = torch.from_numpy(mask.cells.astype(np.float64))
    denom = m.sum()
    if float(denom) == 0.0:
        warnings.warn("foreground structure energy over an empty mask is 0", stacklevel=2)
        return torch.zeros((), dtype=torch.float64)
    return (m * ((s - s_ref) ** 2).sum(dim=-1)).sum() / denom


def structure_energy_bg(
    coords: StructureCoordinates,
    tau_t: ChannelThresholds,
    mask: PolygonMask,
    balance_s: float,
) -> torch.Tensor:
    """Penalizes background coordinates exceeding the per-channel thresholds."""
    s = coords.values
    if (mask.height, mask.width) != tuple(s.shape[:2]):
        raise ShapeMismatch(
            f"mask grid {(mask.height, mask.width)} != coordinates {tuple(s.shape[:2])}"
        )
    if tau_t.values.shape[0] != s.shape[2]:
        raise ShapeMismatch(
            f"threshold count {tau_t.values.shape[0]} != coordinate channels {s.shape[2]}"
        )
    bg = 1.0 - torch.from_numpy(mask.cells.astype(np.float64))
    denom = bg.sum()
    if float(denom) == 0.0:
        warnings.warn("background structure energy under a full mask is 0", stacklevel=2)
        return torch.zeros((), dtype=torch.float64)
    excess = torch.clamp(s - tau_t.values, min=0.0)
    return balance_s * (bg * (excess**2).sum(dim=-1)).sum() / denom


def energy_gradient(
    energy_closure: Callable[[torch.Tensor], torch.Tensor],
    x_t: torch.Tensor,
    mode: str = "analytic",
    fd_scale: float = 1e-3,
) -> torch.Tensor:
    """Gradient of a scalar energy with respect to x_t.

    Analytic mode differentiates through the closure; finite-difference mode
    runs coordinate-wise central differences with per-coordinate step
    fd_scale * max(1, |x_i|) and is only meant for small inputs.
    """
    if mode == "analytic":
        x = x_t.detach().clone().requires_grad_(True)
        e = torch.as_tensor(energy_closure(x))
        if not torch.isfinite(e):
            raise NonFiniteEnergy(f"energy is {float(e.detach())}")
        if e.grad_fn is None:
            return torch.zeros_like(x_t)
        (grad,) = torch.autograd.grad(e, x, allow_unused=True)
        return torch.zeros_like(x_t) if grad is None else grad
    if mode != "finite-difference":
        raise ValueError(f"unknown gradient mode {mode!r}")
    x = x_t.detach().clone()
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        h = fd_scale * max(1.0, abs(float(flat[i])))
        orig = float(flat[i])
        flat[i] = orig + h
        e_plus = float(energy_closure(x))
        flat[i] = orig - h
        e_minus = float(energy_closure(x))
        flat[i] = orig
        if not (math.isfinite(e_plus) and math.isfinite(e_minus)):
            raise NonFiniteEnergy("energy non-finite during finite differencing")
        grad[i] = (e_plus - e_minus) / (2.0 * h)
    return grad.reshape(x_t.shape)


def guided_score(
    eps_cfg: torch.Tensor,
    grad_sf: torch.Tensor,
    grad_sb: torch.Tensor,
    grad_a: torch.Tensor,
    cfg: GuidanceConfig,
) -> torch.Tensor:
    """eps_cfg + lambda_s * (grad of fg + bg structure) + lambda_a * grad of appearance."""
    for g in (grad_sf, grad_sb, grad_a):
        if g.shape != eps_cfg.shape:
            raise ShapeMismatch(f"gradient shape {tuple(g.shape)} != eps {tuple(eps_cfg.shape)}")
    return eps_cfg + cfg.lambda_s * (grad_sf + grad_sb) + cfg.lambda_a * grad_a


# ---------------------------------------------------------------------------
# guided sampling


@dataclass
class GuidanceContext:
    """Shared per-scene precomputation: basis, reference appearance stats, the
    inverted condition's structure coordinates and thresholds, and the scene
    foreground mask on the feature grid."""

    basis: dict[int, SemanticBasis]
    ref_stats: dict[int, torch.Tensor]
    cond_coords: dict[int, StructureCoordinates]
    cond_thresholds: dict[int, ChannelThresholds]
    scene_mask: PolygonMask | None
    aux_runs: list[Trajectory]


def _cfg_sample_loop(
    denoiser: Denoiser,
    cond: SceneConditioning | None,
    null_cond: SceneConditioning | None,
    schedule: NoiseSchedule,
    x_T: torch.Tensor,
    omega: float,
    record_features: bool,
) -> tuple[torch.Tensor, Trajectory]:
    """Plain classifier-free-guided DDIM loop; conditional-branch features."""
    traj = Trajectory("sampling")
    x = x_T
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_c, feats = denoiser.predict(x, t, cond)
            eps_u, _ = denoiser.predict(x, t, null_cond)
            traj.append(t, x, feats if record_features else None)
            x = ddim_step(x, cfg_combine(eps_c, eps_u, omega), t, t - 1, schedule)
    return x, traj


def _scene_feature_mask(
    scene: LayoutScene, grid_h: int, grid_w: int
) -> PolygonMask | None:
    if not scene.primitives:
        return None
    union = np.zeros((scene.canvas_h, scene.canvas_w), dtype=np.uint8)
    for p in scene.primitives:
        union |= rasterize(p, scene.canvas_w, scene.canvas_h).cells
    down = downsample_mask(PolygonMask.from_array(union), grid_h, grid_w)
    return down if down.foreground_count() > 0 else None


def prepare_guidance_context(
    denoiser: Denoiser,
    scene: LayoutScene,
    spatial_condition_image: np.ndarray | None,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    seed: int,
) -> GuidanceContext:
    """Phases shared by every guided (or measured) run of one scene: auxiliary
    primitive-generation runs, the per-timestep semantic basis, reference
    appearance statistics, and the inverted spatial condition."""
    cond = denoiser.make_conditioning(scene)
    null_cond = denoiser.null_conditioning()
    shape = (3, scene.canvas_h, scene.canvas_w)
    aux_runs = []
    for i in range(cfg.n_aux):
        x_T = seeded_noise(shape, derive_seed(seed, 1, i))
        _, traj = _cfg_sample_loop(
            denoiser, cond, null_cond, schedule, x_T, cfg.omega, record_features=True
        )
        aux_runs.append(traj)
    basis = compute_semantic_basis(aux_runs, cfg.rank)
    ref_stats: dict[int, torch.Tensor] = {}
    for t, b in basis.items():
        per_run = [
            appearance_stats(project_features(run.features_by_t()[t], b), run.features_by_t()[t])
            for run in aux_runs
        ]
        ref_stats[t] = torch.stack(per_run).mean(dim=0)
    cond_coords: dict[int, StructureCoordinates] = {}
    cond_thresholds: dict[int, ChannelThresholds] = {}
    if spatial_condition_image is not None:
        x_c = image_to_tensor(spatial_condition_image)
        _, inv = ddim_invert(x_c, denoiser, null_cond, schedule, record_features=True)
        inv_feats = inv.features_by_t()
        for t, b in basis.items():
            f = inv_feats[t]
            s = project_features(f, b)
            cond_coords[t] = s
            cond_thresholds[t] = channel_thresholds(s)
    grid_h = grid_w = None
    for _, _, f in aux_runs[0].entries:
        if f is not None:
            grid_h, grid_w = int(f.values.shape[0]), int(f.values.shape[1])
            break
    scene_mask = _scene_feature_mask(scene, grid_h, grid_w)
    return GuidanceContext(
        basis=basis,
        ref_stats=ref_stats,
        cond_coords=cond_coords,
        cond_thresholds=cond_thresholds,
        scene_mask=scene_mask,
        aux_runs=aux_runs,
    )


def guided_sample(
    denoiser: Denoiser,
    scene: LayoutScene,
    spatial_condition_image: np.ndarray | None,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    seed: int,
    measure_only: bool = False,
    context: GuidanceContext | None = None,
) -> tuple[torch.Tensor, list[dict]]:
    """Guided DDIM sampling; returns (x_0 tensor, per-guided-step diagnostics).

    Guidance gradients steer the first resolved guided_steps steps and plain
    CFG finishes the run.  With measure_only the energies and gradient norms
    are logged but never applied, so the x-trajectory is bit-identical to the
    plain CFG run.  With guidance off entirely (lambda_s = lambda_a = 0 or
    guided_steps = 0, and measure_only False) the auxiliary phases are skipped
    and the run degenerates to plain CFG sampling.
    """
    cond = denoiser.make_conditioning(scene)
    null_cond = denoiser.null_conditioning()
    guided_steps = cfg.resolved_guided_steps(schedule.T)
    active = (cfg.lambda_s > 0.0 or cfg.lambda_a > 0.0) and guided_steps > 0
    x = seeded_noise((3, scene.canvas_h, scene.canvas_w), derive_seed(seed, 0, 0))
    if not active and not measure_only:
        x0, _ = _cfg_sample_loop(denoiser, cond, null_cond, schedule, x, cfg.omega, False)
        return x0, []
    if context is None:
        context = prepare_guidance_context(
            denoiser, scene, spatial_condition_image, cfg, schedule, seed
        )
    diagnostics: list[dict] = []
    for t in range(schedule.T, 0, -1):
        in_window = (schedule.T - t) < guided_steps
        apply_guidance = in_window and active and not measure_only
        with torch.no_grad():
            eps_u, _ = denoiser.predict(x, t, null_cond)
        if in_window:
            xg = x.detach().clone().requires_grad_(True)
            eps_c_g, feats = denoiser.predict(xg, t, cond)
            b = context.basis[t]
            s_t = project_features(feats, b)
            g_a = appearance_energy(appearance_stats(s_t, feats), context.ref_stats[t])
            if context.scene_mask is not None and t in context.cond_coords:
                g_sf = structure_energy_fg(s_t, context.cond_coords[t], context.scene_mask)
                g_sb = structure_energy_bg(
                    s_t, context.cond_thresholds[t], context.scene_mask, cfg.balance_s
                )
            else:
                g_sf = torch.zeros((), dtype=torch.float64)
                g_sb = torch.zeros((), dtype=torch.float64)
            grads = []
            for e in (g_sf, g_sb, g_a):
                if not torch.isfinite(e):
                    raise NonFiniteEnergy(f"non-finite energy at t={t}")
                if e.grad_fn is None:
                    grads.append(torch.zeros_like(xg))
                    continue
                (g,) = torch.autograd.grad(e, xg, retain_graph=True, allow_unused=True)
                grads.append(torch.zeros_like(xg) if g is None else g)
            diagnostics.append(
                {
                    "t": t,
                    "g_sf": float(g_sf.detach()),
                    "g_sb": float(g_sb.detach()),
                    "g_a": float(g_a.detach()),
                    "grad_norms": [float(g.detach().norm()) for g in grads],
                }
            )
            if apply_guidance:
                eps_cfg = cfg_combine(eps_c_g.detach(), eps_u, cfg.omega)
                eps_hat = guided_score(eps_cfg, grads[0], grads[1], grads[2], cfg)
            else:
                with torch.no_grad():
                    eps_c, _ = denoiser.predict(x, t, cond)
                eps_hat = cfg_combine(eps_c, eps_u, cfg.omega)
        else:
            with torch.no_grad():
                eps_c, _ = denoiser.predict(x, t, cond)
            eps_hat = cfg_combine(eps_c, eps_u, cfg.omega)
        with torch.no_grad():
            x = ddim_step(x, eps_hat, t, t - 1, schedule)
    return x, diagnostics
