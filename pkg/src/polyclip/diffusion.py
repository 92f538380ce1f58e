"""Toy DDIM machinery over 32x32 RGB images in pixel space.

Bundles the cosine noise schedule, the deterministic DDIM sampler and its
inversion, feature-recording trajectories, a closed-form Gaussian denoiser
used as a correctness oracle, a small trained convolutional denoiser with one
masked cross-attention block, and the synthetic polygon dataset it trains on.

Images at the API boundary are (H, W, 3) float arrays in [0, 1]; diffusion
states are float64 torch tensors shaped (3, H, W) living in [-1, 1].
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoder import (
    NULL_TOKEN,
    TAU_LEN,
    FusionNetwork,
    HashedTextEncoder,
    compose_scene_attention,
    encode_tokens,
    fourier_encode,
    fuse_embeddings,
    normalized_tau,
)
from .pathclip import DimensionMismatch, LayoutScene, PathParams, PolygonMask, rasterize
from .pathclip import PathClipPrimitive, AppearanceDescription

FEATURE_TAG = "post_masked_attention"


class ScheduleError(ValueError):
    pass


class StepOrderViolation(ValueError):
    pass


class NonPositiveVariance(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_bar over steps 0..T: alpha_bar[0] = 1, strictly decreasing, > 0."""

    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ScheduleError(f"alpha_bar must have T+1={self.T + 1} entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise ScheduleError(f"alpha_bar[0] must be 1, got {ab[0]}")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ScheduleError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)


def cosine_schedule(T: int, offset: float = 0.008, terminal: float = 5e-3) -> NoiseSchedule:
    """Squared-cosine alpha_bar, renormalized so alpha_bar[0] = 1.

    The curve is mapped affinely onto [terminal, 1] rather than clipped: a
    clip would flatten the tail into ties (breaking strict monotonicity), and
    a terminal alpha_bar around 5e-3 keeps 1/sqrt(alpha_bar) amplification at
    the noisy end bounded, which score-space guidance and inversion both rely
    on.  This matches where widely used full-scale schedules terminate.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < terminal < 1.0:
        raise ScheduleError(f"terminal alpha_bar must be in (0, 1), got {terminal}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + offset) / (1.0 + offset)) * math.pi / 2.0) ** 2
    ab = f / f[0]
    ab = terminal + (1.0 - terminal) * (ab - ab[-1]) / (ab[0] - ab[-1])
    ab[0] = 1.0
    return NoiseSchedule(T=T, alpha_bar=ab)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class FeatureMap:
    """Spatial feature grid (h_f, w_f, C_f) with its extraction-point tag."""

    values: torch.Tensor
    tag: str = FEATURE_TAG

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionMismatch(f"feature map must be 3-D, got {tuple(self.values.shape)}")


class Trajectory:
    """Ordered (t, x_t, features) record of one sampler or inversion run."""

    def __init__(self, direction: str):
        if direction not in ("sampling", "inversion"):
            raise ValueError(f"unknown direction {direction!r}")
        self.direction = direction
        self.entries: list[tuple[int, torch.Tensor, FeatureMap | None]] = []

    def append(self, t: int, x: torch.Tensor, features: FeatureMap | None) -> None:
        if self.entries:
            last_t = self.entries[-1][0]
            ok = t < last_t if self.direction == "sampling" else t > last_t
            if not ok:
                raise StepOrderViolation(
                    f"{self.direction} trajectory requires strictly "
                    f"{'decreasing' if self.direction == 'sampling' else 'increasing'} t; "
                    f"got {last_t} then {t}"
                )
        self.entries.append((t, x, features))

    def features_by_t(self) -> dict[int, FeatureMap]:
        return {t: f for t, _, f in self.entries if f is not None}

    def __len__(self) -> int:
        return len(self.entries)


def save_feature_dump(trajectory: Trajectory, path) -> None:
    """Binary feature dump: header (T, h_f, w_f, C_f) as little-endian uint32,
    then float32 little-endian feature grids in entry (t-major) order."""
    feats = [f for _, _, f in trajectory.entries if f is not None]
    if not feats:
        raise ValueError("trajectory holds no feature maps")
    h, w, c = feats[0].values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IIII", len(feats), h, w, c))
        for f in feats:
            fh.write(np.ascontiguousarray(f.values.detach().numpy(), dtype="<f4").tobytes())


def load_feature_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ValueError("feature dump too short for header")
    n, h, w, c = struct.unpack("<IIII", blob[:16])
    flat = np.frombuffer(blob[16:], dtype="<f4")
    if flat.size != n * h * w * c:
        raise ValueError("feature dump payload size disagrees with header")
    return flat.reshape(n, h, w, c).astype(np.float64)


# ---------------------------------------------------------------------------
# image conversions and seeding


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) floats in [0, 1] -> (3, H, W) float64 tensor in [-1, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionMismatch(f"expected (H, W, 3) image, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))) * 2.0 - 1.0


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().numpy().transpose(1, 2, 0)
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def derive_seed(seed: int, *key: int) -> int:
    """Independent child seed for a named sub-stream of a run seed."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0])


def seeded_noise(shape: Sequence[int], seed: int) -> torch.Tensor:
    gen = np.random.Generator(np.random.PCG64(seed))
    return torch.from_numpy(gen.standard_normal(tuple(shape)))


# ---------------------------------------------------------------------------
# DDIM steps


def _ddim_move(
    x: torch.Tensor, eps_hat: torch.Tensor, a_from: float, a_to: float
) -> torch.Tensor:
    x0_hat = (x - math.sqrt(1.0 - a_from) * eps_hat) / math.sqrt(a_from)
    return math.sqrt(a_to) * x0_hat + math.sqrt(1.0 - a_to) * eps_hat


def ddim_step(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """One deterministic update x_t -> x_{t_prev} given the noise estimate."""
    if not t > t_prev >= 0:
        raise StepOrderViolation(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if t > schedule.T:
        raise StepOrderViolation(f"t={t} exceeds schedule T={schedule.T}")
    a_t = float(schedule.alpha_bar[t])
    a_prev = float(schedule.alpha_bar[t_prev])
    return _ddim_move(x_t, eps_hat, a_t, a_prev)


class Denoiser:
    """Noise-prediction interface: predict(x_t, t, cond) -> (eps_hat, features).

    Implementations must be deterministic given (x_t, t, cond) and return
    eps_hat with x_t's shape; features may be None for denoisers that expose
    no spatial feature grid.
    """

    def predict(
        self, x_t: torch.Tensor, t: int, cond: "SceneConditioning | None"
    ) -> tuple[torch.Tensor, FeatureMap | None]:
        raise NotImplementedError

    def make_conditioning(self, scene: LayoutScene) -> "SceneConditioning | None":
        return None

    def null_conditioning(self) -> "SceneConditioning | None":
        return None


def ddim_sample(
    denoiser: Denoiser,
    cond: "SceneConditioning | None",
    schedule: NoiseSchedule,
    x_T: torch.Tensor,
    record_features: bool = False,
) -> tuple[torch.Tensor, Trajectory]:
    """Deterministic DDIM sampling from x_T down to x_0."""
    traj = Trajectory("sampling")
    x = x_T
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat, feats = denoiser.predict(x, t, cond)
            traj.append(t, x, feats if record_features else None)
            x = ddim_step(x, eps_hat, t, t - 1, schedule)
    return x, traj


def ddim_invert(
    x_0: torch.Tensor,
    denoiser: Denoiser,
    cond: "SceneConditioning | None",
    schedule: NoiseSchedule,
    record_features: bool = True,
) -> tuple[torch.Tensor, Trajectory]:
    """Reversed DDIM recursion t -> t+1 recovering the initial noise of x_0.

    Each step is predictor-corrector: a provisional move with eps_hat at
    (x_t, t), then a committed move with eps_hat re-evaluated at the
    provisional state and timestep t+1.  The committed step is therefore the
    exact algebraic inverse of a DDIM sampling move using that same eps_hat,
    which keeps sample(invert(x)) round trips tight, and the corrector call
    yields features keyed by t+1 -- the same timestep keys the sampling loop
    records.
    """
    traj = Trajectory("inversion")
    x = x_0
    with torch.no_grad():
        for t in range(0, schedule.T):
            a_t = float(schedule.alpha_bar[t])
            a_next = float(schedule.alpha_bar[t + 1])
            eps_hat, _ = denoiser.predict(x, t, cond)
            provisional = _ddim_move(x, eps_hat, a_t, a_next)
            eps_hat, feats = denoiser.predict(provisional, t + 1, cond)
            x = _ddim_move(x, eps_hat, a_t, a_next)
            traj.append(t + 1, x, feats if record_features else None)
    return x, traj


# ---------------------------------------------------------------------------
# closed-form Gaussian oracle


class AnalyticGaussianDenoiser(Denoiser):
    """Exact denoiser for diagonal-Gaussian data x_0 ~ N(mean, diag(var)).

    E[x_0 | x_t] = (sqrt(a) var x_t + (1 - a) mean) / (a var + 1 - a)
    componentwise, and eps_hat = (x_t - sqrt(a) E[x_0|x_t]) / sqrt(1 - a),
    defined as 0 at a = 1 where no noise is present.
    """

    def __init__(self, mean: torch.Tensor, covariance_diag: torch.Tensor, schedule: NoiseSchedule):
        self.mean = torch.as_tensor(mean, dtype=torch.float64)
        self.var = torch.as_tensor(covariance_diag, dtype=torch.float64)
        if torch.any(self.var <= 0.0):
            raise NonPositiveVariance("covariance diagonal must be strictly positive")
        self.schedule = schedule

    def posterior_mean(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        a = float(self.schedule.alpha_bar[t])
        return (math.sqrt(a) * self.var * x_t + (1.0 - a) * self.mean) / (
            a * self.var + 1.0 - a
        )

    def predict(self, x_t, t, cond=None):
        a = float(self.schedule.alpha_bar[t])
        if a >= 1.0:
            return torch.zeros_like(x_t), None
        eps = (x_t - math.sqrt(a) * self.posterior_mean(x_t, t)) / math.sqrt(1.0 - a)
        return eps, None


# ---------------------------------------------------------------------------
# scene conditioning


def downsample_mask(mask: PolygonMask, out_h: int, out_w: int) -> PolygonMask:
    """Area-average over integer blocks, then threshold at 0.5."""
    if mask.height % out_h != 0 or mask.width % out_w != 0:
        raise DimensionMismatch(
            f"mask {mask.height}x{mask.width} not divisible into {out_h}x{out_w}"
        )
    bh, bw = mask.height // out_h, mask.width // out_w
    blocks = mask.cells.reshape(out_h, bh, out_w, bw).astype(np.float64)
    return PolygonMask.from_array(blocks.mean(axis=(1, 3)) >= 0.5)


@dataclass(frozen=True)
class PrimitiveCond:
    tokens: tuple[str, ...]
    tau: tuple[float, ...]  # canvas-normalized path vector
    mask: PolygonMask  # canvas resolution


@dataclass(frozen=True)
class SceneConditioning:
    primitives: tuple[PrimitiveCond, ...]
    global_tokens: tuple[str, ...]
    use_masks: bool = True


def build_conditioning(scene: LayoutScene, use_masks: bool = True) -> SceneConditioning:
    prims = []
    for p in scene.primitives:
        prims.append(
            PrimitiveCond(
                tokens=p.appearance.tokens,
                tau=tuple(normalized_tau(p.path, scene.canvas_w, scene.canvas_h)),
                mask=rasterize(p, scene.canvas_w, scene.canvas_h),
            )
        )
    caption_tokens = tuple(scene.global_caption.split()) or (NULL_TOKEN,)
    return SceneConditioning(
        primitives=tuple(prims), global_tokens=caption_tokens, use_masks=use_masks
    )


def null_conditioning() -> SceneConditioning:
    return SceneConditioning(primitives=(), global_tokens=(NULL_TOKEN,), use_masks=True)


# ---------------------------------------------------------------------------
# trained toy denoiser


class ToyDenoiser(nn.Module, Denoiser):
    """Small float64 convolutional x0-predictor with FiLM time conditioning
    and one masked cross-attention block at the 2x-downsampled grid.

    The network predicts x0_hat; eps_hat follows algebraically.  The feature
    grid exposed to guidance is the hidden state right after the attention
    block merges back: (h_f, w_f, C_f) = (H/2, W/2, channels).
    """

    def __init__(
        self,
        schedule: NoiseSchedule,
        canvas: int = 32,
        stem_channels: int = 16,
        channels: int = 32,
        d_theta: int = 64,
        d_b: int = 64,
        num_freqs: int = 8,
        seed: int = 0,
        feature_scale: float = 2.0,
    ):
        super().__init__()
        self.schedule = schedule
        self.canvas = canvas
        self.channels = channels
        self.num_freqs = num_freqs
        self.grid = canvas // 2
        # Recorded feature maps are scaled by this constant so that guidance
        # strengths in the canonical range (hundreds) produce score nudges
        # commensurate with eps_hat; the network path itself is unscaled.
        self.feature_scale = feature_scale
        dt = torch.float64
        self.conv_in = nn.Conv2d(3, stem_channels, 3, padding=1, dtype=dt)
        self.down = nn.Conv2d(stem_channels, channels, 3, stride=2, padding=1, dtype=dt)
        self.film1 = nn.Linear(2, 64, dtype=dt)
        self.film2 = nn.Linear(64, 2 * channels, dtype=dt)
        self.w_q = nn.Linear(channels, channels, bias=False, dtype=dt)
        self.w_k = nn.Linear(d_b, channels, bias=False, dtype=dt)
        self.w_v = nn.Linear(d_b, channels, bias=False, dtype=dt)
        self.w_o = nn.Linear(channels, channels, dtype=dt)
        self.mid = nn.Conv2d(channels, channels, 3, padding=1, dtype=dt)
        self.up = nn.Conv2d(channels, stem_channels, 3, padding=1, dtype=dt)
        self.conv_out = nn.Conv2d(stem_channels, 3, 3, padding=1, dtype=dt)
        self.text_encoder = HashedTextEncoder(d_theta=d_theta, seed=derive_seed(seed, 9, 0))
        self.fusion = FusionNetwork(
            d_in=d_theta + 2 * num_freqs * TAU_LEN,
            d_b=d_b,
            hidden=d_b,
            activation="gelu",
            seed=derive_seed(seed, 9, 1),
        )
        self.init_seed = seed
        self.use_attention_masks = True  # ablation switch: False feeds all-ones masks
        self._seed_parameters(seed)

    def _seed_parameters(self, seed: int) -> None:
        # One deterministic stream fills every non-fusion parameter, so the
        # module is reproducible without touching torch's global RNG.
        gen = np.random.Generator(np.random.PCG64(derive_seed(seed, 9, 2)))
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.startswith("fusion."):
                    continue
                fan_in = param.shape[1] if param.ndim == 2 else param.numel()
                if param.ndim == 4:
                    fan_in = param.shape[1] * param.shape[2] * param.shape[3]
                bound = 1.0 / math.sqrt(max(fan_in, 1))
                param.copy_(
                    torch.from_numpy(gen.uniform(-bound, bound, size=tuple(param.shape)))
                )

    # -- conditioning ------------------------------------------------------

    def make_conditioning(
        self, scene: LayoutScene, use_masks: bool | None = None
    ) -> SceneConditioning:
        if use_masks is None:
            use_masks = self.use_attention_masks
        return build_conditioning(scene, use_masks=use_masks)

    def null_conditioning(self) -> SceneConditioning:
        return null_conditioning()

    def _encode_cond(
        self, cond: SceneConditioning
    ) -> tuple[list[tuple[torch.Tensor, PolygonMask]], torch.Tensor]:
        ones = PolygonMask.from_array(np.ones((self.grid, self.grid), dtype=np.uint8))
        pairs = []
        for pc in cond.primitives:
            emb = fuse_embeddings(
                self.text_encoder.encode(pc.tokens),
                fourier_encode(pc.tau, self.num_freqs),
                self.fusion,
            ).values
            mask = downsample_mask(pc.mask, self.grid, self.grid) if cond.use_masks else ones
            pairs.append((emb, mask))
        glob = encode_tokens(
            cond.global_tokens, self.text_encoder, self.fusion, num_freqs=self.num_freqs
        ).values
        return pairs, glob

    # -- forward -----------------------------------------------------------

    def forward_x0(
        self,
        x_b: torch.Tensor,
        a_b: Sequence[float],
        conds: Sequence[SceneConditioning | None],
        want_features: bool = False,
    ) -> tuple[torch.Tensor, list[FeatureMap] | None]:
        """Batched x0 prediction; conds holds one conditioning per sample."""
        B = x_b.shape[0]
        act = nn.functional.silu
        a_t = torch.as_tensor(list(a_b), dtype=torch.float64)
        t_emb = torch.stack([torch.sqrt(a_t), torch.sqrt(1.0 - a_t)], dim=1)
        h0 = act(self.conv_in(x_b))
        h = act(self.down(h0))
        gamma, beta = self.film2(act(self.film1(t_emb))).chunk(2, dim=1)
        h = h * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]
        merged, feats = [], []
        for i in range(B):
            cond = conds[i] if conds[i] is not None else null_conditioning()
            pairs, glob = self._encode_cond(cond)
            h_flat = h[i].reshape(self.channels, -1).T  # (n_pix, C)
            attn = compose_scene_attention(
                self.w_q(h_flat), pairs, glob, key_proj=self.w_k, value_proj=self.w_v
            )
            # bounded block output: keeps structure coordinates (and their
            # gradients) in a fixed range, so energy descent cannot run away;
            # the 3x soft clamp keeps most activations in the linear region
            h_flat = 3.0 * torch.tanh((h_flat + self.w_o(attn)) / 3.0)
            if want_features:
                feats.append(
                    FeatureMap(
                        values=self.feature_scale
                        * h_flat.reshape(self.grid, self.grid, self.channels)
                    )
                )
            merged.append(h_flat.T.reshape(self.channels, self.grid, self.grid))
        h = torch.stack(merged)
        h = act(self.mid(h))
        h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = act(self.up(h)) + h0
        return self.conv_out(h), (feats if want_features else None)

    def predict(self, x_t, t, cond=None):
        a = float(self.schedule.alpha_bar[t])
        x0_hat, feats = self.forward_x0(x_t[None], [a], [cond], want_features=True)
        x0_hat = x0_hat[0]
        if a >= 1.0:
            eps = torch.zeros_like(x_t)
        else:
            eps = (x_t - math.sqrt(a) * x0_hat) / math.sqrt(1.0 - a)
        return eps, feats[0]


def train_toy_denoiser(
    dataset: Sequence[tuple[np.ndarray, LayoutScene]],
    epochs: int,
    seed: int,
    schedule: NoiseSchedule | None = None,
    batch_size: int = 16,
    lr: float = 1e-3,
    momentum: float = 0.9,
    caption_dropout: float = 0.5,
    channels: int = 32,
) -> ToyDenoiser:
    """Adam training of the toy denoiser on (image, scene) pairs.

    Per sample: a uniform timestep, fresh Gaussian noise, and caption dropout
    replacing the full conditioning with null tokens at the given probability.
    The loss is mean squared error against the clean image.  `momentum` maps
    to Adam's beta1.  Training stats land on the returned module as
    `train_stats`.
    """
    if len(dataset) == 0:
        raise EmptyDataset("training dataset is empty")
    schedule = schedule if schedule is not None else cosine_schedule(50)
    canvas = dataset[0][0].shape[0]
    model = ToyDenoiser(schedule, canvas=canvas, channels=channels, seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(momentum, 0.999))
    gen = np.random.Generator(np.random.PCG64(derive_seed(seed, 3, 0)))
    x0_all = torch.stack([image_to_tensor(img) for img, _ in dataset])
    conds = [build_conditioning(scene) for _, scene in dataset]
    null_cond = null_conditioning()
    n = len(dataset)
    epoch_losses: list[float] = []
    null_count, cond_count = 0, 0
    for _ in range(epochs):
        perm = gen.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            b = len(idx)
            t_b = gen.integers(1, schedule.T + 1, size=b)
            a_b = schedule.alpha_bar[t_b]
            eps = torch.from_numpy(gen.standard_normal((b, 3, canvas, canvas)))
            x0 = x0_all[idx]
            sqrt_a = torch.from_numpy(np.sqrt(a_b))[:, None, None, None]
            sqrt_1a = torch.from_numpy(np.sqrt(1.0 - a_b))[:, None, None, None]
            x_t = sqrt_a * x0 + sqrt_1a * eps
            batch_conds = []
            for j in idx:
                if gen.random() < caption_dropout:
                    batch_conds.append(null_cond)
                    null_count += 1
                else:
                    batch_conds.append(conds[j])
                    cond_count += 1
            x0_hat, _ = model.forward_x0(x_t, a_b, batch_conds)
            loss = nn.functional.mse_loss(x0_hat, x0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(losses)))
    model.train_stats = {
        "epoch_losses": epoch_losses,
        "null_cond_count": null_count,
        "cond_count": cond_count,
    }
    model.eval()
    return model


def save_toy_denoiser(model: ToyDenoiser, path) -> None:
    torch.save(
        {
            "state": model.state_dict(),
            "canvas": model.canvas,
            "stem_channels": model.conv_in.out_channels,
            "channels": model.channels,
            "d_theta": model.text_encoder.d_theta,
            "d_b": model.fusion.d_b,
            "num_freqs": model.num_freqs,
            "schedule_T": model.schedule.T,
            "seed": model.init_seed,
            "feature_scale": model.feature_scale,
        },
        path,
    )


def load_toy_denoiser(path) -> ToyDenoiser:
    blob = torch.load(path, weights_only=True)
    model = ToyDenoiser(
        cosine_schedule(blob["schedule_T"]),
        canvas=blob["canvas"],
        stem_channels=blob["stem_channels"],
        channels=blob["channels"],
        d_theta=blob["d_theta"],
        d_b=blob["d_b"],
        num_freqs=blob["num_freqs"],
        seed=blob["seed"],
        feature_scale=blob.get("feature_scale", 1.0),
    )
    model.load_state_dict(blob["state"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# synthetic dataset


PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.80),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "cyan": (0.10, 0.75, 0.80),
}
BACKGROUND_COLOR: tuple[float, float, float] = (0.18, 0.18, 0.20)


def _random_polygon(
    gen: np.random.Generator, canvas: int
) -> PathParams | None:
    k = int(gen.integers(4, 7))
    margin = canvas * 0.22
    cx, cy = gen.uniform(margin, canvas - margin, size=2)
    radius = gen.uniform(canvas * 0.125, canvas * 0.22)
    angles = (np.arange(k) + gen.uniform(0.2, 0.8, size=k)) * (2.0 * math.pi / k)
    radii = radius * gen.uniform(0.55, 1.0, size=k)
    xs = np.clip(cx + radii * np.cos(angles), 0.5, canvas - 0.5)
    ys = np.clip(cy + radii * np.sin(angles), 0.5, canvas - 0.5)
    try:
        return PathParams.from_points(zip(xs, ys))
    except ValueError:
        return None


def make_synthetic_dataset(
    n: int,
    seed: int,
    canvas: int = 32,
    min_primitives: int = 1,
    max_primitives: int = 3,
) -> list[tuple[np.ndarray, LayoutScene]]:
    """Procedural scenes: 1-3 disjoint star-shaped polygons in distinct
    palette colors on a fixed dark background; the image is rendered with the
    package rasterizer, so scene masks reproduce it exactly."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    gen = np.random.Generator(np.random.PCG64(seed))
    names_all = list(PALETTE)
    out = []
    for _ in range(n):
        want = int(gen.integers(min_primitives, max_primitives + 1))
        names = [names_all[i] for i in gen.choice(len(names_all), size=want, replace=False)]
        prims: list[PathClipPrimitive] = []
        masks: list[np.ndarray] = []
        for name in names:
            for _ in range(80):
                params = _random_polygon(gen, canvas)
                if params is None:
                    continue
                prim = PathClipPrimitive(
                    path=params, appearance=AppearanceDescription(tokens=(name,))
                )
                mask = rasterize(prim, canvas, canvas).cells
                if mask.sum() < 12:
                    continue
                if any(np.logical_and(mask, m).any() for m in masks):
                    continue
                prims.append(prim)
                masks.append(mask)
                break
        if not prims:
            # Pathological rejection streak; place one unconstrained polygon.
            while not prims:
                params = _random_polygon(gen, canvas)
                if params is None:
                    continue
                prim = PathClipPrimitive(
                    path=params, appearance=AppearanceDescription(tokens=(names[0],))
                )
                prims.append(prim)
                masks.append(rasterize(prim, canvas, canvas).cells)
        image = np.empty((canvas, canvas, 3), dtype=np.float64)
        image[:] = BACKGROUND_COLOR
        for prim, mask in zip(prims, masks):
            image[mask.astype(bool)] = PALETTE[prim.appearance.category]
        caption = " ".join(p.appearance.category for p in prims)
        scene = LayoutScene(
            canvas_w=canvas, canvas_h=canvas, global_caption=caption, primitives=tuple(prims)
        )
        out.append((image, scene))
    return out
