"""Grounding encoder: Fourier path features, token embeddings, fusion MLP,
and (masked) cross-attention.

Everything runs in float64 torch so downstream guidance gradients survive
finite-difference scrutiny.  Spatial grids are flattened row-major: attention
row i*width + j corresponds to cell (i, j).
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .pathclip import DimensionMismatch, PathClipPrimitive, PathParams, PolygonMask

NULL_TOKEN = "<null>"
DEFAULT_NUM_FREQS = 8
DEFAULT_D_THETA = 64
DEFAULT_D_B = 64
TAU_LEN = 16  # [cx, cy, w, h] + 6 vertex pairs (shorter polygons repeat the last vertex)

_MAGIC = b"PCFN"
_VERSION = 1


class EmptyInput(ValueError):
    pass


class FusionFileError(ValueError):
    pass


@dataclass(frozen=True)
class PathEmbedding:
    values: torch.Tensor  # 1-D, entries in [-1, 1]


@dataclass(frozen=True)
class AppearanceEmbedding:
    values: torch.Tensor  # L x d_theta


@dataclass(frozen=True)
class FusedEmbedding:
    values: torch.Tensor  # L x d_b


def fourier_encode(tau: Sequence[float], num_freqs: int) -> PathEmbedding:
    """Per coordinate x and frequency f_j = 2^j * pi (j = 0..num_freqs-1),
    emit (sin(f_j x), cos(f_j x)); coordinate-major concatenation.

    Inputs are expected pre-normalized to [0, 1] by the canvas size.
    """
    if num_freqs < 1:
        raise ValueError(f"num_freqs must be >= 1, got {num_freqs}")
    t = torch.as_tensor(list(tau), dtype=torch.float64)
    if t.numel() == 0:
        raise EmptyInput("tau must contain at least one coordinate")
    freqs = math.pi * (2.0 ** torch.arange(num_freqs, dtype=torch.float64))
    phases = t[:, None] * freqs[None, :]  # (len(tau), num_freqs)
    pairs = torch.stack([torch.sin(phases), torch.cos(phases)], dim=-1)
    return PathEmbedding(values=pairs.reshape(-1))


def normalized_tau(path: PathParams, canvas_w: int, canvas_h: int) -> list[float]:
    """Flat path vector scaled into [0, 1]: x-like entries by canvas width,
    y-like by height; clip points padded to 6 by repeating the last vertex."""
    pts = list(path.clip_points)
    while len(pts) < 6:
        pts.append(pts[-1])
    out = [path.cx / canvas_w, path.cy / canvas_h, path.w / canvas_w, path.h / canvas_h]
    for x, y in pts:
        out.extend([x / canvas_w, y / canvas_h])
    return out


class HashedTextEncoder:
    """Deterministic stand-in for a text encoder: each token row is drawn from
    a generator seeded by a stable hash of (seed, token)."""

    def __init__(self, d_theta: int = DEFAULT_D_THETA, seed: int = 0):
        self.d_theta = d_theta
        self.seed = seed

    def encode(self, tokens: Sequence[str]) -> AppearanceEmbedding:
        if not tokens:
            raise EmptyInput("token list must be non-empty")
        rows = np.empty((len(tokens), self.d_theta))
        for i, tok in enumerate(tokens):
            digest = hashlib.sha256(f"{self.seed}:{tok}".encode("utf-8")).digest()
            gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
            rows[i] = gen.standard_normal(self.d_theta)
        return AppearanceEmbedding(values=torch.from_numpy(rows))


_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "identity": lambda x: x,
    "relu": torch.relu,
    "gelu": nn.functional.gelu,
    "tanh": torch.tanh,
}


class FusionNetwork(nn.Module):
    """Two-layer perceptron d_in -> hidden -> d_b fusing appearance and path
    features (float64); deterministic seeded initialization."""

    def __init__(
        self,
        d_in: int,
        d_b: int = DEFAULT_D_B,
        hidden: int | None = None,
        activation: str = "relu",
        seed: int = 0,
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        hidden = d_b if hidden is None else hidden
        self.d_in, self.d_b, self.hidden = d_in, d_b, hidden
        self.activation = activation
        self.fc1 = nn.Linear(d_in, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, d_b, dtype=torch.float64)
        gen = np.random.Generator(np.random.PCG64(seed))
        with torch.no_grad():
            for lin in (self.fc1, self.fc2):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_(
                    torch.from_numpy(gen.uniform(-bound, bound, size=tuple(lin.weight.shape)))
                )
                lin.bias.copy_(
                    torch.from_numpy(gen.uniform(-bound, bound, size=tuple(lin.bias.shape)))
                )

    @classmethod
    def identity(cls, d_in: int) -> "FusionNetwork":
        """Pass-through configuration: d_b = d_in, identity weights, linear."""
        net = cls(d_in=d_in, d_b=d_in, hidden=d_in, activation="identity")
        with torch.no_grad():
            net.fc1.weight.copy_(torch.eye(d_in, dtype=torch.float64))
            net.fc1.bias.zero_()
            net.fc2.weight.copy_(torch.eye(d_in, dtype=torch.float64))
            net.fc2.bias.zero_()
        return net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(_ACTIVATIONS[self.activation](self.fc1(x)))

    def save(self, path) -> None:
        header = _MAGIC + struct.pack("<III", _VERSION, self.d_in, self.d_b)
        chunks = [
            self.fc1.weight.detach().numpy(),
            self.fc1.bias.detach().numpy(),
            self.fc2.weight.detach().numpy(),
            self.fc2.bias.detach().numpy(),
        ]
        payload = b"".join(np.ascontiguousarray(c, dtype="<f4").tobytes() for c in chunks)
        with open(path, "wb") as fh:
            fh.write(header + payload)

    @classmethod
    def load(cls, path, activation: str = "relu") -> "FusionNetwork":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 16 or blob[:4] != _MAGIC:
            raise FusionFileError("not a fusion-network weights file")
        version, d_in, d_b = struct.unpack("<III", blob[4:16])
        if version != _VERSION:
            raise FusionFileError(f"unsupported version {version}")
        if (len(blob) - 16) % 4 != 0:
            raise FusionFileError("payload is not a whole number of float32 values")
        flat = np.frombuffer(blob[16:], dtype="<f4")
        # total = hidden*d_in + hidden + d_b*hidden + d_b  =>  solve for hidden
        denom = d_in + 1 + d_b
        if (flat.size - d_b) % denom != 0:
            raise FusionFileError("payload size inconsistent with header dims")
        hidden = (flat.size - d_b) // denom
        if hidden < 1:
            raise FusionFileError("payload too small for any hidden width")
        net = cls(d_in=d_in, d_b=d_b, hidden=int(hidden), activation=activation)
        sizes = [hidden * d_in, hidden, d_b * hidden, d_b]
        shapes = [(hidden, d_in), (hidden,), (d_b, hidden), (d_b,)]
        params = [net.fc1.weight, net.fc1.bias, net.fc2.weight, net.fc2.bias]
        offset = 0
        with torch.no_grad():
            for size, shape, param in zip(sizes, shapes, params):
                chunk = flat[offset : offset + size].reshape(shape).astype(np.float64)
                param.copy_(torch.from_numpy(chunk))
                offset += size
        return net


def fuse_embeddings(
    e_theta: AppearanceEmbedding, e_tau: PathEmbedding, net: FusionNetwork
) -> FusedEmbedding:
    """Row l of the output is net([e_theta[l] ; e_tau])."""
    L, d_theta = e_theta.values.shape
    d_tau = e_tau.values.numel()
    if net.d_in != d_theta + d_tau:
        raise DimensionMismatch(
            f"fusion net expects d_in={net.d_in}, got d_theta+d_tau={d_theta + d_tau}"
        )
    tiled = e_tau.values[None, :].expand(L, d_tau)
    return FusedEmbedding(values=net(torch.cat([e_theta.values, tiled], dim=1)))


def encode_tokens(
    tokens: Sequence[str],
    text_encoder: HashedTextEncoder,
    net: FusionNetwork,
    tau: Sequence[float] | None = None,
    num_freqs: int = DEFAULT_NUM_FREQS,
) -> FusedEmbedding:
    """Fused rows for a token sequence; tau defaults to the all-zero path
    vector, the shared 'no geometry' code for global-caption and null tokens."""
    if tau is None:
        tau = [0.0] * TAU_LEN
    return fuse_embeddings(text_encoder.encode(tokens), fourier_encode(tau, num_freqs), net)


def encode_primitive(
    prim: PathClipPrimitive,
    canvas_w: int,
    canvas_h: int,
    text_encoder: HashedTextEncoder,
    net: FusionNetwork,
    num_freqs: int = DEFAULT_NUM_FREQS,
) -> FusedEmbedding:
    tau = normalized_tau(prim.path, canvas_w, canvas_h)
    return encode_tokens(prim.appearance.tokens, text_encoder, net, tau=tau, num_freqs=num_freqs)


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionInputs:
    q: torch.Tensor  # n_pix x d
    k: torch.Tensor  # m x d
    v: torch.Tensor  # m x d_v
    scale: float = field(default=0.0)

    def __post_init__(self):
        if self.q.ndim != 2 or self.k.ndim != 2 or self.v.ndim != 2:
            raise DimensionMismatch("Q, K, V must be 2-D")
        if self.q.shape[1] != self.k.shape[1]:
            raise DimensionMismatch(
                f"Q feature dim {self.q.shape[1]} != K feature dim {self.k.shape[1]}"
            )
        if self.k.shape[0] != self.v.shape[0]:
            raise DimensionMismatch(f"K rows {self.k.shape[0]} != V rows {self.v.shape[0]}")
        if self.q.shape[1] < 1:
            raise DimensionMismatch("feature dimension must be positive")
        if self.scale == 0.0:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(self.q.shape[1]))


def stable_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax with max subtraction; survives logits around 1e300."""
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    expd = torch.exp(shifted)
    return expd / expd.sum(dim=-1, keepdim=True)


def cross_attention(inp: AttentionInputs) -> torch.Tensor:
    attn = stable_softmax(inp.q @ inp.k.T * inp.scale)
    return attn @ inp.v


def masked_cross_attention(inp: AttentionInputs, mask: PolygonMask) -> torch.Tensor:
    """Cross-attention zeroed outside the mask: row i*width+j is multiplied by
    cell (i, j), so mask-0 rows are exactly zero."""
    n_pix = inp.q.shape[0]
    if n_pix != mask.width * mask.height:
        raise DimensionMismatch(
            f"{n_pix} query rows vs mask grid {mask.height}x{mask.width}"
        )
    m = torch.from_numpy(mask.cells.astype(np.float64)).reshape(-1, 1)
    return cross_attention(inp) * m


def compose_scene_attention(
    q: torch.Tensor,
    primitives: Sequence[tuple[torch.Tensor, PolygonMask]],
    global_tokens: torch.Tensor,
    key_proj: Callable[[torch.Tensor], torch.Tensor] | None = None,
    value_proj: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Sum of per-primitive masked attentions, plus global-token attention on
    cells no primitive covers.

    `primitives` pairs each fused embedding matrix (L_i x d_b) with its mask on
    the query grid; `key_proj`/`value_proj` map embedding rows to K/V (identity
    when omitted, e.g. for hand-constructed tests).
    """
    kp = key_proj if key_proj is not None else (lambda e: e)
    vp = value_proj if value_proj is not None else (lambda e: e)
    out = None
    covered = None
    for emb, mask in primitives:
        part = masked_cross_attention(AttentionInputs(q=q, k=kp(emb), v=vp(emb)), mask)
        out = part if out is None else out + part
        m = torch.from_numpy(mask.cells.astype(np.float64)).reshape(-1, 1)
        covered = m if covered is None else torch.maximum(covered, m)
    global_part = cross_attention(AttentionInputs(q=q, k=kp(global_tokens), v=vp(global_tokens)))
    if covered is None:
        return global_part
    return out + (1.0 - covered) * global_part
