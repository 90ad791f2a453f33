"""1-D encoder/decoder denoiser shared by both diffusion stages.

The backbone halves the temporal resolution at each encoder scale and
restores it with skip connections.  Every scale carries a dual-branch
drift-jitter tempo-gate (DJTG) block: a dilated gated-convolution branch for
high-frequency temporal variation, a depthwise-separable branch for smooth
spatial drift, fused by content-aware convex weights predicted from trace
motion features (velocity, curvature, windowed variance) and the diffusion
step.  A feed-forward map from a global context vector can modulate both
branches with per-channel scale/shift (GC-FiLM); without a context the
modulation is skipped entirely and the block is purely unconditional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 128
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    blocks_per_scale: int = 2
    embedding_dim: int = 32
    conditional: bool = False
    context_dim: int = 0  # required when conditional
    groups: int = 8

    def __post_init__(self):
        m = tuple(self.channel_multipliers)
        if len(m) < 2 or m[0] != 1 or any(b >= a for a, b in zip(m[1:], m[:-1])):
            raise ValueError("channel multipliers must strictly increase from 1")
        if self.base_channels % self.groups:
            raise ValueError("base_channels must be divisible by the norm group count")
        if self.conditional and self.context_dim <= 0:
            raise ValueError("conditional model needs a positive context_dim")
        self.channel_multipliers = m

    @property
    def n_scales(self) -> int:
        return len(self.channel_multipliers)

    @property
    def length_multiple(self) -> int:
        return 2 ** (self.n_scales - 1)


def timestep_embedding(n, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal step embedding: first half sin, second half cos.

    Deterministic and distinct for distinct integer steps; n may be an int
    or a (B,) tensor.
    """
    if isinstance(n, int):
        n = torch.tensor([n], dtype=torch.float32)
    n = torch.as_tensor(n, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = n[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def motion_features(x: torch.Tensor, window: int = 5) -> torch.Tensor:
    """(B, C, W) -> (B, 3, W) maps: velocity, curvature, windowed variance.

    Velocity is the channel norm of the first temporal difference, curvature
    of the second; variance is the channel-mean variance over a sliding
    window.  Edges use replication padding; degenerate lengths (< 3) yield
    zero difference maps.
    """
    xp = F.pad(x, (1, 1), mode="replicate")
    vel = torch.linalg.vector_norm(xp[:, :, 2:] - xp[:, :, 1:-1], dim=1, keepdim=True)
    cur = torch.linalg.vector_norm(
        xp[:, :, 2:] - 2 * xp[:, :, 1:-1] + xp[:, :, :-2], dim=1, keepdim=True
    )
    half = window // 2
    xw = F.pad(x, (half, half), mode="replicate")
    mean = F.avg_pool1d(xw, window, stride=1)
    sq_mean = F.avg_pool1d(xw ** 2, window, stride=1)
    var = (sq_mean - mean ** 2).clamp_min(0).mean(dim=1, keepdim=True)
    return torch.cat([vel, cur, var], dim=1)


class JitterBranch(nn.Module):
    """Dilated convolution to 2C channels with a tanh/sigmoid gate."""

    def __init__(self, channels: int, dilation: int = 1, kernel_size: int = 3):
        super().__init__()
        pad = dilation * (kernel_size - 1) // 2
        self.conv = nn.Conv1d(channels, 2 * channels, kernel_size,
                              padding=pad, dilation=dilation)

    def forward(self, x):
        m1, m2 = self.conv(x).chunk(2, dim=1)
        return torch.tanh(m1) * torch.sigmoid(m2)


class DriftBranch(nn.Module):
    """Depthwise-separable convolution with SiLU for smooth spatial drift."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.depthwise = nn.Conv1d(channels, channels, kernel_size,
                                   padding=kernel_size // 2, groups=channels)
        self.pointwise = nn.Conv1d(channels, channels, 1)

    def depthwise_features(self, x):
        return self.depthwise(x)

    def forward(self, x):
        return F.silu(self.pointwise(self.depthwise(x)))


class GCFiLM(nn.Module):
    """Per-channel (1 + gamma) * ft + beta from a context vector."""

    def __init__(self, context_dim: int, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(context_dim, context_dim),
            nn.SiLU(),
            nn.Linear(context_dim, 2 * channels),
        )

    def forward(self, ft: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.net(context).unsqueeze(-1).chunk(2, dim=1)
        return gc_film(ft, gamma, beta)


def gc_film(ft: torch.Tensor, gamma=None, beta=None) -> torch.Tensor:
    """Affine modulation (1 + gamma) * ft + beta; identity when both are None."""
    if gamma is None and beta is None:
        return ft
    out = ft
    if gamma is not None:
        out = (1 + gamma) * out
    if beta is not None:
        out = out + beta
    return out


class DJTGBlock(nn.Module):
    """Drift-jitter tempo-gate: convex fusion of the two branch outputs.

    Fusion weights come from a lightweight CNN over motion features with the
    step embedding added, squashed to [0, 1]; the same context modulation is
    applied to both branches when a context vector is supplied.
    """

    def __init__(self, channels: int, emb_dim: int, dilation: int = 1,
                 context_dim: int = 0, fusion_hidden: int = 16):
        super().__init__()
        self.jitter = JitterBranch(channels, dilation=dilation)
        self.drift = DriftBranch(channels)
        self.film = GCFiLM(context_dim, channels) if context_dim > 0 else None
        self.fuse_in = nn.Conv1d(3, fusion_hidden, 3, padding=1)
        self.fuse_emb = nn.Linear(emb_dim, fusion_hidden)
        self.fuse_out = nn.Conv1d(fusion_hidden, channels, 3, padding=1)

    def fusion_weights(self, x, emb):
        h = self.fuse_in(motion_features(x)) + self.fuse_emb(emb).unsqueeze(-1)
        return torch.sigmoid(self.fuse_out(F.silu(h)))

    def forward(self, x, emb, context=None):
        fused, _ = self.forward_detailed(x, emb, context)
        return fused

    def forward_detailed(self, x, emb, context=None):
        f_jitter = self.jitter(x)
        f_drift = self.drift(x)
        if self.film is not None and context is not None:
            f_jitter = self.film(f_jitter, context)
            f_drift = self.film(f_drift, context)
        alpha = self.fusion_weights(x, emb)
        fused = alpha * f_jitter + (1 - alpha) * f_drift
        return fused, {"alpha": alpha, "jitter": f_jitter, "drift": f_drift}


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb).unsqueeze(-1)
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class LSTUNet(nn.Module):
    """Denoiser: predicts the added noise for a (B, C, W) latent trace.

    Sequences are right-padded (replicating the final value) to the next
    multiple of 2^(scales - 1) and the output truncated, so any length >= 1
    is accepted.  The context vector is ignored unless the model is
    conditional.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * m for m in cfg.channel_multipliers]
        emb_dim = 4 * cfg.embedding_dim
        ctx = cfg.context_dim if cfg.conditional else 0
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.embedding_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.stem = nn.Conv1d(cfg.in_channels, widths[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.enc_gates = nn.ModuleList()
        self.downs = nn.ModuleList()
        for s, w in enumerate(widths):
            prev = widths[max(s - 1, 0)]
            blocks = nn.ModuleList(
                [ResBlock(prev if b == 0 else w, w, emb_dim, cfg.groups)
                 for b in range(cfg.blocks_per_scale)]
            )
            self.enc_blocks.append(blocks)
            self.enc_gates.append(
                DJTGBlock(w, emb_dim, dilation=2 ** s, context_dim=ctx)
            )
            if s < len(widths) - 1:
                self.downs.append(nn.Conv1d(w, w, 3, stride=2, padding=1))

        self.mid1 = ResBlock(widths[-1], widths[-1], emb_dim, cfg.groups)
        self.mid2 = ResBlock(widths[-1], widths[-1], emb_dim, cfg.groups)

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        self.dec_gates = nn.ModuleList()
        for s in reversed(range(len(widths) - 1)):
            w, deeper = widths[s], widths[s + 1]
            self.ups.append(nn.Conv1d(deeper, w, 3, padding=1))
            blocks = nn.ModuleList(
                [ResBlock(2 * w if b == 0 else w, w, emb_dim, cfg.groups)
                 for b in range(cfg.blocks_per_scale)]
            )
            self.dec_blocks.append(blocks)
            self.dec_gates.append(
                DJTGBlock(w, emb_dim, dilation=2 ** s, context_dim=ctx)
            )

        self.head_norm = nn.GroupNorm(cfg.groups, widths[0])
        self.head = nn.Conv1d(widths[0], cfg.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, n, context: torch.Tensor | None = None) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, W) input, got {tuple(x.shape)}")
        if not self.cfg.conditional:
            context = None
        length = x.shape[-1]
        mult = self.cfg.length_multiple
        padded = (length + mult - 1) // mult * mult
        if padded != length:
            x = F.pad(x, (0, padded - length), mode="replicate")

        if isinstance(n, int):
            n = torch.full((x.shape[0],), n, dtype=torch.long, device=x.device)
        emb = self.time_mlp(timestep_embedding(n, self.cfg.embedding_dim).to(x.dtype))

        h = self.stem(x)
        skips = []
        for s, (blocks, gate) in enumerate(zip(self.enc_blocks, self.enc_gates)):
            for block in blocks:
                h = block(h, emb)
            h = gate(h, emb, context)
            if s < len(self.downs):
                skips.append(h)
                h = self.downs[s](h)

        h = self.mid1(h, emb)
        h = self.mid2(h, emb)

        for up, blocks, gate in zip(self.ups, self.dec_blocks, self.dec_gates):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, emb)
            h = gate(h, emb, context)

        out = self.head(F.silu(self.head_norm(h)))
        return out[:, :, :length]


def parameter_census(model: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    """Sorted (name, shape) list of all parameters, for structural checks."""
    return sorted((name, tuple(p.shape)) for name, p in model.named_parameters())


def count_macs(model: nn.Module, x: torch.Tensor, n, context=None) -> int:
    """Multiply-add count of one forward pass (convolutions and linears)."""
    total = 0

    def conv_hook(mod, inp, out):
        nonlocal total
        k = mod.kernel_size[0]
        total += out.numel() * (mod.in_channels // mod.groups) * k

    def linear_hook(mod, inp, out):
        nonlocal total
        total += out.numel() * mod.in_features

    handles = []
    for mod in model.modules():
        if isinstance(mod, nn.Conv1d):
            handles.append(mod.register_forward_hook(conv_hook))
        elif isinstance(mod, nn.Linear):
            handles.append(mod.register_forward_hook(linear_hook))
    try:
        with torch.no_grad():
            model(x, n, context)
    finally:
        for h in handles:
            h.remove()
    return total
