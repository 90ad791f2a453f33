"""Behavior pattern extraction: embed coarse states, encode global context.

Each state gets a spatial embedding (affine map of its coordinates and the
trace's visiting-distribution vector) plus a sinusoidal temporal embedding
of its slot; a bidirectional transformer encoder turns the summed embeddings
into one context vector per state.  The per-state conditioning vector handed
to the fine-stage denoiser is the state's own context concatenated with the
mean-pooled context of the whole trace.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def positional_time_embedding(ticks: torch.Tensor, dim: int) -> torch.Tensor:
    """POS(T): sin at even positions, cos at odd (1-based), scale 10000^((j-1)/d)."""
    ticks = torch.as_tensor(ticks, dtype=torch.float32).reshape(-1)
    j = torch.arange(1, dim + 1, dtype=torch.float32)
    denom = torch.pow(10000.0, (j - 1) / dim)
    args = ticks[:, None] / denom[None, :]
    even = (j % 2 == 0)
    return torch.where(even, torch.sin(args), torch.cos(args))


class BehaviorPatternEncoder(nn.Module):
    """Transformer encoder over embedded coarse states.

    `visit_len` is the coarse trace length L; the visiting-distribution
    vector is the trace's binary temporal mask, shared by all of its states.
    """

    def __init__(self, visit_len: int, embed_dim: int = 32, n_layers: int = 2,
                 n_heads: int = 4):
        super().__init__()
        self.visit_len = visit_len
        self.embed_dim = embed_dim
        self.w_coord = nn.Parameter(torch.randn(embed_dim, 2) / math.sqrt(2))
        self.w_visit = nn.Parameter(torch.randn(embed_dim, visit_len) / math.sqrt(visit_len))
        self.bias = nn.Parameter(torch.zeros(embed_dim))
        layer = nn.TransformerEncoderLayer(
            d_model=embed_dim, nhead=n_heads, dim_feedforward=4 * embed_dim,
            dropout=0.0, batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers,
                                             enable_nested_tensor=False)
        self.encode_calls = 0  # instrumentation: one encode per trace

    @property
    def context_dim(self) -> int:
        return 2 * self.embed_dim

    def spatial_embed(self, coords: torch.Tensor, visit: torch.Tensor) -> torch.Tensor:
        """(K, 2) coords + (L,) visit vector -> (K, d) affine embeddings."""
        coords = torch.as_tensor(coords, dtype=torch.float32).reshape(-1, 2)
        visit = torch.as_tensor(visit, dtype=torch.float32).reshape(-1)
        if visit.numel() != self.visit_len:
            raise ValueError(f"visit vector length {visit.numel()} != {self.visit_len}")
        return coords @ self.w_coord.T + (self.w_visit @ visit) + self.bias

    def temporal_embed(self, ticks: torch.Tensor) -> torch.Tensor:
        return positional_time_embedding(ticks, self.embed_dim)

    def encode(self, coords: torch.Tensor, ticks: torch.Tensor,
               visit: torch.Tensor) -> torch.Tensor:
        """One context vector per state: (K, d)."""
        coords = torch.as_tensor(coords, dtype=torch.float32).reshape(-1, 2)
        if coords.shape[0] == 0:
            raise ValueError("cannot encode an empty state sequence")
        self.encode_calls += 1
        e = self.spatial_embed(coords, visit) + self.temporal_embed(ticks)
        return self.encoder(e.unsqueeze(0)).squeeze(0)

    def per_state_context(self, h: torch.Tensor) -> torch.Tensor:
        """(K, d) -> (K, 2d): each state's vector joined with the trace mean."""
        pooled = h.mean(dim=0, keepdim=True).expand_as(h)
        return torch.cat([h, pooled], dim=-1)
