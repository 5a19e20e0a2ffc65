"""Graph-transformer noise predictor over a complete directed area graph."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .graph import FEATURE_WIDTH, AttributedGraph, InvalidInputError


# number of per-edge channels each encoding produces
DISTANCE_ENCODINGS = {"raw": 1, "log": 2}


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 4
    hidden_dim: int = 32
    n_heads: int = 4
    in_features: int = FEATURE_WIDTH
    time_dim: int = 32
    ff_mult: int = 2
    edge_fusion: str = "additive"  # or "film"
    T: int = 1000
    distance_encoding: str = "log"  # or "raw"

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise InvalidInputError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.edge_fusion not in ("additive", "film"):
            raise InvalidInputError(f"unknown edge fusion {self.edge_fusion!r}")
        if self.distance_encoding not in DISTANCE_ENCODINGS:
            raise InvalidInputError(f"unknown distance encoding {self.distance_encoding!r}")
        if min(self.n_layers, self.hidden_dim, self.n_heads, self.time_dim, self.T) < 1:
            raise InvalidInputError("denoiser sizes must be positive")

    @property
    def n_distance_features(self) -> int:
        return DISTANCE_ENCODINGS[self.distance_encoding]

    @property
    def d_k(self) -> int:
        return self.hidden_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class DLaPE(NamedTuple):
    vectors: np.ndarray
    eigenvalues: np.ndarray


def distance_affinity(distances) -> np.ndarray:
    """Gaussian kernel on distances, bandwidth = median positive distance, zero diagonal."""
    d = np.asarray(distances, dtype=np.float64)
    positive = d[d > 0]
    sigma = float(np.median(positive)) if positive.size else 1.0
    A = np.exp(-(d**2) / (2.0 * sigma**2))
    np.fill_diagonal(A, 0.0)
    return A


def compute_dlape(distances, k: int) -> DLaPE:
    """Smallest-eigenvalue eigenvectors of the distance-affinity Laplacian.

    Each eigenvector is sign-fixed so its largest-magnitude entry is
    positive. Columns beyond N are zero. A single-region area yields one
    zero column (a lone node has no position to encode).
    """
    d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise InvalidInputError(f"distance matrix must be square, got {d.shape}")
    vecs = np.zeros((n, k))
    vals = np.zeros(k)
    if n == 1:
        return DLaPE(vecs, vals)
    A = distance_affinity(d)
    L = np.diag(A.sum(axis=1)) - A
    w, v = np.linalg.eigh(L)
    m = min(n, k)
    v = v[:, :m]
    # argmax picks the first of tied magnitudes; ties are measure-zero on real data
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivot, np.arange(m)])
    signs[signs == 0] = 1.0
    vecs[:, :m] = v * signs
    vals[:m] = w[:m]
    return DLaPE(vecs, vals)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer diffusion steps, shape (..., dim)."""
    t = torch.as_tensor(t, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class Condition(NamedTuple):
    """Generation condition for one area, as tensors."""

    node_features: torch.Tensor  # (N, D), scaled
    distances: torch.Tensor  # (N, N)
    lape: torch.Tensor  # (N, hidden_dim)
    area_id: str = ""


def make_condition(graph: AttributedGraph, hidden_dim: int, dtype=torch.float32) -> Condition:
    lape = compute_dlape(graph.distances, hidden_dim).vectors
    return Condition(
        torch.tensor(graph.node_features, dtype=dtype),
        torch.tensor(graph.distances, dtype=dtype),
        torch.as_tensor(lape, dtype=dtype),
        graph.area_id,
    )


def distance_channels(distances: torch.Tensor, encoding: str) -> torch.Tensor:
    """Per-edge distance inputs, shape (N, N, channels).

    ``"raw"`` gives d_ij alone. ``"log"`` adds log d_ij, with zero distances
    (the diagonal) set to half the smallest positive distance in the area.
    """
    d = distances
    if encoding == "raw":
        return d[..., None]
    positive = d[d > 0]
    fill = positive.min() / 2 if positive.numel() else torch.ones((), dtype=d.dtype)
    return torch.stack([d, torch.log(torch.where(d > 0, d, fill))], dim=-1)


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Linear(d_hidden, d_out))


class GraphTransformerLayer(nn.Module):
    """Multi-head attention over all node pairs with edge-feature fusion.

    Per head the raw score is ``q_i . k_j / sqrt(d_k) + W e_ij`` (or, in
    FiLM mode, ``s_ij * (1 + W_m e_ij) + W_a e_ij``). Softmax over j weights
    the values; the raw scores of all heads, projected back to the hidden
    width, become the edge update. Both streams are pre-normed and
    residual, each followed by a feed-forward block.
    """

    def __init__(self, hidden_dim: int, n_heads: int, ff_mult: int = 2, edge_fusion: str = "additive"):
        super().__init__()
        self.n_heads = n_heads
        self.d_k = hidden_dim // n_heads
        self.edge_fusion = edge_fusion
        self.norm_h1 = nn.LayerNorm(hidden_dim)
        self.norm_e1 = nn.LayerNorm(hidden_dim)
        self.q = nn.Linear(hidden_dim, hidden_dim)
        self.k = nn.Linear(hidden_dim, hidden_dim)
        self.v = nn.Linear(hidden_dim, hidden_dim)
        self.w_edge = nn.Linear(hidden_dim, n_heads, bias=False)
        if edge_fusion == "film":
            self.w_scale = nn.Linear(hidden_dim, n_heads)
        self.o_h = nn.Linear(hidden_dim, hidden_dim)
        self.o_e = nn.Linear(n_heads, hidden_dim)
        self.norm_h2 = nn.LayerNorm(hidden_dim)
        self.norm_e2 = nn.LayerNorm(hidden_dim)
        self.ff_h = _mlp(hidden_dim, ff_mult * hidden_dim, hidden_dim)
        self.ff_e = _mlp(hidden_dim, ff_mult * hidden_dim, hidden_dim)

    def attention(self, h: torch.Tensor, e: torch.Tensor):
        n = h.shape[0]
        Q = self.q(h).view(n, self.n_heads, self.d_k)
        K = self.k(h).view(n, self.n_heads, self.d_k)
        V = self.v(h).view(n, self.n_heads, self.d_k)
        scores = torch.einsum("ihd,jhd->ijh", Q, K) / math.sqrt(self.d_k)
        if self.edge_fusion == "film":
            scores = scores * (1.0 + self.w_scale(e)) + self.w_edge(e)
        else:
            scores = scores + self.w_edge(e)
        attn = torch.softmax(scores, dim=1)
        agg = torch.einsum("ijh,jhd->ihd", attn, V).reshape(n, -1)
        return self.o_h(agg), self.o_e(scores), attn

    def forward(self, h: torch.Tensor, e: torch.Tensor, return_attention: bool = False):
        if h.dim() != 2 or e.shape != (h.shape[0], h.shape[0], h.shape[1]):
            raise InvalidInputError(f"shape mismatch: nodes {tuple(h.shape)}, edges {tuple(e.shape)}")
        dh, de, attn = self.attention(self.norm_h1(h), self.norm_e1(e))
        h = h + dh
        e = e + de
        h = h + self.ff_h(self.norm_h2(h))
        e = e + self.ff_e(self.norm_e2(e))
        if return_attention:
            return h, e, attn
        return h, e


class Denoiser(nn.Module):
    """Predicts the injected noise on every edge of a noisy log-flow matrix."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.node_embed = _mlp(config.in_features, h, h)
        k = config.n_distance_features
        self.edge_embed = _mlp(1 + k, h, h)
        self.time_embed = _mlp(config.time_dim, h, h)
        self.lape_in = nn.ModuleList(nn.Linear(h, h, bias=False) for _ in range(config.n_layers))
        self.dist_in = nn.ModuleList(nn.Linear(k, h, bias=False) for _ in range(config.n_layers))
        self.time_h = nn.ModuleList(nn.Linear(h, h) for _ in range(config.n_layers))
        self.time_e = nn.ModuleList(nn.Linear(h, h) for _ in range(config.n_layers))
        self.layers = nn.ModuleList(
            GraphTransformerLayer(h, config.n_heads, config.ff_mult, config.edge_fusion)
            for _ in range(config.n_layers)
        )
        self.out_norm = nn.LayerNorm(h)
        self.head = nn.Linear(h, 1)

    def forward(self, f_t: torch.Tensor, t, cond: Condition, return_attention: bool = False):
        n = cond.node_features.shape[0]
        if f_t.shape != (n, n):
            raise InvalidInputError(f"noisy matrix {tuple(f_t.shape)} does not match {n} nodes")
        t_val = int(t)
        if not 1 <= t_val <= self.config.T:
            raise InvalidInputError(f"step t={t_val} outside [1, {self.config.T}]")
        dtype = f_t.dtype
        d = distance_channels(cond.distances.to(dtype), self.config.distance_encoding)
        h = self.node_embed(cond.node_features.to(dtype))
        e = self.edge_embed(torch.cat([f_t[..., None], d], dim=-1))
        temb = self.time_embed(timestep_embedding(t_val, self.config.time_dim).to(dtype))
        lape = cond.lape.to(dtype)
        attentions = []
        for layer, lape_in, dist_in, time_h, time_e in zip(
            self.layers, self.lape_in, self.dist_in, self.time_h, self.time_e
        ):
            h = h + lape_in(lape) + time_h(temb)
            e = e + dist_in(d) + time_e(temb)
            if return_attention:
                h, e, attn = layer(h, e, return_attention=True)
                attentions.append(attn)
            else:
                h, e = layer(h, e)
        eps = self.head(self.out_norm(e)).squeeze(-1)
        if return_attention:
            return eps, attentions
        return eps
