"""Context encoder: polyline subgraphs followed by a cascade of
agent/map interaction attention blocks.

Scenes are turned into padded tensors by :func:`featurize` and
:func:`collate`; the encoder works on whole batches.  The context feature of
a scene is the target agent's token (always agent slot 0) after the last
level, projected to ``d_x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from seneva.errors import InvalidConfig, InvalidInput
from seneva.scene import AgentTrack, MapPolyline, Scene

AGENT_FEATURES = 9
MAP_FEATURES = 4


@dataclass
class EncoderConfig:
    d_model: int = 64
    subgraph_depth: int = 3
    n_levels: int = 2
    n_heads: int = 4
    max_neighbors: int = 32
    max_polylines: int = 64
    max_vectors: int = 20

    def validate(self) -> None:
        for name in ("d_model", "subgraph_depth", "n_levels", "n_heads", "max_neighbors", "max_polylines", "max_vectors"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"encoder.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise InvalidConfig("d_model must be even (subgraph layers concatenate two halves)")


# --------------------------------------------------------------------------
# featurization (numpy, target frame)


def agent_vectors(track: AgentTrack) -> np.ndarray:
    """``(max(H-1, 1), 9)`` vectors: head/tail positions, heading cos/sin,
    velocity and the normalized time index of the tail."""
    s = track.states
    H = len(s)
    if H == 1:
        head, tail, idx = s[:1], s[:1], np.ones(1)
    else:
        head, tail, idx = s[:-1], s[1:], np.arange(1, H) / (H - 1)
    return np.concatenate(
        [
            head[:, 0:2],
            tail[:, 0:2],
            np.cos(tail[:, 2:3]),
            np.sin(tail[:, 2:3]),
            tail[:, 3:5],
            idx[:, None],
        ],
        axis=1,
    )


@dataclass
class SceneFeatures:
    agents: np.ndarray  # (A, Hv, 9), slot 0 is the target
    polylines: list[np.ndarray]  # each (V_i, 4)


def featurize(scene: Scene, cfg: EncoderConfig) -> SceneFeatures:
    """Vectorize a target-frame scene, splitting long polylines."""
    if len(scene.neighbors) > cfg.max_neighbors:
        raise InvalidInput(f"{len(scene.neighbors)} neighbors exceeds max_neighbors={cfg.max_neighbors}")
    if len(scene.map) > cfg.max_polylines:
        raise InvalidInput(f"{len(scene.map)} polylines exceeds max_polylines={cfg.max_polylines}")
    agents = np.stack([agent_vectors(t) for t in [scene.target, *scene.neighbors]])
    polylines = [piece.vectors for pl in scene.map for piece in pl.split(cfg.max_vectors)]
    return SceneFeatures(agents, polylines)


@dataclass
class EncoderBatch:
    agents: torch.Tensor  # (B, A, Hv, 9)
    agent_mask: torch.Tensor  # (B, A) bool
    maps: torch.Tensor  # (B, P, V, 4)
    map_vec_mask: torch.Tensor  # (B, P, V) bool

    @property
    def map_mask(self) -> torch.Tensor:
        return self.map_vec_mask.any(-1)

    def __len__(self) -> int:
        return self.agents.shape[0]

    def index(self, idx) -> "EncoderBatch":
        return EncoderBatch(self.agents[idx], self.agent_mask[idx], self.maps[idx], self.map_vec_mask[idx])


def collate(features: list[SceneFeatures], dtype=torch.float64) -> EncoderBatch:
    B = len(features)
    A = max(f.agents.shape[0] for f in features)
    Hv = features[0].agents.shape[1]
    P = max([len(f.polylines) for f in features] + [1])
    V = max([len(p) for f in features for p in f.polylines] + [1])
    agents = np.zeros((B, A, Hv, AGENT_FEATURES))
    amask = np.zeros((B, A), dtype=bool)
    maps = np.zeros((B, P, V, MAP_FEATURES))
    vmask = np.zeros((B, P, V), dtype=bool)
    for b, f in enumerate(features):
        if f.agents.shape[1] != Hv:
            raise InvalidInput("all scenes in a batch must share the history length")
        agents[b, : len(f.agents)] = f.agents
        amask[b, : len(f.agents)] = True
        for p, pl in enumerate(f.polylines):
            maps[b, p, : len(pl)] = pl
            vmask[b, p, : len(pl)] = True
    return EncoderBatch(
        torch.as_tensor(agents, dtype=dtype),
        torch.as_tensor(amask),
        torch.as_tensor(maps, dtype=dtype),
        torch.as_tensor(vmask),
    )


# --------------------------------------------------------------------------
# modules


def masked_max(h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Max over the vector axis of ``h`` (``(..., V, D)``) ignoring entries
    where ``mask`` (``(..., V)``) is False; all-masked rows give 0."""
    fill = torch.finfo(h.dtype).min
    out = h.masked_fill(~mask.unsqueeze(-1), fill).amax(dim=-2)
    return torch.where(mask.any(-1).unsqueeze(-1), out, torch.zeros_like(out))


class Subgraph(nn.Module):
    """Per-vector MLP layers with max-pool message passing."""

    def __init__(self, in_dim: int, d_model: int, depth: int) -> None:
        super().__init__()
        half = d_model // 2
        self.layers = nn.ModuleList()
        for i in range(depth):
            self.layers.append(nn.ModuleDict({"lin": nn.Linear(in_dim if i == 0 else d_model, half), "norm": nn.LayerNorm(half)}))

    def forward(self, vecs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = vecs
        for layer in self.layers:
            h = F.silu(layer["norm"](layer["lin"](h)))
            pooled = masked_max(h, mask)
            h = torch.cat([h, pooled.unsqueeze(-2).expand_as(h)], dim=-1)
        return masked_max(h, mask)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, context: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, Nq, D = query.shape
        Nk = context.shape[1]
        h, dh = self.n_heads, D // self.n_heads
        q = self.q(query).view(B, Nq, h, dh).transpose(1, 2)
        k = self.k(context).view(B, Nk, h, dh).transpose(1, 2)
        v = self.v(context).view(B, Nk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / dh**0.5
        scores = scores.masked_fill(~mask[:, None, None, :], torch.finfo(scores.dtype).min)
        out = (scores.softmax(-1) @ v).transpose(1, 2).reshape(B, Nq, D)
        # queries with nothing to attend to receive no message
        return self.o(out) * mask.any(-1).to(out.dtype)[:, None, None]


class InteractionBlock(nn.Module):
    """Pre-norm residual attention followed by a pre-norm feed-forward."""

    def __init__(self, d_model: int, n_heads: int, self_attention: bool) -> None:
        super().__init__()
        self.self_attention = self_attention
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_kv = None if self_attention else nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.SiLU(), nn.Linear(2 * d_model, d_model))

    def forward(self, tokens: torch.Tensor, context: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q = self.norm_q(tokens)
        kv = q if self.self_attention else self.norm_kv(context)
        tokens = tokens + self.attn(q, kv, mask)
        return tokens + self.ff(self.norm_ff(tokens))


class ContextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, d_x: int | None = None) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.d_x = d_x or d
        self.agent_subgraph = Subgraph(AGENT_FEATURES, d, cfg.subgraph_depth)
        self.map_subgraph = Subgraph(MAP_FEATURES, d, cfg.subgraph_depth)
        self.levels = nn.ModuleList(
            nn.ModuleDict(
                {
                    "a2m": InteractionBlock(d, cfg.n_heads, self_attention=False),
                    "m2m": InteractionBlock(d, cfg.n_heads, self_attention=True),
                    "m2a": InteractionBlock(d, cfg.n_heads, self_attention=False),
                    "a2a": InteractionBlock(d, cfg.n_heads, self_attention=True),
                }
            )
            for _ in range(cfg.n_levels)
        )
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, self.d_x)

    def forward(self, batch: EncoderBatch) -> torch.Tensor:
        agent_mask = batch.agent_mask
        map_mask = batch.map_mask
        vec_mask_a = agent_mask.unsqueeze(-1).expand(batch.agents.shape[:3])
        agents = self.agent_subgraph(batch.agents, vec_mask_a)
        maps = self.map_subgraph(batch.maps, batch.map_vec_mask)
        for level in self.levels:
            maps = level["a2m"](maps, agents, agent_mask)
            maps = level["m2m"](maps, maps, map_mask)
            agents = level["m2a"](agents, maps, map_mask)
            agents = level["a2a"](agents, agents, agent_mask)
        return self.out(self.out_norm(agents[:, 0]))

    @torch.no_grad()
    def encode_subgraph(self, entity: AgentTrack | MapPolyline) -> torch.Tensor:
        """Subgraph feature (width ``d_model``) of one target-frame entity."""
        dtype = next(self.parameters()).dtype
        if isinstance(entity, AgentTrack):
            vecs, net = agent_vectors(entity), self.agent_subgraph
        elif isinstance(entity, MapPolyline):
            vecs, net = entity.vectors, self.map_subgraph
        else:
            raise InvalidInput(f"cannot encode {type(entity).__name__}")
        if len(vecs) == 0:
            raise InvalidInput("empty entity")
        t = torch.as_tensor(vecs, dtype=dtype)
        return net(t, torch.ones(len(vecs), dtype=torch.bool))

    @torch.no_grad()
    def encode_scene(self, scene: Scene) -> torch.Tensor:
        """Context feature of one target-frame scene."""
        dtype = next(self.parameters()).dtype
        return self(collate([featurize(scene, self.cfg)], dtype=dtype))[0]
