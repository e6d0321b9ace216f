"""Atlas-aware bidirectional transformer over FC matrices.

An (N, N) matrix is segmented into per-network row slabs (a network's
regions against all N columns), each slab is cut into column patches of
width ``patch_width`` whose height is that network's region count, and the
resulting tokens run through per-network self-attention stacks. The
backward path inverts the patching per network, concatenates the slabs in
atlas order and applies a small convolutional head that re-imposes the FC
invariants (symmetry, unit diagonal, range).

Per-network parameters are unavoidable: the patch flatten size
``n_regions * patch_width`` differs across networks. Attention never mixes
tokens across networks; cross-network integration happens only at the
row-concatenation of the decoded slabs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError
from .fc import AtlasPartition


@dataclass(frozen=True)
class AABTConfig:
    """Hyperparameters of one atlas-aware transformer stack."""

    atlas: AtlasPartition
    depth: int = 3
    embed_dim: int = 128
    num_heads: int = 8
    patch_width: int = 16
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.patch_width < 1:
            raise ValueError(f"patch_width must be >= 1, got {self.patch_width}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be > 0, got {self.mlp_ratio}")

    @property
    def num_tokens(self) -> int:
        """Tokens per network: ceil(N / patch_width), equal across networks."""
        n = self.atlas.total_regions
        return -(-n // self.patch_width)

    @property
    def padded_width(self) -> int:
        return self.num_tokens * self.patch_width


@dataclass(frozen=True)
class NetworkSlab:
    """One network's rows against all columns, zero-padded to padded_width."""

    network_index: int
    values: np.ndarray


def segment(matrix, atlas: AtlasPartition, patch_width: int) -> list[NetworkSlab]:
    """Split an (N, N) matrix into per-network row slabs, columns padded.

    Row-concatenating the slabs (padding dropped) reconstructs the input
    exactly.
    """
    m = np.asarray(matrix, dtype=np.float64)
    n = atlas.total_regions
    if m.ndim != 2 or m.shape != (n, n):
        raise ShapeError(f"expected ({n}, {n}) input, got {m.shape}")
    num_tokens = -(-n // patch_width)
    padded = np.zeros((n, num_tokens * patch_width), dtype=m.dtype)
    padded[:, :n] = m
    return [
        NetworkSlab(i, padded[sl, :].copy())
        for i, sl in enumerate(atlas.row_slices())
    ]


@dataclass
class FeatureMap:
    """Encoded per-network tokens plus the metadata needed to invert them."""

    tokens: torch.Tensor  # (batch, networks, tokens_per_network, embed_dim)
    atlas: AtlasPartition
    patch_width: int


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, heads, t, head_dim)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    """Flatten (n_regions, patch_width) column patches and project to tokens."""

    def __init__(self, n_regions: int, cfg: AABTConfig):
        super().__init__()
        self.n_regions = n_regions
        self.patch_width = cfg.patch_width
        self.proj = nn.Linear(n_regions * cfg.patch_width, cfg.embed_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.num_tokens, cfg.embed_dim))
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, slab):
        # slab: (b, n_regions, padded_width) -> (b, tokens, embed_dim)
        b, h, w = slab.shape
        t = w // self.patch_width
        patches = slab.reshape(b, h, t, self.patch_width).permute(0, 2, 1, 3)
        flat = patches.reshape(b, t, h * self.patch_width)
        return self.proj(flat) + self.pos


class InversePatchEmbed(nn.Module):
    """Project tokens back to (n_regions, patch_width) column patches."""

    def __init__(self, n_regions: int, cfg: AABTConfig):
        super().__init__()
        self.n_regions = n_regions
        self.patch_width = cfg.patch_width
        self.proj = nn.Linear(cfg.embed_dim, n_regions * cfg.patch_width)

    def forward(self, tokens):
        # tokens: (b, tokens, embed_dim) -> slab (b, n_regions, padded_width)
        b, t, _ = tokens.shape
        patches = self.proj(tokens).reshape(b, t, self.n_regions, self.patch_width)
        return patches.permute(0, 2, 1, 3).reshape(b, self.n_regions, t * self.patch_width)


class NetworkStack(nn.Module):
    """Patch embedding plus the self-attention stack of a single network."""

    def __init__(self, n_regions: int, cfg: AABTConfig):
        super().__init__()
        self.embed = PatchEmbed(n_regions, cfg)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        )

    def encode_tokens(self, tokens):
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def forward(self, slab):
        return self.encode_tokens(self.embed(slab))


class AtlasEncoder(nn.Module):
    """Forward path: (B, N, N) -> per-network token grid (B, K, T, D)."""

    def __init__(self, cfg: AABTConfig):
        super().__init__()
        self.cfg = cfg
        self.nets = nn.ModuleList(NetworkStack(c, cfg) for c in cfg.atlas.counts)

    def forward(self, x):
        x, _ = _batched(x, self.cfg.atlas.total_regions)
        x = x.to(next(self.parameters()).dtype)
        b, n, _ = x.shape
        padded = x.new_zeros((b, n, self.cfg.padded_width))
        padded[:, :, :n] = x
        tokens = [
            net(padded[:, sl, :])
            for net, sl in zip(self.nets, self.cfg.atlas.row_slices())
        ]
        out = torch.stack(tokens, dim=1)
        return out


class NetworkUnstack(nn.Module):
    """Self-attention stack plus inverse patch embedding of one network."""

    def __init__(self, n_regions: int, cfg: AABTConfig, depth: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
            for _ in range(depth)
        )
        self.unembed = InversePatchEmbed(n_regions, cfg)

    def forward(self, tokens):
        for block in self.blocks:
            tokens = block(tokens)
        return self.unembed(tokens)


class DecodeHead(nn.Module):
    """Two 3x3 convolutions (1 -> 8 -> 1 channels) finishing the decode.

    With ``constrain`` the output is passed through tanh, symmetrized and
    given a unit diagonal, so it satisfies every FCMatrix invariant by
    construction; without it the raw convolution output is returned (the
    unconstrained feature-map variant).
    """

    def __init__(self, constrain: bool = True, hidden_channels: int = 8):
        super().__init__()
        self.constrain = constrain
        self.conv1 = nn.Conv2d(1, hidden_channels, 3, stride=1, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(hidden_channels, 1, 3, stride=1, padding=1)

    def forward(self, x):
        # x: (b, n, n)
        out = self.conv2(self.act(self.conv1(x.unsqueeze(1)))).squeeze(1)
        if not self.constrain:
            return out
        out = torch.tanh(out)
        out = (out + out.transpose(-2, -1)) / 2.0
        eye = torch.eye(out.shape[-1], dtype=out.dtype, device=out.device)
        return out * (1.0 - eye) + eye


class AtlasDecoder(nn.Module):
    """Backward path: token grid (B, K, T, D) -> (B, N, N).

    ``depth`` transformer blocks per network run before the inverse patch
    embedding (0 for the plain single-stack configuration; >0 when the
    decoder mirrors an encoder).
    """

    def __init__(self, cfg: AABTConfig, depth: int | None = None, constrain: bool = True):
        super().__init__()
        self.cfg = cfg
        depth = cfg.depth if depth is None else depth
        self.nets = nn.ModuleList(
            NetworkUnstack(c, cfg, depth) for c in cfg.atlas.counts
        )
        self.head = DecodeHead(constrain=constrain)

    def forward(self, tokens):
        n = self.cfg.atlas.total_regions
        slabs = [net(tokens[:, i]) for i, net in enumerate(self.nets)]
        raw = torch.cat(slabs, dim=1)[:, :, :n]
        return self.head(raw)


class AABT(nn.Module):
    """One full atlas-aware stack: segment/embed/attend, then invert/decode.

    ``forward(x, mode="to_feature")`` returns the encoded FeatureMap;
    ``mode="to_fc"`` continues through the backward path and the decode
    head. ``decode_feature`` applies the backward path alone, so
    ``forward(x, "to_fc") == decode_feature(forward(x, "to_feature"))``.
    """

    def __init__(self, cfg: AABTConfig, constrain: bool = True):
        super().__init__()
        self.cfg = cfg
        self.encoder = AtlasEncoder(cfg)
        self.decoder = AtlasDecoder(cfg, depth=0, constrain=constrain)

    def forward(self, x, mode: str = "to_fc"):
        if mode not in ("to_fc", "to_feature"):
            raise ValueError(f"unknown mode {mode!r}")
        tokens = self.encoder(x)
        if mode == "to_feature":
            return FeatureMap(tokens, self.cfg.atlas, self.cfg.patch_width)
        return self.decoder(tokens)

    def decode_feature(self, feature: FeatureMap):
        return self.decoder(feature.tokens)


def _batched(x, n: int):
    """Coerce (N, N) or (B, N, N) input to a batched tensor; validate shape."""
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    if x.ndim == 2:
        x = x.unsqueeze(0)
        squeeze = True
    else:
        squeeze = False
    if x.ndim != 3 or x.shape[-2:] != (n, n):
        raise ShapeError(f"expected (*, {n}, {n}) input, got {tuple(x.shape)}")
    return x, squeeze
