"""Hierarchical cross-modal graph fusion.

A configurable stack of self-attention (SAB) and bidirectional cross-attention
(CAB) blocks over two token streams. Streams stay separate (SABs run
dual-path with their own weights) up to the last CAB; after it the streams are
concatenated and the remaining SABs recalibrate the joint token set. Without
any CAB the streams are joined before the first block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .glfe import multihead_attention

BLOCK_TYPES = ("SAB", "CAB")
TABLE4_SEQUENCES = (
    ("CAB", "CAB"),
    ("SAB", "SAB"),
    ("SAB", "CAB"),
    ("CAB", "SAB"),
    ("CAB", "SAB", "CAB"),
    ("SAB", "CAB", "SAB"),
)


@dataclass
class FusionConfig:
    sequence: List[str] = field(default_factory=lambda: ["SAB", "CAB", "SAB"])
    d: int = 224
    heads: int = 4

    def __post_init__(self):
        if isinstance(self.sequence, str):
            self.sequence = [s.strip() for s in self.sequence.split(",") if s.strip()]
        self.sequence = [s.upper() for s in self.sequence]
        if not self.sequence:
            raise ValueError("fusion sequence is empty")
        bad = [s for s in self.sequence if s not in BLOCK_TYPES]
        if bad:
            raise ValueError(f"unknown fusion blocks {bad}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")

    def to_json(self) -> dict:
        return asdict(self)


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/output projections."""

    def __init__(self, d, heads):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.last_attention = None

    def forward(self, queries, context):
        out, attn = multihead_attention(
            self.q(queries), self.k(context), self.v(context), self.heads
        )
        self.last_attention = attn.detach()
        return self.out(out)


class FeedForward(nn.Sequential):
    def __init__(self, d, expansion=4):
        super().__init__(nn.Linear(d, expansion * d), nn.GELU(), nn.Linear(expansion * d, d))


def _batched(x):
    return (x[None], True) if x.dim() == 2 else (x, False)


class SelfAttentionBlock(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = FeedForward(d)

    def zero_output(self):
        """Zero the residual-branch output projections (block becomes the identity)."""
        for lin in (self.attn.out, self.ff[-1]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        x, squeeze = _batched(x)
        h = self.norm1(x)
        x = x + self.attn(h, h)
        x = x + self.ff(self.norm2(x))
        return x[0] if squeeze else x


class CrossDirection(nn.Module):
    """Queries from one stream attend to the other; own residual + feedforward."""

    def __init__(self, d, heads):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = FeedForward(d)

    def forward(self, x, other):
        x = x + self.attn(self.norm_q(x), self.norm_kv(other))
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Bidirectional cross-attention; the two directions share no weights."""

    def __init__(self, d, heads):
        super().__init__()
        self.a_from_b = CrossDirection(d, heads)
        self.b_from_a = CrossDirection(d, heads)

    def zero_output(self):
        for direction in (self.a_from_b, self.b_from_a):
            for lin in (direction.attn.out, direction.ff[-1]):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, a, b) -> Tuple[torch.Tensor, torch.Tensor]:
        if a.shape[-1] != b.shape[-1]:
            raise ValueError(f"stream widths differ: {a.shape[-1]} vs {b.shape[-1]}")
        a, squeeze = _batched(a)
        b, _ = _batched(b)
        a2 = self.a_from_b(a, b)
        b2 = self.b_from_a(b, a)
        if squeeze:
            return a2[0], b2[0]
        return a2, b2


@dataclass
class FusedRepresentation:
    tokens: torch.Tensor
    pooled: torch.Tensor
    streams: Optional[Tuple[torch.Tensor, torch.Tensor]] = None


class HCMGFM(nn.Module):
    """Fusion stack built from a :class:`FusionConfig` sequence."""

    def __init__(self, config: Optional[FusionConfig] = None):
        super().__init__()
        self.config = config = config or FusionConfig()
        seq = config.sequence
        cabs = [i for i, s in enumerate(seq) if s == "CAB"]
        # blocks at or before this index see two separate streams
        self.join_after = cabs[-1] if cabs else -1
        blocks = []
        for i, kind in enumerate(seq):
            if kind == "CAB":
                blocks.append(CrossAttentionBlock(config.d, config.heads))
            elif i < self.join_after:
                blocks.append(
                    nn.ModuleList([SelfAttentionBlock(config.d, config.heads) for _ in range(2)])
                )
            else:
                blocks.append(SelfAttentionBlock(config.d, config.heads))
        self.blocks = nn.ModuleList(blocks)

    def zero_output(self):
        for m in self.modules():
            if isinstance(m, (SelfAttentionBlock, CrossAttentionBlock)):
                m.zero_output()

    def forward(self, intra_tokens, inter_tokens) -> FusedRepresentation:
        if intra_tokens.shape[-2] == 0 or inter_tokens.shape[-2] == 0:
            raise ValueError("both token streams must be nonempty")
        a, b = intra_tokens, inter_tokens
        joint, streams = None, None
        if self.join_after < 0:
            streams = (a, b)
            joint = torch.cat([a, b], dim=-2)
        for i, (kind, block) in enumerate(zip(self.config.sequence, self.blocks)):
            if joint is not None:
                joint = block(joint)
            elif kind == "CAB":
                a, b = block(a, b)
            else:
                a, b = block[0](a), block[1](b)
            if i == self.join_after:
                streams = (a, b)
                joint = torch.cat([a, b], dim=-2)
        return FusedRepresentation(joint, joint.mean(dim=-2), streams)


def fuse(intra_tokens, inter_tokens, module: HCMGFM) -> FusedRepresentation:
    return module(intra_tokens, inter_tokens)


class ClassifierHead(nn.Linear):
    """Single linear layer d -> 2 (unnormalized logits)."""

    def __init__(self, d):
        super().__init__(d, 2)

    def forward(self, pooled):
        if pooled.shape[-1] != self.in_features:
            raise ValueError(f"pooled length {pooled.shape[-1]}, expected {self.in_features}")
        return super().forward(pooled)
