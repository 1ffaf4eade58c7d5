"""Global-Local Feature Encoder.

Three branches over four stages: a local branch (depthwise conv -> LN ->
pointwise conv), a global branch (windowed / shifted-window self-attention
with patch merging) and a fused branch that merges the AGCA-gated local and
global maps at every stage.

Tensors are channels-first ``(B, C, D, H, W)``. Shapes quoted as ``h x w x d``
in docs follow the (height, width, depth) convention of the patch size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    patch_size: Tuple[int, int, int] = (4, 4, 2)  # (height, width, depth)
    window_size: int = 4
    heads_per_stage: List[int] = field(default_factory=lambda: [1, 2, 4, 4])
    clinical_hidden: int = 64
    feature_dim: int = 224
    input_shape: Tuple[int, int, int] = (16, 64, 64)  # (depth, height, width)

    def __post_init__(self):
        self.stage_channels = list(self.stage_channels)
        self.heads_per_stage = list(self.heads_per_stage)
        self.patch_size = tuple(self.patch_size)
        self.input_shape = tuple(self.input_shape)
        if len(self.stage_channels) != 4 or len(self.heads_per_stage) != 4:
            raise ValueError("need exactly 4 stage widths and 4 head counts")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage_channels must be strictly increasing")
        for c, h in zip(self.stage_channels, self.heads_per_stage):
            if h < 1 or c % h:
                raise ValueError(f"stage width {c} not divisible by head count {h}")
        self.token_grid()

    def patch_dhw(self) -> Tuple[int, int, int]:
        ph, pw, pd = self.patch_size
        return (pd, ph, pw)

    def token_grid(self) -> Tuple[int, int, int]:
        """Token grid as (depth, height, width)."""
        grid = []
        for n, p in zip(self.input_shape, self.patch_dhw()):
            if p < 1 or n % p:
                raise ValueError(f"patch size {self.patch_size} does not divide input {self.input_shape}")
            grid.append(n // p)
        return tuple(grid)

    def stage_grids(self) -> List[Tuple[int, int, int]]:
        grids = [self.token_grid()]
        for _ in range(3):
            grids.append(tuple(max(1, g // 2) for g in grids[-1]))
        return grids

    def to_json(self) -> dict:
        return asdict(self)


def hwd(shape) -> Tuple[int, ...]:
    """Spatial shape of a (B, C, D, H, W) tensor reported as (h, w, d)."""
    d, h, w = shape[-3:]
    return (h, w, d)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a channels-first map."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


# ---------------------------------------------------------------------------
# channel attention


class AGCA(nn.Module):
    """Adaptive graph channel attention.

    gate = sigmoid(F_r'(relu(F_r(gap(m)) @ W @ (A0 @ A1 + A2)))) with the
    pooled channel vector as a row; A0 is a frozen identity buffer.
    """

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.embed_in = nn.Conv3d(channels, channels, 1)
        self.embed_out = nn.Conv3d(channels, channels, 1)
        self.weight = nn.Parameter(torch.eye(channels))
        self.a1 = nn.Parameter(torch.ones(channels))
        self.a2 = nn.Parameter(torch.zeros(channels, channels))
        self.register_buffer("a0", torch.eye(channels))

    def adjacency(self):
        return self.a0 @ torch.diag(self.a1) + self.a2

    def gate(self, m):
        if m.shape[1] != self.channels:
            raise ValueError(f"AGCA expects {self.channels} channels, got {m.shape[1]}")
        if not torch.isfinite(m).all():
            raise ValueError("AGCA input has non-finite values")
        pooled = m.mean(dim=(2, 3, 4))
        y = _conv1x1_vec(self.embed_in, pooled)
        y = F.relu(y @ self.weight @ self.adjacency())
        y = _conv1x1_vec(self.embed_out, y)
        return torch.sigmoid(y)

    def forward(self, m):
        return m * self.gate(m)[:, :, None, None, None]


def _conv1x1_vec(conv: nn.Conv3d, v):
    # a 1x1x1 conv applied to a pooled (B, C) vector
    return F.linear(v, conv.weight.flatten(1), conv.bias)


# ---------------------------------------------------------------------------
# local branch


class LocalBlock(nn.Module):
    """Depthwise 3x3x3 conv -> channel LN -> pointwise conv."""

    def __init__(self, in_channels, out_channels, norm=True):
        super().__init__()
        self.depthwise = nn.Conv3d(in_channels, in_channels, 3, padding=1, groups=in_channels)
        self.norm = ChannelLayerNorm(in_channels) if norm else nn.Identity()
        self.pointwise = nn.Conv3d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.pointwise(self.norm(_depthwise(self.depthwise, x)))


class LocalStage(nn.Module):
    """Spatial downsampling entry followed by a :class:`LocalBlock`.

    Stage 0 embeds the raw single-channel volume with a patch-sized stride so
    the output grid matches the global branch's tokens; later stages halve the
    grid with a depthwise stride-2 conv before widening in the pointwise conv.
    """

    def __init__(self, in_channels, out_channels, stride, first=False):
        super().__init__()
        self.in_channels = in_channels
        if first:
            self.down = nn.Conv3d(in_channels, out_channels, stride, stride=stride)
            mid = out_channels
        else:
            self.down = nn.Conv3d(in_channels, in_channels, stride, stride=stride, groups=in_channels)
            mid = in_channels
        self.block = LocalBlock(mid, out_channels)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"local stage expects {self.in_channels} channels, got {x.shape[1]}")
        down = self.down(x) if x.shape[1] == 1 else _depthwise(self.down, x)
        return self.block(down)


def _depthwise(conv, x):
    # grouped 3D convs are several times faster on CPU in channels-last layout
    return conv(x.contiguous(memory_format=torch.channels_last_3d)).contiguous()


# ---------------------------------------------------------------------------
# global branch


class PatchEmbed(nn.Module):
    """Non-overlapping patch embedding of a single-channel volume."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        patch = config.patch_dhw()
        self.proj = nn.Conv3d(1, config.stage_channels[0], patch, stride=patch)

    def forward(self, volume):
        volume = _channels_first(volume)
        spatial = tuple(volume.shape[-3:])
        if spatial != self.config.input_shape:
            raise ValueError(f"volume shape {spatial} does not match {self.config.input_shape}")
        return self.proj(volume)


class PatchMerging(nn.Module):
    """2x2x2 neighbourhood concat -> LN -> linear (channels-last tokens)."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.norm = nn.LayerNorm(8 * in_channels)
        self.reduction = nn.Linear(8 * in_channels, out_channels, bias=False)

    def forward(self, x):
        # x: (B, D, H, W, C)
        D, H, W = x.shape[1:4]
        x = F.pad(x, (0, 0, 0, W % 2, 0, H % 2, 0, D % 2))
        parts = [
            x[:, i::2, j::2, k::2, :] for i in (0, 1) for j in (0, 1) for k in (0, 1)
        ]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


def effective_window(grid, window, shift):
    """Clamp the window to the grid; axes no larger than the window are not shifted."""
    win, sh = [], []
    for g, w, s in zip(grid, window, shift):
        if g <= w:
            win.append(g)
            sh.append(0)
        else:
            win.append(w)
            sh.append(s)
    return tuple(win), tuple(sh)


def window_partition(x, window):
    B, D, H, W, C = x.shape
    wd, wh, ww = window
    x = x.view(B, D // wd, wd, H // wh, wh, W // ww, ww, C)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wd * wh * ww, C)


def window_reverse(windows, window, B, D, H, W):
    wd, wh, ww = window
    x = windows.view(B, D // wd, H // wh, W // ww, wd, wh, ww, -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(B, D, H, W, -1)


def shift_mask(grid, window, shift, device=None):
    """Additive mask (nW, N, N) separating regions that wrapped under the cyclic shift."""
    D, H, W = grid
    labels = torch.zeros((1, D, H, W, 1), device=device)
    cnt = 0
    ranges = [
        ((0, -w), (-w, -s), (-s, None)) if s > 0 else ((0, None),)
        for w, s in zip(window, shift)
    ]
    for d in ranges[0]:
        for h in ranges[1]:
            for w in ranges[2]:
                labels[:, slice(*d), slice(*h), slice(*w), :] = cnt
                cnt += 1
    wins = window_partition(labels, window).squeeze(-1)
    diff = wins[:, None, :] - wins[:, :, None]
    return torch.where(diff != 0, torch.tensor(MASK_VALUE, device=device), torch.tensor(0.0, device=device))


def multihead_attention(q, k, v, heads, mask=None):
    """Scaled dot-product attention; returns (output, weights).

    q: (B, Nq, C), k/v: (B, Nk, C); mask broadcastable to (B, heads, Nq, Nk).
    """
    B, Nq, C = q.shape
    Nk = k.shape[1]
    hd = C // heads
    q = q.view(B, Nq, heads, hd).transpose(1, 2)
    k = k.view(B, Nk, heads, hd).transpose(1, 2)
    v = v.view(B, Nk, heads, hd).transpose(1, 2)
    logits = q @ k.transpose(-2, -1) * hd**-0.5
    if mask is not None:
        logits = logits + mask
    attn = logits.softmax(dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(B, Nq, C)
    return out, attn


class WindowAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention = None

    def forward(self, windows, mask=None):
        # windows: (B*nW, N, C); mask: (nW, N, N)
        Bw, N, C = windows.shape
        hd = C // self.heads
        qkv = self.qkv(windows).view(Bw, N, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * hd**-0.5) @ k.transpose(-2, -1)
        if mask is not None:
            nW = mask.shape[0]
            # broadcast the per-window mask over the batch without materializing copies
            logits = (logits.view(Bw // nW, nW, self.heads, N, N) + mask[None, :, None]).view(Bw, self.heads, N, N)
        attn = logits.softmax(dim=-1)
        self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm (shifted) window attention + residual, pre-norm MLP + residual."""

    def __init__(self, dim, heads, window_size, shifted, mlp_ratio=4):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x):
        # x: (B, D, H, W, C)
        B, D, H, W, C = x.shape
        w = self.window_size
        shift = (w // 2,) * 3 if self.shifted else (0, 0, 0)
        window, shift = effective_window((D, H, W), (w, w, w), shift)
        pads = [(-n) % win for n, win in zip((D, H, W), window)]
        h = self.norm1(x)
        h = F.pad(h, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
        Dp, Hp, Wp = h.shape[1:4]
        mask = None
        if any(shift):
            h = torch.roll(h, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
            mask = shift_mask((Dp, Hp, Wp), window, shift, device=x.device).to(x.dtype)
        elif any(pads):
            # keep real tokens from attending to zero padding
            valid = torch.zeros((1, Dp, Hp, Wp, 1), dtype=x.dtype, device=x.device)
            valid[:, :D, :H, :W] = 1
            vw = window_partition(valid, window).squeeze(-1)
            mask = torch.where(vw[:, None, :] > 0, 0.0, MASK_VALUE).to(x.dtype)
        out = window_reverse(self.attn(window_partition(h, window), mask), window, B, Dp, Hp, Wp)
        if any(shift):
            out = torch.roll(out, shifts=shift, dims=(1, 2, 3))
        x = x + out[:, :D, :H, :W]
        return x + self.mlp(self.norm2(x))


class GlobalStage(nn.Module):
    """Optional patch merging, then one W-MSA block and one SW-MSA block."""

    def __init__(self, in_channels, out_channels, heads, window_size, merge):
        super().__init__()
        if out_channels % heads:
            raise ValueError(f"stage width {out_channels} not divisible by heads {heads}")
        self.merge = PatchMerging(in_channels, out_channels) if merge else None
        self.blocks = nn.ModuleList(
            [SwinBlock(out_channels, heads, window_size, shifted=s) for s in (False, True)]
        )

    def forward(self, x):
        # channels-first in/out
        x = x.permute(0, 2, 3, 4, 1)
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x.permute(0, 4, 1, 2, 3).contiguous()


# ---------------------------------------------------------------------------
# fusion branch


class AFF(nn.Module):
    """Adaptive feature fusion of gated local/global maps plus the previous fused map."""

    def __init__(self, channels, prev_channels=None):
        super().__init__()
        self.has_prev = prev_channels is not None
        self.agca_local = AGCA(channels)
        self.agca_global = AGCA(channels)
        n_in = 3 * channels if self.has_prev else 2 * channels
        if self.has_prev:
            self.prev_proj = nn.Conv3d(prev_channels, channels, 1)
        self.norm = ChannelLayerNorm(n_in)
        self.conv = nn.Conv3d(n_in, channels, 1)

    def pool_prev(self, f_prev):
        return F.avg_pool3d(self.prev_proj(f_prev), 2, ceil_mode=True)

    def forward(self, local, glob, f_prev=None):
        if local.shape != glob.shape:
            raise ValueError(f"branch shapes differ: {tuple(local.shape)} vs {tuple(glob.shape)}")
        if (f_prev is not None) != self.has_prev:
            raise ValueError("previous fused map must be given exactly for stages after the first")
        return self.fuse(local, glob, None if f_prev is None else self.pool_prev(f_prev))

    def fuse(self, local, glob, f_pooled=None):
        parts = [self.agca_local(local), self.agca_global(glob)]
        if f_pooled is None:
            return F.gelu(self.conv(self.norm(torch.cat(parts, dim=1))))
        if f_pooled.shape != local.shape:
            raise ValueError(
                f"pooled previous map {tuple(f_pooled.shape)} does not match {tuple(local.shape)}"
            )
        fused = self.conv(self.norm(torch.cat([f_pooled] + parts, dim=1)))
        return F.gelu(fused) + f_pooled


# ---------------------------------------------------------------------------


@dataclass
class StageFeatures:
    L: List[torch.Tensor]
    G: List[torch.Tensor]
    F: List[torch.Tensor]
    F_prev_pooled: List[torch.Tensor]

    def select(self, idx) -> "StageFeatures":
        """Batch-slice every map."""
        return StageFeatures(
            [t[idx] for t in self.L],
            [t[idx] for t in self.G],
            [t[idx] for t in self.F],
            [t[idx] for t in self.F_prev_pooled],
        )


class GLFE(nn.Module):
    def __init__(self, config: Optional[EncoderConfig] = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        ch = config.stage_channels
        self.patch_embed = PatchEmbed(config)
        self.local_stages = nn.ModuleList(
            [LocalStage(1, ch[0], config.patch_dhw(), first=True)]
            + [LocalStage(ch[i - 1], ch[i], 2) for i in range(1, 4)]
        )
        self.global_stages = nn.ModuleList(
            [
                GlobalStage(
                    ch[i - 1] if i else ch[0], ch[i], config.heads_per_stage[i],
                    config.window_size, merge=i > 0,
                )
                for i in range(4)
            ]
        )
        self.fusion = nn.ModuleList([AFF(ch[0])] + [AFF(ch[i], ch[i - 1]) for i in range(1, 4)])

    def forward(self, volume) -> StageFeatures:
        x_global = self.patch_embed(volume)
        x_local = _channels_first(volume)
        L, G, Fs, pooled = [], [], [], []
        f_prev = None
        for i in range(4):
            x_local = self.local_stages[i](x_local)
            x_global = self.global_stages[i](x_global)
            aff = self.fusion[i]
            f_pooled = None
            if f_prev is not None:
                f_pooled = aff.pool_prev(f_prev)
                pooled.append(f_pooled)
            f_prev = aff.fuse(x_local, x_global, f_pooled)
            L.append(x_local)
            G.append(x_global)
            Fs.append(f_prev)
        return StageFeatures(L, G, Fs, pooled)


def _channels_first(volume):
    if volume.dim() == 3:
        return volume[None, None]
    if volume.dim() == 4:
        return volume[:, None]
    return volume


def patch_embed(volume, config: EncoderConfig, module: Optional[PatchEmbed] = None):
    """Embed a volume into its token grid (B, C0, D/pd, H/ph, W/pw)."""
    module = module or PatchEmbed(config)
    return module(volume)


class ClinicalEncoder(nn.Module):
    """Two-layer perceptron from the clinical vector to a d-dim node."""

    def __init__(self, in_dim=6, hidden=64, out_dim=128):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, vector):
        if vector.shape[-1] != self.in_dim:
            raise ValueError(f"clinical vector length {vector.shape[-1]}, expected {self.in_dim}")
        return self.fc2(F.gelu(self.fc1(vector)))
