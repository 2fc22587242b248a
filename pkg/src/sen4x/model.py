"""Hybrid single-/multi-image super-resolution network.

Views are encoded by a shared 3x3 shallow extractor, fused pairwise in a
balanced binary tree, refined by residual Swin transformer blocks (RSTB)
and upsampled with cascaded x2 pixel-shuffle stages. Four wirings are
available through :attr:`ModelConfig.mode`:

``hybrid_early``  shallow -> fuse -> deep -> head
``hybrid_late``   per view (shallow -> deep) -> fuse -> head
``sisr_only``     best view only: shallow -> deep -> head
``misr_only``     shallow -> fuse -> small conv trunk -> head
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MODES = ("hybrid_early", "hybrid_late", "sisr_only", "misr_only")


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "hybrid_early"
    in_channels: int = 4
    n_views: int = 8
    embed_dim: int = 258
    n_rstb: int = 6
    heads: int = 6
    window: int = 8
    rstb_depth: int = 6
    mlp_ratio: float = 2.0
    scale: int = 4
    anchor: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.scale < 2 or self.scale & (self.scale - 1):
            raise ValueError("scale must be a power of two")
        if self.n_views < 1 or self.window < 1 or self.n_rstb < 0 or self.rstb_depth < 1:
            raise ValueError("n_views, window and rstb_depth must be positive")

    @property
    def views_used(self) -> int:
        return 1 if self.mode == "sisr_only" else self.n_views

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# building blocks


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """``out[c, y*s+dy, x*s+dx] = in[c*s*s + dy*s + dx, y, x]``."""
    b, c, h, w = x.shape
    if c % (s * s):
        raise ValueError(f"{c} channels not divisible by {s * s}")
    x = x.reshape(b, c // (s * s), s, s, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(b, c // (s * s), h * s, w * s)


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // s, s, w // s, s)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(b, c * s * s, h // s, w // s)


def conv3x3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


def _small_init_(conv: nn.Conv2d, gain: float = 0.1):
    # shrunk rather than zeroed so the branches upstream still get gradient
    nn.init.trunc_normal_(conv.weight, std=0.02 * gain)
    nn.init.zeros_(conv.bias)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with a GELU in between, plus identity skip."""

    def __init__(self, dim):
        super().__init__()
        self.conv1 = conv3x3(dim, dim)
        self.conv2 = conv3x3(dim, dim)
        nn.init.zeros_(self.conv1.bias)
        _small_init_(self.conv2)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class FusionBlock(nn.Module):
    """Merges two feature maps of identical shape into one."""

    def __init__(self, dim):
        super().__init__()
        self.update = ResBlock(dim)
        self.merge = conv3x3(2 * dim, dim)
        _small_init_(self.merge)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"cannot fuse shapes {tuple(a.shape)} and {tuple(b.shape)}")
        a = self.update(a)
        b = self.update(b)
        return 0.5 * (a + b) + self.merge(torch.cat([a, b], dim=1))


def fuse_recursive(features, fuse):
    """Reduce a best-first list of feature maps with a balanced pairwise tree.

    Levels merge neighbours (1,2), (3,4), ...; an odd level duplicates its
    last entry.
    """
    features = list(features)
    if not features:
        raise ValueError("need at least one feature map to fuse")
    while len(features) > 1:
        if len(features) % 2:
            features.append(features[-1])
        features = [fuse(features[i], features[i + 1]) for i in range(0, len(features), 2)]
    return features[0]


class RecursiveFusion(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.block = FusionBlock(dim)

    def forward(self, features):
        return fuse_recursive(features, self.block)


# --------------------------------------------------------------------------
# windowed attention


def window_partition(x, w):
    b, h, wd, c = x.shape
    x = x.view(b, h // w, w, wd // w, w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, w * w, c)


def window_reverse(windows, w, h, wd):
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // w) * (wd // w))
    x = windows.view(b, h // w, wd // w, w, w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, wd, c)


def relative_position_index(w):
    coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0) + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


def shifted_window_mask(h, wd, w, shift):
    """Boolean mask (nW x N x N), True where two tokens of a window come from different regions."""
    region = torch.zeros(1, h, wd, 1)
    cnt = 0
    for hs in (slice(0, -w), slice(-w, -shift), slice(-shift, None)):
        for ws in (slice(0, -w), slice(-w, -shift), slice(-shift, None)):
            region[:, hs, ws, :] = cnt
            cnt += 1
    ids = window_partition(region, w).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return diff != 0


class WindowAttention(nn.Module):
    """Multi-head self-attention inside w x w windows with a learned relative position bias."""

    def __init__(self, dim, window, heads):
        super().__init__()
        self.dim, self.window, self.heads = dim, window, heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        for lin in (self.qkv, self.proj):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def attention_weights(self, x, mask=None):
        """Softmax weights (B*nW, heads, N, N) and values for windowed tokens ``x``."""
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        logits = logits + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            logits = logits.view(bw // nw, nw, self.heads, n, n)
            logits = logits.masked_fill(mask[None, :, None], float("-inf"))
            logits = logits.view(bw, self.heads, n, n)
        return logits.softmax(dim=-1), v

    def forward(self, x, mask=None):
        attn, v = self.attention_weights(x, mask)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out)


class SwinLayer(nn.Module):
    def __init__(self, dim, window, heads, mlp_ratio, shift):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        for lin in (self.fc1, self.fc2):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)
        self._mask_cache = {}

    def _mask(self, h, w, device):
        key = (h, w, device)
        if key not in self._mask_cache:
            self._mask_cache[key] = shifted_window_mask(h, w, self.window, self.shift).to(device)
        return self._mask_cache[key]

    def forward(self, x):
        # x: B x H x W x C
        b, h, w, c = x.shape
        # a single window has nothing to shift across
        shift = self.shift if min(h, w) > self.window else 0
        shortcut = x
        y = self.norm1(x)
        mask = None
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            mask = self._mask(h, w, x.device)
        y = window_partition(y, self.window)
        y = self.attn(y, mask)
        y = window_reverse(y, self.window, h, w)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = shortcut + y
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class RSTB(nn.Module):
    """Residual Swin transformer block: ``depth`` layers, a 3x3 conv, block skip."""

    def __init__(self, dim, window, heads, depth, mlp_ratio):
        super().__init__()
        shift = window // 2 if window > 1 else 0
        self.layers = nn.ModuleList(
            SwinLayer(dim, window, heads, mlp_ratio, shift if i % 2 else 0) for i in range(depth)
        )
        self.conv = conv3x3(dim, dim)
        _small_init_(self.conv, gain=1.0)

    def forward(self, x):
        # x: B x C x H x W
        y = x.permute(0, 2, 3, 1)
        for layer in self.layers:
            y = layer(y)
        return x + self.conv(y.permute(0, 3, 1, 2))


class DeepExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.window = cfg.window
        self.blocks = nn.ModuleList(
            RSTB(d, cfg.window, cfg.heads, cfg.rstb_depth, cfg.mlp_ratio) for _ in range(cfg.n_rstb)
        )
        self.norm = nn.LayerNorm(d)
        self.conv = conv3x3(d, d)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.window or w % self.window:
            raise ValueError(f"feature map {h}x{w} not divisible by window {self.window}")
        y = x
        for blk in self.blocks:
            y = blk(y)
        y = self.norm(y.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return x + self.conv(y)


class ConvTrunk(nn.Module):
    """Low-capacity replacement for the deep extractor (MISR-only ablation)."""

    def __init__(self, dim, n_blocks=2):
        super().__init__()
        self.blocks = nn.Sequential(*[ResBlock(dim) for _ in range(n_blocks)])

    def forward(self, x):
        return self.blocks(x)


class UpsampleHead(nn.Module):
    """log2(scale) stages of conv(C -> 4C) + x2 pixel shuffle, then conv to output bands."""

    def __init__(self, dim, out_channels, scale):
        super().__init__()
        self.stages = nn.ModuleList(conv3x3(dim, 4 * dim) for _ in range(int(math.log2(scale))))
        self.last = conv3x3(dim, out_channels)
        # start from the anchor: the network's initial residual is ~0
        _small_init_(self.last, gain=0.05)

    def forward(self, x):
        for conv in self.stages:
            x = pixel_shuffle(conv(x), 2)
        return self.last(x)


# --------------------------------------------------------------------------
# full network


class Sen4xNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.shallow = conv3x3(cfg.in_channels, d)
        if cfg.mode != "sisr_only":
            self.fusion = RecursiveFusion(d)
        if cfg.mode == "misr_only":
            self.trunk = ConvTrunk(d)
        else:
            self.deep = DeepExtractor(cfg)
        self.head = UpsampleHead(d, cfg.in_channels, cfg.scale)

    def shallow_extract(self, view):
        return self.shallow(view)

    def forward(self, stack):
        """``stack``: B x N x C x H x W, views ordered best first."""
        cfg = self.cfg
        if stack.ndim != 5:
            raise ValueError("expected a B x N x C x H x W batch")
        b, n, c, h, w = stack.shape
        if c != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} channels, got {c}")
        if cfg.mode == "sisr_only":
            if n < 1:
                raise ValueError("sisr_only needs at least one view")
        elif n != cfg.n_views:
            raise ValueError(f"model expects {cfg.n_views} views, got {n}")

        if cfg.mode == "sisr_only":
            out = self.head(self.deep(self.shallow(stack[:, 0])))
        else:
            feats = self.shallow(stack.reshape(b * n, c, h, w))
            if cfg.mode == "hybrid_late":
                feats = self.deep(feats)
            feats = feats.reshape(b, n, -1, h, w)
            fused = self.fusion([feats[:, i] for i in range(n)])
            if cfg.mode == "hybrid_early":
                fused = self.deep(fused)
            elif cfg.mode == "misr_only":
                fused = self.trunk(fused)
            out = self.head(fused)
        if cfg.anchor:
            out = out + F.interpolate(stack[:, 0], scale_factor=cfg.scale, mode="bilinear", align_corners=False)
        return out


def build_network(cfg: ModelConfig, seed: int = 0) -> Sen4xNet:
    """Instantiate with a seed-determined initialisation."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = Sen4xNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


# --------------------------------------------------------------------------
# weight surgery and bookkeeping


def expand_input_channels(weight):
    """Append a 4th input slice equal to the mean of three RGB slices.

    ``weight`` is ``C_out x 3 x k x k`` (torch tensor or numpy array).
    """
    if weight.shape[1] != 3:
        raise ValueError(f"expected 3 input channels, got {weight.shape[1]}")
    if isinstance(weight, torch.Tensor):
        return torch.cat([weight, weight.mean(dim=1, keepdim=True)], dim=1)
    weight = np.asarray(weight)
    return np.concatenate([weight, weight.mean(axis=1, keepdims=True)], axis=1)


def count_parameters(model_or_cfg) -> dict:
    """Trainable scalar counts, total and split by component."""
    net = model_or_cfg if isinstance(model_or_cfg, nn.Module) else Sen4xNet(model_or_cfg)
    split = {}
    for name, p in net.named_parameters():
        if not p.requires_grad:
            continue
        top = name.split(".")[0]
        split[top] = split.get(top, 0) + p.numel()
    out = {
        "total": sum(split.values()),
        "sisr_backbone": split.get("shallow", 0) + split.get("deep", 0) + split.get("head", 0),
        "fusion": split.get("fusion", 0),
        "trunk": split.get("trunk", 0),
        "components": dict(sorted(split.items())),
    }
    return out
