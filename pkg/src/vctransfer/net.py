"""Miniature dual-to-single-stream denoising transformer.

Three token stacks share one timestep embedding:

* foreground stack: clean foreground tokens, text token prepended, no noise;
* background stack: noisy tokens channel-concatenated with background tokens,
  text token prepended; after block ``i`` the foreground stack's block ``i``
  output enters through a zero-initialised projection;
* fusion stack: consumes the background stack; before every fusion block the
  flow tokens pass an adaptive norm and a zero-initialised projection and are
  added to the video tokens.

Images live in pixel space; an invertible patchify stands in for a VAE.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidRangeError, ShapeMismatchError


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 288
    heads: int = 4
    depth: int = 2
    mlp_ratio: float = 2.0
    freq_dim: int = 64
    text_buckets: int = 4096
    flow_scale: float = 4.0
    dual_stream: bool = True
    early_motion: bool = False

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise InvalidRangeError(f"frame {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise InvalidRangeError("dim must be divisible by heads")
        if self.dim % 2 or self.dim < 12:
            raise InvalidRangeError("dim must be even and >= 12")
        flow_strides(self.patch)

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.frames, self.height // self.patch, self.width // self.patch

    @property
    def num_tokens(self) -> int:
        f, gh, gw = self.grid
        return f * gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def flow_strides(patch: int) -> list[int]:
    """Four stage strides (each 1 or 2) whose product is ``patch``."""
    n = int(round(math.log2(patch))) if patch > 0 else -1
    if n < 0 or 2 ** n != patch or n > 4:
        raise InvalidRangeError(f"patch must be a power of two <= 16, got {patch}")
    return [2] * n + [1] * (4 - n)


# --- patchify -------------------------------------------------------------

def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, f, H, W, C)`` -> ``(B, f*(H/p)*(W/p), p*p*C)``; token order is frame, row, column."""
    B, f, H, W, C = x.shape
    if H % patch or W % patch:
        raise InvalidRangeError(f"{H}x{W} not divisible by patch {patch}")
    x = x.reshape(B, f, H // patch, patch, W // patch, patch, C)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, f * (H // patch) * (W // patch), patch * patch * C)


def unpatchify(tokens: torch.Tensor, frames: int, height: int, width: int, patch: int) -> torch.Tensor:
    B, N, D = tokens.shape
    gh, gw = height // patch, width // patch
    C = D // (patch * patch)
    if N != frames * gh * gw or D != patch * patch * C:
        raise ShapeMismatchError(f"cannot unpatchify {tuple(tokens.shape)} to {frames}x{height}x{width}")
    x = tokens.reshape(B, frames, gh, gw, patch, patch, C).permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, frames, height, width, C)


class PatchEmbed(nn.Module):
    def __init__(self, in_dim: int, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(in_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(x, self.patch))


def _sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    out = pos.reshape(-1)[:, None] * omega[None]
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def pos_embed_3d(dim: int, frames: int, gh: int, gw: int) -> np.ndarray:
    dt = 2 * ((dim // 4) // 2)
    dy = 2 * (((dim - dt) // 2) // 2)
    dx = dim - dt - dy
    f, y, x = np.meshgrid(np.arange(frames), np.arange(gh), np.arange(gw), indexing="ij")
    return np.concatenate([_sincos(f, dt), _sincos(y, dy), _sincos(x, dx)], axis=1)


# --- text -----------------------------------------------------------------

@lru_cache(maxsize=65536)
def token_buckets(token: str, buckets: int) -> tuple[int, int]:
    """Two stable hash buckets in ``1..buckets`` (row 0 is the null embedding)."""
    v = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return 1 + (v & 0xFFFFFFFF) % buckets, 1 + (v >> 32) % buckets


class TextEmbedder(nn.Module):
    """Whitespace tokens hashed into a learned table and mean-pooled; "" maps to the null row."""

    def __init__(self, buckets: int, dim: int):
        super().__init__()
        self.buckets = buckets
        self.table = nn.Embedding(buckets + 1, dim)

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        rows = []
        for p in prompts:
            toks = p.split()
            if not toks:
                rows.append(self.table.weight[0])
                continue
            ids = torch.tensor([i for tok in toks for i in token_buckets(tok, self.buckets)])
            rows.append(self.table(ids).mean(dim=0))
        return torch.stack(rows)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
        args = t.to(torch.float64)[:, None] * freqs[None]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


# --- blocks ---------------------------------------------------------------

def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (D // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class DiTBlock(nn.Module):
    """Attention + MLP with timestep-driven adaptive layer norm (identity modulation at init)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + (1 + g1.unsqueeze(1)) * self.attn(modulate(self.norm1(x), sh1, sc1))
        x = x + (1 + g2.unsqueeze(1)) * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


class FlowEncoder(nn.Module):
    """Four conv stages downsampling flow to the token grid."""

    def __init__(self, dim: int, patch: int, scale: float):
        super().__init__()
        self.scale = scale
        chans = [2, max(8, dim // 4), max(8, dim // 2), dim, dim]
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=s, padding=1) for i, s in enumerate(flow_strides(patch))
        )

    def forward(self, flow: torch.Tensor) -> torch.Tensor:
        """``(B, f-1, H, W, 2)`` px/frame -> ``(B, f*gh*gw, dim)`` tokens."""
        flow = torch.cat([flow, flow[:, -1:]], dim=1)
        B, f, H, W, _ = flow.shape
        x = (flow / self.scale).reshape(B * f, H, W, 2).permute(0, 3, 1, 2)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                x = F.silu(x)
        _, D, gh, gw = x.shape
        return x.reshape(B, f, D, gh, gw).permute(0, 1, 3, 4, 2).reshape(B, f * gh * gw, D)


class FlowInjector(nn.Module):
    """Adaptive norm on flow tokens followed by a zero-initialised output projection."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.out = nn.Linear(dim, dim)

    def forward(self, z_o, c):
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.out(modulate(self.norm(z_o), shift, scale))


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_dim)

    def forward(self, x, c):
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


# --- model ----------------------------------------------------------------

class DecomposedDiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, N = cfg.dim, cfg.depth
        in_bg = cfg.patch_dim * (2 if cfg.dual_stream else 3)
        self.bg_embed = PatchEmbed(in_bg, D, cfg.patch)
        self.text = TextEmbedder(cfg.text_buckets, D)
        self.time = TimestepEmbedder(D, cfg.freq_dim)
        self.bg_blocks = nn.ModuleList(DiTBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(N))
        self.fusion_blocks = nn.ModuleList(DiTBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(N))
        if cfg.dual_stream:
            self.fg_embed = PatchEmbed(cfg.patch_dim, D, cfg.patch)
            self.fg_blocks = nn.ModuleList(DiTBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(N))
            self.zconv = nn.ModuleList(nn.Linear(D, D) for _ in range(N))
        self.flow_encoder = FlowEncoder(D, cfg.patch, cfg.flow_scale)
        self.flow_inject = nn.ModuleList(FlowInjector(D) for _ in range(1 if cfg.early_motion else N))
        self.final = FinalLayer(D, cfg.patch_dim)
        f, gh, gw = cfg.grid
        self.register_buffer("pos", torch.from_numpy(pos_embed_3d(D, f, gh, gw)).float()[None], persistent=False)

    # parameter groups, keyed by the first one or two name components
    def param_groups(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, p in self.named_parameters():
            parts = name.split(".")
            key = ".".join(parts[:2]) if parts[0] in ("bg_blocks", "fg_blocks", "fusion_blocks", "zconv",
                                                     "flow_inject") else parts[0]
            if parts[0] == "flow_encoder":
                key = ".".join(parts[:3])
            groups[key] = groups.get(key, 0) + p.numel()
        return groups

    def embed_text(self, prompts: Sequence[str]) -> torch.Tensor:
        return self.text(list(prompts))

    def forward(self, z_t, t, text_emb, foreground, background, flow):
        """Predict the noise in ``z_t``.

        ``z_t``: ``(B, f, H, W, C)``; ``t``: ``(B,)``; ``text_emb``: ``(B, dim)``;
        ``foreground``/``background``: ``(B, H, W, C)``; ``flow``: ``(B, f-1, H, W, 2)``.
        """
        cfg = self.cfg
        B, f, H, W, C = z_t.shape
        if (f, H, W, C) != (cfg.frames, cfg.height, cfg.width, cfg.channels):
            raise ShapeMismatchError(f"z_t {tuple(z_t.shape)} does not match model config")
        for name, x in (("foreground", foreground), ("background", background)):
            if tuple(x.shape) != (B, H, W, C):
                raise ShapeMismatchError(f"{name} {tuple(x.shape)}, expected {(B, H, W, C)}")
        if tuple(flow.shape) != (B, f - 1, H, W, 2):
            raise ShapeMismatchError(f"flow {tuple(flow.shape)}, expected {(B, f - 1, H, W, 2)}")
        if tuple(text_emb.shape) != (B, cfg.dim):
            raise ShapeMismatchError(f"text_emb {tuple(text_emb.shape)}, expected {(B, cfg.dim)}")

        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        c = self.time(t)
        txt = text_emb[:, None]
        fg_vid = foreground[:, None].expand(B, f, H, W, C)
        bg_vid = background[:, None].expand(B, f, H, W, C)

        parts = [z_t, bg_vid] if cfg.dual_stream else [z_t, bg_vid, fg_vid]
        hb = torch.cat([txt, self.bg_embed(torch.cat(parts, dim=-1)) + self.pos], dim=1)
        z_o = self.flow_encoder(flow)
        if cfg.early_motion:
            hb = hb + F.pad(self.flow_inject[0](z_o, c), (0, 0, 1, 0))
        if cfg.dual_stream:
            hf = torch.cat([txt, self.fg_embed(fg_vid) + self.pos], dim=1)
            for blk_b, blk_f, zc in zip(self.bg_blocks, self.fg_blocks, self.zconv):
                hf = blk_f(hf, c)
                hb = blk_b(hb, c) + zc(hf)
        else:
            for blk_b in self.bg_blocks:
                hb = blk_b(hb, c)
        h = hb
        for i, blk in enumerate(self.fusion_blocks):
            if not cfg.early_motion:
                h = h + F.pad(self.flow_inject[i](z_o, c), (0, 0, 1, 0))
            h = blk(h, c)
        out = self.final(h[:, 1:], c)
        return unpatchify(out, f, H, W, cfg.patch)


def _init_weights(model: DecomposedDiT) -> None:
    for m in model.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
            nn.init.zeros_(m.bias)
    nn.init.normal_(model.text.table.weight, std=0.5)
    for mlp in (model.time.mlp[0], model.time.mlp[2]):
        nn.init.normal_(mlp.weight, std=0.02)
    blocks = list(model.bg_blocks) + list(model.fusion_blocks) + list(getattr(model, "fg_blocks", []))
    for blk in blocks:
        nn.init.zeros_(blk.ada[-1].weight)
        nn.init.zeros_(blk.ada[-1].bias)
    for inj in model.flow_inject:
        for lin in (inj.ada[-1], inj.out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
    for zc in getattr(model, "zconv", []):
        nn.init.zeros_(zc.weight)
        nn.init.zeros_(zc.bias)
    nn.init.zeros_(model.final.ada[-1].weight)
    nn.init.zeros_(model.final.ada[-1].bias)
    nn.init.normal_(model.final.linear.weight, std=0.02)


def init_params(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> DecomposedDiT:
    """Build a model; same ``(cfg, seed)`` gives bitwise-identical parameters."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DecomposedDiT(cfg)
        _init_weights(model)
    return model.to(dtype)


def zero_init_names(model: DecomposedDiT) -> list[str]:
    """Parameters that must be exactly zero at initialisation."""
    names = []
    for name, _ in model.named_parameters():
        if name.startswith("zconv.") or (name.startswith("flow_inject.") and (".out." in name or ".ada." in name)):
            names.append(name)
    return names
