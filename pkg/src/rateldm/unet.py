"""Noise-estimation U-Net with cross-attention conditioning.

Four encoder blocks, a middle block, four decoder blocks; decoder channel
widths mirror the encoder in reverse. Cross-attention (queries from latent
positions, keys/values from the condition sequence) sits in the last three
encoder blocks, the middle block, and the first three decoder blocks. The
timestep embedding enters additively inside every residual block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .cond import CondBatch


@dataclass
class UNetConfig:
    in_channels: int = 4
    widths: tuple[int, int, int, int] = (32, 64, 64, 128)
    attn_heads: tuple[int, int, int, int] = (1, 2, 2, 4)
    cond_width: int = 64
    time_dim: int = 128
    groups: int = 8

    def __post_init__(self):
        if len(self.widths) == 0 or len(self.widths) != len(self.attn_heads):
            raise ValueError("widths and attn_heads must be non-empty and equal length")
        for w, h in zip(self.widths, self.attn_heads):
            if w % h != 0:
                raise ValueError(f"width {w} not divisible by {h} heads")
            if w % self.groups != 0:
                raise ValueError(f"width {w} not divisible by {self.groups} norm groups")

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(reversed(self.widths))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Queries from flattened feature positions, keys/values from the condition."""

    def __init__(self, channels: int, cond_width: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_width, channels, bias=False)
        self.to_v = nn.Linear(cond_width, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, cond: CondBatch) -> torch.Tensor:
        b, c, t, f = x.shape
        head_dim = c // self.heads
        hx = self.norm(x).reshape(b, c, t * f).transpose(1, 2)  # (B, N, C)
        q = self.to_q(hx).view(b, -1, self.heads, head_dim).transpose(1, 2)
        k = self.to_k(cond.sequence).view(b, -1, self.heads, head_dim).transpose(1, 2)
        v = self.to_v(cond.sequence).view(b, -1, self.heads, head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)  # (B, H, N, L)
        scores = scores.masked_fill(~cond.mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t * f, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, t, f)
        return x + out


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        cw, tw, gr = config.cond_width, config.time_dim, config.groups
        widths = config.widths
        n = len(widths)

        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = widths[0]
        for i, w in enumerate(widths):
            self.enc_blocks.append(ResBlock(ch, w, tw, gr))
            # cross-attention in all but the first encoder block
            self.enc_attn.append(
                CrossAttention(w, cw, config.attn_heads[i], gr) if i >= 1 else None
            )
            self.downs.append(
                nn.Conv2d(w, w, 3, stride=2, padding=1) if i < n - 1 else None
            )
            ch = w

        self.mid_block1 = ResBlock(ch, ch, tw, gr)
        self.mid_attn = CrossAttention(ch, cw, config.attn_heads[-1], gr)
        self.mid_block2 = ResBlock(ch, ch, tw, gr)

        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        dec_widths = config.decoder_widths
        dec_heads = tuple(reversed(config.attn_heads))
        for i, w in enumerate(dec_widths):
            skip_ch = dec_widths[i]
            self.dec_blocks.append(ResBlock(ch + skip_ch, w, tw, gr))
            # cross-attention in all but the last decoder block
            self.dec_attn.append(
                CrossAttention(w, cw, dec_heads[i], gr) if i < n - 1 else None
            )
            ch = w

        self.head_norm = nn.GroupNorm(gr, ch)
        self.head = nn.Conv2d(ch, config.in_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t_emb: torch.Tensor, cond: CondBatch) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, T, F) input, got {tuple(z.shape)}"
            )
        t_in, f_in = z.shape[2], z.shape[3]
        pad_t = (-t_in) % 4
        pad_f = (-f_in) % 4
        x = F.pad(z, (0, pad_f, 0, pad_t), mode="replicate") if pad_t or pad_f else z

        h = self.stem(x)
        skips = []
        for i in range(len(self.enc_blocks)):
            h = self.enc_blocks[i](h, t_emb)
            if self.enc_attn[i] is not None:
                h = self.enc_attn[i](h, cond)
            skips.append(h)
            if self.downs[i] is not None:
                h = self.downs[i](h)

        h = self.mid_block1(h, t_emb)
        h = self.mid_attn(h, cond)
        h = self.mid_block2(h, t_emb)

        for i in range(len(self.dec_blocks)):
            skip = skips[-(i + 1)]
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = self.dec_blocks[i](torch.cat([h, skip], dim=1), t_emb)
            if self.dec_attn[i] is not None:
                h = self.dec_attn[i](h, cond)

        out = self.head(F.silu(self.head_norm(h)))
        return out[:, :, :t_in, :f_in]


def count_params(config: UNetConfig) -> int:
    """Exact trainable parameter count for a config."""
    model = UNet(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def grad_check(model: nn.Module, loss_fn, n_probe: int = 32, h: float = 1e-5,
               seed: int = 0) -> tuple[float, list[dict]]:
    """Central finite differences vs autograd on a random parameter slice.

    Runs in the model's current dtype (use .double() for tight tolerances).
    Returns (max relative error over probes, per-probe report). Probes whose
    analytic gradient is exactly zero while the numeric one is not are
    flagged and excluded from the max.
    """
    params = [(name, p) for name, p in model.named_parameters()]
    sizes = [p.numel() for _, p in params]
    total = sum(sizes)
    if total == 0:
        raise ValueError("model has no parameters")
    rng = torch.Generator().manual_seed(seed)
    flat_idx = torch.randperm(total, generator=rng)[: min(n_probe, total)].tolist()

    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    if any(p.grad is not None and not torch.all(torch.isfinite(p.grad)) for _, p in params):
        raise FloatingPointError("non-finite analytic gradient")

    report = []
    max_rel = 0.0
    bounds = torch.cumsum(torch.tensor([0] + sizes), dim=0).tolist()
    for fi in flat_idx:
        pi = next(j for j in range(len(params)) if bounds[j] <= fi < bounds[j + 1])
        name, p = params[pi]
        local = fi - bounds[pi]
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[local])

        with torch.no_grad():
            orig = float(p.reshape(-1)[local])
            p.reshape(-1)[local] = orig + h
            f_plus = float(loss_fn())
            p.reshape(-1)[local] = orig - h
            f_minus = float(loss_fn())
            p.reshape(-1)[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)

        flagged = (p.grad is None or analytic == 0.0) and abs(numeric) > 1e-7
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        if not flagged:
            max_rel = max(max_rel, rel)
        report.append(
            {"param": name, "index": local, "analytic": analytic,
             "numeric": numeric, "rel_err": rel, "zero_grad_flag": flagged}
        )
    return max_rel, report
