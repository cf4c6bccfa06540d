"""Trainable noise estimator: text/rate/timestep conditioning plus U-Net."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .cond import (
    MAX_TOKENS,
    Condition,
    CondBatch,
    TextEncoder,
    TimestepEmbedding,
    assemble_condition,
    collate_conditions,
    tokenize,
)
from .unet import UNet, UNetConfig


@dataclass
class LdmConfig:
    rates: tuple[int, ...] = (16000, 24000, 32000, 48000)
    cond_width: int = 64
    vocab_size: int = 4096
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    in_channels: int = 4
    widths: tuple[int, int, int, int] = (32, 64, 64, 128)
    attn_heads: tuple[int, int, int, int] = (1, 2, 2, 4)
    time_dim: int = 128

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            in_channels=self.in_channels,
            widths=tuple(self.widths),
            attn_heads=tuple(self.attn_heads),
            cond_width=self.cond_width,
            time_dim=self.time_dim,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("rates", "widths", "attn_heads"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LdmConfig":
        d = dict(d)
        for key in ("rates", "widths", "attn_heads"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class LdmModel(nn.Module):
    """Noise prediction conditioned on text, sampling rate, and timestep."""

    def __init__(self, config: LdmConfig):
        super().__init__()
        self.config = config
        self.rates = tuple(config.rates)
        self.text_encoder = TextEncoder(config.vocab_size, config.cond_width)
        self.rate_embed = nn.Embedding(len(self.rates), config.cond_width)
        self.time_embed = TimestepEmbedding(
            config.cond_width, config.time_dim, config.num_train_steps
        )
        self.unet = UNet(config.unet_config())

    def rate_id(self, rate_hz: int) -> int:
        try:
            return self.rates.index(rate_hz)
        except ValueError:
            raise ValueError(
                f"rate {rate_hz} Hz not in model's rate set {list(self.rates)}"
            ) from None

    def embed_rate(self, rate_hz: int) -> torch.Tensor:
        idx = torch.tensor(self.rate_id(rate_hz))
        return self.rate_embed(idx)

    def build_condition(self, prompt: str, rate_hz: int, null: bool = False) -> Condition:
        text = " " if null else prompt
        emb = self.text_encoder.encode_prompt(text)
        return assemble_condition(emb, self.embed_rate(rate_hz), is_null=null)

    def condition_batch(self, token_ids: torch.Tensor, token_mask: torch.Tensor,
                        rate_ids: torch.Tensor) -> CondBatch:
        """Batched condition from padded token ids.

        token_ids: (B, L) int64, right-padded; token_mask: (B, L) bool;
        rate_ids: (B,) int64. Returns sequences of length L+1 with the rate
        row appended after each prompt's final real token.
        """
        b, l = token_ids.shape
        text = self.text_encoder(token_ids)  # (B, L, d)
        rate_rows = self.rate_embed(rate_ids)  # (B, d)
        seq = torch.zeros(b, l + 1, text.shape[-1], dtype=text.dtype)
        mask = torch.zeros(b, l + 1, dtype=torch.bool)
        lengths = token_mask.sum(dim=1)
        seq[:, :l][token_mask] = text[token_mask]
        seq[torch.arange(b), lengths] = rate_rows
        mask[:, :l] = token_mask
        mask[torch.arange(b), lengths] = True
        return CondBatch(seq, mask)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: CondBatch) -> torch.Tensor:
        t_emb = self.time_embed(t)
        if t_emb.ndim == 1:
            t_emb = t_emb.unsqueeze(0).expand(z_t.shape[0], -1)
        return self.unet(z_t, t_emb, cond)

    def denoise_single(self, z_t: torch.Tensor, t: torch.Tensor, cond: Condition) -> torch.Tensor:
        """Single-condition adapter for the sampler: broadcasts one Condition."""
        batch = collate_conditions([cond] * z_t.shape[0])
        return self.forward(z_t, t, batch)


def pad_tokens(prompts: list[str], vocab_size: int, max_tokens: int = MAX_TOKENS):
    """Tokenize and right-pad a list of prompts; returns (ids, mask)."""
    token_lists = [tokenize(p, vocab_size, max_tokens) for p in prompts]
    l_max = max(len(ids) for ids in token_lists)
    ids = torch.zeros(len(prompts), l_max, dtype=torch.int64)
    mask = torch.zeros(len(prompts), l_max, dtype=torch.bool)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = torch.tensor(toks)
        mask[i, : len(toks)] = True
    return ids, mask
