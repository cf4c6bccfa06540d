"""Condition assembly: text embedding, rate embedding, timestep embedding.

The guidance sequence is the text embedding rows with one sampling-rate
embedding row appended. The null variant keeps the same rate row but
replaces the text with the single null token (the empty prompt).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import torch
from torch import nn

NULL_TOKEN_ID = 0
DEFAULT_VOCAB = 4096
DEFAULT_WIDTH = 64
MAX_TOKENS = 16


def tokenize(prompt: str, vocab_size: int = DEFAULT_VOCAB, max_tokens: int = MAX_TOKENS) -> list[int]:
    """Lowercase whitespace tokens hashed into [1, vocab); empty -> [NULL]."""
    words = prompt.lower().split()
    if not words:
        return [NULL_TOKEN_ID]
    ids = [1 + zlib.crc32(word.encode("utf-8")) % (vocab_size - 1) for word in words]
    return ids[:max_tokens]


class TextEncoder(nn.Module):
    """Hash-bucket token embeddings with learned positions."""

    def __init__(self, vocab_size: int = DEFAULT_VOCAB, width: int = DEFAULT_WIDTH,
                 max_tokens: int = MAX_TOKENS):
        super().__init__()
        self.vocab_size = vocab_size
        self.width = width
        self.max_tokens = max_tokens
        self.token_embed = nn.Embedding(vocab_size, width)
        self.pos_embed = nn.Parameter(torch.zeros(max_tokens, width))

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(..., L) int64 token ids -> (..., L, width) embeddings."""
        if token_ids.shape[-1] > self.max_tokens:
            raise ValueError(f"at most {self.max_tokens} tokens, got {token_ids.shape[-1]}")
        emb = self.token_embed(token_ids)
        return emb + self.pos_embed[: token_ids.shape[-1]]

    def encode_prompt(self, prompt: str) -> torch.Tensor:
        """Prompt string -> (L, width) embedding matrix."""
        ids = torch.tensor(tokenize(prompt, self.vocab_size, self.max_tokens))
        return self.forward(ids)


@dataclass
class Condition:
    """Guidance sequence: text rows then one rate row; (L+1, width)."""

    sequence: torch.Tensor
    is_null: bool = False

    def __post_init__(self):
        if self.sequence.ndim != 2 or self.sequence.shape[0] < 2:
            raise ValueError("condition needs at least one text row plus the rate row")

    @property
    def text_rows(self) -> torch.Tensor:
        return self.sequence[:-1]

    @property
    def rate_row(self) -> torch.Tensor:
        return self.sequence[-1]


def assemble_condition(text_emb: torch.Tensor, rate_emb: torch.Tensor,
                       is_null: bool = False) -> Condition:
    if text_emb.ndim != 2:
        raise ValueError("text embedding must be (L, width)")
    if rate_emb.shape != (text_emb.shape[1],):
        raise ValueError(
            f"width mismatch: text width {text_emb.shape[1]}, rate width {tuple(rate_emb.shape)}"
        )
    return Condition(torch.cat([text_emb, rate_emb.unsqueeze(0)], dim=0), is_null)


@dataclass
class CondBatch:
    """Right-padded condition sequences with a key validity mask."""

    sequence: torch.Tensor  # (B, L_max, width)
    mask: torch.Tensor      # (B, L_max) bool, True on real rows

    def __len__(self) -> int:
        return self.sequence.shape[0]


def collate_conditions(conditions: list[Condition]) -> CondBatch:
    widths = {c.sequence.shape[1] for c in conditions}
    if len(widths) != 1:
        raise ValueError(f"mixed condition widths: {sorted(widths)}")
    width = widths.pop()
    lengths = [c.sequence.shape[0] for c in conditions]
    l_max = max(lengths)
    seq = torch.zeros(len(conditions), l_max, width, dtype=conditions[0].sequence.dtype)
    mask = torch.zeros(len(conditions), l_max, dtype=torch.bool)
    for i, c in enumerate(conditions):
        seq[i, : lengths[i]] = c.sequence
        mask[i, : lengths[i]] = True
    return CondBatch(seq, mask)


def sinusoidal_timestep(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer sinusoid, [sin half | cos half] layout; dim must be even."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.get_default_dtype())
    scalar = t.ndim == 0
    if scalar:
        t = t.unsqueeze(0)
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half
    )
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.squeeze(0) if scalar else emb


class TimestepEmbedding(nn.Module):
    """Sinusoid followed by a learned two-layer projection."""

    def __init__(self, dim: int, out_dim: int, max_t: int):
        super().__init__()
        self.dim = dim
        self.max_t = max_t
        self.proj = nn.Sequential(
            nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > self.max_t):
            raise ValueError(f"timestep out of range [1, {self.max_t}]: {t}")
        weight_dtype = self.proj[0].weight.dtype
        return self.proj(sinusoidal_timestep(t, self.dim).to(weight_dtype))
