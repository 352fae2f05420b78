"""Encoder-decoder transformer with order position embeddings.

Both model variants share one architecture:

* REAP: the encoder output is shifted by sinusoidal embeddings of the
  desired output position of every source token, ``E = E_M + PE_r``.
* SOW: POS/constituent-label embeddings are added at the input layer, and
  the MONOTONE/FLIP preference is encoded as order positions (1 and 2 on
  the two non-terminals, 0 elsewhere) added to the encoder output in the
  same way.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .bpe import BpeVocab
from .sow import OrderPreference

CHECKPOINT_FORMAT = "sowreap-checkpoint"
CHECKPOINT_VERSION = 1


class Variant(str, enum.Enum):
    REAP = "REAP"
    SOW = "SOW"


@dataclass
class ModelConfig:
    vocab_size: int = 0
    hidden_size: int = 256
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 8
    dropout: float = 0.1
    max_positions: int = 128
    variant: str = Variant.REAP.value
    ff_size: int | None = None

    def __post_init__(self):
        if self.hidden_size % self.heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if self.hidden_size % 2:
            raise ValueError("hidden_size must be even for sinusoidal embeddings")
        self.variant = Variant(self.variant).value

    @property
    def ff(self) -> int:
        return self.ff_size or 4 * self.hidden_size


def sinusoidal_embedding(position: int, dim: int) -> np.ndarray:
    """``[sin(p / 10000^(2i/d)), cos(p / 10000^(2i/d))]`` interleaved, float64."""
    if dim % 2:
        raise ValueError(f"dim must be even, got {dim}")
    if position < 0:
        raise ValueError("position must be non-negative")
    i = np.arange(dim // 2, dtype=np.float64)
    angle = position / np.power(10000.0, 2 * i / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    return np.stack([sinusoidal_embedding(p, dim) for p in range(n)])


def order_preference_positions(nt_positions: tuple[int, int], length: int,
                               o: OrderPreference) -> list[int]:
    """Zeros except (1, 2) on the two non-terminals for MONOTONE, (2, 1) for FLIP."""
    if len(set(nt_positions)) != 2 or not all(1 <= p <= length for p in nt_positions):
        raise ValueError(f"need exactly two distinct non-terminal positions, got {nt_positions}")
    first, second = sorted(nt_positions)
    out = [0] * length
    vals = (1, 2) if o is OrderPreference.MONOTONE else (2, 1)
    out[first - 1], out[second - 1] = vals
    return out


def subword_order_positions(word_positions: Sequence[int], owner: Sequence[int]) -> list[int]:
    """Expand per-word target positions (a permutation) to per-piece positions.

    Pieces of the word placed k-th receive consecutive positions after the
    pieces of the words placed before it, so the result is again a
    permutation of ``1..len(owner)``.
    """
    counts = [0] * len(word_positions)
    for w in owner:
        counts[w] += 1
    by_target = sorted(range(len(word_positions)), key=lambda w: word_positions[w])
    start = {}
    nxt = 1
    for w in by_target:
        start[w] = nxt
        nxt += counts[w]
    seen = [0] * len(word_positions)
    out = []
    for w in owner:
        out.append(start[w] + seen[w])
        seen[w] += 1
    return out


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.h = heads
        self.dk = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, key_pad=None, causal=False):
        b, t, d = x.shape
        s = mem.shape[1]
        q = self.q(x).view(b, t, self.h, self.dk).transpose(1, 2)
        k = self.k(mem).view(b, s, self.h, self.dk).transpose(1, 2)
        v = self.v(mem).view(b, s, self.h, self.dk).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dk)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(t, s, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(b, t, d)
        return self.o(out), attn


class FeedForward(nn.Module):
    def __init__(self, d: int, ff: int, dropout: float):
        super().__init__()
        self.l1 = nn.Linear(d, ff)
        self.l2 = nn.Linear(ff, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.l2(self.drop(F.relu(self.l1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_size
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad):
        h = self.ln1(x)
        a, _ = self.attn(h, h, pad)
        x = x + self.drop(a)
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_size
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, mem, src_pad):
        h = self.ln1(y)
        a, self_w = self.self_attn(h, h, None, causal=True)
        y = y + self.drop(a)
        a, cross_w = self.cross_attn(self.ln2(y), mem, src_pad)
        y = y + self.drop(a)
        return y + self.drop(self.ff(self.ln3(y))), self_w, cross_w


class TransformerModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size < 1:
            raise ValueError("vocab_size must be set")
        self.config = config
        d = config.hidden_size
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.tag_emb = nn.Embedding(config.vocab_size, d) if config.variant == Variant.SOW.value else None
        self.encoder = nn.ModuleList(EncoderLayer(config) for _ in range(config.encoder_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.decoder = nn.ModuleList(DecoderLayer(config) for _ in range(config.decoder_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, config.vocab_size)
        self.drop = nn.Dropout(config.dropout)
        table = torch.tensor(sinusoidal_table(config.max_positions + 1, d), dtype=torch.float32)
        self.register_buffer("pe", table, persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        bound = math.sqrt(3.0)
        nn.init.uniform_(self.tok_emb.weight, -bound, bound)
        if self.tag_emb is not None:
            nn.init.uniform_(self.tag_emb.weight, -bound, bound)
        for name, p in self.named_parameters():
            if p.dim() == 2 and "emb" not in name:
                lim = 1.0 / math.sqrt(p.shape[1])
                nn.init.uniform_(p, -lim, lim)
            elif name.endswith("bias"):
                nn.init.zeros_(p)

    def _positions(self, length: int):
        if length > self.config.max_positions:
            raise ValueError(f"sequence length {length} exceeds max_positions {self.config.max_positions}")
        return self.pe[:length]

    def encode(self, src, src_pad=None, aux_tags=None):
        """Plain encoder output ``E_M`` (no order embeddings)."""
        if self.tag_emb is not None and aux_tags is None:
            raise ValueError("SOW variant requires aux_tags")
        x = self.tok_emb(src) + self._positions(src.shape[1])
        if self.tag_emb is not None:
            x = x + self.tag_emb(aux_tags)
        x = self.drop(x)
        for layer in self.encoder:
            x = layer(x, src_pad)
        return self.enc_norm(x)

    def order_embedding(self, order):
        if order.max() > self.config.max_positions:
            raise ValueError("order position exceeds max_positions")
        return self.pe[order]

    def encode_with_order(self, src, order, src_pad=None, aux_tags=None):
        if order.shape != src.shape:
            raise ValueError(f"order shape {tuple(order.shape)} != source shape {tuple(src.shape)}")
        return self.encode(src, src_pad, aux_tags) + self.order_embedding(order)

    def decode(self, tgt_in, memory, src_pad=None):
        """Logits ``(B, T, V)`` and last-layer cross attention ``(B, H, T, S)``."""
        y = self.drop(self.tok_emb(tgt_in) + self._positions(tgt_in.shape[1]))
        cross = None
        for layer in self.decoder:
            y, _, cross = layer(y, memory, src_pad)
        return self.out_proj(self.dec_norm(y)), cross

    def forward(self, src, order, tgt_in, src_pad=None, aux_tags=None):
        memory = self.encode_with_order(src, order, src_pad, aux_tags)
        return self.decode(tgt_in, memory, src_pad)


def decode_step(model: TransformerModel, memory, prefix_ids, src_pad=None):
    """Next-token logits for the last prefix position and its cross attention per head."""
    if prefix_ids.shape[1] > model.config.max_positions:
        raise ValueError("prefix exceeds max_positions")
    logits, cross = model.decode(prefix_ids, memory, src_pad)
    return logits[:, -1], cross[:, :, -1]


def save_checkpoint(path: str | Path, model: TransformerModel, vocab: BpeVocab, extra: dict | None = None):
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": vocab.dumps(),
        "extra": extra or {},
    }
    arrays = {name: t.detach().cpu().numpy().astype(np.float32)
              for name, t in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[TransformerModel, BpeVocab, dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        model = TransformerModel(ModelConfig(**header["config"]))
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != "__header__"}
    model.load_state_dict(state)
    model.eval()
    return model, BpeVocab.loads(header["vocab"]), header
