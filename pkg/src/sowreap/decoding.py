"""Greedy, top-k sampling and beam-search decoding over encoder states."""

from __future__ import annotations

import torch

from .model import TransformerModel, decode_step


def _bos(model: TransformerModel, n: int, bos_id: int):
    return torch.full((n, 1), bos_id, dtype=torch.long)


def _max_len(model, max_len):
    return min(max_len or model.config.max_positions, model.config.max_positions)


@torch.no_grad()
def greedy_decode(model: TransformerModel, memory, src_pad=None, bos_id=1, eos_id=2,
                  max_len=None) -> list[list[int]]:
    """Batched argmax decoding; returns ids without bos/eos."""
    max_len = _max_len(model, max_len)
    b = memory.shape[0]
    prefix = _bos(model, b, bos_id)
    done = torch.zeros(b, dtype=torch.bool)
    for _ in range(max_len - 1):
        logits, _ = decode_step(model, memory, prefix, src_pad)
        nxt = logits.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, eos_id), nxt)
        prefix = torch.cat([prefix, nxt[:, None]], dim=1)
        done |= nxt == eos_id
        if done.all():
            break
    out = []
    for row in prefix[:, 1:].tolist():
        out.append(row[:row.index(eos_id)] if eos_id in row else row)
    return out


@torch.no_grad()
def sample_top_k(model: TransformerModel, memory, k: int, seed: int, src_pad=None,
                 bos_id=1, eos_id=2, max_len=None) -> list[int]:
    """Sample one sequence for ``memory[0]`` from the renormalised top-k distribution."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    max_len = _max_len(model, max_len)
    prefix = _bos(model, 1, bos_id)
    out = []
    for _ in range(max_len - 1):
        logits, _ = decode_step(model, memory[:1], prefix, None if src_pad is None else src_pad[:1])
        logits = logits[0]
        kk = min(k, logits.shape[-1])
        top, idx = torch.topk(logits, kk)
        if kk == 1:
            nxt = int(idx[0])
        else:
            probs = torch.softmax(top.double(), -1)
            nxt = int(idx[torch.multinomial(probs, 1, generator=gen)[0]])
        if nxt == eos_id:
            break
        out.append(nxt)
        prefix = torch.cat([prefix, torch.tensor([[nxt]])], dim=1)
    return out


@torch.no_grad()
def beam_decode(model: TransformerModel, memory, beam: int, src_pad=None, bos_id=1, eos_id=2,
                max_len=None) -> tuple[list[int], float]:
    """Best completed hypothesis for ``memory[0]`` and its summed log-probability (eos included)."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    max_len = _max_len(model, max_len)
    mem = memory[:1]
    pad = None if src_pad is None else src_pad[:1]
    hyps = [([bos_id], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_len - 1):
        prefix = torch.tensor([h for h, _ in hyps])
        n = len(hyps)
        logits, _ = decode_step(model, mem.expand(n, -1, -1), prefix,
                                None if pad is None else pad.expand(n, -1))
        logp = torch.log_softmax(logits.double(), -1)
        cand = []
        for i, (h, s) in enumerate(hyps):
            top, idx = torch.topk(logp[i], min(beam, logp.shape[-1]))
            for lp, tok in zip(top.tolist(), idx.tolist()):
                cand.append((s + lp, i, tok))
        cand.sort(key=lambda c: -c[0])
        hyps = []
        last_step = step == max_len - 2
        for score, i, tok in cand:
            seq = prefix[i].tolist() + [tok]
            if tok == eos_id:
                finished.append((seq, score))
            elif last_step:
                finished.append((seq, score))
            else:
                hyps.append((seq, score))
            if len(hyps) == beam:
                break
        if not hyps:
            break
        best_done = max((s for _, s in finished), default=float("-inf"))
        if best_done >= hyps[0][1]:
            break
    if not finished:
        finished = hyps
    seq, score = max(finished, key=lambda x: x[1])
    body = [t for t in seq[1:] if t != eos_id]
    return body, float(score)
