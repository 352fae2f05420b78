"""Word-level adapters around :class:`TransformerModel` for both variants."""

from __future__ import annotations

from typing import Sequence

import torch

from .bpe import BpeVocab
from .decoding import beam_decode, greedy_decode, sample_top_k
from .model import TransformerModel, order_preference_positions, subword_order_positions
from .sow import OrderPreference
from .syntax import Reordering, inverse_permutation
from .training import Example, collate, sequence_nll


def reap_example(vocab: BpeVocab, src: Sequence[str], perm: Sequence[int],
                 tgt: Sequence[str] = ()) -> Example:
    src_ids, owner = vocab.encode_tokens(src)
    order = subword_order_positions(inverse_permutation(perm), owner)
    tgt_ids, _ = vocab.encode_tokens(tgt)
    return Example(src_ids, order, tgt_ids)


def sow_example(vocab: BpeVocab, tokens: Sequence[str], tags: Sequence[str],
                nt_positions: tuple[int, int], o: OrderPreference, tgt: Sequence[str] = ()) -> Example:
    src_ids, owner = vocab.encode_tokens(tokens)
    word_order = order_preference_positions(nt_positions, len(tokens), o)
    order = [word_order[w] for w in owner]
    aux = [vocab.label_ids.get(tags[w], vocab.unk_id) for w in owner]
    tgt_ids, _ = vocab.encode_tokens(tgt)
    return Example(src_ids, order, tgt_ids, aux)


def _memory(model: TransformerModel, ex: Example):
    b = collate([ex])
    with torch.no_grad():
        mem = model.encode_with_order(b.src, b.order, b.src_pad, b.aux)
    return mem, b.src_pad


class ModelTransducer:
    """Phrase transducer backed by a trained SOW model (beam search)."""

    def __init__(self, model: TransformerModel, vocab: BpeVocab, beam: int = 10, max_len: int | None = None):
        self.model = model.eval()
        self.vocab = vocab
        self.beam = beam
        self.max_len = max_len

    def transduce(self, tokens, tags, nt_positions, preference):
        ex = sow_example(self.vocab, tokens, tags, nt_positions, preference)
        mem, pad = _memory(self.model, ex)
        max_len = self.max_len or min(self.model.config.max_positions, 2 * len(ex.src) + 4)
        ids, score = beam_decode(self.model, mem, self.beam, pad, max_len=max_len)
        return self.vocab.decode_tokens(ids), min(score, 0.0)


class ReapGenerator:
    """Generates paraphrases conditioned on a source reordering."""

    def __init__(self, model: TransformerModel, vocab: BpeVocab, max_len: int | None = None):
        self.model = model.eval()
        self.vocab = vocab
        self.max_len = max_len

    def _max_len(self, n_src):
        return self.max_len or min(self.model.config.max_positions, 2 * n_src + 4)

    def generate(self, tokens: Sequence[str], reordering: Reordering | Sequence[int],
                 method: str = "greedy", top_k: int = 20, beam: int = 10, seed: int = 0) -> list[str]:
        perm = reordering.perm if isinstance(reordering, Reordering) else tuple(reordering)
        ex = reap_example(self.vocab, tokens, perm)
        mem, pad = _memory(self.model, ex)
        ml = self._max_len(len(ex.src))
        if method == "greedy":
            ids = greedy_decode(self.model, mem, pad, max_len=ml)[0]
        elif method == "topk":
            ids = sample_top_k(self.model, mem, top_k, seed, pad, max_len=ml)
        elif method == "beam":
            ids, _ = beam_decode(self.model, mem, beam, pad, max_len=ml)
        else:
            raise ValueError(f"unknown decoding method {method!r}")
        return self.vocab.decode_tokens(ids)

    def generate_batch(self, items: Sequence[tuple[Sequence[str], Sequence[int]]],
                       batch_size: int = 64) -> list[list[str]]:
        """Greedy decoding for many (tokens, perm) pairs at once."""
        out = []
        for i in range(0, len(items), batch_size):
            exs = [reap_example(self.vocab, toks, perm) for toks, perm in items[i:i + batch_size]]
            b = collate(exs)
            with torch.no_grad():
                mem = self.model.encode_with_order(b.src, b.order, b.src_pad)
            ml = self._max_len(b.src.shape[1])
            out.extend(self.vocab.decode_tokens(ids)
                       for ids in greedy_decode(self.model, mem, b.src_pad, max_len=ml))
        return out

    def perplexity(self, tokens: Sequence[str], perms: Sequence[Sequence[int]],
                   reference: Sequence[str]) -> list[float]:
        exs = [reap_example(self.vocab, tokens, p, reference) for p in perms]
        return [float(torch.tensor(v).exp()) for v in sequence_nll(self.model, exs)]
