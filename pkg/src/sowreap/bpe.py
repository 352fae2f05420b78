"""Byte-pair-encoding vocabulary (character-level merges with an end-of-word marker).

Syntactic labels (POS tags and constituent labels) are registered as whole
special tokens so abstracted phrases like ``if S it should not VB used``
keep their non-terminals atomic.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

EOW = "</w>"
PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


@dataclass
class BpeVocab:
    merges: list[tuple[str, str]]
    alphabet: list[str]
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        symbols = list(SPECIALS) + list(self.labels)
        for ch in self.alphabet:
            symbols.extend([ch, ch + EOW])
        symbols.extend(a + b for a, b in self.merges)
        self.id_to_token: list[str] = []
        self.token_to_id: dict[str, int] = {}
        for s in symbols:
            if s not in self.token_to_id:
                self.token_to_id[s] = len(self.id_to_token)
                self.id_to_token.append(s)
        self.label_ids = {lab: self.token_to_id[lab] for lab in self.labels}
        self._cache: dict[str, list[int]] = {}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    def __len__(self) -> int:
        return len(self.id_to_token)

    def is_label(self, idx: int) -> bool:
        return 4 <= idx < 4 + len(self.labels)

    def segment(self, word: str) -> list[str]:
        syms = list(_word_symbols(word))
        while len(syms) > 1:
            best, best_rank = None, None
            for i in range(len(syms) - 1):
                r = self.ranks.get((syms[i], syms[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            syms[best:best + 2] = [syms[best] + syms[best + 1]]
        return syms

    def encode_word(self, word: str) -> list[int]:
        if word in self.label_ids:
            return [self.label_ids[word]]
        hit = self._cache.get(word)
        if hit is None:
            hit = [self.token_to_id.get(s, self.unk_id) for s in self.segment(word)]
            self._cache[word] = hit
        return hit

    def encode_tokens(self, tokens: Sequence[str]) -> tuple[list[int], list[int]]:
        """Ids plus, for every id, the 0-based index of the word it came from."""
        ids, owner = [], []
        for w_i, w in enumerate(tokens):
            piece = self.encode_word(w)
            ids.extend(piece)
            owner.extend([w_i] * len(piece))
        return ids, owner

    def decode_tokens(self, ids: Iterable[int]) -> list[str]:
        words, cur = [], ""
        for i in ids:
            i = int(i)
            if i in (self.pad_id, self.bos_id, self.eos_id):
                continue
            if self.is_label(i) or i == self.unk_id:
                if cur:
                    words.append(cur)
                    cur = ""
                words.append(self.id_to_token[i])
                continue
            s = self.id_to_token[i]
            if s.endswith(EOW):
                words.append(cur + s[:-len(EOW)])
                cur = ""
            else:
                cur += s
        if cur:
            words.append(cur)
        return words

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def dumps(self) -> str:
        lines = ["#version: 1",
                 "#labels: " + json.dumps(self.labels),
                 "#alphabet: " + json.dumps(self.alphabet)]
        lines.extend(f"{a} {b}" for a, b in self.merges)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> BpeVocab:
        labels, alphabet, merges = [], [], []
        for line in text.splitlines():
            if line.startswith("#labels: "):
                labels = json.loads(line[len("#labels: "):])
            elif line.startswith("#alphabet: "):
                alphabet = json.loads(line[len("#alphabet: "):])
            elif line.startswith("#") or not line:
                continue
            else:
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(merges, alphabet, labels)

    @classmethod
    def load(cls, path: str | Path) -> BpeVocab:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def bpe_train(corpus: Iterable[Sequence[str]], num_merges: int,
              labels: Iterable[str] = ()) -> BpeVocab:
    """Greedy most-frequent-pair merges; ties go to the lexicographically smallest pair."""
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    labels = sorted(set(labels))
    label_set = set(labels)
    freqs: Counter = Counter()
    for sent in corpus:
        for w in sent:
            if w and w not in label_set:
                freqs[w] += 1
    if not freqs and not labels:
        raise ValueError("empty corpus")
    alphabet = sorted({ch for w in freqs for ch in w})
    words = {_word_symbols(w): c for w, c in freqs.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for syms, c in words.items():
            for i in range(len(syms) - 1):
                pairs[syms[i], syms[i + 1]] += c
        if not pairs:
            break
        top = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == top)
        merges.append(best)
        merged = best[0] + best[1]
        new_words = {}
        for syms, c in words.items():
            out, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            new_words[tuple(out)] = new_words.get(tuple(out), 0) + c
        words = new_words
    return BpeVocab(merges, alphabet, labels)


def bpe_apply(vocab: BpeVocab, text: str) -> list[int]:
    return vocab.encode_tokens(text.split())[0]


def bpe_decode(vocab: BpeVocab, ids: Iterable[int]) -> str:
    return " ".join(vocab.decode_tokens(ids))
