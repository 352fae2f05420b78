"""Recursive source-order rewriting.

Proposes sentence-level reorderings by abstracting pairs of constituents,
asking a phrase transducer to rewrite the abstracted phrase under a
MONOTONE or FLIP preference, aligning its output back to the input, and
combining the phrase-level permutation with recursively computed
permutations of the two abstracted constituents.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .embeddings import EmbeddingProvider, HashEmbeddings, cosine_matrix
from .syntax import ConstituencyTree, PermutationError, Reordering, check_permutation

DEFAULT_IGNORED_TAGS = ("DT", "IN", "CD", "MD", "TO", "PRP")


class OrderPreference(enum.Enum):
    MONOTONE = "MONOTONE"
    FLIP = "FLIP"


@dataclass(frozen=True)
class EngineConfig:
    k: int = 10
    abstraction_threshold: float = 0.6
    max_rules: int = 3
    ignored_tags: tuple[str, ...] = DEFAULT_IGNORED_TAGS
    candidate_limit: int = 10


class Rule(NamedTuple):
    level: int
    abstracted_input: str
    output: str


def nonterminal_symbols(label_a: str, label_b: str) -> tuple[str, str]:
    """Surface symbols for the two abstracted slots; equal labels get indices."""
    if label_a == label_b:
        return f"{label_a}_1", f"{label_b}_2"
    return label_a, label_b


@dataclass(frozen=True, eq=False)
class PhraseTuple:
    parent: ConstituencyTree
    a_node: ConstituencyTree
    b_node: ConstituencyTree

    def __post_init__(self):
        a, b, t = self.a_node.span, self.b_node.span, self.parent.span
        if not (a[1] < b[0] or b[1] < a[0]):
            raise ValueError(f"abstracted spans overlap: {a} and {b}")
        for s in (a, b):
            if not (t[0] <= s[0] and s[1] <= t[1]) or s == t:
                raise ValueError(f"span {s} not strictly inside parent {t}")
        if a[0] > b[0]:
            a_node, b_node = self.b_node, self.a_node
            object.__setattr__(self, "a_node", a_node)
            object.__setattr__(self, "b_node", b_node)

    @property
    def symbols(self) -> tuple[str, str]:
        return nonterminal_symbols(self.a_node.label, self.b_node.label)

    @property
    def slots(self) -> list:
        """Per abstracted position: 'A', 'B', or the parent-local token index."""
        out = []
        off = self.parent.start - 1
        i = self.parent.start
        while i <= self.parent.end:
            if i == self.a_node.start:
                out.append("A")
                i = self.a_node.end + 1
            elif i == self.b_node.start:
                out.append("B")
                i = self.b_node.end + 1
            else:
                out.append(i - off)
                i += 1
        return out

    @property
    def abstracted_yield(self) -> list[str]:
        words = self.parent.words()
        sym = dict(zip("AB", self.symbols))
        return [sym[s] if isinstance(s, str) else words[s - 1] for s in self.slots]

    @property
    def abstracted_tags(self) -> list[str]:
        tokens = self.parent.tokens()
        lab = {"A": self.a_node.label, "B": self.b_node.label}
        return [lab[s] if isinstance(s, str) else tokens[s - 1].pos_tag for s in self.slots]

    @property
    def nonterminal_positions(self) -> tuple[int, int]:
        s = self.slots
        return s.index("A") + 1, s.index("B") + 1

    @property
    def unabstracted_fraction(self) -> float:
        return (len(self.parent) - len(self.a_node) - len(self.b_node)) / len(self.parent)


@dataclass(frozen=True)
class PhraseReordering:
    perm: tuple[int, ...]
    score: float
    preference: OrderPreference
    output: tuple[str, ...] = ()
    degraded: bool = False

    def __post_init__(self):
        check_permutation(self.perm)
        if self.score > 1e-9:
            raise ValueError(f"phrase score must be a log-probability, got {self.score}")


class PhraseTransducer(Protocol):
    def transduce(self, tokens: Sequence[str], tags: Sequence[str], nt_positions: tuple[int, int],
                  preference: OrderPreference) -> tuple[list[str], float]:
        """Rewrite an abstracted phrase; return output tokens and their log-probability."""
        ...


class EchoTransducer:
    """Copies its input; every phrase reordering is the identity."""

    def transduce(self, tokens, tags, nt_positions, preference):
        return list(tokens), 0.0


class SwapTransducer:
    """Rule stub: FLIP swaps the two non-terminal symbols, MONOTONE echoes.

    Scores are deterministic functions of the input so that beams have a
    stable but non-trivial ranking.
    """

    def __init__(self, flip_cost: float = 0.7, length_cost: float = 0.05):
        self.flip_cost = flip_cost
        self.length_cost = length_cost

    def transduce(self, tokens, tags, nt_positions, preference):
        out = list(tokens)
        score = -self.length_cost * len(tokens)
        if preference is OrderPreference.FLIP:
            i, j = (p - 1 for p in nt_positions)
            out[i], out[j] = out[j], out[i]
            score -= self.flip_cost + 0.01 * (sum(map(len, tokens)) % 7)
        return out, score


def select_segment_pairs(t: ConstituencyTree, config: EngineConfig = EngineConfig()) -> list[PhraseTuple]:
    """Candidate (A, B) pairs under ``t`` that pass the tag and abstraction heuristics.

    Candidates are ranked by the fraction of tokens left unabstracted (big
    constituents first, document order on ties) and capped at
    ``config.candidate_limit``.
    """
    t = t.strip_unary()
    if t.is_leaf or len(t) < 2:
        return []
    by_span: dict[tuple[int, int], ConstituencyTree] = {}
    for node in t.subtrees():
        if node.span != t.span and node.span not in by_span:
            by_span[node.span] = node
    nodes = [n for n in by_span.values()
             if n.label not in config.ignored_tags and any(ch.isalpha() for ch in n.label)]
    nodes.sort(key=lambda n: (n.start, -len(n)))
    scored = []
    total = len(t)
    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            if b.start <= a.end:
                continue
            frac = (total - len(a) - len(b)) / total
            if frac <= config.abstraction_threshold + 1e-12:
                scored.append((frac, a.start, b.start, a, b))
    scored.sort(key=lambda x: x[:3])
    return [PhraseTuple(t, a, b) for _, _, _, a, b in scored[:config.candidate_limit]]


def align_output(inp: Sequence[str], inp_nt: Sequence[bool], out: Sequence[str],
                 embeddings: EmbeddingProvider) -> list[int]:
    """Greedy left-to-right alignment of output tokens to unused input positions.

    Returns the aligned 1-based input positions in output order. Non-terminal
    symbols only match identical symbols; words match the most
    cosine-similar unused input word (leftmost on ties).
    """
    nt_symbols = {s for s, nt in zip(inp, inp_nt) if nt}
    words = [i for i, nt in enumerate(inp_nt) if not nt]
    out_words = [w for w in out if w not in nt_symbols]
    sims = None
    if words and out_words:
        sims = cosine_matrix(embeddings.embed(out_words), embeddings.embed([inp[i] for i in words]))
    used = [False] * len(inp)
    aligned = []
    w_row = 0
    for tok in out:
        if tok in nt_symbols:
            for i, (s, nt) in enumerate(zip(inp, inp_nt)):
                if nt and s == tok and not used[i]:
                    used[i] = True
                    aligned.append(i + 1)
                    break
            continue
        row = sims[w_row] if sims is not None else None
        w_row += 1
        if row is None:
            continue
        best, best_sim = None, -np.inf
        for col, i in enumerate(words):
            if not used[i] and row[col] > best_sim + 1e-12:
                best, best_sim = i, row[col]
        if best is not None:
            used[best] = True
            aligned.append(best + 1)
    return aligned


def permutation_from_alignment(aligned: Sequence[int], n: int) -> tuple[tuple[int, ...], bool]:
    """Unaligned input positions keep their own slot; aligned ones fill the rest in order."""
    aligned_set = set(aligned)
    if len(aligned_set) != len(aligned):
        raise PermutationError("input position aligned twice")
    perm = [0] * n
    it = iter(aligned)
    for slot in range(1, n + 1):
        perm[slot - 1] = slot if slot not in aligned_set else next(it)
    return tuple(perm), len(aligned) < n


def reorder_phrase(pt: PhraseTuple, o: OrderPreference, transducer: PhraseTransducer,
                   embeddings: EmbeddingProvider | None = None) -> PhraseReordering:
    tokens, tags = pt.abstracted_yield, pt.abstracted_tags
    return _reorder_abstracted(tokens, tags, pt.nonterminal_positions, o, transducer,
                               embeddings or HashEmbeddings())


def _reorder_abstracted(tokens, tags, nt_positions, o, transducer, embeddings) -> PhraseReordering:
    out, score = transducer.transduce(tokens, tags, nt_positions, o)
    is_nt = [i + 1 in nt_positions for i in range(len(tokens))]
    aligned = align_output(tokens, is_nt, out, embeddings)
    perm, degraded = permutation_from_alignment(aligned, len(tokens))
    return PhraseReordering(perm, min(float(score), 0.0), o, tuple(out), degraded)


def combine_reorderings(z: PhraseReordering, r_a: Reordering, r_b: Reordering,
                        pt: PhraseTuple, level: int = 0) -> Reordering:
    """Expand the phrase-level permutation ``z`` with sub-orders of A and B.

    The result is local to ``pt.parent`` (indices 1..len(parent)); its score
    is the sum of the three scores and its provenance lists the applied
    rules.
    """
    slots = pt.slots
    if len(z.perm) != len(slots):
        raise PermutationError(f"phrase permutation has {len(z.perm)} slots, tuple has {len(slots)}")
    if len(r_a.perm) != len(pt.a_node) or len(r_b.perm) != len(pt.b_node):
        raise PermutationError("sub-reordering length does not match constituent span")
    off_a = pt.a_node.start - pt.parent.start
    off_b = pt.b_node.start - pt.parent.start
    perm = []
    for j in z.perm:
        s = slots[j - 1]
        if s == "A":
            perm.extend(off_a + i for i in r_a.perm)
        elif s == "B":
            perm.extend(off_b + i for i in r_b.perm)
        else:
            perm.append(s)
    rule = Rule(level, " ".join(pt.abstracted_yield), " ".join(z.output))
    return Reordering(tuple(perm), z.score + r_a.score + r_b.score,
                      (rule,) + tuple(r_a.provenance) + tuple(r_b.provenance))


class SowEngine:
    """Top-k sentence reordering with a phrase transducer."""

    def __init__(self, transducer: PhraseTransducer, embeddings: EmbeddingProvider | None = None,
                 config: EngineConfig = EngineConfig()):
        self.transducer = transducer
        self.embeddings = embeddings or HashEmbeddings()
        self.config = config
        self._phrase_cache: dict = {}

    def phrase(self, pt: PhraseTuple, o: OrderPreference) -> PhraseReordering:
        key = (tuple(pt.abstracted_yield), tuple(pt.abstracted_tags), pt.nonterminal_positions, o)
        hit = self._phrase_cache.get(key)
        if hit is None:
            hit = _reorder_abstracted(list(key[0]), list(key[1]), key[2], o,
                                      self.transducer, self.embeddings)
            self._phrase_cache[key] = hit
        return hit

    def reorder(self, t: ConstituencyTree) -> list[Reordering]:
        cfg = self.config
        if cfg.k < 1:
            raise ValueError("beam width k must be >= 1")
        memo: dict = {}
        beam = self._reorder(t.strip_unary(), cfg.max_rules, 0, memo)
        best: dict[tuple[int, ...], Reordering] = {}
        for r in beam + [Reordering.identity(len(t))]:
            mean = r.score / r.n_rules if r.n_rules else 0.0
            cand = Reordering(r.perm, mean, r.provenance)
            if r.perm not in best or cand.score > best[r.perm].score:
                best[r.perm] = cand
        ranked = sorted(best.values(), key=lambda r: (-r.score, r.n_rules, r.perm))
        return ranked[:cfg.k]

    def _reorder(self, t: ConstituencyTree, budget: int, level: int, memo) -> list[Reordering]:
        key = (t.span, budget, level)
        if key in memo:
            return memo[key]
        ident = Reordering.identity(len(t))
        tuples = select_segment_pairs(t, self.config) if budget > 0 and len(t) >= 2 else []
        beam: dict[tuple[int, ...], Reordering] = {ident.perm: ident}
        for pt in tuples:
            r_as = self._reorder(pt.a_node.strip_unary(), budget - 1, level + 1, memo)
            r_bs = self._reorder(pt.b_node.strip_unary(), budget - 1, level + 1, memo)
            for o in (OrderPreference.MONOTONE, OrderPreference.FLIP):
                z = self.phrase(pt, o)
                for r_a in r_as:
                    for r_b in r_bs:
                        if 1 + r_a.n_rules + r_b.n_rules > budget:
                            continue
                        r = combine_reorderings(z, r_a, r_b, pt, level)
                        prev = beam.get(r.perm)
                        if prev is None or r.score > prev.score:
                            beam[r.perm] = r
        out = sorted(beam.values(), key=lambda r: (-r.score, r.n_rules, r.perm))[:self.config.k]
        memo[key] = out
        return out


def reorder_sentence(t: ConstituencyTree, transducer: PhraseTransducer,
                     embeddings: EmbeddingProvider | None = None, k: int = 10, max_rules: int = 3,
                     config: EngineConfig | None = None) -> list[Reordering]:
    cfg = config or EngineConfig(k=k, max_rules=max_rules)
    return SowEngine(transducer, embeddings, cfg).reorder(t)


def reordering_report(sentence_id, r: Reordering) -> dict:
    return {
        "sentence_id": sentence_id,
        "perm": list(r.perm),
        "score": r.score,
        "rules": [{"level": rule.level, "abstracted_input": rule.abstracted_input,
                   "output": rule.output} for rule in sorted(r.provenance, key=lambda x: x.level)],
    }


def dumps_report(sentence_id, r: Reordering) -> str:
    return json.dumps(reordering_report(sentence_id, r), sort_keys=True)
