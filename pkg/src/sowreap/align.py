"""Training-data construction: filtering, phrase/word alignment, supervision extraction."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingProvider, cosine_matrix
from .sow import OrderPreference, nonterminal_symbols
from .syntax import ConstituencyTree, DependencyTree, Reordering

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class CorpusStats:
    num_sentences: int
    doc_freq: Mapping[str, int]

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> CorpusStats:
        df: Counter = Counter()
        m = 0
        for sent in sentences:
            m += 1
            df.update({w.lower() for w in sent})
        return cls(m, dict(df))


def compute_idf(stats: CorpusStats, w: str) -> float:
    """``-log(df / M)``; unseen words use a document frequency of 1."""
    df = max(stats.doc_freq.get(w.lower(), 0), 1)
    m = max(stats.num_sentences, df)
    return -math.log(df / m)


def _prf(sim: np.ndarray, idf_p: np.ndarray, idf_q: np.ndarray) -> tuple[float, float, float]:
    best_p = sim.max(axis=1)
    best_q = sim.max(axis=0)
    r = float(best_p @ idf_p / idf_p.sum()) if idf_p.sum() > 0 else float(best_p.mean())
    p = float(best_q @ idf_q / idf_q.sum()) if idf_q.sum() > 0 else float(best_q.mean())
    f = 2 * p * r / (p + r) if p + r != 0 else 0.0
    return r, p, f


def phrase_similarity(p: Sequence[str], q: Sequence[str], provider: EmbeddingProvider,
                      stats: CorpusStats, p_vecs=None, q_vecs=None) -> tuple[float, float, float]:
    """idf-weighted greedy-matching recall, precision and F1 between phrases ``p`` and ``q``.

    ``p_vecs``/``q_vecs`` may carry contextual vectors for the phrase tokens.
    """
    if not p or not q:
        raise ValueError("phrases must be non-empty")
    pv = provider.embed(p) if p_vecs is None else p_vecs
    qv = provider.embed(q) if q_vecs is None else q_vecs
    sim = cosine_matrix(pv, qv)
    idf_p = np.array([compute_idf(stats, w) for w in p])
    idf_q = np.array([compute_idf(stats, w) for w in q])
    return _prf(sim, idf_p, idf_q)


@dataclass(frozen=True)
class AlignedPhrasePair:
    source: ConstituencyTree
    target: ConstituencyTree
    score: float

    @property
    def spans(self):
        return self.source.span, self.target.span


def candidate_phrases(tree: ConstituencyTree, min_len: int = 2) -> list[ConstituencyTree]:
    """Distinct-span constituents with at least ``min_len`` tokens, topmost node per span."""
    seen = {}
    for node in tree.subtrees():
        if len(node) >= min_len and node.span not in seen:
            seen[node.span] = node
    return sorted(seen.values(), key=lambda n: (n.start, -len(n)))


def phrase_score_matrix(src_tree, tgt_tree, provider, stats, min_len=2):
    src_nodes = candidate_phrases(src_tree, min_len)
    tgt_nodes = candidate_phrases(tgt_tree, min_len)
    src_words, tgt_words = src_tree.words(), tgt_tree.words()
    sv, tv = provider.embed(src_words), provider.embed(tgt_words)
    sim = cosine_matrix(sv, tv)
    idf_s = np.array([compute_idf(stats, w) for w in src_words])
    idf_t = np.array([compute_idf(stats, w) for w in tgt_words])
    off_s, off_t = src_tree.start, tgt_tree.start
    scores = np.zeros((len(src_nodes), len(tgt_nodes)))
    for i, a in enumerate(src_nodes):
        sa = slice(a.start - off_s, a.end - off_s + 1)
        for j, b in enumerate(tgt_nodes):
            sb = slice(b.start - off_t, b.end - off_t + 1)
            scores[i, j] = _prf(sim[sa, sb], idf_s[sa], idf_t[sb])[2]
    return src_nodes, tgt_nodes, scores


def align_phrases(src_tree: ConstituencyTree, tgt_tree: ConstituencyTree, provider: EmbeddingProvider,
                  stats: CorpusStats, min_len: int = 2) -> list[AlignedPhrasePair]:
    """Phrase pairs that are each other's highest-F match (first index wins ties)."""
    src_nodes, tgt_nodes, scores = phrase_score_matrix(src_tree, tgt_tree, provider, stats, min_len)
    if scores.size == 0:
        return []
    # first index among scores within TIE_TOL of the maximum, so rounding noise cannot reorder ties
    best_t = (scores >= scores.max(axis=1, keepdims=True) - TIE_TOL).argmax(axis=1)
    best_s = (scores >= scores.max(axis=0, keepdims=True) - TIE_TOL).argmax(axis=0)
    return [AlignedPhrasePair(src_nodes[i], tgt_nodes[j], float(scores[i, j]))
            for i, j in enumerate(best_t) if best_s[j] == i]


@dataclass(frozen=True)
class SowTrainingTuple:
    x_abs: tuple[str, ...]
    y_abs: tuple[str, ...]
    o: OrderPreference
    labels: tuple[str, str]
    pos_tags: tuple[str, ...]

    @property
    def nt_positions(self) -> tuple[int, int]:
        syms = nonterminal_symbols(*self.labels)
        return self.x_abs.index(syms[0]) + 1, self.x_abs.index(syms[1]) + 1

    def to_json(self) -> dict:
        return {"x_abs": list(self.x_abs), "y_abs": list(self.y_abs), "o": self.o.value,
                "labels": list(self.labels), "pos_tags": list(self.pos_tags)}

    @classmethod
    def from_json(cls, d: dict) -> SowTrainingTuple:
        return cls(tuple(d["x_abs"]), tuple(d["y_abs"]), OrderPreference(d["o"]),
                   tuple(d["labels"]), tuple(d["pos_tags"]))


def _inside(inner, outer) -> bool:
    return outer[0] <= inner[0] and inner[1] <= outer[1] and inner != outer


def _abstract(tree: ConstituencyTree, parent_span, spans_syms):
    toks = [t for t in tree.tokens() if parent_span[0] <= t.index <= parent_span[1]]
    words, tags = [], []
    i = 0
    while i < len(toks):
        idx = toks[i].index
        hit = next(((s, sym, lab) for s, sym, lab in spans_syms if s[0] == idx), None)
        if hit:
            words.append(hit[1])
            tags.append(hit[2])
            i += hit[0][1] - hit[0][0] + 1
        else:
            words.append(toks[i].surface)
            tags.append(toks[i].pos_tag)
            i += 1
    return words, tags


def extract_sow_tuples(aligned: Sequence[AlignedPhrasePair], src_tree: ConstituencyTree,
                       tgt_tree: ConstituencyTree) -> list[SowTrainingTuple]:
    """One tuple per aligned parent (A, A') and unordered pair of aligned children {B, C}.

    B and C must be disjoint and strictly inside A, and B', C' likewise inside
    A'. Both sides abstract the children with the source labels so that the
    output non-terminals can be matched back to the input ones.
    """
    out = []
    for par in aligned:
        kids = [p for p in aligned
                if _inside(p.source.span, par.source.span) and _inside(p.target.span, par.target.span)]
        kids.sort(key=lambda p: p.source.start)
        for i, b in enumerate(kids):
            for c in kids[i + 1:]:
                if b.source.end >= c.source.start:
                    continue
                bt, ct = b.target.span, c.target.span
                if not (bt[1] < ct[0] or ct[1] < bt[0]):
                    continue
                labels = (b.source.label, c.source.label)
                sb, sc = nonterminal_symbols(*labels)
                x, tags = _abstract(src_tree, par.source.span,
                                    [(b.source.span, sb, labels[0]), (c.source.span, sc, labels[1])])
                y, _ = _abstract(tgt_tree, par.target.span, [(bt, sb, labels[0]), (ct, sc, labels[1])])
                o = OrderPreference.MONOTONE if bt[0] < ct[0] else OrderPreference.FLIP
                out.append(SowTrainingTuple(tuple(x), tuple(y), o, labels, tuple(tags)))
    return out


def align_words(src: Sequence[str], tgt: Sequence[str], provider: EmbeddingProvider) -> dict[int, int]:
    """Each source index (1-based) to its most cosine-similar target index (leftmost on ties)."""
    if not src or not tgt:
        return {}
    sim = cosine_matrix(provider.embed(src), provider.embed(tgt))
    return {i + 1: int(np.argmax(row)) + 1 for i, row in enumerate(sim)}


def derive_pseudo_ground_truth(dep: DependencyTree, word_align: Mapping[int, int]) -> Reordering:
    """Top-down traversal: order each head and its children by their aligned target positions.

    Items without an alignment inherit the key of the nearest aligned item
    before them in source order, so a stable sort keeps them next to it.
    """

    def order_subtree(head: int) -> list[int]:
        items = sorted([head] + dep.children(head))
        keys = []
        last = -math.inf
        for it in items:
            pos = word_align.get(it)
            if pos is not None:
                last = pos
            keys.append(last)
        ranked = [it for _, it in sorted(zip(keys, items), key=lambda x: x[0])]
        out = []
        for it in ranked:
            out.extend([it] if it == head else order_subtree(it))
        return out

    return Reordering(tuple(order_subtree(dep.root)))


def alignment_order(src: Sequence[str], tgt: Sequence[str], provider: EmbeddingProvider) -> tuple[int, ...]:
    """Source indices sorted by aligned target position (ties by source order)."""
    a = align_words(src, tgt, provider)
    return tuple(sorted(range(1, len(src) + 1), key=lambda i: (a.get(i, i), i)))


def reordering_tau(src: Sequence[str], tgt: Sequence[str], provider: EmbeddingProvider) -> float:
    from .metrics import kendall_tau

    if len(src) < 2:
        return 1.0
    return kendall_tau(list(range(1, len(src) + 1)), list(alignment_order(src, tgt, provider)))


def filter_corpus(records: Iterable[Mapping], provider: EmbeddingProvider, min_len: int = 8,
                  para_score_min: float = 0.7, reorder_score_max: float = 0.9) -> tuple[list, int]:
    """Keep long, high-quality, reordered pairs; returns (kept, skipped-for-missing-fields)."""
    kept, skipped = [], 0
    for rec in records:
        try:
            src, tgt, score = _tokens(rec["source"]), _tokens(rec["target"]), float(rec["para_score"])
        except (KeyError, TypeError, ValueError):
            skipped += 1
            continue
        if len(src) < min_len or len(tgt) < min_len or score < para_score_min:
            continue
        if reordering_tau(src, tgt, provider) > reorder_score_max:
            continue
        kept.append(rec)
    if skipped:
        log.warning("filter_corpus: skipped %d records with missing fields", skipped)
    return kept, skipped


def _tokens(x) -> list[str]:
    if isinstance(x, str):
        return x.split()
    if x is None:
        raise TypeError("missing tokens")
    return list(x)
