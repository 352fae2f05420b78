"""Quality, diversity, rejection, compliance and significance metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

STOPWORDS = frozenset(
    "a an the of to in on at for with by from and or but is are was were be been being "
    "it its this that these those i you he she we they me him her us them , . ; : ! ?".split()
)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4,
         smoothing: bool = True) -> float:
    """Sentence BLEU; with ``smoothing`` orders n >= 2 use add-one counts."""
    if not candidate or not reference:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        ref = ngrams(reference, n)
        match = sum(min(c, ref[g]) for g, c in cand.items())
        total = sum(cand.values())
        if smoothing and n > 1:
            match, total = match + 1, total + 1
        if match == 0 or total == 0:
            return 0.0
        log_p += math.log(match / total) / max_n
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                max_n: int = 4) -> float:
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cg, rg = ngrams(cand, n), ngrams(ref, n)
            matches[n - 1] += sum(min(c, rg[g]) for g, c in cg.items())
            totals[n - 1] += sum(cg.values())
    if c_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(candidate: Sequence[str], reference: Sequence[str], mode: str | int = 1) -> float:
    """ROUGE-1/2 recall, or ROUGE-L F1."""
    if not reference:
        return 0.0
    mode = str(mode).upper()
    if mode in ("1", "2"):
        n = int(mode)
        ref = ngrams(reference, n)
        total = sum(ref.values())
        if total == 0:
            return 0.0
        cand = ngrams(candidate, n)
        return sum(min(c, cand[g]) for g, c in ref.items()) / total
    if mode == "L":
        if not candidate:
            return 0.0
        lcs = lcs_length(candidate, reference)
        if lcs == 0:
            return 0.0
        p, r = lcs / len(candidate), lcs / len(reference)
        return 2 * p * r / (p + r)
    raise ValueError(f"unknown ROUGE mode {mode!r}")


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not reference:
        return float(len(candidate))
    return edit_distance(candidate, reference) / len(reference)


METRICS: dict[str, Callable[[Sequence[str], Sequence[str]], float]] = {
    "BLEU": bleu,
    "WER": wer,
    "ROUGE1": lambda c, r: rouge(c, r, 1),
    "ROUGE2": lambda c, r: rouge(c, r, 2),
    "ROUGEL": lambda c, r: rouge(c, r, "L"),
}


def _metric(metric) -> Callable:
    return METRICS[metric.upper()] if isinstance(metric, str) else metric


def pairwise_diversity(candidates: Sequence[Sequence[str]], metric="BLEU") -> float | None:
    """Mean of ``metric(y_i, y_j)`` over ordered pairs i != j; None with fewer than two candidates."""
    fn = _metric(metric)
    k = len(candidates)
    if k < 2:
        return None
    vals = [fn(candidates[i], candidates[j]) for i in range(k) for j in range(k) if i != j]
    return sum(vals) / len(vals)


def oracle_best(candidates: Sequence[Sequence[str]], reference: Sequence[str], metric="BLEU",
                lower_is_better: bool = False) -> tuple[int, float]:
    """Index of the best candidate against ``reference`` (first on ties) and its score."""
    if not candidates:
        raise ValueError("need at least one candidate")
    fn = _metric(metric)
    best_i, best = 0, None
    for i, c in enumerate(candidates):
        s = fn(c, reference)
        if best is None or (s < best if lower_is_better else s > best):
            best_i, best = i, s
    return best_i, best


class ParaphraseScorer(Protocol):
    def score(self, source: Sequence[str], candidate: Sequence[str]) -> float:
        ...


class OverlapScorer:
    """Token-overlap F1 with stopwords down-weighted."""

    def __init__(self, stopword_weight: float = 0.2, stopwords=STOPWORDS):
        self.stopword_weight = stopword_weight
        self.stopwords = stopwords

    def _w(self, tok):
        return self.stopword_weight if tok.lower() in self.stopwords else 1.0

    def score(self, source, candidate):
        a = Counter(t.lower() for t in source)
        b = Counter(t.lower() for t in candidate)
        if not a or not b:
            return 1.0 if not a and not b else 0.0
        common = sum(min(a[t], b[t]) * self._w(t) for t in a)
        wa = sum(c * self._w(t) for t, c in a.items())
        wb = sum(c * self._w(t) for t, c in b.items())
        if common == 0:
            return 0.0
        p, r = common / wb, common / wa
        return 2 * p * r / (p + r)


def rejection_filter(source: Sequence[str], candidates: Sequence[Sequence[str]],
                     scorer: ParaphraseScorer | None = None, threshold: float = 0.5):
    """(kept candidates, kept flags, rejected fraction)."""
    scorer = scorer or OverlapScorer()
    flags = [scorer.score(source, c) >= threshold for c in candidates]
    kept = [c for c, f in zip(candidates, flags) if f]
    frac = 1 - len(kept) / len(candidates) if candidates else 0.0
    return kept, flags, frac


def kendall_tau(perm_a: Sequence, perm_b: Sequence) -> float:
    """(concordant - discordant) / (n(n-1)/2) for two rankings of the same items."""
    n = len(perm_a)
    if n != len(perm_b):
        raise ValueError("permutations differ in length")
    if n < 2:
        raise ValueError("kendall tau needs at least two items")
    rank_b = {x: i for i, x in enumerate(perm_b)}
    if len(rank_b) != n or set(rank_b) != set(perm_a):
        raise ValueError("inputs are not permutations of the same items")
    pos = [rank_b[x] for x in perm_a]
    conc = disc = 0
    for i in range(n):
        for j in range(i + 1, n):
            if pos[i] < pos[j]:
                conc += 1
            else:
                disc += 1
    return (conc - disc) / (n * (n - 1) / 2)


@dataclass(frozen=True)
class CurvePoint:
    bin_center: float
    mean_generated_tau: float
    count: int


def compliance_curve(records: Iterable[tuple[float, float]], bins: int = 10,
                     lo: float = -1.0, hi: float = 1.0) -> list[CurvePoint]:
    """Mean generated tau per target-tau bin; empty bins are omitted."""
    width = (hi - lo) / bins
    acc: dict[int, list[float]] = {}
    for target, generated in records:
        b = min(int((target - lo) / width), bins - 1)
        acc.setdefault(max(b, 0), []).append(generated)
    return [CurvePoint(lo + (b + 0.5) * width, float(np.mean(v)), len(v))
            for b, v in sorted(acc.items())]


def curve_tsv(points: Sequence[CurvePoint]) -> str:
    lines = ["bin_center\tmean_generated_tau\tcount"]
    lines += [f"{p.bin_center:.4f}\t{p.mean_generated_tau:.6f}\t{p.count}" for p in points]
    return "\n".join(lines) + "\n"


def oracle_perplexity(perplexity_fn: Callable[[int, Sequence], Sequence[float]],
                      orderings: Sequence[Sequence]) -> float:
    """Corpus mean over inputs of the lowest reference perplexity among that input's orderings.

    ``perplexity_fn(i, perms)`` returns the reference perplexity of input ``i``
    under each ordering in ``perms``.
    """
    minima = [min(perplexity_fn(i, perms)) for i, perms in enumerate(orderings)]
    return float(np.mean(minima))


def paired_bootstrap(a: Sequence[float], b: Sequence[float], resamples: int = 10000,
                     seed: int = 0) -> float:
    """Fraction of paired resamples in which system ``a`` does not beat ``b`` (ties count half)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("score lists must be paired (equal length)")
    n = len(a)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    diff = (a[idx] - b[idx]).mean(axis=1)
    return float(((diff < 0).sum() + 0.5 * (diff == 0).sum()) / resamples)
