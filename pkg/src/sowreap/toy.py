"""Desk-scale experiments on the synthetic corpus: REAP compliance and ordering comparison."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .align import CorpusStats, align_phrases, align_words, derive_pseudo_ground_truth, extract_sow_tuples, reordering_tau
from .bpe import BpeVocab, bpe_train
from .embeddings import EmbeddingProvider
from .model import ModelConfig, TransformerModel, load_checkpoint
from .seq2seq import ReapGenerator, reap_example, sow_example
from .sow import SowEngine
from .syntax import Reordering, parse_dependencies, parse_ptb
from .synthetic import generate_corpus
from .training import TrainConfig, Trainer

log = logging.getLogger(__name__)


@dataclass
class ToyRun:
    model: TransformerModel
    vocab: BpeVocab
    history: list
    seconds: float


def reap_records(corpus: Sequence[dict], provider: EmbeddingProvider) -> list[dict]:
    out = []
    for rec in corpus:
        src, tgt = rec["source"].split(), rec["target"].split()
        r_star = derive_pseudo_ground_truth(parse_dependencies(rec["source_dep"]), align_words(src, tgt, provider))
        out.append({"id": rec["id"], "src": src, "tgt": tgt, "r_star": r_star.perm})
    return out


def train_toy_reap(corpus: Sequence[dict], valid: Sequence[dict], provider: EmbeddingProvider,
                   hidden: int = 64, merges: int = 140, train_config: TrainConfig | None = None,
                   out_dir: str | Path | None = None, seed: int = 0) -> ToyRun:
    t0 = time.perf_counter()
    recs, vrecs = reap_records(corpus, provider), reap_records(valid, provider)
    vocab = bpe_train([r["src"] for r in recs] + [r["tgt"] for r in recs], merges)
    train = [reap_example(vocab, r["src"], r["r_star"], r["tgt"]) for r in recs]
    dev = [reap_example(vocab, r["src"], r["r_star"], r["tgt"]) for r in vrecs]
    torch.manual_seed(seed)
    model = TransformerModel(ModelConfig(vocab_size=len(vocab), hidden_size=hidden))
    trainer = Trainer(model, vocab, train_config or TrainConfig(seed=seed), out_dir)
    history = trainer.fit(train, dev)
    if out_dir is not None:
        model, _, _ = load_checkpoint(Path(out_dir) / "best.npz")
    return ToyRun(model.eval(), vocab, history, time.perf_counter() - t0)


def sow_tuples(corpus: Sequence[dict], provider: EmbeddingProvider) -> list:
    stats = CorpusStats.build([r["source"].split() for r in corpus] + [r["target"].split() for r in corpus])
    out = []
    for rec in corpus:
        src, tgt = parse_ptb(rec["source_parse"]), parse_ptb(rec["target_parse"])
        out.extend(extract_sow_tuples(align_phrases(src, tgt, provider, stats), src, tgt))
    return out


def train_toy_sow(corpus: Sequence[dict], valid: Sequence[dict], provider: EmbeddingProvider,
                  hidden: int = 64, merges: int = 140, max_tuples: int | None = 30000,
                  train_config: TrainConfig | None = None, seed: int = 0) -> ToyRun:
    t0 = time.perf_counter()
    tuples, vtuples = sow_tuples(corpus, provider), sow_tuples(valid, provider)
    if max_tuples is not None and len(tuples) > max_tuples:
        keep = np.random.default_rng(seed).choice(len(tuples), max_tuples, replace=False)
        tuples = [tuples[i] for i in sorted(keep)]
    labels = {tag for t in tuples + vtuples for tag in t.pos_tags}
    labels |= {x for t in tuples + vtuples for x, tag in zip(t.x_abs, t.pos_tags) if x == tag or "_" in x}
    vocab = bpe_train([t.x_abs for t in tuples] + [t.y_abs for t in tuples], merges, sorted(labels))

    def ex(t):
        return sow_example(vocab, t.x_abs, t.pos_tags, t.nt_positions, t.o, t.y_abs)

    train, dev = [ex(t) for t in tuples], [ex(t) for t in vtuples[:2000]]
    torch.manual_seed(seed + 1)
    model = TransformerModel(ModelConfig(vocab_size=len(vocab), hidden_size=hidden, variant="SOW"))
    cfg = train_config or TrainConfig(seed=seed, coverage=False)
    history = Trainer(model, vocab, cfg).fit(train, dev)
    return ToyRun(model.eval(), vocab, history, time.perf_counter() - t0)


@dataclass
class ComplianceResult:
    bins: list[dict] = field(default_factory=list)
    monotone_mean_tau: float = float("nan")
    records: list[tuple[float, float]] = field(default_factory=list)


def compliance_study(gen: ReapGenerator, corpus: Sequence[dict], provider: EmbeddingProvider,
                     bins: int = 10) -> ComplianceResult:
    """Greedy outputs under r* and under monotone conditioning, scored by Kendall tau."""
    items = reap_records(corpus, provider)
    outs = gen.generate_batch([(r["src"], r["r_star"]) for r in items])
    mono = gen.generate_batch([(r["src"], tuple(range(1, len(r["src"]) + 1))) for r in items])
    res = ComplianceResult()
    width = 2.0 / bins
    acc: dict[int, list] = {}
    for r, out in zip(items, outs):
        target = reordering_tau(r["src"], r["tgt"], provider)
        generated = reordering_tau(r["src"], out, provider) if out else 1.0
        res.records.append((target, generated))
        b = min(int((target + 1.0) / width), bins - 1)
        acc.setdefault(b, []).append(abs(generated - target))
    for b, v in sorted(acc.items()):
        res.bins.append({"bin_center": -1.0 + (b + 0.5) * width, "mean_abs_delta": float(np.mean(v)),
                         "count": len(v)})
    res.monotone_mean_tau = float(np.mean([reordering_tau(r["src"], o, provider) if o else 1.0
                                           for r, o in zip(items, mono)]))
    return res


def random_child_orderings(tree, n: int, rng: np.random.Generator) -> list[Reordering]:
    from .pipeline import random_orderings

    return random_orderings(tree, n, rng)


def ordering_perplexities(gen: ReapGenerator, engine: SowEngine, corpus: Sequence[dict],
                          provider: EmbeddingProvider, n_random: int = 10, seed: int = 0) -> dict[str, float]:
    """Mean over inputs of the lowest reference perplexity per ordering strategy."""
    rng = np.random.default_rng(seed)
    acc = {"ground_truth": [], "sow": [], "random": [], "monotone": []}
    for rec in corpus:
        tree = parse_ptb(rec["source_parse"])
        src, tgt = tree.words(), rec["target"].split()
        gt = derive_pseudo_ground_truth(parse_dependencies(rec["source_dep"]), align_words(src, tgt, provider))
        sets = {"ground_truth": [gt.perm], "sow": [r.perm for r in engine.reorder(tree)],
                "random": [r.perm for r in random_child_orderings(tree, n_random, rng)],
                "monotone": [tuple(range(1, len(src) + 1))]}
        for name, perms in sets.items():
            acc[name].append(min(gen.perplexity(src, perms, tgt)))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def toy_split(n_train: int = 10000, n_valid: int = 500, n_test: int = 300, seed: int = 7):
    corpus = generate_corpus(n_train + n_valid + n_test, seed=seed)
    return corpus[:n_train], corpus[n_train:n_train + n_valid], corpus[n_train + n_valid:]
