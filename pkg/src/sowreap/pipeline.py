"""End-to-end workflows behind the command line: build data, train, generate, evaluate."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import metrics
from .align import (CorpusStats, SowTrainingTuple, align_phrases, align_words,
                    derive_pseudo_ground_truth, extract_sow_tuples, filter_corpus, reordering_tau)
from .bpe import BpeVocab, bpe_train
from .config import ConfigError, RunConfig, substream
from .embeddings import EmbeddingProvider, load_provider
from .model import TransformerModel, load_checkpoint
from .seq2seq import ModelTransducer, ReapGenerator, reap_example, sow_example
from .sow import EchoTransducer, PhraseTransducer, SowEngine, SwapTransducer, reordering_report
from .syntax import ConstituencyTree, FormatError, Reordering, parse_dependencies, parse_ptb
from .training import Example, TrainConfig, Trainer

log = logging.getLogger(__name__)


class InputError(ValueError):
    """Unreadable or inconsistent input file."""


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise InputError(f"{path}: cannot open ({e.strerror})") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise InputError(f"{path}:{lineno}: expected a JSON object")
            out.append(rec)
    return out


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    return n


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _source_tree(rec: dict) -> ConstituencyTree:
    if rec.get("source_parse"):
        return parse_ptb(rec["source_parse"])
    raise KeyError("source_parse")


# ---------------------------------------------------------------- build-data

@dataclass
class BuildResult:
    sow_tuples: list[dict]
    reap_records: list[dict]
    stats: dict


def build_data(records: Sequence[dict], provider: EmbeddingProvider, cfg: RunConfig) -> BuildResult:
    counts = Counter(records_in=len(records))
    if cfg.filter.enabled:
        kept, skipped = filter_corpus(records, provider, cfg.filter.min_len,
                                      cfg.filter.para_score_min, cfg.filter.reorder_score_max)
        counts["skipped_missing_fields"] = skipped
    else:
        kept = list(records)
    counts["records_kept"] = len(kept)
    if records and not kept:
        log.warning("build-data: every record was filtered out (min_len=%d)", cfg.filter.min_len)
        counts["warnings"] += 1
    stats = CorpusStats.build([_tokens(r["source"]) for r in kept] + [_tokens(r["target"]) for r in kept])
    sow_out, reap_out = [], []
    for rec in kept:
        src, tgt = _tokens(rec["source"]), _tokens(rec["target"])
        try:
            src_tree = parse_ptb(rec["source_parse"])
            tgt_tree = parse_ptb(rec["target_parse"])
        except (KeyError, TypeError, FormatError) as e:
            counts["skipped_bad_parse"] += 1
            log.warning("record %s: unusable parse (%s)", rec.get("id"), e)
            continue
        pairs = align_phrases(src_tree, tgt_tree, provider, stats)
        tuples = extract_sow_tuples(pairs, src_tree, tgt_tree)
        for t in tuples:
            counts[f"sow_{t.o.value.lower()}"] += 1
            sow_out.append(t.to_json())
        if rec.get("source_dep"):
            try:
                dep = parse_dependencies(rec["source_dep"])
            except FormatError as e:
                counts["skipped_bad_dep"] += 1
                log.warning("record %s: unusable dependency tree (%s)", rec.get("id"), e)
                continue
            r_star = derive_pseudo_ground_truth(dep, align_words(src, tgt, provider))
            reap_out.append({"id": rec.get("id"), "src": " ".join(src), "tgt": " ".join(tgt),
                             "r_star": list(r_star.perm)})
    counts["sow_tuples"] = len(sow_out)
    counts["reap_records"] = len(reap_out)
    return BuildResult(sow_out, reap_out, dict(sorted(counts.items())))


def cmd_build_data(cfg: RunConfig, corpus: str | Path, out_dir: str | Path) -> dict:
    records = read_jsonl(corpus)
    provider = load_provider(cfg.paths.embeddings, cfg.embedding_dim)
    res = build_data(records, provider, cfg)
    out = Path(out_dir)
    write_jsonl(out / "sow_tuples.jsonl", res.sow_tuples)
    write_jsonl(out / "reap_records.jsonl", res.reap_records)
    (out / "stats.json").write_text(json.dumps(res.stats, indent=2, sort_keys=True) + "\n")
    cfg.save(out / "config.yaml")
    return res.stats


# --------------------------------------------------------------------- train

def build_vocab(sentences: Iterable[Sequence[str]], labels: Iterable[str], num_merges: int) -> BpeVocab:
    return bpe_train(sentences, num_merges, labels)


def sow_examples(vocab: BpeVocab, tuples: Sequence[SowTrainingTuple]) -> list[Example]:
    return [sow_example(vocab, t.x_abs, t.pos_tags, t.nt_positions, t.o, t.y_abs) for t in tuples]


def reap_examples(vocab: BpeVocab, records: Sequence[dict]) -> list[Example]:
    return [reap_example(vocab, _tokens(r["src"]), r["r_star"], _tokens(r["tgt"])) for r in records]


def _train_config(cfg: RunConfig, coverage: bool) -> TrainConfig:
    t = cfg.train
    return TrainConfig(lr=t.lr, betas=tuple(t.betas), eps=t.eps, batch_size=t.batch_size,
                       max_epochs=t.max_epochs, patience=t.patience, coverage=coverage,
                       coverage_schedule=tuple((int(a), float(b)) for a, b in t.coverage_schedule),
                       seed=substream(cfg.seed, "train") % (2**31))


def prepare_training(cfg: RunConfig, which: str, data_dir: str | Path):
    which = which.lower()
    data_dir = Path(data_dir)
    if which == "sow":
        tuples = [SowTrainingTuple.from_json(d) for d in read_jsonl(data_dir / "sow_tuples.jsonl")]
        labels = {tag for t in tuples for tag in t.pos_tags}
        for t in tuples:
            labels.update(x for x in t.x_abs if x in _symbols(t))
        vocab = build_vocab([t.x_abs for t in tuples] + [t.y_abs for t in tuples], labels,
                            cfg.train.bpe_merges)
        examples = sow_examples(vocab, tuples)
        mcfg = replace(cfg.sow_model, vocab_size=len(vocab))
    elif which == "reap":
        recs = read_jsonl(data_dir / "reap_records.jsonl")
        vocab = build_vocab([_tokens(r["src"]) for r in recs] + [_tokens(r["tgt"]) for r in recs], (),
                            cfg.train.bpe_merges)
        examples = reap_examples(vocab, recs)
        mcfg = replace(cfg.reap_model, vocab_size=len(vocab))
    else:
        raise ConfigError(f"unknown model {which!r}; expected sow or reap")
    if not examples:
        raise InputError(f"{data_dir}: no {which} training data")
    longest = max(max(len(e.src), len(e.tgt) + 1) for e in examples)
    if longest > mcfg.max_positions:
        raise ConfigError(f"longest {which} sequence has {longest} pieces; "
                          f"max_positions is {mcfg.max_positions}")
    rng = np.random.default_rng(substream(cfg.seed, "split"))
    idx = rng.permutation(len(examples))
    n_valid = int(round(len(examples) * cfg.train.valid_fraction))
    valid = [examples[i] for i in sorted(idx[:n_valid])]
    train = [examples[i] for i in sorted(idx[n_valid:])]
    return vocab, mcfg, train, valid


def _symbols(t: SowTrainingTuple) -> set[str]:
    from .sow import nonterminal_symbols
    return set(nonterminal_symbols(*t.labels))


def cmd_train(cfg: RunConfig, which: str, data_dir: str | Path, out_dir: str | Path,
              resume: bool = False, stop_after: int | None = None) -> Path:
    vocab, mcfg, train, valid = prepare_training(cfg, which, data_dir)
    tcfg = _train_config(cfg, coverage=which.lower() == "reap")
    out_dir = Path(out_dir)
    if resume and (out_dir / "trainer_state.pt").exists():
        trainer = Trainer.resume(out_dir, tcfg)
        if trainer.model.config != mcfg:
            raise ConfigError("checkpoint configuration does not match the data/config")
    else:
        torch.manual_seed(substream(cfg.seed, f"init-{which}") % (2**31))
        trainer = Trainer(TransformerModel(mcfg), vocab, tcfg, out_dir)
    cfg.save(out_dir / "config.yaml")
    trainer.fit(train, valid or None, stop_after=stop_after)
    return out_dir / "best.npz"


# ------------------------------------------------------------------ generate

def _transducer(cfg: RunConfig, sow_checkpoint: str | Path | None, stub: str | None) -> PhraseTransducer:
    if stub == "echo":
        return EchoTransducer()
    if stub == "swap":
        return SwapTransducer()
    if stub:
        raise ConfigError(f"unknown SOW stub {stub!r}")
    if not sow_checkpoint:
        raise ConfigError("a SOW checkpoint (or --sow-stub) is required")
    model, vocab, _ = load_checkpoint(sow_checkpoint)
    return ModelTransducer(model, vocab, beam=cfg.engine.beam)


def cmd_reorder(cfg: RunConfig, inputs: str | Path, out_path: str | Path,
                sow_checkpoint=None, stub: str | None = None) -> int:
    transducer = _transducer(cfg, sow_checkpoint, stub)
    provider = load_provider(cfg.paths.embeddings, cfg.embedding_dim)
    engine = SowEngine(transducer, provider, cfg.engine.engine_config())
    out = []
    for rec in read_jsonl(inputs):
        try:
            tree = _source_tree(rec)
        except (KeyError, FormatError) as e:
            log.warning("record %s skipped: %s", rec.get("id"), e)
            continue
        for r in engine.reorder(tree):
            out.append(reordering_report(rec.get("id"), r))
    return write_jsonl(out_path, out)


def generate_records(records: Sequence[dict], engine: SowEngine, generator: ReapGenerator,
                     cfg: RunConfig, scorer=None, system: str = "sow-reap") -> list[dict]:
    scorer = scorer or metrics.OverlapScorer()
    out = []
    for n, rec in enumerate(records):
        try:
            tree = _source_tree(rec)
        except (KeyError, FormatError) as e:
            log.warning("record %s skipped: %s", rec.get("id"), e)
            continue
        tokens = tree.words()
        cands = []
        for j, r in enumerate(engine.reorder(tree)):
            seed = substream(cfg.seed, f"sample/{rec.get('id', n)}/{j}") % (2**31)
            para = generator.generate(tokens, r, method=cfg.engine.decode, top_k=cfg.engine.top_k,
                                      beam=cfg.engine.beam, seed=seed)
            cands.append({"reordering": reordering_report(rec.get("id"), r), "paraphrase": " ".join(para)})
        _, flags, frac = metrics.rejection_filter(tokens, [c["paraphrase"].split() for c in cands], scorer,
                                                  cfg.eval.rejection_threshold)
        for c, f in zip(cands, flags):
            c["kept"] = bool(f)
        out.append({"id": rec.get("id"), "system": system, "input": " ".join(tokens),
                    "candidates": cands, "rejected_fraction": frac})
    return out


def cmd_generate(cfg: RunConfig, inputs: str | Path, out_path: str | Path, reap_checkpoint,
                 sow_checkpoint=None, stub: str | None = None) -> int:
    transducer = _transducer(cfg, sow_checkpoint, stub)
    provider = load_provider(cfg.paths.embeddings, cfg.embedding_dim)
    engine = SowEngine(transducer, provider, cfg.engine.engine_config())
    model, vocab, _ = load_checkpoint(reap_checkpoint)
    torch.manual_seed(substream(cfg.seed, "generate") % (2**31))
    recs = generate_records(read_jsonl(inputs), engine, ReapGenerator(model, vocab), cfg)
    n = write_jsonl(out_path, recs)
    cfg.save(Path(out_path).parent / "config.yaml")
    return n


# ------------------------------------------------------------------ evaluate

def quality_diversity(gens: Sequence[dict], refs: dict[str, list[str]], cfg: RunConfig) -> dict:
    """Oracle quality over all candidates, diversity over kept candidates."""
    best_bleu, refs_list = [], []
    r1, r2, rl, sent_bleu = [], [], [], []
    self_bleu, self_wer = [], []
    n_cands = n_rejected = 0
    for g in gens:
        ref = refs[g["id"]]
        cands = [c["paraphrase"].split() for c in g["candidates"]]
        if not cands:
            continue
        i, s = metrics.oracle_best(cands, ref, "BLEU")
        best_bleu.append(cands[i])
        refs_list.append(ref)
        sent_bleu.append(s)
        r1.append(metrics.oracle_best(cands, ref, "ROUGE1")[1])
        r2.append(metrics.oracle_best(cands, ref, "ROUGE2")[1])
        rl.append(metrics.oracle_best(cands, ref, "ROUGEL")[1])
        kept = [c for c, cc in zip(cands, g["candidates"]) if cc.get("kept", True)]
        n_cands += len(cands)
        n_rejected += len(cands) - len(kept)
        sb = metrics.pairwise_diversity(kept, "BLEU")
        sw = metrics.pairwise_diversity(kept, "WER")
        if sb is not None:
            self_bleu.append(sb)
            self_wer.append(sw)

    def mean(xs):
        return float(np.mean(xs)) if xs else None

    return {
        "oracle_bleu": metrics.corpus_bleu(best_bleu, refs_list) if best_bleu else None,
        "rouge1": mean(r1),
        "rouge2": mean(r2),
        "rougeL": mean(rl),
        "pct_rejected": 100.0 * n_rejected / n_cands if n_cands else None,
        "self_bleu": mean(self_bleu),
        "self_wer": mean(self_wer),
        "n_sentences": len(best_bleu),
        "_sentence_bleu": sent_bleu,
    }


def random_orderings(tree: ConstituencyTree, n: int, rng: np.random.Generator) -> list[Reordering]:
    """Shuffle the children of every node, top-down."""

    def walk(node):
        if node.is_leaf:
            return [node.start]
        kids = list(node.children)
        order = rng.permutation(len(kids))
        return [i for k in order for i in walk(kids[k])]

    off = tree.start - 1
    return [Reordering(tuple(i - off for i in walk(tree))) for _ in range(n)]


def ordering_comparison(refs: Sequence[dict], sow_orderings: dict, generator: ReapGenerator,
                        cfg: RunConfig) -> dict:
    """Oracle perplexity and oracle BLEU of the reference under four ordering strategies."""
    rng = np.random.default_rng(substream(cfg.seed, "random-orderings"))
    systems = {"monotone": [], "random": [], "sow": [], "ground_truth": []}
    provider = load_provider(cfg.paths.embeddings, cfg.embedding_dim)
    items = []
    for r in refs:
        tree = parse_ptb(r["source_parse"])
        src, tgt = tree.words(), _tokens(r["target"])
        dep = parse_dependencies(r["source_dep"])
        gt = derive_pseudo_ground_truth(dep, align_words(src, tgt, provider))
        sets = {
            "monotone": [Reordering.identity(len(src))],
            "random": random_orderings(tree, cfg.eval.random_orderings, rng),
            "sow": sow_orderings.get(r["id"]) or [Reordering.identity(len(src))],
            "ground_truth": [gt],
        }
        items.append((src, tgt, sets))
    out = {}
    for name in systems:
        ppl, bleu_best = [], []
        for src, tgt, sets in items:
            perms = [x.perm for x in sets[name]]
            ppl.append(min(generator.perplexity(src, perms, tgt)))
            outs = generator.generate_batch([(src, p) for p in perms])
            bleu_best.append(metrics.oracle_best(outs, tgt, "BLEU")[1])
        out[name] = {"oracle_ppl": float(np.mean(ppl)) if ppl else None,
                     "oracle_bleu": float(np.mean(bleu_best)) if bleu_best else None}
    return out


def compliance(refs: Sequence[dict], generator: ReapGenerator, provider: EmbeddingProvider,
               bins: int = 10) -> dict[str, list[metrics.CurvePoint]]:
    """Generated-vs-target rearrangement curves for r* and monotone conditioning."""
    items = []
    for r in refs:
        src = parse_ptb(r["source_parse"]).words() if r.get("source_parse") else _tokens(r["source"])
        tgt = _tokens(r["target"])
        if len(src) < 2:
            continue
        dep = parse_dependencies(r["source_dep"])
        gt = derive_pseudo_ground_truth(dep, align_words(src, tgt, provider))
        items.append((src, tgt, gt))
    curves = {}
    for name in ("r_star", "monotone"):
        perms = [gt.perm if name == "r_star" else tuple(range(1, len(src) + 1)) for src, _, gt in items]
        outs = generator.generate_batch([(src, p) for (src, _, _), p in zip(items, perms)])
        recs = []
        for (src, tgt, _), out in zip(items, outs):
            recs.append((reordering_tau(src, tgt, provider),
                         reordering_tau(src, out, provider) if out else 1.0))
        curves[name] = metrics.compliance_curve(recs, bins)
    return curves


def cmd_evaluate(cfg: RunConfig, generations: str | Path, references: str | Path, out_dir: str | Path,
                 reap_checkpoint=None) -> dict:
    gens = read_jsonl(generations)
    refs = read_jsonl(references)
    ref_by_id = {r["id"]: r for r in refs}
    missing = sorted({str(g["id"]) for g in gens} - {str(k) for k in ref_by_id})
    if missing:
        raise InputError(f"generations without references: {', '.join(missing)}")
    ref_tokens = {k: _tokens(v["target"]) for k, v in ref_by_id.items()}
    by_system: dict[str, list] = {}
    for g in gens:
        by_system.setdefault(g.get("system", "sow-reap"), []).append(g)
    report: dict = {"systems": {}, "config_seed": cfg.seed}
    sentence_scores = {}
    for name in sorted(by_system):
        block = quality_diversity(by_system[name], ref_tokens, cfg)
        sentence_scores[name] = block.pop("_sentence_bleu")
        report["systems"][name] = block
    names = sorted(by_system)
    if len(names) > 1:
        base = names[0]
        report["bootstrap"] = {
            f"{base}>{other}": metrics.paired_bootstrap(
                sentence_scores[base], sentence_scores[other], cfg.eval.bootstrap_resamples,
                substream(cfg.seed, "bootstrap") % (2**31))
            for other in names[1:] if len(sentence_scores[other]) == len(sentence_scores[base])
        }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if reap_checkpoint:
        model, vocab, _ = load_checkpoint(reap_checkpoint)
        gen = ReapGenerator(model, vocab)
        provider = load_provider(cfg.paths.embeddings, cfg.embedding_dim)
        usable = [ref_by_id[g["id"]] for g in gens
                  if ref_by_id[g["id"]].get("source_dep") and ref_by_id[g["id"]].get("source_parse")]
        usable = list({r["id"]: r for r in usable}.values())
        sow_orderings = {}
        for g in by_system.get("sow-reap", []):
            sow_orderings[g["id"]] = [Reordering(tuple(c["reordering"]["perm"])) for c in g["candidates"]]
        if usable:
            report["ordering_comparison"] = ordering_comparison(usable, sow_orderings, gen, cfg)
            curves = compliance(usable, gen, provider, cfg.eval.bins)
            (out_dir / "compliance.tsv").write_text(metrics.curve_tsv(curves["r_star"]))
            (out_dir / "compliance_monotone.tsv").write_text(metrics.curve_tsv(curves["monotone"]))
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cfg.save(out_dir / "config.yaml")
    return report
