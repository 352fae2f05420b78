"""Toy paraphrase corpus: a small headed grammar whose targets permute constituents.

Each sentence uses every word at most once, so word alignment with
context-free vectors is exact and pseudo-ground-truth reorderings recover
the generating permutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEXICON = {
    "DT": "the a this that every some each no any his her its our their my your".split(),
    "NN": ("dog cat bird fox cow pig owl bee ant eel yak emu ram hen elk "
           "cub kid man boy girl king poet monk chef nurse judge pilot clerk baker mayor").split(),
    "JJ": "red big old shy tall calm wild wise kind bold pale dark".split(),
    "VBD": "saw fed met hid led hit bit won lost kept found held".split(),
    "VB": "see feed meet hide lead greet bite win lose keep find hold".split(),
    "MD": "will can may".split(),
    "IN": "in on at near with by under over".split(),
    "SUB": "if because when although".split(),
}


@dataclass
class Node:
    label: str
    children: list = field(default_factory=list)
    head: int = 0
    word: str | None = None

    def leaves(self):
        if self.word is not None:
            return [self]
        return [leaf for c in self.children for leaf in c.leaves()]

    def ptb(self) -> str:
        if self.word is not None:
            return f"({self.label} {self.word})"
        return f"({self.label} " + " ".join(c.ptb() for c in self.children) + ")"


class _Sampler:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.pools = {k: list(v) for k, v in LEXICON.items()}
        for pool in self.pools.values():
            rng.shuffle(pool)

    def word(self, cat: str) -> str:
        return self.pools[cat].pop()

    def leaf(self, tag: str, cat: str | None = None) -> Node:
        return Node(tag, word=self.word(cat or tag))

    def np(self, allow_pp: bool) -> Node:
        r = self.rng.random()
        if allow_pp and r < 0.25:
            return Node("NP", [self.leaf("DT"), self.leaf("NN"), self.pp(False)], head=1)
        if r < 0.6:
            return Node("NP", [self.leaf("DT"), self.leaf("JJ"), self.leaf("NN")], head=2)
        return Node("NP", [self.leaf("DT"), self.leaf("NN")], head=1)

    def pp(self, allow_pp: bool = True) -> Node:
        return Node("PP", [self.leaf("IN"), self.np(allow_pp)], head=0)

    def vp(self) -> Node:
        r = self.rng.random()
        if r < 0.35:
            return Node("VP", [self.leaf("VBD"), self.np(True), self.pp(False)], head=0)
        if r < 0.65:
            return Node("VP", [self.leaf("MD"), self.leaf("VB"), self.np(False)], head=1)
        return Node("VP", [self.leaf("VBD"), self.np(True)], head=0)

    def clause(self, allow_front: bool) -> Node:
        r = self.rng.random()
        if allow_front and r < 0.3:
            sbar = Node("SBAR", [self.leaf("IN", "SUB"), self.clause(False)], head=1)
            return Node("S", [sbar, Node(",", word=","), self.np(False), self.vp()], head=3)
        if allow_front and r < 0.5:
            return Node("S", [self.pp(False), Node(",", word=","), self.np(False), self.vp()], head=3)
        return Node("S", [self.np(True), self.vp()], head=1)


def _child_labels(node: Node) -> tuple[str, ...]:
    return tuple(c.label for c in node.children)


def _transform(node: Node, rng: np.random.Generator, p: float) -> Node:
    """Copy of ``node`` with syntax-governed child permutations applied top-down."""
    if node.word is not None:
        return Node(node.label, word=node.word)
    kids = [_transform(c, rng, p) for c in node.children]
    labels = _child_labels(node)
    order = list(range(len(kids)))
    r = rng.random() / (2 * p) if p > 0 else 1.0
    if node.label == "S" and len(labels) == 4 and r < 0.6:
        order = [2, 3, 1, 0]
    elif node.label == "S" and labels == ("NP", "VP") and r < 0.3:
        order = [1, 0]
    elif node.label == "NP" and labels == ("DT", "NN", "PP") and r < 0.5:
        order = [2, 0, 1]
    elif node.label == "NP" and labels == ("DT", "JJ", "NN") and r < 0.3:
        order = [0, 2, 1]
    elif node.label == "VP" and labels == ("VBD", "NP", "PP") and r < 0.5:
        order = [2, 0, 1]
    elif node.label == "VP" and labels == ("MD", "VB", "NP") and r < 0.3:
        order = [2, 0, 1]
    out = Node(node.label, [kids[i] for i in order], head=order.index(node.head))
    return out


def _dependencies(root: Node) -> list[tuple[int, str, str, int]]:
    leaves = root.leaves()
    index = {id(leaf): i + 1 for i, leaf in enumerate(leaves)}
    head_of: dict[int, int] = {}

    def lexical_head(node: Node) -> int:
        if node.word is not None:
            return index[id(node)]
        heads = [lexical_head(c) for c in node.children]
        h = heads[node.head]
        for i, hc in enumerate(heads):
            if i != node.head:
                head_of[hc] = h
        return h

    root_head = lexical_head(root)
    head_of[root_head] = 0
    return [(i + 1, leaf.word, leaf.label, head_of[i + 1]) for i, leaf in enumerate(leaves)]


def generate_pair(rng: np.random.Generator, flip_rate: float = 0.5) -> dict:
    src = _Sampler(rng).clause(True)
    tgt = _transform(src, rng, flip_rate)
    dep = _dependencies(src)
    return {
        "source": " ".join(leaf.word for leaf in src.leaves()),
        "target": " ".join(leaf.word for leaf in tgt.leaves()),
        "source_parse": src.ptb(),
        "target_parse": tgt.ptb(),
        "source_dep": "\n".join(f"{i}\t{w}\t{t}\t{h}" for i, w, t, h in dep),
        "para_score": 1.0,
    }


def generate_corpus(n: int, seed: int = 0, flip_rate: float = 0.5) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        rec = generate_pair(rng, flip_rate)
        rec["id"] = f"syn-{seed}-{i}"
        out.append(rec)
    return out
