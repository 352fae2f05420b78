"""Parse-tree ingestion, tree navigation and permutation algebra.

Token indices are 1-based everywhere. A :class:`Reordering` stores ``perm``
such that ``output[i] = seq[perm[i] - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence


class FormatError(ValueError):
    """Malformed tree or dependency input."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class PermutationError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    surface: str
    index: int
    pos_tag: str = ""

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"token index must be >= 1, got {self.index}")
        if not self.surface:
            raise ValueError("token surface must be non-empty")


@dataclass(frozen=True, eq=False)
class ConstituencyTree:
    label: str
    children: tuple[ConstituencyTree, ...]
    span: tuple[int, int]
    leaf_token: Token | None = None

    @property
    def is_leaf(self) -> bool:
        return self.leaf_token is not None

    @property
    def start(self) -> int:
        return self.span[0]

    @property
    def end(self) -> int:
        return self.span[1]

    def __len__(self) -> int:
        return self.span[1] - self.span[0] + 1

    def leaves(self) -> list[ConstituencyTree]:
        if self.is_leaf:
            return [self]
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def tokens(self) -> list[Token]:
        return [leaf.leaf_token for leaf in self.leaves()]

    def words(self) -> list[str]:
        return [tok.surface for tok in self.tokens()]

    def subtrees(self) -> Iterator[ConstituencyTree]:
        """Pre-order traversal, including self."""
        yield self
        for child in self.children:
            yield from child.subtrees()

    def strip_unary(self) -> ConstituencyTree:
        """Descend through unary chains to the lowest node with the same yield."""
        node = self
        while not node.is_leaf and len(node.children) == 1:
            node = node.children[0]
        return node

    def to_ptb(self) -> str:
        if self.is_leaf:
            return f"({self.label} {self.leaf_token.surface})"
        return f"({self.label} " + " ".join(c.to_ptb() for c in self.children) + ")"

    def __repr__(self):
        return f"ConstituencyTree({self.label!r}, span={self.span})"


def _tokenize_ptb(text: str) -> list[tuple[str, int]]:
    out = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            out.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            out.append((text[i:j], i))
            i = j
    return out


def parse_ptb(text: str) -> ConstituencyTree:
    """Parse a Penn-Treebank bracketing into a tree with 1-based token spans.

    Accepts an unlabeled outer wrapper ``( (S ...) )`` as produced by some
    treebank dumps; the wrapper is dropped.
    """
    toks = _tokenize_ptb(text)
    if not toks:
        raise FormatError("empty tree string", 0)
    pos = 0
    counter = [0]

    def parse_node() -> ConstituencyTree:
        nonlocal pos
        if pos >= len(toks):
            raise FormatError("unexpected end of input", len(text))
        tok, off = toks[pos]
        if tok != "(":
            raise FormatError(f"expected '(' but found {tok!r}", off)
        pos += 1
        if pos >= len(toks):
            raise FormatError("unbalanced brackets", len(text))
        label = ""
        if toks[pos][0] not in "()":
            label = toks[pos][0]
            pos += 1
        if pos >= len(toks):
            raise FormatError("unbalanced brackets", len(text))
        nxt, nxt_off = toks[pos]
        if nxt == ")":
            raise FormatError("empty constituent", off)
        if nxt != "(":
            # preterminal: (TAG word)
            pos += 1
            if pos >= len(toks) or toks[pos][0] != ")":
                where = toks[pos][1] if pos < len(toks) else len(text)
                raise FormatError("preterminal must contain exactly one word", where)
            pos += 1
            if not label:
                raise FormatError("preterminal without a tag", off)
            counter[0] += 1
            i = counter[0]
            return ConstituencyTree(label, (), (i, i), Token(nxt, i, label))
        children = []
        while pos < len(toks) and toks[pos][0] == "(":
            children.append(parse_node())
        if pos >= len(toks):
            raise FormatError("unbalanced brackets", len(text))
        if toks[pos][0] != ")":
            raise FormatError(f"stray token {toks[pos][0]!r}", toks[pos][1])
        pos += 1
        if not label:
            if len(children) == 1:
                return children[0]
            label = "ROOT"
        return ConstituencyTree(label, tuple(children), (children[0].start, children[-1].end))

    tree = parse_node()
    if pos != len(toks):
        raise FormatError("trailing input after tree", toks[pos][1])
    return tree


def tree_from_tokens(tokens: Sequence[str], tags: Sequence[str] | None = None,
                     label: str = "S") -> ConstituencyTree:
    """Flat tree over ``tokens``; used when no parse is available."""
    tags = tags or ["X"] * len(tokens)
    leaves = tuple(ConstituencyTree(t, (), (i, i), Token(w, i, t))
                   for i, (w, t) in enumerate(zip(tokens, tags), start=1))
    return ConstituencyTree(label, leaves, (1, len(tokens)))


def yield_of(node: ConstituencyTree) -> list[Token]:
    return node.tokens()


@dataclass(frozen=True)
class DependencyTree:
    tokens: tuple[Token, ...]
    head: dict[int, int]

    def __post_init__(self):
        n = len(self.tokens)
        roots = [i for i, h in self.head.items() if h == 0]
        if len(roots) != 1:
            raise FormatError(f"expected exactly one root, found {len(roots)}")
        for i, h in self.head.items():
            if not 0 <= h <= n or h == i:
                raise FormatError(f"head {h} of token {i} out of range")
        for i in self.head:
            seen = set()
            j = i
            while j != 0:
                if j in seen:
                    raise FormatError(f"cycle through token {i}")
                seen.add(j)
                j = self.head[j]

    @property
    def root(self) -> int:
        return next(i for i, h in self.head.items() if h == 0)

    def children(self, i: int) -> list[int]:
        return sorted(j for j, h in self.head.items() if h == i)

    def subtree(self, i: int) -> list[int]:
        out = [i]
        for c in self.children(i):
            out.extend(self.subtree(c))
        return sorted(out)

    def traverse(self) -> list[int]:
        """Depth-first pre-order from the root."""
        order = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            order.append(i)
            stack.extend(reversed(self.children(i)))
        return order

    def to_conll(self) -> str:
        return "\n".join(f"{t.index}\t{t.surface}\t{t.pos_tag}\t{self.head[t.index]}"
                         for t in self.tokens)


def parse_dependencies(text: str) -> DependencyTree:
    """Parse ``index<TAB>surface<TAB>pos<TAB>head`` lines for one sentence."""
    tokens, head = [], {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 4:
            raise FormatError(f"line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            idx, h = int(fields[0]), int(fields[3])
        except ValueError:
            raise FormatError(f"line {lineno}: non-integer index or head") from None
        if idx != len(tokens) + 1:
            raise FormatError(f"line {lineno}: token index {idx} out of sequence")
        tokens.append(Token(fields[1], idx, fields[2]))
        head[idx] = h
    if not tokens:
        raise FormatError("no tokens")
    return DependencyTree(tuple(tokens), head)


def read_dependency_file(text: str) -> list[DependencyTree]:
    blocks, cur = [], []
    for line in text.splitlines():
        if line.strip():
            cur.append(line)
        elif cur:
            blocks.append("\n".join(cur))
            cur = []
    if cur:
        blocks.append("\n".join(cur))
    return [parse_dependencies(b) for b in blocks]


def check_permutation(perm: Sequence[int], n: int | None = None) -> None:
    n = len(perm) if n is None else n
    if len(perm) != n or sorted(perm) != list(range(1, n + 1)):
        raise PermutationError(f"not a permutation of 1..{n}: {list(perm)}")


def is_permutation(perm: Sequence[int]) -> bool:
    return sorted(perm) == list(range(1, len(perm) + 1))


@dataclass(frozen=True)
class Reordering:
    perm: tuple[int, ...]
    score: float = 0.0
    provenance: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "perm", tuple(int(p) for p in self.perm))
        check_permutation(self.perm)

    @classmethod
    def identity(cls, n: int, score: float = 0.0) -> Reordering:
        return cls(tuple(range(1, n + 1)), score)

    @property
    def n_rules(self) -> int:
        return len(self.provenance)

    def is_identity(self) -> bool:
        return self.perm == tuple(range(1, len(self.perm) + 1))

    def inverse(self) -> Reordering:
        return Reordering(inverse_permutation(self.perm), self.score)

    def target_positions(self) -> list[int]:
        """Position (1-based) each source token takes in the reordered output."""
        return list(inverse_permutation(self.perm))


def inverse_permutation(perm: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(perm)
    for out_pos, src in enumerate(perm, start=1):
        inv[src - 1] = out_pos
    return tuple(inv)


def apply_permutation(seq: Sequence, perm: Reordering | Sequence[int]) -> list:
    p = perm.perm if isinstance(perm, Reordering) else tuple(perm)
    if len(seq) != len(p):
        raise PermutationError(f"length mismatch: sequence {len(seq)} vs permutation {len(p)}")
    check_permutation(p)
    return [seq[i - 1] for i in p]
