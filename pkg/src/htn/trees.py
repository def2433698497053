"""Labeled ordered rooted trees: parsing, datasets, synthetic sampling, folds.

Trees are stored flat. Nodes are numbered in depth-first pre-order, so a
parent always has a smaller index than its children and iterating the
indices in reverse visits every subtree before its root.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNK_SYMBOL = "<unk>"


class TreeParseError(ValueError):
    """Malformed bracketed tree text."""

    def __init__(self, message: str, offset: int, line: int | None = None):
        self.reason = message
        self.offset = offset
        self.line = line
        where = f"line {line}, offset {offset}" if line is not None else f"offset {offset}"
        super().__init__(f"{message} at {where}")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TreeNode:
    id: int
    label: int
    children: tuple[int, ...]
    parent: int | None


class LabelVocab:
    """Bijection between label strings and dense indices.

    Real symbols occupy ``0..n_labels-1``. The UNK symbol always lives at
    the final index ``n_labels``, so the emission alphabet a model needs is
    ``size == n_labels + 1``.
    """

    def __init__(self, symbols: Sequence[str] = ()):
        self._symbols: list[str] = []
        self._index: dict[str, int] = {}
        self.frozen = False
        for s in symbols:
            self.add(s)

    def add(self, symbol: str) -> int:
        if symbol in self._index:
            return self._index[symbol]
        if self.frozen:
            raise ValueError("vocabulary is frozen")
        if symbol == UNK_SYMBOL:
            raise ValueError(f"{UNK_SYMBOL!r} is reserved")
        self._index[symbol] = len(self._symbols)
        self._symbols.append(symbol)
        return self._index[symbol]

    def lookup(self, symbol: str, grow: bool = False) -> int:
        idx = self._index.get(symbol)
        if idx is not None:
            return idx
        if grow and not self.frozen:
            return self.add(symbol)
        return self.unk_index

    def symbol(self, index: int) -> str:
        if index == self.unk_index:
            return UNK_SYMBOL
        return self._symbols[index]

    def freeze(self) -> "LabelVocab":
        self.frozen = True
        return self

    @property
    def symbols(self) -> list[str]:
        return list(self._symbols)

    @property
    def n_labels(self) -> int:
        return len(self._symbols)

    @property
    def unk_index(self) -> int:
        return len(self._symbols)

    @property
    def size(self) -> int:
        return len(self._symbols) + 1

    def __len__(self) -> int:
        return self.size

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelVocab) and self._symbols == other._symbols

    def __repr__(self) -> str:
        return f"LabelVocab({self._symbols!r})"


class LabeledTree:
    """Ordered rooted tree with one discrete label per node.

    ``children[u]`` is the ordered tuple of child indices of node ``u``;
    the position of a child in that tuple is its slot ``l`` (0-based here).
    """

    __slots__ = ("labels", "children", "parent", "position", "label_class", "_csr",
                 "leaf_mask", "arity_array", "position_array")

    def __init__(
        self,
        labels: Sequence[int],
        children: Sequence[Sequence[int]],
        label_class: int | None = None,
    ):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("a tree needs at least one node")
        n = labels.size
        if len(children) != n:
            raise ValueError("children list length must equal node count")
        children = tuple(tuple(int(c) for c in ch) for ch in children)
        parent = [-1] * n
        position = [-1] * n
        for u, ch in enumerate(children):
            for l, c in enumerate(ch):
                if not 0 <= c < n or c == 0:
                    raise ValueError(f"node {u} has invalid child {c}")
                if parent[c] != -1:
                    raise ValueError(f"node {c} has more than one parent")
                if c <= u:
                    raise ValueError("nodes must be numbered in pre-order (child index > parent index)")
                parent[c] = u
                position[c] = l
        if any(p == -1 for p in parent[1:]):
            raise ValueError("tree is not connected")
        labels.setflags(write=False)
        self.labels = labels
        self.children = children
        self.parent = tuple(parent)
        self.position = tuple(position)
        self.label_class = label_class
        self._csr = None
        self.arity_array = np.array([len(ch) for ch in children], dtype=np.int64)
        self.leaf_mask = self.arity_array == 0
        self.position_array = np.array(position, dtype=np.int64)
        for a in (self.arity_array, self.leaf_mask, self.position_array):
            a.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return int(self.labels.size)

    @property
    def root(self) -> int:
        return 0

    def arity(self, u: int) -> int:
        return len(self.children[u])

    @property
    def max_arity(self) -> int:
        return max(len(ch) for ch in self.children)

    @property
    def leaves(self) -> list[int]:
        return [u for u, ch in enumerate(self.children) if not ch]

    @property
    def internal(self) -> list[int]:
        return [u for u, ch in enumerate(self.children) if ch]

    @property
    def nodes(self) -> list[TreeNode]:
        return [
            TreeNode(u, int(self.labels[u]), self.children[u], None if u == 0 else self.parent[u])
            for u in range(self.n_nodes)
        ]

    def arrays(self):
        """Flat int32 view used by the inference kernels.

        Returns ``(labels, child_ptr, child_idx)`` where the children of
        ``u`` are ``child_idx[child_ptr[u]:child_ptr[u+1]]`` in slot order.
        """
        if self._csr is None:
            ptr = np.zeros(self.n_nodes + 1, dtype=np.int32)
            ptr[1:] = np.cumsum([len(ch) for ch in self.children])
            idx = np.fromiter((c for ch in self.children for c in ch), dtype=np.int32, count=int(ptr[-1]))
            lab = self.labels.astype(np.int32)
            for a in (ptr, idx, lab):
                a.setflags(write=False)
            self._csr = (lab, ptr, idx)
        return self._csr

    def with_class(self, label_class: int | None) -> "LabeledTree":
        return LabeledTree(self.labels, self.children, label_class)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, LabeledTree)
            and self.children == other.children
            and np.array_equal(self.labels, other.labels)
            and self.label_class == other.label_class
        )

    def __repr__(self) -> str:
        return f"LabeledTree(U={self.n_nodes}, class={self.label_class})"


def _tokenize(text: str) -> Iterator[tuple[str, int]]:
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            yield ch, i
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            yield text[i:j], i
            i = j
    yield "", n


def parse_tree(text: str, vocab: LabelVocab, grow_vocab: bool = True, label_class: int | None = None) -> LabeledTree:
    """Parse ``(label child1 child2 ...)`` into a :class:`LabeledTree`."""
    tokens = _tokenize(text)
    labels: list[int] = []
    children: list[list[int]] = []
    stack: list[int] = []

    tok, off = next(tokens)
    if tok != "(":
        raise TreeParseError("expected '('", off)
    while True:
        # tok == "(": open a node, next token must be its label
        tok, off = next(tokens)
        if tok in ("(", ")", ""):
            raise TreeParseError("empty node (missing label)" if tok != "" else "unexpected end of input", off)
        u = len(labels)
        labels.append(vocab.lookup(tok, grow=grow_vocab))
        children.append([])
        if stack:
            children[stack[-1]].append(u)
        stack.append(u)
        tok, off = next(tokens)
        while tok == ")":
            stack.pop()
            tok, off = next(tokens)
            if not stack:
                if tok != "":
                    raise TreeParseError("trailing input after tree", off)
                return LabeledTree(labels, children, label_class)
        if tok == "":
            raise TreeParseError("unexpected end of input", off)
        if tok != "(":
            raise TreeParseError(f"unexpected token {tok!r}", off)


def serialize_tree(tree: LabeledTree, vocab: LabelVocab) -> str:
    def rec(u: int) -> str:
        head = vocab.symbol(int(tree.labels[u]))
        if not tree.children[u]:
            return f"({head})"
        return f"({head} " + " ".join(rec(c) for c in tree.children[u]) + ")"

    return rec(0)


@dataclass
class Dataset:
    trees: list[LabeledTree]
    vocab: LabelVocab
    K: int
    L: int

    def __post_init__(self):
        self.validate()

    @property
    def N(self) -> int:
        return len(self.trees)

    @property
    def V(self) -> int:
        """Number of distinct real labels (excludes UNK)."""
        return self.vocab.n_labels

    @property
    def alphabet_size(self) -> int:
        """Emission alphabet a model needs, UNK included."""
        return self.vocab.size

    @property
    def classes(self) -> np.ndarray:
        return np.array([t.label_class for t in self.trees], dtype=np.int64)

    def validate(self) -> None:
        for n, t in enumerate(self.trees):
            if t.label_class is not None and not 0 <= t.label_class < self.K:
                raise DatasetError(f"tree {n}: class {t.label_class} outside 0..{self.K - 1}")
            if t.labels.min() < 0 or t.labels.max() >= self.vocab.size:
                raise DatasetError(f"tree {n}: label index outside vocabulary")
            if t.max_arity > self.L:
                raise DatasetError(f"tree {n}: arity {t.max_arity} exceeds L={self.L}")

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.trees[i] for i in indices], self.vocab, self.K, self.L)

    def __len__(self) -> int:
        return len(self.trees)


def load_dataset(path: str | Path, vocab: LabelVocab | None = None, K: int | None = None, L: int | None = None) -> Dataset:
    """Read ``<class_id>\\t<bracketed tree>`` lines.

    With a prebuilt (frozen) ``vocab``, unseen labels map to UNK; otherwise
    a new vocabulary is grown in first-seen order and frozen afterwards.
    """
    path = Path(path)
    grow = vocab is None
    if vocab is None:
        vocab = LabelVocab()
    trees: list[LabeledTree] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cls_text, sep, tree_text = line.partition("\t")
            if not sep:
                raise DatasetError(f"line {lineno}: missing tab separator")
            try:
                cls = int(cls_text)
            except ValueError:
                raise DatasetError(f"line {lineno}: non-integer class id {cls_text!r}") from None
            if cls < 0:
                raise DatasetError(f"line {lineno}: negative class id")
            try:
                trees.append(parse_tree(tree_text, vocab, grow_vocab=grow, label_class=cls))
            except TreeParseError as exc:
                raise TreeParseError(exc.reason, exc.offset, lineno) from None
    if not trees:
        raise DatasetError("empty dataset")
    vocab.freeze()
    k_observed = 1 + max(t.label_class for t in trees)
    present = {t.label_class for t in trees}
    missing = sorted(set(range(k_observed)) - present)
    if missing:
        warnings.warn(f"{path}: classes {missing} have no samples", stacklevel=2)
    l_observed = max(t.max_arity for t in trees)
    return Dataset(trees, vocab, max(K or 0, k_observed), max(L or 0, l_observed, 1))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in dataset.trees:
            fh.write(f"{t.label_class}\t{serialize_tree(t, dataset.vocab)}\n")


@dataclass(frozen=True)
class SkeletonSpec:
    """Tree-shape sampler: node count uniform in ``[min_nodes, max_nodes]``,
    each internal node's arity uniform in ``1..L``."""

    min_nodes: int = 1
    max_nodes: int = 10
    L: int = 2

    def __post_init__(self):
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ValueError("need 1 <= min_nodes <= max_nodes")
        if self.L < 1:
            raise ValueError("L must be >= 1")


def sample_skeleton(spec: SkeletonSpec, rng: np.random.Generator) -> list[list[int]]:
    """Draw an ordered tree shape as a pre-order children list."""
    target = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    # grow breadth-first, then renumber to pre-order
    kids: list[list[int]] = [[]]
    frontier = [0]
    count = 1
    while count < target:
        if not frontier:
            break
        u = frontier.pop(0)
        a = int(rng.integers(1, spec.L + 1))
        a = min(a, target - count)
        for _ in range(a):
            kids.append([])
            kids[u].append(count)
            frontier.append(count)
            count += 1
    order: list[int] = []
    todo = [0]
    while todo:
        u = todo.pop()
        order.append(u)
        todo.extend(reversed(kids[u]))
    rank = {u: i for i, u in enumerate(order)}
    return [[rank[c] for c in kids[u]] for u in order]


@dataclass
class SyntheticSpec:
    models: list  # list[HtmmParameters], one per class
    skeleton: SkeletonSpec = field(default_factory=SkeletonSpec)
    samples_per_class: int | Sequence[int] = 100
    symbols: Sequence[str] | None = None


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Sample trees class by class from bottom-up HTMMs.

    Each sample draws a skeleton, then states bottom-up: leaves from the
    prior, each internal node picks a switching child among its present
    children (switch weights renormalized) and draws its state from that
    child's column of the transition table. Labels come from the emission
    row of each node's state.
    """
    from .htmm import materialize

    models = list(spec.models)
    if not models:
        raise ValueError("need at least one class model")
    C, L, V = models[0].C, models[0].L, models[0].V
    for m in models:
        if (m.C, m.L, m.V) != (C, L, V):
            raise ValueError("class models must share C, L and V")
    if spec.skeleton.L > L:
        raise ValueError("skeleton outdegree exceeds model L")
    counts = spec.samples_per_class
    if isinstance(counts, int):
        counts = [counts] * len(models)
    symbols = list(spec.symbols) if spec.symbols is not None else [f"s{v}" for v in range(V)]
    if len(symbols) != V:
        raise ValueError("symbols must have length V")
    vocab = LabelVocab(symbols).freeze()

    rng = np.random.default_rng(seed)
    trees: list[LabeledTree] = []
    for k, (model, n_k) in enumerate(zip(models, counts)):
        tab = materialize(model)
        cdf_b = np.cumsum(tab.b, axis=1)
        for _ in range(n_k):
            kids = sample_skeleton(spec.skeleton, rng)
            U = len(kids)
            states = np.zeros(U, dtype=np.int64)
            for u in range(U - 1, -1, -1):
                ch = kids[u]
                if not ch:
                    states[u] = _draw(rng, tab.pi)
                else:
                    w = tab.phi[: len(ch)]
                    s = _draw(rng, w / w.sum())
                    states[u] = _draw(rng, tab.A[:, states[ch[s]], s])
            labels = [int(np.searchsorted(cdf_b[q], rng.random() * cdf_b[q, -1], side="right")) for q in states]
            labels = [min(x, V - 1) for x in labels]
            trees.append(LabeledTree(labels, kids, k))
    return Dataset(trees, vocab, len(models), L)


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(p) - 1)


def stratified_folds(dataset: Dataset | Sequence[int], k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold split; returns ``(train_idx, test_idx)`` per fold.

    Within each class the members are shuffled and dealt round-robin, so
    per-class fold counts differ by at most one. The dealing offset rotates
    between classes to keep total fold sizes balanced.
    """
    if k < 2:
        raise ValueError("need k >= 2 folds")
    y = dataset.classes if isinstance(dataset, Dataset) else np.asarray(dataset)
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        if members.size < k:
            raise ValueError(f"class {cls} has {members.size} members, fewer than k={k}")
        members = rng.permutation(members)
        assignment[members] = (np.arange(members.size) + offset) % k
        offset = (offset + members.size) % k
    idx = np.arange(len(y))
    return [(idx[assignment != f], idx[assignment == f]) for f in range(k)]
