"""Exhaustive-enumeration oracles for small trees.

These sum the explicit joint over every hidden state assignment and every
switch choice. They share no code with the recursive inference and exist
to check it.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from .htmm import HtmmParameters, NodePosteriors
from .trees import LabeledTree

MAX_ASSIGNMENTS = 10**7


class EnumerationTooLarge(ValueError):
    pass


def n_assignments(params: HtmmParameters, tree: LabeledTree) -> int:
    return params.C ** tree.n_nodes * math.prod(max(tree.arity(u), 1) for u in range(tree.n_nodes))


def brute_force_joint(
    params: HtmmParameters,
    tree: LabeledTree,
    states: Sequence[int],
    switches: Sequence[int | None],
) -> float:
    """P(x, Q=states, S=switches). ``switches[u]`` is the 0-based slot for an
    internal node and ``None`` (or -1) for a leaf."""
    U = tree.n_nodes
    if len(states) != U or len(switches) != U:
        raise ValueError("assignment must give one state and one switch entry per node")
    t = params.tables
    p = 1.0
    for u in range(U):
        q = states[u]
        if not 0 <= q < params.C:
            raise ValueError(f"state {q} out of range")
        p *= t.b[q, tree.labels[u]]
        kids = tree.children[u]
        if not kids:
            if switches[u] not in (None, -1):
                raise ValueError(f"leaf {u} cannot carry a switch")
            p *= t.pi[q]
        else:
            s = switches[u]
            if s is None or not 0 <= s < len(kids):
                raise ValueError(f"node {u} needs a switch in 0..{len(kids) - 1}")
            w = t.phi[: len(kids)]
            p *= w[s] / w.sum() * t.A[q, states[kids[s]], s]
    return float(p)


def _switch_choices(tree: LabeledTree):
    ranges = [range(len(ch)) if ch else [-1] for ch in tree.children]
    return itertools.product(*ranges)


def _enumerate(params: HtmmParameters, tree: LabeledTree):
    """Yield ``(switches, states[n, U], joint[n])`` blocks, one per switch choice."""
    if n_assignments(params, tree) > MAX_ASSIGNMENTS:
        raise EnumerationTooLarge(f"{n_assignments(params, tree)} assignments exceed {MAX_ASSIGNMENTS}")
    t = params.tables
    U, C = tree.n_nodes, params.C
    states = np.array(list(itertools.product(range(C), repeat=U)), dtype=np.int64).reshape(-1, U)
    emit = np.ones(len(states))
    for u in range(U):
        emit *= t.b[states[:, u], tree.labels[u]]
        if not tree.children[u]:
            emit *= t.pi[states[:, u]]
    for sw in _switch_choices(tree):
        joint = emit.copy()
        for u, s in enumerate(sw):
            if s < 0:
                continue
            kids = tree.children[u]
            w = t.phi[: len(kids)]
            joint *= w[s] / w.sum() * t.A[states[:, u], states[:, kids[s]], s]
        yield sw, states, joint


def brute_force_marginal(params: HtmmParameters, tree: LabeledTree) -> float:
    return float(sum(joint.sum() for _, _, joint in _enumerate(params, tree)))


def brute_force_posteriors(params: HtmmParameters, tree: LabeledTree) -> NodePosteriors:
    U, C = tree.n_nodes, params.C
    node = np.zeros((U, C))
    edge = np.zeros((U, C, C))
    total = 0.0
    for sw, states, joint in _enumerate(params, tree):
        total += joint.sum()
        for u in range(U):
            node[u] += np.bincount(states[:, u], weights=joint, minlength=C)
            if sw[u] >= 0:
                v = tree.children[u][sw[u]]
                np.add.at(edge[v], (states[:, u], states[:, v]), joint)
    return NodePosteriors(node / total, edge / total, float(np.log(total)), tree)
