"""Bottom-up hidden tree Markov model in a softmax basis.

One model holds four groups of unconstrained reals. Each group maps to a
probability table through a softmax over its normalization axis:

    A[i, j, l]  P(parent state i | child in slot l has state j), over i
    pi[i]       leaf state prior, over i
    b[i, v]     emission of label v from state i, over v
    phi[l]      switching-parent weight of slot l, over l

A node with ``a < L`` children mixes only over its present slots, with
``phi`` renormalized over ``0..a-1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from . import _backend
from .trees import LabeledTree

EM_SMOOTHING = 1e-8
INIT_STD = 0.1


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ProbTables:
    A: np.ndarray
    pi: np.ndarray
    b: np.ndarray
    phi: np.ndarray


@dataclass(frozen=True, eq=False)
class HtmmParameters:
    """Free parameters of one model; also used to carry gradients of the
    same shapes."""

    lambda_A: np.ndarray
    lambda_pi: np.ndarray
    lambda_b: np.ndarray
    lambda_phi: np.ndarray

    def __post_init__(self):
        for name in ("lambda_A", "lambda_pi", "lambda_b", "lambda_phi"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        C, C2, L = self.lambda_A.shape
        if C != C2 or self.lambda_pi.shape != (C,) or self.lambda_b.shape[0] != C or self.lambda_b.ndim != 2:
            raise ValueError("inconsistent parameter shapes")
        if self.lambda_phi.shape != (L,):
            raise ValueError("lambda_phi must have length L")
        if not all(np.isfinite(g).all() for g in self.groups()):
            raise ValueError("parameters must be finite")

    @property
    def C(self) -> int:
        return self.lambda_A.shape[0]

    @property
    def L(self) -> int:
        return self.lambda_A.shape[2]

    @property
    def V(self) -> int:
        return self.lambda_b.shape[1]

    def groups(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.lambda_A, self.lambda_pi, self.lambda_b, self.lambda_phi

    @cached_property
    def tables(self) -> ProbTables:
        return materialize(self)

    @property
    def size(self) -> int:
        return sum(g.size for g in self.groups())

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.groups()])

    def unflat(self, vec: np.ndarray) -> "HtmmParameters":
        out, k = [], 0
        for g in self.groups():
            out.append(np.asarray(vec[k : k + g.size]).reshape(g.shape))
            k += g.size
        return HtmmParameters(*out)

    @classmethod
    def uniform(cls, C: int, L: int, V: int) -> "HtmmParameters":
        return cls(np.zeros((C, C, L)), np.zeros(C), np.zeros((C, V)), np.zeros(L))

    @classmethod
    def random(cls, C: int, L: int, V: int, rng: np.random.Generator | int | None = None, std: float = INIT_STD):
        rng = np.random.default_rng(rng)
        return cls(
            rng.normal(0.0, std, (C, C, L)),
            rng.normal(0.0, std, C),
            rng.normal(0.0, std, (C, V)),
            rng.normal(0.0, std, L),
        )

    @classmethod
    def from_probs(cls, A, pi, b, phi) -> "HtmmParameters":
        """Log-probabilities are a valid softmax preimage."""
        with np.errstate(divide="raise"):
            return cls(np.log(A), np.log(pi), np.log(b), np.log(phi))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, HtmmParameters) and all(
            np.array_equal(x, y) for x, y in zip(self.groups(), other.groups())
        )

    def __repr__(self) -> str:
        return f"HtmmParameters(C={self.C}, L={self.L}, V={self.V})"


def materialize(params: HtmmParameters) -> ProbTables:
    return ProbTables(
        A=_frozen(softmax(params.lambda_A, axis=0)),
        pi=_frozen(softmax(params.lambda_pi, axis=0)),
        b=_frozen(softmax(params.lambda_b, axis=1)),
        phi=_frozen(softmax(params.lambda_phi, axis=0)),
    )


def _check(params: HtmmParameters, tree: LabeledTree) -> None:
    if tree.labels.max() >= params.V or tree.labels.min() < 0:
        raise ValueError(f"tree label outside model alphabet of size {params.V}")
    if tree.max_arity > params.L:
        raise ValueError(f"tree arity {tree.max_arity} exceeds model L={params.L}")


def upward_log_likelihood(params: HtmmParameters, tree: LabeledTree) -> float:
    """Exact ``log P(x)`` by the scaled bottom-up recursion."""
    _check(params, tree)
    t = params.tables
    return float(_backend.kernels.loglik(*tree.arrays(), t.A, t.pi, t.b, t.phi))


@dataclass(frozen=True)
class NodePosteriors:
    """``eps_node[u, i] = P(Q_u=i | x)``.

    ``eps_edge[v, i, j] = P(Q_u=i, Q_v=j, S_u=l | x)`` for the edge from
    parent ``u`` to its child ``v`` sitting in slot ``l``; row 0 (the root)
    is zero. Use :meth:`pair` for the ``(u, l)`` view.
    """

    eps_node: np.ndarray
    eps_edge: np.ndarray
    loglik: float
    tree: LabeledTree

    def pair(self, u: int, l: int) -> np.ndarray:
        return self.eps_edge[self.tree.children[u][l]]

    def switch(self, u: int) -> np.ndarray:
        """Posterior over the switching slot of internal node ``u``."""
        return np.array([self.eps_edge[v].sum() for v in self.tree.children[u]])


def upward_downward(params: HtmmParameters, tree: LabeledTree) -> NodePosteriors:
    _check(params, tree)
    t = params.tables
    arrs = tree.arrays()
    k = _backend.kernels
    beta, logc = k.upward(*arrs, t.A, t.pi, t.b, t.phi)
    eps, pair = k.downward(*arrs, t.A, t.b, t.phi, beta, logc)
    return NodePosteriors(eps, pair, float(logc.sum()), tree)


@dataclass
class _Stats:
    """Expected sufficient statistics summed over trees."""

    leaf_state: np.ndarray  # [C]
    n_leaves: int
    emit: np.ndarray  # [C, V]
    trans: np.ndarray  # [C, C, L]
    trans_col_switch: np.ndarray  # [C, L]  sum_i pair, per (j, l)
    trans_col_child: np.ndarray  # [C, L]  child marginal, per (j, l)
    switch: np.ndarray  # [L]
    arity_hist: np.ndarray  # [L+1] internal nodes per arity
    loglik: float

    @classmethod
    def zeros(cls, C: int, L: int, V: int) -> "_Stats":
        return cls(np.zeros(C), 0, np.zeros((C, V)), np.zeros((C, C, L)), np.zeros((C, L)),
                   np.zeros((C, L)), np.zeros(L), np.zeros(L + 1, dtype=np.int64), 0.0)

    def add(self, post: NodePosteriors) -> None:
        tree = post.tree
        eps, edge = post.eps_node, post.eps_edge
        leaf = tree.leaf_mask
        self.leaf_state += eps[leaf].sum(axis=0)
        self.n_leaves += int(leaf.sum())
        np.add.at(self.emit.T, tree.labels, eps)
        if tree.n_nodes > 1:
            pos = tree.position_array[1:]
            e = edge[1:]
            np.add.at(self.trans.transpose(2, 0, 1), pos, e)
            np.add.at(self.trans_col_switch.T, pos, e.sum(axis=1))
            np.add.at(self.trans_col_child.T, pos, eps[1:])
            np.add.at(self.switch, pos, e.sum(axis=(1, 2)))
        self.arity_hist += np.bincount(tree.arity_array, minlength=self.arity_hist.size)[: self.arity_hist.size]
        self.arity_hist[0] = 0
        self.loglik += post.loglik


def _expected_switch(phi: np.ndarray, arity_hist: np.ndarray) -> np.ndarray:
    """Sum over internal nodes of the renormalized slot weights."""
    out = np.zeros_like(phi)
    for a in range(1, arity_hist.size):
        if arity_hist[a]:
            w = phi[:a]
            out[:a] += arity_hist[a] * w / w.sum()
    return out


def loglik_gradients(
    params: HtmmParameters,
    tree: LabeledTree,
    posteriors: NodePosteriors | None = None,
    printed_transition: bool = False,
) -> HtmmParameters:
    """Gradient of ``log P(x)`` with respect to every free parameter.

    Each group is (expected count) minus (table times expected mass of the
    group's normalization context). ``printed_transition`` swaps the
    transition mass for the child's unconditional marginal; that variant
    does not match finite differences and exists only for comparison.
    """
    if posteriors is None:
        posteriors = upward_downward(params, tree)
    if posteriors.eps_node.shape[0] != tree.n_nodes:
        raise ValueError("posteriors do not belong to this tree")
    st = _Stats.zeros(params.C, params.L, params.V)
    st.add(posteriors)
    return _gradients_from_stats(params, st, printed_transition)


def _gradients_from_stats(params: HtmmParameters, st: _Stats, printed_transition: bool = False) -> HtmmParameters:
    t = params.tables
    col = st.trans_col_child if printed_transition else st.trans_col_switch
    g_A = st.trans - t.A * col[None, :, :]
    g_pi = st.leaf_state - t.pi * st.n_leaves
    g_b = st.emit - t.b * st.emit.sum(axis=1, keepdims=True)
    g_phi = st.switch - _expected_switch(t.phi, st.arity_hist)
    return HtmmParameters(g_A, g_pi, g_b, g_phi)


def dataset_log_likelihood(params: HtmmParameters, trees: Iterable[LabeledTree]) -> float:
    return float(sum(upward_log_likelihood(params, t) for t in trees))


def _mm_switch(phi: np.ndarray, counts: np.ndarray, arity_hist: np.ndarray, iters: int = 100) -> np.ndarray:
    """Maximize sum_l counts_l log phi_l - sum_a hist_a log sum_{l<a} phi_l.

    Minorize-maximize fixed point; every iteration is an ascent step. Slots
    no node ever uses leave the objective unchanged and keep their mass.
    """
    a_max = int(np.flatnonzero(arity_hist)[-1]) if arity_hist.any() else 0
    if a_max == 0:
        return phi
    phi = phi.copy()
    free_mass = phi[:a_max].sum()
    for _ in range(iters):
        partial = np.cumsum(phi)
        inv = np.zeros(phi.size)
        for a in range(1, a_max + 1):
            if arity_hist[a]:
                inv[:a] += arity_hist[a] / partial[a - 1]
        new = counts[:a_max] / inv[:a_max]
        new *= free_mass / new.sum()
        done = np.max(np.abs(new - phi[:a_max])) < 1e-15
        phi[:a_max] = new
        if done:
            break
    return phi


def em_step(params: HtmmParameters, trees: Sequence[LabeledTree], smoothing: float = EM_SMOOTHING) -> HtmmParameters:
    """One EM iteration over ``trees``; returns the re-estimated parameters."""
    trees = list(trees)
    if not trees:
        raise ValueError("EM needs at least one tree")
    st = em_statistics(params, trees)
    return _m_step(params, st, smoothing)


def em_statistics(params: HtmmParameters, trees: Sequence[LabeledTree]) -> _Stats:
    st = _Stats.zeros(params.C, params.L, params.V)
    for t in trees:
        st.add(upward_downward(params, t))
    return st


def _m_step(params: HtmmParameters, st: _Stats, smoothing: float) -> HtmmParameters:
    A = st.trans + smoothing
    A /= A.sum(axis=0, keepdims=True)
    pi = st.leaf_state + smoothing
    pi /= pi.sum()
    b = st.emit + smoothing
    b /= b.sum(axis=1, keepdims=True)
    phi = _mm_switch(params.tables.phi, st.switch + smoothing, st.arity_hist)
    phi = phi / phi.sum()
    return HtmmParameters.from_probs(A, pi, b, phi)


def fit_em(
    params: HtmmParameters, trees: Sequence[LabeledTree], iters: int, smoothing: float = EM_SMOOTHING
) -> tuple[HtmmParameters, list[float]]:
    """Run ``iters`` EM steps; also returns the log-likelihood before each step."""
    history = []
    for _ in range(iters):
        st = em_statistics(params, trees)
        history.append(st.loglik)
        params = _m_step(params, st, smoothing)
    return params, history
