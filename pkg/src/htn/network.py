"""The hybrid network: HTMM modules, fixed contrastive layer, softmax head.

Each contrastive unit ``(m, r)`` with ``m < r`` computes
``tanh(L_m(x) - L_r(x))`` from module log-likelihoods; the lower-indexed
module enters with weight +1, the higher with -1. Those weights are fixed.
Only the output weights ``W_o`` and the modules' free parameters train.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .htmm import HtmmParameters, loglik_gradients, upward_downward, upward_log_likelihood
from .trees import LabeledTree

NORMALIZATION_MODES = ("raw", "per-node")
W_INIT_STD = 0.1


def pair_index(M: int) -> list[tuple[int, int]]:
    """Contrastive pairs in lexicographic order, 0-based."""
    if M < 2:
        raise ValueError("need at least two modules")
    return [(m, r) for m in range(M) for r in range(m + 1, M)]


def _pair_matrix(M: int) -> np.ndarray:
    """Fixed [P x M] contrastive weights with entries in {-1, 0, +1}."""
    pairs = pair_index(M)
    W = np.zeros((len(pairs), M))
    for k, (m, r) in enumerate(pairs):
        W[k, m] = 1.0
        W[k, r] = -1.0
    return W


@dataclass(frozen=True, eq=False)
class HtnModel:
    modules: tuple[HtmmParameters, ...]
    W_o: np.ndarray
    normalization_mode: str = "raw"
    W_f: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mods = tuple(self.modules)
        object.__setattr__(self, "modules", mods)
        if len(mods) < 2:
            raise ValueError("need at least two modules")
        if len({(m.C, m.L, m.V) for m in mods}) != 1:
            raise ValueError("modules must share C, L and V")
        W = np.array(self.W_o, dtype=np.float64)
        P = len(mods) * (len(mods) - 1) // 2
        if W.ndim != 2 or W.shape[0] != P:
            raise ValueError(f"W_o must have shape [{P}, K]")
        if not np.isfinite(W).all():
            raise ValueError("W_o must be finite")
        W.setflags(write=False)
        object.__setattr__(self, "W_o", W)
        if self.normalization_mode not in NORMALIZATION_MODES:
            raise ValueError(f"normalization_mode must be one of {NORMALIZATION_MODES}")
        W_f = _pair_matrix(len(mods))
        W_f.setflags(write=False)
        object.__setattr__(self, "W_f", W_f)

    @property
    def M(self) -> int:
        return len(self.modules)

    @property
    def K(self) -> int:
        return self.W_o.shape[1]

    @property
    def C(self) -> int:
        return self.modules[0].C

    @property
    def L(self) -> int:
        return self.modules[0].L

    @property
    def V(self) -> int:
        return self.modules[0].V

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return pair_index(self.M)

    @classmethod
    def init(
        cls,
        C: int,
        L: int,
        V: int,
        M: int,
        K: int,
        seed: int | np.random.SeedSequence = 0,
        normalization_mode: str = "raw",
        std: float = 0.1,
        w_std: float = W_INIT_STD,
    ) -> "HtnModel":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = ss.spawn(M + 1)
        modules = [HtmmParameters.random(C, L, V, np.random.default_rng(s), std=std) for s in children[:M]]
        W_o = np.random.default_rng(children[M]).normal(0.0, w_std, (M * (M - 1) // 2, K))
        return cls(tuple(modules), W_o, normalization_mode)

    @property
    def size(self) -> int:
        return self.W_o.size + sum(m.size for m in self.modules)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W_o.ravel()] + [m.flat() for m in self.modules])

    def unflat(self, vec: np.ndarray) -> "HtnModel":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError("parameter vector has the wrong length")
        k = self.W_o.size
        W_o = vec[:k].reshape(self.W_o.shape)
        mods = []
        for m in self.modules:
            mods.append(m.unflat(vec[k : k + m.size]))
            k += m.size
        return HtnModel(tuple(mods), W_o, self.normalization_mode)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, HtnModel)
            and self.normalization_mode == other.normalization_mode
            and np.array_equal(self.W_o, other.W_o)
            and self.modules == other.modules
        )


@dataclass(frozen=True)
class ForwardTrace:
    logliks: np.ndarray  # [M] raw module log-likelihoods
    inputs: np.ndarray  # [M] values fed to the contrastive layer
    h: np.ndarray  # [P]
    net: np.ndarray  # [K]
    log_p: np.ndarray  # [K]
    n_nodes: int

    @property
    def p(self) -> np.ndarray:
        return np.exp(self.log_p)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def forward(model: HtnModel, tree: LabeledTree) -> ForwardTrace:
    logliks = np.array([upward_log_likelihood(m, tree) for m in model.modules])
    return _forward_from_logliks(model, logliks, tree.n_nodes)


def _forward_from_logliks(model: HtnModel, logliks: np.ndarray, n_nodes: int) -> ForwardTrace:
    inputs = logliks / n_nodes if model.normalization_mode == "per-node" else logliks
    h = np.tanh(model.W_f @ inputs)
    net = h @ model.W_o
    return ForwardTrace(logliks, inputs, h, net, _log_softmax(net), n_nodes)


def one_hot(k: int, K: int) -> np.ndarray:
    d = np.zeros(K)
    d[k] = 1.0
    return d


def loss(trace: ForwardTrace, d: np.ndarray | int) -> float:
    """Cross-entropy ``-sum_k d_k log p_k``. An int target means one-hot."""
    if np.isscalar(d):
        return float(-trace.log_p[int(d)])
    d = np.asarray(d, dtype=np.float64)
    hit = d > 0
    return float(-(d[hit] * trace.log_p[hit]).sum())


@dataclass(frozen=True)
class Gradients:
    W_o: np.ndarray  # [P, K]
    modules: tuple[HtmmParameters, ...]
    d_inputs: np.ndarray  # [M] dL / d(contrastive input of module m)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W_o.ravel()] + [g.flat() for g in self.modules])


def backward(model: HtnModel, tree: LabeledTree, trace: ForwardTrace, d: np.ndarray | int, posteriors=None) -> Gradients:
    """Exact loss gradient by the chain rule net -> h -> log-likelihood -> lambda."""
    if trace.logliks.shape != (model.M,) or trace.net.shape != (model.K,):
        raise ValueError("trace does not match model")
    if np.isscalar(d):
        d = one_hot(int(d), model.K)
    d = np.asarray(d, dtype=np.float64)
    delta = trace.p - d  # dL/dnet
    g_W = np.outer(trace.h, delta)
    g_h = model.W_o @ delta
    g_in = model.W_f.T @ (g_h * (1.0 - trace.h**2))
    scale = g_in / tree.n_nodes if model.normalization_mode == "per-node" else g_in
    grads = []
    for k, m in enumerate(model.modules):
        if scale[k] == 0.0:
            grads.append(HtmmParameters(*(np.zeros_like(g) for g in m.groups())))
            continue
        post = posteriors[k] if posteriors is not None else upward_downward(m, tree)
        g = loglik_gradients(m, tree, post)
        grads.append(HtmmParameters(*(scale[k] * x for x in g.groups())))
    return Gradients(g_W, tuple(grads), g_in)


def forward_backward(model: HtnModel, tree: LabeledTree, d: np.ndarray | int) -> tuple[ForwardTrace, Gradients]:
    """Forward and backward sharing one upward-downward pass per module."""
    posts = [upward_downward(m, tree) for m in model.modules]
    trace = _forward_from_logliks(model, np.array([p.loglik for p in posts]), tree.n_nodes)
    return trace, backward(model, tree, trace, d, posteriors=posts)


def predict(model: HtnModel, tree: LabeledTree) -> tuple[int, np.ndarray]:
    """Argmax class (ties go to the lowest index) and the probability vector."""
    trace = forward(model, tree)
    return int(np.argmax(trace.net)), trace.p


def permute_modules(model: HtnModel, perm: Sequence[int]) -> HtnModel:
    """Reorder modules; W_o rows follow their pair, sign-flipped when the pair
    orientation reverses, so the network computes the same function."""
    perm = list(perm)
    if sorted(perm) != list(range(model.M)):
        raise ValueError("not a permutation")
    new_pos = {old: new for new, old in enumerate(perm)}
    new_pairs = {p: k for k, p in enumerate(pair_index(model.M))}
    W = np.zeros_like(model.W_o)
    for k, (m, r) in enumerate(model.pairs):
        a, b = new_pos[m], new_pos[r]
        if a < b:
            W[new_pairs[(a, b)]] = model.W_o[k]
        else:
            W[new_pairs[(b, a)]] = -model.W_o[k]
    return replace(model, modules=tuple(model.modules[i] for i in perm), W_o=W)
