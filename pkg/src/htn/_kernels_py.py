"""Pure-numpy upward/downward passes (fallback for the compiled kernels).

Arrays:
    labels   int32[U]      node label, nodes in pre-order
    ptr, idx int32         CSR children, slot order preserved
    A        float[C,C,L]  A[i, j, l] = P(Q_u=i | Q_ch_l=j)
    pi       float[C]
    b        float[C,V]
    phi      float[L]

``beta[u]`` is P(Q_u | subtree of u) and ``logc[u]`` the log scaling
factor at ``u``; ``logc.sum()`` is the tree log-likelihood.
"""

import numpy as np


def upward(labels, ptr, idx, A, pi, b, phi):
    U = labels.shape[0]
    C = pi.shape[0]
    beta = np.empty((U, C))
    logc = np.empty(U)
    for u in range(U - 1, -1, -1):
        lo, hi = ptr[u], ptr[u + 1]
        if lo == hi:
            un = pi * b[:, labels[u]]
        else:
            a = hi - lo
            w = phi[:a] / phi[:a].sum()
            mix = np.zeros(C)
            for l in range(a):
                mix += w[l] * (A[:, :, l] @ beta[idx[lo + l]])
            un = b[:, labels[u]] * mix
        c = un.sum()
        beta[u] = un / c
        logc[u] = np.log(c)
    return beta, logc


def loglik(labels, ptr, idx, A, pi, b, phi):
    return float(upward(labels, ptr, idx, A, pi, b, phi)[1].sum())


def downward(labels, ptr, idx, A, b, phi, beta, logc):
    """Node posteriors ``eps[u, i]`` and edge joints ``pair[v, i, j]``.

    ``pair[v]`` belongs to the edge (parent u, child v in slot l):
    P(Q_u=i, Q_v=j, S_u=l | x). The root row of ``pair`` is zero.
    """
    U, C = beta.shape
    eps = np.empty((U, C))
    pair = np.zeros((U, C, C))
    gamma = np.empty((U, C))
    gamma[0] = 1.0
    for u in range(U):
        eps[u] = gamma[u] * beta[u]
        lo, hi = ptr[u], ptr[u + 1]
        if lo == hi:
            continue
        a = hi - lo
        w = phi[:a] / phi[:a].sum()
        base = gamma[u] * b[:, labels[u]] / np.exp(logc[u])
        for l in range(a):
            v = idx[lo + l]
            r = w[l] * base
            ra = r @ A[:, :, l]
            pv = (r[:, None] * A[:, :, l]) * beta[v][None, :]
            pair[v] = pv
            gamma[v] = ra + (1.0 - pv.sum())
    return eps, pair
