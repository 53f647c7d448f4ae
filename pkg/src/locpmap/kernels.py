"""Hot inner loops: block ICM, block Gibbs/annealing, mean field, loopy BP.

Every kernel exists twice, a numba version (``*_nb``) and a pure-numpy version
(``*_np``). The public wrappers dispatch on ``_backend.BACKEND``. Both versions
consume the same pre-drawn random numbers and add terms in the same order, so
discrete outputs agree exactly and continuous ones to rounding.
"""
from __future__ import annotations

import numpy as np

from . import _backend
from ._backend import njit
from .model import BlockStructure, joint_labels


# -- shared numba helpers ----------------------------------------------------------

@njit
def _decode(J, K, size, out):
    for t in range(size - 1, -1, -1):
        out[t] = J % K
        J //= K


@njit
def _block_scores_nb(U, P, blk_ptr, blk_nodes, int_ptr, int_e, int_pa, int_pb,
                     bnd_ptr, bnd_e, bnd_pos, bnd_other, bnd_side, k, y, K, lab, out):
    b0 = blk_ptr[k]
    size = blk_ptr[k + 1] - b0
    ncfg = out.shape[0]
    for J in range(ncfg):
        _decode(J, K, size, lab)
        s = 0.0
        for t in range(size):
            s += U[blk_nodes[b0 + t], lab[t]]
        for q in range(int_ptr[k], int_ptr[k + 1]):
            s += P[int_e[q], lab[int_pa[q]], lab[int_pb[q]]]
        for q in range(bnd_ptr[k], bnd_ptr[k + 1]):
            if bnd_side[q] == 0:
                s += P[bnd_e[q], lab[bnd_pos[q]], y[bnd_other[q]]]
            else:
                s += P[bnd_e[q], y[bnd_other[q]], lab[bnd_pos[q]]]
        out[J] = s


# -- block ICM -------------------------------------------------------------------

@njit
def _block_icm_nb(U, P, blk_ptr, blk_nodes, int_ptr, int_e, int_pa, int_pb,
                  bnd_ptr, bnd_e, bnd_pos, bnd_other, bnd_side, noise_ptr,
                  K, noise, y, max_sweeps):
    nb = blk_ptr.shape[0] - 1
    maxcfg = 1
    for k in range(nb):
        c = noise_ptr[k + 1] - noise_ptr[k]
        if c > maxcfg:
            maxcfg = c
    lab = np.zeros(8, dtype=np.int64)
    buf = np.zeros(maxcfg)
    sweeps = 0
    for s in range(max_sweeps):
        changed = False
        for k in range(nb):
            ncfg = noise_ptr[k + 1] - noise_ptr[k]
            sc = buf[:ncfg]
            _block_scores_nb(U, P, blk_ptr, blk_nodes, int_ptr, int_e, int_pa, int_pb,
                             bnd_ptr, bnd_e, bnd_pos, bnd_other, bnd_side, k, y, K, lab, sc)
            best = 0
            bestv = sc[0] + noise[noise_ptr[k]]
            for J in range(1, ncfg):
                v = sc[J] + noise[noise_ptr[k] + J]
                if v > bestv:
                    bestv = v
                    best = J
            b0 = blk_ptr[k]
            size = blk_ptr[k + 1] - b0
            _decode(best, K, size, lab)
            for t in range(size):
                node = blk_nodes[b0 + t]
                if y[node] != lab[t]:
                    y[node] = lab[t]
                    changed = True
        sweeps = s + 1
        if not changed:
            break
    return sweeps


def _block_scores_np(U, P, st: BlockStructure, k, y, J):
    """Scores of all joint labels ``J`` of block k; U (B,n,K), y (B,n) -> (B, ncfg)."""
    B = y.shape[0]
    scores = np.zeros((B, J.shape[0]))
    b0 = st.blk_ptr[k]
    for t in range(st.blk_ptr[k + 1] - b0):
        scores += U[:, st.blk_nodes[b0 + t], :][:, J[:, t]]
    for q in range(st.int_ptr[k], st.int_ptr[k + 1]):
        scores += P[st.int_e[q]][J[:, st.int_pa[q]], J[:, st.int_pb[q]]][None, :]
    for q in range(st.bnd_ptr[k], st.bnd_ptr[k + 1]):
        Pe = P[st.bnd_e[q]]
        other = y[:, st.bnd_other[q]]
        mine = J[:, st.bnd_pos[q]]
        if st.bnd_side[q] == 0:
            scores += Pe[mine[None, :], other[:, None]]
        else:
            scores += Pe[other[:, None], mine[None, :]]
    return scores


def _block_icm_np(U, P, st: BlockStructure, noise, y, max_sweeps):
    B = y.shape[0]
    K = st.num_labels
    nb = st.num_blocks
    tables = {}
    sweeps = np.full(B, max_sweeps, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    for s in range(max_sweeps):
        changed = np.zeros(B, dtype=bool)
        for k in range(nb):
            b0, b1 = st.blk_ptr[k], st.blk_ptr[k + 1]
            size = b1 - b0
            if size not in tables:
                tables[size] = joint_labels(size, K)
            J = tables[size]
            sc = _block_scores_np(U, P, st, k, y, J)
            sc = sc + noise[:, st.noise_ptr[k]:st.noise_ptr[k + 1]]
            best = J[np.argmax(sc, axis=1)]
            nodes = st.blk_nodes[b0:b1]
            changed |= np.any(y[:, nodes] != best, axis=1)
            y[:, nodes] = best
        newly_done = active & ~changed
        sweeps[newly_done] = s + 1
        active &= changed
        if not active.any():
            break
    return sweeps


def block_icm(U, P, st: BlockStructure, noise, y, max_sweeps, backend=None):
    """Greedy block-coordinate ascent of ``score + noise`` for a batch of chains.

    U: (B, n, K), P: (m, K, K), noise: (B, st.num_noise), y: (B, n) updated in place.
    Returns the sweep count per chain (the final, unchanged sweep included).
    Ties go to the lowest joint label.
    """
    backend = backend or _backend.BACKEND
    U = np.ascontiguousarray(U, dtype=np.float64)
    noise = np.ascontiguousarray(noise, dtype=np.float64)
    if backend == "numpy":
        return _block_icm_np(U, P, st, noise, y, int(max_sweeps))
    B = y.shape[0]
    sweeps = np.empty(B, dtype=np.int64)
    P = np.ascontiguousarray(P, dtype=np.float64)
    for b in range(B):
        yb = np.ascontiguousarray(y[b])
        sweeps[b] = _block_icm_nb(U[b], P, st.blk_ptr, st.blk_nodes, st.int_ptr, st.int_e,
                                  st.int_pa, st.int_pb, st.bnd_ptr, st.bnd_e, st.bnd_pos,
                                  st.bnd_other, st.bnd_side, st.noise_ptr, st.num_labels,
                                  noise[b], yb, int(max_sweeps))
        y[b] = yb
    return sweeps


# -- block Gibbs with a temperature schedule ------------------------------------------

@njit
def _block_gibbs_nb(U, P, blk_ptr, blk_nodes, int_ptr, int_e, int_pa, int_pb,
                    bnd_ptr, bnd_e, bnd_pos, bnd_other, bnd_side, noise_ptr,
                    K, temps, unif, y, keep_from, counts):
    nb = blk_ptr.shape[0] - 1
    maxcfg = 1
    for k in range(nb):
        c = noise_ptr[k + 1] - noise_ptr[k]
        if c > maxcfg:
            maxcfg = c
    lab = np.zeros(8, dtype=np.int64)
    buf = np.zeros(maxcfg)
    wts = np.zeros(maxcfg)
    n = y.shape[0]
    for s in range(temps.shape[0]):
        T = temps[s]
        for k in range(nb):
            ncfg = noise_ptr[k + 1] - noise_ptr[k]
            sc = buf[:ncfg]
            _block_scores_nb(U, P, blk_ptr, blk_nodes, int_ptr, int_e, int_pa, int_pb,
                             bnd_ptr, bnd_e, bnd_pos, bnd_other, bnd_side, k, y, K, lab, sc)
            m = sc[0]
            for J in range(1, ncfg):
                if sc[J] > m:
                    m = sc[J]
            total = 0.0
            for J in range(ncfg):
                wts[J] = np.exp((sc[J] - m) / T)
            acc = 0.0
            for J in range(ncfg):
                acc += wts[J]
                wts[J] = acc
            total = acc
            thresh = unif[s, k] * total
            pick = ncfg - 1
            for J in range(ncfg):
                if wts[J] > thresh:
                    pick = J
                    break
            b0 = blk_ptr[k]
            size = blk_ptr[k + 1] - b0
            _decode(pick, K, size, lab)
            for t in range(size):
                y[blk_nodes[b0 + t]] = lab[t]
        if s >= keep_from:
            for i in range(n):
                counts[i, y[i]] += 1


def _block_gibbs_np(U, P, st: BlockStructure, temps, unif, y, keep_from, counts):
    K = st.num_labels
    tables = {}
    yb = y[None, :]
    Ub = U[None, :, :]
    nodes_all = np.arange(y.shape[0])
    for s in range(temps.shape[0]):
        T = temps[s]
        for k in range(st.num_blocks):
            b0, b1 = st.blk_ptr[k], st.blk_ptr[k + 1]
            size = b1 - b0
            if size not in tables:
                tables[size] = joint_labels(size, K)
            J = tables[size]
            sc = _block_scores_np(Ub, P, st, k, yb, J)[0]
            w = np.exp((sc - sc.max()) / T)
            cum = np.cumsum(w)
            pick = int(np.searchsorted(cum, unif[s, k] * cum[-1], side="right"))
            pick = min(pick, J.shape[0] - 1)
            yb[0, st.blk_nodes[b0:b1]] = J[pick]
        if s >= keep_from:
            counts[nodes_all, yb[0]] += 1


def block_gibbs(U, P, st: BlockStructure, temps, unif, y, keep_from, counts, backend=None):
    """Systematic-scan block Gibbs; sweep s samples at temperature ``temps[s]``.

    ``unif`` holds one open-interval uniform per (sweep, block). ``y`` is updated in
    place; label counts of every sweep ``>= keep_from`` accumulate into ``counts``.
    """
    backend = backend or _backend.BACKEND
    U = np.ascontiguousarray(U, dtype=np.float64)
    temps = np.ascontiguousarray(temps, dtype=np.float64)
    unif = np.ascontiguousarray(unif, dtype=np.float64)
    if backend == "numpy":
        _block_gibbs_np(U, P, st, temps, unif, y, int(keep_from), counts)
        return
    _block_gibbs_nb(U, np.ascontiguousarray(P, dtype=np.float64), st.blk_ptr, st.blk_nodes,
                    st.int_ptr, st.int_e, st.int_pa, st.int_pb, st.bnd_ptr, st.bnd_e,
                    st.bnd_pos, st.bnd_other, st.bnd_side, st.noise_ptr, st.num_labels,
                    temps, unif, y, int(keep_from), counts)


# -- mean field --------------------------------------------------------------------

@njit
def _mean_field_nb(U, P, blk_nodes, bnd_ptr, bnd_e, bnd_other, bnd_side, q, max_sweeps, tol):
    n, K = U.shape
    logits = np.zeros(K)
    sweeps = 0
    converged = False
    for s in range(max_sweeps):
        delta = 0.0
        for k in range(blk_nodes.shape[0]):
            i = blk_nodes[k]
            for l in range(K):
                logits[l] = U[i, l]
            for r in range(bnd_ptr[k], bnd_ptr[k + 1]):
                e = bnd_e[r]
                j = bnd_other[r]
                for l in range(K):
                    acc = 0.0
                    for l2 in range(K):
                        if bnd_side[r] == 0:
                            acc += q[j, l2] * P[e, l, l2]
                        else:
                            acc += q[j, l2] * P[e, l2, l]
                    logits[l] += acc
            m = logits[0]
            for l in range(1, K):
                if logits[l] > m:
                    m = logits[l]
            z = 0.0
            for l in range(K):
                logits[l] = np.exp(logits[l] - m)
                z += logits[l]
            for l in range(K):
                v = logits[l] / z
                d = abs(v - q[i, l])
                if d > delta:
                    delta = d
                q[i, l] = v
        sweeps = s + 1
        if delta < tol:
            converged = True
            break
    return sweeps, converged


def _mean_field_np(U, P, st: BlockStructure, q, max_sweeps, tol):
    sweeps = 0
    converged = False
    PT = P.transpose(0, 2, 1)
    for s in range(max_sweeps):
        delta = 0.0
        for k in range(st.num_blocks):
            i = st.blk_nodes[k]
            logits = U[i].copy()
            for r in range(st.bnd_ptr[k], st.bnd_ptr[k + 1]):
                e, j = st.bnd_e[r], st.bnd_other[r]
                tab = P[e] if st.bnd_side[r] == 0 else PT[e]
                logits += tab @ q[j]
            z = np.exp(logits - logits.max())
            v = z / z.sum()
            delta = max(delta, float(np.abs(v - q[i]).max()))
            q[i] = v
        sweeps = s + 1
        if delta < tol:
            converged = True
            break
    return sweeps, converged


def mean_field(U, P, st: BlockStructure, q, max_sweeps, tol, backend=None):
    """Raster-order coordinate updates of a factorized q (updated in place)."""
    if np.any(np.diff(st.blk_ptr) != 1):
        raise ValueError("mean field needs a singleton partition")
    backend = backend or _backend.BACKEND
    if backend == "numpy":
        return _mean_field_np(U, P, st, q, int(max_sweeps), float(tol))
    s, c = _mean_field_nb(np.ascontiguousarray(U), np.ascontiguousarray(P), st.blk_nodes,
                          st.bnd_ptr, st.bnd_e, st.bnd_other, st.bnd_side, q,
                          int(max_sweeps), float(tol))
    return int(s), bool(c)


# -- loopy belief propagation ----------------------------------------------------------

_TINY = 1e-300


@njit
def _lbp_nb(U, P, edges, msg, max_iters, tol, damping):
    n, K = U.shape
    m = edges.shape[0]
    lin = np.zeros((n, K))
    new = np.zeros((m, 2, K))
    cav = np.zeros(K)
    iters = 0
    converged = False
    for it in range(max_iters):
        for i in range(n):
            for l in range(K):
                lin[i, l] = U[i, l]
        for e in range(m):
            a = edges[e, 0]
            b = edges[e, 1]
            for l in range(K):
                lin[b, l] += np.log(max(msg[e, 0, l], _TINY))
                lin[a, l] += np.log(max(msg[e, 1, l], _TINY))
        for e in range(m):
            a = edges[e, 0]
            b = edges[e, 1]
            # a -> b, a function of y_b
            for l in range(K):
                cav[l] = lin[a, l] - np.log(max(msg[e, 1, l], _TINY))
            mx = -np.inf
            for la in range(K):
                for lb in range(K):
                    v = cav[la] + P[e, la, lb]
                    if v > mx:
                        mx = v
            z = 0.0
            for lb in range(K):
                acc = 0.0
                for la in range(K):
                    acc += np.exp(cav[la] + P[e, la, lb] - mx)
                new[e, 0, lb] = acc
                z += acc
            for lb in range(K):
                new[e, 0, lb] /= z
            # b -> a, a function of y_a
            for l in range(K):
                cav[l] = lin[b, l] - np.log(max(msg[e, 0, l], _TINY))
            mx = -np.inf
            for la in range(K):
                for lb in range(K):
                    v = cav[lb] + P[e, la, lb]
                    if v > mx:
                        mx = v
            z = 0.0
            for la in range(K):
                acc = 0.0
                for lb in range(K):
                    acc += np.exp(cav[lb] + P[e, la, lb] - mx)
                new[e, 1, la] = acc
                z += acc
            for la in range(K):
                new[e, 1, la] /= z
        delta = 0.0
        for e in range(m):
            for d in range(2):
                z = 0.0
                for l in range(K):
                    v = damping * msg[e, d, l] + (1.0 - damping) * new[e, d, l]
                    new[e, d, l] = v
                    z += v
                for l in range(K):
                    v = new[e, d, l] / z
                    dd = abs(v - msg[e, d, l])
                    if dd > delta:
                        delta = dd
                    msg[e, d, l] = v
        iters = it + 1
        if delta < tol:
            converged = True
            break
    return iters, converged


def _lbp_np(U, P, edges, msg, max_iters, tol, damping):
    a, b = edges[:, 0], edges[:, 1]
    iters = 0
    converged = False
    for it in range(max_iters):
        logm = np.log(np.maximum(msg, _TINY))
        lin = U.copy()
        for e in range(edges.shape[0]):
            lin[b[e]] += logm[e, 0]
            lin[a[e]] += logm[e, 1]
        cav_a = lin[a] - logm[:, 1]                        # (m, K) over y_a
        cav_b = lin[b] - logm[:, 0]                        # (m, K) over y_b
        ta = cav_a[:, :, None] + P                         # (m, Ka, Kb)
        tb = cav_b[:, None, :] + P
        new_ab = np.exp(ta - ta.max(axis=(1, 2), keepdims=True)).sum(axis=1)
        new_ba = np.exp(tb - tb.max(axis=(1, 2), keepdims=True)).sum(axis=2)
        new = np.stack([new_ab, new_ba], axis=1)
        new /= new.sum(axis=2, keepdims=True)
        new = damping * msg + (1.0 - damping) * new
        new /= new.sum(axis=2, keepdims=True)
        delta = float(np.abs(new - msg).max()) if msg.size else 0.0
        msg[...] = new
        iters = it + 1
        if delta < tol:
            converged = True
            break
    return iters, converged


def lbp_beliefs(U, edges, msg):
    logm = np.log(np.maximum(msg, _TINY))
    lin = U.copy()
    for e in range(edges.shape[0]):
        lin[edges[e, 1]] += logm[e, 0]
        lin[edges[e, 0]] += logm[e, 1]
    z = np.exp(lin - lin.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def loopy_bp(U, P, edges, msg, max_iters, tol, damping, backend=None):
    """Synchronous damped sum-product; ``msg[e, 0]`` flows first->second endpoint."""
    backend = backend or _backend.BACKEND
    if backend == "numpy":
        return _lbp_np(U, P, edges, msg, int(max_iters), float(tol), float(damping))
    it, c = _lbp_nb(np.ascontiguousarray(U), np.ascontiguousarray(P),
                    np.ascontiguousarray(edges), msg, int(max_iters), float(tol), float(damping))
    return int(it), bool(c)


# -- pseudolikelihood over singleton blocks ---------------------------------------------

@njit
def _pl_singletons_nb(Xu, Xp, Y, nbr_ptr, nbr_e, nbr_other, nbr_side, Wu, Wp, mask, want_grad):
    N, n, Du = Xu.shape
    Dp = Xp.shape[2]
    K = Wu.shape[0]
    gU = np.zeros((K, Du))
    gP = np.zeros((K, K, Dp))
    s = np.zeros(K)
    value = 0.0
    for it in range(N):
        for i in range(n):
            if mask[i] == 0.0:
                continue
            for l in range(K):
                acc = 0.0
                for d in range(Du):
                    acc += Xu[it, i, d] * Wu[l, d]
                s[l] = acc
            for r in range(nbr_ptr[i], nbr_ptr[i + 1]):
                e = nbr_e[r]
                yj = Y[it, nbr_other[r]]
                for l in range(K):
                    acc = 0.0
                    if nbr_side[r] == 0:
                        for d in range(Dp):
                            acc += Xp[it, e, d] * Wp[l, yj, d]
                    else:
                        for d in range(Dp):
                            acc += Xp[it, e, d] * Wp[yj, l, d]
                    s[l] += acc
            mx = s[0]
            for l in range(1, K):
                if s[l] > mx:
                    mx = s[l]
            z = 0.0
            for l in range(K):
                z += np.exp(s[l] - mx)
            lse = mx + np.log(z)
            yi = Y[it, i]
            value += mask[i] * (s[yi] - lse)
            if not want_grad:
                continue
            for l in range(K):
                rl = mask[i] * ((1.0 if l == yi else 0.0) - np.exp(s[l] - lse))
                for d in range(Du):
                    gU[l, d] += rl * Xu[it, i, d]
                for r in range(nbr_ptr[i], nbr_ptr[i + 1]):
                    e = nbr_e[r]
                    yj = Y[it, nbr_other[r]]
                    if nbr_side[r] == 0:
                        for d in range(Dp):
                            gP[l, yj, d] += rl * Xp[it, e, d]
                    else:
                        for d in range(Dp):
                            gP[yj, l, d] += rl * Xp[it, e, d]
    return value, gU, gP


def _scatter_rows(idx, vals, n):
    """out[i, idx[k], :] += vals[i, k, :] for a batch of items."""
    N, m, K = vals.shape
    flat = (np.arange(N)[:, None] * n + idx[None, :]).ravel()
    out = np.empty((N * n, K))
    for l in range(K):
        out[:, l] = np.bincount(flat, weights=vals[:, :, l].ravel(), minlength=N * n)
    return out.reshape(N, n, K)


def _lse(x, axis):
    mx = x.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def _pl_singletons_np(Xu, Xp, Y, edges, Wu, Wp, mask, want_grad):
    N, n, Du = Xu.shape
    m, Dp = Xp.shape[1:]
    K = Wu.shape[0]
    a, b = edges[:, 0], edges[:, 1]
    U = Xu @ Wu.T                                          # (N, n, K)
    Xp2 = Xp.reshape(-1, Dp)
    Ya, Yb = Y[:, a], Y[:, b]
    OH_a = (Ya[..., None] == np.arange(K)).astype(np.float64)
    OH_b = (Yb[..., None] == np.arange(K)).astype(np.float64)
    first = np.zeros((N, m, K))                              # node a's edge terms, over y_a
    second = np.zeros((N, m, K))                             # node b's edge terms, over y_b
    for la in range(K):
        for lb in range(K):
            Pab = (Xp2 @ Wp[la, lb]).reshape(N, m)
            first[..., la] += Pab * OH_b[..., lb]
            second[..., lb] += Pab * OH_a[..., la]
    S = U + _scatter_rows(a, first, n) + _scatter_rows(b, second, n)
    lse = _lse(S, axis=2)
    obs = np.take_along_axis(S, Y[:, :, None], axis=2)[..., 0]
    value = float(((obs - lse) * mask).sum())
    if not want_grad:
        return value, None, None
    OH = (Y[..., None] == np.arange(K)).astype(np.float64)   # (N, n, K)
    R = (OH - np.exp(S - lse[..., None])) * mask[None, :, None]
    gU = R.reshape(-1, K).T @ Xu.reshape(-1, Du)
    Ra, Rb = R[:, a], R[:, b]
    gP = np.empty_like(Wp)
    for la in range(K):
        for lb in range(K):
            c = Ra[..., la] * OH_b[..., lb] + OH_a[..., la] * Rb[..., lb]
            gP[la, lb] = c.reshape(-1) @ Xp2
    return value, gU, gP


def _neighbor_csr(n, edges):
    nbrs = [[] for _ in range(n)]
    for e, (a, b) in enumerate(edges):
        nbrs[a].append((e, int(b), 0))
        nbrs[b].append((e, int(a), 1))
    ptr = np.cumsum([0] + [len(v) for v in nbrs]).astype(np.int64)
    flat = [t for v in nbrs for t in v]
    arr = np.array(flat, dtype=np.int64).reshape(-1, 3)
    return ptr, arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy()


def pl_singletons(Xu, Xp, Y, edges, Wu, Wp, mask, want_grad=True, backend=None):
    """Pseudolikelihood value and gradient (or None) over the nodes with ``mask`` set.

    Xu (N, n, Du), Xp (N, m, Dp), Y (N, n) stacked over items sharing one grid.
    """
    backend = backend or _backend.BACKEND
    if backend == "numpy":
        return _pl_singletons_np(Xu, Xp, Y, edges, Wu, Wp, mask, want_grad)
    ptr, ne, no, ns = _neighbor_csr(Xu.shape[1], edges)
    v, gU, gP = _pl_singletons_nb(np.ascontiguousarray(Xu, dtype=np.float64),
                                  np.ascontiguousarray(Xp, dtype=np.float64),
                                  np.ascontiguousarray(Y, dtype=np.int64), ptr, ne, no, ns,
                                  np.ascontiguousarray(Wu), np.ascontiguousarray(Wp),
                                  np.ascontiguousarray(mask, dtype=np.float64), bool(want_grad))
    return float(v), (gU if want_grad else None), (gP if want_grad else None)
