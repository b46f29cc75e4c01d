"""Compiled KD-tree build and search kernels.

One traversal serves both tree flavours: nodes at depth ``h_top`` are treated
as unordered leaf sets and scanned exhaustively; ``h_top = -1`` never matches a
depth, which gives the canonical one-point-per-node search.

Tree layout (preorder, so every subtree is a contiguous id range):
``perm[node]`` point index, ``axis``, ``left``/``right`` child ids (-1 if
absent), ``size`` subtree size, ``depth``, ``heap`` (1-based heap position),
``lo``/``hi`` subtree bounding box.
"""

import numpy as np
from numba import njit

VISIT, PRUNE, LEAF = 0, 1, 2
MODE_EXACT, MODE_LEADER, MODE_FOLLOWER = 0, 1, 2

S_VISITED, S_DIST, S_PRUNED, S_TOP, S_LEAFSETS, S_LEAFPTS, S_LEADER, S_FOLLOW = range(8)
NSTAT = 8
# event columns: query, kind, node, leaf_id, leaf_size, mode, leaders_compared,
# result points (read from the leader result for followers, found in the leaf otherwise)
EV_COLS = 8


@njit(cache=True)
def build_tree(pts):
    n, d = pts.shape
    perm = np.empty(n, np.int64)
    axis = np.zeros(n, np.int64)
    left = np.full(n, -1, np.int64)
    right = np.full(n, -1, np.int64)
    size = np.zeros(n, np.int64)
    depth = np.zeros(n, np.int64)
    heap = np.zeros(n, np.int64)
    lo = np.empty((n, d))
    hi = np.empty((n, d))
    if n == 0:
        return perm, axis, left, right, size, depth, heap, lo, hi
    work = np.arange(n)
    st = np.empty((n + 1, 5), np.int64)
    st[0, 0] = 0
    st[0, 1] = 0
    st[0, 2] = n
    st[0, 3] = 0
    st[0, 4] = 1
    sp = 1
    while sp > 0:
        sp -= 1
        node, start, end, dep, hp = st[sp, 0], st[sp, 1], st[sp, 2], st[sp, 3], st[sp, 4]
        k = end - start
        ax = dep % d
        # order by (coordinate, point index): sort by index, then stable sort by key
        sub = np.sort(work[start:end])
        keys = np.empty(k)
        for i in range(k):
            keys[i] = pts[sub[i], ax]
        sub = sub[np.argsort(keys, kind="mergesort")]
        work[start:end] = sub
        m = k // 2
        perm[node] = sub[m]
        axis[node] = ax
        size[node] = k
        depth[node] = dep
        heap[node] = hp
        for j in range(d):
            mn = np.inf
            mx = -np.inf
            for i in range(k):
                v = pts[sub[i], j]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            lo[node, j] = mn
            hi[node, j] = mx
        if m > 0:
            left[node] = node + 1
            st[sp, 0] = node + 1
            st[sp, 1] = start
            st[sp, 2] = start + m
            st[sp, 3] = dep + 1
            st[sp, 4] = 2 * hp
            sp += 1
        if k - m - 1 > 0:
            right[node] = node + 1 + m
            st[sp, 0] = node + 1 + m
            st[sp, 1] = start + m + 1
            st[sp, 2] = end
            st[sp, 3] = dep + 1
            st[sp, 4] = 2 * hp + 1
            sp += 1
    return perm, axis, left, right, size, depth, heap, lo, hi


@njit(cache=True, inline="always")
def _dist(a, q):
    s = 0.0
    for j in range(q.shape[0]):
        t = a[j] - q[j]
        s += t * t
    return np.sqrt(s)


@njit(cache=True, inline="always")
def _mindist(lo, hi, node, q):
    s = 0.0
    for j in range(q.shape[0]):
        v = q[j]
        if v < lo[node, j]:
            t = lo[node, j] - v
            s += t * t
        elif v > hi[node, j]:
            t = v - hi[node, j]
            s += t * t
    return np.sqrt(s)


@njit(cache=True, inline="always")
def _insert(bd, bi, c, k, d, idx):
    """Insert (d, idx) into the sorted top-k arrays; ties go to the lower index."""
    if c == k:
        if d > bd[k - 1] or (d == bd[k - 1] and idx > bi[k - 1]):
            return c
        pos = k - 1
    else:
        pos = c
        c += 1
    while pos > 0 and (bd[pos - 1] > d or (bd[pos - 1] == d and bi[pos - 1] > idx)):
        bd[pos] = bd[pos - 1]
        bi[pos] = bi[pos - 1]
        pos -= 1
    bd[pos] = d
    bi[pos] = idx
    return c


@njit(cache=True)
def _ev_push(ev, nev, q, kind, node, leaf, m, mode, L, R):
    if nev == ev.shape[0]:
        grown = np.empty((ev.shape[0] * 2, EV_COLS), np.int64)
        grown[:nev] = ev[:nev]
        ev = grown
    ev[nev, 0] = q
    ev[nev, 1] = kind
    ev[nev, 2] = node
    ev[nev, 3] = leaf
    ev[nev, 4] = m
    ev[nev, 5] = mode
    ev[nev, 6] = L
    ev[nev, 7] = R
    return ev, nev + 1


@njit(cache=True)
def _grow_i(a, n):
    if n == a.shape[0]:
        g = np.empty(a.shape[0] * 2, a.dtype)
        g[:n] = a[:n]
        return g
    return a


@njit(cache=True)
def _grow_f(a, n):
    if n == a.shape[0]:
        g = np.empty(a.shape[0] * 2, a.dtype)
        g[:n] = a[:n]
        return g
    return a


@njit(cache=True)
def knn_batch(pts, perm, axis, left, right, size, depth, heap, lo, hi,
              queries, k, h_top, bucket_of, n_buckets, thd, cap, trace, prune):
    """k-nearest-neighbour search for each query, in order.

    ``thd > 0`` enables leader/follower approximation per leaf set (at most
    ``cap`` leaders per leaf). Returns indices, distances, per-query stats,
    per-query approximated flags and the event trace.
    """
    nq = queries.shape[0]
    n = pts.shape[0]
    d = queries.shape[1]
    out_i = np.full((nq, k), -1, np.int64)
    out_d = np.full((nq, k), np.inf)
    stats = np.zeros((nq, NSTAT), np.int64)
    approx = np.zeros(nq, np.bool_)
    ev = np.empty((1024 if trace else 1, EV_COLS), np.int64)
    nev = 0
    use_approx = thd > 0.0
    nb = n_buckets if (use_approx and n_buckets > 0) else 1
    lcount = np.zeros(nb, np.int64)
    lq = np.empty((nb, cap, d))
    lres = np.full((nb, cap, k), -1, np.int64)
    lresn = np.zeros((nb, cap), np.int64)
    stack = np.empty(n + 1, np.int64)
    bd = np.empty(k)
    bi = np.empty(k, np.int64)
    ld = np.empty(k)
    li = np.empty(k, np.int64)
    for qi in range(nq):
        q = queries[qi]
        c = 0
        sp = 0
        if n > 0:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            is_bucket = depth[node] == h_top
            if prune and c == k and _mindist(lo, hi, node, q) > bd[k - 1]:
                stats[qi, S_PRUNED] += 1
                if trace:
                    lid = heap[node] - (1 << h_top) if is_bucket else -1
                    ev, nev = _ev_push(ev, nev, qi, PRUNE, node, lid, 0, 0, 0, 0)
                continue
            if is_bucket:
                s = size[node]
                lid = heap[node] - (1 << h_top)
                handled = False
                L = 0
                b = bucket_of[node]
                if use_approx:
                    L = lcount[b]
                    if L > 0:
                        best_l = 0
                        best_ld = np.inf
                        for j in range(L):
                            dl = _dist(lq[b, j], q)
                            if dl < best_ld:
                                best_ld = dl
                                best_l = j
                        stats[qi, S_LEADER] += L
                        stats[qi, S_DIST] += L
                        stats[qi, S_VISITED] += L
                        R = lresn[b, best_l]
                        if best_ld < thd and R > 0:
                            for j in range(R):
                                p = lres[b, best_l, j]
                                c = _insert(bd, bi, c, k, _dist(pts[p], q), p)
                            stats[qi, S_FOLLOW] += R
                            stats[qi, S_DIST] += R
                            stats[qi, S_VISITED] += R
                            approx[qi] = True
                            handled = True
                            if trace:
                                ev, nev = _ev_push(ev, nev, qi, LEAF, node, lid, s, MODE_FOLLOWER, L, R)
                if not handled:
                    lc = 0
                    for j in range(node, node + s):
                        p = perm[j]
                        lc = _insert(ld, li, lc, k, _dist(pts[p], q), p)
                    for j in range(lc):
                        c = _insert(bd, bi, c, k, ld[j], li[j])
                    stats[qi, S_LEAFSETS] += 1
                    stats[qi, S_LEAFPTS] += s
                    stats[qi, S_DIST] += s
                    stats[qi, S_VISITED] += s
                    mode = MODE_EXACT
                    if use_approx and lcount[b] < cap:
                        slot = lcount[b]
                        lq[b, slot, :] = q
                        for j in range(lc):
                            lres[b, slot, j] = li[j]
                        lresn[b, slot] = lc
                        lcount[b] += 1
                        mode = MODE_LEADER
                    if trace:
                        ev, nev = _ev_push(ev, nev, qi, LEAF, node, lid, s, mode, L, lc)
                continue
            p = perm[node]
            c = _insert(bd, bi, c, k, _dist(pts[p], q), p)
            stats[qi, S_VISITED] += 1
            stats[qi, S_DIST] += 1
            stats[qi, S_TOP] += 1
            if trace:
                ev, nev = _ev_push(ev, nev, qi, VISIT, node, -1, 0, 0, 0, 0)
            ax = axis[node]
            if q[ax] < pts[p, ax]:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            if far != -1:
                stack[sp] = far
                sp += 1
            if near != -1:
                stack[sp] = near
                sp += 1
        for j in range(c):
            out_i[qi, j] = bi[j]
            out_d[qi, j] = bd[j]
    return out_i, out_d, stats, approx, ev[:nev]


@njit(cache=True)
def radius_batch(pts, perm, axis, left, right, size, depth, heap, lo, hi,
                 queries, r, h_top, bucket_of, n_buckets, thd, cap, trace, prune):
    """All points within ``r`` of each query (results sorted by point index).

    Returns CSR-style ``(offsets, indices, distances)`` plus stats, approximated
    flags and the event trace. Followers keep the part of their leader's
    in-leaf result that lies within ``r`` of themselves.
    """
    nq = queries.shape[0]
    n = pts.shape[0]
    d = queries.shape[1]
    offs = np.zeros(nq + 1, np.int64)
    ri = np.empty(1024, np.int64)
    rd = np.empty(1024)
    nr = 0
    stats = np.zeros((nq, NSTAT), np.int64)
    approx = np.zeros(nq, np.bool_)
    ev = np.empty((1024 if trace else 1, EV_COLS), np.int64)
    nev = 0
    use_approx = thd > 0.0
    nb = n_buckets if (use_approx and n_buckets > 0) else 1
    lcount = np.zeros(nb, np.int64)
    lq = np.empty((nb, cap, d))
    lstart = np.zeros((nb, cap), np.int64)
    llen = np.zeros((nb, cap), np.int64)
    pool = np.empty(1024, np.int64)
    npool = 0
    stack = np.empty(n + 1, np.int64)
    for qi in range(nq):
        q = queries[qi]
        q0 = nr
        sp = 0
        if n > 0:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            is_bucket = depth[node] == h_top
            if prune and _mindist(lo, hi, node, q) > r:
                stats[qi, S_PRUNED] += 1
                if trace:
                    lid = heap[node] - (1 << h_top) if is_bucket else -1
                    ev, nev = _ev_push(ev, nev, qi, PRUNE, node, lid, 0, 0, 0, 0)
                continue
            if is_bucket:
                s = size[node]
                lid = heap[node] - (1 << h_top)
                handled = False
                L = 0
                b = bucket_of[node]
                if use_approx:
                    L = lcount[b]
                    if L > 0:
                        best_l = 0
                        best_ld = np.inf
                        for j in range(L):
                            dl = _dist(lq[b, j], q)
                            if dl < best_ld:
                                best_ld = dl
                                best_l = j
                        stats[qi, S_LEADER] += L
                        stats[qi, S_DIST] += L
                        stats[qi, S_VISITED] += L
                        R = llen[b, best_l]
                        # an empty leader result is a valid radius answer, not a miss
                        if best_ld < thd:
                            st0 = lstart[b, best_l]
                            for j in range(R):
                                p = pool[st0 + j]
                                dd = _dist(pts[p], q)
                                if dd <= r:
                                    ri = _grow_i(ri, nr)
                                    rd = _grow_f(rd, nr)
                                    ri[nr] = p
                                    rd[nr] = dd
                                    nr += 1
                            stats[qi, S_FOLLOW] += R
                            stats[qi, S_DIST] += R
                            stats[qi, S_VISITED] += R
                            approx[qi] = True
                            handled = True
                            if trace:
                                ev, nev = _ev_push(ev, nev, qi, LEAF, node, lid, s, MODE_FOLLOWER, L, R)
                if not handled:
                    leader = use_approx and lcount[b] < cap
                    p0 = npool
                    nr0 = nr
                    for j in range(node, node + s):
                        p = perm[j]
                        dd = _dist(pts[p], q)
                        if dd <= r:
                            ri = _grow_i(ri, nr)
                            rd = _grow_f(rd, nr)
                            ri[nr] = p
                            rd[nr] = dd
                            nr += 1
                            if leader:
                                pool = _grow_i(pool, npool)
                                pool[npool] = p
                                npool += 1
                    stats[qi, S_LEAFSETS] += 1
                    stats[qi, S_LEAFPTS] += s
                    stats[qi, S_DIST] += s
                    stats[qi, S_VISITED] += s
                    mode = MODE_EXACT
                    if leader:
                        slot = lcount[b]
                        lq[b, slot, :] = q
                        lstart[b, slot] = p0
                        llen[b, slot] = npool - p0
                        lcount[b] += 1
                        mode = MODE_LEADER
                    if trace:
                        ev, nev = _ev_push(ev, nev, qi, LEAF, node, lid, s, mode, L, nr - nr0)
                continue
            p = perm[node]
            dd = _dist(pts[p], q)
            if dd <= r:
                ri = _grow_i(ri, nr)
                rd = _grow_f(rd, nr)
                ri[nr] = p
                rd[nr] = dd
                nr += 1
            stats[qi, S_VISITED] += 1
            stats[qi, S_DIST] += 1
            stats[qi, S_TOP] += 1
            if trace:
                ev, nev = _ev_push(ev, nev, qi, VISIT, node, -1, 0, 0, 0, 0)
            ax = axis[node]
            if q[ax] < pts[p, ax]:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            if far != -1:
                stack[sp] = far
                sp += 1
            if near != -1:
                stack[sp] = near
                sp += 1
        if nr - q0 > 1:
            order = np.argsort(ri[q0:nr])
            seg_i = ri[q0:nr][order]
            seg_d = rd[q0:nr][order]
            ri[q0:nr] = seg_i
            rd[q0:nr] = seg_d
        offs[qi + 1] = nr
    return offs, ri[:nr].copy(), rd[:nr].copy(), stats, approx, ev[:nev]
