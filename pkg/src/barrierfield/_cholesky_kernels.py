"""Numba kernels for sparse Cholesky factorization.

Ordering follows the approximate minimum degree algorithm of CSparse
(Davis, "Direct Methods for Sparse Linear Systems", 2006); two numeric
factorizations are provided, the up-looking variant driven by the
elimination tree and a left-looking supernodal one that does its work in
dense blocks.
All arrays are int64 / float64 and compressed-sparse-column.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _flip(i):
    return -i - 2


@njit(cache=True)
def _wclear(mark, lemax, w, n):
    if mark < 2 or (mark + lemax < 0):
        for k in range(n):
            if w[k] != 0:
                w[k] = 1
        mark = 2
    return mark


@njit(cache=True)
def _tdfs(j, k, head, nxt, post, stack):
    top = 0
    stack[0] = j
    while top >= 0:
        p = stack[top]
        i = head[p]
        if i == -1:
            top -= 1
            post[k] = p
            k += 1
        else:
            head[p] = nxt[i]
            top += 1
            stack[top] = i
    return k


@njit(cache=True)
def amd_order(n, Ap, Ai):
    """Approximate minimum degree ordering of a symmetric pattern.

    ``Ap, Ai`` hold both triangles of the pattern with the diagonal removed.
    Returns the permutation ``perm`` (new index -> old index).
    """
    cnz = Ap[n]
    dense = max(16, int(10.0 * np.sqrt(n)))
    dense = min(n - 2, dense)
    nzmax = cnz + cnz // 5 + 2 * n + 1
    Cp = np.empty(n + 1, np.int64)
    Cp[:] = Ap[: n + 1]
    Ci = np.empty(nzmax, np.int64)
    Ci[:cnz] = Ai[:cnz]

    P = np.empty(n + 1, np.int64)
    length = np.empty(n + 1, np.int64)
    nv = np.empty(n + 1, np.int64)
    nxt = np.empty(n + 1, np.int64)
    head = np.empty(n + 1, np.int64)
    elen = np.empty(n + 1, np.int64)
    degree = np.empty(n + 1, np.int64)
    w = np.empty(n + 1, np.int64)
    hhead = np.empty(n + 1, np.int64)
    last = P

    for k in range(n):
        length[k] = Cp[k + 1] - Cp[k]
    length[n] = 0
    for i in range(n + 1):
        head[i] = -1
        last[i] = -1
        nxt[i] = -1
        hhead[i] = -1
        nv[i] = 1
        w[i] = 1
        elen[i] = 0
        degree[i] = length[i]
    mark = _wclear(0, 0, w, n)
    elen[n] = -2
    Cp[n] = -1
    w[n] = 0
    nel = 0
    mindeg = 0
    lemax = 0

    for i in range(n):
        d = degree[i]
        if d == 0:
            elen[i] = -2
            nel += 1
            Cp[i] = -1
            w[i] = 0
        elif d > dense:
            nv[i] = 0
            elen[i] = -1
            nel += 1
            Cp[i] = _flip(n)
            nv[n] += 1
        else:
            if head[d] != -1:
                last[head[d]] = i
            nxt[i] = head[d]
            head[d] = i

    while nel < n:
        # select node of minimum approximate degree
        k = -1
        while mindeg < n:
            k = head[mindeg]
            if k != -1:
                break
            mindeg += 1
        if nxt[k] != -1:
            last[nxt[k]] = -1
        head[mindeg] = nxt[k]
        elenk = elen[k]
        nvk = nv[k]
        nel += nvk

        # garbage collection
        if elenk > 0 and cnz + mindeg >= nzmax:
            for j in range(n):
                p = Cp[j]
                if p >= 0:
                    Cp[j] = Ci[p]
                    Ci[p] = _flip(j)
            q = 0
            p = 0
            while p < cnz:
                j = _flip(Ci[p])
                p += 1
                if j >= 0:
                    Ci[q] = Cp[j]
                    Cp[j] = q
                    q += 1
                    for _ in range(length[j] - 1):
                        Ci[q] = Ci[p]
                        q += 1
                        p += 1
            cnz = q

        # construct new element
        dk = 0
        nv[k] = -nvk
        p = Cp[k]
        pk1 = p if elenk == 0 else cnz
        pk2 = pk1
        for k1 in range(1, elenk + 2):
            if k1 > elenk:
                e = k
                pj = p
                ln = length[k] - elenk
            else:
                e = Ci[p]
                p += 1
                pj = Cp[e]
                ln = length[e]
            for _ in range(ln):
                i = Ci[pj]
                pj += 1
                nvi = nv[i]
                if nvi <= 0:
                    continue
                dk += nvi
                nv[i] = -nvi
                Ci[pk2] = i
                pk2 += 1
                if nxt[i] != -1:
                    last[nxt[i]] = last[i]
                if last[i] != -1:
                    nxt[last[i]] = nxt[i]
                else:
                    head[degree[i]] = nxt[i]
            if e != k:
                Cp[e] = _flip(k)
                w[e] = 0
        if elenk != 0:
            cnz = pk2
        degree[k] = dk
        Cp[k] = pk1
        length[k] = pk2 - pk1
        elen[k] = -2

        # find set differences
        mark = _wclear(mark, lemax, w, n)
        for pk in range(pk1, pk2):
            i = Ci[pk]
            eln = elen[i]
            if eln <= 0:
                continue
            nvi = -nv[i]
            wnvi = mark - nvi
            for p in range(Cp[i], Cp[i] + eln):
                e = Ci[p]
                if w[e] >= mark:
                    w[e] -= nvi
                elif w[e] != 0:
                    w[e] = degree[e] + wnvi

        # degree update
        for pk in range(pk1, pk2):
            i = Ci[pk]
            p1 = Cp[i]
            p2 = p1 + elen[i] - 1
            pn = p1
            h = 0
            d = 0
            for p in range(p1, p2 + 1):
                e = Ci[p]
                if w[e] != 0:
                    dext = w[e] - mark
                    if dext > 0:
                        d += dext
                        Ci[pn] = e
                        pn += 1
                        h += e
                    else:
                        Cp[e] = _flip(k)
                        w[e] = 0
            elen[i] = pn - p1 + 1
            p3 = pn
            p4 = p1 + length[i]
            for p in range(p2 + 1, p4):
                j = Ci[p]
                nvj = nv[j]
                if nvj <= 0:
                    continue
                d += nvj
                Ci[pn] = j
                pn += 1
                h += j
            if d == 0:
                Cp[i] = _flip(k)
                nvi = -nv[i]
                dk -= nvi
                nvk += nvi
                nel += nvi
                nv[i] = 0
                elen[i] = -1
            else:
                degree[i] = min(degree[i], d)
                Ci[pn] = Ci[p3]
                Ci[p3] = Ci[p1]
                Ci[p1] = k
                length[i] = pn - p1 + 1
                h = h % n
                nxt[i] = hhead[h]
                hhead[h] = i
                last[i] = h
        degree[k] = dk
        lemax = max(lemax, dk)
        mark = _wclear(mark + lemax, lemax, w, n)

        # supernode detection
        for pk in range(pk1, pk2):
            i = Ci[pk]
            if nv[i] >= 0:
                continue
            h = last[i]
            i = hhead[h]
            hhead[h] = -1
            while i != -1 and nxt[i] != -1:
                ln = length[i]
                eln = elen[i]
                for p in range(Cp[i] + 1, Cp[i] + ln):
                    w[Ci[p]] = mark
                jlast = i
                j = nxt[i]
                while j != -1:
                    ok = (length[j] == ln) and (elen[j] == eln)
                    p = Cp[j] + 1
                    while ok and p <= Cp[j] + ln - 1:
                        if w[Ci[p]] != mark:
                            ok = False
                        p += 1
                    if ok:
                        Cp[j] = _flip(i)
                        nv[i] += nv[j]
                        nv[j] = 0
                        elen[j] = -1
                        j = nxt[j]
                        nxt[jlast] = j
                    else:
                        jlast = j
                        j = nxt[j]
                i = nxt[i]
                mark += 1

        # finalize new element
        p = pk1
        for pk in range(pk1, pk2):
            i = Ci[pk]
            nvi = -nv[i]
            if nvi <= 0:
                continue
            nv[i] = nvi
            d = degree[i] + dk - nvi
            d = min(d, n - nel - nvi)
            if head[d] != -1:
                last[head[d]] = i
            nxt[i] = head[d]
            last[i] = -1
            head[d] = i
            mindeg = min(mindeg, d)
            degree[i] = d
            Ci[p] = i
            p += 1
        nv[k] = nvk
        length[k] = p - pk1
        if length[k] == 0:
            Cp[k] = -1
            w[k] = 0
        if elenk != 0:
            cnz = p

    # postorder the assembly tree
    for i in range(n):
        Cp[i] = _flip(Cp[i])
    for j in range(n + 1):
        head[j] = -1
    for j in range(n, -1, -1):
        if nv[j] > 0:
            continue
        nxt[j] = head[Cp[j]]
        head[Cp[j]] = j
    for e in range(n, -1, -1):
        if nv[e] <= 0:
            continue
        if Cp[e] != -1:
            nxt[e] = head[Cp[e]]
            head[Cp[e]] = e
    k = 0
    for i in range(n + 1):
        if Cp[i] == -1:
            k = _tdfs(i, k, head, nxt, P, w)
    return P[:n].copy()


@njit(cache=True)
def etree_upper(n, Cp, Ci):
    """Elimination tree of a symmetric matrix given by its upper triangle."""
    parent = np.full(n, -1, np.int64)
    ancestor = np.full(n, -1, np.int64)
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(Cp, Ci, k, parent, s, flag):
    """Nonzero pattern of row k of L, written to s[top:n] in topological order."""
    n = parent.shape[0]
    top = n
    flag[k] = True
    for p in range(Cp[k], Cp[k + 1]):
        i = Ci[p]
        if i > k:
            continue
        ln = 0
        while not flag[i]:
            s[ln] = i
            ln += 1
            flag[i] = True
            i = parent[i]
        while ln > 0:
            top -= 1
            ln -= 1
            s[top] = s[ln]
    for p in range(top, n):
        flag[s[p]] = False
    flag[k] = False
    return top


@njit(cache=True)
def column_counts(n, Cp, Ci, parent):
    """Column counts of L (diagonal included) via row-pattern traversal."""
    counts = np.ones(n, np.int64)
    s = np.empty(n, np.int64)
    flag = np.zeros(n, np.bool_)
    for k in range(n):
        top = _ereach(Cp, Ci, k, parent, s, flag)
        for p in range(top, n):
            counts[s[p]] += 1
    return counts


@njit(cache=True)
def numeric_cholesky(n, Qp, Qi, Qx, perm, pinv, Cp, Ci, parent, Lp, Li, Lx):
    """Up-looking numeric Cholesky of C = Q[perm][:, perm].

    ``Qp, Qi, Qx`` is the full symmetric matrix in CSC; ``Cp, Ci`` the upper
    pattern of C from symbolic analysis (a superset of Q's permuted pattern).
    Fills ``Li, Lx`` in place. Returns -1 on success, else the failing column.
    """
    c = np.empty(n, np.int64)
    c[:] = Lp[:n]
    x = np.zeros(n)
    s = np.empty(n, np.int64)
    flag = np.zeros(n, np.bool_)
    for k in range(n):
        top = _ereach(Cp, Ci, k, parent, s, flag)
        col = perm[k]
        for p in range(Qp[col], Qp[col + 1]):
            i = pinv[Qi[p]]
            if i <= k:
                x[i] += Qx[p]
        d = x[k]
        x[k] = 0.0
        while top < n:
            i = s[top]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
            top += 1
        if not d > 0.0:
            return k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return -1


@njit(cache=True)
def symbolic_pattern(n, Cp, Ci, parent, Lp):
    """Row indices of every column of L, sorted with the diagonal first."""
    Li = np.empty(Lp[n], np.int64)
    c = np.empty(n, np.int64)
    c[:] = Lp[:n]
    s = np.empty(n, np.int64)
    flag = np.zeros(n, np.bool_)
    for k in range(n):
        top = _ereach(Cp, Ci, k, parent, s, flag)
        for p in range(top, n):
            i = s[p]
            Li[c[i]] = k
            c[i] += 1
        Li[c[k]] = k
        c[k] += 1
    return Li


@njit(cache=True)
def supernodes(n, parent, Lp):
    """Fundamental supernode partition: start column of each supernode plus ``n``.

    Column ``j + 1`` joins the supernode of ``j`` when it is the parent of
    ``j`` and its pattern is that of ``j`` without the diagonal.
    """
    starts = np.empty(n + 1, np.int64)
    ns = 0
    for j in range(n):
        if j == 0 or not (parent[j - 1] == j and Lp[j] - Lp[j - 1] == Lp[j + 1] - Lp[j] + 1):
            starts[ns] = j
            ns += 1
    starts[ns] = n
    return starts[: ns + 1].copy()


@njit(cache=True)
def supernodal_cholesky(n, Qp, Qi, Qx, perm, pinv, snode, Lp, Li, Lx):
    """Left-looking supernodal Cholesky of C = Q[perm][:, perm].

    ``Li`` is the precomputed pattern from :func:`symbolic_pattern`. The
    columns of one supernode share a trailing row set, so inside ``Lx`` they
    form a packed lower-trapezoidal column-major block; entry ``(a, t)`` of
    the block starting at column ``f`` sits at ``Lp[f + t] - t + a``.
    Returns -1 on success, else the failing column.
    """
    ns = snode.size - 1
    col2super = np.empty(n, np.int64)
    max_m = 0
    max_nc = 0
    for s in range(ns):
        for j in range(snode[s], snode[s + 1]):
            col2super[j] = s
        m = Lp[snode[s] + 1] - Lp[snode[s]]
        if m > max_m:
            max_m = m
        if snode[s + 1] - snode[s] > max_nc:
            max_nc = snode[s + 1] - snode[s]
    relmap = np.empty(n, np.int64)
    head = np.full(ns, -1, np.int64)
    nxt = np.full(ns, -1, np.int64)
    pos = np.zeros(ns, np.int64)
    U = np.empty(max_m * max_nc)

    for s in range(ns):
        f = snode[s]
        l = snode[s + 1]
        nc = l - f
        r0 = Lp[f]
        m = Lp[f + 1] - r0
        for a in range(m):
            relmap[Li[r0 + a]] = a
        for j in range(f, l):
            for p in range(Lp[j], Lp[j + 1]):
                Lx[p] = 0.0
        for j in range(f, l):
            base = Lp[j] - (j - f)
            col = perm[j]
            for p in range(Qp[col], Qp[col + 1]):
                i = pinv[Qi[p]]
                if i >= j:
                    Lx[base + relmap[i]] += Qx[p]

        # updates from every descendant supernode with rows in [f, l)
        d = head[s]
        head[s] = -1
        while d != -1:
            dnext = nxt[d]
            fd = snode[d]
            ncd = snode[d + 1] - fd
            rd = Lp[fd]
            md = Lp[fd + 1] - rd
            p0 = pos[d]
            p1 = p0
            while p1 < md and Li[rd + p1] < l:
                p1 += 1
            nrow = md - p0
            ncol = p1 - p0
            # zero-based loops over slices let LLVM vectorize the inner axpy
            for b in range(ncol):
                off = b * nrow
                ub = U[off + b: off + nrow]
                ub[:] = 0.0
                len_b = nrow - b
                for t in range(ncd):
                    bt = Lp[fd + t] - t + p0
                    lbt = Lx[bt + b]
                    if lbt == 0.0:
                        continue
                    xs = Lx[bt + b: bt + nrow]
                    for a in range(len_b):
                        ub[a] += xs[a] * lbt
            for b in range(ncol):
                cb = Li[rd + p0 + b] - f
                base = Lp[f + cb] - cb
                off = b * nrow
                for a in range(b, nrow):
                    Lx[base + relmap[Li[rd + p0 + a]]] -= U[off + a]
            pos[d] = p1
            if p1 < md:
                tgt = col2super[Li[rd + p1]]
                nxt[d] = head[tgt]
                head[tgt] = d
            d = dnext

        # dense factorization of the block itself
        for j in range(nc):
            bj = Lp[f + j] - j
            cj = Lx[bj + j: bj + m]
            len_j = m - j
            for k in range(j):
                bk = Lp[f + k] - k
                ljk = Lx[bk + j]
                if ljk == 0.0:
                    continue
                ck = Lx[bk + j: bk + m]
                for a in range(len_j):
                    cj[a] -= ck[a] * ljk
            djj = cj[0]
            if not djj > 0.0:
                return f + j
            djj = np.sqrt(djj)
            cj[0] = djj
            inv = 1.0 / djj
            for a in range(1, len_j):
                cj[a] *= inv
        if m > nc:
            pos[s] = nc
            tgt = col2super[Li[r0 + nc]]
            nxt[s] = head[tgt]
            head[tgt] = s
    return -1


@njit(cache=True)
def lsolve(n, Lp, Li, Lx, x):
    """Solve L y = x in place, one right-hand side per column of 2-D ``x``."""
    m = x.shape[1]
    for j in range(n):
        d = Lx[Lp[j]]
        for c in range(m):
            x[j, c] /= d
        for p in range(Lp[j] + 1, Lp[j + 1]):
            r = Li[p]
            v = Lx[p]
            for c in range(m):
                x[r, c] -= v * x[j, c]


@njit(cache=True)
def ltsolve(n, Lp, Li, Lx, x):
    """Solve L' y = x in place, one right-hand side per column of 2-D ``x``."""
    m = x.shape[1]
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j] + 1, Lp[j + 1]):
            r = Li[p]
            v = Lx[p]
            for c in range(m):
                x[j, c] -= v * x[r, c]
        d = Lx[Lp[j]]
        for c in range(m):
            x[j, c] /= d


@njit(cache=True)
def _find(Li, lo, hi, row):
    while lo < hi:
        mid = (lo + hi) // 2
        if Li[mid] < row:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def selected_inverse(n, Lp, Li, Lx):
    """Entries of C^{-1} on the pattern of L (Takahashi recursion).

    Row indices inside every column of L are sorted with the diagonal first.
    For column i, every k in its pattern has a column whose pattern contains
    all rows of column i below k, so the needed entries are gathered by
    walking column k once against a dense position map.
    """
    S = np.zeros(Lp[n])
    pos = np.full(n, -1, np.int64)
    acc = np.zeros(n)
    for i in range(n - 1, -1, -1):
        p0 = Lp[i]
        p1 = Lp[i + 1]
        lii = Lx[p0]
        for q in range(p0 + 1, p1):
            pos[Li[q]] = q
            acc[Li[q]] = 0.0
        for r in range(p0 + 1, p1):
            k = Li[r]
            lki = Lx[r]
            # diagonal of column k: pair (k, k)
            acc[k] += lki * S[Lp[k]]
            for t in range(Lp[k] + 1, Lp[k + 1]):
                j = Li[t]
                qj = pos[j]
                if qj < 0:
                    continue
                s_jk = S[t]
                acc[j] += lki * s_jk
                acc[k] += Lx[qj] * s_jk
        diag = 0.0
        for q in range(p0 + 1, p1):
            j = Li[q]
            S[q] = -acc[j] / lii
            diag += Lx[q] * S[q]
            pos[j] = -1
        S[p0] = 1.0 / (lii * lii) - diag / lii
    return S


@njit(cache=True)
def lookup(Lp, Li, S, rows, cols):
    """Read selected-inverse entries (rows[t], cols[t]) in permuted indices.

    Entries outside the pattern of L are reported as NaN.
    """
    out = np.empty(rows.shape[0])
    for t in range(rows.shape[0]):
        a = rows[t]
        b = cols[t]
        if a < b:
            a, b = b, a
        pos = _find(Li, Lp[b], Lp[b + 1], a)
        if pos < Lp[b + 1] and Li[pos] == a:
            out[t] = S[pos]
        else:
            out[t] = np.nan
    return out
