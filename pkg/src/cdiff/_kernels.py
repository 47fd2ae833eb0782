"""Compiled chains for the reflected and log-barrier walks.

These mirror :func:`cdiff.reflected.reflect_batch` and
:func:`cdiff.barrier.barrier_move`; the numpy versions are the reference and
tests check that both agree.  A single call advances a batch of rows through
one or many steps.  State is held coordinate-major, ``(d, n)``, so that the
innermost loops run over rows and vectorise; only rows that actually hit a
wall (reflection) or need step halving (retraction) drop to scalar code.

Recording: ``rec_order`` lists flat output slots sorted by step and
``rec_bounds[s]:rec_bounds[s + 1]`` are the slots filled after step ``s``
(1-based); slot ``idx`` belongs to row ``idx // kk``.
"""
import numpy as np
from numba import njit

# Status codes returned by the kernels.
OK = 0
RUNAWAY = 1
INFEASIBLE = 2
DEGENERATE = 3
STEP_FAILURE = 4


@njit(cache=True, error_model="numpy")
def _record(x, step, rec_order, rec_bounds, out, kk):
    d = x.shape[0]
    for pos in range(rec_bounds[step], rec_bounds[step + 1]):
        idx = rec_order[pos]
        i = idx // kk
        for j in range(d):
            out[idx, j] = x[j, i]


@njit(cache=True, error_model="numpy")
def reflect_chain(X, V, scale, n_steps, rec_order, rec_bounds, out, kk, n_periodic,
                  A, b, C, R, max_bounces, grazing, corner, nudge, bounces):
    """Reflected moves: step ``k`` displaces row ``i`` by ``scale[k] * V[k, :, i]``.

    ``X`` is ``(d, n)`` and is updated in place.  The last ``n_periodic``
    coordinates translate and wrap modulo ``2 pi``.
    """
    d, n = X.shape
    dc = d - n_periodic
    m = A.shape[0]
    q = C.shape[0]
    two_pi = 2.0 * np.pi
    S = np.empty((dc, n))
    ell = np.empty(n)
    tmin = np.empty(n)
    den = np.empty(n)
    sl = np.empty(n)
    s = np.empty(dc)
    x = np.empty(dc)
    nrm = np.empty(dc)
    tb = np.empty(m + q)
    hb = np.empty(m + q)
    for step in range(n_steps):
        sc = scale[step]
        if dc > 0:
            for i in range(n):
                ell[i] = 0.0
                tmin[i] = np.inf
            for j in range(dc):
                for i in range(n):
                    S[j, i] = sc * V[step, j, i]
                    ell[i] += S[j, i] * S[j, i]
            for i in range(n):
                ell[i] = np.sqrt(ell[i])
            for j in range(dc):
                for i in range(n):
                    S[j, i] = S[j, i] / ell[i] if ell[i] > 0.0 else 0.0
            # vectorised first-hit distances (linear faces only)
            for k in range(m):
                for i in range(n):
                    den[i] = 0.0
                    sl[i] = b[k]
                for j in range(dc):
                    a = A[k, j]
                    for i in range(n):
                        den[i] += a * S[j, i]
                        sl[i] -= a * X[j, i]
                for i in range(n):
                    if den[i] > grazing:
                        t = sl[i] / den[i] if sl[i] > 0.0 else 0.0
                        if t < tmin[i]:
                            tmin[i] = t
            for i in range(n):
                if ell[i] == 0.0:
                    continue
                if q == 0 and ell[i] <= tmin[i]:
                    for j in range(dc):
                        X[j, i] += ell[i] * S[j, i]
                    continue
                # scalar path: spheres present or a wall is reached
                rem = ell[i]
                for j in range(dc):
                    x[j] = X[j, i]
                    s[j] = S[j, i]
                count = 0
                while True:
                    tm = np.inf
                    for k in range(m):
                        dn = 0.0
                        sk = b[k]
                        for j in range(dc):
                            dn += A[k, j] * s[j]
                            sk -= A[k, j] * x[j]
                        t = np.inf
                        if dn > grazing:
                            t = sk / dn if sk > 0.0 else 0.0
                        tb[k] = t
                        hb[k] = dn
                        if t < tm:
                            tm = t
                    for k in range(q):
                        p = 0.0
                        c = 0.0
                        for j in range(dc):
                            dj = x[j] - C[k, j]
                            p += s[j] * dj
                            c += dj * dj
                        c -= R[k] * R[k]
                        disc = p * p - c
                        t = np.inf
                        if disc >= 0.0:
                            root = np.sqrt(disc)
                            # stable positive root of t^2 + 2 p t + c = 0
                            t = -c / (p + root) if p > 0.0 else root - p
                            if t < 0.0:
                                t = 0.0
                        tb[m + k] = t
                        hb[m + k] = abs((p + t) / R[k])
                        if t < tm:
                            tm = t
                    if rem <= tm:
                        for j in range(dc):
                            x[j] += rem * s[j]
                        break
                    # most head-on face among near-ties
                    hit = -1
                    best = -1.0
                    for k in range(m + q):
                        if tb[k] <= tm + corner and hb[k] > best:
                            best = hb[k]
                            hit = k
                    for j in range(dc):
                        x[j] += tm * s[j]
                    if hit < m:
                        for j in range(dc):
                            nrm[j] = A[hit, j]
                    else:
                        nn = 0.0
                        for j in range(dc):
                            nrm[j] = x[j] - C[hit - m, j]
                            nn += nrm[j] * nrm[j]
                        nn = np.sqrt(nn)
                        for j in range(dc):
                            nrm[j] /= nn
                    dot = 0.0
                    for j in range(dc):
                        dot += s[j] * nrm[j]
                    for j in range(dc):
                        s[j] -= 2.0 * dot * nrm[j]
                        x[j] -= nudge * nrm[j]
                    rem -= tm
                    count += 1
                    if count > max_bounces:
                        return RUNAWAY
                for j in range(dc):
                    X[j, i] = x[j]
                bounces[i] += count
        for j in range(dc, d):
            for i in range(n):
                X[j, i] = (X[j, i] + sc * V[step, j, i]) % two_pi
        _record(X, step + 1, rec_order, rec_bounds, out, kk)
    return OK


@njit(cache=True, error_model="numpy")
def barrier_chain(X, Z, S, gb, mult, noise, use_score, n_steps, rec_order, rec_bounds, out, kk,
                  n_periodic, A, b, gamma, eps, max_halvings):
    """Log-barrier geodesic random walk.

    On the constrained block each step moves by ``W = L^-T [gb/2 (-2 Y (s^-3 h))
    + gb mult L^-1 S + sqrt(gb) noise Z]`` with ``g = A^T S^-2 A = L L^T`` and
    ``Y = L^-1 A^T``, followed by the step-halving retraction; periodic
    coordinates move by ``gb mult S + sqrt(gb) noise Z`` and wrap.  ``X`` and
    ``S`` are ``(d, n)``, ``Z`` is ``(steps, d, n)`` and ``gb`` is ``(1, steps)``
    (shared) or ``(n, steps)``.
    """
    d, n = X.shape
    dc = d - n_periodic
    m = A.shape[0]
    shared = gb.shape[0] == 1
    two_pi = 2.0 * np.pi
    sl = np.empty((m, n))
    is2 = np.empty((m, n))
    g = np.empty((dc, dc, n))
    L = np.zeros((dc, dc, n))
    idg = np.empty((dc, n))
    Y = np.empty((dc, m, n))
    u = np.empty((dc, n))
    w = np.empty((dc, n))
    acc = np.empty(n)
    h = np.empty(n)
    dist = np.empty(n)
    low = np.empty(n)
    gbv = np.empty(n)
    sqv = np.empty(n)
    dmv = np.empty(n)
    margin0 = eps * np.sqrt(gamma)
    for step in range(n_steps):
        for i in range(n):
            gbv[i] = gb[0, step] if shared else gb[i, step]
            sqv[i] = np.sqrt(gbv[i]) * noise[i]
            dmv[i] = gbv[i] * mult[i]
        if dc > 0:
            for i in range(n):
                dist[i] = np.inf
            bad = False
            for k in range(m):
                for i in range(n):
                    sl[k, i] = b[k]
                for j in range(dc):
                    a = A[k, j]
                    for i in range(n):
                        sl[k, i] -= a * X[j, i]
                for i in range(n):
                    bad |= not sl[k, i] > 0.0
                    dist[i] = min(dist[i], sl[k, i])
                    inv = 1.0 / sl[k, i]
                    is2[k, i] = inv * inv
            if bad:
                return INFEASIBLE
            for r in range(dc):
                for c in range(r + 1):
                    for i in range(n):
                        g[r, c, i] = 0.0
                    for k in range(m):
                        a = A[k, r] * A[k, c]
                        for i in range(n):
                            g[r, c, i] += a * is2[k, i]
            for c in range(dc):
                for i in range(n):
                    acc[i] = g[c, c, i]
                for k in range(c):
                    for i in range(n):
                        acc[i] -= L[c, k, i] * L[c, k, i]
                for i in range(n):
                    bad |= not acc[i] > 0.0
                    L[c, c, i] = np.sqrt(acc[i])
                    idg[c, i] = 1.0 / L[c, c, i]
                if bad:
                    return DEGENERATE
                for r in range(c + 1, dc):
                    for i in range(n):
                        acc[i] = g[r, c, i]
                    for k in range(c):
                        for i in range(n):
                            acc[i] -= L[r, k, i] * L[c, k, i]
                    for i in range(n):
                        L[r, c, i] = acc[i] * idg[c, i]
            # Y = L^-1 A^T
            for k in range(m):
                for r in range(dc):
                    a = A[k, r]
                    for i in range(n):
                        acc[i] = a
                    for c in range(r):
                        for i in range(n):
                            acc[i] -= L[r, c, i] * Y[c, k, i]
                    for i in range(n):
                        Y[r, k, i] = acc[i] * idg[r, i]
            for r in range(dc):
                for i in range(n):
                    u[r, i] = sqv[i] * Z[step, r, i]
            # u += gb/2 (-2 Y (s^-3 h))
            for k in range(m):
                for i in range(n):
                    h[i] = 0.0
                for r in range(dc):
                    for i in range(n):
                        h[i] += Y[r, k, i] * Y[r, k, i]
                for i in range(n):
                    h[i] *= -gbv[i] * is2[k, i] / sl[k, i]
                for r in range(dc):
                    for i in range(n):
                        u[r, i] += h[i] * Y[r, k, i]
            if use_score:
                # u += gb mult L^-1 S
                for r in range(dc):
                    for i in range(n):
                        acc[i] = S[r, i]
                    for c in range(r):
                        for i in range(n):
                            acc[i] -= L[r, c, i] * w[c, i]
                    for i in range(n):
                        w[r, i] = acc[i] * idg[r, i]
                for r in range(dc):
                    for i in range(n):
                        u[r, i] += dmv[i] * w[r, i]
            # w = L^-T u
            for r in range(dc - 1, -1, -1):
                for i in range(n):
                    acc[i] = u[r, i]
                for c in range(r + 1, dc):
                    for i in range(n):
                        acc[i] -= L[c, r, i] * w[c, i]
                for i in range(n):
                    w[r, i] = acc[i] * idg[r, i]
            # retraction: keep slack >= min(eps sqrt(gamma), dist / 2)
            for i in range(n):
                low[i] = np.inf
            for k in range(m):
                for i in range(n):
                    acc[i] = b[k]
                for j in range(dc):
                    a = A[k, j]
                    for i in range(n):
                        acc[i] -= a * (X[j, i] + w[j, i])
                for i in range(n):
                    low[i] = min(low[i], acc[i])
            for i in range(n):
                margin = min(margin0, 0.5 * dist[i])
                if not low[i] >= margin:
                    halvings = 0
                    while True:
                        halvings += 1
                        if halvings > max_halvings:
                            return STEP_FAILURE
                        for j in range(dc):
                            w[j, i] *= 0.5
                        lo = np.inf
                        for k in range(m):
                            v = b[k]
                            for j in range(dc):
                                v -= A[k, j] * (X[j, i] + w[j, i])
                            lo = min(lo, v)
                        if lo >= margin:
                            break
            for j in range(dc):
                for i in range(n):
                    X[j, i] += w[j, i]
        for j in range(dc, d):
            for i in range(n):
                v = X[j, i] + sqv[i] * Z[step, j, i]
                if use_score:
                    v += dmv[i] * S[j, i]
                X[j, i] = v % two_pi
        _record(X, step + 1, rec_order, rec_bounds, out, kk)
    return OK
