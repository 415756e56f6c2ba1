"""Compiled kernels for the constrained per-angle quadratic fit.

Free parameters are ``p = (a1, a2, a3, r)``; the linear coefficients follow
from the fixed angle as ``a4 = bx - r*dx`` and ``a5 = by - r*dy``.
Model pixels facing away from the light predict zero intensity with a zero
Jacobian row.
"""
import math

import numpy as np
from numba import njit

# termination codes
STEP_SMALL = 0
SSE_STALLED = 1
MAX_ITER = 2
DAMPING_LIMIT = 3
EXACT_FIT = 4


@njit(cache=True, inline="always")
def _pixel(a1, a2, a3, a4, a5, x, y, lx, ly, lz, dx, dy):
    nx = -2.0 * a1 * x - a3 * y - a4
    ny = -a3 * x - 2.0 * a2 * y - a5
    m2 = nx * nx + ny * ny + 1.0
    m = math.sqrt(m2)
    g = lx * nx + ly * ny + lz
    if g <= 0.0:
        return 0.0, 0.0, 0.0, 0.0, 0.0
    inten = g / m
    gx = lx / m - g * nx / (m * m2)
    gy = ly / m - g * ny / (m * m2)
    return (inten, -2.0 * x * gx, -2.0 * y * gy, -y * gx - x * gy, gx * dx + gy * dy)


@njit(cache=True)
def model_rows(p, xs, ys, lx, ly, lz, bx, by, dx, dy, out_i, out_j):
    a4 = bx - p[3] * dx
    a5 = by - p[3] * dy
    for i in range(xs.shape[0]):
        inten, j0, j1, j2, j3 = _pixel(p[0], p[1], p[2], a4, a5, xs[i], ys[i], lx, ly, lz, dx, dy)
        out_i[i] = inten
        out_j[i, 0] = j0
        out_j[i, 1] = j1
        out_j[i, 2] = j2
        out_j[i, 3] = j3


@njit(cache=True)
def _sse(p, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy):
    a4 = bx - p[3] * dx
    a5 = by - p[3] * dy
    s = 0.0
    for i in range(xs.shape[0]):
        if w[i] == 0.0:
            continue
        nx = -2.0 * p[0] * xs[i] - p[2] * ys[i] - a4
        ny = -p[2] * xs[i] - 2.0 * p[1] * ys[i] - a5
        g = lx * nx + ly * ny + lz
        inten = g / math.sqrt(nx * nx + ny * ny + 1.0) if g > 0.0 else 0.0
        res = io[i] - inten
        s += w[i] * res * res
    return s


@njit(cache=True)
def _normal_eqs(p, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy, jtj, jtr):
    a4 = bx - p[3] * dx
    a5 = by - p[3] * dy
    for u in range(4):
        jtr[u] = 0.0
        for v in range(4):
            jtj[u, v] = 0.0
    s = 0.0
    jr = np.empty(4)
    for i in range(xs.shape[0]):
        if w[i] == 0.0:
            continue
        inten, jr[0], jr[1], jr[2], jr[3] = _pixel(p[0], p[1], p[2], a4, a5, xs[i], ys[i],
                                                   lx, ly, lz, dx, dy)
        res = io[i] - inten
        s += w[i] * res * res
        for u in range(4):
            jtr[u] += w[i] * jr[u] * res
            for v in range(u, 4):
                jtj[u, v] += w[i] * jr[u] * jr[v]
    for u in range(4):
        for v in range(u):
            jtj[u, v] = jtj[v, u]
    return s


@njit(cache=True)
def _cholesky_solve(m, b, out):
    n = 4
    low = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            acc = m[i, j]
            for k in range(j):
                acc -= low[i, k] * low[j, k]
            if i == j:
                if acc <= 0.0:
                    return False
                low[i, i] = math.sqrt(acc)
            else:
                low[i, j] = acc / low[j, j]
    z = np.empty(n)
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= low[i, k] * z[k]
        z[i] = acc / low[i, i]
    for i in range(n - 1, -1, -1):
        acc = z[i]
        for k in range(i + 1, n):
            acc -= low[k, i] * out[k]
        out[i] = acc / low[i, i]
    return True


@njit(cache=True)
def lm_fit(p0, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy,
           r_min, max_iter, step_tol, rel_tol, mu0, mu_up, mu_down, mu_min, mu_max):
    """Damped Gauss-Newton with Marquardt diagonal scaling; returns (p, sse, iters, code)."""
    p = p0.copy()
    if p[3] < r_min:
        p[3] = r_min
    jtj = np.empty((4, 4))
    jtr = np.empty(4)
    damped = np.empty((4, 4))
    step = np.empty(4)
    trial = np.empty(4)
    sse = _normal_eqs(p, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy, jtj, jtr)
    mu = mu0
    code = MAX_ITER
    it = 0
    while it < max_iter:
        it += 1
        if sse == 0.0:
            code = EXACT_FIT
            break
        dmax = 0.0
        for u in range(4):
            if jtj[u, u] > dmax:
                dmax = jtj[u, u]
        floor = max(dmax * 1e-12, 1e-300)
        for u in range(4):
            for v in range(4):
                damped[u, v] = jtj[u, v]
            damped[u, u] += mu * max(jtj[u, u], floor)
        ok = _cholesky_solve(damped, jtr, step)
        if not ok:
            mu *= mu_up
            if mu > mu_max:
                code = DAMPING_LIMIT
                break
            continue
        norm = 0.0
        for u in range(4):
            trial[u] = p[u] + step[u]
        if trial[3] < r_min:
            trial[3] = r_min
        for u in range(4):
            norm += (trial[u] - p[u]) ** 2
        norm = math.sqrt(norm)
        if norm < step_tol:
            code = STEP_SMALL
            break
        new_sse = _sse(trial, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy)
        if new_sse < sse:
            decrease = (sse - new_sse) / sse
            for u in range(4):
                p[u] = trial[u]
            sse = _normal_eqs(p, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy, jtj, jtr)
            mu = max(mu * mu_down, mu_min)
            if decrease < rel_tol:
                code = SSE_STALLED
                break
        else:
            mu *= mu_up
            if mu > mu_max:
                code = DAMPING_LIMIT
                break
    return p, sse, it, code


@njit(cache=True)
def likelihood(p, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy, sigma_i_sq, sigma_n0_sq):
    """Negative log-likelihood of the observed pixels; nan if some variance is zero."""
    a4 = bx - p[3] * dx
    a5 = by - p[3] * dy
    planar = lx * lx + ly * ly
    total = 0.0
    for i in range(xs.shape[0]):
        if w[i] == 0.0:
            continue
        nx = -2.0 * p[0] * xs[i] - p[2] * ys[i] - a4
        ny = -p[2] * xs[i] - 2.0 * p[1] * ys[i] - a5
        m2 = nx * nx + ny * ny + 1.0
        g = lx * nx + ly * ny + lz
        inten = g / math.sqrt(m2) if g > 0.0 else 0.0
        var = sigma_i_sq + planar * sigma_n0_sq / m2
        if var <= 0.0:
            return np.nan
        res = io[i] - inten
        total += 0.5 * (math.log(var) + res * res / var)
    return total


@njit(cache=True)
def multi_start_fit(p0, starts, probe_iter, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy,
                    r_min, max_iter, step_tol, rel_tol, mu0, mu_up, mu_down, mu_min, mu_max):
    """Fit from ``p0`` plus every curvature offset in ``starts``; lowest SSE wins.

    The first start runs to completion.  Later starts get ``probe_iter``
    iterations and are only carried on if they already beat the best SSE.
    """
    best = p0.copy()
    e = np.inf
    it = 0
    code = MAX_ITER
    q0 = np.empty(4)
    for si in range(starts.shape[0]):
        for u in range(3):
            q0[u] = p0[u] + starts[si, u]
        q0[3] = p0[3]
        budget = max_iter if si == 0 else min(probe_iter, max_iter)
        q, eq, iq, cq = lm_fit(q0, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy, r_min, budget,
                               step_tol, rel_tol, mu0, mu_up, mu_down, mu_min, mu_max)
        it += iq
        if si > 0 and cq == MAX_ITER and iq < max_iter:
            if eq >= e:
                continue
            q, eq, iq, cq = lm_fit(q, io, w, xs, ys, lx, ly, lz, bx, by, dx, dy, r_min,
                                   max_iter - iq, step_tol, rel_tol, mu0, mu_up, mu_down,
                                   mu_min, mu_max)
            it += iq
        if eq < e:
            e = eq
            best = q
            code = cq
    return best, e, it, code


@njit(cache=True)
def fit_batch(p0, patch_index, intensities, weights, xs, ys, light, thetas, starts, probe_iter,
              r_min, max_iter, step_tol, rel_tol, mu0, mu_up, mu_down, mu_min, mu_max,
              sigma_i_sq, sigma_n0_sq):
    """Fit every (patch, angle) problem; row ``k`` uses patch ``patch_index[k]``."""
    m = p0.shape[0]
    lx, ly, lz = light[0], light[1], light[2]
    bx = -lx / lz
    by = -ly / lz
    params = np.empty((m, 4))
    sse = np.empty(m)
    cost = np.empty(m)
    iters = np.empty(m, dtype=np.int64)
    codes = np.empty(m, dtype=np.int64)
    for k in range(m):
        c = math.cos(thetas[k])
        s = math.sin(thetas[k])
        dx = -(lx / lz) * c + ly * s
        dy = -(ly / lz) * c - lx * s
        j = patch_index[k]
        p, e, it, code = multi_start_fit(p0[k], starts, probe_iter, intensities[j], weights[j],
                                         xs, ys, lx, ly, lz, bx, by, dx, dy, r_min, max_iter,
                                         step_tol, rel_tol, mu0, mu_up, mu_down, mu_min, mu_max)
        params[k] = p
        sse[k] = e
        iters[k] = it
        codes[k] = code
        cost[k] = likelihood(p, intensities[j], weights[j], xs, ys, lx, ly, lz,
                             bx, by, dx, dy, sigma_i_sq, sigma_n0_sq)
    return params, sse, cost, iters, codes
