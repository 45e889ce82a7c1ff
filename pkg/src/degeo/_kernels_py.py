"""Pure-Python kernels.

Reference implementation of the compiled core in ``_kernels.pyx``.  Both
consume the numpy ``Generator`` stream in the same order (uniform for M,
normal for mu, gamma for sigma1_sq, normal for beta, [uniform for the second
M move,] gamma for sigma2_sq, two uniforms for rho), so a chain is
reproducible across backends.
"""

import math

import numpy as np

# columns of the per-candidate table
NB, SX, SXX, NFULL, NSINGLE = range(5)
COEF = 5  # nine coefficients follow: A0 A1 A2 B0 B1 B2 C0 C1 C2
TABLE_WIDTH = 14

# state vector layout
S_M, S_MU, S_S1, S_BETA, S_S2, S_RHO = range(6)


class KernelError(ArithmeticError):
    def __init__(self, iteration, what):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {what}")


def _rho_poly(table, m, rho):
    c = table[m, COEF:]
    r2 = rho * rho
    a = c[0] + c[1] * rho + c[2] * r2
    b = c[3] + c[4] * rho + c[5] * r2
    cc = c[6] + c[7] * rho + c[8] * r2
    return a, b, cc


def candidate_log_weights(table, totals, mu, s1, beta, s2, rho, r=0.0, s=1.0, collapse=False):
    """Log conditional weight of every candidate change point (up to a constant).

    With ``collapse`` the growth rate is integrated out against its
    ``N(r, s)`` prior, giving the weights of the blocked (M, beta) update.
    """
    n_all, sx_all, sxx_all = totals
    nb = table[:, NB]
    n_bg = n_all - nb
    ss = (sxx_all - table[:, SXX]) - 2.0 * mu * (sx_all - table[:, SX]) + n_bg * mu * mu
    ss = np.maximum(ss, 0.0)
    r2 = rho * rho
    c = table[:, COEF:]
    a = c[:, 0] + c[:, 1] * rho + c[:, 2] * r2
    b = c[:, 3] + c[:, 4] * rho + c[:, 5] * r2
    cc = c[:, 6] + c[:, 7] * rho + c[:, 8] * r2
    one_m_r2 = 1.0 - r2
    if collapse:
        lam = 1.0 / (one_m_r2 * s2)
        d = lam * a + 1.0 / s
        k = lam * b + r / s
        branch = -0.5 * lam * cc + k * k / (2.0 * d) - 0.5 * np.log(d)
    else:
        j = np.maximum(cc - 2.0 * beta * b + beta * beta * a, 0.0)
        branch = -j / (2.0 * one_m_r2 * s2)
    return (-0.5 * n_bg * math.log(s1) - ss / (2.0 * s1)
            - table[:, NFULL] * (math.log(s2) + 0.5 * math.log(one_m_r2))
            - 0.5 * table[:, NSINGLE] * math.log(s2)
            + branch)


def sigma2_collapsed_log_weights(table, totals, mu, s1, beta, rho, a_ig, b_ig, lg_shape):
    """Log weight of every candidate with sigma2_sq integrated out against its
    inverse-gamma prior; ``lg_shape`` holds ``lgamma(a + n_full + n_single/2)`` per row."""
    n_all, sx_all, sxx_all = totals
    n_bg = n_all - table[:, NB]
    ss = (sxx_all - table[:, SXX]) - 2.0 * mu * (sx_all - table[:, SX]) + n_bg * mu * mu
    ss = np.maximum(ss, 0.0)
    r2 = rho * rho
    c = table[:, COEF:]
    a = c[:, 0] + c[:, 1] * rho + c[:, 2] * r2
    b = c[:, 3] + c[:, 4] * rho + c[:, 5] * r2
    cc = c[:, 6] + c[:, 7] * rho + c[:, 8] * r2
    one_m_r2 = 1.0 - r2
    j = np.maximum(cc - 2.0 * beta * b + beta * beta * a, 0.0)
    shape = a_ig + table[:, NFULL] + 0.5 * table[:, NSINGLE]
    return (-0.5 * n_bg * math.log(s1) - ss / (2.0 * s1)
            - 0.5 * table[:, NFULL] * math.log(one_m_r2)
            + lg_shape - shape * np.log(b_ig + j / (2.0 * one_m_r2)))


def shape_lgamma(table, a_ig):
    return np.array([math.lgamma(a_ig + n + 0.5 * m)
                     for n, m in zip(table[:, NFULL], table[:, NSINGLE])])


def sample_log_weights(logw, u):
    """Index drawn from ``exp(logw)`` normalized, using the uniform ``u``."""
    top = np.max(logw)
    if not np.isfinite(top):
        return -1
    cum = np.cumsum(np.exp(logw - top))
    idx = int(np.searchsorted(cum, u * cum[-1], side="right"))
    return min(idx, len(logw) - 1)


def rho_grid(size):
    grid = (np.arange(size) + 0.5) / size
    return grid, np.log(grid), np.log1p(-grid), np.log1p(-grid * grid)


def rho_log_density(grid_terms, u_shape, v_shape, n_full, coef, beta, s2):
    grid, log_r, log_1mr, log_1mr2 = grid_terms
    r2 = grid * grid
    a = coef[0] + coef[1] * grid + coef[2] * r2
    b = coef[3] + coef[4] * grid + coef[5] * r2
    cc = coef[6] + coef[7] * grid + coef[8] * r2
    j = np.maximum(cc - 2.0 * beta * b + beta * beta * a, 0.0)
    return ((u_shape - 1.0) * log_r + (v_shape - 1.0) * log_1mr
            - 0.5 * n_full * log_1mr2 - j / (2.0 * (1.0 - r2) * s2))


def run_gibbs(rng, table, totals, hyper, state, n_iter, grid_size, collapse=True):
    """Advance one chain ``n_iter`` systematic scans; ``state`` is updated in place.

    With ``collapse`` the change point is moved twice per scan: first with
    beta integrated out (beta is then drawn from its full conditional after
    the mu and sigma1_sq steps, which do not involve beta, so the pair is an
    exact blocked draw), and again in the sigma2_sq slot with sigma2_sq
    integrated out, immediately followed by the sigma2_sq draw.  The stream
    order gains one uniform before the sigma2_sq gamma draw.

    Returns ``(m_trace, cont_trace)`` with ``cont_trace`` columns
    ``mu, sigma1_sq, sigma2_sq, beta, rho``.
    """
    g, h, a_ig, b_ig, r, s, p, q, u_b, v_b = hyper
    n_all, sx_all, sxx_all = totals
    grid_terms = rho_grid(grid_size)
    lg_shape = shape_lgamma(table, a_ig)
    m_trace = np.empty(n_iter, dtype=np.int64)
    cont = np.empty((n_iter, 5))
    m = int(state[S_M])
    mu, s1, beta, s2, rho = state[S_MU], state[S_S1], state[S_BETA], state[S_S2], state[S_RHO]
    for it in range(n_iter):
        # change point
        logw = candidate_log_weights(table, totals, mu, s1, beta, s2, rho, r, s, collapse)
        m = sample_log_weights(logw, rng.random())
        if m < 0:
            raise KernelError(it, "change-point weights are not finite")
        row = table[m]
        n_bg = n_all - row[NB]
        sum_bg = sx_all - row[SX]
        # background mean
        prec = 1.0 / q + n_bg / s1
        mean = (p / q + sum_bg / s1) / prec
        mu = mean + rng.standard_normal() / math.sqrt(prec)
        # background variance
        ss = (sxx_all - row[SXX]) - 2.0 * mu * sum_bg + n_bg * mu * mu
        if ss < 0.0:
            ss = 0.0
        s1 = (h + 0.5 * ss) / rng.standard_gamma(g + 0.5 * n_bg)
        # growth rate
        ca, cb, cc = _rho_poly(table, m, rho)
        scale = (1.0 - rho * rho) * s2
        d = 1.0 / s + ca / scale
        k = cb / scale + r / s
        beta = k / d + rng.standard_normal() / math.sqrt(d)
        # pair variance, drawn jointly with a second change-point move
        if collapse:
            logw = sigma2_collapsed_log_weights(table, totals, mu, s1, beta, rho, a_ig, b_ig, lg_shape)
            m = sample_log_weights(logw, rng.random())
            if m < 0:
                raise KernelError(it, "change-point weights are not finite")
            row = table[m]
            ca, cb, cc = _rho_poly(table, m, rho)
        j = cc - 2.0 * beta * cb + beta * beta * ca
        if j < 0.0:
            j = 0.0
        s2 = (b_ig + j / (2.0 * (1.0 - rho * rho))) / rng.standard_gamma(
            a_ig + row[NFULL] + 0.5 * row[NSINGLE])
        # sibling correlation on a grid
        logd = rho_log_density(grid_terms, u_b, v_b, row[NFULL], row[COEF:], beta, s2)
        cell = sample_log_weights(logd, rng.random())
        if cell < 0:
            raise KernelError(it, "rho density is not finite")
        rho = (cell + rng.random()) / grid_size
        rho = min(max(rho, 1e-12), 1.0 - 1e-12)
        if not (math.isfinite(mu) and math.isfinite(beta) and s1 > 0.0 and s2 > 0.0
                and math.isfinite(s1) and math.isfinite(s2)):
            raise KernelError(it, "non-finite parameter draw")
        m_trace[it] = m
        cont[it, 0] = mu
        cont[it, 1] = s1
        cont[it, 2] = s2
        cont[it, 3] = beta
        cont[it, 4] = rho
    state[S_M] = m
    state[S_MU], state[S_S1], state[S_BETA], state[S_S2], state[S_RHO] = mu, s1, beta, s2, rho
    return m_trace, cont


def farthest_ends(extreme, min_len, num, den):
    """For each start index, the last index of the longest qualifying window (-1: none).

    A window qualifies when it starts and ends on an extreme point, spans at
    least ``min_len`` points and ``extremes * den >= num * length``.
    """
    e = np.asarray(extreme, dtype=np.int64)
    n = e.size
    out = np.full(n, -1, dtype=np.int64)
    csum = np.concatenate(([0], np.cumsum(e)))
    for i in np.flatnonzero(e):
        j = np.arange(i + min_len - 1, n)
        if j.size == 0:
            break
        ok = (e[j] == 1) & ((csum[j + 1] - csum[i]) * den >= num * (j - i + 1))
        hits = np.flatnonzero(ok)
        if hits.size:
            out[i] = j[hits[-1]]
    return out
