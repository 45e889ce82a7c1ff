# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; mirror ``_kernels_py`` operation for operation.

Random variates come straight from the ``Generator``'s bit generator through
numpy's C distributions, so both backends consume the same stream.
"""

import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport log, exp, sqrt, isfinite
from numpy.random cimport bitgen_t

from ._kernels_py import KernelError, rho_grid, shape_lgamma

cnp.import_array()

cdef extern from "numpy/random/distributions.h":
    double random_standard_normal(bitgen_t *bitgen_state) nogil
    double random_standard_gamma(bitgen_t *bitgen_state, double shape) nogil
    double next_double(bitgen_t *bitgen_state) nogil

cdef enum:
    NB = 0
    SX = 1
    SXX = 2
    NFULL = 3
    NSINGLE = 4
    COEF = 5


cdef inline int _sample(double[::1] logw, Py_ssize_t n, double u, double[::1] cum) noexcept nogil:
    cdef Py_ssize_t i
    cdef double top = logw[0]
    cdef double acc = 0.0
    for i in range(1, n):
        if logw[i] > top:
            top = logw[i]
    if not isfinite(top):
        return -1
    for i in range(n):
        acc = acc + exp(logw[i] - top)
        cum[i] = acc
    cdef double target = u * cum[n - 1]
    for i in range(n):
        if cum[i] > target:
            return <int>i
    return <int>(n - 1)


cdef void _candidate_log_weights(double[:, ::1] table, double n_all, double sx_all,
                                 double sxx_all, double mu, double s1, double beta,
                                 double s2, double rho, double r, double s, int collapse,
                                 double[::1] out) noexcept nogil:
    cdef Py_ssize_t c, nc = table.shape[0]
    cdef double r2 = rho * rho
    cdef double one_m_r2 = 1.0 - r2
    cdef double log_s1 = log(s1)
    cdef double log_s2 = log(s2)
    cdef double half_log_1mr2 = 0.5 * log(one_m_r2)
    cdef double lam = 1.0 / (one_m_r2 * s2)
    cdef double n_bg, ss, a, b, cc, j, d, k, branch
    for c in range(nc):
        n_bg = n_all - table[c, NB]
        ss = (sxx_all - table[c, SXX]) - 2.0 * mu * (sx_all - table[c, SX]) + n_bg * mu * mu
        if ss < 0.0:
            ss = 0.0
        a = table[c, COEF] + table[c, COEF + 1] * rho + table[c, COEF + 2] * r2
        b = table[c, COEF + 3] + table[c, COEF + 4] * rho + table[c, COEF + 5] * r2
        cc = table[c, COEF + 6] + table[c, COEF + 7] * rho + table[c, COEF + 8] * r2
        if collapse:
            d = lam * a + 1.0 / s
            k = lam * b + r / s
            branch = -0.5 * lam * cc + k * k / (2.0 * d) - 0.5 * log(d)
        else:
            j = cc - 2.0 * beta * b + beta * beta * a
            if j < 0.0:
                j = 0.0
            branch = -j / (2.0 * one_m_r2 * s2)
        out[c] = (-0.5 * n_bg * log_s1 - ss / (2.0 * s1)
                  - table[c, NFULL] * (log_s2 + half_log_1mr2)
                  - 0.5 * table[c, NSINGLE] * log_s2
                  + branch)


def candidate_log_weights(table, totals, double mu, double s1, double beta, double s2, double rho,
                          double r=0.0, double s=1.0, bint collapse=False):
    cdef double[:, ::1] tab = np.ascontiguousarray(table, dtype=np.float64)
    out = np.empty(tab.shape[0])
    _candidate_log_weights(tab, totals[0], totals[1], totals[2], mu, s1, beta, s2, rho,
                           r, s, collapse, out)
    return out


cdef void _sigma2_collapsed_log_weights(double[:, ::1] table, double n_all, double sx_all,
                                        double sxx_all, double mu, double s1, double beta,
                                        double rho, double a_ig, double b_ig,
                                        double[::1] lg_shape, double[::1] out) noexcept nogil:
    cdef Py_ssize_t nc = table.shape[0], c
    cdef double log_s1 = log(s1)
    cdef double r2 = rho * rho
    cdef double one_m_r2 = 1.0 - r2
    cdef double log_1mr2 = log(one_m_r2)
    cdef double n_bg, ss, a, b, cc, j, shape
    for c in range(nc):
        n_bg = n_all - table[c, NB]
        ss = (sxx_all - table[c, SXX]) - 2.0 * mu * (sx_all - table[c, SX]) + n_bg * mu * mu
        if ss < 0.0:
            ss = 0.0
        a = table[c, COEF] + table[c, COEF + 1] * rho + table[c, COEF + 2] * r2
        b = table[c, COEF + 3] + table[c, COEF + 4] * rho + table[c, COEF + 5] * r2
        cc = table[c, COEF + 6] + table[c, COEF + 7] * rho + table[c, COEF + 8] * r2
        j = cc - 2.0 * beta * b + beta * beta * a
        if j < 0.0:
            j = 0.0
        shape = a_ig + table[c, NFULL] + 0.5 * table[c, NSINGLE]
        out[c] = (-0.5 * n_bg * log_s1 - ss / (2.0 * s1)
                  - 0.5 * table[c, NFULL] * log_1mr2
                  + lg_shape[c] - shape * log(b_ig + j / (2.0 * one_m_r2)))


def sigma2_collapsed_log_weights(table, totals, double mu, double s1, double beta, double rho,
                                 double a_ig, double b_ig, lg_shape):
    cdef double[:, ::1] tab = np.ascontiguousarray(table, dtype=np.float64)
    out = np.empty(tab.shape[0])
    _sigma2_collapsed_log_weights(tab, totals[0], totals[1], totals[2], mu, s1, beta, rho,
                                  a_ig, b_ig, np.ascontiguousarray(lg_shape, dtype=np.float64), out)
    return out


def sample_log_weights(logw, double u):
    cdef double[::1] lw = np.ascontiguousarray(logw, dtype=np.float64)
    cdef double[::1] cum = np.empty(lw.shape[0])
    return _sample(lw, lw.shape[0], u, cum)


def run_gibbs(rng, table, totals, hyper, double[::1] state, Py_ssize_t n_iter, Py_ssize_t grid_size,
              bint collapse=True):
    cdef double[:, ::1] tab = np.ascontiguousarray(table, dtype=np.float64)
    cdef double g = hyper[0], h = hyper[1], a_ig = hyper[2], b_ig = hyper[3]
    cdef double r = hyper[4], s = hyper[5], p = hyper[6], q = hyper[7]
    cdef double u_b = hyper[8], v_b = hyper[9]
    cdef double n_all = totals[0], sx_all = totals[1], sxx_all = totals[2]
    grid_arr, log_r_arr, log_1mr_arr, log_1mr2_arr = rho_grid(grid_size)
    cdef double[::1] grid = grid_arr
    cdef double[::1] log_r = log_r_arr
    cdef double[::1] log_1mr = log_1mr_arr
    cdef double[::1] log_1mr2 = log_1mr2_arr
    cdef Py_ssize_t nc = tab.shape[0]
    cdef double[::1] logw = np.empty(nc)
    cdef double[::1] cum_c = np.empty(nc)
    cdef double[::1] lg_shape = shape_lgamma(np.asarray(tab), a_ig)
    cdef double[::1] logd = np.empty(grid_size)
    cdef double[::1] cum_g = np.empty(grid_size)
    m_trace_arr = np.empty(n_iter, dtype=np.int64)
    cont_arr = np.empty((n_iter, 5))
    cdef cnp.int64_t[::1] m_trace = m_trace_arr
    cdef double[:, ::1] cont = cont_arr

    cdef bitgen_t *bg = <bitgen_t *> PyCapsule_GetPointer(rng.bit_generator.capsule, "BitGenerator")
    cdef int m = <int>state[0]
    cdef double mu = state[1], s1 = state[2], beta = state[3], s2 = state[4], rho = state[5]
    cdef double n_bg, sum_bg, prec, mean, ss, ca, cb, cc, scale, d, k, j, r2, rr, one_m_r2
    cdef Py_ssize_t it, i
    cdef int cell
    cdef int failed = 0
    cdef Py_ssize_t fail_at = 0

    with rng.bit_generator.lock:
        with nogil:
            for it in range(n_iter):
                _candidate_log_weights(tab, n_all, sx_all, sxx_all, mu, s1, beta, s2, rho, r, s,
                                       collapse, logw)
                m = _sample(logw, nc, next_double(bg), cum_c)
                if m < 0:
                    failed = 1
                    fail_at = it
                    break
                n_bg = n_all - tab[m, NB]
                sum_bg = sx_all - tab[m, SX]

                prec = 1.0 / q + n_bg / s1
                mean = (p / q + sum_bg / s1) / prec
                mu = mean + random_standard_normal(bg) / sqrt(prec)

                ss = (sxx_all - tab[m, SXX]) - 2.0 * mu * sum_bg + n_bg * mu * mu
                if ss < 0.0:
                    ss = 0.0
                s1 = (h + 0.5 * ss) / random_standard_gamma(bg, g + 0.5 * n_bg)

                r2 = rho * rho
                ca = tab[m, COEF] + tab[m, COEF + 1] * rho + tab[m, COEF + 2] * r2
                cb = tab[m, COEF + 3] + tab[m, COEF + 4] * rho + tab[m, COEF + 5] * r2
                cc = tab[m, COEF + 6] + tab[m, COEF + 7] * rho + tab[m, COEF + 8] * r2
                scale = (1.0 - rho * rho) * s2
                d = 1.0 / s + ca / scale
                k = cb / scale + r / s
                beta = k / d + random_standard_normal(bg) / sqrt(d)

                if collapse:
                    _sigma2_collapsed_log_weights(tab, n_all, sx_all, sxx_all, mu, s1, beta, rho,
                                                  a_ig, b_ig, lg_shape, logw)
                    m = _sample(logw, nc, next_double(bg), cum_c)
                    if m < 0:
                        failed = 1
                        fail_at = it
                        break
                    ca = tab[m, COEF] + tab[m, COEF + 1] * rho + tab[m, COEF + 2] * r2
                    cb = tab[m, COEF + 3] + tab[m, COEF + 4] * rho + tab[m, COEF + 5] * r2
                    cc = tab[m, COEF + 6] + tab[m, COEF + 7] * rho + tab[m, COEF + 8] * r2
                j = cc - 2.0 * beta * cb + beta * beta * ca
                if j < 0.0:
                    j = 0.0
                s2 = (b_ig + j / (2.0 * (1.0 - rho * rho))) / random_standard_gamma(
                    bg, a_ig + tab[m, NFULL] + 0.5 * tab[m, NSINGLE])

                for i in range(grid_size):
                    rr = grid[i] * grid[i]
                    ca = tab[m, COEF] + tab[m, COEF + 1] * grid[i] + tab[m, COEF + 2] * rr
                    cb = tab[m, COEF + 3] + tab[m, COEF + 4] * grid[i] + tab[m, COEF + 5] * rr
                    cc = tab[m, COEF + 6] + tab[m, COEF + 7] * grid[i] + tab[m, COEF + 8] * rr
                    j = cc - 2.0 * beta * cb + beta * beta * ca
                    if j < 0.0:
                        j = 0.0
                    logd[i] = ((u_b - 1.0) * log_r[i] + (v_b - 1.0) * log_1mr[i]
                               - 0.5 * tab[m, NFULL] * log_1mr2[i]
                               - j / (2.0 * (1.0 - rr) * s2))
                cell = _sample(logd, grid_size, next_double(bg), cum_g)
                if cell < 0:
                    failed = 2
                    fail_at = it
                    break
                rho = (cell + next_double(bg)) / grid_size
                if rho < 1e-12:
                    rho = 1e-12
                elif rho > 1.0 - 1e-12:
                    rho = 1.0 - 1e-12
                if not (isfinite(mu) and isfinite(beta) and s1 > 0.0 and s2 > 0.0
                        and isfinite(s1) and isfinite(s2)):
                    failed = 3
                    fail_at = it
                    break
                m_trace[it] = m
                cont[it, 0] = mu
                cont[it, 1] = s1
                cont[it, 2] = s2
                cont[it, 3] = beta
                cont[it, 4] = rho
    if failed == 1:
        raise KernelError(fail_at, "change-point weights are not finite")
    if failed == 2:
        raise KernelError(fail_at, "rho density is not finite")
    if failed == 3:
        raise KernelError(fail_at, "non-finite parameter draw")
    state[0] = m
    state[1] = mu
    state[2] = s1
    state[3] = beta
    state[4] = s2
    state[5] = rho
    return m_trace_arr, cont_arr


def farthest_ends(extreme, Py_ssize_t min_len, long num, long den):
    cdef cnp.int64_t[::1] e = np.ascontiguousarray(extreme, dtype=np.int64)
    cdef Py_ssize_t n = e.shape[0]
    cdef cnp.int64_t[::1] csum = np.zeros(n + 1, dtype=np.int64)
    out_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, jj
    for i in range(n):
        csum[i + 1] = csum[i] + e[i]
    for i in range(n):
        if e[i] == 0:
            continue
        for jj in range(n - 1, i + min_len - 2, -1):
            if e[jj] == 1 and (csum[jj + 1] - csum[i]) * den >= num * (jj - i + 1):
                out[i] = jj
                break
    return out_arr
