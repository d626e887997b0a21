# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward/backward kernels for the flat-parameter ReLU network.

Parameter layout (row-major): W_1 (m x d), W_2 .. W_{L-1} (m x m), W_L (m,).
Every function here has a numpy twin in ``_fallback.py`` with the same
signature; the two are checked against each other in the test-suite.
"""
from libc.math cimport pow, sqrt
from libc.stdlib cimport malloc, free


cdef inline Py_ssize_t _offset(int layer, int d, int m) noexcept nogil:
    # start of W_{layer+1} (0-based layer index) in the flat vector
    if layer == 0:
        return 0
    return <Py_ssize_t>m * d + <Py_ssize_t>(layer - 1) * m * m


cdef double _forward(const double* theta, const double* x, int d, int m, int L,
                     double* h) noexcept nogil:
    """Fill h[(L-1) * m] with hidden activations and return f(x)."""
    cdef Py_ssize_t j, k, off
    cdef int l
    cdef double s
    cdef const double* w
    cdef const double* inp
    for j in range(m):
        w = theta + <Py_ssize_t>j * d
        s = 0.0
        for k in range(d):
            s += w[k] * x[k]
        h[j] = s if s > 0.0 else 0.0
    for l in range(1, L - 1):
        off = _offset(l, d, m)
        inp = h + <Py_ssize_t>(l - 1) * m
        for j in range(m):
            w = theta + off + j * m
            s = 0.0
            for k in range(m):
                s += w[k] * inp[k]
            h[<Py_ssize_t>l * m + j] = s if s > 0.0 else 0.0
    off = _offset(L - 1, d, m)
    inp = h + <Py_ssize_t>(L - 2) * m
    s = 0.0
    for j in range(m):
        s += theta[off + j] * inp[j]
    return s


cdef double _gradient(const double* theta, const double* x, int d, int m, int L,
                      double* h, double* delta, double* delta_prev,
                      double* grad) noexcept nogil:
    """Write df/dtheta into grad (length p) and return f(x)."""
    cdef double f = _forward(theta, x, d, m, L, h)
    cdef Py_ssize_t j, k, off
    cdef int l
    cdef double dj, s
    cdef double* tmp
    cdef const double* inp
    off = _offset(L - 1, d, m)
    inp = h + <Py_ssize_t>(L - 2) * m
    for j in range(m):
        grad[off + j] = inp[j]
        # ReLU mask of the last hidden layer; subgradient at 0 is 0
        delta[j] = theta[off + j] if inp[j] > 0.0 else 0.0
    for l in range(L - 2, 0, -1):
        off = _offset(l, d, m)
        inp = h + <Py_ssize_t>(l - 1) * m
        for j in range(m):
            dj = delta[j]
            for k in range(m):
                grad[off + j * m + k] = dj * inp[k]
        # delta_prev = mask * (W^T delta), accumulated row by row for contiguous reads
        for k in range(m):
            delta_prev[k] = 0.0
        for j in range(m):
            dj = delta[j]
            if dj != 0.0:
                for k in range(m):
                    delta_prev[k] += theta[off + j * m + k] * dj
        for k in range(m):
            if not inp[k] > 0.0:
                delta_prev[k] = 0.0
        tmp = delta
        delta = delta_prev
        delta_prev = tmp
    for j in range(m):
        dj = delta[j]
        for k in range(d):
            grad[j * d + k] = dj * x[k]
    return f


cdef class _Workspace:
    cdef double* h
    cdef double* delta
    cdef double* delta_prev
    cdef double* grad

    def __cinit__(self, int m, int L, Py_ssize_t p):
        self.h = <double*>malloc(sizeof(double) * m * (L - 1))
        self.delta = <double*>malloc(sizeof(double) * m)
        self.delta_prev = <double*>malloc(sizeof(double) * m)
        self.grad = <double*>malloc(sizeof(double) * p)
        if not (self.h and self.delta and self.delta_prev and self.grad):
            raise MemoryError()

    def __dealloc__(self):
        free(self.h)
        free(self.delta)
        free(self.delta_prev)
        free(self.grad)


def forward(const double[::1] theta, const double[::1] x, int d, int m, int L):
    ws = _Workspace(m, L, 1)
    cdef _Workspace w = ws
    return _forward(&theta[0], &x[0], d, m, L, w.h)


def gradient(const double[::1] theta, const double[::1] x, int d, int m, int L,
             double[::1] out):
    ws = _Workspace(m, L, 1)
    cdef _Workspace w = ws
    return _gradient(&theta[0], &x[0], d, m, L, w.h, w.delta, w.delta_prev, &out[0])


def forward_many(const double[:, ::1] thetas, const double[::1] x, int d, int m,
                 int L, double[::1] out):
    """Evaluate n parameter vectors (rows of thetas) at one input."""
    ws = _Workspace(m, L, 1)
    cdef _Workspace w = ws
    cdef Py_ssize_t i
    with nogil:
        for i in range(thetas.shape[0]):
            out[i] = _forward(&thetas[i, 0], &x[0], d, m, L, w.h)


def sgd_pass(double[::1] theta, const double[:, ::1] X, const double[::1] r,
             const long[::1] order, double lr, int d, int m, int L):
    """Sequential per-sample plain-SGD steps on (f - r)^2 / 2, in place."""
    cdef Py_ssize_t p = theta.shape[0]
    ws = _Workspace(m, L, p)
    cdef _Workspace w = ws
    cdef Py_ssize_t n, i, idx
    cdef double f, res
    with nogil:
        for n in range(order.shape[0]):
            idx = order[n]
            f = _gradient(&theta[0], &X[idx, 0], d, m, L, w.h, w.delta,
                          w.delta_prev, w.grad)
            res = lr * (f - r[idx])
            for i in range(p):
                theta[i] -= res * w.grad[i]


def adam_pass(double[::1] theta, double[::1] mom1, double[::1] mom2, long step,
              const double[:, ::1] X, const double[::1] r, const long[::1] order,
              double lr, double beta1, double beta2, double eps,
              int d, int m, int L):
    """Sequential per-sample Adam steps, in place; returns the new step count."""
    cdef Py_ssize_t p = theta.shape[0]
    ws = _Workspace(m, L, p)
    cdef _Workspace w = ws
    cdef Py_ssize_t n, i, idx
    cdef double f, res, g, c1, c2
    with nogil:
        for n in range(order.shape[0]):
            idx = order[n]
            f = _gradient(&theta[0], &X[idx, 0], d, m, L, w.h, w.delta,
                          w.delta_prev, w.grad)
            res = f - r[idx]
            step += 1
            c1 = lr / (1.0 - pow(beta1, <double>step))
            c2 = 1.0 / (1.0 - pow(beta2, <double>step))
            for i in range(p):
                g = res * w.grad[i]
                mom1[i] = beta1 * mom1[i] + (1.0 - beta1) * g
                mom2[i] = beta2 * mom2[i] + (1.0 - beta2) * g * g
                theta[i] -= c1 * mom1[i] / (sqrt(mom2[i] * c2) + eps)
    return step


def mean_loss_grad(const double[::1] theta, const double[:, ::1] X,
                   const double[::1] r, const long[::1] idx, int d, int m, int L,
                   double[::1] out):
    """Average of (f - r) * grad f over rows X[idx]; returns the mean squared loss."""
    cdef Py_ssize_t p = theta.shape[0]
    ws = _Workspace(m, L, p)
    cdef _Workspace w = ws
    cdef Py_ssize_t n, i, j, cnt = idx.shape[0]
    cdef double f, res, loss = 0.0
    with nogil:
        for i in range(p):
            out[i] = 0.0
        for n in range(cnt):
            j = idx[n]
            f = _gradient(&theta[0], &X[j, 0], d, m, L, w.h, w.delta,
                          w.delta_prev, w.grad)
            res = f - r[j]
            loss += 0.5 * res * res
            for i in range(p):
                out[i] += res * w.grad[i]
        for i in range(p):
            out[i] /= cnt
    return loss / cnt
