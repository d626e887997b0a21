"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and in-place semantics; used when the extension is not built
or when ``MCNB_FORCE_PYTHON=1`` is set.
"""
import numpy as np


def _layers(theta, d, m, L):
    mats = [theta[: m * d].reshape(m, d)]
    off = m * d
    for _ in range(L - 2):
        mats.append(theta[off : off + m * m].reshape(m, m))
        off += m * m
    mats.append(theta[off : off + m])
    return mats


def _hidden(mats, x):
    hs = []
    h = x
    for w in mats[:-1]:
        h = np.maximum(w @ h, 0.0)
        hs.append(h)
    return hs


def forward(theta, x, d, m, L):
    mats = _layers(theta, d, m, L)
    return float(mats[-1] @ _hidden(mats, x)[-1])


def gradient(theta, x, d, m, L, out):
    mats = _layers(theta, d, m, L)
    hs = _hidden(mats, x)
    grads = _layers(out, d, m, L)
    grads[-1][:] = hs[-1]
    delta = np.where(hs[-1] > 0.0, mats[-1], 0.0)
    for l in range(L - 2, 0, -1):
        inp = hs[l - 1]
        grads[l][:] = np.outer(delta, inp)
        delta = np.where(inp > 0.0, mats[l].T @ delta, 0.0)
    grads[0][:] = np.outer(delta, x)
    return float(mats[-1] @ hs[-1])


def forward_many(thetas, x, d, m, L, out):
    n = thetas.shape[0]
    h = np.maximum(thetas[:, : m * d].reshape(n, m, d) @ x, 0.0)
    off = m * d
    for _ in range(L - 2):
        w = thetas[:, off : off + m * m].reshape(n, m, m)
        h = np.maximum(np.einsum("nij,nj->ni", w, h), 0.0)
        off += m * m
    out[:] = np.einsum("ni,ni->n", thetas[:, off : off + m], h)


def sgd_pass(theta, X, r, order, lr, d, m, L):
    g = np.empty_like(theta)
    for idx in order:
        f = gradient(theta, X[idx], d, m, L, g)
        theta -= (lr * (f - r[idx])) * g


def adam_pass(theta, mom1, mom2, step, X, r, order, lr, beta1, beta2, eps, d, m, L):
    g = np.empty_like(theta)
    for idx in order:
        f = gradient(theta, X[idx], d, m, L, g)
        g *= f - r[idx]
        step += 1
        c1 = 1.0 - beta1 ** step
        c2 = 1.0 - beta2 ** step
        mom1 *= beta1
        mom1 += (1.0 - beta1) * g
        mom2 *= beta2
        mom2 += (1.0 - beta2) * g * g
        theta -= lr * (mom1 / c1) / (np.sqrt(mom2 / c2) + eps)
    return step


def mean_loss_grad(theta, X, r, idx, d, m, L, out):
    out[:] = 0.0
    g = np.empty_like(theta)
    loss = 0.0
    for j in idx:
        f = gradient(theta, X[j], d, m, L, g)
        res = f - r[j]
        loss += 0.5 * res * res
        out += res * g
    out /= len(idx)
    return loss / len(idx)
