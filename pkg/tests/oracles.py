"""Reference computations written independently of the package internals."""

import itertools
import math

import numpy as np


def cofactor_det(A):
    A = [list(row) for row in A]
    n = len(A)
    if n == 1:
        return A[0][0]
    if n == 2:
        return A[0][0] * A[1][1] - A[0][1] * A[1][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in A[1:]]
        total += (-1) ** j * A[0][j] * cofactor_det(minor)
    return total


def direct_log_density(yt, ytm1, rho, gamma, delta, phi, sigma2, W):
    """Gaussian log-density of Y_t given Y_{t-1} with an explicit Jacobian determinant."""
    n = len(yt)
    A = np.eye(n) - rho * W
    u = A @ yt - gamma * ytm1 - delta * (W @ ytm1) - phi
    quad = sum(ui * ui for ui in u)
    det = cofactor_det(A)
    return math.log(abs(det)) - 0.5 * n * math.log(2 * math.pi * sigma2) - quad / (2 * sigma2)


def enumerate_paths(Y, regimes, p, q, sigma2, W, init):
    """Brute-force marginal log-likelihood and posterior P(s_t | all data).

    Sums over all 2^T regime paths; period 1 carries no density, only its
    prior ``init``. ``regimes`` is a pair of (rho, gamma, delta, phi).
    """
    n, T = Y.shape
    # trans[i][j] = P(s_t = j | s_{t-1} = i)
    trans = [[p, 1 - p], [1 - q, q]]
    dens = [[direct_log_density(Y[:, t], Y[:, t - 1], *regimes[s], sigma2, W) for s in (0, 1)]
            for t in range(1, T)]
    logw = []
    paths = list(itertools.product((0, 1), repeat=T))
    for path in paths:
        if init[path[0]] == 0:
            logw.append(-math.inf)
            continue
        lw = math.log(init[path[0]])
        for t in range(1, T):
            pr = trans[path[t - 1]][path[t]]
            if pr == 0:
                lw = -math.inf
                break
            lw += math.log(pr) + dens[t - 1][path[t]]
        logw.append(lw)
    logw = np.array(logw)
    m = logw.max()
    total = m + math.log(np.exp(logw - m).sum())
    post = np.zeros((T, 2))
    weights = np.exp(logw - total)
    for path, wgt in zip(paths, weights):
        for t, s in enumerate(path):
            post[t, s] += wgt
    return total, post


def random_row_normalized(n, rng):
    W = (rng.random((n, n)) < 0.6).astype(float)
    np.fill_diagonal(W, 0.0)
    for i in range(n):
        if n > 1 and W[i].sum() == 0:
            W[i, (i + 1) % n] = 1.0
    sums = W.sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    return W / sums
