"""Plain numpy reference implementations used as test oracles."""

import itertools

import numpy as np

EPS = 1e-7


def wbce(target, pred, X, eps=EPS):
    p = np.clip(pred, eps, 1 - eps)
    return float(np.mean(X * (-target * np.log(p) - (1 - target) * np.log(1 - p))))


def nit_loss(Q, N, M, X, eps=EPS):
    n = len(Q)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        total = sum(wbce(M[i], np.minimum(1.0, Q[i] + N[perm[i]]), X, eps) for i in range(n))
        if total < best:
            best, best_perm = total, perm
    return best, best_perm


def pit_loss(P, M, X, eps=EPS):
    n = len(P)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        total = sum(wbce(M[i], P[perm[i]], X, eps) for i in range(n))
        if total < best:
            best, best_perm = total, perm
    return best, best_perm


def noise_reg(N, gamma):
    return max(0.0, sum(float(np.mean(m)) for m in N) - gamma)


def random_instance(rng, n, T=None, F=None):
    T = T or int(rng.integers(1, 9))
    F = F or int(rng.integers(1, 9))
    Q = rng.uniform(0, 1, (n, T, F))
    N = rng.uniform(0, 1, (n, T, F)) * rng.uniform(0, 1)
    M = (rng.uniform(size=(n, T, F)) < 0.5).astype(float)
    X = rng.uniform(0, 2, (T, F))
    return Q, N, M, X


def finite_difference_check(model, loss_fn, count=24, h=1e-6, seed=0):
    """Compare autograd with central differences on ``count`` sampled parameter entries.

    Returns a list of (name, index, analytic, numeric).  ``loss_fn(model)``
    must be deterministic.
    """
    import torch

    model.zero_grad()
    loss_fn(model).backward()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    picks = []
    # cycle through the tensors in a random order, one entry per visit
    order = list(rng.permutation(len(params)))
    while len(picks) < count:
        picks.extend(order)
    out = []
    for i in picks[:count]:
        name, p = params[i]
        flat = int(rng.integers(p.numel()))
        analytic = p.grad.reshape(-1)[flat].item()
        with torch.no_grad():
            view = p.data.reshape(-1)
            orig = view[flat].item()
            view[flat] = orig + h
            up = loss_fn(model).item()
            view[flat] = orig - h
            down = loss_fn(model).item()
            view[flat] = orig
        out.append((name, flat, analytic, (up - down) / (2 * h)))
    return out


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
