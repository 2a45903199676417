"""Loop-and-``math`` re-implementation of the loss family, independent of the package.

Embeddings are lists of floats. ``online`` and ``target`` hold one row per
instance, ``queue`` the M negatives. Strict relational mode throughout.
"""
import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def normalize(v):
    n = math.sqrt(dot(v, v))
    return [x / n for x in v]


def _softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [x / s for x in e]


def online_probs(z1, z2, queue, tau):
    """Softmax over the positive target and the queue."""
    logits = [dot(z1, z2) / tau] + [dot(z1, q) / tau for q in queue]
    return _softmax(logits)


def relational_target(z2, queue, tau_m):
    """Zero on the positive slot, softmax over queue similarities."""
    return [0.0] + _softmax([dot(z2, q) / tau_m for q in queue])


def sce(online, target, queue, lam, tau, tau_m):
    total = 0.0
    for z1, z2 in zip(online, target):
        p = online_probs(z1, z2, queue, tau)
        s = relational_target(z2, queue, tau_m)
        w = [lam * (k == 0) + (1 - lam) * s[k] for k in range(len(p))]
        total -= sum(wk * math.log(pk) for wk, pk in zip(w, p))
    return total / len(online)


def infonce(online, target, queue, tau):
    return -sum(math.log(online_probs(z1, z2, queue, tau)[0]) for z1, z2 in zip(online, target)) / len(online)


def ressl(online, target, queue, tau, tau_m):
    total = 0.0
    for z1, z2 in zip(online, target):
        s = relational_target(z2, queue, tau_m)[1:]
        q = _softmax([dot(z1, k) / tau for k in queue])
        total -= sum(sk * math.log(qk) for sk, qk in zip(s, q))
    return total / len(online)


def ceil(online, target, queue, tau):
    total = 0.0
    for z1, z2 in zip(online, target):
        neg = sum(math.exp(dot(z1, k) / tau) for k in queue)
        full = neg + math.exp(dot(z1, z2) / tau)
        total -= math.log(neg / full)
    return total / len(online)
