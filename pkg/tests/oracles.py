"""Slow, independent reference implementations used as test oracles.

These are deliberately written from the definitions, with loops and without
reusing the package's vectorized helpers.
"""

from __future__ import annotations

import math

import numpy as np

from rrlab.model import TwoHeadParams, forward_cache


def pairwise_auc(scores, correct) -> float:
    pos = [s for s, c in zip(scores, correct) if c]
    neg = [s for s, c in zip(scores, correct) if not c]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def brute_tpr(scores, correct, tpr):
    """Scan every candidate threshold, keep the largest one retaining at
    least ``tpr`` of the correct samples; return (threshold, accuracy)."""
    n_pos = sum(bool(c) for c in correct)
    best = None
    for t in sorted(set(scores)):
        kept_pos = sum(1 for s, c in zip(scores, correct) if c and s >= t)
        if kept_pos >= tpr * n_pos - 1e-9:
            best = t
    kept = [(s, c) for s, c in zip(scores, correct) if s >= best]
    return best, sum(c for _, c in kept) / len(kept)


def xi_grid_scan(a, a_star, resolution=1e-4):
    """Smallest grid xi in [0, 1) for which a satisfies either bound."""
    for k in range(int(round(1 / resolution))):
        xi = k * resolution
        if abs(a - a_star) <= xi / 2 + 1e-15:
            return xi
        if a > 0 and a_star > 0 and abs(math.log(a / a_star)) <= math.log(2 / (2 - xi)) + 1e-15:
            return xi
    return None


def softmax(z, tau=1.0):
    z = np.asarray(z, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bce(pred, target):
    pred = min(max(pred, 1e-6), 1 - 1e-6)
    return -(target * math.log(pred) + (1 - target) * math.log(1 - pred))


def with_tensors(base: TwoHeadParams, overrides: dict) -> TwoHeadParams:
    return TwoHeadParams(base.arch, type(base.tensors)((k, overrides.get(k, base[k])) for k in base.tensors))


def frozen_rr(params, base, X, y, mode, tau, bn_mode="train"):
    """Mean rr loss with stop-gradient quantities evaluated at ``base`` and
    frozen, so plain finite differences of this function give the gradient
    the trainer should produce."""
    live = forward_cache(params, X, bn_mode)
    ref = forward_cache(base, X, bn_mode)
    P = softmax(live.logits, tau)
    P0 = softmax(ref.logits, tau)
    total = 0.0
    for i in range(len(y)):
        ym = int(np.argmax(P0[i]))
        t = P0[i, y[i]]
        conf = P0[i, ym] if ym == y[i] else P[i, ym]
        pred = {"rcon": conf * live.a_phi[i], "aphi-only": live.a_phi[i], "conf-only": conf}[mode]
        total += bce(pred, t)
    return total / len(y)


def mean_ce(params, X, y, bn_mode="train"):
    P = softmax(forward_cache(params, X, bn_mode).logits)
    return float(np.mean([-math.log(P[i, y[i]]) for i in range(len(y))]))


def mean_kl(params, X1, X2, bn_mode="train"):
    p = softmax(forward_cache(params, X1, bn_mode).logits)
    q = softmax(forward_cache(params, X2, bn_mode).logits)
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


def kink_margin(params, X, bn_mode="train") -> float:
    """Smallest distance of any ReLU input to zero; central differences are
    only meaningful when this clears the perturbation's effect."""
    c = forward_cache(params, X, bn_mode)
    return float(min(np.abs(np.concatenate([p.ravel() for p in c.pre] + [c.bn_out.ravel()])).min(), np.inf))
