"""Per-example loss terms expressed on raw logits and the rectifier output.

Each ``*_terms`` function returns the per-example values together with the
gradients w.r.t. the logits (and ``a_phi`` where relevant), ready to be fed
to :func:`rrlab.model.backward`.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .model import HeadOutputs
from .numkit import (bce_stopgrad, bce_stopgrad_grad, cross_entropy, cross_entropy_grad,
                     kl_divergence, kl_divergence_grad, softmax_t, softmax_t_backward,
                     StopGradScalar)

RR_MODES = ("rcon", "aphi-only", "conf-only")


def ce_terms(logits, y, tau: float = 1.0):
    p = softmax_t(logits, tau)
    vals = cross_entropy(p, y)
    return vals, softmax_t_backward(p, cross_entropy_grad(p, y), tau)


def kl_terms(logits_p, logits_q, tau: float = 1.0):
    """KL(softmax(p) || softmax(q)) with gradients flowing into both sides."""
    p = softmax_t(logits_p, tau)
    q = softmax_t(logits_q, tau)
    vals = kl_divergence(p, q)
    gp, gq = kl_divergence_grad(p, q)
    return vals, softmax_t_backward(p, gp, tau), softmax_t_backward(q, gq, tau)


def rr_terms(logits, a_phi, y, tau_rr: float = 1.0, mode: str = "rcon", detach: bool = True):
    """Rectified-rejection BCE between a prediction and the true-label
    probability, both read from ``softmax(logits / tau_rr)``.

    The prediction is ``conf * a_phi`` (``rcon``), ``a_phi`` alone
    (``aphi-only``) or ``conf`` alone (``conf-only``). With ``detach`` the
    training-time stop-gradients apply: the target never receives gradient and
    the confidence factor receives none on rows where ``y_m == y``. Without
    ``detach`` the full derivative is returned (used by attacks).

    Returns ``(values, d_logits, d_aphi)``.
    """
    if mode not in RR_MODES:
        raise InvalidArgumentError(f"unknown rr mode {mode!r}; expected one of {RR_MODES}")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    a = np.atleast_1d(np.asarray(a_phi, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    n = logits.shape[0]
    rows = np.arange(n)
    P = softmax_t(logits, tau_rr)
    ym = np.argmax(P, axis=1)
    conf = P[rows, ym]
    t = P[rows, y]
    if mode == "rcon":
        pred = conf * a
    elif mode == "aphi-only":
        pred = a
    else:
        pred = conf
    target = StopGradScalar(t, grad_enabled=not detach)
    vals = bce_stopgrad(pred, target)
    dpred, dt = bce_stopgrad_grad(pred, target)
    gP = np.zeros_like(P)
    if mode != "aphi-only":
        live = np.ones(n, dtype=bool) if not detach else ym != y
        factor = a if mode == "rcon" else 1.0
        np.add.at(gP, (rows, ym), np.where(live, dpred * factor, 0.0))
    if not detach:
        np.add.at(gP, (rows, y), dt)
    d_logits = softmax_t_backward(P, gP, tau_rr)
    if mode == "rcon":
        d_aphi = dpred * conf
    elif mode == "aphi-only":
        d_aphi = dpred
    else:
        d_aphi = np.zeros(n)
    return np.atleast_1d(vals), d_logits, d_aphi


def rr_loss(outputs: HeadOutputs, y: int, tau_rr: float = 1.0, mode: str = "rcon") -> float:
    """Value of the rectified-rejection loss for one forward output."""
    vals, _, _ = rr_terms(outputs.logits[None, :], outputs.a_phi, y, tau_rr, mode)
    return float(vals[0])


def rr_score(logits, a_phi, mode: str, tau: float = 1.0) -> np.ndarray:
    """The rejection metric that a given rr mode trains: R-Con, a_phi or confidence."""
    P = softmax_t(np.atleast_2d(logits), tau)
    conf = P.max(axis=1)
    if mode == "rcon":
        return conf * np.asarray(a_phi)
    if mode == "aphi-only":
        return np.asarray(a_phi, dtype=np.float64)
    if mode == "conf-only":
        return conf
    raise InvalidArgumentError(f"unknown rr mode {mode!r}")
