"""First-order attacks on the two-head model.

``pgd`` runs projected gradient ascent in an L-inf or L2 ball with uniform
random starts and keeps, per example, the best of the clean point and every
restart's final iterate. Objectives (all maximized):

========== ==============================================
ce         cross-entropy of the true label
ce+rcon    ce + eta * log R-Con
ce+rr      ce + eta * L_RR
con+rr     -p[y] + eta * L_RR
con+rcon   -p[y] + eta * log R-Con
kl         KL(reference || f(x')), the TRADES inner loss
train      ce + eta * L_RR with eta = lambda (inner max that includes phi)
========== ==============================================

``L_RR`` here is the full (non-detached) BCE between R-Con and T-Con, so
raising it pulls R-Con away from T-Con; on misclassified points that means
raising R-Con above the true-label probability, i.e. evading rejection.
Attacks always run the batch-norm of the rectifier in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import AttackError, InvalidArgumentError
from .losses import ce_terms, kl_terms, rr_terms
from .model import TwoHeadParams, backward, forward_cache, outputs_from_cache
from .numkit import as_matrix, softmax_t, softmax_t_backward
from .seeding import derive_rng, derive_seed

ADAPTIVE_KINDS = ("ce", "ce+rcon", "ce+rr", "con+rr", "con+rcon")
OBJECTIVES = ADAPTIVE_KINDS + ("kl", "train")
RCON_EPS = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    eps: float = 0.1
    alpha: float = 0.025
    steps: int = 10
    restarts: int = 1
    objective: str = "ce"
    eta: float = 1.0
    seed: int = 0
    box: tuple[float, float] | None = None
    tau_rr: float = 1.0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise InvalidArgumentError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if not self.eps >= 0:
            raise InvalidArgumentError("eps must be >= 0")
        if not self.alpha > 0:
            raise InvalidArgumentError("alpha must be > 0")
        if self.steps < 0 or self.restarts < 1:
            raise InvalidArgumentError("need steps >= 0 and restarts >= 1")
        if self.objective not in OBJECTIVES:
            raise InvalidArgumentError(f"unknown objective {self.objective!r}")
        if self.box is not None and not self.box[0] < self.box[1]:
            raise InvalidArgumentError("box must be (low, high) with low < high")


@dataclass
class AttackResult:
    x_star: np.ndarray
    obj_value: np.ndarray
    success: np.ndarray
    y_m: np.ndarray
    r_con: np.ndarray
    confidence: np.ndarray
    eps: np.ndarray

    def csv(self, idx_offset: int = 0) -> str:
        lines = ["idx,success,eps,obj_value,rcon,conf"]
        for i in range(len(self.success)):
            lines.append(f"{i + idx_offset},{int(self.success[i])},{float(self.eps[i])!r},"
                         f"{float(self.obj_value[i])!r},{float(self.r_con[i])!r},{float(self.confidence[i])!r}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# objectives


def objective_terms(params: TwoHeadParams, X, y, kind: str, eta: float = 1.0, tau_rr: float = 1.0,
                    reference=None, need_grad: bool = True):
    """Value of objective ``kind`` per row and, if asked, its gradient w.r.t. ``X``."""
    if kind not in OBJECTIVES:
        raise InvalidArgumentError(f"unknown objective {kind!r}")
    c = forward_cache(params, X, "eval")
    n = c.logits.shape[0]
    rows = np.arange(n)
    y = np.asarray(y)
    d_logits = np.zeros_like(c.logits)
    d_aphi = None
    if kind == "kl":
        if reference is None:
            raise InvalidArgumentError("kl objective needs reference probabilities")
        ref_logits = np.log(np.maximum(reference, 1e-300))
        vals, _, d_logits = kl_terms(ref_logits, c.logits)
    else:
        base, term = kind.split("+") if "+" in kind else (kind, None)
        if kind == "train":
            base, term = "ce", "rr"
        if base == "ce":
            vals, d_logits = ce_terms(c.logits, y)
        else:
            p = softmax_t(c.logits)
            vals = -p[rows, y]
            g = np.zeros_like(p)
            g[rows, y] = -1.0
            d_logits = softmax_t_backward(p, g)
        if term == "rcon":
            p = softmax_t(c.logits)
            ym = np.argmax(p, axis=1)
            rcon = p[rows, ym] * c.a_phi
            live = rcon > RCON_EPS
            vals = vals + eta * np.log(np.maximum(rcon, RCON_EPS))
            g = np.zeros_like(p)
            g[rows, ym] = np.where(live, eta / p[rows, ym], 0.0)
            d_logits = d_logits + softmax_t_backward(p, g)
            d_aphi = np.where(live, eta / np.where(live, c.a_phi, 1.0), 0.0)
        elif term == "rr":
            rv, rdl, rda = rr_terms(c.logits, c.a_phi, y, tau_rr, "rcon", detach=False)
            vals = vals + eta * rv
            d_logits = d_logits + eta * rdl
            d_aphi = eta * rda
    if not need_grad:
        return vals, None, c
    _, dX = backward(params, c, d_logits, d_aphi, want_input=True, want_params=False)
    return vals, dX, c


def adaptive_loss(params: TwoHeadParams, x, y: int, kind: str, eta: float = 1.0,
                  tau_rr: float = 1.0) -> tuple[float, np.ndarray]:
    """Single-example adaptive objective and its input gradient."""
    if kind not in ADAPTIVE_KINDS:
        raise InvalidArgumentError(f"unknown adaptive objective {kind!r}")
    vals, dX, _ = objective_terms(params, np.asarray(x, dtype=np.float64)[None, :], [y], kind, eta, tau_rr)
    return float(vals[0]), dX[0]


# --------------------------------------------------------------------------
# projection


def project(x, x0, eps, norm: str, box=None) -> np.ndarray:
    """Project rows of ``x`` onto the ``eps``-ball around ``x0`` (then the box)."""
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (x.shape[0],))[:, None]
    delta = x - x0
    if norm == "linf":
        delta = np.clip(delta, -eps, eps)
    else:
        nrm = np.linalg.norm(delta, axis=1, keepdims=True)
        scale = np.where(nrm > eps, eps / np.where(nrm > 0, nrm, 1.0), 1.0)
        delta = delta * scale
    out = x0 + delta
    if box is not None:
        out = np.clip(out, box[0], box[1])
    return out


def random_start(rng: np.random.Generator, x0, eps, norm: str) -> np.ndarray:
    n, d = x0.shape
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,))[:, None]
    if norm == "linf":
        return x0 + rng.uniform(-1.0, 1.0, (n, d)) * eps
    direction = rng.standard_normal((n, d))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    radius = rng.random((n, 1)) ** (1.0 / d)
    return x0 + direction * radius * eps


# --------------------------------------------------------------------------
# PGD


def pgd(params: TwoHeadParams, X, y, cfg: AttackConfig, reference=None,
        rejector_threshold: float | None = None, eps=None, alpha=None) -> AttackResult:
    """Projected gradient ascent on ``cfg.objective``.

    ``eps`` / ``alpha`` may be per-row arrays overriding the config (used by
    the distortion search). ``rejector_threshold``, when given, adds the
    requirement R-Con > threshold to the success flag.
    """
    X = as_matrix(X, "X")
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    eps_v = np.broadcast_to(np.asarray(cfg.eps if eps is None else eps, dtype=np.float64), (n,)).copy()
    alpha_v = np.broadcast_to(np.asarray(cfg.alpha if alpha is None else alpha, dtype=np.float64), (n,))[:, None]
    if np.any(eps_v < 0):
        raise InvalidArgumentError("eps must be >= 0")
    lam_eta = cfg.eta

    def evaluate(x, need_grad=True):
        return objective_terms(params, x, y, cfg.objective, lam_eta, cfg.tau_rr, reference, need_grad)

    best_v, _, _ = evaluate(X, need_grad=False)
    best_x = X.copy()
    active = eps_v > 0
    if cfg.steps > 0 and np.any(active):
        for r in range(cfg.restarts):
            rng = derive_rng(cfg.seed, "pgd", r)
            x = project(random_start(rng, X, eps_v, cfg.norm), X, eps_v, cfg.norm, cfg.box)
            for step in range(cfg.steps):
                _, g, _ = evaluate(x)
                if not np.all(np.isfinite(g)):
                    raise AttackError(f"non-finite gradient at restart {r}, step {step}")
                if cfg.norm == "linf":
                    x = x + alpha_v * np.sign(g)
                else:
                    gn = np.linalg.norm(g, axis=1, keepdims=True)
                    x = x + alpha_v * g / np.maximum(gn, 1e-12)
                x = project(x, X, eps_v, cfg.norm, cfg.box)
            v, _, _ = evaluate(x, need_grad=False)
            if not np.all(np.isfinite(v)):
                raise AttackError(f"non-finite objective after restart {r}")
            better = (v > best_v) & active
            best_x[better] = x[better]
            best_v = np.where(better, v, best_v)
    out = outputs_from_cache(forward_cache(params, best_x, "eval"))
    success = out.y_m != y
    if rejector_threshold is not None:
        success &= out.r_con > rejector_threshold
    return AttackResult(best_x, best_v, success, out.y_m, out.r_con, out.confidence, eps_v)


def worst_case(results: list[AttackResult], y) -> AttackResult:
    """Per example, keep the result that fools the classifier with the
    highest R-Con; if none fools it, the one with the lowest true-label
    margin proxy (highest objective rank is not comparable across kinds, so
    the lowest R-Con is used to keep the most-rejected clean prediction)."""
    y = np.asarray(y)
    n = len(y)
    key = np.full((len(results), n), -np.inf)
    for k, r in enumerate(results):
        fooled = r.y_m != y
        key[k] = np.where(fooled, 1.0 + r.r_con, -r.r_con)
    pick = np.argmax(key, axis=0)
    rows = np.arange(n)

    def take(attr):
        stack = np.stack([getattr(r, attr) for r in results])
        return stack[pick, rows]

    x_star = np.stack([r.x_star for r in results])[pick, rows]
    return AttackResult(x_star, take("obj_value"), take("success"), take("y_m"),
                        take("r_con"), take("confidence"), take("eps"))


def min_distortion(params: TwoHeadParams, X, y, rejector_median: float, cfg: AttackConfig,
                   eps_max: float, search_steps: int = 9, rel_alpha: float | None = None) -> np.ndarray:
    """Smallest successful radius per row by bisection on ``(0, eps_max]``.

    Success at radius ``e``: a PGD run of ``cfg`` (step ``rel_alpha * e``)
    lands on a point that is misclassified and has R-Con above
    ``rejector_median``. Rows that fail at ``eps_max`` get ``nan``
    (not found). After ``search_steps`` halvings the bracket width is
    ``eps_max / 2**search_steps``; the upper end is returned.
    """
    if not eps_max > 0:
        raise InvalidArgumentError("eps_max must be > 0")
    X = as_matrix(X, "X")
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if rel_alpha is None:
        rel_alpha = cfg.alpha / cfg.eps if cfg.eps > 0 else 0.25

    def succeeds(e, tag):
        res = pgd(params, X, y, replace(cfg, seed=derive_seed(cfg.seed, "search", tag)),
                  rejector_threshold=rejector_median, eps=e, alpha=np.maximum(rel_alpha * e, 1e-12))
        return res.success

    hi = np.full(n, float(eps_max))
    lo = np.zeros(n)
    found = succeeds(hi, -1)
    for s in range(search_steps):
        mid = 0.5 * (lo + hi)
        ok = succeeds(mid, s)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return np.where(found, hi, np.nan)

