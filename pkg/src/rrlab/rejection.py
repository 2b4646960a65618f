"""Coupled rejection metrics and their separability checks.

Quantities per input (labels needed only for the oracle ones):

* confidence  ``p[y_m]``, the largest predicted probability
* T-Con       ``p[y]``, the probability of the true label (oracle)
* R-Con       ``confidence * a_phi``
* optimal rectifier ``A* = p[y] / p[y_m]``

A rectifier value is *xi-error* at a point when either the log-ratio bound
``|log(a / A*)| <= log(2 / (2 - xi))`` or the absolute bound
``|a - A*| <= xi / 2`` holds, with ``xi`` in ``[0, 1)``. Points whose
confidence exceeds ``1 / (2 - xi)`` and whose rectifier is xi-error are
split exactly by R-Con at 1/2.

The xi-error of a point can only be measured when its label is known; at
inference the coupled rejector fixes a confidence threshold and relies on the
rectifier being accurate enough where it matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, InvalidArgumentError
from .numkit import check_probs, softmax_t
from .seeding import derive_rng

RATIO_EPS = 1e-12
GUARD = 1e-9
XI_MAX = 1.0 - 1e-6  # keeps the confidence window 1/(2-xi) < conf <= 1 non-degenerate
_CHUNK = 20_000


def _label(y, n_classes: int) -> int:
    if int(y) != y or not 0 <= y < n_classes:
        raise InvalidArgumentError(f"class index {y} outside [0, {n_classes})")
    return int(y)


def tcon(probs, y) -> float:
    p = check_probs(probs)
    return float(p[_label(y, p.shape[-1])])


def optimal_rectifier(probs, y) -> np.ndarray:
    """``A* = p[y] / p[y_m]`` with both probabilities clamped at 1e-12. Batched."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y)
    if p.ndim == 1:
        return np.float64(max(p[y], RATIO_EPS) / max(p.max(), RATIO_EPS))
    rows = np.arange(p.shape[0])
    return np.maximum(p[rows, y], RATIO_EPS) / np.maximum(p.max(axis=1), RATIO_EPS)


@dataclass(frozen=True)
class Definition1Result:
    """Smallest xi for which each bound holds. ``None`` means the bound cannot
    hold for any xi in [0, 1)."""

    a_phi: float
    a_star: float
    xi_arith: float
    xi_geom: float | None
    xi_min: float | None

    @property
    def attainable(self) -> bool:
        return self.xi_min is not None


def _xi_arrays(a_phi, a_star):
    a = np.asarray(a_phi, dtype=np.float64)
    s = np.asarray(a_star, dtype=np.float64)
    arith = 2.0 * np.abs(a - s)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.maximum(a / s, s / a)
    ok = (a > 0) & (s > 0) & (ratio < 2.0)
    geom = np.where(ok, 2.0 - 2.0 / np.where(ok, ratio, 1.0), np.inf)
    arith_ok = np.where(arith < 1.0, arith, np.inf)
    return arith, geom, np.minimum(arith_ok, geom)


def xi_error(a_phi: float, probs, y) -> Definition1Result:
    if not 0.0 <= a_phi <= 1.0:
        raise InvalidArgumentError("a_phi must lie in [0, 1]")
    p = check_probs(probs)
    y = _label(y, p.shape[-1])
    s = float(optimal_rectifier(p, y))
    arith, geom, xmin = (float(v) for v in _xi_arrays(a_phi, s))
    return Definition1Result(float(a_phi), s, arith,
                             None if math.isinf(geom) else geom,
                             None if math.isinf(xmin) else xmin)


def xi_min_batch(a_phi, probs, y) -> np.ndarray:
    """Vectorized minimal xi per row; ``inf`` marks unattainable rows."""
    return _xi_arrays(a_phi, optimal_rectifier(probs, y))[2]


def satisfies_definition1(a_phi: float, a_star: float, xi: float) -> bool:
    """Direct test of the two bounds at a given xi (used as an oracle)."""
    if abs(a_phi - a_star) <= xi / 2.0:
        return True
    if a_phi > 0 and a_star > 0:
        return abs(math.log(a_phi / a_star)) <= math.log(2.0 / (2.0 - xi))
    return False


def confidence_threshold(xi: float) -> float:
    return 1.0 / (2.0 - xi)


@dataclass(frozen=True)
class RejectionScores:
    confidence: float
    tcon: float
    a_phi: float
    r_con: float
    correct: bool

    @classmethod
    def from_probs(cls, probs, y, a_phi: float) -> "RejectionScores":
        p = check_probs(probs)
        y = _label(y, p.shape[-1])
        ym = int(np.argmax(p))
        conf = float(p[ym])
        return cls(conf, float(p[y]), float(a_phi), conf * float(a_phi), ym == y)


@dataclass(frozen=True)
class CoupledDecision:
    stage: str  # "rejected-by-confidence" | "accepted" | "flagged-by-rcon"
    xi: float
    confidence_threshold: float
    rcon_threshold: float = 0.5


def coupled_reject(scores: RejectionScores, xi: float) -> CoupledDecision:
    """Two-stage rule: drop points with confidence <= 1/(2-xi), then flag the
    survivors whose R-Con is <= 1/2."""
    if not 0.0 <= xi < 1.0:
        raise InvalidArgumentError("xi must lie in [0, 1)")
    thr = confidence_threshold(xi)
    if scores.confidence <= thr:
        stage = "rejected-by-confidence"
    elif scores.r_con <= 0.5:
        stage = "flagged-by-rcon"
    else:
        stage = "accepted"
    return CoupledDecision(stage, xi, thr)


# --------------------------------------------------------------------------
# theorem verifiers


@dataclass
class VerificationReport:
    name: str
    trials: int
    seed: int
    violations: int = 0
    counters: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    counterexamples: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def text(self) -> str:
        lines = [f"[{self.name}] trials={self.trials} seed={self.seed} "
                 f"violations={self.violations} -> {'PASS' if self.passed else 'FAIL'}"]
        for k, v in self.counters.items():
            lines.append(f"  count {k}: {v}")
        for k, v in self.margins.items():
            lines.append(f"  margin {k}: {v:.6e}")
        for note in self.notes:
            lines.append(f"  note: {note}")
        for ce in self.counterexamples[:5]:
            lines.append(f"  counterexample: {ce}")
        return "\n".join(lines)


def _sample_probs(rng: np.random.Generator, n: int, lower: np.ndarray, n_classes: np.ndarray):
    """Probability rows whose maximum exceeds ``lower`` (>= 1/2) by at least GUARD.

    Half of the rows put the maximum within a few GUARDs of ``lower`` so the
    boundary is exercised; the remaining mass is spread by a Dirichlet draw.
    Returns ``(probs, y_m)`` padded to 10 columns, zeros beyond ``n_classes``.
    """
    width = 10
    span = 1.0 - lower - GUARD
    near = rng.random(n) < 0.5
    u = np.where(near, rng.exponential(50.0 * GUARD, n) / np.maximum(span, GUARD), rng.random(n))
    conf = lower + GUARD + np.minimum(u, 1.0) * span
    gamma = rng.gamma(1.0, 1.0, (n, width))
    gamma[np.arange(width)[None, :] >= n_classes[:, None] - 1] = 0.0
    gamma /= np.maximum(gamma.sum(axis=1, keepdims=True), 1e-300)
    rest = (1.0 - conf)[:, None] * gamma
    ym = rng.integers(0, n_classes)
    probs = np.zeros((n, width))
    for i_col in range(width):
        # shift the "rest" columns around the argmax slot
        src = np.where(i_col < ym, i_col, i_col - 1)
        take = (i_col != ym) & (i_col < n_classes)
        probs[:, i_col] = np.where(take, rest[np.arange(n), np.clip(src, 0, width - 1)], 0.0)
    probs[np.arange(n), ym] = conf
    return probs, ym


def _wrong_label(rng, ym, n_classes):
    off = rng.integers(1, n_classes)
    return (ym + off) % n_classes


def verify_lemma1(trials: int, seed: int, inject_fault: bool = False) -> VerificationReport:
    """Sample correct/wrong pairs with confidence > 1/2 and check that T-Con
    falls on opposite sides of 1/2."""
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    rep = VerificationReport("lemma1", trials, seed)
    n_ok = n_bad = 0
    min_correct_margin = min_wrong_margin = math.inf
    for k, start in enumerate(range(0, trials, _CHUNK)):
        n = min(_CHUNK, trials - start)
        rng = derive_rng(seed, "lemma1", k)
        L = rng.integers(2, 11, n)
        p1, ym1 = _sample_probs(rng, n, np.full(n, 0.5), L)
        p2, ym2 = _sample_probs(rng, n, np.full(n, 0.5), L)
        y2 = _wrong_label(rng, ym2, L)
        t1 = p1[np.arange(n), ym1]
        t2 = p2[np.arange(n), y2]
        ok1 = t1 > 0.5
        ok2 = t2 < 0.5 if not inject_fault else t2 > 0.5
        bad = ~(ok1 & ok2)
        rep.violations += int(bad.sum())
        for i in np.flatnonzero(bad)[:3]:
            rep.counterexamples.append(dict(chunk=k, row=int(i), tcon_correct=float(t1[i]),
                                            tcon_wrong=float(t2[i]), conf_wrong=float(p2[i, ym2[i]])))
        n_ok += n
        n_bad += n
        min_correct_margin = min(min_correct_margin, float((t1 - 0.5).min()))
        min_wrong_margin = min(min_wrong_margin, float((0.5 - t2).min()))
    rep.counters = {"correct": n_ok, "wrong": n_bad}
    rep.margins = {"tcon_correct_minus_half": min_correct_margin,
                   "half_minus_tcon_wrong": min_wrong_margin}
    return rep


def g_bound(xi):
    """Upper bound on R-Con of a wrong point under the log-ratio bound:
    ``(2 - 2 xi) / (2 - xi)^2``."""
    xi = np.asarray(xi, dtype=np.float64)
    return (2.0 - 2.0 * xi) / (2.0 - xi) ** 2


def _rectifier_in_bound(rng, a_star, xi, branch: str):
    """Draw a rectifier value in [0, 1] satisfying the chosen bound around ``a_star``."""
    n = a_star.shape[0]
    v = rng.uniform(-1.0, 1.0, n)
    # half the draws sit exactly on the edge of the bound
    edge = rng.random(n) < 0.5
    v = np.where(edge, np.sign(v), v)
    if branch == "i":
        a = a_star * np.exp(v * np.log(2.0 / (2.0 - xi)))
        a = np.minimum(a, 1.0)
    else:
        a = np.clip(a_star + v * xi / 2.0, 0.0, 1.0)
    return a


def verify_theorem1(trials: int, seed: int, inject_fault: bool = False,
                    grid_points: int = 10_000) -> VerificationReport:
    """Per trial, draw xi and one point for each of the four proof branches
    (correct/wrong x log-ratio/absolute bound) with confidence above
    1/(2-xi), then check R-Con against 1/2. Also checks that the bound
    ``g_bound`` is strictly decreasing and at most 1/2 on a grid of [0, 1)."""
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    rep = VerificationReport("theorem1", trials, seed)
    branches = {("correct", "i"): 0, ("correct", "ii"): 0, ("wrong", "i"): 0, ("wrong", "ii"): 0}
    margins = {f"{c}-{b}": math.inf for c, b in branches}
    for k, start in enumerate(range(0, trials, _CHUNK)):
        n = min(_CHUNK, trials - start)
        rng = derive_rng(seed, "theorem1", k)
        xi = np.minimum(rng.uniform(0.0, 1.0, n), XI_MAX)
        xi[rng.random(n) < 0.05] = 0.0
        L = rng.integers(2, 11, n)
        thr = 1.0 / (2.0 - xi)
        for (kind, branch) in branches:
            probs, ym = _sample_probs(rng, n, thr, L)
            conf = probs[np.arange(n), ym]
            if kind == "correct":
                y = ym
            else:
                y = _wrong_label(rng, ym, L)
            a_star = optimal_rectifier(probs, y)
            a = _rectifier_in_bound(rng, a_star, xi, branch)
            # the draw must satisfy the hypothesis it claims
            held = _bound_holds(a, a_star, xi, branch)
            rcon = conf * a
            if kind == "correct":
                ok = rcon > 0.5
                margin = rcon - 0.5
            else:
                ok = rcon < 0.5 if not inject_fault else rcon > 0.5
                margin = 0.5 - rcon
            bad = held & ~ok
            branches[(kind, branch)] += int(held.sum())
            rep.violations += int(bad.sum())
            if held.any():
                margins[f"{kind}-{branch}"] = min(margins[f"{kind}-{branch}"], float(margin[held].min()))
            for i in np.flatnonzero(bad)[:3]:
                rep.counterexamples.append(dict(branch=f"{kind}-{branch}", xi=float(xi[i]),
                                                conf=float(conf[i]), a_phi=float(a[i]),
                                                a_star=float(a_star[i]), r_con=float(rcon[i])))
            if (~held).any():
                rep.notes.append(f"{int((~held).sum())} draws for {kind}-{branch} missed the bound and were skipped")
    rep.counters = {f"{c}-{b}": v for (c, b), v in branches.items()}
    grid = np.arange(grid_points) / grid_points
    g = g_bound(grid)
    g_ok = bool(g[0] == 0.5 and np.all(g[1:] < 0.5) and np.all(np.diff(g) < 0))
    rep.counters["g_grid_points"] = grid_points
    rep.counters["g_grid_ok"] = int(g_ok)
    if not g_ok:
        rep.violations += 1
        rep.counterexamples.append(dict(check="g_bound monotone and <= 1/2"))
    rep.margins.update(margins)
    return rep


def _bound_holds(a, a_star, xi, branch):
    if branch == "ii":
        return np.abs(a - a_star) <= xi / 2.0 + 1e-15
    with np.errstate(divide="ignore"):
        return (a > 0) & (np.abs(np.log(a) - np.log(a_star)) <= np.log(2.0 / (2.0 - xi)) + 1e-15)


# --------------------------------------------------------------------------
# substitute classification task


@dataclass(frozen=True)
class NsubResult:
    n1: float
    n2: float
    n_sub: int


def _check_xi_rho(xi: float, rho: float) -> None:
    if not 0.0 < xi < 1.0:
        raise InvalidArgumentError("xi must lie in (0, 1)")
    if not 0.0 < rho < 1.0:
        raise InvalidArgumentError("rho must lie in (0, 1)")


def nsub(xi: float, rho: float) -> NsubResult:
    """Class counts of the classification task that substitutes for learning
    a xi-error rectifier: ``N1 = log(1/rho) / log(2/(2-xi)) + 1`` (log-ratio
    bins with rounding error ``rho``), ``N2 = 2/xi`` (absolute bins), and
    ``N_sub = ceil(min(N1, N2))``."""
    _check_xi_rho(xi, rho)
    n1 = math.log(1.0 / rho) / math.log(2.0 / (2.0 - xi)) + 1.0
    n2 = 2.0 / xi
    return NsubResult(n1, n2, math.ceil(min(n1, n2)))


def geometric_bin_edges(xi: float, rho: float) -> list[float]:
    """Edges 0, rho, rho*r, rho*r^2, ... with r = 2/(2-xi); the last edge is 1."""
    _check_xi_rho(xi, rho)
    r = 2.0 / (2.0 - xi)
    edges = [0.0, rho]
    while edges[-1] < 1.0:
        edges.append(edges[-1] * r)
    edges[-1] = 1.0
    return edges


def arithmetic_bin_edges(xi: float) -> list[float]:
    """Edges 0, xi/2, 2*xi/2, ...; the last edge is 1."""
    if not 0.0 < xi < 1.0:
        raise InvalidArgumentError("xi must lie in (0, 1)")
    edges = [0.0]
    s = 0
    while edges[-1] < 1.0:
        s += 1
        edges.append(s * xi / 2.0)
    edges[-1] = 1.0
    return edges


# --------------------------------------------------------------------------
# misc


def expected_sampled_accuracy(probs_batch, y_batch) -> float:
    """Expected accuracy of labels sampled from the predictive distribution,
    i.e. the mean T-Con."""
    p = np.asarray(probs_batch, dtype=np.float64)
    y = np.asarray(y_batch)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidArgumentError("need a non-empty batch of probability rows")
    if y.shape != (p.shape[0],):
        raise InvalidArgumentError("labels and probabilities are misaligned")
    return float(p[np.arange(p.shape[0]), y].mean())


TEMPERATURE_TOY = {"x1": (0.0, 3.0, -1000.0), "x2": (0.0, 2.0, 2.0)}


def temperature_flip(tau_a: float = 1.0, tau_b: float = 2.0) -> dict:
    """Probability of class 0 for the two toy logit vectors at two temperatures.

    The ordering between the inputs reverses: x1 scores lower than x2 at
    ``tau=1`` and higher at ``tau=2``.
    """
    out = {}
    for tau in (tau_a, tau_b):
        for key, logits in TEMPERATURE_TOY.items():
            out[(key, tau)] = float(softmax_t(np.array(logits), tau)[0])
    out["flipped"] = (out[("x1", tau_a)] < out[("x2", tau_a)]) and (out[("x1", tau_b)] > out[("x2", tau_b)])
    return out


def check_nonempty(x, what: str) -> None:
    if len(x) == 0:
        raise EvaluationError(f"{what}: empty input")
