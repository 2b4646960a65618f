"""Scoring of rejection metrics: TPR-fixed accuracy, rank ROC-AUC, ECE and
the xi-indexed pass-count curve. Higher scores mean "keep the prediction";
correctly classified samples are the positive class."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import EvaluationError, InvalidArgumentError


@dataclass(frozen=True)
class ScoredSample:
    score: float
    correct: bool
    confidence: float = float("nan")
    r_con: float = float("nan")

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise InvalidArgumentError("score must be finite")


def _arrays(samples):
    if isinstance(samples, tuple) and len(samples) == 2:
        s, c = samples
        return np.asarray(s, dtype=np.float64), np.asarray(c, dtype=bool)
    s = np.array([x.score for x in samples], dtype=np.float64)
    c = np.array([x.correct for x in samples], dtype=bool)
    return s, c


@dataclass(frozen=True)
class TprResult:
    threshold: float
    accuracy: float
    coverage: float
    retained_correct: int
    retained_wrong: int


def tpr_accuracy(samples, tpr: float = 0.95) -> TprResult:
    """Accuracy on the samples kept by the largest threshold ``t`` for which
    at least ``tpr`` of the correct samples have ``score >= t``.

    ``samples`` is a sequence of :class:`ScoredSample` or a ``(scores,
    correct_flags)`` pair. Every sample scoring exactly ``t`` is kept.
    """
    if not 0.0 < tpr <= 1.0:
        raise InvalidArgumentError("tpr must lie in (0, 1]")
    s, c = _arrays(samples)
    pos = np.sort(s[c])
    n_pos = pos.size
    if n_pos == 0:
        raise EvaluationError("tpr_accuracy needs at least one correct sample")
    required = math.ceil(tpr * n_pos - 1e-9)
    # the (n_pos - required + 1)-th smallest correct score keeps >= required
    t = float(pos[n_pos - required])
    keep = s >= t
    kept = int(keep.sum())
    kept_pos = int((keep & c).sum())
    return TprResult(t, kept_pos / kept, kept / s.size, kept_pos, kept - kept_pos)


def roc_auc(samples) -> float:
    """P(score of a random correct sample > score of a random wrong one),
    ties counting one half, computed exactly from mid-ranks."""
    s, c = _arrays(samples)
    n_pos = int(c.sum())
    n_neg = c.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("roc_auc needs both correct and wrong samples")
    ranks = rankdata(s)
    u = ranks[c].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ece(confidences, correct_flags, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width bins.

    Bin ``k`` covers ``((k-1)/B, k/B]``; confidence 0 falls in the first bin.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct_flags, dtype=np.float64)
    if conf.size == 0:
        raise EvaluationError("ece of an empty input")
    if n_bins < 1:
        raise InvalidArgumentError("n_bins must be >= 1")
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    total = 0.0
    for k in range(n_bins):
        m = idx == k
        cnt = int(m.sum())
        if cnt:
            total += cnt / conf.size * abs(corr[m].mean() - conf[m].mean())
    return float(total)


PASS_HEADER = "xi,correct_pass,wrong_pass,correct_sep,wrong_sep"


@dataclass(frozen=True)
class PassRow:
    xi: float
    correct_pass: int
    wrong_pass: int
    correct_sep: int
    wrong_sep: int


def pass_curve(samples, xi_grid) -> list[PassRow]:
    """For each xi: how many correct / wrong samples clear the 1/(2-xi)
    confidence filter, and how many of those sit on their own side of the
    R-Con = 1/2 line (above for correct, below for wrong)."""
    conf = np.array([x.confidence for x in samples], dtype=np.float64)
    rcon = np.array([x.r_con for x in samples], dtype=np.float64)
    corr = np.array([x.correct for x in samples], dtype=bool)
    rows = []
    for xi in xi_grid:
        if not 0.0 <= xi < 1.0:
            raise InvalidArgumentError("xi grid values must lie in [0, 1)")
        passed = conf > 1.0 / (2.0 - xi)
        rows.append(PassRow(float(xi),
                            int((passed & corr).sum()), int((passed & ~corr).sum()),
                            int((passed & corr & (rcon > 0.5)).sum()),
                            int((passed & ~corr & (rcon < 0.5)).sum())))
    return rows


def default_xi_grid(points: int = 101, upper: float = 0.99) -> np.ndarray:
    return np.linspace(0.0, upper, points)


def pass_curve_csv(rows: list[PassRow]) -> str:
    buf = io.StringIO()
    buf.write(PASS_HEADER + "\n")
    for r in rows:
        buf.write(f"{float(r.xi)!r},{r.correct_pass},{r.wrong_pass},{r.correct_sep},{r.wrong_sep}\n")
    return buf.getvalue()


@dataclass
class EvalReport:
    rejector: str
    all_accuracy: float
    tpr: float
    tpr_accuracy: float
    tpr_threshold: float
    coverage: float
    roc_auc: float | None
    ece: float
    n: int
    tau: float = 1.0
    pass_rows: list = field(default_factory=list)

    def metrics(self) -> list[tuple[str, float]]:
        return [("rejector", self.rejector), ("tau", self.tau), ("n", self.n),
                ("all_accuracy", self.all_accuracy), ("tpr", self.tpr),
                ("tpr_accuracy", self.tpr_accuracy), ("tpr_threshold", self.tpr_threshold),
                ("coverage", self.coverage),
                ("roc_auc", "nan" if self.roc_auc is None else self.roc_auc),
                ("ece", self.ece)]

    def csv(self) -> str:
        lines = ["metric,value"]
        for k, v in self.metrics():
            lines.append(f"{k},{float(v)!r}" if isinstance(v, float) else f"{k},{v}")
        return "\n".join(lines) + "\n"


def build_report(rejector: str, scores, correct, confidence, r_con, tpr: float = 0.95,
                 tau: float = 1.0, xi_grid=None, threshold: float | None = None) -> EvalReport:
    """Assemble an :class:`EvalReport`. ``threshold`` overrides the TPR-derived
    threshold (e.g. one computed on clean data and applied to attacked data)."""
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    res = tpr_accuracy((scores, correct), tpr)
    if threshold is not None:
        keep = scores >= threshold
        kept = int(keep.sum())
        acc = float((keep & correct).sum() / kept) if kept else float("nan")
        res = TprResult(float(threshold), acc, kept / scores.size,
                        int((keep & correct).sum()), int((keep & ~correct).sum()))
    auc = roc_auc((scores, correct)) if 0 < correct.sum() < correct.size else None
    samples = [ScoredSample(float(s), bool(c), float(cf), float(rc))
               for s, c, cf, rc in zip(scores, correct, confidence, r_con)]
    grid = default_xi_grid() if xi_grid is None else xi_grid
    return EvalReport(rejector, float(correct.mean()), tpr, res.accuracy, res.threshold,
                      res.coverage, auc, ece(confidence, correct), int(scores.size), tau,
                      pass_curve(samples, grid))
