"""Dense float64 kernels: temperature softmax, losses with explicit gradients,
a stop-gradient marker and a central-difference gradient checker.

Every loss comes as a value function plus a ``*_grad`` companion returning the
partial derivatives. The kernels broadcast over a leading batch axis, so a
``(n, L)`` array of probabilities is handled row by row.

Matrices are plain 2-D ``float64`` ndarrays in row-major order and probability
vectors are 1-D ndarrays on the simplex. :func:`as_matrix` and
:func:`check_probs` enforce their invariants at the package boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import EvaluationError, InvalidArgumentError

CE_EPS = 1e-12
KL_EPS = 1e-12
BCE_EPS = 1e-6
PROB_SUM_TOL = 1e-9


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a C-contiguous 2-D float64 array with finite entries."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    return a


def check_probs(p, name: str = "probs") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2:
        raise InvalidArgumentError(f"{name}: need at least 2 classes")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise InvalidArgumentError(f"{name}: entries must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > PROB_SUM_TOL):
        raise InvalidArgumentError(f"{name}: entries must sum to 1")
    return p


def _check_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.floor(y)):
            raise InvalidArgumentError("class index must be an integer")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise InvalidArgumentError(f"class index out of range [0, {n_classes})")
    return y


def _pick(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    if p.ndim == 1:
        return p[y]
    return np.take_along_axis(p, np.broadcast_to(y, p.shape[:-1])[..., None], axis=-1)[..., 0]


def softmax_t(logits, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / tau`` along the last axis, max-shifted for stability."""
    if not (tau > 0) or not np.isfinite(tau):
        raise InvalidArgumentError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("logits must be finite")
    z = (z - z.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_t_backward(probs: np.ndarray, grad_probs: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Pull a gradient w.r.t. ``softmax_t(logits, tau)`` back onto the logits."""
    inner = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner) / tau


def argmax_lowest(p) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(np.asarray(p), axis=-1)


def cross_entropy(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = _check_labels(y, p.shape[-1])
    py = np.clip(_pick(p, y), CE_EPS, 1.0 - CE_EPS)
    out = -np.log(py)
    return float(out) if out.ndim == 0 else out


def cross_entropy_grad(p, y) -> np.ndarray:
    """d cross_entropy / d p; zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    y = _check_labels(y, p.shape[-1])
    py = _pick(p, y)
    live = (py > CE_EPS) & (py < 1.0 - CE_EPS)
    g = np.zeros_like(p)
    val = np.where(live, -1.0 / np.where(live, py, 1.0), 0.0)
    if p.ndim == 1:
        g[y] = val
    else:
        np.put_along_axis(g, np.broadcast_to(y, p.shape[:-1])[..., None], val[..., None], axis=-1)
    return g


@dataclass(frozen=True)
class StopGradScalar:
    """A value that, unless ``grad_enabled``, is treated as a constant when
    differentiating. ``value`` may be a scalar or an array of per-example values."""

    value: float | np.ndarray
    grad_enabled: bool = False


def stop_gradient(value) -> StopGradScalar:
    return StopGradScalar(value, grad_enabled=False)


def _unit_interval(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(a)) or np.any(a < 0.0) or np.any(a > 1.0):
        raise InvalidArgumentError(f"{name} must lie in [0, 1]")
    return a


def _target(target) -> tuple[np.ndarray, bool]:
    if isinstance(target, StopGradScalar):
        return _unit_interval(target.value, "target"), target.grad_enabled
    return _unit_interval(target, "target"), False


def bce_stopgrad(pred, target):
    """Binary cross-entropy ``-g log f - (1-g) log(1-f)`` with ``f`` clamped
    to ``[1e-6, 1-1e-6]``. Plain numbers passed as ``target`` count as stopped."""
    f = np.clip(_unit_interval(pred, "pred"), BCE_EPS, 1.0 - BCE_EPS)
    g, _ = _target(target)
    out = -g * np.log(f) - (1.0 - g) * np.log1p(-f)
    return float(out) if out.ndim == 0 else out


def bce_stopgrad_grad(pred, target):
    """Return ``(d/d pred, d/d target)``; the target slot is zero when stopped."""
    raw = _unit_interval(pred, "pred")
    f = np.clip(raw, BCE_EPS, 1.0 - BCE_EPS)
    g, enabled = _target(target)
    live = (raw > BCE_EPS) & (raw < 1.0 - BCE_EPS)
    dpred = np.where(live, -g / f + (1.0 - g) / (1.0 - f), 0.0)
    if enabled:
        dtarget = np.log1p(-f) - np.log(f)
    else:
        dtarget = np.zeros(np.broadcast(f, g).shape)
    if dpred.ndim == 0:
        return float(dpred), float(dtarget)
    return dpred, dtarget


def kl_divergence(p, q):
    """KL(p || q) along the last axis with both arguments clamped at 1e-12 inside the log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"shape mismatch {p.shape} vs {q.shape}")
    ph = np.maximum(p, KL_EPS)
    qh = np.maximum(q, KL_EPS)
    out = np.sum(p * (np.log(ph) - np.log(qh)), axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence_grad(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"shape mismatch {p.shape} vs {q.shape}")
    ph = np.maximum(p, KL_EPS)
    qh = np.maximum(q, KL_EPS)
    dp = np.log(ph) - np.log(qh) + (p > KL_EPS)
    dq = np.where(q > KL_EPS, -p / qh, 0.0)
    return dp, dq


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple[str, tuple[int, ...]] | None
    n_coords: int
    tol: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tol:g}) over {self.n_coords} coords, worst {self.worst}")


def finite_diff_check(
    fn: Callable[..., float],
    params: Mapping[str, np.ndarray] | np.ndarray,
    analytic: Mapping[str, np.ndarray] | np.ndarray,
    step: float = 1e-5,
    tol: float = 1e-4,
    keys=None,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``fn`` at ``params``.

    ``params`` is a single array or a name -> array mapping; ``fn`` receives
    the same structure. Relative error per coordinate uses the denominator
    ``max(|a|, |n|, 1e-8, 1e-6 * |fn(params)|)``; the last term keeps
    round-off in ``fn`` from dominating coordinates whose true gradient is
    zero (e.g. a bias feeding straight into batch norm).
    """
    if not (0.0 < step <= 1e-2):
        raise InvalidArgumentError(f"step must lie in (0, 1e-2], got {step}")
    single = isinstance(params, np.ndarray)
    work = {"": np.array(params, dtype=np.float64)} if single else \
        {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {"": np.asarray(analytic)} if single else analytic
    names = list(work) if keys is None else list(keys)

    def call() -> float:
        val = fn(work[""] if single else work)
        return float(val)

    floor = max(1e-8, 1e-6 * abs(call()))
    worst_err, worst_at, count = 0.0, None, 0
    for name in names:
        arr = work[name]
        g = np.asarray(grads[name], dtype=np.float64).reshape(arr.shape)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = call()
            arr[idx] = orig - step
            fm = call()
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite function value at {name}{list(idx)}")
            num = (fp - fm) / (2.0 * step)
            a = g[idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (name, idx)
    return GradCheckReport(worst_err, worst_err <= tol, worst_at, count, tol)
