"""Two-head network: a fully connected ReLU backbone producing the feature ``z``,
a linear classifier head on ``z`` and the auxiliary rectifier head

    a_phi = sigmoid(W2 relu(BN(W1 z + b1)) + b2)

whose product with the confidence gives R-Con. Gradients are propagated by
hand through :func:`backward`; :mod:`rrlab.numkit` supplies the per-loss
partial derivatives.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .numkit import argmax_lowest, as_matrix, sigmoid, softmax_t
from .seeding import derive_rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
RUNNING_STATS = ("aux.bn.running_mean", "aux.bn.running_var")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    widths: tuple[int, ...]
    n_classes: int
    aux_hidden: int | None = None
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1:
            raise InvalidArgumentError("input_dim must be >= 1")
        if self.n_classes < 2:
            raise InvalidArgumentError("need at least 2 classes")
        if any(w < 1 for w in self.widths):
            raise InvalidArgumentError(f"layer widths must be >= 1, got {self.widths}")
        if self.activation != "relu":
            raise InvalidArgumentError("only the relu activation is supported")
        if self.aux_hidden is None:
            object.__setattr__(self, "aux_hidden", max(1, self.feature_dim // 2))
        elif self.aux_hidden < 1:
            raise InvalidArgumentError("aux_hidden must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1] if self.widths else self.input_dim

    def shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        out: OrderedDict[str, tuple[int, ...]] = OrderedDict()
        fan_in = self.input_dim
        for i, w in enumerate(self.widths):
            out[f"backbone.{i}.weight"] = (w, fan_in)
            out[f"backbone.{i}.bias"] = (w,)
            fan_in = w
        z, h = self.feature_dim, self.aux_hidden
        out["head.weight"] = (self.n_classes, z)
        out["head.bias"] = (self.n_classes,)
        out["aux.fc1.weight"] = (h, z)
        out["aux.fc1.bias"] = (h,)
        out["aux.bn.weight"] = (h,)
        out["aux.bn.bias"] = (h,)
        out["aux.bn.running_mean"] = (h,)
        out["aux.bn.running_var"] = (h,)
        out["aux.fc2.weight"] = (1, h)
        out["aux.fc2.bias"] = (1,)
        return out


@dataclass
class TwoHeadParams:
    """All tensors of the two-head model keyed by dotted name.

    ``backbone.*`` and ``head.*`` make up the classifier parameters,
    ``aux.*`` the rectifier; the two running statistics are buffers, not
    trainable parameters.
    """

    arch: Architecture
    tensors: "OrderedDict[str, np.ndarray]"

    def __post_init__(self):
        shapes = self.arch.shapes()
        if list(self.tensors) != list(shapes):
            raise InvalidArgumentError("tensor names do not match the architecture")
        for name, shape in shapes.items():
            t = np.ascontiguousarray(self.tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise InvalidArgumentError(f"{name}: expected shape {shape}, got {t.shape}")
            if not np.all(np.isfinite(t)):
                raise InvalidArgumentError(f"{name}: non-finite entries")
            self.tensors[name] = t
        if np.any(self.tensors["aux.bn.running_var"] <= 0):
            raise InvalidArgumentError("running variance must be positive")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = np.asarray(value, dtype=np.float64).reshape(self.tensors[name].shape)

    def copy(self) -> "TwoHeadParams":
        return TwoHeadParams(self.arch, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in RUNNING_STATS]

    @property
    def theta(self) -> list[str]:
        return [k for k in self.trainable if not k.startswith("aux.")]

    @property
    def phi(self) -> list[str]:
        return [k for k in self.trainable if k.startswith("aux.")]

    def equal(self, other: "TwoHeadParams") -> bool:
        """Bit-level equality of every tensor."""
        return self.arch == other.arch and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.tensors.values(), other.tensors.values()))


def init_params(arch: Architecture, seed: int) -> TwoHeadParams:
    """Seeded initialization.

    Layers feeding a ReLU (backbone layers and ``aux.fc1``) draw from
    U(-sqrt(6/fan_in), sqrt(6/fan_in)); the two output layers (``head`` and
    ``aux.fc2``) from U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Biases start at 0,
    batch-norm at gamma=1, beta=0, mean=0, var=1.
    """
    rng = derive_rng(seed, "init")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in arch.shapes().items():
        if name.endswith(".weight") and not name.startswith("aux.bn"):
            fan_in = shape[1]
            relu_fed = name.startswith("backbone.") or name == "aux.fc1.weight"
            bound = np.sqrt(6.0 / fan_in) if relu_fed else 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name in ("aux.bn.weight", "aux.bn.running_var"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return TwoHeadParams(arch, tensors)


def zeros_like_params(params: TwoHeadParams) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, np.zeros_like(params[k])) for k in params.trainable)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class HeadOutputs:
    logits: np.ndarray
    probs: np.ndarray
    confidence: float
    y_m: int
    a_phi: float
    r_con: float


@dataclass
class BatchOutputs:
    """Row-aligned arrays for a batch; ``rows()`` expands them into
    :class:`HeadOutputs`."""

    logits: np.ndarray
    probs: np.ndarray
    confidence: np.ndarray
    y_m: np.ndarray
    a_phi: np.ndarray
    r_con: np.ndarray
    tau: float = 1.0

    def __len__(self) -> int:
        return self.logits.shape[0]

    def tcon(self, y) -> np.ndarray:
        y = np.asarray(y)
        return self.probs[np.arange(len(self)), y]

    def rows(self) -> list[HeadOutputs]:
        return [HeadOutputs(self.logits[i].copy(), self.probs[i].copy(), float(self.confidence[i]),
                            int(self.y_m[i]), float(self.a_phi[i]), float(self.r_con[i]))
                for i in range(len(self))]


@dataclass
class ForwardCache:
    X: np.ndarray
    bn_mode: str
    pre: list = field(default_factory=list)   # backbone pre-activations
    acts: list = field(default_factory=list)  # backbone inputs per layer, then z
    logits: np.ndarray | None = None
    h1: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None
    xhat: np.ndarray | None = None
    bn_out: np.ndarray | None = None
    r: np.ndarray | None = None
    u: np.ndarray | None = None
    a_phi: np.ndarray | None = None

    @property
    def z(self) -> np.ndarray:
        return self.acts[-1]


def _check_mode(bn_mode: str) -> None:
    if bn_mode not in ("train", "eval"):
        raise InvalidArgumentError(f"bn_mode must be 'train' or 'eval', got {bn_mode!r}")


def forward_cache(params: TwoHeadParams, X, bn_mode: str = "eval") -> ForwardCache:
    """Run the network on a batch and keep every intermediate needed by
    :func:`backward`. Train mode normalizes with the batch's own biased
    mean/variance and leaves the running statistics untouched."""
    _check_mode(bn_mode)
    X = as_matrix(X, "X")
    arch = params.arch
    if X.shape[1] != arch.input_dim:
        raise InvalidArgumentError(f"expected {arch.input_dim} features, got {X.shape[1]}")
    if bn_mode == "train" and X.shape[0] < 2:
        raise InvalidArgumentError("train-mode batch norm needs at least 2 rows")
    c = ForwardCache(X=X, bn_mode=bn_mode)
    h = X
    c.acts.append(h)
    for i in range(len(arch.widths)):
        pre = h @ params[f"backbone.{i}.weight"].T + params[f"backbone.{i}.bias"]
        c.pre.append(pre)
        h = np.maximum(pre, 0.0)
        c.acts.append(h)
    z = h
    c.logits = z @ params["head.weight"].T + params["head.bias"]
    c.h1 = z @ params["aux.fc1.weight"].T + params["aux.fc1.bias"]
    if bn_mode == "train":
        c.bn_mean = c.h1.mean(axis=0)
        c.bn_var = c.h1.var(axis=0)
    else:
        c.bn_mean = params["aux.bn.running_mean"]
        c.bn_var = params["aux.bn.running_var"]
    c.xhat = (c.h1 - c.bn_mean) / np.sqrt(c.bn_var + BN_EPS)
    c.bn_out = c.xhat * params["aux.bn.weight"] + params["aux.bn.bias"]
    c.r = np.maximum(c.bn_out, 0.0)
    c.u = (c.r @ params["aux.fc2.weight"].T)[:, 0] + params["aux.fc2.bias"][0]
    c.a_phi = sigmoid(c.u)
    return c


def outputs_from_cache(c: ForwardCache, tau_cls: float = 1.0) -> BatchOutputs:
    probs = softmax_t(c.logits, tau_cls)
    y_m = argmax_lowest(probs)
    conf = probs[np.arange(len(y_m)), y_m]
    return BatchOutputs(c.logits, probs, conf, y_m, c.a_phi, conf * c.a_phi, tau_cls)


def predict(params: TwoHeadParams, X, tau_cls: float = 1.0, bn_mode: str = "eval") -> BatchOutputs:
    """Vectorized forward pass. Does not modify running statistics."""
    return outputs_from_cache(forward_cache(params, X, bn_mode), tau_cls)


def forward(params: TwoHeadParams, x, tau_cls: float = 1.0, bn_mode: str = "eval") -> HeadOutputs:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgumentError("forward takes a single feature vector")
    return predict(params, x[None, :], tau_cls, bn_mode).rows()[0]


def update_running_stats(params: TwoHeadParams, batch_mean, batch_var, momentum: float = BN_MOMENTUM) -> None:
    """In-place exponential update ``stat <- (1-m) stat + m batch_stat``."""
    params.tensors["aux.bn.running_mean"] = (1 - momentum) * params["aux.bn.running_mean"] + momentum * batch_mean
    params.tensors["aux.bn.running_var"] = (1 - momentum) * params["aux.bn.running_var"] + momentum * batch_var


def forward_batch(params: TwoHeadParams, X, tau_cls: float = 1.0, bn_mode: str = "eval") -> list[HeadOutputs]:
    """Per-row outputs. In train mode the batch statistics are used and then
    folded into the running statistics (the only mutating path)."""
    c = forward_cache(params, X, bn_mode)
    if bn_mode == "train":
        update_running_stats(params, c.bn_mean, c.bn_var)
    return outputs_from_cache(c, tau_cls).rows()


def backward(params: TwoHeadParams, c: ForwardCache, d_logits=None, d_aphi=None,
             want_input: bool = False, want_params: bool = True):
    """Backpropagate gradients w.r.t. raw logits and ``a_phi``.

    Returns ``(grads, dX)`` where ``grads`` maps every trainable name to its
    gradient and ``dX`` is the input gradient (``None`` unless requested).
    Either upstream gradient may be ``None`` to mean zero. With
    ``want_params=False`` only the input gradient is computed and ``grads``
    is empty.
    """
    arch = params.arch
    n = c.X.shape[0]
    grads = zeros_like_params(params) if want_params else {}
    dz = np.zeros_like(c.z)
    if d_logits is not None:
        d_logits = np.asarray(d_logits, dtype=np.float64)
        if want_params:
            grads["head.weight"] = d_logits.T @ c.z
            grads["head.bias"] = d_logits.sum(axis=0)
        dz += d_logits @ params["head.weight"]
    if d_aphi is not None:
        du = np.asarray(d_aphi, dtype=np.float64) * c.a_phi * (1.0 - c.a_phi)
        dr = du[:, None] * params["aux.fc2.weight"]
        dbn = dr * (c.bn_out > 0)
        if want_params:
            grads["aux.fc2.weight"] = (du @ c.r)[None, :]
            grads["aux.fc2.bias"] = np.array([du.sum()])
            grads["aux.bn.weight"] = np.sum(dbn * c.xhat, axis=0)
            grads["aux.bn.bias"] = dbn.sum(axis=0)
        dxhat = dbn * params["aux.bn.weight"]
        inv_std = 1.0 / np.sqrt(c.bn_var + BN_EPS)
        if c.bn_mode == "train":
            dh1 = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - c.xhat * np.sum(dxhat * c.xhat, axis=0))
        else:
            dh1 = dxhat * inv_std
        if want_params:
            grads["aux.fc1.weight"] = dh1.T @ c.z
            grads["aux.fc1.bias"] = dh1.sum(axis=0)
        dz += dh1 @ params["aux.fc1.weight"]
    dh = dz
    for i in reversed(range(len(arch.widths))):
        if not want_params and not want_input:
            break
        dpre = dh * (c.pre[i] > 0)
        if want_params:
            grads[f"backbone.{i}.weight"] = dpre.T @ c.acts[i]
            grads[f"backbone.{i}.bias"] = dpre.sum(axis=0)
        if i > 0 or want_input:
            dh = dpre @ params[f"backbone.{i}.weight"]
    dX = dh if want_input else None
    return grads, dX
