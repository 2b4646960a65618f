"""Joint adversarial training of the classifier and the rectifier head.

The per-batch objective is

* ``pgd-at``: mean[ CE(f(x*), y) + lam * RR(x*) ]
* ``trades``: mean[ CE(f(x), y) + beta * KL(f(x) || f(x*)) + lam * RR(x*) ]

with ``x*`` produced by PGD on CE (``pgd-at``) or on the KL term
(``trades``). The rectifier's batch norm runs on batch statistics while the
loss is computed and in eval mode during the inner maximization.
"""

from __future__ import annotations

import hashlib
import io
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .attacks import AttackConfig, pgd
from .checkpoint import Checkpoint
from .data import Dataset
from .errors import InvalidArgumentError, TrainingError, EvaluationError, AttackError
from .losses import RR_MODES, ce_terms, kl_terms, rr_terms
from .model import (RUNNING_STATS, Architecture, TwoHeadParams, backward, forward_cache, init_params,
                    predict, update_running_stats)
from .seeding import derive_seed

FRAMEWORKS = ("pgd-at", "trades")


@dataclass(frozen=True)
class TrainConfig:
    framework: str = "pgd-at"
    lam: float = 1.0
    trades_beta: float = 6.0
    tau_rr: float = 1.0
    rcon_mode: str = "rcon"
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (30, 35)
    lr_decay: float = 0.1
    seed: int = 0
    widths: tuple[int, ...] = (64, 64)
    aux_hidden: int | None = None
    rr_on_clean: bool = False
    attack_includes_aphi: bool = False
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(eps=0.1, alpha=0.025, steps=10))
    eval_attack: AttackConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.framework not in FRAMEWORKS:
            raise InvalidArgumentError(f"framework must be one of {FRAMEWORKS}")
        if self.rcon_mode not in RR_MODES:
            raise InvalidArgumentError(f"rcon_mode must be one of {RR_MODES}")
        if self.lam < 0 or self.trades_beta < 0:
            raise InvalidArgumentError("lambda and trades_beta must be >= 0")
        if not self.tau_rr > 0:
            raise InvalidArgumentError("tau_rr must be > 0")
        if self.epochs < 0 or self.batch_size < 2:
            raise InvalidArgumentError("need epochs >= 0 and batch_size >= 2")
        if not self.lr > 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidArgumentError("invalid optimizer settings")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise InvalidArgumentError("milestones must be strictly increasing")
        if ms and ms[-1] >= self.epochs and self.epochs > 0:
            raise InvalidArgumentError("milestones must be < epochs")

    @property
    def validation_attack(self) -> AttackConfig:
        return self.eval_attack if self.eval_attack is not None else replace(self.attack, objective="ce")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass
class BatchResult:
    loss: float
    grads: dict
    terms: dict
    bn_stats: tuple[np.ndarray, np.ndarray]
    x_star: np.ndarray


def inner_attack(params: TwoHeadParams, X, y, cfg: TrainConfig, seed: int) -> np.ndarray:
    """Training-time adversarial points; parameters and running stats are untouched."""
    acfg = replace(cfg.attack, seed=seed, tau_rr=cfg.tau_rr)
    if cfg.framework == "trades":
        ref = predict(params, X).probs
        return pgd(params, X, y, replace(acfg, objective="kl"), reference=ref).x_star
    if cfg.attack_includes_aphi:
        return pgd(params, X, y, replace(acfg, objective="train", eta=cfg.lam)).x_star
    return pgd(params, X, y, replace(acfg, objective="ce")).x_star


def _add(into: dict, grads: dict, scale: float = 1.0) -> None:
    for k, v in grads.items():
        into[k] = into[k] + scale * v if k in into else scale * v


def batch_objective(params: TwoHeadParams, X, y, cfg: TrainConfig, x_star=None,
                    attack_seed: int = 0) -> BatchResult:
    """Batch-mean training loss and its gradient w.r.t. every trainable tensor.

    ``x_star`` fixes the adversarial points; otherwise the inner attack is run
    with ``attack_seed``. The running statistics are not modified here.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise InvalidArgumentError("empty batch")
    if x_star is None:
        x_star = inner_attack(params, X, y, cfg, attack_seed)
    adv = forward_cache(params, x_star, "train")
    rr_v, rr_dl, rr_da = rr_terms(adv.logits, adv.a_phi, y, cfg.tau_rr, cfg.rcon_mode)
    grads: dict = {}
    terms = {"rr": float(rr_v.mean())}
    if cfg.framework == "pgd-at":
        ce_v, ce_dl = ce_terms(adv.logits, y)
        terms["cls"] = float(ce_v.mean())
        g, _ = backward(params, adv, (ce_dl + cfg.lam * rr_dl) / n, cfg.lam * rr_da / n)
        _add(grads, g)
        loss = terms["cls"] + cfg.lam * terms["rr"]
    else:
        clean = forward_cache(params, X, "train")
        ce_v, ce_dl = ce_terms(clean.logits, y)
        kl_v, kl_dp, kl_dq = kl_terms(clean.logits, adv.logits)
        terms["cls"] = float(ce_v.mean())
        terms["kl"] = float(kl_v.mean())
        d_clean_aphi = None
        loss = terms["cls"] + cfg.trades_beta * terms["kl"] + cfg.lam * terms["rr"]
        d_clean = ce_dl + cfg.trades_beta * kl_dp
        if cfg.rr_on_clean:
            c_v, c_dl, c_da = rr_terms(clean.logits, clean.a_phi, y, cfg.tau_rr, cfg.rcon_mode)
            terms["rr_clean"] = float(c_v.mean())
            loss += cfg.lam * terms["rr_clean"]
            d_clean = d_clean + cfg.lam * c_dl
            d_clean_aphi = cfg.lam * c_da / n
        g, _ = backward(params, clean, d_clean / n, d_clean_aphi)
        _add(grads, g)
        g, _ = backward(params, adv, (cfg.trades_beta * kl_dq + cfg.lam * rr_dl) / n, cfg.lam * rr_da / n)
        _add(grads, g)
    if not math.isfinite(loss):
        raise EvaluationError("non-finite batch loss")
    return BatchResult(loss, grads, terms, (adv.bn_mean, adv.bn_var), x_star)


# --------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    cls_loss: float
    rr_loss: float
    clean_acc: float
    pgd_acc: float
    seconds: float


TRAINLOG_HEADER = "epoch,cls_loss,rr_loss,clean_acc,pgd_acc,seconds"


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    final: Checkpoint | None = None
    best_epoch: int = 0

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write(TRAINLOG_HEADER + "\n")
        for r in self.records:
            buf.write(f"{r.epoch},{float(r.cls_loss)!r},{float(r.rr_loss)!r},{float(r.clean_acc)!r},{float(r.pgd_acc)!r},{r.seconds:.3f}\n")
        return buf.getvalue()


def accuracy_under_attack(params: TwoHeadParams, ds: Dataset, acfg: AttackConfig) -> tuple[float, float]:
    """Clean and PGD accuracy of ``params`` on ``ds``."""
    clean = float(np.mean(predict(params, ds.X).y_m == ds.y))
    res = pgd(params, ds.X, ds.y, replace(acfg, objective="ce"))
    return clean, float(np.mean(~res.success))


def architecture_for(cfg: TrainConfig, ds: Dataset) -> Architecture:
    return Architecture(ds.dim, cfg.widths, ds.n_classes, cfg.aux_hidden)


def train(cfg: TrainConfig, train_set: Dataset, val_set: Dataset,
          progress=None) -> tuple[Checkpoint, TrainLog]:
    """SGD with momentum and milestone decay; returns the checkpoint with the
    best validation PGD accuracy (earliest on ties) and the log, whose
    ``final`` field holds the last-epoch checkpoint."""
    if train_set.dim != val_set.dim or train_set.n_classes != val_set.n_classes:
        raise InvalidArgumentError("train and validation sets disagree on shape")
    n = len(train_set)
    if n < 2 * cfg.batch_size and cfg.epochs > 0:
        raise InvalidArgumentError(f"training set of {n} rows is smaller than 2 batches of {cfg.batch_size}")
    params = init_params(architecture_for(cfg, train_set), cfg.seed)
    digest = cfg.digest()
    best = Checkpoint(params.copy(), digest, cfg.seed, 0)
    best_acc = -1.0
    log = TrainLog()
    velocity = {k: np.zeros_like(params[k]) for k in params.trainable}
    val_attack = replace(cfg.validation_attack, seed=derive_seed(cfg.seed, "val-attack"))
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch - 1)
        order = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "shuffle", epoch))).permutation(n)
        cls_sum = rr_sum = 0.0
        count = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            try:
                res = batch_objective(params, train_set.X[idx], train_set.y[idx], cfg,
                                      attack_seed=derive_seed(cfg.seed, "train-attack", epoch, step))
            except (EvaluationError, AttackError) as exc:
                raise TrainingError(f"divergence: {exc}", epoch=epoch, step=step) from exc
            for k in params.trainable:
                g = res.grads[k] + cfg.weight_decay * params[k]
                velocity[k] = cfg.momentum * velocity[k] + g
                params.tensors[k] = params[k] - lr * velocity[k]
                if not np.all(np.isfinite(params.tensors[k])):
                    raise TrainingError(f"non-finite parameter {k}", epoch=epoch, step=step)
            update_running_stats(params, *res.bn_stats)
            if not all(np.all(np.isfinite(params.tensors[k])) for k in RUNNING_STATS):
                raise TrainingError("non-finite batch-norm statistics", epoch=epoch, step=step)
            cls_sum += res.terms["cls"] * idx.size
            rr_sum += res.terms["rr"] * idx.size
            count += idx.size
        clean_acc, pgd_acc = accuracy_under_attack(params, val_set, val_attack)
        rec = EpochRecord(epoch, cls_sum / count, rr_sum / count, clean_acc, pgd_acc, time.perf_counter() - t0)
        log.records.append(rec)
        if progress is not None:
            progress(rec)
        if pgd_acc > best_acc:
            best_acc = pgd_acc
            best = Checkpoint(params.copy(), digest, cfg.seed, epoch)
            log.best_epoch = epoch
    log.final = Checkpoint(params.copy(), digest, cfg.seed, cfg.epochs)
    return best, log
