from dataclasses import replace

import numpy as np
import pytest

from oracles import frozen_rr, mean_ce, mean_kl, with_tensors
from rrlab import training
from rrlab.attacks import AttackConfig
from rrlab.data import class_means, gen_blobs, split
from rrlab.errors import InvalidArgumentError, TrainingError
from rrlab.losses import RR_MODES, rr_terms
from rrlab.model import Architecture, backward, forward_cache, init_params, predict
from rrlab.numkit import finite_diff_check
from rrlab.training import (TRAINLOG_HEADER, BatchResult, TrainConfig, batch_objective, init_params as _ip,
                            train)

assert _ip is init_params

NO_ATTACK = AttackConfig(eps=0.0, alpha=0.1, steps=0)


def toy(seed=0):
    params = init_params(Architecture(4, (8, 8), 3), seed)
    rng = np.random.default_rng(seed + 100)
    X = rng.normal(size=(10, 4)) * 1.5
    y = rng.integers(0, 3, 10)
    return params, X, y


def oracle_objective(params, base, X, y, x_star, cfg):
    rr = lambda Z: frozen_rr(params, base, Z, y, cfg.rcon_mode, cfg.tau_rr)
    if cfg.framework == "pgd-at":
        return mean_ce(params, x_star, y) + cfg.lam * rr(x_star)
    total = mean_ce(params, X, y) + cfg.trades_beta * mean_kl(params, X, x_star) + cfg.lam * rr(x_star)
    if cfg.rr_on_clean:
        total += cfg.lam * rr(X)
    return total


CASES = [(fw, mode, clean) for fw in training.FRAMEWORKS for mode in RR_MODES
         for clean in ((False, True) if fw == "trades" else (False,))]


@pytest.mark.parametrize("framework,mode,rr_on_clean", CASES)
def test_batch_gradient_matches_frozen_oracle(framework, mode, rr_on_clean):
    params, X, y = toy(1)
    cfg = TrainConfig(framework=framework, rcon_mode=mode, rr_on_clean=rr_on_clean, lam=0.8, tau_rr=0.7,
                      attack=AttackConfig(eps=0.3, alpha=0.1, steps=3), epochs=0, milestones=())
    res = batch_objective(params, X, y, cfg, attack_seed=4)
    assert res.loss == pytest.approx(oracle_objective(params, params, X, y, res.x_star, cfg), rel=1e-10)
    rep = finite_diff_check(
        lambda t: oracle_objective(with_tensors(params, t), params, X, y, res.x_star, cfg),
        {k: params[k] for k in params.trainable}, res.grads)
    assert rep.passed, rep


def test_zero_lambda_is_plain_adversarial_ce():
    params, X, y = toy(2)
    cfg = TrainConfig(lam=0.0, epochs=0, milestones=())
    res = batch_objective(params, X, y, cfg, attack_seed=1)
    assert res.loss == pytest.approx(mean_ce(params, res.x_star, y), rel=1e-12)
    assert all(np.all(res.grads[k] == 0) for k in params.phi)


def test_zero_radius_uses_clean_points():
    params, X, y = toy(3)
    cfg = TrainConfig(epochs=0, milestones=(), attack=NO_ATTACK)
    res = batch_objective(params, X, y, cfg)
    assert np.array_equal(res.x_star, X)
    expected = mean_ce(params, X, y) + frozen_rr(params, params, X, y, "rcon", 1.0)
    assert res.loss == pytest.approx(expected, rel=1e-12)


def test_objective_is_affine_in_lambda():
    params, X, y = toy(4)
    vals = [batch_objective(params, X, y, TrainConfig(lam=lam, epochs=0, milestones=()), attack_seed=2)
            for lam in (0.0, 1.0, 2.0)]
    slope = vals[0].terms["rr"]
    for lam, v in zip((0.0, 1.0, 2.0), vals):
        assert v.loss == pytest.approx(vals[0].loss + lam * slope, rel=1e-12)


def test_classifier_head_gets_no_rr_gradient_on_correct_points():
    params, X, _ = toy(5)
    y = predict(params, X, bn_mode="train").y_m
    c = forward_cache(params, X, "train")
    _, dl, da = rr_terms(c.logits, c.a_phi, y)
    g, _ = backward(params, c, dl, da)
    for k in ("head.weight", "head.bias"):
        assert np.all(g[k] == 0.0), k


def test_rectifier_descends_to_the_optimal_ratio():
    rng = np.random.default_rng(6)
    for net in range(100):
        params = init_params(Architecture(3, (6,), 3, aux_hidden=4), net)
        x = rng.normal(size=(1, 3))
        y = np.array([int(rng.integers(3))])
        c = forward_cache(params, x, "eval")
        p = np.exp(c.logits - c.logits.max())
        p /= p.sum()
        target = p[0, y[0]] / p.max()
        gaps = []
        for _ in range(60):
            c = forward_cache(params, x, "eval")
            gaps.append(abs(c.a_phi[0] - target))
            _, dl, da = rr_terms(c.logits, c.a_phi, y)
            g, _ = backward(params, c, dl, da)
            for k in params.phi:
                params.tensors[k] = params[k] - 0.05 * g[k]
        assert all(b <= a + 1e-15 for a, b in zip(gaps, gaps[1:])), net
        assert gaps[-1] < gaps[0] or gaps[0] < 1e-12


def test_weight_decay_leaves_running_stats_alone(monkeypatch):
    # zero loss gradients: only weight decay moves the parameters, and the
    # batch statistics fed back equal the current running statistics
    def fake(params, X, y, cfg, x_star=None, attack_seed=0):
        zero = {k: np.zeros_like(params[k]) for k in params.trainable}
        stats = (params["aux.bn.running_mean"].copy(), params["aux.bn.running_var"].copy())
        return BatchResult(0.0, zero, {"cls": 0.0, "rr": 0.0}, stats, X)

    monkeypatch.setattr(training, "batch_objective", fake)
    ds = gen_blobs(2, 2, 40, 3.0, 1.0, 0)
    cfg = TrainConfig(epochs=1, milestones=(), batch_size=20, weight_decay=0.5, lr=0.1, momentum=0.0,
                      widths=(4,), attack=NO_ATTACK)
    _, log = train(cfg, ds, ds)
    final = log.final.params
    start = init_params(final.arch, 0)
    assert np.array_equal(final["aux.bn.running_mean"], start["aux.bn.running_mean"])
    assert np.array_equal(final["aux.bn.running_var"], start["aux.bn.running_var"])
    assert np.allclose(final["aux.bn.weight"], start["aux.bn.weight"] * 0.95 ** 4)


def test_zero_epochs_returns_initial_parameters():
    ds = gen_blobs(2, 2, 10, 3.0, 1.0, 0)
    ckpt, log = train(TrainConfig(epochs=0, milestones=(), widths=(4,)), ds, ds)
    assert ckpt.params.equal(init_params(ckpt.arch, 0))
    assert log.records == [] and ckpt.epoch == 0
    assert log.csv() == TRAINLOG_HEADER + "\n"


def small_run(seed=0, **kw):
    ds = gen_blobs(2, 2, 100, 4.0, 1.0, seed=seed)
    tr, va = split(ds, 0.6, seed)
    cfg = TrainConfig(epochs=3, milestones=(2,), batch_size=32, widths=(8,), seed=seed,
                      attack=AttackConfig(eps=0.1, alpha=0.05, steps=2), **kw)
    return cfg, tr, va


def test_training_is_bit_reproducible():
    cfg, tr, va = small_run()
    a, la = train(cfg, tr, va)
    b, lb = train(cfg, tr, va)
    assert a.params.equal(b.params) and la.final.params.equal(lb.final.params)
    assert [r.pgd_acc for r in la.records] == [r.pgd_acc for r in lb.records]


def test_log_has_one_record_per_epoch_and_best_is_tracked():
    cfg, tr, va = small_run(framework="trades")
    best, log = train(cfg, tr, va)
    assert [r.epoch for r in log.records] == [1, 2, 3]
    assert best.epoch == log.best_epoch
    assert log.records[best.epoch - 1].pgd_acc == max(r.pgd_acc for r in log.records)


def test_two_blobs_reach_high_validation_accuracy():
    ds = gen_blobs(2, 2, 400, 4.0, 1.0, seed=3)
    tr, va = split(ds, 0.5, 3)
    # closed-form linear oracle on the same validation set
    m = class_means(2, 2, 4.0)
    lin = np.mean(np.argmin(((va.X[:, None] - m[None]) ** 2).sum(2), axis=1) == va.y)
    assert lin >= 0.95
    cfg = TrainConfig(epochs=20, milestones=(15, 18), batch_size=64, widths=(16, 16), seed=3,
                      attack=AttackConfig(eps=0.1, alpha=0.025, steps=10))
    best, _ = train(cfg, tr, va)
    acc = np.mean(predict(best.params, va.X).y_m == va.y)
    assert acc >= 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_step():
    cfg, tr, va = small_run(lr=1e12)
    cfg = replace(cfg, momentum=0.0)
    with pytest.raises(TrainingError) as err:
        train(cfg, tr, va)
    assert 1 <= err.value.epoch <= 3 and err.value.step is not None


def test_config_validation():
    for kw in ({"lam": -1.0}, {"milestones": (5, 3)}, {"milestones": (40,)}, {"framework": "mart"},
               {"rcon_mode": "both"}, {"tau_rr": 0.0}, {"batch_size": 1}):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kw)
    with pytest.raises(InvalidArgumentError):
        cfg, tr, va = small_run()
        train(replace(cfg, batch_size=200), tr, va)


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (0, 29, 30, 34, 35, 39)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])
