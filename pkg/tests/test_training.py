import csv
import math

import numpy as np
import pytest

from mome.backbones import BackboneConfig, build_model
from mome.context_provider import HashEncoder
from mome.datasets import make_cue_dataset, split_samples
from mome.errors import ConfigError, DimensionError, TrainingAbort
from mome.numerics import Tensor, grad_check
from mome.training import (Adam, EvalReport, TrainConfig, adam_step, best_k, cross_entropy_loss,
                           cross_entropy_tensor, evaluate, mae_metric, mape_metric, mse_loss, routing_log,
                           sweep_context_tokens, sweep_topk, train)


def small_cfg(**kw):
    base = dict(kind="mome", seq_len=16, horizon=4, d=8, d_hidden=8, n_experts=3, top_k=2, patch_len=8,
                layers=1, dropout=0.0, dprime=8, ctx_tokens=2)
    base.update(kw)
    return BackboneConfig(**base)


@pytest.fixture(scope="module")
def cue():
    return split_samples(make_cue_dataset(80, seed=2))


# -- metrics -------------------------------------------------------------------------

def test_metric_examples():
    assert mse_loss([1.0, 2.0], [1.0, 4.0]) == 2.0
    assert mae_metric([1.0, 2.0], [1.0, 4.0]) == 1.0
    assert mape_metric([110.0, 90.0], [100.0, 100.0]) == pytest.approx(10.0, rel=1e-14)
    assert mse_loss(np.ones((2, 3)), np.ones((2, 3))) == 0.0
    assert (mse_loss([2.0], [1.0]), mae_metric([2.0], [1.0]), mape_metric([2.0], [1.0])) == (1.0, 1.0, 100.0)


def test_mape_zero_target_is_finite():
    val = mape_metric([1.0], [0.0])
    assert math.isfinite(val) and val == pytest.approx(1e10)


def test_length_mismatch():
    for fn in (mse_loss, mae_metric, mape_metric):
        with pytest.raises(DimensionError):
            fn([1.0, 2.0], [1.0])
    with pytest.raises(DimensionError):
        mse_loss([], [])


def test_cross_entropy_examples():
    assert cross_entropy_loss([0.0, 0.0, 0.0], 1) == pytest.approx(math.log(3), rel=1e-14)
    assert cross_entropy_loss([10.0, 0.0, 0.0], 0) == pytest.approx(9.0799e-5, rel=1e-3)
    assert math.isfinite(cross_entropy_loss([1000.0, -1000.0], 1))
    with pytest.raises(ConfigError):
        cross_entropy_loss([0.0, 1.0], 2)


def test_cross_entropy_tensor_matches_scalar_and_grad(rng):
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    t = cross_entropy_tensor(Tensor(logits), labels).item()
    assert t == pytest.approx(np.mean([cross_entropy_loss(l, y) for l, y in zip(logits, labels)]), rel=1e-13)
    z = Tensor(logits, requires_grad=True)
    assert grad_check(lambda: cross_entropy_tensor(z, labels), [z]) <= 1e-6


# -- adam ------------------------------------------------------------------------------

def test_adam_zero_grad_is_noop():
    p = [np.array([1.0, -2.0])]
    state = {}
    for _ in range(5):
        p = adam_step(p, [np.zeros(2)], state, TrainConfig(lr=0.1))
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    out = adam_step([np.array([3.0, 3.0])], [np.array([0.5, -7.0])], {}, TrainConfig(lr=0.01, eps=0.0))
    assert np.allclose(out[0], [2.99, 3.01], rtol=0, atol=1e-15)


def test_adam_minimises_quadratic():
    w = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam([w], TrainConfig(lr=0.05))
    for _ in range(500):
        w.grad = None
        (w * w).sum().backward()
        opt.step()
    assert abs(w.data[0]) <= 1e-3


def test_adam_shape_errors():
    with pytest.raises(DimensionError):
        adam_step([np.zeros(2)], [np.zeros(3)], {}, TrainConfig())
    with pytest.raises(DimensionError):
        adam_step([np.zeros(2)], [], {}, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1, "momentum": 0.9})


# -- training loop ---------------------------------------------------------------------------

def test_zero_epochs_leaves_weights(cue):
    model = build_model(small_cfg())
    before = model.state_dict()
    res = train(model, cue[0], HashEncoder(8), TrainConfig(epochs=0))
    assert res.loss_curve == []
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_reduces_loss(cue):
    model = build_model(small_cfg())
    res = train(model, cue[0], HashEncoder(8), TrainConfig(epochs=50, lr=3e-3, batch=16, val_fraction=0))
    assert res.loss_curve[-1] < res.loss_curve[0]
    assert res.best_epoch == 49


def test_training_is_reproducible(cue):
    outs = []
    for _ in range(2):
        model = build_model(small_cfg(dropout=0.2))
        res = train(model, cue[0], HashEncoder(8), TrainConfig(epochs=3, lr=3e-3, batch=16, seed=4))
        outs.append((res.loss_curve, res.val_curve, model.state_dict()))
    assert outs[0][0] == outs[1][0] and outs[0][1] == outs[1][1]
    assert all(np.array_equal(outs[0][2][k], outs[1][2][k]) for k in outs[0][2])


def test_best_validation_state_restored(cue):
    model = build_model(small_cfg())
    seen = []
    res = train(model, cue[0], HashEncoder(8), TrainConfig(epochs=6, lr=0.05, batch=8),
                on_epoch=lambda e, tl, vl: seen.append(vl))
    assert res.val_curve == seen
    assert res.best_epoch == int(np.argmin(res.val_curve))


def test_nan_aborts(cue):
    bad = [s for s in cue[0]]
    bad[3] = type(bad[3]).from_json(bad[3].to_json())
    bad[3].x_in = np.full_like(np.asarray(bad[3].x_in, dtype=float), np.nan)
    with pytest.raises(TrainingAbort) as info:
        train(build_model(small_cfg()), bad, HashEncoder(8), TrainConfig(epochs=1, batch=4, val_fraction=0))
    assert info.value.step >= 0 and info.value.batch_id >= 0


def test_multimodal_model_requires_provider(cue):
    with pytest.raises(ConfigError):
        train(build_model(small_cfg()), cue[0], None, TrainConfig(epochs=1))


# -- evaluation --------------------------------------------------------------------------------

class _Oracle:
    """Stands in for a model; predicts the stored target or a fixed class."""

    def __init__(self, cfg, table=None, cls=None):
        self.cfg, self.table, self.cls = cfg, table, cls
        self.modulated = False

    def predict(self, x, contexts=None, trace=None):
        if self.cls is not None:
            out = np.zeros((x.shape[0], self.cfg.n_classes))
            out[:, self.cls] = 1.0
            return out
        return np.stack([self.table[tuple(row)] for row in x])


def test_evaluate_perfect_predictor(cue):
    test = cue[1]
    table = {tuple(s.x_in): np.asarray(s.x_out) for s in test}
    rep = evaluate(_Oracle(small_cfg(), table), test)
    assert rep.mse == 0.0 and rep.mae == 0.0 and rep.mape == 0.0 and rep.n == len(test)


def test_evaluate_perfect_classifier():
    samples = make_cue_dataset(12, seed=0)
    for s in samples:
        s.trend_label = 2
    rep = evaluate(_Oracle(small_cfg(task="trend", n_classes=3), cls=2), samples, task="trend")
    assert rep.accuracy == 100.0 and rep.acc_3way == 100.0


def test_evaluate_majority_class(cue):
    samples = [type(s).from_json(s.to_json()) for s in cue[0][:30]]
    for i, s in enumerate(samples):
        s.trend_label = i % 3
    rep = evaluate(_Oracle(small_cfg(task="trend", n_classes=3), cls=0), samples, task="trend")
    assert rep.accuracy == pytest.approx(100 / 3, abs=1e-9)
    back = EvalReport.from_json(rep.to_json())
    assert back == rep


def test_evaluate_five_way_reports_three_way():
    samples = make_cue_dataset(10, seed=0)
    for s, lab in zip(samples, [0, 1, 2, 3, 4, 0, 1, 2, 3, 4]):
        s.trend_label = lab
    rep = evaluate(_Oracle(small_cfg(task="trend", n_classes=5), cls=1), samples, task="trend")
    assert rep.acc_5way == 20.0 and rep.acc_3way == 40.0


# -- sweep and routing ---------------------------------------------------------------------------

def test_sweep_rows_and_full_k(cue, tmp_path):
    base = small_cfg()
    tcfg = TrainConfig(epochs=2, lr=3e-3, batch=16)
    rows = sweep_topk(base, tcfg, cue[0], cue[1], HashEncoder(8), [1, 2, 3], out_dir=str(tmp_path))
    assert [r["K"] for r in rows] == [1, 2, 3] and all(r["error"] == "" for r in rows)
    with open(tmp_path / "sweep_k.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    assert (tmp_path / "sweep_k.svg").stat().st_size > 0
    assert best_k(rows) in (1, 2, 3)
    model = build_model(BackboneConfig.from_dict({**base.to_dict(), "top_k": 3}))
    train(model, cue[0], HashEncoder(8), tcfg)
    rep = evaluate(model, cue[1], HashEncoder(8), keep_records=False)
    assert rep.mse == rows[-1]["mse"]
    x = np.stack([s.x_in for s in cue[1]])
    ctx = [HashEncoder(8)(s.id, s.text) for s in cue[1]]
    assert np.array_equal(model.predict(x, ctx), model.predict(x, ctx, dense=True))
    with pytest.raises(ConfigError):
        sweep_topk(base, tcfg, cue[0], cue[1], HashEncoder(8), [4])


def test_context_token_sweep(cue):
    rows = sweep_context_tokens(small_cfg(), TrainConfig(epochs=1, batch=16), cue[0], cue[1], HashEncoder(8), [1, 3])
    assert [r["ctx_tokens"] for r in rows] == [1, 3] and all(np.isfinite(r["mse"]) for r in rows)
    assert best_k(rows, key="ctx_tokens") in (1, 3)
    with pytest.raises(ConfigError):
        sweep_context_tokens(small_cfg(kind="dlinear_moe", channels=1), TrainConfig(), cue[0], cue[1], None, [2])


def test_routing_log_sets_have_k_members(cue, rng):
    model = build_model(small_cfg(layers=2))
    for name, p in model.named_parameters():
        if "router_mod" in name:
            p.data = rng.standard_normal(p.shape)
    log = routing_log(model, cue[1], HashEncoder(8))
    n_tokens = len(cue[1]) * model.cfg.n_patches
    assert len(log.entries) == 2 * n_tokens
    assert all(len(e["pre_topk"]) == 2 and len(e["post_topk"]) == 2 for e in log.entries)
    assert {e["token"] for e in log.entries} == set(range(n_tokens))
    summary = log.summary()
    assert 0.0 < summary["changed_fraction"] <= 1.0 and set(summary["per_layer"]) == {"0", "1"}
