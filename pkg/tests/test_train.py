import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from at3d import data as D
from at3d import train as T
from at3d.errors import ConfigError, DataError, LabelError, NumericError
from at3d.models import ModelConfig, build_model
from at3d.tensor import Tensor


# -- schedule ----------------------------------------------------------

def test_lr_examples():
    assert T.lr_at(1) == 0.001
    assert T.lr_at(15) == 0.001
    assert T.lr_at(16) == 0.0001
    assert T.lr_at(30) == 0.0001
    assert T.lr_at(31) == 0.00001
    with pytest.raises(ValueError):
        T.lr_at(0)


@given(st.integers(1, 200))
def test_lr_non_increasing_piecewise_constant(e):
    assert T.lr_at(e + 1) <= T.lr_at(e)
    assert T.lr_at(e) == T.lr_at(15 * ((e - 1) // 15) + 1)


# -- optimiser ---------------------------------------------------------

def scalar_momentum_oracle(w, steps, lr, m, wd):
    """Plain-python momentum SGD on f(w) = w**2."""
    v = None
    out = []
    for _ in range(steps):
        g = 2 * w + wd * w
        v = g if v is None else m * v + g
        w = w - lr * v
        out.append(w)
    return out


def test_sgd_matches_scalar_oracle():
    cfg = T.TrainConfig(lr0=0.1, momentum=0.9, weight_decay=0.0)
    p = {"w": np.array([1.0])}
    vel = {}
    got = []
    for _ in range(5):
        T.sgd_step(p, {"w": 2 * p["w"]}, vel, cfg, 1)
        got.append(float(p["w"][0]))
    want = scalar_momentum_oracle(1.0, 5, 0.1, 0.9, 0.0)
    assert want[:2] == pytest.approx([0.8, 0.46], abs=1e-12)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_sgd_weight_decay_oracle():
    cfg = T.TrainConfig(lr0=0.1, momentum=0.9, weight_decay=0.5)
    p = {"w": np.array([1.0])}
    vel = {}
    for _ in range(4):
        T.sgd_step(p, {"w": 2 * p["w"]}, vel, cfg, 1)
    assert p["w"][0] == pytest.approx(scalar_momentum_oracle(1.0, 4, 0.1, 0.9, 0.5)[-1], abs=1e-12)


def test_sgd_zero_cases():
    cfg0 = T.TrainConfig(weight_decay=0.0)
    p = {"a": np.array([1.5, -2.0])}
    T.sgd_step(p, {"a": np.zeros(2)}, {}, cfg0, 1)
    np.testing.assert_array_equal(p["a"], [1.5, -2.0])
    T.sgd_step(p, {"a": None}, {}, T.TrainConfig(), 1)
    assert (np.abs(p["a"]) < [1.5, 2.0]).all() and np.sign(p["a"]).tolist() == [1, -1]


def test_sgd_without_momentum_is_gradient_descent(gen):
    cfg = T.TrainConfig(lr0=0.05, momentum=0.0, weight_decay=0.0)
    w = gen.normal(size=4)
    p = {"w": w.copy()}
    vel = {}
    for _ in range(3):
        g = gen.normal(size=4)
        T.sgd_step(p, {"w": g}, vel, cfg, 1)
        w = w - 0.05 * g
    np.testing.assert_allclose(p["w"], w, rtol=0, atol=1e-15)


def test_sgd_non_finite_gradient_names_parameter():
    with pytest.raises(NumericError) as e:
        T.sgd_step({"layer.w": np.ones(2)}, {"layer.w": np.array([1.0, np.inf])}, {}, T.TrainConfig(), 1)
    assert "layer.w" in str(e.value)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        T.TrainConfig(lr0=0)
    with pytest.raises(ConfigError):
        T.TrainConfig(patience=0)


# -- early stopping ----------------------------------------------------

def run_stopper(seq, patience=5):
    s = T.EarlyStopping(patience)
    for i, m in enumerate(seq, 1):
        if s.update(m):
            return i, s.best_epoch
    return len(seq), s.best_epoch


def test_early_stopping_examples():
    assert run_stopper([10, 11, 11, 11, 11, 11, 11]) == (7, 2)
    assert run_stopper(list(range(30))) == (30, 30)


# -- metrics -----------------------------------------------------------

def test_topk_examples():
    probs = np.array([[0.9, 0.1, 0.0], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7], [0.5, 0.4, 0.1]])
    assert T.topk(probs, [0, 1, 2, 1], 1) == 75.0
    assert T.topk(probs, [0, 1, 2, 1], 3) == 100.0
    with pytest.raises(ConfigError):
        T.topk(probs, [0, 1, 2, 1], 4)
    with pytest.raises(ConfigError):
        T.topk(probs, [0, 1, 2, 1], 0)


def test_uniform_logits_tie_break_lowest_index():
    m = T.metrics_from_probs(np.full((1, 4), 0.25), [0], 4)
    assert (m.top1, m.top5) == (100.0, 100.0)
    m = T.metrics_from_probs(np.full((1, 4), 0.25), [3], 4)
    assert (m.top1, m.top5) == (0.0, 100.0)


def test_one_hot_is_perfect():
    labels = [0, 1, 2, 2, 1]
    m = T.metrics_from_probs(np.eye(3)[labels], labels, 3)
    assert m.top1 == m.top5 == 100.0
    assert m.per_class.tolist() == [100.0] * 3


@given(st.integers(0, 2**31 - 1), st.integers(2, 9), st.integers(1, 30))
def test_metric_invariants(seed, k, n):
    gen = np.random.default_rng(seed)
    probs = gen.random((n, k))
    labels = gen.integers(0, k, size=n)
    m = T.metrics_from_probs(probs, labels, k)
    assert m.top1 <= m.top5
    present = m.counts > 0
    weighted = float((m.per_class[present] * m.counts[present]).sum() / n)
    assert abs(weighted - m.top1) < 1e-9
    assert np.isnan(m.per_class[~present]).all()
    assert m.confusion.sum() == n


def test_metrics_label_errors():
    with pytest.raises(LabelError):
        T.metrics_from_probs(np.ones((1, 3)), [3], 3)


class ScriptedModel:
    """Returns pre-set logits clip by clip."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, np.float64)

    def __call__(self, x: Tensor) -> Tensor:
        assert x.shape[0] == len(self.logits)
        return Tensor(self.logits)


def test_clip_averaging_flips_decision():
    video = D.RawVideo("v", np.zeros((16, 8, 8, 3), np.uint8))
    pcfg = D.PipelineConfig.desk(clip_len=16, side=8, min_frames=16)
    model = ScriptedModel(np.log([[0.6, 0.4], [0.1, 0.9], [0.1, 0.9]]))
    m = T.evaluate(model, [(video, 1)], pcfg, 0, 2)
    np.testing.assert_allclose(m.probs[0], [0.8 / 3, 2.2 / 3], rtol=1e-12)
    assert m.top1 == 100.0
    single = T.metrics_from_probs([[0.6, 0.4]], [1], 2)
    assert single.top1 == 0.0
    with pytest.raises(LabelError):
        T.evaluate(model, [(video, 2)], pcfg, 0, 2)


# -- logs --------------------------------------------------------------

def test_epoch_log_roundtrip(tmp_path):
    logs = [T.EpochLog(1, T.lr_at(1), 1.25, 50.0, 100.0, False),
            T.EpochLog(16, T.lr_at(16), 0.5, 62.5, 100.0, True)]
    path = tmp_path / "epochs.csv"
    T.write_epoch_log(logs, path, {"seed": 3})
    text = path.read_text()
    assert text.startswith("# at3d ") and "# seed=3\n" in text
    assert "16,0.0001,0.500000,62.50,100.00,1" in text
    assert T.read_epoch_log(path) == logs


# -- training loop -----------------------------------------------------

def tiny_run(seed=0, max_epochs=2):
    m, vids = D.synth_motion_dataset(classes=2, per_class=6, side=16, frames=8, seed=seed)
    train_part, val_part = D.stratified_holdout(m.entries, 1 / 3, seed)
    by_id = {v.id: v for v in vids}
    train_set = [(by_id[i], l) for i, l in train_part]
    val_set = [(by_id[i], l) for i, l in val_part]
    model = build_model(ModelConfig("r3d", classes=2, width_scale=Fraction(1, 8), frames=8, side=16), seed=seed)
    cfg = T.TrainConfig(batch_size=4, max_epochs=max_epochs, lr0=0.01)
    pcfg = D.PipelineConfig.desk(clip_len=8, side=16, min_frames=8)
    seen = []
    res = T.train_loop(model, train_set, val_set, cfg, pcfg, seed, 2, seen.append)
    return model, res, seen, (train_set, val_set, cfg, pcfg)


def test_train_loop_is_deterministic():
    m1, r1, seen, _ = tiny_run()
    m2, r2, _, _ = tiny_run()
    assert r1.logs == r2.logs == seen
    assert [e.epoch for e in r1.logs] == [1, 2]
    for k, v in m1.state_dict().items():
        np.testing.assert_array_equal(v, m2.state_dict()[k])
    assert all(math.isfinite(e.train_loss) for e in r1.logs)


def test_train_loop_restores_best_weights():
    model, res, _, (_, val_set, _, pcfg) = tiny_run(max_epochs=3)
    best = max(e.val_top1 for e in res.logs)
    assert res.best_metrics.top1 == best
    assert res.logs[res.best_epoch - 1].val_top1 == best
    assert T.evaluate(model, val_set, pcfg, 0, 2).top1 == best
    for k, v in res.best_state.items():
        np.testing.assert_array_equal(model.state_dict()[k], v)


def test_train_loop_rejects_bad_splits():
    _, _, _, (train_set, val_set, cfg, pcfg) = tiny_run(max_epochs=1)
    model = build_model(ModelConfig("r3d", classes=2, width_scale=Fraction(1, 8), frames=8, side=16))
    with pytest.raises(DataError):
        T.train_loop(model, train_set, [], cfg, pcfg, 0, 2)
    with pytest.raises(DataError):
        T.train_loop(model, train_set, train_set[:1], cfg, pcfg, 0, 2)
    with pytest.raises(DataError):
        T.train_epoch(model, [], T.SGD(model, cfg), pcfg, 0, 1)
