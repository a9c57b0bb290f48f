import math

import numpy as np
import pytest

from msgwtcn import training as tr
from msgwtcn.data import Normalizer, PreparedData, SampleSet, prepare, synth_generate
from msgwtcn.errors import ConfigError, EmptyDataset, NonFinite
from msgwtcn.model import ModelConfig, new_model
from msgwtcn.training import TrainConfig, evaluate, rmsprop_step, train

pytestmark = pytest.mark.filterwarnings("ignore:receptive field:UserWarning")

SMALL = dict(num_layers=2, hidden_channels=4, scales=(0.85, 3.85), exact_wavelets=True, history=6)


@pytest.fixture(scope="module")
def small_problem():
    graph, series = synth_generate("grid", 600, 5, width=2, height=3)
    return graph, prepare(series, history=6)


def small_model(graph, seed=0, **kw):
    return new_model(ModelConfig(**{**SMALL, **kw}), graph, seed)


# optimizer


def test_zero_gradient_only_decays_state():
    cfg = TrainConfig()
    p = {"w": np.array([1.0, -2.0])}
    st = {"w": np.array([0.5, 0.2])}
    rmsprop_step(p, {"w": np.zeros(2)}, st, cfg)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    np.testing.assert_allclose(st["w"], [0.495, 0.198], rtol=1e-15)


def test_first_step_hand_value():
    p = {"w": np.array([0.0])}
    st = {}
    rmsprop_step(p, {"w": np.array([1.0])}, st, TrainConfig())
    assert st["w"][0] == pytest.approx(0.01, rel=1e-14)
    assert p["w"][0] == pytest.approx(-0.001 / (0.1 + 1e-8), rel=1e-12)
    assert p["w"][0] == pytest.approx(-0.00999999, abs=1e-8)


def test_repeated_step_shrinks():
    p = {"w": np.array([0.0])}
    st = {}
    g = {"w": np.array([1.0])}
    rmsprop_step(p, g, st, TrainConfig())
    d1 = -p["w"][0]
    before = p["w"][0]
    rmsprop_step(p, g, st, TrainConfig())
    d2 = before - p["w"][0]
    assert 0 < d2 < d1


def test_tiny_learning_rate_is_nearly_identity():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 4))
    p = {"w": w.copy()}
    rmsprop_step(p, {"w": rng.normal(size=(3, 4))}, {}, TrainConfig(learning_rate=1e-300))
    np.testing.assert_array_equal(p["w"], w)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)


def test_nonfinite_gradient_aborts_whole_step():
    p = {"a": np.ones(2), "b": np.ones(2)}
    st = {}
    with pytest.raises(NonFinite, match="b"):
        rmsprop_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, st, TrainConfig())
    np.testing.assert_array_equal(p["a"], 1.0)
    assert st == {}


def test_config_validation():
    for bad in [dict(early_stop_patience=0), dict(batch_size=0), dict(max_epochs=-1),
                dict(rmsprop_alpha=1.0), dict(gradient_clip_norm=0.0)]:
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rat": 0.1})
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


# evaluation


def identity_split(pred_like, targets):
    x = np.zeros((len(targets), 6, targets.shape[2], 1))
    return SampleSet(x, targets, np.arange(len(targets)), "val")


class Fixed:
    """Stand-in model returning stored predictions."""

    def __init__(self, out):
        self.out = out

    def predict(self, x, batch_size=256):
        return self.out[: len(x)]


def test_evaluate_examples():
    norm = Normalizer(np.array([0.0]), np.array([1.0]))
    y = np.array([0.0, 1.0, 0.0, 1.0]).reshape(4, 1, 1, 1)
    split = identity_split(None, y)
    assert evaluate(Fixed(y.copy()), split, norm) == {"mae": 0.0, "rmse_norm": 0.0, "rmse_denorm": 0.0}
    m = evaluate(Fixed(np.full_like(y, 0.5)), split, norm)
    assert m["mae"] == 0.5 and m["rmse_norm"] == 0.5
    with pytest.raises(EmptyDataset):
        evaluate(Fixed(y), split.subset(slice(0, 0)), norm)


def test_evaluate_mae_le_rmse(small_problem):
    graph, data = small_problem
    model = small_model(graph)
    for split in (data.train, data.val, data.test):
        m = evaluate(model, split, data.normalizer)
        assert m["mae"] <= m["rmse_denorm"] + 1e-12


def test_evaluate_uses_original_units():
    norm = Normalizer(np.array([10.0]), np.array([30.0]))
    raw = np.array([10.0, 30.0]).reshape(2, 1, 1, 1)
    split = identity_split(None, raw).map(norm.apply)
    m = evaluate(Fixed(np.full((2, 1, 1, 1), 0.5)), split, norm)
    assert m["mae"] == 10.0 and m["rmse_norm"] == 0.5


# training loop


def test_zero_epochs_is_a_no_op(small_problem):
    graph, data = small_problem
    model = small_model(graph)
    before = model.state()
    hist = train(model, data, TrainConfig(max_epochs=0))
    assert len(hist.records) == 1 and hist.best_epoch == 0
    assert math.isnan(hist.records[0].train_loss)
    assert hist.records[0].val_mae == evaluate(model, data.val, data.normalizer)["mae"]
    for k, v in model.state().items():
        np.testing.assert_array_equal(v, before[k])


def test_constant_signal_is_learned():
    graph, _ = synth_generate("grid", 500, 0, width=2, height=2)
    x = np.full((64, 6, 4, 1), 0.6)
    y = np.full((64, 1, 4, 1), 0.6)
    s = SampleSet(x, y, np.arange(64))
    data = PreparedData(s.subset(slice(0, 48), "train"), s.subset(slice(48, 56), "val"),
                        s.subset(slice(56, 64), "test"), Normalizer(np.zeros(4), np.ones(4)), graph.node_ids)
    model = small_model(graph, dropout_p=0.0)
    hist = train(model, data, TrainConfig(max_epochs=20, batch_size=8, learning_rate=0.003,
                                          early_stop_patience=20))
    assert hist.records[-1].train_loss < 1e-6


def test_same_seed_same_curves(small_problem, tmp_path):
    graph, data = small_problem
    cfg = TrainConfig(max_epochs=2, seed=4)
    h1 = train(small_model(graph), data, cfg, tmp_path / "a.csv", tmp_path / "a.ckpt")
    h2 = train(small_model(graph), data, cfg, tmp_path / "b.csv", tmp_path / "b.ckpt")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    np.testing.assert_array_equal(h1.column("train_loss")[1:], h2.column("train_loss")[1:])
    h3 = train(small_model(graph), data, TrainConfig(max_epochs=2, seed=5))
    assert not np.array_equal(h1.column("train_loss")[1:], h3.column("train_loss")[1:])


def test_history_and_best_checkpoint(small_problem, tmp_path):
    from msgwtcn.model import load_checkpoint

    graph, data = small_problem
    hist = train(small_model(graph), data, TrainConfig(max_epochs=3), tmp_path / "h.csv", tmp_path / "m.ckpt")
    maes = hist.column("val_mae")
    assert hist.best_val_mae == maes.min() and maes[hist.best_epoch] == maes.min()
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_mae,val_rmse_norm,val_rmse_denorm,seconds"
    assert len(lines) == len(hist.records) + 1
    model, extra = load_checkpoint(tmp_path / "m.ckpt", graph)
    norm = Normalizer.from_dict(extra["normalizer"])
    assert evaluate(model, data.val, norm)["mae"] == hist.best_val_mae == extra["best_val_mae"]


def test_early_stopping_with_patience(small_problem, monkeypatch):
    graph, data = small_problem
    scripted = iter([5.0, 4.0, 4.5, 3.0, 3.5, 3.6, 1.0])
    monkeypatch.setattr(tr, "evaluate", lambda *a, **k: {"mae": next(scripted), "rmse_norm": 0.0, "rmse_denorm": 0.0})
    model = small_model(graph)
    hist = train(model, data, TrainConfig(max_epochs=30, early_stop_patience=2))
    assert [r.epoch for r in hist.records] == [0, 1, 2, 3, 4, 5]
    assert hist.best_epoch == 3 and hist.best_val_mae == 3.0


def test_huge_clip_matches_no_clip(small_problem):
    graph, data = small_problem
    a = train(small_model(graph), data, TrainConfig(max_epochs=1))
    b = train(small_model(graph), data, TrainConfig(max_epochs=1, gradient_clip_norm=1e300))
    np.testing.assert_array_equal(a.column("train_loss")[1:], b.column("train_loss")[1:])
    c = train(small_model(graph), data, TrainConfig(max_epochs=1, gradient_clip_norm=1e-6))
    assert not np.array_equal(a.column("val_mae"), c.column("val_mae"))


def test_clip_scales_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    tr._clip(g, 1.0)
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    g = {"a": np.array([3.0])}
    tr._clip(g, 10.0)
    assert g["a"][0] == 3.0


def test_interleaved_evaluation_does_not_change_training(small_problem, monkeypatch):
    graph, data = small_problem
    cfg = TrainConfig(max_epochs=1)
    plain = train(small_model(graph), data, cfg)

    model = small_model(graph)
    step = tr.rmsprop_step

    def step_then_eval(*args):
        out = step(*args)
        evaluate(model, data.val, data.normalizer)
        return out

    monkeypatch.setattr(tr, "rmsprop_step", step_then_eval)
    noisy = train(model, data, cfg)
    np.testing.assert_array_equal(plain.column("train_loss")[1:], noisy.column("train_loss")[1:])


def test_nonfinite_loss_reports_position(small_problem):
    graph, data = small_problem
    model = small_model(graph)
    bad = data.train.map(lambda v: v.copy())
    bad.inputs[0, 0, 0, 0] = np.nan
    broken = PreparedData(bad, data.val, data.test, data.normalizer, data.node_ids)
    with pytest.raises(NonFinite, match="epoch 1, batch"):
        with np.errstate(invalid="ignore"):
            train(model, broken, TrainConfig(max_epochs=1))


def test_empty_split_rejected(small_problem):
    graph, data = small_problem
    empty = PreparedData(data.train.subset(slice(0, 0)), data.val, data.test, data.normalizer, data.node_ids)
    with pytest.raises(EmptyDataset):
        train(small_model(graph), empty, TrainConfig(max_epochs=1))


def test_history_is_appended_per_epoch(small_problem, tmp_path, monkeypatch):
    graph, data = small_problem
    path = tmp_path / "h.csv"
    seen = []
    step = tr.evaluate

    def spy(*args, **kw):
        if path.exists():
            seen.append(len(path.read_text().splitlines()))
        return step(*args, **kw)

    monkeypatch.setattr(tr, "evaluate", spy)
    hist = train(small_model(graph), data, TrainConfig(max_epochs=2), history_path=path)
    # header is written before epoch 0 is evaluated; each later evaluation sees one more row
    assert seen == [1, 2, 3]
    copy = tmp_path / "copy.csv"
    hist.write_csv(copy)
    assert copy.read_bytes() == path.read_bytes()
