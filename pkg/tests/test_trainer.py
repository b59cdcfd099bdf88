import numpy as np
import pytest

from hdnn import layers as L
from hdnn.data.preprocess import MixedDataset, build_dataset
from hdnn.data.synth import SynthConfig, generate
from hdnn.gradcheck import LAYER_OPS, gradcheck_suite
from hdnn.layers import Mode
from hdnn.losses import Metrics
from hdnn.model import (
    BranchSpec,
    HeadSpec,
    ModelConfig,
    build_model,
    checkpoint_bytes,
    mlp_branch_layers,
    predict_raw,
)
from hdnn.trainer import (
    PredictionRow,
    PredictionSet,
    TrainSpec,
    branch_inputs,
    evaluate,
    make_batches,
    predict,
    predict_values,
    train,
)
from hdnn.tensor import RngStream


def small_synth(wells=8, seed=0, length=16):
    return build_dataset(generate(SynthConfig(wells=wells, seed=seed)), length)


def small_hdnn(length=16, seed=0, dropout=0.25):
    numeric = BranchSpec("numeric", "numeric_mlp", mlp_branch_layers(8), (4,))
    curves = BranchSpec("curves", "sequence_cnn", [
        {"type": "conv1d", "filters": 4, "kernel": 3}, {"type": "batch_norm"}, {"type": "relu"},
        {"type": "max_pool", "window": 2}, {"type": "global_avg_pool"}], (7, length))
    return ModelConfig([numeric, curves], HeadSpec([
        {"type": "dense", "units": 8}, {"type": "relu"}, {"type": "dropout", "rate": dropout},
        {"type": "dense", "units": 1}]), seed)


def linear_dataset(m=200, seed=0):
    rng = RngStream(seed)
    x = rng.normal((m, 4))
    w = np.array([1.5, -2.0, 0.5, 3.0])
    y = x @ w + 0.7
    return MixedDataset(numeric=x, curves=np.zeros((m, 7, 2)), labels=y,
                        keys=[(f"W{i}", "F1") for i in range(m)],
                        numeric_names=[f"x{i}" for i in range(4)], vocabularies={})


def mlp_only(width=4, seed=0):
    return ModelConfig([BranchSpec("numeric", "numeric_mlp", mlp_branch_layers(16), (width,))],
                       HeadSpec([{"type": "dense", "units": 1}]), seed)


# ---------------------------------------------------------------- TrainSpec and batching

def test_trainspec_validation():
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(val_fraction=1.0), dict(val_fraction=-0.1),
                dict(patience=0), dict(lr=-1.0)):
        with pytest.raises(ValueError):
            TrainSpec(**bad)


def test_make_batches_merges_trailing_singleton():
    sizes = [len(b) for b in make_batches(np.arange(33), 16)]
    assert sizes == [16, 17]
    assert [len(b) for b in make_batches(np.arange(34), 16)] == [16, 16, 2]
    assert [len(b) for b in make_batches(np.arange(1), 16)] == [1]
    assert np.array_equal(np.concatenate(make_batches(np.arange(40), 7)), np.arange(40))


# ---------------------------------------------------------------- train

def test_zero_epochs_keeps_initial_params():
    ds = small_synth()
    fresh = build_model(small_hdnn())
    model, history, opt = train(fresh, ds, TrainSpec(epochs=0))
    assert len(history) == 0 and opt.t == 0
    assert all(np.array_equal(model.params[k], fresh.params[k]) for k in fresh.params)
    assert model.normalizer is not None


def test_training_is_deterministic():
    ds = small_synth()
    spec = TrainSpec(epochs=3, batch_size=8, seed=4)
    a, ha, oa = train(build_model(small_hdnn()), ds, spec)
    b, hb, ob = train(build_model(small_hdnn()), ds, spec)
    assert checkpoint_bytes(a, oa) == checkpoint_bytes(b, ob)
    assert ha.records == hb.records


def test_training_does_not_mutate_input_model():
    ds = small_synth()
    fresh = build_model(small_hdnn())
    before = {k: v.copy() for k, v in fresh.params.items()}
    train(fresh, ds, TrainSpec(epochs=2, batch_size=8))
    assert all(np.array_equal(before[k], fresh.params[k]) for k in before)


def test_history_length_equals_epochs():
    ds = small_synth()
    _, history, _ = train(build_model(small_hdnn()), ds, TrainSpec(epochs=4, patience=None))
    assert [r.epoch for r in history.records] == [1, 2, 3, 4]
    assert all(np.isfinite(r.val_loss) and np.isfinite(r.val_mae) for r in history.records)


def test_early_stopping_restores_best_epoch():
    ds = small_synth(wells=10)
    model, history, _ = train(build_model(small_hdnn()), ds, TrainSpec(epochs=40, lr=0.05, patience=3))
    best = min(history.records, key=lambda r: r.val_loss)
    assert history.best_epoch == best.epoch
    assert len(history) <= 40
    if len(history) < 40:
        assert len(history) == history.best_epoch + 3


def test_full_batch_single_epoch_is_one_step():
    ds = small_synth()
    spec = TrainSpec(epochs=1, batch_size=len(ds), val_fraction=0.0)
    _, history, opt = train(build_model(small_hdnn()), ds, spec)
    assert opt.t == 1 and history.steps == 1
    assert np.isnan(history.records[0].val_loss)


def test_learns_a_linear_map():
    ds = linear_dataset()
    spec = TrainSpec(epochs=200, batch_size=16, val_fraction=0.0, patience=None)
    _, history, _ = train(build_model(mlp_only()), ds, spec)
    assert history.records[-1].train_loss < 0.01 * history.records[0].train_loss


def test_train_needs_labels():
    ds = small_synth()
    ds.labels = None
    with pytest.raises(ValueError, match="labelled"):
        train(build_model(small_hdnn()), ds, TrainSpec(epochs=1))


# ---------------------------------------------------------------- evaluate / predict

def rigged_perfect_model(ds):
    """Branch with no layers feeding an identity head that reads the label column."""
    width = ds.numeric.shape[1]
    cfg = ModelConfig([BranchSpec("numeric", "numeric_mlp", [], (width,))],
                      HeadSpec([{"type": "dense", "units": 1}]))
    model, _, _ = train(build_model(cfg), ds, TrainSpec(epochs=0, val_fraction=0.0))
    W = np.zeros((width, 1))
    W[-1, 0] = 1.0
    model.params["head/0.W"] = W
    model.params["head/0.b"] = np.zeros(1)
    return model


def with_label_column(ds):
    """Append the normalized label as a numeric feature (a cheat only a test would use)."""
    numeric = np.concatenate([ds.numeric, ds.labels[:, None]], axis=1)
    return MixedDataset(numeric, ds.curves, ds.labels, ds.keys, ds.numeric_names + ["cheat"], ds.vocabularies)


def test_rigged_perfect_model_scores_perfectly():
    ds = with_label_column(small_synth(wells=6))
    model = rigged_perfect_model(ds)
    # head reads the normalised cheat column, which equals the normalised label
    norm = model.normalizer
    norm.numeric_mean[-1], norm.numeric_std[-1] = norm.label_mean, norm.label_std
    metrics = evaluate(model, ds)
    assert metrics.r_squared == pytest.approx(1.0, abs=1e-12)
    assert metrics.mse < 1e-20 and metrics.mae < 1e-10
    preds = predict(model, ds)
    assert np.allclose([r.predicted for r in preds.rows], ds.labels, rtol=0, atol=1e-10)


def test_constant_model_has_zero_r2():
    ds = small_synth()
    model = rigged_perfect_model(with_label_column(ds))
    model.params["head/0.W"][:] = 0.0
    model.params["head/0.b"][:] = 0.3
    assert evaluate(model, with_label_column(ds)).r_squared == 0.0


def test_evaluate_matches_prediction_rows(tmp_path):
    ds = small_synth()
    model, _, _ = train(build_model(small_hdnn()), ds, TrainSpec(epochs=2))
    metrics = evaluate(model, ds)
    path = tmp_path / "p.csv"
    predict(model, ds).write_csv(path)
    rows = PredictionSet.read_csv(path).rows
    again = Metrics.compute(np.array([r.predicted for r in rows]), np.array([r.measured for r in rows]))
    for f in ("mse", "mae", "r_squared"):
        assert abs(getattr(again, f) - getattr(metrics, f)) <= 1e-10 * max(1.0, abs(getattr(metrics, f)))
    assert again.count == metrics.count == len(ds)


def test_predict_order_and_count_unlabeled():
    ds = small_synth()
    model, _, _ = train(build_model(small_hdnn()), ds, TrainSpec(epochs=1))
    ds.labels = None
    preds = predict(model, ds)
    assert [(r.well_id, r.formation_id) for r in preds.rows] == ds.keys
    assert not preds.has_measured
    with pytest.raises(ValueError):
        evaluate(model, ds)


def test_predict_requires_normalizer():
    with pytest.raises(ValueError, match="normalizer"):
        predict_values(build_model(small_hdnn()), small_synth())


def test_infer_is_bit_identical_without_dropout_and_bn():
    ds = small_synth()
    cfg = ModelConfig([BranchSpec("numeric", "numeric_mlp", mlp_branch_layers(8), (4,))],
                      HeadSpec([{"type": "dense", "units": 4}, {"type": "relu"}, {"type": "dropout", "rate": 0.0},
                                {"type": "dense", "units": 1}]))
    model, _, _ = train(build_model(cfg), ds, TrainSpec(epochs=2))
    assert np.array_equal(predict_values(model, ds), predict_values(model, ds))


def test_prediction_csv_round_trip(tmp_path):
    rows = [PredictionRow("W1", "F1", 33.0, 20.0), PredictionRow("W2", "F1", 0.1 + 0.2, 105.0),
            PredictionRow("W3", "F1", -1e-300, None)]
    path = tmp_path / "p.csv"
    PredictionSet(rows).write_csv(path)
    assert PredictionSet.read_csv(path).rows == rows
    unlabeled = [PredictionRow("A", "B", 1.25)]
    PredictionSet(unlabeled).write_csv(path)
    assert path.read_text().splitlines()[0] == "well_id,formation_id,predicted_production_t_per_d"
    assert PredictionSet.read_csv(path).rows == unlabeled


def test_prediction_fixture_parses():
    from pathlib import Path
    rows = PredictionSet.read_csv(Path(__file__).parent / "fixtures" / "table2_predictions.csv").rows
    assert [(r.well_id, r.predicted, r.measured) for r in rows] == [
        ("W1", 33.0, 20.0), ("W2", 120.0, 105.0), ("W3", 20.0, 5.0)]


def test_prediction_csv_bad_header(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("well,formation,value\n")
    with pytest.raises(ValueError, match="header"):
        PredictionSet.read_csv(path)


def test_branch_inputs_routes_by_kind():
    ds = small_synth()
    model = build_model(small_hdnn())
    x = branch_inputs(model, ds)
    assert x["numeric"] is ds.numeric and x["curves"] is ds.curves
    assert predict_raw(model, x).shape == (len(ds), 1)


# ---------------------------------------------------------------- gradcheck suite

def test_gradcheck_suite_passes_and_is_deterministic():
    a = gradcheck_suite(0)
    assert a.passed, a.text()
    b = gradcheck_suite(0)
    assert [(r.case, r.max_rel_error) for r in a.results] == [(r.case, r.max_rel_error) for r in b.results]
    assert "ALL PASS" in a.text()


def test_gradcheck_flags_corrupted_conv1d_only():
    def broken_backward(dy, cache):
        dx, grads = L.conv1d_backward(dy, cache)
        grads["K"] = grads["K"] * 1.05
        return dx, grads
    report = gradcheck_suite(1, overrides={"conv1d": (LAYER_OPS["conv1d"][0], broken_backward)})
    assert not report.passed
    assert report.failures() and all(name.startswith("conv1d") for name in report.failures())
    assert "FAILED" in report.text()
