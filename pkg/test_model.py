"""Tests for the forecasting network, training loop and checkpoints."""

import io
from datetime import timedelta

import numpy as np
import pytest

from conftest import START
from src.catalog import HeatMapSeq, LabelTensor, labels_from_heatmaps, rasterize_daily, split_days
from src.checkpoint import load_checkpoint, save_checkpoint
from src.evaluation import pool_samples, roc_auc
from src.exceptions import DivergenceError, InsufficientHistoryError, ShapeMismatchError, SplitError
from src.model import (
    ForecastNet,
    build_windows,
    forward_window,
    predict_days,
    predict_map,
    sweep_class_weights,
    train,
    usable_days,
    write_training_log,
)
from src.models import GridSpec, LabelSpec, ModelConfig, SynthConfig, TrainConfig
from src.nn import finite_diff_check, weighted_softmax_ce
from src.prior import PriorMap, fit_prior, prior_logits, prior_probability_maps
from src.synth import synthesize

TINY = dict(embed_channels=3, hidden_channels=4, window_days=4, head_depth=2)


def _random_data(days: int = 40, shape=(6, 6), seed: int = 0, rate: float = 0.15):
    rng = np.random.default_rng(seed)
    maps = np.where(rng.random((days,) + shape) < rate, rng.uniform(1.0, 6.0, (days,) + shape), 0.0)
    heatmaps = HeatMapSeq(start_day=START, maps=maps)
    reference_days = heatmaps.all_days()
    labels = labels_from_heatmaps(heatmaps, LabelSpec(t_min_days=1, t_max_days=3, mag_threshold=4.0),
                                  reference_days)
    return heatmaps, labels


def _prior_for(labels: LabelTensor, c: float = 0.0):
    return prior_logits(fit_prior(labels), c=c)


def _net(labels, **overrides) -> ForecastNet:
    config = ModelConfig(**{**TINY, **overrides})
    prior = _prior_for(labels) if config.use_prior_residual else None
    return ForecastNet(config, prior)


def _days(heatmaps, first, last):
    return [heatmaps.start_day + timedelta(days=i) for i in range(first, last)]


# =============================================================================
# ARCHITECTURE
# =============================================================================

@pytest.mark.parametrize("variant", ["cnn", "cnn_lstm"])
@pytest.mark.parametrize("c", [0.0, 2.5])
def test_untrained_residual_net_returns_prior(variant, c):
    heatmaps, labels = _random_data()
    prior = fit_prior(labels)
    net = ForecastNet(ModelConfig(variant=variant, **TINY), prior_logits(prior, c=c))
    for day in _days(heatmaps, 3, 10):
        np.testing.assert_allclose(predict_map(net, day, heatmaps), prior.p, rtol=0, atol=1e-12)


def test_all_zero_history_returns_prior():
    heatmaps, labels = _random_data()
    prior = fit_prior(labels)
    net = ForecastNet(ModelConfig(**TINY), prior_logits(prior))
    window = np.zeros((4, 6, 6))
    np.testing.assert_allclose(forward_window(net, window), prior.p, rtol=0, atol=1e-12)


def test_untrained_plain_net_is_uniform():
    heatmaps, labels = _random_data()
    net = _net(labels, use_prior_residual=False)
    np.testing.assert_array_equal(predict_map(net, START + timedelta(days=5), heatmaps), 0.5)


def test_residual_mode_needs_prior():
    with pytest.raises(ValueError):
        ForecastNet(ModelConfig(**TINY), None)


def test_parameter_names_are_stable():
    _, labels = _random_data()
    names = [p.name for p in _net(labels).parameters()]
    assert names[:2] == ["embed0.weight", "embed0.bias"]
    assert "lstm.w_o" in names and names[-2:] == ["out.weight", "out.bias"]
    cnn_names = [p.name for p in _net(labels, variant="cnn").parameters()]
    assert cnn_names == ["head0.weight", "head0.bias", "out.weight", "out.bias"]


def test_window_shape_is_checked():
    heatmaps, labels = _random_data()
    net = _net(labels)
    with pytest.raises(ShapeMismatchError):
        net.predict(np.zeros((1, 3, 6, 6)))
    with pytest.raises(ShapeMismatchError):
        net.predict(np.zeros((1, 4, 5, 6)))


def test_insufficient_history():
    heatmaps, labels = _random_data()
    net = _net(labels)
    with pytest.raises(InsufficientHistoryError):
        predict_map(net, START + timedelta(days=2), heatmaps)
    with pytest.raises(InsufficientHistoryError):
        build_windows(heatmaps, [START + timedelta(days=40)], 4)
    assert build_windows(heatmaps, [START + timedelta(days=3)], 4).shape == (1, 4, 6, 6)


# =============================================================================
# GRADIENTS
# =============================================================================

def _randomize_output(net: ForecastNet, seed: int) -> None:
    rng = np.random.default_rng(seed)
    for param in net.head[-1].parameters():
        param.value[...] = rng.normal(scale=0.3, size=param.value.shape)


@pytest.mark.parametrize("variant, window", [("cnn_lstm", 3), ("cnn", 3)])
def test_full_model_gradient_check(variant, window):
    rng = np.random.default_rng(21)
    windows = rng.uniform(0.0, 1.0, size=(2, window, 8, 8))
    y = (rng.random((2, 8, 8)) < 0.2).astype(np.uint8)
    mask = np.ones((2, 8, 8))
    prior = PriorMap(p=rng.uniform(0.05, 0.5, (8, 8)), k=np.zeros((8, 8), int), n=np.zeros((8, 8), int), alpha=1.0)
    config = ModelConfig(variant=variant, embed_channels=3, hidden_channels=4, window_days=window,
                         head_depth=2, activation="tanh", seed=3)
    net = ForecastNet(config, prior_logits(prior))
    _randomize_output(net, 4)
    params = net.parameters()

    def closure():
        for param in params:
            param.zero_grad()
        net.clear()
        loss, grad = weighted_softmax_ce(net.logits(windows), y, mask, (1.0, 10.0))
        net.backward(grad)
        return loss, [param.grad.copy() for param in params]

    assert finite_diff_check(closure, params, h=1e-5, n_coords=250, seed=5) < 1e-4


def test_gradient_reaches_output_layer():
    heatmaps, labels = _random_data()
    net = _net(labels)
    days = _days(heatmaps, 3, 11)
    targets = labels.subset(days)
    assert targets.y.any()
    loss, grad = weighted_softmax_ce(net.logits(build_windows(heatmaps, days, 4)),
                                     targets.y, targets.valid_mask, (1.0, 1000.0))
    net.backward(grad)
    out = net.head[-1]
    assert np.linalg.norm(out.weight.grad) > 0


# =============================================================================
# TRAINING
# =============================================================================

def _split(heatmaps):
    return _days(heatmaps, 3, 28), _days(heatmaps, 30, 37)


def test_zero_learning_rate_keeps_parameters():
    heatmaps, labels = _random_data()
    net = _net(labels)
    before = [p.value.copy() for p in net.parameters()]
    train_days, val_days = _split(heatmaps)
    train(net, TrainConfig(learning_rate=0.0, epochs=1, batch_size=5), train_days, val_days, heatmaps, labels)
    for old, param in zip(before, net.parameters()):
        assert old.tobytes() == param.value.tobytes()


def test_training_is_deterministic(tmp_path):
    heatmaps, labels = _random_data()
    train_days, val_days = _split(heatmaps)
    config = TrainConfig(learning_rate=0.01, epochs=3, batch_size=4, minor_class_weight=10.0, seed=7)
    first = train(_net(labels, seed=1), config, train_days, val_days, heatmaps, labels)
    second = train(_net(labels, seed=1), config, train_days, val_days, heatmaps, labels)
    first_log, second_log = io.StringIO(), io.StringIO()
    write_training_log(first_log, first.log)
    write_training_log(second_log, second.log)
    assert first_log.getvalue() == second_log.getvalue()
    assert save_checkpoint(tmp_path / "a.qgck", first.checkpoint) == save_checkpoint(
        tmp_path / "b.qgck", second.checkpoint
    )


def test_overlapping_split_is_rejected():
    heatmaps, labels = _random_data()
    days = _days(heatmaps, 3, 20)
    with pytest.raises(SplitError):
        train(_net(labels), TrainConfig(epochs=1), days, days[-2:], heatmaps, labels)


def test_non_finite_input_diverges():
    heatmaps, labels = _random_data()
    maps = heatmaps.maps.copy()
    maps[:] = np.inf
    bad = HeatMapSeq(start_day=heatmaps.start_day, maps=maps)
    train_days, val_days = _split(heatmaps)
    with pytest.raises(DivergenceError):
        train(_net(labels, use_prior_residual=False), TrainConfig(epochs=1), train_days, val_days, bad, labels)


def test_one_cell_convergence():
    maps = np.ones((3, 1, 1))
    heatmaps = HeatMapSeq(start_day=START, maps=maps)
    day = START + timedelta(days=2)
    labels = LabelTensor((day,), np.ones((1, 1, 1), np.uint8), np.ones((1, 1, 1), bool), LabelSpec())
    config = ModelConfig(variant="cnn", use_prior_residual=False, window_days=3, head_depth=1)
    net = ForecastNet(config)
    result = train(net, TrainConfig(learning_rate=0.05, epochs=200, batch_size=1, patience=None),
                   [day], [], heatmaps, labels)
    losses = [entry.train_loss for entry in result.log]
    assert len(losses) == 200
    assert all(b <= a for a, b in zip(losses[10:], losses[11:]))
    assert predict_map(result.net, day, heatmaps)[0, 0] > 0.99


def test_best_epoch_is_restored():
    heatmaps, labels = _random_data()
    train_days, val_days = _split(heatmaps)
    result = train(_net(labels), TrainConfig(learning_rate=0.02, epochs=4, batch_size=5, patience=None),
                   train_days, val_days, heatmaps, labels)
    assert result.checkpoint.extra["epoch"] == result.best_epoch
    restored = ForecastNet.from_checkpoint(result.checkpoint)
    day = val_days[0]
    assert predict_map(restored, day, heatmaps).tobytes() == predict_map(result.net, day, heatmaps).tobytes()


def test_training_log_csv():
    heatmaps, labels = _random_data()
    train_days, val_days = _split(heatmaps)
    result = train(_net(labels), TrainConfig(epochs=2, batch_size=8), train_days, val_days, heatmaps, labels)
    sink = io.StringIO()
    assert write_training_log(sink, result.log) == 2
    assert sink.getvalue().splitlines()[0] == "epoch,train_loss,val_roc_auc,val_pr_auc"


# =============================================================================
# CHECKPOINTS
# =============================================================================

@pytest.mark.parametrize("variant", ["cnn", "cnn_lstm"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, variant):
    heatmaps, labels = _random_data()
    train_days, val_days = _split(heatmaps)
    result = train(_net(labels, variant=variant), TrainConfig(learning_rate=0.01, epochs=1, batch_size=6),
                   train_days, val_days, heatmaps, labels)
    path = tmp_path / "model.qgck"
    save_checkpoint(path, result.checkpoint)
    loaded = load_checkpoint(path, expected_config=result.net.config)
    assert loaded.header() == result.checkpoint.header()
    for day in val_days:
        assert predict_map(loaded, day, heatmaps).tobytes() == predict_map(result.net, day, heatmaps).tobytes()


def test_checkpoint_rejects_other_architecture(tmp_path):
    _, labels = _random_data()
    net = _net(labels)
    path = tmp_path / "model.qgck"
    save_checkpoint(path, net.to_checkpoint(0))
    with pytest.raises(ValueError):
        load_checkpoint(path, expected_config=ModelConfig(**{**TINY, "hidden_channels": 5}))


# =============================================================================
# END-TO-END LEARNABILITY
# =============================================================================

def _planted_setup(pair_count: int, days: int = 600, lag_days: int = 45):
    grid = GridSpec(origin_lat=30.0, origin_lon=130.0, cell_km=10.0, n_rows=8, n_cols=8, ref_lat=35.0)
    spec = LabelSpec(t_min_days=10, t_max_days=50, mag_threshold=5.0)
    config = SynthConfig(grid=grid, days=days, background_rate=0.002, precursor_mag=4.0,
                         mainshock_mag=5.5, lag_days=lag_days, pair_count=pair_count, labels=spec, seed=11)
    planted = synthesize(config)
    heatmaps = rasterize_daily(planted.catalog, grid, config.start_day, days)
    labels = labels_from_heatmaps(heatmaps, spec, heatmaps.all_days())
    split = split_days(config.start_day, days, (0.6, 0.1, 0.3), spec.t_max_days)
    return planted, heatmaps, labels, split


@pytest.mark.slow
def test_planted_precursors_are_learned():
    planted, heatmaps, labels, split = _planted_setup(pair_count=80)
    model_config = ModelConfig(variant="cnn", window_days=40, hidden_channels=8, head_depth=2, seed=2)
    prior = prior_logits(fit_prior(labels.subset(split.train)))
    result = train(ForecastNet(model_config, prior),
                   TrainConfig(learning_rate=0.01, epochs=15, batch_size=16, minor_class_weight=10.0,
                               patience=None, seed=2),
                   split.train, split.val, heatmaps, labels)

    test_days = [day for day in split.test if labels.valid_mask[labels.index_of(day)].any()]
    probabilities = predict_days(result.net, heatmaps, test_days)
    assert roc_auc(pool_samples(probabilities, labels.subset(test_days))) > 0.8

    checked = above = 0
    for pair in planted.pairs:
        day = pair.precursor_day + timedelta(days=10)
        if day in test_days:
            forecast = probabilities[test_days.index(day)]
            checked += 1
            above += forecast[pair.row, pair.col] > np.median(forecast)
    assert checked > 0
    assert above >= 0.9 * checked


@pytest.mark.slow
def test_cnn_lstm_learns_planted_precursors():
    # lag t_max: every positive day has its precursor inside a 41-day window
    _, heatmaps, labels, split = _planted_setup(pair_count=80, lag_days=50)
    model_config = ModelConfig(variant="cnn_lstm", window_days=41, embed_channels=8, hidden_channels=12,
                               head_depth=2, forget_bias=5.0, seed=2)
    prior_map = fit_prior(labels.subset(split.train))
    result = train(ForecastNet(model_config, prior_logits(prior_map)),
                   TrainConfig(learning_rate=0.01, epochs=30, batch_size=16, minor_class_weight=10.0,
                               patience=None, seed=2),
                   split.train, split.val, heatmaps, labels)

    test_days = usable_days(heatmaps, labels, split.test, model_config.window_days)
    truth = labels.subset(test_days)
    network = roc_auc(pool_samples(predict_days(result.net, heatmaps, test_days), truth))
    baseline = roc_auc(pool_samples(prior_probability_maps(prior_map, test_days), truth))
    assert baseline <= 0.65
    assert network >= 0.90


@pytest.mark.slow
def test_minor_class_weight_raises_recall():
    _, heatmaps, labels, split = _planted_setup(pair_count=40)
    model_config = ModelConfig(variant="cnn", window_days=40, hidden_channels=8, head_depth=2, seed=2)
    prior = prior_logits(fit_prior(labels.subset(split.train)))
    rows = sweep_class_weights(
        model_config,
        TrainConfig(learning_rate=0.01, epochs=10, batch_size=16, patience=None, seed=2),
        [1.0, 1000.0], split.train, split.val, split.test, heatmaps, labels, prior,
    )
    recalls = [row.recall_at_half for row in rows]
    assert recalls == sorted(recalls)
    assert recalls[-1] > recalls[0]

    # PR AUC only ranks; the heavy weight must still beat chance
    truth = labels.subset(usable_days(heatmaps, labels, split.test, model_config.window_days))
    base_rate = truth.y[truth.valid_mask].mean()
    assert all(0.0 <= row.pr_auc <= 1.0 for row in rows)
    assert rows[-1].pr_auc > 2 * base_rate
