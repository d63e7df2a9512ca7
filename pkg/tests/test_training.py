import json

import numpy as np
import pytest

from imachsr import datagen, netspec, optim, supervision as S, tensor as T, training
from imachsr.cli import equal_tap_family
from imachsr.netspec import TapCriterion


@pytest.fixture(scope="module")
def tiny():
    return datagen.generate(datagen.GenSpec(count=12, height=8, width=8, num_classes=3, seed=4))


def toy_model(seed=0, taps=()):
    crit = TapCriterion("explicit_indices", tuple(taps)) if taps else netspec.NO_TAPS
    return netspec.build_model(netspec.preset_spec("toy6", 1, 8, 8, 3), seed, crit)


def hand_ce_loop(model, data, epochs, batch_size, seed, lr):
    """Output-layer cross-entropy training written without the tap machinery."""
    params = model.theta()
    opt = optim.Adam(params, lr=lr)
    losses = []
    x_all, y_all = data.images.astype(np.float64), data.labels.astype(np.int64)
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(data))
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            for p in params.values():
                p.zero_grad()
            loss = S.ce_loss(netspec.forward(model, T.Tensor(x_all[idx])), y_all[idx])
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
    return losses


def _run_losses(model, data, cfg):
    weights = cfg.weights(len(model.taps))
    opt = training.make_optimizer(model, cfg.optimizer, cfg.lr)
    x_all, y_all = data.images.astype(np.float64), data.labels.astype(np.int64)
    out = []
    for epoch in range(1, cfg.epochs + 1):
        for idx in training.batches(len(data), cfg.batch_size, np.random.default_rng([cfg.seed, epoch])):
            bd, _ = training.train_step(model, opt, T.Tensor(x_all[idx]), y_all[idx], weights)
            out.append(bd.total)
    return out


def test_no_taps_matches_hand_ce_loop(tiny):
    cfg = training.TrainingConfig(epochs=3, batch_size=4, seed=2, lr=0.01)
    a, b = toy_model(1), toy_model(1)
    assert _run_losses(a, tiny, cfg) == hand_ce_loop(b, tiny, 3, 4, 2, 0.01)
    for k, v in a.theta().items():
        assert np.array_equal(v.data, b.theta()[k].data)


def test_zero_weight_taps_match_ce_delta(tiny):
    x, y = T.Tensor(tiny.images[:4].astype(np.float64)), tiny.labels[:4].astype(np.int64)
    plain, tapped = toy_model(0), toy_model(0, (2, 4))
    for model, w in ((plain, S.LossWeights([], [])), (tapped, S.LossWeights([0.0, 0.0], [0.0, 0.0]))):
        before = {k: p.data.copy() for k, p in model.theta().items()}
        training.train_step(model, training.make_optimizer(model, "adam", 0.01), x, y, w)
        model.delta = {k: p.data - before[k] for k, p in model.theta().items()}
    for k in plain.delta:
        assert np.array_equal(plain.delta[k], tapped.delta[k])


def test_zeroing_one_tap_matches_model_without_it(tiny):
    x, y = T.Tensor(tiny.images[:4].astype(np.float64)), tiny.labels[:4].astype(np.int64)
    one, two = toy_model(0, (2,)), toy_model(0, (2, 4))
    two.taps[0].adapter["weight"].data[:] = one.taps[0].adapter["weight"].data
    two.taps[0].adapter["bias"].data[:] = one.taps[0].adapter["bias"].data
    o1, o2 = training.make_optimizer(one, "sgd", 0.05), training.make_optimizer(two, "sgd", 0.05)
    for _ in range(3):
        training.train_step(one, o1, x, y, S.LossWeights([0.4], [0.1]))
        training.train_step(two, o2, x, y, S.LossWeights([0.4, 0.0], [0.1, 0.0]))
    for k, p in one.theta().items():
        assert np.array_equal(p.data, two.theta()[k].data)


def test_breakdown_reconstructs_total(tiny):
    cfg = training.TrainingConfig(epochs=2, batch_size=4, criterion=TapCriterion("explicit_indices", (2, 4)))
    _, records = training.train(cfg, toy_model(0, (2, 4)), tiny)
    for r in records:
        assert abs(r.loss.reconstruct() - r.loss.total) < 1e-12
        assert r.steps == 3 and r.grad_norm_sq_mean > 0


def test_smoke_two_class_training_reduces_ce():
    data = datagen.generate(datagen.GenSpec(count=32, height=16, width=16, num_classes=2, seed=3))
    crit = TapCriterion("pattern", count=2, spacing_bases=1)
    model = netspec.build_model(netspec.preset_spec("desk12", 1, 16, 16, 2), 0, crit)
    cfg = training.TrainingConfig(epochs=50, batch_size=8, criterion=crit)  # 4 steps per epoch -> 200 steps
    _, records = training.train(cfg, model, data)
    assert sum(r.steps for r in records) == 200
    assert records[-1].loss.ce < records[0].loss.ce


def test_training_is_deterministic(tiny, tmp_path):
    logs = []
    for i in range(2):
        cfg = training.TrainingConfig(epochs=2, batch_size=5, seed=9, criterion=TapCriterion("explicit_indices", (3,)),
                                      log_path=str(tmp_path / f"{i}.jsonl"))
        model, _ = training.train(cfg, toy_model(9, (3,)), tiny)
        rows = [json.loads(line) for line in open(cfg.log_path)]
        for r in rows:
            r.pop("wall_time_s")
        logs.append((rows, model.state_dict()))
    assert logs[0][0] == logs[1][0]
    for k, v in logs[0][1].items():
        assert v.tobytes() == logs[1][1][k].tobytes()


def test_nan_aborts_with_records(tiny):
    model = toy_model(0)
    cfg = training.TrainingConfig(epochs=3, batch_size=4)
    training.train(cfg, model, tiny)
    model.theta()["layer1.weight"].data[0, 0, 0, 0] = np.nan
    with pytest.raises(training.NumericalAbort) as info:
        training.train(cfg, model, tiny)
    assert info.value.records == []


def test_class_count_mismatch(tiny):
    model = netspec.build_model(netspec.preset_spec("toy6", 1, 8, 8, 4), 0)
    with pytest.raises(ValueError, match="classes"):
        training.train(training.TrainingConfig(epochs=1), model, tiny)
    with pytest.raises(ValueError, match="classes"):
        training.evaluate(model, tiny)


def _head_only(weight_center, bias):
    spec = netspec.ModelSpec(1, 8, 8, 2, (netspec.LayerSpec("conv_head"),))
    model = netspec.build_model(spec, 0)
    w = model.theta()["layer1.weight"].data
    w[:] = 0.0
    w[:, 0, 1, 1] = weight_center
    model.theta()["layer1.bias"].data[:] = bias
    return model


@pytest.fixture
def binary_set():
    labels = np.zeros((4, 8, 8), dtype=np.uint8)
    labels[:, :, 4:] = 1
    return datagen.Dataset(labels[:, None].astype(np.float32), labels, 2)


def test_evaluate_perfect_predictor(binary_set):
    s = training.evaluate(_head_only([0.0, 10.0], [0.0, -5.0]), binary_set)
    assert s["mIoU"] == s["mPre"] == s["mRec"] == s["mF1"] == 1.0


def test_evaluate_constant_predictor(binary_set):
    model = _head_only([0.0, 0.0], [1.0, 0.0])
    s = training.evaluate(model, binary_set)
    assert s["per_class"][0]["iou"] == 0.5 and s["per_class"][1]["iou"] == 0.0
    assert s == training.evaluate(model, binary_set)


def test_taps_do_not_change_evaluation(tiny):
    assert training.evaluate(toy_model(5), tiny) == training.evaluate(toy_model(5, (1, 3, 5)), tiny)


def test_overhead_accounting_example():
    family = equal_tap_family(1, 16, 16, 4)
    m0, m1, m2 = family(0), family(1), family(2)
    assert training.tap_cache_bytes(m0, 4) == 0 and training.adapter_param_count(m0) == 0
    assert training.tap_cache_bytes(m1, 4) == 4 * 16 * 16 * 8 * 8 + 4 * 16 * 16 * 4 * 8 == 98304
    assert training.tap_cache_bytes(m2, 4) == 2 * 98304
    assert training.adapter_param_count(m2) == 2 * (4 * 8 + 4)


def test_linear_fit_r2():
    assert training.linear_fit_r2([0, 1, 2, 3], [5, 8, 11, 14]) == 1.0
    assert training.linear_fit_r2([0, 1, 2], [0, 1, 0]) == 0.0
    assert training.linear_fit_r2([0, 1, 2, 3], [0, 1, 4, 9]) == 45 / 49  # Sxy^2 / (Sxx Syy) = 225 / 245


def test_profile_overhead_rows():
    data = datagen.generate(datagen.GenSpec(count=4, height=16, width=16, num_classes=4, seed=0))
    cfg = training.TrainingConfig(batch_size=4)
    prof = training.profile_overhead(cfg, equal_tap_family(1, 16, 16, 4), [0, 1, 2, 3], data, n_batches=2, warmup=0)
    assert [r.M for r in prof.rows] == [0, 1, 2, 3]
    assert [r.tap_cache_bytes for r in prof.rows] == [0, 98304, 196608, 294912]
    assert prof.r2_tap_cache == 1.0 and prof.r2_adapter_params == 1.0
    assert all(r.time_samples == 2 for r in prof.rows)
