import filecmp
import math
import os

import numpy as np
import pytest

import oracles
from posereg.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from posereg.data import SyntheticSpec, synth_generate
from posereg.model import PoseModel, preset
from posereg.train import (RunLog, TrainConfig, Trainer, TrainingError, heatmap_argmax_hit_rate, lr_schedule,
                           rmsprop_step, split_dataset, train)
from posereg.tensor import NonFiniteError


@pytest.fixture(scope="module")
def small_data():
    return synth_generate(SyntheticSpec(seed=11), 24)


def small_cfg(**kw):
    return preset("desk", width_multiplier=0.1, **kw)


def test_rmsprop_zero_gradient():
    p = [np.array([1.0, -2.0])]
    rmsprop_step(p, [np.zeros(2)], [np.zeros(2)], 0.1)
    assert p[0].tolist() == [1.0, -2.0]


def test_rmsprop_hand_example():
    p, v = [np.array([0.0])], [np.array([0.0])]
    rmsprop_step(p, [np.array([1.0])], v, lr=0.1, rho=0.9, eps=0.0)
    assert abs(v[0][0] - 0.1) < 1e-16
    assert abs(p[0][0] - (-0.1 / math.sqrt(0.1))) < 1e-15
    assert abs(p[0][0] + 0.3162) < 1e-4


def test_rmsprop_matches_loop_oracle():
    rng = np.random.default_rng(0)
    p, g, v = rng.normal(size=20), rng.normal(size=20), rng.random(20)
    want_p, want_v = oracles.rmsprop(p, g, v, 1e-3, 0.9, 1e-8)
    pp, vv = [p.copy()], [v.copy()]
    rmsprop_step(pp, [g], vv, 1e-3)
    assert np.abs(pp[0] - want_p).max() < 1e-12 and np.abs(vv[0] - want_v).max() < 1e-12


def test_rmsprop_rejects_non_finite_without_touching_params():
    p = [np.ones(2), np.ones(2)]
    with pytest.raises(NonFiniteError):
        rmsprop_step(p, [np.ones(2), np.array([np.nan, 0])], [np.zeros(2), np.zeros(2)], 0.1)
    assert p[0].tolist() == [1, 1]


def test_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1e-3, cfg) == 1e-3
    assert lr_schedule([0.5] * 6, 1e-3, cfg) == pytest.approx(4e-4, rel=1e-15)
    assert lr_schedule([0.5] * 5, 1e-3, cfg) == 1e-3
    assert lr_schedule([0.5, 0.50005, 0.5, 0.5, 0.5, 0.5], 1e-3, cfg) == pytest.approx(4e-4)
    with pytest.raises(ValueError):
        lr_schedule([], 1e-3, cfg)


def test_schedule_floor_and_monotonicity():
    cfg = TrainConfig()
    lr, since, hist = 1e-3, 0, [0.5]
    seen = [lr]
    for _ in range(200):
        hist.append(0.5)
        new = lr_schedule(hist, lr, cfg, since)
        if new != lr:
            since = len(hist)
        lr = new
        seen.append(lr)
    assert min(seen) == 1e-7 and all(a >= b for a, b in zip(seen, seen[1:]))


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(plateau_factor=1.0), dict(initial_lr=0.0), dict(supervise="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"batchsize": 3})


def test_split_is_deterministic(small_data):
    a, b = split_dataset(small_data, 0.25, 3), split_dataset(small_data, 0.25, 3)
    assert len(a[1]) == 6 and len(a[0]) == 18
    assert all(x[0] is y[0] for x, y in zip(a[1], b[1]))


def test_zero_epochs_checkpoint_equals_init(tmp_path, small_data):
    cfg = small_cfg()
    trainer, log = train(cfg, TrainConfig(epochs=0, output_dir=str(tmp_path)), small_data)
    assert log.entries == []
    _, arrays, _ = read_checkpoint(tmp_path / "last")
    fresh = PoseModel(cfg)
    for name, arr in fresh.state_arrays().items():
        assert np.array_equal(arrays[name], arr)


def test_two_runs_are_bit_identical(tmp_path, small_data):
    cfg, tc = small_cfg(), dict(epochs=2, batch_size=8, augment=True)
    t1, l1 = train(cfg, TrainConfig(output_dir=str(tmp_path / "a"), **tc), small_data)
    t2, l2 = train(cfg, TrainConfig(output_dir=str(tmp_path / "b"), **tc), small_data)
    assert l1.deterministic() == l2.deterministic()
    for f in ("manifest.txt", "arrays.bin"):
        assert filecmp.cmp(tmp_path / "a" / "last" / f, tmp_path / "b" / "last" / f, shallow=False)


def test_resume_matches_unbroken_run(tmp_path, small_data):
    cfg = small_cfg()
    full, _ = train(cfg, TrainConfig(epochs=3, batch_size=8, output_dir=str(tmp_path / "full")), small_data)
    train(cfg, TrainConfig(epochs=1, batch_size=8, output_dir=str(tmp_path / "split")), small_data)
    resumed, _ = train(cfg, TrainConfig(epochs=3, batch_size=8, output_dir=str(tmp_path / "split")), small_data,
                       resume_from=str(tmp_path / "split" / "last"))
    assert full.log.deterministic() == resumed.log.deterministic()
    for f in ("manifest.txt", "arrays.bin"):
        assert filecmp.cmp(tmp_path / "full" / "last" / f, tmp_path / "split" / "last" / f, shallow=False)


def test_init_from_loads_weights(tmp_path, small_data):
    cfg = small_cfg()
    src = PoseModel(small_cfg(seed=5))
    save_checkpoint(tmp_path / "src", src)
    trainer, _ = train(cfg, TrainConfig(epochs=0), small_data, init_from=str(tmp_path / "src"))
    assert np.array_equal(trainer.model.parameters()[0].data, src.parameters()[0].data)


def test_non_finite_loss_names_batch(small_data):
    model = PoseModel(small_cfg())
    model.stem.conv1.conv.weight.data[0, 0, 0, 0] = np.nan
    trainer = Trainer(model, TrainConfig(batch_size=8))
    with pytest.raises(TrainingError, match="batch 0"):
        trainer.train_epoch(small_data)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = PoseModel(small_cfg(seed=2))
    extra = {"opt.x": np.arange(5, dtype=np.float32)}
    save_checkpoint(tmp_path / "a", model, extra, {"epoch": 3, "history": [0.1, 0.2]})
    loaded, ex, state = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "b", loaded, ex, state)
    for f in ("manifest.txt", "arrays.bin"):
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
    assert state == {"epoch": 3, "history": [0.1, 0.2]}


def test_checkpoint_rejects_corruption(tmp_path):
    save_checkpoint(tmp_path / "a", PoseModel(small_cfg()))
    with open(tmp_path / "a" / "arrays.bin", "r+b") as fh:
        fh.truncate(100)
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "a")


def test_runlog_round_trip(tmp_path):
    log = RunLog()
    log.append(epoch=1, loss=0.5, val_pck=0.25, lr=1e-3, seconds=1.2)
    log.write(tmp_path / "log.jsonl")
    back = RunLog.read(tmp_path / "log.jsonl")
    assert back.entries == log.entries and "seconds" not in back.deterministic()[0]


def test_fit_writes_outputs_and_hit_rate(tmp_path, small_data):
    trainer, log = train(small_cfg(), TrainConfig(epochs=1, batch_size=8, output_dir=str(tmp_path)), small_data)
    assert {"last", "best", "runlog.jsonl"} <= set(os.listdir(tmp_path))
    assert len(RunLog.read(tmp_path / "runlog.jsonl").entries) == 1
    assert 0.0 <= heatmap_argmax_hit_rate(trainer.model, small_data[:4]) <= 1.0
