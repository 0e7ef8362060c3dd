import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from posereg.losses import training_loss
from posereg.model import (ModelConfig, PoseModel, aggregate, aggregate_tensor, build_model, predict, preset)
from posereg.tensor import Tensor


def tiny(**kw):
    base = dict(K=2, num_joints=3, num_context=2, input_size=32, base_resolution=4, num_resolutions=2,
                width_multiplier=0.05, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def test_full_configuration_builds():
    cfg = preset("full")
    assert cfg.num_maps == 48
    model = PoseModel(cfg)
    assert model.num_parameters() == PoseModel.count(cfg)
    assert model.blocks_b[0].to_heat.weight.shape[0] == 48


def test_minimal_model():
    cfg = ModelConfig(K=1, num_joints=1, num_context=0, input_size=64, base_resolution=8,
                      num_resolutions=2, width_multiplier=0.1)
    preds = build_model(cfg).forward(np.zeros((1, 3, 64, 64)))
    assert len(preds) == 1 and preds.final.joints.shape == (1, 1, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_size=100).validate()
    with pytest.raises(ValueError):
        ModelConfig(alpha=1.5).validate()
    with pytest.raises(ValueError):
        preset("huge")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"K": 2, "depth": 3})
    assert ModelConfig.from_dict(preset("desk").to_dict()) == preset("desk")


def test_same_seed_same_weights():
    a, b = PoseModel(tiny(seed=3)), PoseModel(tiny(seed=3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = PoseModel(tiny(seed=4))
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_desk_parameter_count():
    cfg = preset("desk")
    assert PoseModel(cfg).num_parameters() == PoseModel.count(cfg)


def test_forward_range_and_shapes():
    model = PoseModel(tiny())
    preds = model.forward(np.random.default_rng(0).random((2, 3, 32, 32)))
    assert len(preds) == 2
    for blk in preds.blocks:
        j = blk.joints.data
        assert j.shape == (2, 3, 2) and np.all(j > 0) and np.all(j <= 1)
        assert blk.heat.shape == (2, 9, 4, 4)
    items = preds.item(1)
    assert len(items) == 2 and items[0][1].context.shape == (6, 4, 4)


def test_forward_rejects_wrong_size():
    with pytest.raises(ValueError):
        PoseModel(tiny()).forward(np.zeros((1, 3, 16, 16)))


def test_inference_has_no_batch_leakage():
    model = PoseModel(tiny())
    model.eval()
    img = np.random.default_rng(1).random((3, 32, 32))
    other = np.random.default_rng(2).random((3, 32, 32))
    a = model.forward(np.stack([img, img])).final.joints.data
    b = model.forward(np.stack([img, other])).final.joints.data
    assert np.array_equal(a[0], a[1])
    assert np.array_equal(a[0], b[0])


def test_predict_is_deterministic_and_restores_mode():
    model = PoseModel(tiny())
    img = np.random.default_rng(3).random((3, 32, 32))
    p1, p2 = predict(model, img), predict(model, img)
    assert np.array_equal(p1.joints, p2.joints) and model.training
    assert np.all(p1.joints > 0) and np.all(p1.joints <= 1)


def test_gradient_reaches_stem():
    model = PoseModel(tiny())
    rng = np.random.default_rng(4)
    loss, _ = training_loss(model.forward(rng.random((2, 3, 32, 32))), rng.random((2, 3, 2)),
                            np.ones((2, 3), bool))
    loss.backward()
    assert np.linalg.norm(model.stem.conv1.conv.weight.grad) > 0


def test_intermediate_blocks_get_gradient_through_reinjection():
    model = PoseModel(tiny(K=3))
    rng = np.random.default_rng(5)
    loss, _ = training_loss(model.forward(rng.random((2, 3, 32, 32))), rng.random((2, 3, 2)),
                            np.ones((2, 3), bool), block_weights=[0, 0, 1])
    loss.backward()
    for k in range(2):
        assert np.linalg.norm(model.blocks_b[k].to_heat.weight.grad) > 0
        assert np.linalg.norm(model.blocks_a[k].nodes[0].sep.depth.grad) > 0


def test_aggregate_examples():
    assert aggregate([0.5, 0.5], [0.3, 0.7], [[0.1, 0.9], [0.9, 0.1]], 1.0).tolist() == [0.5, 0.5]
    sym = aggregate([0.5, 0.5], [0.5, 0.5], [[0.6, 0.5], [0.4, 0.5]], 0.8)
    assert np.allclose(sym, [0.5, 0.5], rtol=0, atol=1e-15)
    got = aggregate([0.5, 0.5], [0.9, 0.1], [[0.7, 0.5], [0.1, 0.5]], 0.8)
    assert abs(got[0] - 0.528) < 1e-12 and abs(got[1] - 0.5) < 1e-12


def test_aggregate_fallbacks():
    assert aggregate([0.2, 0.3], [], [], 0.5).tolist() == [0.2, 0.3]
    assert aggregate([0.2, 0.3], [0.0, 1e-9], [[1, 1], [1, 1]], 0.5).tolist() == [0.2, 0.3]


def test_aggregate_tensor_matches_scalar_version():
    rng = np.random.default_rng(6)
    B, nj, nc = 3, 4, 2
    coords = rng.random((B, nj * (1 + nc), 2))
    probs = rng.random((B, nj * (1 + nc)))
    probs[0, nj:nj + 1] = 0
    probs[0, 2 * nj:2 * nj + 1] = 0          # joint 0 of item 0: no context mass
    got = aggregate_tensor(Tensor(coords), Tensor(probs), nj, nc, 0.7).data
    for b, n in itertools.product(range(B), range(nj)):
        ctx = [nj + i * nj + n for i in range(nc)]
        want = oracles.aggregate(coords[b, n], probs[b, ctx], coords[b, ctx], 0.7)
        assert np.abs(got[b, n] - want).max() < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0.01, 1), min_size=1, max_size=4), st.integers(0, 2 ** 31))
def test_aggregate_stays_in_bounding_box(alpha, ps, seed):
    rng = np.random.default_rng(seed)
    y_d = rng.random(2)
    y_c = rng.random((len(ps), 2))
    out = aggregate(y_d, ps, y_c, alpha)
    pts = np.vstack([y_d, y_c])
    assert np.all(out >= pts.min(axis=0) - 1e-12) and np.all(out <= pts.max(axis=0) + 1e-12)
