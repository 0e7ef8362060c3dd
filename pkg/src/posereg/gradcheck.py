"""Finite-difference checks for every differentiable op, block and loss.

Each check draws a random float64 instance, builds a scalar from the op
under test with random upstream weights, and compares autodiff against
central differences via :func:`finite_difference_check`.  Inputs that sit
within 1e-3 of a non-smooth point (L1 kink, max/max-pool ties, ReLU at
zero for isolated ReLUs) are redrawn.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import BlockA, BlockB, BlockConfig, ResSepConv, Stem, sep_conv2d
from .losses import bce_loss, elastic_net_loss, training_loss
from .model import ModelConfig, PoseModel, aggregate_tensor
from .softargmax import joint_probability, soft_argmax, soft_argmax_conv, spatial_softmax, spatial_softmax_composed
from .tensor import Tensor, finite_difference_check

H = 1e-6
MARGIN = 1e-3
MAX_ELEMENTS = 24


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    instances: int

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _sample_idx(rng, size, k=MAX_ELEMENTS):
    if size <= k:
        return None
    return rng.choice(size, k, replace=False).tolist()


def _fd(f, x, rng):
    return finite_difference_check(f, x, H, _sample_idx(rng, x.size))


def _weighted(out, w):
    return (out * w).sum()


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale)


def _separated(rng, shape, axes_size, margin=MARGIN):
    """Normal draws whose top two values (per reduced group) differ by > margin."""
    while True:
        x = rng.normal(size=shape)
        flat = np.sort(x.reshape(-1, axes_size), axis=-1)
        if np.all(flat[:, -1] - flat[:, -2] > margin):
            return x


def _away_from_zero(rng, shape, margin=MARGIN):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


# -- checks ------------------------------------------------------------------
# each returns the max relative error over all tensors it differentiates

def check_elementwise(rng):
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 3, 4)
    pos = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5)
    nz = Tensor(_away_from_zero(rng, (3, 4)))
    w = rng.normal(size=(3, 4))
    row = Tensor(rng.normal(size=(1, 4)))
    clipped = Tensor(_away_from_zero(rng, (3, 4)) + np.where(rng.random((3, 4)) < 0.5, 0.5, -0.5))
    errs = [
        _fd(lambda t: _weighted(T.clip(t, -0.5, 0.5), w), clipped, rng),
        _fd(lambda t: _weighted(T.add(t, b), w), a, rng),
        _fd(lambda t: _weighted(T.sub(b, t), w), a, rng),
        _fd(lambda t: _weighted(T.mul(t, b), w), a, rng),
        _fd(lambda t: _weighted(T.div(b, t), w), pos, rng),
        _fd(lambda t: _weighted(T.div(t, pos), w), a, rng),
        _fd(lambda t: _weighted(T.scale(t, 2.5), w), a, rng),
        _fd(lambda t: _weighted(T.exp(t), w), a, rng),
        _fd(lambda t: _weighted(T.log(t), w), pos, rng),
        _fd(lambda t: _weighted(T.sigmoid(t), w), a, rng),
        _fd(lambda t: _weighted(T.relu(t), w), nz, rng),
        _fd(lambda t: _weighted(T.absolute(t), w), nz, rng),
        _fd(lambda t: _weighted(T.square(t), w), a, rng),
        _fd(lambda t: _weighted(T.mul(t, row), w), a, rng),
        _fd(lambda t: _weighted(T.mul(a, t), w), row, rng),
    ]
    return max(errs)


def check_reductions(rng):
    a = _leaf(rng, 3, 4, 5)
    sep = Tensor(_separated(rng, (3, 4, 5), 5))
    sep_all = Tensor(_separated(rng, (3, 4, 5), 60))
    w3 = rng.normal(size=(3, 4))
    return max(
        _fd(lambda t: _weighted(T.reduce_sum(t, axis=2), w3), a, rng),
        _fd(lambda t: _weighted(T.reduce_mean(t, axis=2), w3), a, rng),
        _fd(lambda t: _weighted(T.reduce_max(t, axis=2), w3), sep, rng),
        _fd(lambda t: T.reduce_max(t), sep_all, rng),
        _fd(lambda t: T.reduce_sum(T.square(t)), a, rng),
    )


def check_shape_ops(rng):
    a = _leaf(rng, 2, 3, 4)
    b = _leaf(rng, 2, 3, 4)
    m = _leaf(rng, 4, 5)
    w = [rng.normal(size=s) for s in [(6, 4), (4, 2, 3), (2, 2, 2), (2, 6, 4), (2, 2, 3, 4), (2, 3, 5), (3, 4)]]
    return max(
        _fd(lambda t: _weighted(T.reshape(t, (6, 4)), w[0]), a, rng),
        _fd(lambda t: _weighted(T.transpose(t, (2, 0, 1)), w[1]), a, rng),
        _fd(lambda t: _weighted(t[:, 1:, ::2], w[2]), a, rng),
        _fd(lambda t: _weighted(t[[0, 1, 1], [2, 0, 2]], w[6]), a, rng),
        _fd(lambda t: _weighted(T.concat([t, b], axis=1), w[3]), a, rng),
        _fd(lambda t: _weighted(T.stack([b, t], axis=0), w[4]), a, rng),
        _fd(lambda t: _weighted(T.matmul(t, m), w[5]), a, rng),
        _fd(lambda t: _weighted(T.matmul(a, t), w[5]), m, rng),
    )


def check_conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = ["same", "valid"][int(rng.integers(0, 2))]
    k = int(rng.choice([1, 3]))
    size = int(rng.integers(k + 1, 8))
    x = _leaf(rng, 2, 3, size, size)
    kern = _leaf(rng, 4, 3, k, k)
    bias = _leaf(rng, 4)
    out_shape = T.conv2d(x, kern, bias, stride, padding).shape
    w = rng.normal(size=out_shape)

    def f(_):
        return _weighted(T.conv2d(x, kern, bias, stride, padding), w)

    return max(_fd(f, x, rng), _fd(f, kern, rng), _fd(f, bias, rng))


def check_depthwise_pool_upsample(rng):
    x = _leaf(rng, 2, 3, 6, 6)
    dk = _leaf(rng, 3, 3, 3)
    stride = int(rng.integers(1, 3))
    w = rng.normal(size=T.depthwise_conv2d(x, dk, stride).shape)
    pooled = rng.normal(size=(2, 3, 3, 3))
    up = rng.normal(size=(2, 3, 12, 12))

    def f(_):
        return _weighted(T.depthwise_conv2d(x, dk, stride), w)

    # max-pool: make every 2x2 window have a clear winner
    raw = rng.normal(size=(2, 3, 6, 6))
    blocks = raw.reshape(2, 3, 3, 2, 3, 2)
    while True:
        s = np.sort(blocks.transpose(0, 1, 2, 4, 3, 5).reshape(2, 3, 3, 3, 4), axis=-1)
        if np.all(s[..., -1] - s[..., -2] > MARGIN):
            break
        raw = rng.normal(size=(2, 3, 6, 6))
        blocks = raw.reshape(2, 3, 3, 2, 3, 2)
    sep = Tensor(raw)
    return max(
        _fd(f, x, rng), _fd(f, dk, rng),
        _fd(lambda t: _weighted(T.max_pool2d(t, 2), pooled), sep, rng),
        _fd(lambda t: _weighted(T.upsample_nearest(t, 2), up), x, rng),
    )


def check_batch_norm(rng):
    x = _leaf(rng, 3, 2, 3, 3)
    g = Tensor(rng.uniform(0.5, 1.5, size=2))
    b = _leaf(rng, 2)
    w = rng.normal(size=x.shape)
    mean, var = rng.normal(size=2), rng.uniform(0.5, 2, size=2)

    def train_f(_):
        return _weighted(T.batch_norm(x, g, b)[0], w)

    def eval_f(_):
        return _weighted(T.batch_norm(x, g, b, mean, var)[0], w)

    return max(_fd(train_f, x, rng), _fd(train_f, g, rng), _fd(train_f, b, rng),
               _fd(eval_f, x, rng), _fd(eval_f, g, rng))


def check_spatial_softmax(rng):
    h = _leaf(rng, 6, 6, scale=2.0)
    w = rng.normal(size=(6, 6))
    return max(_fd(lambda t: _weighted(spatial_softmax(t), w), h, rng),
               _fd(lambda t: _weighted(spatial_softmax_composed(t), w), h, rng))


def check_soft_argmax(rng):
    size = int(rng.integers(4, 9))
    h = _leaf(rng, size, size, scale=2.0)
    up = rng.normal(size=2)
    hb = _leaf(rng, 2, 3, size, size, scale=2.0)
    upb = rng.normal(size=(2, 3, 2))
    return max(_fd(lambda t: _weighted(soft_argmax(t), up), h, rng),
               _fd(lambda t: _weighted(soft_argmax_conv(t), upb), hb, rng))


def check_joint_probability(rng):
    h = Tensor(_separated(rng, (6, 6), 36) * 2.0)
    return _fd(lambda t: joint_probability(t), h, rng)


def check_sep_conv2d(rng):
    x = _leaf(rng, 2, 3, 6, 6)
    dk = _leaf(rng, 3, 3, 3)
    pk = _leaf(rng, 4, 3, 1, 1)
    w = rng.normal(size=(2, 4, 6, 6))

    def f(_):
        return _weighted(sep_conv2d(x, dk, pk), w)

    return max(_fd(f, x, rng), _fd(f, dk, rng), _fd(f, pk, rng))


def _module_check(rng, module, x, out_fn):
    w_holder = {}

    def f(_):
        out = out_fn(module(x))
        if "w" not in w_holder:
            w_holder["w"] = rng.normal(size=out.shape)
        return _weighted(out, w_holder["w"])

    errs = [_fd(f, x, rng)]
    params = module.parameters()
    for i in rng.choice(len(params), min(4, len(params)), replace=False):
        errs.append(_fd(f, params[i], rng))
    return max(errs)


def check_res_sepconv(rng):
    c_out = int(rng.choice([3, 4]))
    mod = ResSepConv(rng, 3, c_out)
    return _module_check(rng, mod, _leaf(rng, 2, 3, 5, 5), lambda y: y)


def check_stem(rng):
    mod = Stem(rng, (3, 4, 5))
    return _module_check(rng, mod, _leaf(rng, 2, 3, 16, 16), lambda y: y)


def check_block_a(rng):
    cfg = BlockConfig(3, 3, num_resolutions=2, base_resolution=4, growth=int(rng.integers(0, 2)))
    mod = BlockA(rng, cfg)
    return _module_check(rng, mod, _leaf(rng, 2, 3, 4, 4), lambda y: y)


def check_block_b(rng):
    mod = BlockB(rng, 3, num_joints=2, num_context=int(rng.integers(0, 3)))
    return _module_check(rng, mod, _leaf(rng, 2, 3, 4, 4), lambda out: T.concat([out[0], out[1]], axis=1))


def check_aggregate(rng):
    nj, nc = 3, 2
    coords = Tensor(rng.uniform(0.1, 1.0, size=(2, nj * (1 + nc), 2)))
    probs = Tensor(rng.uniform(0.05, 0.95, size=(2, nj * (1 + nc))))
    w = rng.normal(size=(2, nj, 2))

    def f(_):
        return _weighted(aggregate_tensor(coords, probs, nj, nc, 0.8), w)

    return max(_fd(f, coords, rng), _fd(f, probs, rng))


def check_elastic_net(rng):
    truth = rng.uniform(0, 1, size=(2, 4, 2))
    d = _away_from_zero(rng, (2, 4, 2)) * 0.1
    pred = Tensor(truth + d)
    mask = rng.random((2, 4)) > 0.3
    return _fd(lambda t: elastic_net_loss(t, truth, mask), pred, rng)


def check_bce(rng):
    q = Tensor(rng.uniform(0.05, 0.95, size=(2, 5)))
    p = (rng.random((2, 5)) > 0.5).astype(float)
    return _fd(lambda t: bce_loss(t, p), q, rng)


def toy_model_config(seed=0):
    return ModelConfig(K=2, num_joints=3, num_context=2, alpha=0.8, input_size=32, base_resolution=4,
                       num_resolutions=2, width_multiplier=0.05, seed=seed, dtype="float64")


def check_model_end_to_end(rng, weights=5):
    """Loss of a K=2 toy model vs. finite differences on randomly chosen weights."""
    model = PoseModel(toy_model_config(int(rng.integers(1 << 30))))
    images = rng.random((2, 3, 32, 32))
    truth = rng.uniform(0.2, 0.9, size=(2, 3, 2))
    vis = np.ones((2, 3), dtype=bool)

    def f(_):
        loss, _ = training_loss(model.forward(images), truth, vis)
        return loss

    params = model.parameters()
    errs = []
    for i in rng.choice(len(params), weights, replace=False):
        p = params[i]
        idx = [int(rng.integers(p.size))]
        errs.append(finite_difference_check(f, p, H, idx))
    return max(errs)


CHECKS = [
    ("elementwise", check_elementwise, 1e-5),
    ("reductions", check_reductions, 1e-5),
    ("shape_ops", check_shape_ops, 1e-5),
    ("conv2d", check_conv2d, 1e-5),
    ("depthwise/max_pool/upsample", check_depthwise_pool_upsample, 1e-5),
    ("batch_norm", check_batch_norm, 1e-5),
    ("spatial_softmax", check_spatial_softmax, 1e-5),
    ("soft_argmax", check_soft_argmax, 1e-5),
    ("joint_probability", check_joint_probability, 1e-5),
    ("sep_conv2d", check_sep_conv2d, 1e-5),
    ("res_sepconv", check_res_sepconv, 1e-5),
    ("stem", check_stem, 1e-5),
    ("block_a", check_block_a, 1e-5),
    ("block_b", check_block_b, 1e-5),
    ("aggregate", check_aggregate, 1e-5),
    ("elastic_net_loss", check_elastic_net, 1e-5),
    ("bce_loss", check_bce, 1e-5),
    ("model_end_to_end", check_model_end_to_end, 1e-4),
]


def run_suite(instances=20, seed=0, names=None):
    results = []
    for name, fn, tol in CHECKS:
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, len(results)])
        worst = max(fn(rng) for _ in range(instances))
        results.append(CheckResult(name, worst, tol, instances))
    return results
