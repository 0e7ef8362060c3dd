"""Layer vocabulary: separable convolutions, Res-SepConv, stem and the two
prediction-block halves.

All modules hold their weights as leaf :class:`Tensor` objects and expose
them through ``named_parameters``; batch-norm running statistics are
buffers.  Widths are free parameters so the same code builds both the
full-size network and tiny desk-scale variants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, bias=True, dtype=np.float64):
        self.stride = stride
        self.weight = uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        self.bias = _zeros((c_out,), dtype) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding="same")

    @staticmethod
    def count(c_in, c_out, k, bias):
        return c_out * c_in * k * k + (c_out if bias else 0)


class BatchNorm(Module):
    """Per-channel batch norm; running stats updated as ``m*run + (1-m)*batch``."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float64):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = _zeros((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        if self.training:
            out, mean, var = T.batch_norm(x, self.gamma, self.beta, eps=self.eps)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mean
            self.running_var[...] = m * self.running_var + (1 - m) * var
            return out
        out, _, _ = T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        return out


def sep_conv2d(x, depth_kernels, point_kernel, stride=1):
    """Depthwise spatial correlation followed by a 1x1 cross-channel projection.

    ``depth_kernels`` is (C_in, k, k); ``point_kernel`` is (C_out, C_in, 1, 1).
    """
    depth_kernels = T.as_tensor(depth_kernels)
    point_kernel = T.as_tensor(point_kernel)
    if point_kernel.ndim != 4 or point_kernel.shape[2:] != (1, 1):
        raise ValueError(f"point kernel must be (C_out, C_in, 1, 1), got {point_kernel.shape}")
    if point_kernel.shape[1] != depth_kernels.shape[0]:
        raise ValueError("point kernel input channels must match the number of depth kernels")
    return T.conv2d(T.depthwise_conv2d(x, depth_kernels, stride=stride), point_kernel, padding="same")


class SepConv(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, dtype=np.float64):
        self.stride = stride
        self.depth = uniform_init(rng, (c_in, k, k), k * k, dtype)
        self.point = uniform_init(rng, (c_out, c_in, 1, 1), c_in, dtype)

    def forward(self, x):
        return sep_conv2d(x, self.depth, self.point, self.stride)

    @staticmethod
    def count(c_in, c_out, k=3):
        return c_in * k * k + c_in * c_out


class ConvBNReLU(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, batch_norm=True, dtype=np.float64):
        self.conv = Conv2d(rng, c_in, c_out, k, stride, bias=not batch_norm, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype) if batch_norm else None

    def forward(self, x):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return T.relu(y)

    @staticmethod
    def count(c_in, c_out, k, batch_norm=True):
        return Conv2d.count(c_in, c_out, k, not batch_norm) + (2 * c_out if batch_norm else 0)


@dataclass
class BlockConfig:
    channels_in: int
    channels_out: int
    num_resolutions: int = 3
    base_resolution: int = 32
    growth: int = 0
    batch_norm: bool = True

    def validate(self):
        if self.num_resolutions < 1:
            raise ValueError("num_resolutions must be >= 1")
        if self.base_resolution % (2 ** (self.num_resolutions - 1)):
            raise ValueError(
                f"base_resolution {self.base_resolution} not divisible by 2^{self.num_resolutions - 1}")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ValueError("channel counts must be positive")
        return self


class ResSepConv(Module):
    """``shortcut(x) + relu(bn(sepconv(x)))``.

    The shortcut is the identity when channel counts match, otherwise a
    1x1 convolution with bias.
    """

    def __init__(self, rng, c_in, c_out, k=3, batch_norm=True, dtype=np.float64):
        self.sep = SepConv(rng, c_in, c_out, k, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype) if batch_norm else None
        self.bias = None if batch_norm else _zeros((c_out,), dtype)
        self.shortcut = None if c_in == c_out else Conv2d(rng, c_in, c_out, 1, dtype=dtype)

    def forward(self, x):
        y = self.sep(x)
        if self.bn is not None:
            y = self.bn(y)
        else:
            y = y + self.bias.reshape(1, -1, 1, 1)
        y = T.relu(y)
        skip = x if self.shortcut is None else self.shortcut(x)
        return skip + y

    @staticmethod
    def count(c_in, c_out, k=3, batch_norm=True):
        n = SepConv.count(c_in, c_out, k) + 2 * c_out if batch_norm else SepConv.count(c_in, c_out, k) + c_out
        if c_in != c_out:
            n += Conv2d.count(c_in, c_out, 1, True)
        return n


def res_sepconv(x, cfg: BlockConfig, rng=None):
    """Functional form: builds a freshly initialised Res-SepConv and applies it."""
    rng = np.random.default_rng(0) if rng is None else rng
    mod = ResSepConv(rng, cfg.channels_in, cfg.channels_out, batch_norm=cfg.batch_norm, dtype=T.as_tensor(x).dtype)
    return mod(x)


def channel_widths(width_multiplier):
    """Stem widths (first conv, second stage, feature width)."""
    return tuple(max(1, int(round(w * width_multiplier))) for w in (64, 128, 196))


class Stem(Module):
    """Input image -> features at ``input_size / 8``.

    conv3x3/2 -> conv3x3 -> conv3x3/2 -> (SepConv || 1x1 shortcut) -> maxpool/2,
    each convolution followed by batch norm and ReLU.
    """

    def __init__(self, rng, widths, batch_norm=True, dtype=np.float64):
        w1, w2, w3 = widths
        self.conv1 = ConvBNReLU(rng, 3, w1, 3, 2, batch_norm, dtype)
        self.conv2 = ConvBNReLU(rng, w1, w1, 3, 1, batch_norm, dtype)
        self.conv3 = ConvBNReLU(rng, w1, w2, 3, 2, batch_norm, dtype)
        self.sep = SepConv(rng, w2, w3, 3, dtype=dtype)
        self.sep_bn = BatchNorm(w3, dtype=dtype) if batch_norm else None
        self.sep_bias = None if batch_norm else _zeros((w3,), dtype)
        self.shortcut = Conv2d(rng, w2, w3, 1, dtype=dtype)

    def forward(self, x):
        y = self.conv3(self.conv2(self.conv1(x)))
        s = self.sep(y)
        s = self.sep_bn(s) if self.sep_bn is not None else s + self.sep_bias.reshape(1, -1, 1, 1)
        y = T.relu(s) + self.shortcut(y)
        return T.max_pool2d(y, 2)

    @staticmethod
    def count(widths, batch_norm=True):
        w1, w2, w3 = widths
        return (ConvBNReLU.count(3, w1, 3, batch_norm) + ConvBNReLU.count(w1, w1, 3, batch_norm)
                + ConvBNReLU.count(w1, w2, 3, batch_norm) + SepConv.count(w2, w3)
                + (2 * w3 if batch_norm else w3) + Conv2d.count(w2, w3, 1, True))


def stem(image, cfg, rng=None):
    """Functional form over a model config (see :mod:`posereg.model`)."""
    image = T.as_tensor(image)
    if image.ndim == 3:
        image = image.reshape((1,) + image.shape)
    if image.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ValueError(f"stem expects 3x{cfg.input_size}x{cfg.input_size}, got {image.shape[1:]}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return Stem(rng, channel_widths(cfg.width_multiplier), cfg.batch_norm, image.dtype)(image)


class BlockA(Module):
    """Hourglass over ``num_resolutions`` scales with Res-SepConv at every node.

    level L: up = res(x); low = res(maxpool(x)); low = hourglass_{L-1}(low)
    (or res(low) at the bottom); out = up + upsample(res(low)).
    Inner levels may widen by ``growth`` channels per level.
    """

    def __init__(self, rng, cfg: BlockConfig, dtype=np.float64):
        cfg.validate()
        if cfg.channels_in != cfg.channels_out:
            raise ValueError("Block-A keeps the channel count")
        self.cfg = cfg
        self.levels = cfg.num_resolutions - 1
        self.trace = []
        c, g, bn = cfg.channels_in, cfg.growth, cfg.batch_norm
        if self.levels == 0:
            self.nodes = [ResSepConv(rng, c, c, batch_norm=bn, dtype=dtype)]
            return
        nodes = []
        for lvl in range(self.levels):
            ci, co = c + lvl * g, c + (lvl + 1) * g
            up = ResSepConv(rng, ci, ci, batch_norm=bn, dtype=dtype)
            down = ResSepConv(rng, ci, co, batch_norm=bn, dtype=dtype)
            back = ResSepConv(rng, co, ci, batch_norm=bn, dtype=dtype)
            nodes += [up, down, back]
        nodes.append(ResSepConv(rng, c + self.levels * g, c + self.levels * g, batch_norm=bn, dtype=dtype))
        self.nodes = nodes

    def _hourglass(self, x, lvl):
        self.trace.append(x.shape[-1])
        if lvl == self.levels:
            return self.nodes[-1](x)
        up, down, back = self.nodes[3 * lvl: 3 * lvl + 3]
        u = up(x)
        low = down(T.max_pool2d(x, 2))
        low = back(self._hourglass(low, lvl + 1))
        return u + T.upsample_nearest(low, 2)

    def forward(self, x):
        if x.shape[-1] % (2 ** self.levels) or x.shape[-2] % (2 ** self.levels):
            raise ValueError(f"resolution {x.shape[-2:]} not divisible by 2^{self.levels}")
        self.trace = []
        if self.levels == 0:
            self.trace.append(x.shape[-1])
            return self.nodes[0](x)
        return self._hourglass(x, 0)

    @staticmethod
    def count(cfg: BlockConfig):
        c, g, bn = cfg.channels_in, cfg.growth, cfg.batch_norm
        levels = cfg.num_resolutions - 1
        n = 0
        for lvl in range(levels):
            ci, co = c + lvl * g, c + (lvl + 1) * g
            n += ResSepConv.count(ci, ci, 3, bn) + ResSepConv.count(ci, co, 3, bn) + ResSepConv.count(co, ci, 3, bn)
        cl = c + levels * g
        return n + ResSepConv.count(cl, cl, 3, bn)


def block_a(features, cfg: BlockConfig, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    return BlockA(rng, cfg, T.as_tensor(features).dtype)(features)


@dataclass
class HeatMapSet:
    """Detection maps (B, N_J, H, W) and context maps (B, N_c*N_J, H, W).

    Context channel ``i * N_J + n`` belongs to context ``i`` of joint ``n``.
    """

    detection: Tensor
    context: Tensor

    @property
    def resolution(self):
        return self.detection.shape[-1]

    @property
    def num_maps(self):
        return self.detection.shape[1] + self.context.shape[1]


class BlockB(Module):
    """Features -> (heat maps, reinjected features).

    t = relu(bn(sepconv(x))); heat = conv1x1(t);
    reinjected = x + conv1x1(t) + conv1x1(heat).
    """

    def __init__(self, rng, channels, num_joints, num_context, batch_norm=True, dtype=np.float64):
        self.num_joints = num_joints
        self.num_context = num_context
        m = num_joints * (1 + num_context)
        self.sep = SepConv(rng, channels, channels, 3, dtype=dtype)
        self.bn = BatchNorm(channels, dtype=dtype) if batch_norm else None
        self.bias = None if batch_norm else _zeros((channels,), dtype)
        self.to_heat = Conv2d(rng, channels, m, 1, dtype=dtype)
        self.feat_proj = Conv2d(rng, channels, channels, 1, dtype=dtype)
        self.heat_proj = Conv2d(rng, m, channels, 1, dtype=dtype)

    def forward(self, x):
        t = self.sep(x)
        t = self.bn(t) if self.bn is not None else t + self.bias.reshape(1, -1, 1, 1)
        t = T.relu(t)
        heat = self.to_heat(t)
        out = x + self.feat_proj(t) + self.heat_proj(heat)
        return heat, out

    def split(self, heat):
        nj = self.num_joints
        return HeatMapSet(heat[:, :nj], heat[:, nj:])

    @staticmethod
    def count(channels, num_joints, num_context, batch_norm=True):
        m = num_joints * (1 + num_context)
        return (SepConv.count(channels, channels) + (2 * channels if batch_norm else channels)
                + Conv2d.count(channels, m, 1, True) + Conv2d.count(channels, channels, 1, True)
                + Conv2d.count(m, channels, 1, True))


def block_b(features, cfg, rng=None):
    """Returns ``(HeatMapSet, reinjected_features)`` for a fresh Block-B."""
    features = T.as_tensor(features)
    rng = np.random.default_rng(0) if rng is None else rng
    mod = BlockB(rng, features.shape[1], cfg.num_joints, cfg.num_context, cfg.batch_norm, features.dtype)
    heat, out = mod(features)
    return mod.split(heat), out
