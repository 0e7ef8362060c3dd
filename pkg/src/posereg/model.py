"""Stem + K prediction blocks, Soft-argmax regression and aggregation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .layers import BlockA, BlockB, BlockConfig, HeatMapSet, Module, Stem, channel_widths
from .softargmax import joint_probability, soft_argmax
from .tensor import Tensor

AGGREGATE_EPS = 1e-8


@dataclass
class ModelConfig:
    K: int = 8
    num_joints: int = 16
    num_context: int = 2
    alpha: float = 0.8
    input_size: int = 256
    base_resolution: int = 32
    num_resolutions: int = 3
    width_multiplier: float = 1.0
    growth: int = 0
    batch_norm: bool = True
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.num_joints < 1:
            raise ValueError("num_joints must be >= 1")
        if self.num_context < 0:
            raise ValueError("num_context must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.input_size != 8 * self.base_resolution:
            raise ValueError(
                f"input_size {self.input_size} incompatible with base_resolution "
                f"{self.base_resolution}: the stem downsamples by 8")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.block_config().validate()
        return self

    @property
    def num_maps(self):
        return self.num_joints * (1 + self.num_context)

    @property
    def widths(self):
        return channel_widths(self.width_multiplier)

    def block_config(self):
        c = self.widths[2]
        return BlockConfig(c, c, self.num_resolutions, self.base_resolution, self.growth, self.batch_norm)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # full scale: 256x256 input, 32x32 down to 8x8
    "full": ModelConfig(),
    # desk scale: 64x64 input, base 8, two resolutions
    "desk": ModelConfig(K=2, num_joints=8, num_context=2, input_size=64, base_resolution=8,
                        num_resolutions=2, width_multiplier=0.25),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class Pose:
    """Normalised joint coordinates ``(N_J, 2)``, presence probabilities and visibility."""

    joints: np.ndarray
    probabilities: np.ndarray = None
    visibility: np.ndarray = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        n = len(self.joints)
        if self.probabilities is None:
            self.probabilities = np.ones(n)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64).reshape(n)
        if self.visibility is None:
            self.visibility = np.ones(n, dtype=bool)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(n)

    @property
    def num_joints(self):
        return len(self.joints)

    def copy(self):
        return Pose(self.joints.copy(), self.probabilities.copy(), self.visibility.copy())


@dataclass
class BlockPrediction:
    """Batched outputs of one prediction block."""

    heat: Tensor            # (B, M, H, W) pre-softmax
    coords: Tensor          # (B, M, 2) soft-argmax of every map
    probs: Tensor           # (B, M) sigmoid(max) of every map
    joints: Tensor          # (B, N_J, 2) aggregated
    num_joints: int

    @property
    def detection_probs(self):
        return self.probs[:, : self.num_joints]

    @property
    def context_probs(self):
        return self.probs[:, self.num_joints:]

    def heatmaps(self):
        nj = self.num_joints
        return HeatMapSet(Tensor(self.heat.data[:, :nj]), Tensor(self.heat.data[:, nj:]))

    def pose(self, b):
        nj = self.num_joints
        return Pose(self.joints.data[b].copy(), self.probs.data[b, :nj].copy())


@dataclass
class PredictionSet:
    blocks: list = field(default_factory=list)

    def __len__(self):
        return len(self.blocks)

    @property
    def final(self):
        return self.blocks[-1]

    @property
    def batch_size(self):
        return self.blocks[0].joints.shape[0]

    def item(self, b):
        """Per-block ``(Pose, HeatMapSet)`` pairs for batch item ``b``."""
        out = []
        for blk in self.blocks:
            hm = blk.heatmaps()
            out.append((blk.pose(b), HeatMapSet(Tensor(hm.detection.data[b]), Tensor(hm.context.data[b]))))
        return out

    def final_poses(self):
        return [self.final.pose(b) for b in range(self.batch_size)]


def aggregate(y_d, p_c, y_c, alpha):
    """Blend a detection location with probability-weighted context locations.

    ``alpha * y_d + (1 - alpha) * sum(p_i y_i) / sum(p_i)``; falls back to
    ``y_d`` when there is no context or the probability mass is below 1e-8.
    """
    y_d = np.asarray(y_d, dtype=np.float64)
    p_c = np.asarray(p_c, dtype=np.float64).reshape(-1)
    if p_c.size == 0:
        return y_d.copy()
    y_c = np.asarray(y_c, dtype=np.float64).reshape(p_c.size, -1)
    total = p_c.sum()
    if total < AGGREGATE_EPS:
        return y_d.copy()
    # normalise weights first so a lone context gets weight p / p == 1 exactly
    return alpha * y_d + (1 - alpha) * ((p_c / total) @ y_c)


def aggregate_tensor(coords, probs, num_joints, num_context, alpha):
    """Batched, differentiable :func:`aggregate` on (B, M, 2) coords and (B, M) probs."""
    y_d = coords[:, :num_joints]
    if num_context == 0:
        return y_d
    B = coords.shape[0]
    y_c = coords[:, num_joints:].reshape(B, num_context, num_joints, 2)
    p_c = probs[:, num_joints:].reshape(B, num_context, num_joints, 1)
    den = p_c.sum(axis=1, keepdims=True)
    dt = coords.dtype
    low = (den.data < AGGREGATE_EPS).astype(dt)
    ctx = (p_c / (den + low) * y_c).sum(axis=1)
    low = low[:, 0]
    w_det = (alpha + (1 - alpha) * low).astype(dt)
    w_ctx = ((1 - alpha) * (1 - low)).astype(dt)
    return y_d * w_det + ctx * w_ctx


class PoseModel(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        bcfg = cfg.block_config()
        self.stem = Stem(rng, cfg.widths, cfg.batch_norm, dtype)
        self.blocks_a = [BlockA(rng, bcfg, dtype) for _ in range(cfg.K)]
        self.blocks_b = [BlockB(rng, bcfg.channels_out, cfg.num_joints, cfg.num_context, cfg.batch_norm, dtype)
                         for _ in range(cfg.K)]

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def forward(self, images):
        cfg = self.cfg
        images = T.as_tensor(images)
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        if images.shape[1:] != (3, cfg.input_size, cfg.input_size):
            raise ValueError(f"expected images of shape (B, 3, {cfg.input_size}, {cfg.input_size}), got {images.shape}")
        if images.dtype != self.dtype:
            images = Tensor(images.data.astype(self.dtype))
        x = self.stem(images)
        preds = PredictionSet()
        for blk_a, blk_b in zip(self.blocks_a, self.blocks_b):
            heat, x = blk_b(blk_a(x))
            coords = soft_argmax(heat)
            probs = joint_probability(heat)
            joints = aggregate_tensor(coords, probs, cfg.num_joints, cfg.num_context, cfg.alpha)
            preds.blocks.append(BlockPrediction(heat, coords, probs, joints, cfg.num_joints))
        return preds

    def state_arrays(self):
        """Ordered name -> array for every parameter and buffer."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    @staticmethod
    def count(cfg: ModelConfig):
        return (Stem.count(cfg.widths, cfg.batch_norm)
                + cfg.K * (BlockA.count(cfg.block_config())
                           + BlockB.count(cfg.widths[2], cfg.num_joints, cfg.num_context, cfg.batch_norm)))


def build_model(cfg: ModelConfig):
    return PoseModel(cfg)


def forward(model, images):
    return model.forward(images)


def predict(model, image):
    """Final-block pose for one (3, S, S) image, batch norm in inference mode."""
    was_training = model.training
    model.eval()
    try:
        preds = model.forward(image)
    finally:
        model.train(was_training)
    return preds.final.pose(0)
