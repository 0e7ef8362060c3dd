"""RMSProp training with a validation-plateau learning-rate schedule."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint, load_into, save_checkpoint
from .data import AugmentParams, augment
from .losses import training_loss
from .metrics import desk_config, pck
from .model import ModelConfig, PoseModel
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    initial_lr: float = 1e-3
    plateau_factor: float = 0.4
    plateau_patience: int = 5
    min_delta: float = 1e-4
    min_lr: float = 1e-7
    epochs: int = 30
    rho: float = 0.9
    eps: float = 1e-8
    lambda_p: float = 0.01
    supervise: str = "aggregated"
    val_fraction: float = 0.1
    augment: bool = False
    rotation_range: float = 40.0
    scale_range: tuple = (0.7, 1.3)
    seed: int = 0
    output_dir: str | None = None

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.supervise not in ("aggregated", "detection"):
            raise ValueError("supervise must be 'aggregated' or 'detection'")
        return self

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def rmsprop_step(params, grads, state, lr, rho=0.9, eps=1e-8):
    """In-place RMSProp update of parallel lists of arrays.

    ``v <- rho v + (1 - rho) g^2`` and ``p <- p - lr g / (sqrt(v) + eps)``.
    Nothing is modified when any gradient is non-finite.
    """
    for i, g in enumerate(grads):
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter {i}")
    for p, g, v in zip(params, grads, state):
        if g is None:
            continue
        v *= rho
        v += (1 - rho) * g * g
        p -= lr * g / (np.sqrt(v) + eps)
    return params, state


def lr_schedule(history, current_lr, cfg: TrainConfig, since=0):
    """New learning rate after appending the latest validation score to ``history``.

    An epoch improves when its score beats the best earlier score by at least
    ``min_delta`` (the first epoch always improves).  When the last
    ``plateau_patience`` epochs at index ``>= since`` contain no improvement
    the rate is multiplied by ``plateau_factor``, floored at ``min_lr``.
    The caller resets ``since`` after a reduction.
    """
    if not history:
        raise ValueError("history must be nonempty")
    best = -np.inf
    last_improvement = -1
    for i, score in enumerate(history):
        if score >= best + cfg.min_delta:
            last_improvement = i
        best = max(best, score)
    stale = len(history) - max(last_improvement + 1, since)
    if stale >= cfg.plateau_patience:
        return max(current_lr * cfg.plateau_factor, cfg.min_lr)
    return current_lr


@dataclass
class RunLog:
    entries: list = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, **entry):
        self.entries.append(entry)

    def write(self, path):
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def deterministic(self):
        """Entries without timing fields, for run-to-run comparison."""
        return [{k: v for k, v in e.items() if k != "seconds"} for e in self.entries]


def split_dataset(samples, val_fraction, seed):
    """Deterministic train/validation split."""
    n = len(samples)
    n_val = int(round(n * val_fraction))
    order = np.random.default_rng([seed, 7919]).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def batches(samples, batch_size):
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([img for img, _ in chunk])
        joints = np.stack([p.joints for _, p in chunk])
        vis = np.stack([p.visibility for _, p in chunk])
        yield images, joints, vis


def predict_poses(model, samples, batch_size=64):
    """Final-block poses and per-joint heat-map argmax cells, inference mode."""
    was = model.training
    model.eval()
    poses, argmax = [], []
    try:
        for images, _, _ in batches(samples, batch_size):
            preds = model.forward(images)
            poses += preds.final_poses()
            heat = preds.final.heat.data[:, : model.cfg.num_joints]
            B, N, H, W = heat.shape
            flat = heat.reshape(B, N, -1).argmax(axis=-1)
            argmax.append(np.stack([flat % W + 1, flat // W + 1], axis=-1))
    finally:
        model.train(was)
    return poses, (np.concatenate(argmax) if argmax else np.zeros((0, model.cfg.num_joints, 2), int))


def validation_pck(model, samples, metric_cfg=None):
    metric_cfg = desk_config() if metric_cfg is None else metric_cfg
    poses, _ = predict_poses(model, samples)
    return pck(poses, [p for _, p in samples], metric_cfg).mean / 100.0


def heatmap_argmax_hit_rate(model, samples, cells=2):
    """Fraction of visible joints whose detection-map argmax is within ``cells`` of the truth.

    The argmax cell is read at its ramp coordinate ``(i / W, j / H)``.
    """
    _, argmax = predict_poses(model, samples)
    res = model.cfg.base_resolution
    truth = np.stack([p.joints for _, p in samples])
    vis = np.stack([p.visibility for _, p in samples])
    err = np.abs(argmax / res - truth) * res
    ok = np.all(err <= cells, axis=-1) & vis
    return ok.sum() / vis.sum()


class Trainer:
    def __init__(self, model, cfg: TrainConfig, metric_cfg=None):
        self.model = model
        self.cfg = cfg.validate()
        self.metric_cfg = desk_config() if metric_cfg is None else metric_cfg
        self.names = [n for n, _ in model.named_parameters()]
        self.params = [p for _, p in model.named_parameters()]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.lr = cfg.initial_lr
        self.history = []
        self.since = 0
        self.epoch = 0
        self.best = -np.inf
        self.log = RunLog()

    # -- persistence ------------------------------------------------------
    def state(self):
        return {"epoch": self.epoch, "lr": self.lr, "history": self.history, "since": self.since,
                "best": None if not np.isfinite(self.best) else self.best,
                # timings would break bit-identical checkpoints; they live in runlog.jsonl only
                "log": self.log.deterministic()}

    def save(self, path):
        extra = {f"opt.{n}": v for n, v in zip(self.names, self.v)}
        return save_checkpoint(path, self.model, extra, self.state())

    def restore(self, extra, state):
        for i, n in enumerate(self.names):
            self.v[i][...] = extra[f"opt.{n}"]
        self.epoch = int(state["epoch"])
        self.lr = float(state["lr"])
        self.history = [float(h) for h in state["history"]]
        self.since = int(state["since"])
        self.best = -np.inf if state["best"] is None else float(state["best"])
        self.log = RunLog(list(state.get("log", [])))

    # -- loop -------------------------------------------------------------
    def _prepare(self, chunk, rng):
        if not self.cfg.augment:
            return chunk
        params = AugmentParams(self.cfg.rotation_range, tuple(self.cfg.scale_range))
        return [augment(img, pose, params, rng) for img, pose in chunk]

    def train_epoch(self, train_set):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, self.epoch])
        order = rng.permutation(len(train_set))
        totals = np.zeros(3)
        nb = 0
        self.model.train()
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = self._prepare([train_set[i] for i in order[start:start + cfg.batch_size]], rng)
            images, joints, vis = next(batches(chunk, len(chunk)))
            try:
                preds = self.model.forward(images)
                loss, report = training_loss(preds, joints, vis, cfg.lambda_p, cfg.supervise)
                if not np.isfinite(report.total):
                    raise NonFiniteError("loss")
                self.model.zero_grad()
                loss.backward()
                rmsprop_step([p.data for p in self.params], [p.grad for p in self.params], self.v,
                             self.lr, cfg.rho, cfg.eps)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {self.epoch} batch {bi}: {exc}") from exc
            totals += (report.total, report.coordinate_loss, report.probability_loss)
            nb += 1
        return totals / max(nb, 1)

    def fit(self, train_set, val_set, epochs=None, output_dir=None):
        epochs = self.cfg.epochs if epochs is None else epochs
        output_dir = output_dir if output_dir is not None else self.cfg.output_dir
        if not train_set:
            raise ValueError("training set is empty")
        t_start = time.time()
        if output_dir and self.epoch == 0:
            self.save(os.path.join(output_dir, "last"))
        while self.epoch < epochs:
            t0 = time.time()
            total, coord, prob = self.train_epoch(train_set)
            score = validation_pck(self.model, val_set, self.metric_cfg) if val_set else float("nan")
            self.history.append(score)
            lr_used = self.lr
            new_lr = lr_schedule(self.history, self.lr, self.cfg, self.since)
            if new_lr != self.lr:
                self.since = len(self.history)
            self.lr = new_lr
            self.epoch += 1
            self.log.append(epoch=self.epoch, loss=total, coordinate_loss=coord, probability_loss=prob,
                            val_pck=score, lr=lr_used, seconds=time.time() - t0)
            log.info("epoch %d loss %.5f val PCK %.4f lr %.2e", self.epoch, total, score, lr_used)
            improved = score > self.best
            if improved:
                self.best = score
            if output_dir:
                self.save(os.path.join(output_dir, "last"))
                if improved:
                    self.save(os.path.join(output_dir, "best"))
                self.log.write(os.path.join(output_dir, "runlog.jsonl"))
        self.log.wall_clock += time.time() - t_start
        return self.model, self.log


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset, val_set=None, resume_from=None,
          init_from=None, metric_cfg=None):
    """Train from scratch, from ``init_from`` weights, or resume a checkpoint.

    Without ``val_set`` a deterministic ``val_fraction`` of ``dataset`` is held
    out.  Returns ``(trainer, RunLog)``; ``trainer.model`` is the final model.
    """
    train_cfg.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    if val_set is None:
        dataset, val_set = split_dataset(dataset, train_cfg.val_fraction, train_cfg.seed)
    if resume_from is not None:
        model, extra, state = load_checkpoint(resume_from)
        trainer = Trainer(model, train_cfg, metric_cfg)
        trainer.restore(extra, state)
    else:
        model = PoseModel(model_cfg)
        if init_from is not None:
            _, arrays, _ = read_checkpoint(init_from)
            load_into(model, arrays)
        trainer = Trainer(model, train_cfg, metric_cfg)
    trainer.fit(dataset, val_set)
    return trainer, trainer.log
