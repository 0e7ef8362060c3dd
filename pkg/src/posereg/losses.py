"""Elastic-net coordinate loss, binary cross-entropy and the per-block training loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BCE_CLAMP = 1e-7


def elastic_net_loss(pred, truth, mask=None):
    """Mean over joints of ``mask * (|d|_1 + |d|_2^2)``.

    ``pred`` and ``truth`` are (..., N_J, 2); the mean divides by N_J, and a
    leading batch axis, if any, is averaged too.  Accepts Tensors (for
    training) or arrays.
    """
    pred = T.as_tensor(pred)
    truth_arr = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=pred.dtype)
    if pred.shape != truth_arr.shape:
        raise ValueError(f"pose shapes differ: {pred.shape} vs {truth_arr.shape}")
    d = pred - truth_arr
    per_joint = (T.absolute(d) + T.square(d)).sum(axis=-1)
    if mask is not None:
        per_joint = per_joint * np.asarray(mask, dtype=pred.dtype)
    return per_joint.mean()


def bce_loss(pred_probs, truth_probs):
    """Mean of ``(p - 1) log(1 - q) - p log q`` with ``q`` clamped to [1e-7, 1 - 1e-7]."""
    q = T.clip(T.as_tensor(pred_probs), BCE_CLAMP, 1 - BCE_CLAMP)
    p = np.asarray(truth_probs, dtype=q.dtype)
    if p.shape != q.shape:
        raise ValueError(f"probability shapes differ: {q.shape} vs {p.shape}")
    terms = T.log(1.0 - q) * (p - 1) - T.log(q) * p
    return terms.mean()


@dataclass
class LossReport:
    total: float
    coordinate_loss: float
    probability_loss: float
    per_block: list = field(default_factory=list)   # (coordinate, probability) per block
    lambda_p: float = 0.01


def training_loss(preds, truth_joints, visibility, lambda_p=0.01, supervise="aggregated", block_weights=None):
    """Intermediate-supervision loss summed over prediction blocks.

    For block k: ``L_y`` (elastic net on the aggregated, or detection-only,
    joints, masked by visibility) plus ``lambda_p * L_p`` where ``L_p`` is
    BCE of the detection probabilities plus BCE of each context map's
    probabilities, all against visibility.  ``block_weights`` (default all
    ones) lets tests switch individual blocks off.

    Returns ``(total_tensor, LossReport)``.
    """
    truth_joints = np.asarray(truth_joints)
    vis = np.asarray(visibility, dtype=bool)
    target = vis.astype(np.float64)
    weights = np.ones(len(preds)) if block_weights is None else np.asarray(block_weights, dtype=np.float64)
    total = None
    per_block = []
    for w, blk in zip(weights, preds.blocks):
        nj = blk.num_joints
        joints = blk.joints if supervise == "aggregated" else blk.coords[:, :nj]
        ly = elastic_net_loss(joints, truth_joints, vis)
        lp = bce_loss(blk.detection_probs, target)
        nc = (blk.probs.shape[1] - nj) // nj
        if nc:
            ctx = blk.context_probs.reshape(blk.probs.shape[0], nc, nj)
            lp = lp + bce_loss(ctx, np.broadcast_to(target[:, None, :], ctx.shape)) * float(nc)
        per_block.append((float(ly.data), float(lp.data)))
        term = (ly + lp * lambda_p) * float(w)
        total = term if total is None else total + term
    report = LossReport(
        total=float(total.data),
        coordinate_loss=sum(b[0] for b in per_block),
        probability_loss=sum(b[1] for b in per_block),
        per_block=per_block,
        lambda_p=lambda_p,
    )
    return total, report
