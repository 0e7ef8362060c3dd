"""PCK, PCKh and PCP on normalised poses, plus CSV table output.

Distances are measured in pixels after multiplying normalised coordinates
by ``image_size``; all three metrics are ratios, so the choice of
``image_size`` only matters for reporting.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# MPII joint order
MPII_JOINTS = ("r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
               "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder",
               "l_elbow", "l_wrist")
# LSP joint order
LSP_JOINTS = ("r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "r_wrist", "r_elbow",
              "r_shoulder", "l_shoulder", "l_elbow", "l_wrist", "neck", "head_top")
LSP_LIMBS = ((0, 1), (1, 2), (3, 4), (4, 5), (6, 7), (7, 8), (9, 10), (10, 11), (12, 13), (2, 9), (3, 8))
LSP_LIMB_GROUPS = {
    "Torso": [9, 10], "Upper leg": [1, 2], "Lower leg": [0, 3],
    "Upper arm": [5, 6], "Forearm": [4, 7], "Head": [8],
}
LSP_JOINT_GROUPS = {
    "Head": [13], "Sho.": [8, 9], "Elb.": [7, 10], "Wri.": [6, 11],
    "Hip": [2, 3], "Knee": [1, 4], "Ank.": [0, 5],
}


@dataclass
class MetricConfig:
    """``reference`` is the joint pair whose distance normalises PCK/PCKh."""

    metric: str = "PCK"
    threshold: float = 0.2
    reference: tuple = (9, 2)          # LSP: l_shoulder -> r_hip (torso diagonal)
    skeleton: tuple = LSP_LIMBS
    joint_names: tuple = LSP_JOINTS
    joint_groups: dict = field(default_factory=lambda: dict(LSP_JOINT_GROUPS))
    limb_groups: dict = field(default_factory=lambda: dict(LSP_LIMB_GROUPS))
    image_size: float = 1.0

    def validate(self, num_joints):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        for a, b in list(self.skeleton) + [tuple(self.reference)]:
            if not (0 <= a < num_joints and 0 <= b < num_joints):
                raise ValueError(f"joint pair ({a}, {b}) out of range for {num_joints} joints")
        return self


def pck_config(**kw):
    return MetricConfig(metric="PCK", threshold=0.2, **kw)


def pckh_config(**kw):
    kw.setdefault("reference", (8, 9))   # MPII upper neck -> head top
    kw.setdefault("joint_names", MPII_JOINTS)
    kw.setdefault("skeleton", ())
    kw.setdefault("joint_groups", {
        "Head": [9], "Sho.": [12, 13], "Elb.": [11, 14], "Wri.": [10, 15],
        "Hip": [2, 3], "Knee": [1, 4], "Ank.": [0, 5]})
    return MetricConfig(metric="PCKh", threshold=0.5, **kw)


def desk_config(metric="PCK", threshold=None):
    """Metric settings for the 8-joint synthetic skeleton (torso diagonal reference)."""
    from .data import DESK_JOINT_NAMES, DESK_LIMBS
    if threshold is None:
        threshold = 0.5 if metric == "PCP" else 0.2
    return MetricConfig(
        metric=metric, threshold=threshold, reference=(0, 3), skeleton=DESK_LIMBS,
        joint_names=DESK_JOINT_NAMES,
        joint_groups={"Sho.": [0, 1], "Hip": [2, 3], "Wri.": [4, 5], "Ank.": [6, 7]},
        limb_groups={"Torso": [0, 1, 2, 3], "Arm": [4, 5], "Leg": [6, 7]},
        image_size=64.0)


def _stack(poses):
    joints = np.stack([p.joints for p in poses])
    vis = np.stack([p.visibility for p in poses])
    return joints, vis


@dataclass
class MetricResult:
    per_item: np.ndarray          # per joint or per limb, percent (nan when never evaluated)
    mean: float
    correct: np.ndarray
    counted: np.ndarray
    groups: dict = field(default_factory=dict)
    excluded: int = 0             # degenerate limbs skipped (PCP)


def _group_scores(groups, correct, counted):
    out = {}
    for name, idx in groups.items():
        n = counted[idx].sum()
        out[name] = 100.0 * correct[idx].sum() / n if n else float("nan")
    return out


def pck(preds, truths, cfg: MetricConfig):
    """Percentage of joints within ``threshold * reference length`` of the truth.

    Ground-truth-invisible joints are skipped; both reference joints must be
    visible in every truth pose.
    """
    pj, _ = _stack(preds)
    tj, tv = _stack(truths)
    if pj.shape != tj.shape:
        raise ValueError("prediction and truth sets differ in shape")
    cfg.validate(tj.shape[1])
    a, b = cfg.reference
    if not (tv[:, a].all() and tv[:, b].all()):
        raise ValueError("reference joints missing from ground truth")
    s = cfg.image_size
    ref = np.hypot(*((tj[:, a] - tj[:, b]) * s).T)
    if np.any(ref <= 0):
        raise ValueError("zero-length reference segment")
    dist = np.hypot(*((pj - tj) * s).transpose(2, 0, 1))
    hit = (dist <= cfg.threshold * ref[:, None]) & tv
    correct = hit.sum(axis=0)
    counted = tv.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = 100.0 * correct / counted
    mean = 100.0 * correct.sum() / counted.sum() if counted.sum() else float("nan")
    return MetricResult(per_joint, mean, correct, counted, _group_scores(cfg.joint_groups, correct, counted))


def pcp(preds, truths, cfg: MetricConfig):
    """Percentage of limbs whose both endpoints lie within half the true limb length.

    Limbs with an invisible endpoint are skipped; zero-length limbs are
    skipped and counted in ``excluded``.
    """
    pj, _ = _stack(preds)
    tj, tv = _stack(truths)
    if pj.shape != tj.shape:
        raise ValueError("prediction and truth sets differ in shape")
    cfg.validate(tj.shape[1])
    if not cfg.skeleton:
        raise ValueError("PCP needs a skeleton")
    s = cfg.image_size
    limbs = np.asarray(cfg.skeleton)
    a, b = limbs[:, 0], limbs[:, 1]
    length = np.hypot(*((tj[:, a] - tj[:, b]) * s).transpose(2, 0, 1))
    da = np.hypot(*((pj[:, a] - tj[:, a]) * s).transpose(2, 0, 1))
    db = np.hypot(*((pj[:, b] - tj[:, b]) * s).transpose(2, 0, 1))
    valid = tv[:, a] & tv[:, b]
    degenerate = valid & (length <= 0)
    valid &= ~degenerate
    hit = valid & (da <= 0.5 * length) & (db <= 0.5 * length)
    correct = hit.sum(axis=0)
    counted = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_limb = 100.0 * correct / counted
    mean = 100.0 * correct.sum() / counted.sum() if counted.sum() else float("nan")
    return MetricResult(per_limb, mean, correct, counted, _group_scores(cfg.limb_groups, correct, counted),
                        excluded=int(degenerate.sum()))


def evaluate(preds, truths, cfg: MetricConfig):
    if cfg.metric in ("PCK", "PCKh"):
        return pck(preds, truths, cfg)
    if cfg.metric == "PCP":
        return pcp(preds, truths, cfg)
    raise ValueError(f"unknown metric {cfg.metric!r}")


def metric_table(result: MetricResult, names=None, label="Method", row="result", mean_name=None, grouped=False):
    """CSV text: header row of joint/limb (or group) names then one row of percentages."""
    if grouped:
        names = list(result.groups)
        values = [result.groups[n] for n in names]
    else:
        values = list(result.per_item)
        names = list(names) if names is not None else [str(i) for i in range(len(values))]
    header = [label, *names, mean_name or "Mean"]
    cells = [row, *[f"{v:.1f}" for v in values], f"{result.mean:.1f}"]
    return ",".join(header) + "\n" + ",".join(cells) + "\n"
