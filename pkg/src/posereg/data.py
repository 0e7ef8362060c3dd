"""Annotations, cropping, augmentation and the synthetic blob-skeleton dataset.

Pixel coordinates are continuous with the top-left image corner at (0, 0);
pixel ``k`` covers ``[k, k + 1)`` so its centre sits at ``k + 0.5``.
Normalised coordinates divide by the crop side, so (0, 0) is the top-left
corner and (1, 1) the bottom-right corner of the crop.

Annotation files hold one JSON object per line::

    {"image": "img/000001.png", "joints": [x1, y1, x2, y2, ...],
     "visibility": [1, 0, ...], "center": [cx, cy], "scale": 1.2}

``joints`` has ``2 * N_J`` numbers in pixels, ``visibility`` ``N_J`` values
each 0 or 1, ``center`` is the crop centre in pixels and ``scale`` the
subject size; the square crop side is ``scale * 200`` pixels.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .model import Pose

PIXELS_PER_SCALE = 200.0


class AnnotationError(ValueError):
    pass


@dataclass
class Annotation:
    image: str | None
    joints: np.ndarray          # (N_J, 2) pixels
    visibility: np.ndarray      # (N_J,) bool
    center: np.ndarray          # (2,) pixels
    scale: float

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.scale = float(self.scale)
        if not np.isfinite(self.joints).all():
            raise AnnotationError("joint coordinates must be finite")
        if not self.scale > 0:
            raise AnnotationError("scale must be positive")
        if len(self.visibility) != len(self.joints):
            raise AnnotationError("visibility and joints disagree in length")

    def to_json(self):
        return json.dumps({
            "image": self.image,
            "joints": [float(v) for v in self.joints.reshape(-1)],
            "visibility": [int(v) for v in self.visibility],
            "center": [float(v) for v in self.center],
            "scale": self.scale,
        })


def parse_annotation(line, lineno=0, num_joints=None):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    try:
        joints = rec["joints"]
        vis = rec["visibility"]
        center = rec["center"]
        scale = rec["scale"]
    except (KeyError, TypeError) as exc:
        raise AnnotationError(f"line {lineno}: missing field {exc}") from None
    if len(joints) % 2 or len(joints) != 2 * len(vis):
        raise AnnotationError(
            f"line {lineno}: joints list has {len(joints)} numbers for {len(vis)} visibility flags")
    if num_joints is not None and len(vis) != num_joints:
        raise AnnotationError(f"line {lineno}: expected {num_joints} joints, got {len(vis)}")
    if any(v not in (0, 1) for v in vis):
        raise AnnotationError(f"line {lineno}: visibility values must be 0 or 1")
    if len(center) != 2:
        raise AnnotationError(f"line {lineno}: center must have two numbers")
    try:
        return Annotation(rec.get("image"), joints, vis, center, scale)
    except AnnotationError as exc:
        raise AnnotationError(f"line {lineno}: {exc}") from None


def load_annotations(path, num_joints=None):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_annotation(line, lineno, num_joints))
    return out


def write_annotations(path, annotations):
    with open(path, "w") as fh:
        for ann in annotations:
            fh.write(ann.to_json() + "\n")


def read_image(path):
    """PNG -> float (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(path, image):
    """(3, H, W) float in [0, 1] -> 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def _sample(image, src_x, src_y):
    """Bilinear lookup of a (C, H, W) image at continuous pixel coords, zero outside."""
    # continuous coord c maps to array index c - 0.5
    coords = np.stack([src_y - 0.5, src_x - 0.5])
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0)
                     for ch in image])


def crop_box(ann, pixels_per_scale=PIXELS_PER_SCALE):
    side = ann.scale * pixels_per_scale
    if not side > 0:
        raise AnnotationError("degenerate crop")
    x0 = ann.center[0] - side / 2
    y0 = ann.center[1] - side / 2
    return x0, y0, side


def to_crop(points, box):
    x0, y0, side = box
    return (np.asarray(points, dtype=np.float64) - [x0, y0]) / side


def from_crop(points, box):
    x0, y0, side = box
    return np.asarray(points, dtype=np.float64) * side + [x0, y0]


def crop_normalize(image, ann, out_size, pixels_per_scale=PIXELS_PER_SCALE):
    """Square crop around ``ann.center``, bilinear resize to ``out_size``.

    Returns the (3, S, S) crop and a Pose in normalised crop coordinates.
    Joints outside the crop are marked invisible.
    """
    if out_size <= 0:
        raise ValueError("out_size must be positive")
    box = crop_box(ann, pixels_per_scale)
    x0, y0, side = box
    centres = (np.arange(out_size) + 0.5) / out_size * side
    src_y, src_x = np.meshgrid(y0 + centres, x0 + centres, indexing="ij")
    crop = _sample(np.asarray(image, dtype=np.float64), src_x, src_y)
    joints = to_crop(ann.joints, box)
    inside = np.all((joints >= 0) & (joints <= 1), axis=1)
    return crop, Pose(joints, visibility=ann.visibility & inside)


@dataclass(frozen=True)
class SimilarityTransform:
    """Rotation by ``angle`` degrees and isotropic ``scale`` about ``center``.

    Points map as ``c + s * R(angle) (u - c)`` with
    ``R = [[cos, -sin], [sin, cos]]`` acting on (x, y) image coordinates.
    A positive angle turns +x toward +y; with y pointing down this is
    counter-clockwise in the mathematical frame and clockwise on screen.
    """

    angle: float
    scale: float = 1.0
    center: tuple = (0.5, 0.5)

    def _rot(self, sign=1.0):
        a = math.radians(self.angle) * sign
        return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])

    def apply(self, points):
        c = np.asarray(self.center)
        return c + self.scale * (np.asarray(points, dtype=np.float64) - c) @ self._rot().T

    def invert(self, points):
        c = np.asarray(self.center)
        return c + ((np.asarray(points, dtype=np.float64) - c) / self.scale) @ self._rot(-1.0).T


@dataclass
class AugmentParams:
    rotation_range: float = 40.0
    scale_range: tuple = (0.7, 1.3)
    seed: int = 0

    def validate(self):
        if self.rotation_range < 0:
            raise ValueError("rotation_range must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        return self


AUGMENT_MPII = AugmentParams(40.0, (0.7, 1.3))
AUGMENT_LSP = AugmentParams(40.0, (0.85, 1.25))


def sample_transform(params, rng):
    params.validate()
    angle = rng.uniform(-params.rotation_range, params.rotation_range)
    s = rng.uniform(*params.scale_range)
    return SimilarityTransform(float(angle), float(s))


def warp(image, pose, transform):
    """Apply ``transform`` to a (3, S, S) image and its normalised pose."""
    image = np.asarray(image)
    S = image.shape[-1]
    centres = (np.arange(S) + 0.5) / S
    qy, qx = np.meshgrid(centres, centres, indexing="ij")
    src = transform.invert(np.stack([qx.ravel(), qy.ravel()], axis=1))
    out = _sample(image, src[:, 0].reshape(S, S) * S, src[:, 1].reshape(S, S) * S)
    joints = transform.apply(pose.joints)
    inside = np.all((joints >= 0) & (joints <= 1), axis=1)
    return out.astype(image.dtype), Pose(joints, pose.probabilities.copy(), pose.visibility & inside)


def augment(image, pose, params=None, rng=None):
    """Random rotation and rescale applied jointly to the image and the pose.

    ``rng`` overrides ``params.seed`` when given (used by the training loop).
    """
    params = AugmentParams() if params is None else params
    rng = np.random.default_rng(params.seed) if rng is None else rng
    return warp(image, pose, sample_transform(params, rng))


# -- synthetic dataset ---------------------------------------------------------

DESK_JOINT_NAMES = ("l_shoulder", "r_shoulder", "l_hip", "r_hip",
                    "l_wrist", "r_wrist", "l_ankle", "r_ankle")
DESK_LIMBS = ((0, 1), (2, 3), (0, 2), (1, 3), (0, 4), (1, 5), (2, 6), (3, 7))
DESK_COLORS = np.array([
    [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 0.5, 0.0],
])


@dataclass
class SyntheticSpec:
    """Blob-skeleton generator settings (lengths in pixels, angles in degrees).

    The skeleton is a two-level tree: torso corners around a random centre,
    then one extremity hanging off each corner.
    """

    canvas: int = 64
    num_joints: int = 8
    blob_sigma: float = 1.5
    torso_width: tuple = (12.0, 18.0)
    torso_height: tuple = (14.0, 22.0)
    torso_angle: float = 30.0
    limb_length: tuple = (6.0, 14.0)
    limb_angle: float = 60.0
    center_jitter: float = 6.0
    margin: float = 5.0
    noise: float = 0.15
    seed: int = 0
    colors: np.ndarray = field(default_factory=lambda: DESK_COLORS.copy())

    def validate(self):
        if self.num_joints != 8:
            raise ValueError("the synthetic skeleton has exactly 8 joints")
        if self.canvas < 16:
            raise ValueError("canvas too small")
        if 3 * self.blob_sigma > self.margin + 1e-9 or 2 * self.margin >= self.canvas:
            raise ValueError("blobs do not fit in the canvas with the given margin")
        reach = self.center_jitter + 0.5 * math.hypot(self.torso_width[1], self.torso_height[1]) + self.limb_length[0]
        if reach > self.canvas / 2 - self.margin:
            raise ValueError("skeleton geometry cannot fit inside the canvas")
        return self


def sample_skeleton(spec, rng, max_tries=1000):
    """Pixel joints (8, 2) fully inside ``[margin, canvas - margin]``."""
    c = spec.canvas / 2
    lo, hi = spec.margin, spec.canvas - spec.margin
    for _ in range(max_tries):
        cx, cy = c + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
        w = rng.uniform(*spec.torso_width)
        h = rng.uniform(*spec.torso_height)
        a = math.radians(rng.uniform(-spec.torso_angle, spec.torso_angle))
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        # l_shoulder is on the image right (subject faces the camera)
        corners = np.array([[w / 2, -h / 2], [-w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]]) @ rot.T
        corners += [cx, cy]
        # extremities point outward/downward from each corner with random spread
        base = np.radians([20.0, 160.0, 80.0, 100.0]) + a
        ang = base + np.radians(rng.uniform(-spec.limb_angle, spec.limb_angle, size=4))
        length = rng.uniform(*spec.limb_length, size=4)
        ends = corners + np.stack([np.cos(ang), np.sin(ang)], axis=1) * length[:, None]
        joints = np.concatenate([corners, ends])
        if np.all((joints >= lo) & (joints <= hi)):
            return joints
    raise ValueError("could not place a skeleton inside the canvas; geometry infeasible")


def render_layers(spec, joints):
    """One Gaussian intensity layer per joint, (N_J, S, S), peak 1 at the joint."""
    S = spec.canvas
    px = np.arange(S) + 0.5
    dx = px[None, :] - joints[:, 0:1]
    dy = px[None, :] - joints[:, 1:2]
    gx = np.exp(-dx ** 2 / (2 * spec.blob_sigma ** 2))
    gy = np.exp(-dy ** 2 / (2 * spec.blob_sigma ** 2))
    return gy[:, :, None] * gx[:, None, :]


def render(spec, joints, rng):
    S = spec.canvas
    noise = rng.uniform(0.0, 1.0, size=(3, S, S))
    background = spec.noise * ndimage.uniform_filter(noise, size=(1, 3, 3), mode="reflect") * 2
    layers = render_layers(spec, joints)
    alpha = layers.max(axis=0)
    colored = np.einsum("nhw,nc->chw", layers, spec.colors[: len(joints)])
    colored /= np.maximum(layers.sum(axis=0), 1e-12)
    return np.clip(background * (1 - alpha) + colored * alpha, 0.0, 1.0)


def synth_generate(spec, n):
    """``n`` (image (3, S, S), Pose) pairs, deterministic under ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(n):
        joints = sample_skeleton(spec, rng)
        img = render(spec, joints, rng)
        out.append((img, Pose(joints / spec.canvas)))
    return out


def write_synthetic(directory, samples, canvas):
    """PNG images plus ``annotations.jsonl``; crops cover the full canvas."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    anns = []
    for i, (img, pose) in enumerate(samples):
        rel = os.path.join("images", f"{i:06d}.png")
        write_image(os.path.join(directory, rel), img)
        anns.append(Annotation(rel, pose.joints * canvas, pose.visibility,
                               [canvas / 2, canvas / 2], canvas / PIXELS_PER_SCALE))
    path = os.path.join(directory, "annotations.jsonl")
    write_annotations(path, anns)
    return path


def load_dataset(path, out_size, num_joints=None):
    """Annotations file -> list of (image, Pose) crops; image paths are file-relative."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for ann in load_annotations(path, num_joints):
        if ann.image is None:
            raise AnnotationError("annotation has no image path")
        img = read_image(os.path.join(base, ann.image))
        out.append(crop_normalize(img, ann, out_size))
    return out
