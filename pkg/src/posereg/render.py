"""Pose overlays and heat-map mosaics as 8-bit RGB arrays / PNG files.

The overlay dims the photo to at most half intensity, so joint markers (full
value, fully saturated hues) and limb lines (partly desaturated hues) can
never be confused with background pixels.  ``read_markers`` exploits that to
recover joint positions from a rendered overlay.
"""
from __future__ import annotations

import colorsys

import numpy as np
from PIL import Image, ImageDraw

from .softargmax import spatial_softmax


def _palette(n, saturation, value, offset=0.0):
    cols = [colorsys.hsv_to_rgb((i + offset) / max(n, 1), saturation, value) for i in range(n)]
    return [tuple(int(round(255 * c)) for c in rgb) for rgb in cols]


def joint_colors(n):
    """Distinct fully saturated colours; every one has a channel at 255 and one at 0."""
    return _palette(n, 1.0, 1.0)


def limb_colors(n):
    return _palette(n, 0.6, 0.9, offset=0.5)


def _to_uint8(image, dim=1.0):
    arr = np.asarray(image, dtype=np.float64).transpose(1, 2, 0)
    return np.clip(np.rint(arr * 255.0 * dim), 0, 255).astype(np.uint8)


def overlay(image, pose, limbs=(), scale=4, marker=1):
    """Draw ``pose`` (normalised) on a (3, H, W) image upscaled by ``scale``.

    Joint ``n`` of the pose becomes a ``(2 * marker + 1)``-pixel square of
    ``joint_colors(N_J)[n]`` centred on the upscaled pixel containing it.
    Invisible joints and limbs touching them are skipped.
    """
    base = _to_uint8(image, dim=0.5)
    H, W = base.shape[:2]
    im = Image.fromarray(base, "RGB").resize((W * scale, H * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    pts = np.asarray(pose.joints) * [W * scale, H * scale]
    vis = np.asarray(pose.visibility, dtype=bool)
    for (a, b), col in zip(limbs, limb_colors(len(limbs))):
        if vis[a] and vis[b]:
            draw.line([tuple(pts[a]), tuple(pts[b])], fill=col, width=max(1, scale // 2))
    cols = joint_colors(len(pts))
    for n, (x, y) in enumerate(pts):
        if not vis[n]:
            continue
        cx, cy = int(np.floor(x)), int(np.floor(y))
        draw.rectangle([cx - marker, cy - marker, cx + marker, cy + marker], fill=cols[n])
    return np.asarray(im)


def read_markers(rgb, num_joints, scale=4):
    """Joint positions (normalised) recovered from an overlay; NaN when a marker is absent."""
    rgb = np.asarray(rgb)
    H, W = rgb.shape[:2]
    out = np.full((num_joints, 2), np.nan)
    for n, col in enumerate(joint_colors(num_joints)):
        ys, xs = np.nonzero(np.all(rgb == col, axis=-1))
        if len(xs):
            out[n] = [(xs.mean() + 0.5) / W, (ys.mean() + 0.5) / H]
    return out


def heatmap_mosaic(heat, image=None, cols=4, tile_scale=4):
    """Tile per-map spatial-softmax images into one RGB mosaic.

    ``heat`` is (M, H, W) pre-softmax.  Each tile shows the probability map
    normalised to its own maximum, optionally blended over ``image`` resized
    to the map grid.
    """
    heat = np.asarray(heat, dtype=np.float64)
    M, H, W = heat.shape
    prob = spatial_softmax(heat).data
    prob = prob / prob.max(axis=(1, 2), keepdims=True)
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        step_y, step_x = img.shape[1] // H, img.shape[2] // W
        small = img[:, : H * step_y, : W * step_x].reshape(3, H, step_y, W, step_x).mean(axis=(2, 4))
    else:
        small = np.zeros((3, H, W))
    rows = -(-M // cols)
    canvas = np.zeros((3, rows * (H + 1), cols * (W + 1)))
    hot = np.stack([np.ones_like(prob), np.clip(prob * 2 - 0.5, 0, 1), np.clip(prob * 2 - 1, 0, 1)], axis=1)
    for m in range(M):
        r, c = divmod(m, cols)
        a = prob[m][None]
        tile = 0.5 * small * (1 - a) + hot[m] * a
        canvas[:, r * (H + 1): r * (H + 1) + H, c * (W + 1): c * (W + 1) + W] = tile
    rgb = _to_uint8(canvas)
    return np.repeat(np.repeat(rgb, tile_scale, axis=0), tile_scale, axis=1)


def save_png(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(path)


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
