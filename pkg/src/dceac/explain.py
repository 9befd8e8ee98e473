"""Activation maps for the distance-based clustering head.

The head scores a sample by Student-t similarity of its pooled embedding to
each centre, so there are no linear class weights to project. The map used
here is the negative squared distance between each bottleneck fibre
z(:, h, w) and the centre, which orders locations exactly as the head's own
similarity would.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from PIL import Image

from dceac.network import encode
from dceac.utils import atomic_write

# blue (0) -> red (1), linear in RGB
RAMP_LOW = np.array([0.0, 0.0, 1.0])
RAMP_HIGH = np.array([1.0, 0.0, 0.0])


@dataclass
class ActivationMap:
    heatmap: np.ndarray
    cluster: int
    source: str | None = None


def normalize(raw):
    """Min-max scale to [0, 1]; a constant map becomes 0.5 everywhere."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def upsample(heatmap, factor):
    return np.repeat(np.repeat(heatmap, factor, axis=0), factor, axis=1)


def distance_map(z, center):
    """Negative squared distance of every C-fibre of ``z`` (C x H x W) to ``center``."""
    z = np.asarray(z, dtype=np.float64)
    diff = z - np.asarray(center, dtype=np.float64)[:, None, None]
    return -np.einsum("chw,chw->hw", diff, diff)


def cam_from_bottleneck(z, centers, cluster, factor=1):
    centers = np.asarray(centers)
    if not 0 <= cluster < centers.shape[0]:
        raise ValueError(f"cluster index {cluster} out of range [0, {centers.shape[0]})")
    heat = normalize(distance_map(z, centers[cluster]))
    return upsample(heat, factor) if factor > 1 else heat


def compute_cam(params, x, cluster, frame=None, source=None):
    """Activation map of one image (C x M x M) for ``cluster``.

    The bottleneck map is box-upsampled to ``frame`` pixels (default: the
    network input size, i.e. x4 for the default architecture).
    """
    if params.centers is None:
        raise ValueError("checkpoint has no cluster centres")
    cfg = params.config
    frame = frame or cfg.input_size
    if frame % cfg.bottleneck_size:
        raise ValueError(f"frame {frame} is not a multiple of the bottleneck size {cfg.bottleneck_size}")
    x = np.asarray(x, dtype=np.float32)
    z = encode(params, x[None])[0]
    heat = cam_from_bottleneck(z, params.centers, cluster, frame // cfg.bottleneck_size)
    return ActivationMap(heat, cluster, source)


def ramp(values):
    v = np.asarray(values, dtype=np.float64)[..., None]
    return RAMP_LOW * (1 - v) + RAMP_HIGH * v


def blend(patch, heatmap, alpha=0.5):
    """Alpha-blend the ramp-coloured heatmap over an H x W x 3 patch; returns uint8."""
    patch = np.asarray(patch)
    if np.issubdtype(patch.dtype, np.integer):
        patch = patch.astype(np.float64) / 255.0
    if patch.shape[:2] != np.shape(heatmap):
        raise ValueError(f"heatmap {np.shape(heatmap)} does not match patch {patch.shape[:2]}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    out = (1 - alpha) * patch[..., :3] + alpha * ramp(heatmap)
    return np.clip(np.round(out * 255), 0, 255).astype(np.uint8)


def render_overlay(patch, amap, alpha, path):
    img = blend(patch, amap.heatmap, alpha)
    with atomic_write(path, "wb") as fh:
        Image.fromarray(img).save(fh, format="PNG")
    return img


def write_heatmap_csv(path, heatmap):
    with atomic_write(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in heatmap])
