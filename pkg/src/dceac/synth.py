"""Procedural three-texture patch sets for desk-scale experiments.

Class 0: low-frequency blobs, class 1: oriented stripes, class 2: sparse dots.
"""

from __future__ import annotations

import os

import numpy as np

from dceac.datapipe import LABELS, PatchRecord, _write_png, write_manifest

TEXTURES = ("blobs", "stripes", "dots")


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return yy, xx


def _blobs(rng, size):
    yy, xx = _grid(size)
    field = np.zeros((size, size), np.float32)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(0.09, 0.19) * size
        field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return np.clip(field / max(field.max(), 1e-6), 0, 1)


def _stripes(rng, size):
    yy, xx = _grid(size)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(0.08, 0.14) * size
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    return np.clip(0.5 + 0.8 * wave, 0, 1)


def _dots(rng, size):
    yy, xx = _grid(size)
    field = np.zeros((size, size), np.float32)
    scale = size / 128
    for _ in range(rng.integers(25, 45)):
        cy, cx = rng.uniform(0, size, 2)
        radius = rng.uniform(1.5, 3.0) * scale
        field = np.maximum(field, ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2).astype(np.float32))
    return field


_MAKERS = {"blobs": _blobs, "stripes": _stripes, "dots": _dots}


def texture_patch(rng, kind, size=128, noise=0.03):
    """One H x W x 3 float32 patch in [0, 1]."""
    field = _MAKERS[kind](rng, size)[..., None]
    background = np.array([0.90, 0.87, 0.84], np.float32) + rng.normal(0, 0.03, 3).astype(np.float32)
    stain = np.array([0.55, 0.36, 0.22], np.float32) + rng.normal(0, 0.05, 3).astype(np.float32)
    img = background * (1 - field) + stain * field
    img = img + rng.normal(0, noise, img.shape).astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float32)


def make_dataset(n_per_class=100, size=128, seed=0):
    """Returns ``(images N x 3 x size x size, labels N)`` ordered class by class."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls, kind in enumerate(TEXTURES):
        for _ in range(n_per_class):
            images.append(texture_patch(rng, kind, size).transpose(2, 0, 1))
            labels.append(cls)
    return np.stack(images), np.array(labels, dtype=np.int64)


def write_dataset(out_dir, manifest_path, n_per_class=100, size=128, seed=0, with_labels=True):
    """Write the patch set as 8-bit PNGs plus a manifest; returns the records."""
    images, labels = make_dataset(n_per_class, size, seed)
    records = []
    for i, (img, cls) in enumerate(zip(images, labels)):
        path = os.path.join(out_dir, f"synth_{i:04d}.png")
        _write_png(path, np.round(img.transpose(1, 2, 0) * 255))
        records.append(PatchRecord(os.path.abspath(path), f"synth_{TEXTURES[cls]}", 0, 0, 1.0,
                                   LABELS[cls] if with_labels else None))
    write_manifest(manifest_path, records)
    return records


def make_slide(rng, tiles_y=3, tiles_x=4, tile=512):
    """Large image tiled with random textures plus a tissue mask of varying coverage."""
    image = np.zeros((tiles_y * tile, tiles_x * tile, 3), np.float32)
    mask = np.zeros(image.shape[:2], np.uint8)
    for i in range(tiles_y):
        for j in range(tiles_x):
            kind = TEXTURES[rng.integers(len(TEXTURES))]
            image[i * tile:(i + 1) * tile, j * tile:(j + 1) * tile] = texture_patch(rng, kind, tile)
            cover = rng.choice([0.0, 0.5, 0.8, 1.0])
            mask[i * tile:i * tile + int(round(cover * tile)), j * tile:(j + 1) * tile] = 255
    return np.round(image * 255).astype(np.uint8), mask
