"""Patch extraction from annotated images, resizing and patch manifests."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from dceac.utils import atomic_write

HEADER = ("path", "source", "row", "col", "tissue_frac", "label")
LABELS = ("NT", "M", "I")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PatchRecord:
    path: str
    source: str
    row: int
    col: int
    tissue_frac: float
    label: str | None = None


def tile_fractions(mask, tile_size=512):
    """Tissue fraction of every complete grid tile, shape (rows, cols)."""
    m = np.asarray(mask) > 0
    rows, cols = m.shape[0] // tile_size, m.shape[1] // tile_size
    m = m[:rows * tile_size, :cols * tile_size]
    blocks = m.reshape(rows, tile_size, cols, tile_size)
    return blocks.mean(axis=(1, 3))


def select_tiles(mask, tile_size=512, threshold=0.75):
    """Origins (row, col) and fractions of tiles whose tissue fraction exceeds the threshold.

    The grid starts at the top-left corner and does not overlap; incomplete
    edge tiles are never considered.
    """
    frac = tile_fractions(mask, tile_size)
    keep = []
    for i in range(frac.shape[0]):
        for j in range(frac.shape[1]):
            if frac[i, j] > threshold:
                keep.append((i * tile_size, j * tile_size, float(frac[i, j])))
    return keep


def extract_patches(image, mask, tile_size=512, threshold=0.75, out_dir=None, source="image"):
    """Tile ``image`` and keep tiles with more than ``threshold`` annotated tissue.

    When ``out_dir`` is given each kept tile is written as an 8-bit RGB PNG
    named ``{source}_r{row}_c{col}.png`` and the record path points at it.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    if image.shape[:2] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    records = []
    for row, col, frac in select_tiles(mask, tile_size, threshold):
        name = f"{source}_r{row}_c{col}.png"
        path = name
        if out_dir is not None:
            path = os.path.join(out_dir, name)
            tile = image[row:row + tile_size, col:col + tile_size]
            _write_png(path, tile)
        records.append(PatchRecord(path, source, row, col, frac, None))
    return records


def _write_png(path, array):
    with atomic_write(path, "wb") as fh:
        Image.fromarray(np.asarray(array, dtype=np.uint8)).save(fh, format="PNG")


def to_unit_range(patch):
    """Integer images are scaled by their bit-depth maximum; floats pass through."""
    patch = np.asarray(patch)
    if np.issubdtype(patch.dtype, np.integer):
        return patch.astype(np.float32) / np.float32(np.iinfo(patch.dtype).max)
    return patch.astype(np.float32, copy=False)


def resize_patch(patch, size=128):
    """Box-average downsampling of a square H x W x C patch by an integer factor."""
    x = to_unit_range(patch)
    if x.ndim == 2:
        x = x[..., None]
    h, w = x.shape[:2]
    if h != w:
        raise ValueError(f"patch must be square, got {h}x{w}")
    if h % size:
        raise ValueError(f"patch size {h} is not a multiple of {size}")
    f = h // size
    if f == 1:
        return x.copy()
    # accumulate in float64 so block sums of float32 pixels are exact
    out = x.reshape(size, f, size, f, x.shape[2]).mean(axis=(1, 3), dtype=np.float64)
    return out.astype(np.float32)


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def load_patches(records, size=128, base_dir=""):
    """Stack manifest patches into an N x 3 x size x size float32 array in [0, 1].

    Only the image files are read; labels are ignored.
    """
    out = np.empty((len(records), 3, size, size), dtype=np.float32)
    for i, rec in enumerate(records):
        img = resize_patch(load_image(resolve(rec.path, base_dir)), size)
        out[i] = img.transpose(2, 0, 1)
    return out


def resolve(path, base_dir):
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def write_manifest(path, records):
    base = os.path.dirname(os.path.abspath(path))
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        for r in records:
            p = r.path
            if os.path.isabs(p):
                p = os.path.relpath(p, base)
            writer.writerow([p, r.source, r.row, r.col, repr(float(r.tissue_frac)), r.label or ""])


def load_manifest(path, check_files=True):
    """Parse and validate a manifest CSV; patch paths are made relative to its directory."""
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != HEADER:
            raise ManifestError(f"line 1: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise ManifestError(f"line {lineno}: expected {len(HEADER)} fields, got {len(row)}")
            p, source, r, c, frac, label = row
            try:
                r, c, frac = int(r), int(c), float(frac)
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
            if label and label not in LABEL_INDEX:
                raise ManifestError(f"line {lineno}: unknown label {label!r} (expected NT, M or I)")
            if not 0.0 <= frac <= 1.0:
                raise ManifestError(f"line {lineno}: tissue fraction {frac} outside [0, 1]")
            if check_files and not os.path.exists(resolve(p, base)):
                raise ManifestError(f"line {lineno}: missing patch file {p}")
            records.append(PatchRecord(resolve(p, base), source, r, c, frac, label or None))
    return records


def label_indices(records):
    """Class indices for labelled records; raises if any record is unlabelled."""
    missing = [i for i, r in enumerate(records) if r.label is None]
    if missing:
        raise ManifestError(f"{len(missing)} manifest records have no label (first at record {missing[0] + 1})")
    return np.array([LABEL_INDEX[r.label] for r in records], dtype=np.int64)
