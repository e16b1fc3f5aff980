"""File formats: PFM (float maps), Middlebury .flo (2D flow), 8-bit PNG
(color, masks), JSON manifests and CSV logs.

PFM is written little-endian (negative scale), bottom row first per the
format convention. .flo uses the 202021.25 sanity tag.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

FLO_TAG = 202021.25


class FileFormatError(RuntimeError):
    pass


def write_pfm(path, data, scale=1.0):
    """data: [H,W] or [H,W,3] float; stored as float32, little-endian."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM supports [H,W] or [H,W,3]")
    H, W = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{W} {H}\n".encode("ascii"))
        fh.write(f"{-abs(scale)}\n".encode("ascii"))
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    """Returns (data, scale); data float32 [H,W] or [H,W,3]."""
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header == b"PF":
            color = True
        elif header == b"Pf":
            color = False
        else:
            raise FileFormatError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise FileFormatError(f"{path}: malformed PFM dimensions")
        W, H = int(dims[0]), int(dims[1])
        try:
            scale = float(fh.readline().rstrip())
        except ValueError as e:
            raise FileFormatError(f"{path}: malformed PFM scale") from e
        endian = "<" if scale < 0 else ">"
        count = W * H * (3 if color else 1)
        raw = np.frombuffer(fh.read(), dtype=endian + "f4", count=count)
        if raw.size != count:
            raise FileFormatError(f"{path}: truncated PFM payload")
    shape = (H, W, 3) if color else (H, W)
    return np.flipud(raw.reshape(shape)).copy(), abs(scale)


def write_flo(path, flow):
    """flow: [H,W,2] float32, (u, v) per pixel."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(".flo requires [H,W,2]")
    H, W = flow.shape[:2]
    with open(path, "wb") as fh:
        np.array([FLO_TAG], dtype="<f4").tofile(fh)
        np.array([W, H], dtype="<i4").tofile(fh)
        fh.write(flow.astype("<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        tag = np.frombuffer(fh.read(4), dtype="<f4")[0]
        if abs(tag - FLO_TAG) > 1e-3:
            raise FileFormatError(f"{path}: bad .flo magic tag {tag}")
        W, H = np.frombuffer(fh.read(8), dtype="<i4")
        raw = np.frombuffer(fh.read(), dtype="<f4", count=W * H * 2)
        if raw.size != W * H * 2:
            raise FileFormatError(f"{path}: truncated .flo payload")
    return raw.reshape(int(H), int(W), 2).copy()


def write_png(path, image):
    """image: [H,W,3] float in [0,1] or [H,W] (grayscale/masks)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path):
    """Returns float image in [0,1] ([H,W,3] or [H,W])."""
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr.astype(np.float64) / 255.0


def read_mask_png(path):
    """8-bit mask PNG: nonzero = dynamic."""
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr > 0


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def append_csv_row(path, header, row):
    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write(",".join(header) + "\n")
        fh.write(",".join(str(v) for v in row) + "\n")
