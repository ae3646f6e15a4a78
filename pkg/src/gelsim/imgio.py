"""Minimal PFM / PPM / PBM image I/O used by the rendering pipeline.

PFM: little-endian float32, single channel, bottom row first (scale -1).
PPM: binary P6, maxval 255. PBM: binary P4, packed bits, 1 = set.
"""

from __future__ import annotations

import numpy as np


class ImageIOError(ValueError):
    pass


def save_pfm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise ImageIOError("PFM writer expects a single-channel image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(img[::-1].astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ImageIOError(f"{path}: not a grayscale PFM")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].astype(np.float64)


def save_ppm(img: np.ndarray, path) -> None:
    """RGB image with values in [0, 1] -> binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageIOError("PPM writer expects an (H, W, 3) image")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ImageIOError(f"{path}: not a binary PPM")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(x) for x in line.split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def save_pbm(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode("ascii"))
        fh.write(packed.tobytes())


def load_pbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P4":
            raise ImageIOError(f"{path}: not a binary PBM")
        w, h = (int(x) for x in fh.readline().split())
        row_bytes = (w + 7) // 8
        data = np.frombuffer(fh.read(row_bytes * h), dtype=np.uint8)
    bits = np.unpackbits(data.reshape(h, row_bytes), axis=1)[:, :w]
    return bits.astype(bool)


def encode_normal_map(normals: np.ndarray) -> np.ndarray:
    """Unit normals -> RGB via (n + 1) / 2."""
    return (np.asarray(normals) + 1.0) * 0.5


def decode_normal_map(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb) * 2.0 - 1.0
