"""Image file reading and writing (PNG via Pillow, 16-bit PGM written directly)."""
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError


def read_image(path):
    """Decode an image to floats in [0, 1]: (3, H, W) for colour, (H, W) for grayscale."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.float64) / 65535.0
    if mode == "F":
        return arr.astype(np.float64)
    if mode in ("1", "L", "P", "LA"):
        if mode in ("P", "LA"):
            with Image.open(path) as im:
                arr = np.asarray(im.convert("L"))
        return arr.astype(np.float64) / (1.0 if mode == "1" else 255.0)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_gray(path):
    """Luminance in [0, 1]; colour images are reduced to their channel mean."""
    img = read_image(path)
    return img.mean(axis=0) if img.ndim == 3 else img


def read_mask(path):
    img = read_image(path)
    if img.ndim == 3:
        img = img.max(axis=0)
    return (img > 0.5).astype(np.uint8)


def write_png(path, array):
    """Write (H, W) or (3, H, W) floats in [0, 1] (or a uint8 mask) as 8-bit PNG."""
    array = np.asarray(array)
    if array.dtype == np.uint8 and array.max(initial=0) <= 1:
        data = array * 255
    else:
        data = np.clip(np.round(np.asarray(array, dtype=float) * 255), 0, 255).astype(np.uint8)
    if data.ndim == 3:
        data = data.transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(data)).save(path)


def write_pgm16(path, values):
    """Binary 16-bit PGM (P5, maxval 65535, big-endian) from integers in [0, 65535]."""
    values = np.asarray(values)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.clip(values, 0, 65535).astype(">u2").tobytes())


def read_pgm16(path):
    """Raw integer samples of a binary PGM written by ``write_pgm16``."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != "P5":
        raise DataError(f"{path}: not a binary PGM")
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)
