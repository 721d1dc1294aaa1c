"""
Binary NetPBM I/O through Pillow: P5 (greyscale) for label maps and masks, P6 (RGB) for
images. Only maxval 255 is supported. Arrays are [H, W] for P5 and [H, W, 3] for P6,
dtype uint8.
"""
import io

import numpy as np
from PIL import Image

from .errors import MissingFileError, NetPBMFormatError


_MODES = {b"P5": "L", b"P6": "RGB"}


def encode(array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("NetPBM arrays must be uint8, got %s" % array.dtype)
    if not (array.ndim == 2 or (array.ndim == 3 and array.shape[2] == 3)):
        raise ValueError("NetPBM arrays must be [H, W] or [H, W, 3], got %s" % (array.shape,))
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(array)).save(buffer, format="PPM")
    return buffer.getvalue()


def decode(blob, path="<bytes>"):
    magic = bytes(blob[:2])
    if magic not in _MODES:
        raise NetPBMFormatError(path, "unsupported magic %r" % magic)
    try:
        with Image.open(io.BytesIO(blob), formats=["PPM"]) as image:
            image.load()
            if image.mode != _MODES[magic]:
                raise NetPBMFormatError(
                    path, "mode %s unsupported, only maxval 255 %s" % (image.mode, _MODES[magic])
                )
            array = np.array(image, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise NetPBMFormatError(path, "malformed %s data (%s)" % (magic.decode(), exc))
    return array


def write(path, array):
    blob = encode(array)
    try:
        with open(path, "wb") as f:
            f.write(blob)
    except OSError as exc:
        raise OSError(exc.errno, "Couldn't write %s: %s" % (path, exc.strerror))
    return path


def read(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise MissingFileError(path)
    return decode(blob, path=str(path))


def to_bytes01(values):
    """
    Quantise floats in [0, 1] to uint8.
    """
    return np.round(np.clip(np.asarray(values), 0.0, 1.0) * 255.0).astype(np.uint8)
