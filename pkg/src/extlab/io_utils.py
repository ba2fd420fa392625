"""Binary array encoding helpers (little-endian base64) and file export."""

import base64
import json

import numpy as np


def b64_write(arr):
    """Encode a float array as base64 little-endian float64."""
    a = np.ascontiguousarray(arr, dtype="<f8")
    return base64.b64encode(a.tobytes()).decode("ascii")


def b64_read(text):
    return np.frombuffer(base64.b64decode(text), dtype="<f8").copy()


def export_field(path_prefix, values, header):
    """Write raw little-endian complex64 values plus a JSON header."""
    raw = np.ascontiguousarray(values, dtype="<c8")
    with open(str(path_prefix) + ".c64", "wb") as fh:
        fh.write(raw.tobytes())
    meta = dict(header)
    meta["dtype"] = "<c8"
    meta["count"] = int(raw.size)
    with open(str(path_prefix) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def import_field(path_prefix):
    with open(str(path_prefix) + ".json") as fh:
        meta = json.load(fh)
    raw = np.fromfile(str(path_prefix) + ".c64", dtype="<c8")
    return raw.astype(np.complex128), meta


def write_pgm(path, image, maxval=255):
    """Grayscale PGM dump of a nonnegative 2-d array (for inspection)."""
    img = np.asarray(image, dtype=np.float64)
    top = img.max() if img.size and img.max() > 0 else 1.0
    data = np.round(img / top * maxval).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n"
                 .encode("ascii"))
        fh.write(data.tobytes())
