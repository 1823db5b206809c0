"""On-disk formats: FPT1 raw tensors, FPW1 weight checkpoints, PGM frames, PNG heatmaps."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

FPT1_MAGIC = b"FPT1"
FPW1_MAGIC = b"FPW1"


class FormatError(ValueError):
    """Raised when a file does not match the expected binary layout."""


def encode_fpt1(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = FPT1_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_fpt1(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one FPT1 tensor starting at ``offset``.

    Returns the array (float32) and the offset just past its payload, so
    concatenated tensors can be read back in sequence.
    """
    if buf[offset:offset + 4] != FPT1_MAGIC:
        raise FormatError("missing FPT1 magic")
    offset += 4
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = offset + 4 * count
    if end > len(buf):
        raise FormatError("truncated FPT1 payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims)
    return arr.astype(np.float32), end


def save_fpt1(path, array) -> None:
    Path(path).write_bytes(encode_fpt1(array))


def load_fpt1(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_fpt1(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after FPT1 tensor")
    return arr


def save_fpw1(path, header: dict, tensors: list) -> None:
    """Write a checkpoint: magic, u32 header length, UTF-8 JSON header, FPT1 tensors.

    ``tensors`` must be in the declaration order recorded in the header.
    """
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [FPW1_MAGIC, struct.pack("<I", len(text)), text]
    parts.extend(encode_fpt1(t) for t in tensors)
    Path(path).write_bytes(b"".join(parts))


def load_fpw1(path) -> tuple[dict, list[np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != FPW1_MAGIC:
        raise FormatError(f"{path}: missing FPW1 magic")
    (n,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + n].decode("utf-8"))
    offset = 8 + n
    tensors = []
    while offset < len(buf):
        arr, offset = decode_fpt1(buf, offset)
        tensors.append(arr)
    return header, tensors


def save_pgm(path, image, maxval: int = 255) -> None:
    """Write a quantized frame as binary PGM (P5). 16-bit data is stored big-endian."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError("PGM expects a 2-D image")
    vals = np.clip(np.rint(img), 0, maxval)
    h, w = vals.shape
    head = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = vals.astype(">u2" if maxval > 255 else "u1").tobytes()
    Path(path).write_bytes(head + body)


def load_pgm(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.float64)


def save_png_gray(path, image, lo=None, hi=None) -> None:
    img = np.asarray(image, dtype=np.float64)
    lo = float(np.nanmin(img)) if lo is None else lo
    hi = float(np.nanmax(img)) if hi is None else hi
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    u8 = np.rint(np.clip(np.nan_to_num(scaled), 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(u8, mode="L").save(path, format="PNG", optimize=False, compress_level=6)


def save_png_heatmap(path, image, lo: float, hi: float, mask=None) -> None:
    """Render with the jet colormap on a fixed [lo, hi] scale; masked-out pixels are black."""
    from matplotlib import colormaps

    img = np.asarray(image, dtype=np.float64)
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    rgba = colormaps["jet"](np.clip(np.nan_to_num(scaled), 0, 1))
    rgb = np.rint(rgba[..., :3] * 255).astype(np.uint8)
    if mask is not None:
        rgb[~np.asarray(mask, dtype=bool)] = 0
    PILImage.fromarray(rgb, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
