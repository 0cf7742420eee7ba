"""PNG and raw float32 grid IO shared by the dataset, renderer and depth code."""

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(rgb):
    """[0, 1] float image to 8-bit, round-half-up; deterministic."""
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    return (arr * 255.0 + 0.5).astype(np.uint8)


def save_png(path, rgb):
    Image.fromarray(to_uint8(rgb), mode="RGB").save(Path(path), format="PNG")


def png_bytes(rgb):
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(rgb), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_png(path):
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_f32_grid(path, grid):
    """Little-endian float32 grid with a one-line text header."""
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise ValueError("grid must be 2-D")
    with open(path, "wb") as f:
        f.write(f"F32GRID {grid.shape[0]} {grid.shape[1]}\n".encode())
        f.write(grid.tobytes())


def read_f32_grid(path, height=None, width=None):
    with open(path, "rb") as f:
        header = f.readline().split()
        if header[0] != b"F32GRID":
            raise ValueError(f"{path} is not an f32 grid file")
        h, w = int(header[1]), int(header[2])
        if height is not None and (h, w) != (height, width):
            raise ValueError(f"{path} grid is {h}x{w}, expected {height}x{width}")
        data = np.frombuffer(f.read(4 * h * w), dtype="<f4")
    return data.reshape(h, w).copy()
