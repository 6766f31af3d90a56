"""PFM, PLY and PNG readers/writers used by the dataset and CLI."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian 32-bit PFM; rows are stored bottom to top."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError(f"{path}: malformed PFM size line")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: truncated PFM payload")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_ply(path, points: np.ndarray, normals: np.ndarray) -> None:
    """ASCII PLY with ``x y z nx ny nz`` vertex columns."""
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        *(f"property float {c}" for c in ("x", "y", "z", "nx", "ny", "nz")),
        "end_header",
    ]
    rows = np.concatenate([points, normals], axis=1)
    lines += [" ".join(f"{v:.7g}" for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    count, props, start = 0, [], None
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
        elif line.strip() == "end_header":
            start = i + 1
            break
    if start is None:
        raise ValueError(f"{path}: missing PLY header terminator")
    rows = np.array([[float(v) for v in line.split()] for line in text[start : start + count]]).reshape(count, -1)
    cols = {name: rows[:, j] for j, name in enumerate(props)}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    nrm = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return pts, nrm


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] (or uint8) as 8-bit PNG."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
