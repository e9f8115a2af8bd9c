"""ASCII PLY export of labelled clouds."""
from __future__ import annotations

import colorsys
from pathlib import Path
from typing import Union

import numpy as np


def _make_palette(n: int = 50) -> np.ndarray:
    golden = 0.618033988749895
    colours = []
    for i in range(n):
        hue = (i * golden) % 1.0
        sat = 0.65 + 0.35 * ((i // 10) % 2)
        val = 0.95 - 0.25 * ((i // 5) % 2)
        colours.append([round(255 * c) for c in colorsys.hsv_to_rgb(hue, sat, val)])
    return np.array(colours, dtype=np.uint8)


PALETTE = _make_palette()


def colours_for(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return PALETTE[labels % len(PALETTE)]


def write_ply(path: Union[str, Path], coords: np.ndarray, labels) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    rgb = colours_for(np.broadcast_to(np.asarray(labels), (len(coords),)))
    header = [
        "ply", "format ascii 1.0", f"element vertex {len(coords)}",
        "property double x", "property double y", "property double z",
        "property uchar red", "property uchar green", "property uchar blue", "end_header",
    ]
    body = [f"{x!r} {y!r} {z!r} {r} {g} {b}"
            for (x, y, z), (r, g, b) in zip(coords.tolist(), rgb.tolist())]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    """Read back a file written by :func:`write_ply`: (coords, rgb)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    end = lines.index("end_header")
    count = next(int(l.split()[2]) for l in lines[:end] if l.startswith("element vertex"))
    rows = [l.split() for l in lines[end + 1:end + 1 + count]]
    coords = np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float64).reshape(-1, 3)
    rgb = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.uint8).reshape(-1, 3)
    return coords, rgb
