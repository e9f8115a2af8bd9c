"""Point-cloud ingestion, sampling, normalisation, augmentation and synthetic
datasets.

Text format (``.txt``)::

    #cols: xyz|xyzrgb|xyzrgbn [label]
    #shape_label: 3        (optional)
    #category: 0           (optional)
    x y z [r g b] [nx ny nz] [label]

Binary format (``.gpc``), little-endian::

    b"GTNPC1"
    u32 n, u32 attribute_count, u8 has_labels, i32 shape_label, i32 category   (-1 = absent)
    f32[n] per column, column-major: x, y, z, then each attribute column
    u32[n] point labels, if has_labels

Dataset layout: ``<root>/<split>/<class>/<item>.(txt|gpc)``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .graph import PointCloud

COLUMN_LAYOUTS = {"xyz": 0, "xyzrgb": 3, "xyzrgbn": 6}
BINARY_MAGIC = b"GTNPC1"
_BIN_HEADER = struct.Struct("<IIBii")
GENERATORS = ("sphere", "cube", "torus", "plane", "two_part_rod")


class DataError(ValueError):
    """Malformed or inconsistent point-cloud data."""


@dataclass
class Dataset:
    items: list
    split: str = "train"
    class_names: list = field(default_factory=list)
    part_names: Optional[list] = None
    category_parts: Optional[list] = None

    def __len__(self) -> int:
        return len(self.items)

    def validate(self) -> None:
        has_attr = {it.attributes is not None for it in self.items}
        if len(has_attr) > 1:
            raise DataError("attribute presence differs across items")
        for it in self.items:
            if it.shape_label is not None and self.class_names and not 0 <= it.shape_label < len(self.class_names):
                raise DataError(f"shape label {it.shape_label} out of range for {it.name!r}")
            if it.point_labels is not None and self.part_names and (
                    it.point_labels.min() < 0 or it.point_labels.max() >= len(self.part_names)):
                raise DataError(f"part label out of range in {it.name!r}")


# ---------------------------------------------------------------------------
# text / binary IO


def load_text(path: Union[str, Path]) -> PointCloud:
    path = Path(path)
    layout = None
    has_label = False
    meta: dict[str, int] = {}
    rows: list[list[float]] = []
    labels: list[int] = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                key = key.strip()
                if key == "cols":
                    parts = value.split()
                    if not parts or parts[0] not in COLUMN_LAYOUTS or parts[1:] not in ([], ["label"]):
                        raise DataError(f"{path}:{lineno}: bad column header {line!r}")
                    layout, has_label = parts[0], bool(parts[1:])
                elif key in ("shape_label", "category"):
                    try:
                        meta[key] = int(value)
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: bad {key} value {value.strip()!r}") from None
                continue
            if layout is None:
                raise DataError(f"{path}:{lineno}: data before '#cols:' header")
            fields = line.split()
            width = 3 + COLUMN_LAYOUTS[layout] + has_label
            if len(fields) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, found {len(fields)}")
            try:
                vals = [float(v) for v in fields[:3 + COLUMN_LAYOUTS[layout]]]
                if has_label:
                    labels.append(int(fields[-1]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparsable value") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if layout is None:
        raise DataError(f"{path}: missing '#cols:' header")
    if not rows:
        raise DataError(f"{path}: no points")
    arr = np.array(rows, dtype=np.float64)
    return PointCloud(
        arr[:, :3],
        arr[:, 3:] if COLUMN_LAYOUTS[layout] else None,
        np.array(labels, dtype=np.int64) if has_label else None,
        meta.get("shape_label"), meta.get("category"), path.stem,
    )


def _layout_of(cloud: PointCloud) -> str:
    a = 0 if cloud.attributes is None else cloud.attributes.shape[1]
    for name, count in COLUMN_LAYOUTS.items():
        if count == a:
            return name
    raise DataError(f"no text layout holds {a} attribute columns")


def save_text(cloud: PointCloud, path: Union[str, Path]) -> None:
    layout = _layout_of(cloud)
    lines = [f"#cols: {layout}" + (" label" if cloud.point_labels is not None else "")]
    if cloud.shape_label is not None:
        lines.append(f"#shape_label: {cloud.shape_label}")
    if cloud.category is not None:
        lines.append(f"#category: {cloud.category}")
    values = cloud.features()
    for i, row in enumerate(values):
        cols = [repr(float(v)) for v in row]
        if cloud.point_labels is not None:
            cols.append(str(int(cloud.point_labels[i])))
        lines.append(" ".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def save_binary(cloud: PointCloud, path: Union[str, Path]) -> None:
    a = 0 if cloud.attributes is None else cloud.attributes.shape[1]
    header = _BIN_HEADER.pack(
        cloud.n, a, cloud.point_labels is not None,
        -1 if cloud.shape_label is None else cloud.shape_label,
        -1 if cloud.category is None else cloud.category)
    cols = np.ascontiguousarray(cloud.features().T, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC + header + cols.tobytes())
        if cloud.point_labels is not None:
            fh.write(cloud.point_labels.astype("<u4").tobytes())


def load_binary(path: Union[str, Path]) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:6] != BINARY_MAGIC:
        raise DataError(f"{path}: bad magic")
    try:
        n, a, has_labels, shape_label, category = _BIN_HEADER.unpack_from(raw, 6)
    except struct.error:
        raise DataError(f"{path}: truncated header") from None
    off = 6 + _BIN_HEADER.size
    ncol = 3 + a
    need = off + 4 * n * ncol + (4 * n if has_labels else 0)
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    cols = np.frombuffer(raw, dtype="<f4", count=n * ncol, offset=off).reshape(ncol, n).T.astype(np.float64)
    if not np.isfinite(cols).all():
        raise DataError(f"{path}: non-finite value")
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * n * ncol).astype(np.int64)
    return PointCloud(cols[:, :3], cols[:, 3:] if a else None, labels,
                      None if shape_label < 0 else shape_label,
                      None if category < 0 else category, path.stem)


def load_cloud(path: Union[str, Path]) -> PointCloud:
    path = Path(path)
    if path.suffix == ".gpc":
        return load_binary(path)
    if path.suffix == ".txt":
        return load_text(path)
    raise DataError(f"{path}: unknown extension")


def load_dataset(root: Union[str, Path], split: str) -> Dataset:
    """Read ``<root>/<split>/<class>/<item>`` files; class index = sorted
    directory position unless the file carries its own shape label."""
    base = Path(root) / split
    if not base.is_dir():
        raise DataError(f"missing split directory {base}")
    class_names = sorted(p.name for p in base.iterdir() if p.is_dir())
    items = []
    for ci, cname in enumerate(class_names):
        for f in sorted((base / cname).iterdir()):
            if f.suffix not in (".txt", ".gpc"):
                continue
            cloud = load_cloud(f)
            if cloud.shape_label is None:
                cloud.shape_label = ci
            cloud.name = f"{cname}/{f.stem}"
            items.append(cloud)
    if not items:
        raise DataError(f"no point clouds under {base}")
    ds = Dataset(items, split, class_names)
    ds.validate()
    return ds


def save_dataset(ds: Dataset, root: Union[str, Path], binary: bool = False) -> None:
    base = Path(root) / ds.split
    for i, item in enumerate(ds.items):
        cname = ds.class_names[item.shape_label] if ds.class_names else "all"
        d = base / cname
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{i:05d}"
        if binary:
            save_binary(item, d / f"{stem}.gpc")
        else:
            save_text(item, d / f"{stem}.txt")


# ---------------------------------------------------------------------------
# sampling / normalisation / augmentation


def sample_points(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniform draw of ``n`` points: without replacement when the cloud is
    large enough, with replacement otherwise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if cloud.n == 0:
        raise DataError("cannot sample from an empty cloud")
    rng = np.random.default_rng(seed)
    idx = rng.choice(cloud.n, size=n, replace=cloud.n < n)
    return cloud.take(idx)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    coords = cloud.coords - cloud.coords.mean(axis=0)
    radius = np.sqrt((coords ** 2).sum(axis=1)).max()
    if radius > 0:
        coords = coords / radius
    return PointCloud(coords, cloud.attributes, cloud.point_labels, cloud.shape_label,
                      cloud.category, cloud.name)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    scale: tuple = (0.8, 1.25)
    shift: float = 0.1


def augment(cloud: PointCloud, config: AugmentConfig, seed: int, training: bool = True) -> PointCloud:
    """Random uniform scale and translation of the coordinates (train mode only)."""
    if not (config.enabled and training):
        return cloud
    rng = np.random.default_rng(seed)
    s = rng.uniform(*config.scale)
    t = rng.uniform(-config.shift, config.shift, size=3)
    return PointCloud(cloud.coords * s + t, cloud.attributes, cloud.point_labels,
                      cloud.shape_label, cloud.category, cloud.name)


# ---------------------------------------------------------------------------
# synthetic shapes


@dataclass(frozen=True)
class SynthSpec:
    generator: Union[str, tuple] = ("sphere", "cube")
    points_per_cloud: int = 128
    clouds_per_class: int = 16
    noise_sigma: float = 0.01
    seed: int = 0
    with_attributes: bool = False

    @property
    def generators(self) -> tuple:
        return (self.generator,) if isinstance(self.generator, str) else tuple(self.generator)


_CLASS_COLOURS = np.array([[0.9, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.3, 0.9],
                           [0.9, 0.8, 0.1], [0.6, 0.2, 0.8]])


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _shape(kind: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free surface samples and their unit normals."""
    if kind == "sphere":
        p = _unit(rng.normal(size=(n, 3)))
        return p, p.copy()
    if kind == "cube":
        face = rng.integers(0, 6, size=n)
        axis, sign = face % 3, np.where(face < 3, 1.0, -1.0)
        p = rng.uniform(-1, 1, size=(n, 3))
        p[np.arange(n), axis] = sign
        normal = np.zeros((n, 3))
        normal[np.arange(n), axis] = sign
        return p, normal
    if kind == "torus":
        big, small = 1.0, 0.3
        u, v = rng.uniform(0, 2 * np.pi, size=(2, n))
        centre = np.stack([big * np.cos(u), big * np.sin(u), np.zeros(n)], axis=1)
        normal = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        return centre + small * normal, normal
    if kind == "plane":
        p = np.concatenate([rng.uniform(-1, 1, size=(n, 2)), np.zeros((n, 1))], axis=1)
        return p, np.tile([0.0, 0.0, 1.0], (n, 1))
    if kind == "two_part_rod":
        radius = 0.2
        x = rng.uniform(-1, 1, size=n)
        t = rng.uniform(0, 2 * np.pi, size=n)
        normal = np.stack([np.zeros(n), np.cos(t), np.sin(t)], axis=1)
        return np.stack([x, radius * np.cos(t), radius * np.sin(t)], axis=1), normal
    raise ValueError(f"unknown generator {kind!r}")


def synth_generate(spec: SynthSpec, split: str = "train") -> Dataset:
    """Seeded synthetic dataset with one class per generator.

    ``two_part_rod`` clouds carry per-point part labels (1 where the axial
    coordinate is positive, else 0) and category 0.
    """
    gens = spec.generators
    for g in gens:
        if g not in GENERATORS:
            raise ValueError(f"unknown generator {g!r}")
    rng = np.random.default_rng(spec.seed)
    items = []
    for ci, kind in enumerate(gens):
        for j in range(spec.clouds_per_class):
            p, normal = _shape(kind, spec.points_per_cloud, rng)
            p = p + rng.normal(scale=spec.noise_sigma, size=p.shape) if spec.noise_sigma else p
            attrs = None
            if spec.with_attributes:
                rgb = np.clip(_CLASS_COLOURS[ci % len(_CLASS_COLOURS)]
                              + rng.normal(scale=0.05, size=p.shape), 0.0, 1.0)
                attrs = np.concatenate([rgb, normal], axis=1)
            labels = (p[:, 0] > 0).astype(np.int64) if kind == "two_part_rod" else None
            items.append(PointCloud(p, attrs, labels, ci, 0 if kind == "two_part_rod" else None,
                                    f"{kind}_{j:03d}"))
    part_names = ["rod_neg", "rod_pos"] if "two_part_rod" in gens else None
    category_parts = [[0, 1]] if gens == ("two_part_rod",) else None
    return Dataset(items, split, list(gens), part_names, category_parts)
