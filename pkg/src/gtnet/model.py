"""GTNet assembly: alignment network, dynamic-graph backbone, shape feature
gathering and the task heads."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import AGGREGATIONS, GraphTransformerBlock
from .graph import knn_build_batch
from .numerics import (
    LBR,
    Dropout,
    Linear,
    Module,
    OptimizerConfig,
    Tensor,
    concat,
    cross_entropy,
    matmul,
    relu,
    reshape,
)
from .numerics.optim import CosineAnnealing
from .numerics.tensor import broadcast_to, unsqueeze

TASKS = ("classification", "part_segmentation", "semantic_segmentation")
GRAPH_BASES = ("coordinates_first_then_features", "always_coordinates")

# Standard ShapeNet-Part category -> part id table (16 categories, 50 parts).
SHAPENET_PARTS: tuple[tuple[int, ...], ...] = (
    (0, 1, 2, 3), (4, 5), (6, 7), (8, 9, 10, 11), (12, 13, 14, 15), (16, 17, 18),
    (19, 20, 21), (22, 23), (24, 25, 26, 27), (28, 29), (30, 31, 32, 33, 34, 35),
    (36, 37), (38, 39, 40), (41, 42, 43), (44, 45, 46), (47, 48, 49),
)


@dataclass
class ModelConfig:
    task: str = "classification"
    blocks: list = field(default_factory=lambda: [(3, 64), (64, 64), (64, 128), (128, 256)])
    k: int = 20
    num_classes: int = 40
    num_parts: int = 0
    use_alignment: bool = True
    use_feature_encoding: bool = True
    encoding_kind: str = "relative"
    use_global: bool = True
    use_local: bool = True
    use_residual: bool = True
    scaled_global: bool = True
    aggregation: str = "max"
    graph_basis: str = "coordinates_first_then_features"
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 250
    batch_size: int = 8
    dtype: str = "float64"
    label_smoothing: float = 0.0
    dropout: float = 0.5
    shape_width: int = 512
    label_width: int = 64
    cls_hidden: tuple = (512, 256)
    seg_hidden: tuple = (256, 128)
    zero_init_offset: bool = False
    recalibrate_bn: bool = True
    category_parts: Optional[list] = None

    def __post_init__(self):
        self.blocks = [tuple(int(v) for v in b) for b in self.blocks]
        self.cls_hidden = tuple(self.cls_hidden)
        self.seg_hidden = tuple(self.seg_hidden)
        if self.category_parts is not None:
            self.category_parts = [list(map(int, p)) for p in self.category_parts]
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.blocks:
            raise ValueError("at least one block is required")
        for (c, d), (c_next, _) in zip(self.blocks, self.blocks[1:]):
            if d != c_next:
                raise ValueError(f"block widths do not chain: {d} -> {c_next}")
        if not (self.use_local or self.use_global):
            raise ValueError("use_local and use_global cannot both be disabled")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.graph_basis not in GRAPH_BASES:
            raise ValueError(f"unknown graph_basis {self.graph_basis!r}")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.task != "classification" and self.num_parts < 1:
            raise ValueError("segmentation needs num_parts >= 1")
        if self.task != "semantic_segmentation" and self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def input_channels(self) -> int:
        return self.blocks[0][0]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["blocks"] = [list(b) for b in self.blocks]
        out["cls_hidden"] = list(self.cls_hidden)
        out["seg_hidden"] = list(self.seg_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        opt = dict(data.pop("optimizer", {}) or {})
        sched = opt.pop("schedule", None)
        if sched is not None:
            opt["schedule"] = CosineAnnealing(**sched)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(optimizer=OptimizerConfig(**opt), **data)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


class AlignmentNet(Module):
    """Predicts a 3x3 transform as identity plus a learned offset.

    Shared per-point LBR layers, max-pool over points, then dense layers; the
    last dense layer starts at zero so a fresh net returns the identity.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float64, widths=(32, 64), hidden: int = 32):
        self.point_mlp = [LBR(3, widths[0], rng, dtype), LBR(widths[0], widths[1], rng, dtype)]
        self.dense = Linear(widths[1], hidden, rng, dtype=dtype)
        self.offset = Linear(hidden, 9, rng, dtype=dtype)
        self.offset.zero_()
        self._eye = np.eye(3, dtype=dtype)

    def forward(self, coords: Tensor) -> tuple[Tensor, Tensor]:
        h = coords
        for layer in self.point_mlp:
            h = layer(h)
        pooled = h.max(axis=1)
        delta = self.offset(relu(self.dense(pooled)))
        transform = reshape(delta, (coords.shape[0], 3, 3)) + self._eye
        return matmul(coords, transform), transform


def _mlp_stack(in_dim: int, widths: Sequence[int], out_dim: int, rng, dtype, p: float,
               drop_rng) -> list:
    layers: list = []
    for w in widths:
        layers.append(LBR(in_dim, w, rng, dtype))
        if p > 0:
            layers.append(Dropout(p, drop_rng))
        in_dim = w
    layers.append(Linear(in_dim, out_dim, rng, dtype=dtype))
    return layers


class GTNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        dt = config.np_dtype
        rng = np.random.default_rng(config.seed)
        drop_rng = np.random.default_rng([config.seed, 1])
        self.align = AlignmentNet(rng, dt) if config.use_alignment else None
        encoding = config.encoding_kind if config.use_feature_encoding else None
        self.blocks = [
            GraphTransformerBlock(
                c, d, config.k, rng, aggregation=config.aggregation, encoding=encoding,
                use_local=config.use_local, use_global=config.use_global,
                residual=config.use_residual, scaled_global=config.scaled_global, dtype=dt)
            for c, d in config.blocks
        ]
        if config.zero_init_offset:
            for b in self.blocks:
                if b.glob is not None:
                    b.glob.zero_offset()
        concat_width = sum(d for _, d in config.blocks)
        self.label_mlp = None
        shape_in = concat_width
        if config.task == "part_segmentation":
            self.label_mlp = LBR(config.num_classes, config.label_width, rng, dt)
            shape_in += config.label_width
        self.shape_mlp = LBR(shape_in, config.shape_width, rng, dt)
        if config.task == "classification":
            self.head = _mlp_stack(config.shape_width, config.cls_hidden, config.num_classes,
                                   rng, dt, config.dropout, drop_rng)
        else:
            self.head = _mlp_stack(config.shape_width + concat_width, config.seg_hidden,
                                   config.num_parts, rng, dt, config.dropout, drop_rng)
        self.assign_names()

    # -- stages ------------------------------------------------------------

    def backbone_forward(self, x: Tensor, coords: np.ndarray) -> tuple[list[Tensor], list[np.ndarray]]:
        """Run every block, rebuilding each block's K-NN graph.

        Block 1 uses ``coords``; later blocks use the previous block's output
        features unless ``graph_basis`` pins them to coordinates. Graph indices
        are constants for differentiation.
        """
        cfg = self.config
        outputs: list[Tensor] = []
        graphs: list[np.ndarray] = []
        basis, space = coords, "coordinate"
        f = x
        for block in self.blocks:
            idx = knn_build_batch(basis, cfg.k, space)
            f = block(f, idx)
            outputs.append(f)
            graphs.append(idx)
            if cfg.graph_basis == "coordinates_first_then_features":
                basis, space = f.data, "feature"
        return outputs, graphs

    def gather_shape_features(self, outputs: Sequence[Tensor], label: Optional[np.ndarray] = None,
                              return_agg: bool = False):
        """Max-pooled concatenation of block outputs, optionally joined with an
        embedded category label, mapped to the shape feature."""
        if not outputs:
            raise ValueError("no block outputs to gather")
        if label is not None and self.label_mlp is None:
            raise ValueError("a label is only accepted by the part segmentation task")
        if label is None and self.label_mlp is not None:
            raise ValueError("part segmentation requires the category label")
        cat = concat(list(outputs), axis=-1) if len(outputs) > 1 else outputs[0]
        f_agg = cat.max(axis=1)
        h = f_agg
        if label is not None:
            lab = Tensor(np.asarray(label, dtype=self.config.np_dtype))
            h = concat([f_agg, self.label_mlp(lab)], axis=-1)
        f_shape = self.shape_mlp(h)
        return (f_shape, f_agg) if return_agg else f_shape

    def head_forward(self, outputs: Sequence[Tensor], f_shape: Tensor) -> Tensor:
        if self.config.task == "classification":
            h = f_shape
        else:
            per_point = concat(list(outputs), axis=-1) if len(outputs) > 1 else outputs[0]
            b, n = per_point.shape[:2]
            g = broadcast_to(unsqueeze(f_shape, 1), (b, n, f_shape.shape[-1]))
            h = concat([g, per_point], axis=-1)
        for layer in self.head:
            h = layer(h)
        return h

    def forward(self, points, category: Optional[Sequence[int]] = None) -> Tensor:
        """``points`` is (B, N, C0) or (N, C0); returns (B, classes) or (B, N, parts) logits."""
        cfg = self.config
        arr = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=cfg.np_dtype)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[-1] != cfg.input_channels:
            raise ValueError(f"model expects {cfg.input_channels} input channels, got {arr.shape[-1]}")
        if cfg.k > arr.shape[1]:
            raise ValueError(f"K={cfg.k} exceeds the number of points N={arr.shape[1]}")
        coords = Tensor(arr[..., :3])
        if self.align is not None:
            coords, _ = self.align(coords)
        x = coords if arr.shape[-1] == 3 else concat([coords, Tensor(arr[..., 3:])], axis=-1)
        outputs, _ = self.backbone_forward(x, coords.data)
        label = None
        if cfg.task == "part_segmentation":
            if category is None:
                raise ValueError("part segmentation requires the category label")
            label = np.eye(cfg.num_classes, dtype=cfg.np_dtype)[np.asarray(category).reshape(-1)]
        elif category is not None and cfg.task == "classification":
            raise ValueError("labels are not an input of the classification task")
        f_shape = self.gather_shape_features(outputs, label)
        return self.head_forward(outputs, f_shape)


def loss(logits: Tensor, targets, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy over clouds (classification) or points (segmentation)."""
    flat = logits if logits.ndim == 2 else reshape(logits, (-1, logits.shape[-1]))
    return cross_entropy(flat, np.asarray(targets).reshape(-1), label_smoothing)


def predict_labels(logits: np.ndarray, categories=None, category_parts=None) -> np.ndarray:
    """Argmax labels; for part segmentation the argmax is restricted to the
    parts of each cloud's category when ``category_parts`` is known."""
    if categories is None or category_parts is None or logits.ndim != 3:
        return logits.argmax(axis=-1)
    out = np.empty(logits.shape[:2], dtype=np.int64)
    for b, cat in enumerate(np.asarray(categories).reshape(-1)):
        parts = np.asarray(category_parts[int(cat)])
        out[b] = parts[logits[b][:, parts].argmax(axis=-1)]
    return out
