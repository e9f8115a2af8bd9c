"""Ablation grid over the five component axes."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .data import Dataset
from .model import GTNet, ModelConfig
from .train import evaluate, fit

log = logging.getLogger(__name__)

# axis -> [(row label, config overrides)], rows in the order of the reference tables
AXES: dict[str, list[tuple[str, dict]]] = {
    "transformer": [
        ("A (LT+GT)", dict(use_local=True, use_global=True)),
        ("B (LT)", dict(use_local=True, use_global=False)),
        ("C (GT)", dict(use_local=False, use_global=True)),
    ],
    "aggregation": [
        ("max+avg", dict(aggregation="add")),
        ("concat (max, avg)", dict(aggregation="concat")),
        ("avg", dict(aggregation="avg")),
        ("max", dict(aggregation="max")),
    ],
    "k": [(str(k), dict(k=k)) for k in (5, 10, 15, 20, 25)],
    "encoding": [
        ("A (without F')", dict(use_feature_encoding=False)),
        ("B (with F')", dict(use_feature_encoding=True)),
    ],
    "residual": [
        ("A (without residual)", dict(use_residual=False)),
        ("B (with residual)", dict(use_residual=True)),
    ],
}


@dataclass
class AblationRow:
    axis: str
    label: str
    settings: dict
    oa: float
    macc: float
    miou: Optional[float]


def parse_axes(spec: Optional[str]) -> list[str]:
    if not spec or spec == "all":
        return list(AXES)
    axes = [a.strip() for a in spec.split(",") if a.strip()]
    bad = [a for a in axes if a not in AXES]
    if bad:
        raise ValueError(f"invalid ablation axis {bad[0]!r}; choose from {sorted(AXES)}")
    return axes


def variant_config(base: ModelConfig, overrides: dict) -> ModelConfig:
    cfg = base.replace(**overrides)
    cfg.validate()
    return cfg


def run_ablation(base: ModelConfig, train_ds: Dataset, test_ds: Dataset, axes: Sequence[str],
                 on_row: Optional[Callable[[AblationRow], None]] = None) -> list[AblationRow]:
    """Train and score every variant from the same seed."""
    rows = []
    n_points = min(it.n for it in train_ds.items + test_ds.items)
    for axis in axes:
        for label, overrides in AXES[axis]:
            cfg = variant_config(base, overrides)
            if cfg.k > n_points:
                raise ValueError(f"K={cfg.k} exceeds the {n_points} points per cloud")
            model = GTNet(cfg)
            fit(model, train_ds)
            rep = evaluate(model, test_ds)
            row = AblationRow(axis, label, overrides, rep.oa, rep.macc, rep.miou)
            log.info("%s %s oa=%.4f macc=%.4f miou=%s", axis, label, rep.oa, rep.macc, rep.miou)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def _pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def format_table(rows: Sequence[AblationRow]) -> str:
    out = []
    for axis in dict.fromkeys(r.axis for r in rows):
        sub = [r for r in rows if r.axis == axis]
        width = max(len(r.label) for r in sub + [AblationRow(axis, "variant", {}, 0, 0, None)])
        out.append(f"[{axis}]")
        out.append(f"{'variant':<{width}}  {'OA(%)':>7}  {'mAcc(%)':>7}  {'mIoU(%)':>7}")
        for r in sub:
            out.append(f"{r.label:<{width}}  {_pct(r.oa):>7}  {_pct(r.macc):>7}  {_pct(r.miou):>7}")
        out.append("")
    return "\n".join(out)


def format_tsv(rows: Sequence[AblationRow]) -> str:
    lines = ["axis\tvariant\toa\tmacc\tmiou"]
    for r in rows:
        miou = "" if r.miou is None else repr(r.miou)
        lines.append(f"{r.axis}\t{r.label}\t{r.oa!r}\t{r.macc!r}\t{miou}")
    return "\n".join(lines) + "\n"
