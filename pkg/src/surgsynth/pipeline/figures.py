"""Qualitative panels: one row per scene, columns real / mask / composite / refined."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from ..dataset_io import ClassMap, write_rgb
from ..errors import ValidationError
from ..scene_composer import CompositeScene


def colorize(label_map: np.ndarray, class_map: ClassMap) -> np.ndarray:
    return class_map.palette()[label_map]


def figure_grid(
    scenes: Sequence[CompositeScene],
    class_map: ClassMap,
    real_refs: Sequence[np.ndarray] | None = None,
    refined: Sequence[CompositeScene] | None = None,
) -> np.ndarray:
    """Tile array without gaps; each tile is one full-resolution image."""
    if not scenes:
        raise ValidationError("figure grid needs at least one scene")
    shape = scenes[0].image.shape
    columns: list[list[np.ndarray]] = []
    if real_refs is not None:
        if len(real_refs) != len(scenes):
            raise ValidationError("need one real reference per scene")
        columns.append([np.asarray(r) for r in real_refs])
    columns.append([colorize(s.label_map, class_map) for s in scenes])
    columns.append([s.image for s in scenes])
    if refined is not None:
        if len(refined) != len(scenes):
            raise ValidationError("need one refined scene per scene")
        columns.append([s.image for s in refined])
    for col in columns:
        for img in col:
            if img.shape != shape:
                raise ValidationError(f"mixed resolutions in figure grid: {img.shape} vs {shape}")
    rows = [np.concatenate([col[i] for col in columns], axis=1) for i in range(len(scenes))]
    return np.concatenate(rows, axis=0).astype(np.uint8)


def emit_figure_grid(
    scenes: Sequence[CompositeScene],
    out_path: str | Path,
    class_map: ClassMap,
    real_refs: Sequence[np.ndarray] | None = None,
    refined: Sequence[CompositeScene] | None = None,
) -> Path:
    grid = figure_grid(scenes, class_map, real_refs, refined)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_rgb(out_path, grid)
    return out_path
