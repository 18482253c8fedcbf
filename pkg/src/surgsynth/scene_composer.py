"""Cut generated organs out by their masks and fuse them into one labelled scene."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset_io import BinaryMask, ClassMap, write_label_map, write_rgb
from .errors import ValidationError

BACKGROUND_SOURCES = ("source_image", "background_render")


@dataclass
class OrganRender:
    class_id: int
    image: np.ndarray  # H x W x 3 uint8
    mask: BinaryMask
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.mask.shape:
            raise ValidationError(f"render for class {self.class_id}: image and mask resolutions differ")


@dataclass
class CompositeScene:
    image: np.ndarray
    label_map: np.ndarray
    provenance: list[dict] = field(default_factory=list)
    background_source: str = "source_image"
    id: str = ""

    def save(self, out_dir: str | Path, class_map: ClassMap, suffix: str = "") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"{self.id}{suffix}"
        paths = {
            "image": out_dir / f"{stem}.png",
            "label_map": out_dir / f"{stem}_label.png",
            "provenance": out_dir / f"{stem}.json",
        }
        write_rgb(paths["image"], self.image)
        write_label_map(paths["label_map"], self.label_map, class_map)
        sidecar = {"id": self.id, "background_source": self.background_source, "renders": self.provenance}
        paths["provenance"].write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return paths


def compose(
    renders: Sequence[OrganRender],
    background: np.ndarray,
    class_map: ClassMap,
    background_source: str = "source_image",
    scene_id: str = "",
) -> CompositeScene:
    """Per pixel, take the highest-z_order render whose mask covers it.

    Uncovered pixels keep the background and the background label. Pixels
    are copied verbatim; there is no blending at seams.
    """
    if background_source not in BACKGROUND_SOURCES:
        raise ValidationError(f"unknown background source {background_source!r}")
    background = np.asarray(background)
    ids = [r.class_id for r in renders]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate class ids among renders: {ids}")
    hw = background.shape[:2]
    for r in renders:
        if r.image.shape != background.shape:
            raise ValidationError(f"render for class {r.class_id} is {r.image.shape}, background {background.shape}")
    image = background.copy()
    label = np.full(hw, class_map.background_id, dtype=np.uint8)
    # paint lowest z first so higher z overwrites
    for r in sorted(renders, key=lambda r: class_map.entry(r.class_id).z_order):
        sel = r.mask.mask.astype(bool)
        image[sel] = r.image[sel]
        label[sel] = r.class_id
    return CompositeScene(
        image=image,
        label_map=label,
        provenance=[dict(r.provenance, class_id=r.class_id) for r in sorted(renders, key=lambda r: r.class_id)],
        background_source=background_source,
        id=scene_id,
    )


def validate_scene_masks(masks: Sequence[BinaryMask], frame: tuple[int, int]) -> dict:
    """Coverage, overlap and per-class area statistics for a set of masks."""
    total = frame[0] * frame[1]
    if not masks:
        return {"coverage_fraction": 0.0, "overlap_pixel_count": 0, "per_class_area": {}}
    for m in masks:
        if m.mask.shape != tuple(frame):
            raise ValidationError(f"mask for class {m.class_id} is {m.mask.shape}, frame {frame}")
    counts = np.sum([m.mask.astype(np.int64) for m in masks], axis=0)
    area: dict[int, int] = {}
    for m in masks:
        area[m.class_id] = area.get(m.class_id, 0) + int(m.mask.sum())
    return {
        "coverage_fraction": float((counts > 0).sum() / total),
        "overlap_pixel_count": int((counts > 1).sum()),
        "per_class_area": area,
    }
