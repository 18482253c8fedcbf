"""Dataset ingestion: class registry, image/label records, mask splitting,
soft-edge extraction, prompt templates and the procedural toy dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import RegistryLookupError, ValidationError

SPLITS = ("train", "test", "val")

# 3x3 cross structuring element for the morphological gradient.
CROSS = ndimage.generate_binary_structure(2, 1)

# Organ vocabulary for the toy dataset, ordered as in the cholec training table.
TOY_ORGANS = ("abdominal wall", "liver", "gall bladder", "fat", "ligament", "gastrointestinal tract")

# Base colours, pairwise separated by >= 60/255 in at least one channel.
TOY_BASE_COLORS = np.array(
    [
        [205, 120, 110],  # abdominal wall: pale pink
        [120, 35, 35],  # liver: dark red-brown
        [70, 150, 80],  # gall bladder: green
        [230, 210, 90],  # fat: yellow
        [235, 235, 225],  # ligament: white
        [170, 90, 180],  # gi tract: purple
    ],
    dtype=np.float64,
)
TOY_BACKGROUND_COLOR = np.array([60, 40, 45], dtype=np.float64)


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    rgb: tuple[int, int, int]
    prompt_noun: str
    z_order: int


@dataclass(frozen=True)
class ClassMap:
    entries: tuple[ClassEntry, ...]
    background_id: int = 0
    dataset_name: str = "toy"

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate class ids in class map: {ids}")
        if any(i == 0 for i in ids) and self.background_id != 0:
            raise ValidationError("class id 0 is reserved")
        if any(i < 1 for i in ids):
            raise ValidationError(f"class ids must be >= 1, got {ids}")
        if self.background_id in ids:
            raise ValidationError(f"background id {self.background_id} collides with a class id")
        z = [e.z_order for e in self.entries]
        if len(set(z)) != len(z):
            raise ValidationError(f"z_order values must be unique, got {z}")

    @property
    def class_ids(self) -> list[int]:
        return [e.class_id for e in self.entries]

    @property
    def valid_labels(self) -> set[int]:
        return {self.background_id, *self.class_ids}

    def entry(self, class_id: int) -> ClassEntry:
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise RegistryLookupError(f"class id {class_id} not in class map")

    def palette(self) -> np.ndarray:
        """256x3 uint8 lookup table mapping label values to display colours."""
        lut = np.zeros((256, 3), dtype=np.uint8)
        for e in self.entries:
            lut[e.class_id] = e.rgb
        return lut

    def to_dict(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "background_id": self.background_id,
            "entries": [
                {
                    "class_id": e.class_id,
                    "name": e.name,
                    "rgb": list(e.rgb),
                    "prompt_noun": e.prompt_noun,
                    "z_order": e.z_order,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMap":
        try:
            entries = tuple(
                ClassEntry(
                    class_id=int(e["class_id"]),
                    name=str(e["name"]),
                    rgb=tuple(int(c) for c in e["rgb"]),
                    prompt_noun=str(e.get("prompt_noun", e["name"])),
                    z_order=int(e["z_order"]),
                )
                for e in d["entries"]
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed class map: {exc}") from exc
        return cls(entries, int(d.get("background_id", 0)), str(d.get("dataset_name", "")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ClassMap":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"class map not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


@dataclass
class SampleRecord:
    image: np.ndarray  # H x W x 3 uint8
    label_map: np.ndarray  # H x W integer class ids
    split: str = "train"
    id: str = ""

    def validate(self, class_map: ClassMap) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ValidationError(f"record {self.id}: image must be HxWx3 uint8")
        if self.label_map.shape != self.image.shape[:2]:
            raise ValidationError(
                f"record {self.id}: label map {self.label_map.shape} vs image {self.image.shape[:2]}"
            )
        if self.split not in SPLITS:
            raise ValidationError(f"record {self.id}: unknown split {self.split!r}")
        bad = sorted(set(np.unique(self.label_map).tolist()) - class_map.valid_labels)
        if bad:
            raise ValidationError(f"record {self.id}: label value {bad[0]} not in class map")


@dataclass
class BinaryMask:
    class_id: int
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or not np.isin(m, (0, 1)).all():
            raise ValidationError("mask must be a 2-D array of exactly 0/1 values")
        self.mask = m.astype(np.uint8)


@dataclass
class EdgeImage:
    class_id: int
    edges: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# PNG helpers


def read_rgb(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_label_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValidationError(f"{path}: label map must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def write_rgb(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, optimize=False)


def write_label_map(path: str | Path, label_map: np.ndarray, class_map: ClassMap | None = None) -> None:
    im = Image.fromarray(np.ascontiguousarray(label_map, dtype=np.uint8), mode="P")
    palette = class_map.palette() if class_map is not None else np.zeros((256, 3), np.uint8)
    im.putpalette(palette.reshape(-1).tolist())
    im.save(path, optimize=False)


# ---------------------------------------------------------------------------
# Operations


def load_dataset(manifest_path: str | Path, class_map: ClassMap) -> list[SampleRecord]:
    """Load records listed in a JSON-lines manifest.

    Each line holds ``{"image", "mask", "split", "id"}``; relative paths are
    resolved against the manifest's directory. Order follows the manifest.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    records = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            image_path, mask_path = entry["image"], entry["mask"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"{manifest_path}:{lineno}: malformed record ({exc})") from exc
        rec = SampleRecord(
            image=read_rgb(root / image_path),
            label_map=read_label_map(root / mask_path),
            split=entry.get("split", "train"),
            id=str(entry.get("id", lineno)),
        )
        rec.validate(class_map)
        records.append(rec)
    return records


def save_dataset(
    records: Sequence[SampleRecord], out_dir: str | Path, class_map: ClassMap, manifest_name: str = "manifest.jsonl"
) -> Path:
    """Write records as PNG pairs plus a JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        img_rel = f"images/{rec.id}.png"
        mask_rel = f"masks/{rec.id}.png"
        write_rgb(out_dir / img_rel, rec.image)
        write_label_map(out_dir / mask_rel, rec.label_map, class_map)
        lines.append(json.dumps({"image": img_rel, "mask": mask_rel, "split": rec.split, "id": rec.id}))
    manifest = out_dir / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    class_map.save(out_dir / "class_map.json")
    return manifest


def split_label_map(label_map: np.ndarray, class_map: ClassMap) -> list[BinaryMask]:
    present = set(np.unique(label_map).tolist())
    bad = present - class_map.valid_labels
    if bad:
        raise ValidationError(f"label value {min(bad)} not in class map")
    return [
        BinaryMask(cid, (label_map == cid).astype(np.uint8))
        for cid in sorted(class_map.class_ids)
        if cid in present
    ]


def reconstruct_label_map(masks: Iterable[BinaryMask], shape: tuple[int, int], background_id: int = 0) -> np.ndarray:
    out = np.full(shape, background_id, dtype=np.uint8)
    for m in masks:
        out[m.mask.astype(bool)] = m.class_id
    return out


def hard_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels where the 3x3-cross dilation differs from the erosion.

    The frame border counts as outside the mask.
    """
    m = np.asarray(mask).astype(bool)
    dil = ndimage.binary_dilation(m, structure=CROSS)
    ero = ndimage.binary_erosion(m, structure=CROSS, border_value=0)
    return dil & ~ero


def extract_soft_edges(mask: BinaryMask, blur_sigma: float = 1.0) -> EdgeImage:
    if blur_sigma < 0:
        raise ValidationError(f"blur_sigma must be >= 0, got {blur_sigma}")
    b = hard_boundary(mask.mask).astype(np.float64)
    if not b.any() or blur_sigma == 0:
        return EdgeImage(mask.class_id, b)
    e = ndimage.gaussian_filter(b, blur_sigma, mode="constant", cval=0.0, truncate=4.0)
    # separable kernel support is square; cut to the Euclidean 4*sigma ball
    e[ndimage.distance_transform_edt(b == 0) > 4.0 * blur_sigma] = 0.0
    e /= e.max()
    return EdgeImage(mask.class_id, np.clip(e, 0.0, 1.0))


def make_prompt(class_id: int | None, class_map: ClassMap, template_kind: str = "organ") -> str:
    if template_kind == "scene":
        return f"an image in {class_map.dataset_name}"
    if template_kind != "organ":
        raise ValidationError(f"unknown template kind {template_kind!r}")
    noun = class_map.entry(class_id).prompt_noun
    return f"an image of {noun} in {class_map.dataset_name}"


# ---------------------------------------------------------------------------
# Toy dataset


@dataclass(frozen=True)
class ToyConfig:
    n_samples: int = 100
    image_size: int = 32
    n_classes: int = 3
    texture_noise: float = 12.0  # per-pixel noise std in 0..255 units
    stripe_amplitude: float = 14.0
    brightness_jitter: float = 8.0
    min_radius_frac: float = 0.14
    max_radius_frac: float = 0.26
    test_fraction: float = 0.0
    dataset_name: str = "toy"

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValidationError(f"image_size must be >= 16, got {self.image_size}")
        if not 2 <= self.n_classes <= 6:
            raise ValidationError(f"n_classes must be in [2, 6], got {self.n_classes}")
        if self.n_samples < 0:
            raise ValidationError("n_samples must be >= 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValidationError("test_fraction must be in [0, 1)")


def toy_class_map(n_classes: int = 3, dataset_name: str = "toy") -> ClassMap:
    if not 2 <= n_classes <= 6:
        raise ValidationError(f"n_classes must be in [2, 6], got {n_classes}")
    entries = tuple(
        ClassEntry(
            class_id=i + 1,
            name=TOY_ORGANS[i],
            rgb=tuple(int(c) for c in TOY_BASE_COLORS[i]),
            prompt_noun=TOY_ORGANS[i],
            z_order=i + 1,
        )
        for i in range(n_classes)
    )
    return ClassMap(entries, 0, dataset_name)


def _texture(rng: np.random.Generator, size: int, base: np.ndarray, k: int, cfg: ToyConfig) -> np.ndarray:
    """Class texture: base colour, class-specific stripe orientation/frequency, pixel noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = np.pi * k / 6.0
    freq = 2 * np.pi / (3.0 + k)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    shift = rng.normal(0.0, cfg.brightness_jitter)
    tex = base[None, None, :] + shift + cfg.stripe_amplitude * stripes[..., None]
    tex += rng.normal(0.0, cfg.texture_noise, size=(size, size, 3))
    return tex


def _random_blob(rng: np.random.Generator, size: int, cfg: ToyConfig, occupied: np.ndarray) -> np.ndarray | None:
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(50):
        ry = rng.uniform(cfg.min_radius_frac, cfg.max_radius_frac) * size
        rx = rng.uniform(cfg.min_radius_frac, cfg.max_radius_frac) * size
        cy = rng.uniform(ry * 0.6, size - ry * 0.6)
        cx = rng.uniform(rx * 0.6, size - rx * 0.6)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        blob = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        # one-pixel gap keeps blobs from touching
        if blob.sum() >= 9 and not (ndimage.binary_dilation(blob, CROSS) & occupied).any():
            return blob
    return None


def generate_toy_dataset(config: ToyConfig, seed: int) -> tuple[list[SampleRecord], ClassMap]:
    """Procedural stand-in for a surgical dataset.

    Every sample draws a random non-empty subset of classes and places one
    non-overlapping elliptical blob per class over a textured background.
    Deterministic in ``(config, seed)``.
    """
    config.validate()
    class_map = toy_class_map(config.n_classes, config.dataset_name)
    rng = np.random.default_rng(seed)
    size = config.image_size
    n_test = int(round(config.n_samples * config.test_fraction))
    records = []
    for i in range(config.n_samples):
        image = _texture(rng, size, TOY_BACKGROUND_COLOR, 7, config)
        label = np.zeros((size, size), dtype=np.uint8)
        n_present = int(rng.integers(1, config.n_classes + 1))
        classes = np.sort(rng.choice(config.n_classes, size=n_present, replace=False))
        for k in classes:
            blob = _random_blob(rng, size, config, label > 0)
            if blob is None:
                continue
            tex = _texture(rng, size, TOY_BASE_COLORS[k], k, config)
            image[blob] = tex[blob]
            label[blob] = k + 1
        split = "test" if i >= config.n_samples - n_test else "train"
        records.append(
            SampleRecord(
                image=np.clip(np.rint(image), 0, 255).astype(np.uint8),
                label_map=label,
                split=split,
                id=f"toy_{i:05d}",
            )
        )
    return records, class_map


def class_mean_colors(records: Sequence[SampleRecord], class_map: ClassMap) -> dict[int, np.ndarray]:
    """Mean RGB (0..255) over all pixels of each label, background included."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for rec in records:
        for lab in np.unique(rec.label_map):
            sel = rec.label_map == lab
            sums[int(lab)] = sums.get(int(lab), 0) + rec.image[sel].astype(np.float64).sum(0)
            counts[int(lab)] = counts.get(int(lab), 0) + int(sel.sum())
    return {k: sums[k] / counts[k] for k in sorted(sums)}
