"""Downstream segmentation protocol: training schemes, augmentation, evaluation, tables."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .dataset_io import ClassMap, SampleRecord
from .diffusion import checkpoint as ckpt
from .diffusion.core import step_seed
from .errors import ValidationError
from .metrics import SegMetricReport, aggregate_reports, seg_metrics

log = logging.getLogger(__name__)

SCHEME_KINDS = (
    "real_noaug",
    "real_coloraug",
    "real_fullaug",
    "syn_only",
    "syn_plus_real",
    "syn_pretrain_finetune_real",
)
GEOMETRIES = ("none", "hflip", "vflip", "rot90", "rot180", "rot270", "elastic")


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugParams:
    brightness: float = 0.0  # additive, 0..255 units
    contrast: float = 1.0
    hue: float = 0.0  # radians of rotation about the grey axis
    geometry: str = "none"
    elastic_alpha: float = 0.0
    elastic_sigma: float = 3.0
    elastic_seed: int = 0

    @property
    def color_identity(self) -> bool:
        return self.brightness == 0.0 and self.contrast == 1.0 and self.hue == 0.0


def draw_aug_params(kind: str, seed: int) -> AugParams:
    if kind not in ("color", "color_spatial"):
        raise ValidationError(f"unknown augmentation kind {kind!r}")
    rng = np.random.default_rng(seed)
    color = dict(
        brightness=float(rng.uniform(-20, 20)),
        contrast=float(rng.uniform(0.8, 1.2)),
        hue=float(rng.uniform(-0.15, 0.15)),
    )
    if kind == "color":
        return AugParams(**color)
    geom = GEOMETRIES[int(rng.integers(1, len(GEOMETRIES)))]
    return AugParams(**color, geometry=geom, elastic_alpha=float(rng.uniform(20, 40)), elastic_seed=int(rng.integers(2**31)))


def _hue_matrix(theta: float) -> np.ndarray:
    """RGB rotation by ``theta`` about the (1,1,1) axis."""
    c, s = np.cos(theta), np.sin(theta)
    k = 1.0 / 3.0
    r = np.sqrt(k)
    return np.array(
        [
            [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
            [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
            [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
        ]
    )


def _color(image: np.ndarray, p: AugParams) -> np.ndarray:
    x = image.astype(np.float64)
    if p.hue != 0.0:
        x = x @ _hue_matrix(p.hue).T
    mean = x.mean()
    x = (x - mean) * p.contrast + mean + p.brightness
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _elastic_coords(shape: tuple[int, int], p: AugParams) -> np.ndarray:
    rng = np.random.default_rng(p.elastic_seed)
    h, w = shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), p.elastic_sigma) * p.elastic_alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), p.elastic_sigma) * p.elastic_alpha
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([yy + dy, xx + dx])


def _geometry(arr: np.ndarray, p: AugParams, order: int) -> np.ndarray:
    g = p.geometry
    if g == "none":
        return arr.copy()
    if g == "hflip":
        return arr[:, ::-1].copy()
    if g == "vflip":
        return arr[::-1].copy()
    if g.startswith("rot"):
        return np.rot90(arr, int(g[3:]) // 90, axes=(0, 1)).copy()
    if g == "elastic":
        coords = _elastic_coords(arr.shape[:2], p)
        if arr.ndim == 2:
            return ndimage.map_coordinates(arr, coords, order=order, mode="reflect")
        chans = [ndimage.map_coordinates(arr[..., c].astype(np.float64), coords, order=order, mode="reflect") for c in range(arr.shape[2])]
        return np.clip(np.rint(np.stack(chans, -1)), 0, 255).astype(arr.dtype)
    raise ValidationError(f"unknown geometry {g!r}")


def apply_augmentation(sample: SampleRecord, params: AugParams) -> SampleRecord:
    image = sample.image if params.color_identity else _color(sample.image, params)
    label = sample.label_map
    if params.geometry != "none":
        image = _geometry(image, params, order=1)
        label = _geometry(label, params, order=0)
    return SampleRecord(image=image.copy(), label_map=label.copy(), split=sample.split, id=sample.id)


def augment(sample: SampleRecord, kind: str, seed: int) -> SampleRecord:
    """Seeded colour jitter (``color``) or jitter plus one geometric op (``color_spatial``).

    Geometric ops move image and labels identically; labels use
    nearest-neighbour sampling.
    """
    return apply_augmentation(sample, draw_aug_params(kind, seed))


# ---------------------------------------------------------------------------
# Model


class SegNet(nn.Module):
    def __init__(self, n_labels: int, width: int = 16):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
            )

        self.descriptor = {"arch": "segnet", "n_labels": n_labels, "width": width}
        self.e1 = block(3, width)
        self.e2 = block(width, 2 * width)
        self.mid = block(2 * width, 2 * width)
        self.d2 = block(4 * width, width)
        self.d1 = block(2 * width, width)
        self.head = nn.Conv2d(width, n_labels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h1 = self.e1(x)
        h2 = self.e2(F.max_pool2d(h1, 2))
        m = self.mid(F.max_pool2d(h2, 2))
        u2 = self.d2(torch.cat([F.interpolate(m, scale_factor=2, mode="nearest"), h2], 1))
        u1 = self.d1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], 1))
        return self.head(u1)


def _to_input(images: np.ndarray) -> torch.Tensor:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float() / 127.5 - 1.0


@dataclass
class Segmenter:
    net: SegNet
    class_map: ClassMap
    labels: list[int]  # output channel -> class id
    header: dict = field(default_factory=dict)

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        self.net.eval()
        x = _to_input(images)
        out = []
        for i in range(0, len(x), batch):
            out.append(self.net(x[i : i + batch]).argmax(1).numpy())
        idx = np.concatenate(out)
        return np.asarray(self.labels, dtype=np.uint8)[idx]

    def checksum(self) -> str:
        return ckpt.state_sha256(self.net.state_dict())

    def save(self, path: str | Path) -> Path:
        header = {"kind": "segmenter", "architecture": self.net.descriptor, "labels": self.labels, **self.header}
        return ckpt.save_checkpoint(path, header, self.net.state_dict())

    @classmethod
    def load(cls, path: str | Path, class_map: ClassMap) -> "Segmenter":
        header, state = ckpt.load_checkpoint(path)
        desc = header["architecture"]
        net = SegNet(desc["n_labels"], desc["width"])
        net.load_state_dict(state)
        net.eval()
        return cls(net, class_map, list(header["labels"]), {k: v for k, v in header.items() if k not in ("tensors",)})


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainingScheme:
    kind: str
    datasets: Mapping[str, Sequence[SampleRecord]]
    steps: int = 2000
    finetune_steps: int = 1000
    seed: int = 0
    batch: int = 16
    lr: float = 2e-3
    width: int = 16
    name: str = ""

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValidationError(f"unknown scheme kind {self.kind!r}")
        needs = {"real"} if self.kind.startswith("real") else {"syn"}
        if self.kind in ("syn_plus_real", "syn_pretrain_finetune_real"):
            needs = {"syn", "real"}
        missing = needs - set(self.datasets)
        if missing:
            raise ValidationError(f"scheme {self.kind} needs datasets {sorted(missing)}")
        for k in needs:
            if not self.datasets[k]:
                raise ValidationError(f"scheme {self.kind}: dataset {k!r} is empty")
        if not self.name:
            self.name = self.kind

    @property
    def augmentation(self) -> str | None:
        return {"real_coloraug": "color", "real_fullaug": "color_spatial"}.get(self.kind)


def _present_classes(records: Sequence[SampleRecord], class_map: ClassMap) -> set[int]:
    present: set[int] = set()
    for r in records:
        present |= set(np.unique(r.label_map).tolist())
    return present - {class_map.background_id}


def check_class_sets(datasets: Mapping[str, Sequence[SampleRecord]], class_map: ClassMap) -> None:
    sets = {name: _present_classes(recs, class_map) for name, recs in datasets.items() if recs}
    ref = set(class_map.class_ids)
    for name, s in sets.items():
        if s - ref:
            raise ValidationError(f"dataset {name!r} has labels {sorted(s - ref)} outside the class map")
    if len({frozenset(s) for s in sets.values()}) > 1:
        detail = ", ".join(f"{n}={sorted(s)}" for n, s in sets.items())
        raise ValidationError(f"datasets disagree on their class sets: {detail}")


def _fit(net: SegNet, records: Sequence[SampleRecord], steps: int, scheme: TrainingScheme, lut: np.ndarray, salt: int) -> list[float]:
    images = np.stack([r.image for r in records])
    labels = lut[np.stack([r.label_map for r in records])]
    x_all = _to_input(images)
    y_all = torch.from_numpy(labels.astype(np.int64))
    opt = torch.optim.Adam(net.parameters(), lr=scheme.lr)
    aug = scheme.augmentation
    losses = []
    net.train()
    for step in range(steps):
        rng = np.random.default_rng(step_seed(scheme.seed, step, salt))
        idx = rng.integers(0, len(records), size=scheme.batch)
        if aug is None:
            x, y = x_all[idx], y_all[idx]
        else:
            augd = [augment(records[i], aug, step_seed(scheme.seed, step, salt * 1000 + j)) for j, i in enumerate(idx)]
            x = _to_input(np.stack([a.image for a in augd]))
            y = torch.from_numpy(lut[np.stack([a.label_map for a in augd])].astype(np.int64))
        loss = F.cross_entropy(net(x), y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    net.eval()
    return losses


def train_segmenter(scheme: TrainingScheme, class_map: ClassMap) -> Segmenter:
    """Train a small encoder-decoder pixel classifier according to ``scheme``.

    ``syn_plus_real`` concatenates the two sets with uniform sampling;
    ``syn_pretrain_finetune_real`` trains on synthetic data and then
    continues on the real set for ``finetune_steps``.
    """
    check_class_sets(scheme.datasets, class_map)
    labels = [class_map.background_id, *sorted(class_map.class_ids)]
    lut = np.zeros(256, dtype=np.int64)
    for i, lab in enumerate(labels):
        lut[lab] = i
    with torch.random.fork_rng():
        torch.manual_seed(scheme.seed)
        net = SegNet(len(labels), scheme.width)
    real = list(scheme.datasets.get("real", []))
    syn = list(scheme.datasets.get("syn", []))
    if scheme.kind.startswith("real"):
        losses = _fit(net, real, scheme.steps, scheme, lut, 31)
    elif scheme.kind == "syn_only":
        losses = _fit(net, syn, scheme.steps, scheme, lut, 32)
    elif scheme.kind == "syn_plus_real":
        losses = _fit(net, syn + real, scheme.steps, scheme, lut, 33)
    else:
        losses = _fit(net, syn, scheme.steps, scheme, lut, 34)
        losses += _fit(net, real, scheme.finetune_steps, scheme, lut, 35)
    header = {
        "scheme": scheme.kind,
        "name": scheme.name,
        "seed": scheme.seed,
        "steps": scheme.steps,
        "finetune_steps": scheme.finetune_steps if scheme.kind == "syn_pretrain_finetune_real" else 0,
        "dataset_sizes": {k: len(v) for k, v in sorted(scheme.datasets.items())},
        "final_loss": float(np.mean(losses[-50:])) if losses else None,
    }
    return Segmenter(net, class_map, labels, header)


def evaluate_segmenter(model, test_dataset: Sequence[SampleRecord], class_map: ClassMap | None = None) -> SegMetricReport:
    """Per-image ``seg_metrics`` on argmax predictions, aggregated by macro mean.

    ``model`` is anything with ``predict(images) -> label maps``.
    """
    class_map = class_map or model.class_map
    if not test_dataset:
        raise ValidationError("empty test set")
    preds = model.predict(np.stack([r.image for r in test_dataset]))
    reports = [seg_metrics(p, r.label_map, class_map) for p, r in zip(preds, test_dataset)]
    return aggregate_reports(reports)


# ---------------------------------------------------------------------------
# Comparison tables


def comparison_rows(results: Mapping[str, Sequence[SegMetricReport]]) -> list[dict]:
    """One row per scheme: mean and std over runs of macro Dice / IoU / Hausdorff."""
    rows = []
    for name, reports in results.items():
        row = {"scheme": name, "runs": len(reports)}
        for key in ("dice", "iou", "hausdorff"):
            vals = np.array([r.macro[key] for r in reports], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            row[f"{key}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            row[f"{key}_std"] = float(vals.std()) if len(vals) else float("nan")
        rows.append(row)
    return rows


def comparison_table_text(rows: Sequence[dict]) -> str:
    head = f"{'Training scheme':<30} {'Dice':>14} {'IOU':>14} {'HD':>16}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['scheme']:<30} "
            f"{r['dice_mean']:>7.3f}±{r['dice_std']:<6.3f} "
            f"{r['iou_mean']:>7.3f}±{r['iou_std']:<6.3f} "
            f"{r['hausdorff_mean']:>8.2f}±{r['hausdorff_std']:.2f}"
        )
    return "\n".join(lines) + "\n"


def comparison_table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    fields = ["scheme", "runs"] + [f"{k}_{s}" for k in ("dice", "iou", "hausdorff") for s in ("mean", "std")]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in fields})
    return buf.getvalue()
