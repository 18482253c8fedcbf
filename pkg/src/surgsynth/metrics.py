"""Image-set quality metrics and per-class segmentation metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .dataset_io import CROSS, ClassMap
from .errors import InsufficientSamplesError, ValidationError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Distribution distances


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``, with the trace of
    the square root taken from the symmetric form ``S_a^{1/2} S_b S_a^{1/2}``.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError("feature sets must be 2-D with a shared dimension")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InsufficientSamplesError("frechet_distance needs at least 2 samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    mid = root_a @ cov_b @ root_a
    tr_cross = _psd_sqrt_eigs(0.5 * (mid + mid.T)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(d, 0.0)


def _clip_eigs(w: np.ndarray) -> np.ndarray:
    if (w < -1e-6).any():
        log.warning("covariance eigenvalue %.3g below tolerance; clipping", w.min())
    return np.clip(w, 0.0, None)


def _psd_sqrt_eigs(m: np.ndarray) -> np.ndarray:
    return np.sqrt(_clip_eigs(scipy.linalg.eigvalsh(m)))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = scipy.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(_clip_eigs(w))) @ v.T


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, kernel: Callable = polynomial_kernel) -> float:
    """Unbiased U-statistic of MMD^2 for equal-size paired samples (diagonals excluded)."""
    m = x.shape[0]
    if y.shape[0] != m or m < 2:
        raise InsufficientSamplesError("mmd2_unbiased needs two equal-size sets of >= 2 samples")
    kxx, kyy, kxy = kernel(x, x), kernel(y, y), kernel(x, y)
    off = ~np.eye(m, dtype=bool)
    return float((kxx[off].sum() + kyy[off].sum() - kxy[off].sum() - kxy.T[off].sum()) / (m * (m - 1)))


def kid(
    features_a: np.ndarray,
    features_b: np.ndarray,
    subset_size: int = 100,
    n_subsets: int = 50,
    seed: int = 0,
) -> dict:
    """Kernel distance: unbiased polynomial-kernel MMD^2 averaged over random subsets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if min(a.shape[0], b.shape[0]) < subset_size or subset_size < 2:
        raise InsufficientSamplesError(
            f"kid needs >= subset_size={subset_size} samples per set, got {a.shape[0]} and {b.shape[0]}"
        )
    vals = []
    for s in range(n_subsets):
        # one generator state per subset, shared by both sets: equal-size sets
        # get paired indices, so kid(a, a) is exactly zero
        ia = np.random.default_rng([seed, s]).choice(a.shape[0], subset_size, replace=False)
        ib = np.random.default_rng([seed, s]).choice(b.shape[0], subset_size, replace=False)
        vals.append(mmd2_unbiased(a[ia], b[ib]))
    vals = np.asarray(vals)
    return {"mean": float(vals.mean()), "std": float(vals.std()), "subset_size": subset_size, "n_subsets": n_subsets, "seed": seed}


def median_bandwidth(features_a: np.ndarray, features_b: np.ndarray) -> float:
    z = np.concatenate([np.asarray(features_a, np.float64), np.asarray(features_b, np.float64)])
    d = cdist(z, z)
    vals = d[np.triu_indices(len(z), 1)]
    med = float(np.median(vals)) if vals.size else 1.0
    return med if med > 0 else 1.0


def gaussian_mmd(features_a: np.ndarray, features_b: np.ndarray, bandwidth: float | None = None) -> float:
    """Biased MMD^2 with an RBF kernel of width ``bandwidth`` (median heuristic if None)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InsufficientSamplesError("gaussian_mmd needs non-empty sets")
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    if bandwidth <= 0:
        raise ValidationError("bandwidth must be > 0")
    g = 2.0 * bandwidth**2
    kaa = np.exp(-cdist(a, a, "sqeuclidean") / g).mean()
    kbb = np.exp(-cdist(b, b, "sqeuclidean") / g).mean()
    kab = np.exp(-cdist(a, b, "sqeuclidean") / g)
    cross = 0.5 * (kab.mean() + kab.T.mean())
    return float(kaa + kbb - 2.0 * cross)


# ---------------------------------------------------------------------------
# Segmentation metrics


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels with a 4-neighbour outside the mask (frame edge counts as outside)."""
    m = np.asarray(mask).astype(bool)
    inner = ndimage.binary_erosion(m, structure=CROSS, border_value=0)
    return np.argwhere(m & ~inner).astype(np.float64)


def hausdorff_distance(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    pa, pb = boundary_pixels(mask_a), boundary_pixels(mask_b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValidationError("hausdorff distance undefined for an empty mask")
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class SegMetricReport:
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    macro: dict[str, float] = field(default_factory=dict)
    excluded_classes: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "macro": self.macro,
            "excluded_classes": self.excluded_classes,
        }


def _macro(per_class: dict[int, dict[str, float]]) -> dict[str, float]:
    out = {}
    for key in ("dice", "iou", "hausdorff"):
        vals = [v[key] for v in per_class.values() if key in v]
        out[key] = float(np.mean(vals)) if vals else float("nan")
    return out


def seg_metrics(pred: np.ndarray, gt: np.ndarray, class_map: ClassMap) -> SegMetricReport:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in resolution")
    report = SegMetricReport()
    for cid in sorted(class_map.class_ids):
        p, g = pred == cid, gt == cid
        np_, ng = int(p.sum()), int(g.sum())
        if np_ == 0 and ng == 0:
            report.excluded_classes.append({"class_id": cid, "reason": "absent"})
            continue
        inter = int((p & g).sum())
        union = int((p | g).sum())
        entry = {"dice": 2.0 * inter / (np_ + ng), "iou": inter / union}
        if np_ == 0 or ng == 0:
            report.excluded_classes.append({"class_id": cid, "reason": "one-sided-empty", "metric": "hausdorff"})
        else:
            entry["hausdorff"] = hausdorff_distance(p, g)
        report.per_class[cid] = entry
    report.macro = _macro(report.per_class)
    return report


def aggregate_reports(reports: Sequence[SegMetricReport]) -> SegMetricReport:
    """Mean of per-image macros, and per-class means over the images where each value exists."""
    out = SegMetricReport()
    keys = ("dice", "iou", "hausdorff")
    by_class: dict[int, dict[str, list[float]]] = {}
    for r in reports:
        for cid, v in r.per_class.items():
            for k in keys:
                if k in v:
                    by_class.setdefault(cid, {}).setdefault(k, []).append(v[k])
    out.per_class = {cid: {k: float(np.mean(v)) for k, v in d.items()} for cid, d in sorted(by_class.items())}
    for k in keys:
        vals = [r.macro[k] for r in reports if k in r.macro and not np.isnan(r.macro[k])]
        out.macro[k] = float(np.mean(vals)) if vals else float("nan")
    out.macro["n_images"] = len(reports)
    return out


# ---------------------------------------------------------------------------
# Feature extractor (stand-in for pretrained backbones)


class _ConvAE(nn.Module):
    def __init__(self, d: int = 64):
        super().__init__()
        self.enc = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU()),
                nn.Sequential(nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU()),
                nn.Sequential(nn.Conv2d(32, d, 3, stride=2, padding=1), nn.SiLU()),
            ]
        )
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(d, 32, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(16, 3, 4, stride=2, padding=1),
        )

    def layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for block in self.enc:
            x = block(x)
            out.append(x)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dec(self.layers(x)[-1])


def _images_to_tensor(images) -> torch.Tensor:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float() / 127.5 - 1.0


class FeatureExtractor:
    """Deterministic image -> d-vector map (globally pooled encoder features)."""

    def __init__(self, model: _ConvAE, descriptor: str, init_loss: float = float("nan"), final_loss: float = float("nan")):
        self.model = model.eval()
        self.descriptor = descriptor
        self.init_loss = init_loss
        self.final_loss = final_loss

    @property
    def dim(self) -> int:
        return self.model.enc[-1][0].out_channels

    @torch.no_grad()
    def __call__(self, images, batch: int = 256) -> np.ndarray:
        x = _images_to_tensor(images)
        feats = [self.model.layers(x[i : i + batch])[-1].mean(dim=(2, 3)) for i in range(0, len(x), batch)]
        return torch.cat(feats).double().numpy() if feats else np.zeros((0, self.dim))

    @torch.no_grad()
    def intermediate(self, images) -> list[torch.Tensor]:
        return self.model.layers(_images_to_tensor(images))

    @torch.no_grad()
    def reconstruction_loss(self, images) -> float:
        x = _images_to_tensor(images)
        return float(F.mse_loss(self.model(x), x))


def toy_feature_extractor(
    train_images, seed: int = 0, steps: int = 600, batch: int = 32, lr: float = 2e-3, d: int = 64
) -> FeatureExtractor:
    """Train a small convolutional autoencoder; its pooled encoder output is the feature."""
    imgs = np.asarray(train_images)
    if len(imgs) < 100:
        raise InsufficientSamplesError(f"toy_feature_extractor needs >= 100 images, got {len(imgs)}")
    x_all = _images_to_tensor(imgs)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = _ConvAE(d)
    with torch.no_grad():
        init_loss = float(F.mse_loss(model(x_all[:256]), x_all[:256]))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.integers(0, len(x_all), size=batch)
        x = x_all[idx]
        loss = F.mse_loss(model(x), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        final_loss = float(F.mse_loss(model(x_all[:256]), x_all[:256]))
    for p in model.parameters():
        p.requires_grad_(False)
    return FeatureExtractor(model, f"toy_conv_ae(d={d},steps={steps},seed={seed},n={len(imgs)})", init_loss, final_loss)


# ---------------------------------------------------------------------------
# Perceptual distance slot


class PerceptualMetric(Protocol):
    descriptor: str

    def __call__(self, images_a, images_b) -> np.ndarray: ...


class FeatureLPIPS:
    """Perceptual distance from unit-normalised intermediate features of an extractor.

    Per layer: channel-normalise, squared difference, spatial mean; summed over layers.
    """

    def __init__(self, extractor: FeatureExtractor):
        self.extractor = extractor
        self.descriptor = f"feature_lpips[{extractor.descriptor}]"

    def __call__(self, images_a, images_b) -> np.ndarray:
        fa, fb = self.extractor.intermediate(images_a), self.extractor.intermediate(images_b)
        total = 0.0
        for a, b in zip(fa, fb):
            a = a / (a.norm(dim=1, keepdim=True) + 1e-10)
            b = b / (b.norm(dim=1, keepdim=True) + 1e-10)
            total = total + ((a - b) ** 2).sum(1).mean(dim=(1, 2))
        return total.double().numpy()


def quality_report(
    real_images,
    generated_images,
    extractor: FeatureExtractor,
    *,
    kid_subset_size: int = 50,
    kid_subsets: int = 50,
    seed: int = 0,
    perceptual: PerceptualMetric | None = None,
    bandwidth: float | None = None,
) -> dict:
    """All image-set metrics for one (real, generated) comparison, with their parameters."""
    fr, fg = extractor(real_images), extractor(generated_images)
    m = min(len(fr), len(fg), kid_subset_size)
    bw = median_bandwidth(fr, fg) if bandwidth is None else bandwidth
    perceptual = perceptual or FeatureLPIPS(extractor)
    n = min(len(real_images), len(generated_images))
    lp = perceptual(np.asarray(real_images)[:n], np.asarray(generated_images)[:n])
    return {
        "extractor": extractor.descriptor,
        "n_real": int(len(fr)),
        "n_generated": int(len(fg)),
        "frechet": frechet_distance(fr, fg),
        "kid": kid(fr, fg, subset_size=m, n_subsets=kid_subsets, seed=seed),
        "cmmd": {"value": gaussian_mmd(fr, fg, bw), "bandwidth": bw, "bandwidth_rule": "median" if bandwidth is None else "fixed"},
        "lpips": {"mean": float(lp.mean()), "std": float(lp.std()), "metric": perceptual.descriptor, "pairing": "index"},
        "seed": seed,
    }


def write_report(path: str | Path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, SegMetricReport):
        return o.to_dict()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o)}")
