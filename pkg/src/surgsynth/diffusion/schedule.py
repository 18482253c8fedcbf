from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process tables. ``alpha_bars[t]`` is the signal retention at step t."""

    betas: np.ndarray
    kind: str = "custom"
    beta_start: float | None = None
    beta_end: float | None = None
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return len(self.betas)

    def validate(self) -> None:
        ab = self.alpha_bars
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValidationError("betas must lie in (0, 1)")
        if not (0 < ab[0] < 1) or not (np.diff(ab) < 0).all():
            raise ValidationError("alpha_bars must start in (0, 1) and decrease strictly")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "T": self.T}
        if self.kind == "linear":
            d.update(beta_start=self.beta_start, beta_end=self.beta_end)
        elif self.kind != "cosine":
            d["betas"] = self.betas.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d["kind"] in ("linear", "cosine"):
            return build_schedule(d["kind"], d["T"], d.get("beta_start", 1e-4), d.get("beta_end", 0.02))
        return cls(np.asarray(d["betas"]))

    @classmethod
    def from_alpha_bars(cls, alpha_bars) -> "NoiseSchedule":
        """Unvalidated schedule reproducing the given cumulative products (test helper)."""
        ab = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.concatenate([[1.0], ab[:-1]])
        return cls(1.0 - ab / prev)


def build_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValidationError(f"T must be an integer >= 2, got {T}")
    T = int(T)
    if kind == "linear":
        if not (0 < beta_start <= beta_end < 1):
            raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        if beta_start == beta_end:
            betas = np.full(T, beta_start, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    sched = NoiseSchedule(betas, kind=kind, beta_start=beta_start, beta_end=beta_end)
    sched.validate()
    return sched
