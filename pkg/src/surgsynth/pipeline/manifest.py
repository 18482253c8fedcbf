"""Append-only experiment manifest.

Each stage run writes into its own directory ``stages/<stage>/run<NNN>`` and
appends one JSON line listing its inputs, output files with content hashes,
seeds and wall time. Earlier records are never rewritten, and because run
directories are never reused, every recorded hash stays valid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import DependencyError, ValidationError

STAGES = (
    "ingest",
    "train_ssi_all",
    "train_adapter",
    "generate_organs",
    "compose",
    "refine",
    "evaluate_quality",
    "seg_train",
    "seg_eval",
    "report",
)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: Path) -> dict[str, str]:
    """Content hash of every file under ``root``, keyed by posix relative path."""
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


@dataclass
class StageRecord:
    stage: str
    run_dir: str  # relative to the experiment directory
    inputs: dict[str, str]  # prerequisite stage -> its run_dir
    outputs: dict[str, str]  # path relative to run_dir -> sha256
    seeds: dict
    wall_time: float
    config_sha256: str
    seed: int
    summary: dict = field(default_factory=dict)
    volatile: list[str] = field(default_factory=list)  # outputs excluded from reproducibility hashes

    def to_dict(self) -> dict:
        return {"type": "stage", **self.__dict__}


class ExperimentManifest:
    FILENAME = "manifest.jsonl"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.path = self.root / self.FILENAME
        self.header: dict | None = None
        self.records: list[StageRecord] = []
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                d = json.loads(line)
                if d.pop("type") == "experiment":
                    self.header = d
                else:
                    self.records.append(StageRecord(**d))

    @property
    def experiment_id(self) -> str | None:
        return None if self.header is None else self.header["id"]

    def _append(self, d: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(d, sort_keys=True) + "\n")

    def init(self, experiment_id: str, config_sha256: str, seed: int) -> None:
        if self.header is not None:
            return
        self.header = {"id": experiment_id, "config_sha256": config_sha256, "seed": int(seed)}
        self._append({"type": "experiment", **self.header})

    def latest(self, stage: str) -> StageRecord | None:
        for r in reversed(self.records):
            if r.stage == stage:
                return r
        return None

    def require(self, stage: str, for_stage: str) -> StageRecord:
        rec = self.latest(stage)
        if rec is None:
            raise DependencyError(f"stage {for_stage!r} requires stage {stage!r}, which has not run")
        return rec

    def new_run_dir(self, stage: str) -> Path:
        if stage not in STAGES:
            raise ValidationError(f"unknown stage {stage!r}")
        n = sum(r.stage == stage for r in self.records)
        while True:
            rel = Path("stages") / stage / f"run{n:03d}"
            if not (self.root / rel).exists():
                return rel
            n += 1

    def append(self, record: StageRecord) -> None:
        self._append(record.to_dict())
        self.records.append(record)

    def run_path(self, record: StageRecord) -> Path:
        return self.root / record.run_dir

    def artifact_paths(self) -> list[Path]:
        return [self.root / r.run_dir / rel for r in self.records for rel in r.outputs]

    def artifact_hashes(self) -> dict[str, dict[str, str]]:
        """Latest run's output hashes per stage, independent of run numbering."""
        out = {}
        for stage in STAGES:
            rec = self.latest(stage)
            if rec is not None:
                out[stage] = {k: v for k, v in rec.outputs.items() if k not in rec.volatile}
        return out

    def verify(self) -> list[str]:
        """Problems found: missing files, hash mismatches, records out of order."""
        problems = []
        for r in self.records:
            for rel, digest in r.outputs.items():
                p = self.root / r.run_dir / rel
                if not p.exists():
                    problems.append(f"{r.run_dir}/{rel}: missing")
                elif sha256_file(p) != digest:
                    problems.append(f"{r.run_dir}/{rel}: hash mismatch")
        seen: set[str] = set()
        for r in self.records:
            for dep_dir in r.inputs.values():
                if dep_dir not in seen:
                    problems.append(f"{r.run_dir}: input {dep_dir} not recorded before it")
            seen.add(r.run_dir)
        return problems
