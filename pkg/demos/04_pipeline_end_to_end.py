"""
The whole pipeline from one config
==================================

Every stage runs in order under one experiment id, with step counts cut
down so the run takes a few minutes. Each stage run lands in its own
directory and is appended to the manifest. At the end every recorded
artifact hash is checked against the files on disk.

Equivalent shell session, one stage per call::

    export SURGSYNTH_ARTIFACT_ROOT=demo_out/artifacts
    for s in ingest train_ssi_all train_adapter generate_organs compose \
             refine evaluate_quality seg_train seg_eval report; do
        synth $s --config demo.yaml || break
    done
"""

import sys
from pathlib import Path

import torch

from surgsynth.pipeline import STAGES, run_pipeline

torch.set_num_threads(1)
root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/artifacts")

config = {
    "experiment": {"id": "demo-e2e", "seed": 3},
    "data": {"toy": {"n_samples": 140, "image_size": 32, "n_classes": 3, "test_fraction": 0.25}},
    "ssi": {"steps": 60, "lr": 1e-3, "ema_decay": 0.99, "masked_loss": True},
    "scene_model": {"steps": 60, "lr": 1e-3},
    "adapter": {"classes": [2], "steps": 20},
    "generate": {"n_scenes": 16, "n_steps": 10, "guidance": {"abdominal wall": 1.0, "liver": 1.0, "gall bladder": 1.0}},
    "refine": {"n_steps": 5},
    "quality": {"feature_steps": 30, "kid_subset": 8, "kid_subsets": 5},
    "seg": {"schemes": ["real_noaug", "syn_only", "syn_plus_real"], "seeds": [0], "steps": 60, "finetune_steps": 20},
}

manifest = run_pipeline(STAGES, config=config, artifact_root_dir=root)
for rec in manifest.records:
    print(f"{rec.stage:16s} {manifest.run_path(rec)}")

problems = manifest.verify()
print("hash check:", "clean" if not problems else problems)
print("report:", manifest.run_path(manifest.latest("report")))
