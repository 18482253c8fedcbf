"""Stage implementations and the ``run_stage`` driver.

Stage order: ingest, train_ssi_all, train_adapter, generate_organs, compose,
refine, evaluate_quality, seg_train, seg_eval, report. Stage outputs live in
fresh run directories and are located through the manifest, never by
guessing paths.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..control_adapter import AdapterConfig, load_adapter, train_adapter
from ..dataset_io import (
    BinaryMask,
    ClassMap,
    SampleRecord,
    ToyConfig,
    generate_toy_dataset,
    load_dataset,
    make_prompt,
    read_label_map,
    read_rgb,
    save_dataset,
    write_label_map,
    write_rgb,
)
from ..diffusion.core import SamplerConfig
from ..errors import DependencyError, RegistryLookupError, ValidationError
from ..inpaint import ModelRegistry, SSIConfig, organ_defaults, sample_inpaint, train_ssi
from ..metrics import SegMetricReport, quality_report, toy_feature_extractor, write_report
from ..refiner import RefineConfig, SceneModelConfig, refine, refine_image, train_scene_model
from ..scene_composer import CompositeScene, OrganRender, compose
from ..seg_harness import (
    Segmenter,
    TrainingScheme,
    comparison_rows,
    comparison_table_csv,
    comparison_table_text,
    evaluate_segmenter,
    train_segmenter,
)
from .config import config_hash, load_config, validate_config
from .figures import emit_figure_grid
from .manifest import STAGES, ExperimentManifest, StageRecord, hash_tree
from .seeds import derive_seed

log = logging.getLogger(__name__)

ARTIFACT_ROOT_ENV = "SURGSYNTH_ARTIFACT_ROOT"
SCENE_ITEM = 1 << 20  # seed item index reserved for the scene model


def artifact_root(root: str | Path | None = None) -> Path:
    return Path(root or os.environ.get(ARTIFACT_ROOT_ENV) or "artifacts").resolve()


@dataclass
class StageContext:
    stage: str
    cfg: dict
    seed: int
    manifest: ExperimentManifest
    run_dir: Path
    inputs: dict
    volatile: list

    def need(self, stage: str) -> Path:
        rec = self.manifest.require(stage, self.stage)
        self.inputs[stage] = rec.run_dir
        return self.manifest.run_path(rec)

    def maybe(self, stage: str) -> Path | None:
        rec = self.manifest.latest(stage)
        if rec is None:
            return None
        self.inputs[stage] = rec.run_dir
        return self.manifest.run_path(rec)

    def item_seed(self, item: int) -> int:
        return derive_seed(self.seed, self.stage, item)


# ---------------------------------------------------------------------------
# Shared loaders


def _load_ingested(ctx: StageContext) -> tuple[list[SampleRecord], ClassMap]:
    root = ctx.need("ingest") / "dataset"
    cm = ClassMap.load(root / "class_map.json")
    return load_dataset(root / "manifest.jsonl", cm), cm


def _split(records, split):
    return [r for r in records if r.split == split]


def _registry(ctx: StageContext) -> ModelRegistry:
    ext = ctx.cfg["generate"]["registry_dir"]
    if ctx.stage in ("generate_organs", "refine") and ext:
        path = Path(ext)
        if not (path / ModelRegistry.INDEX).exists():
            raise DependencyError(f"generate.registry_dir {path} holds no model registry")
        return ModelRegistry(path)
    rec = ctx.manifest.latest("train_ssi_all")
    if rec is None:
        hint = " (or set generate.registry_dir for simulated masks)" if ctx.stage == "generate_organs" else ""
        raise DependencyError(f"stage {ctx.stage!r} requires stage 'train_ssi_all', which has not run{hint}")
    return ModelRegistry(ctx.need("train_ssi_all") / "registry")


def _write_scene_dataset(scenes: list[CompositeScene], out: Path, class_map: ClassMap) -> None:
    lines = []
    for s in scenes:
        s.save(out / "scenes", class_map)
        lines.append(json.dumps({"image": f"scenes/{s.id}.png", "mask": f"scenes/{s.id}_label.png", "split": "train", "id": s.id}))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def _load_scenes(root: Path) -> list[CompositeScene]:
    scenes = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        e = json.loads(line)
        side = json.loads((root / e["image"]).with_suffix(".json").read_text())
        scenes.append(
            CompositeScene(
                image=read_rgb(root / e["image"]),
                label_map=read_label_map(root / e["mask"]),
                provenance=side["renders"],
                background_source=side["background_source"],
                id=e["id"],
            )
        )
    return scenes


def _synthetic_root(ctx: StageContext) -> Path:
    """Refined scenes when the latest refine run used the latest compose run, else composites."""
    comp = ctx.manifest.require("compose", ctx.stage)
    ref = ctx.manifest.latest("refine")
    ctx.inputs["compose"] = comp.run_dir
    if ref is not None and ref.inputs.get("compose") == comp.run_dir and ref.summary.get("enabled", True):
        ctx.inputs["refine"] = ref.run_dir
        return ctx.manifest.run_path(ref)
    return ctx.manifest.run_path(comp)


# ---------------------------------------------------------------------------
# Stages


def stage_ingest(ctx: StageContext) -> dict:
    d = ctx.cfg["data"]
    if d["source"] == "toy":
        records, cm = generate_toy_dataset(ToyConfig(**d["toy"]), ctx.item_seed(0))
    else:
        manifest = Path(d["manifest"])
        cm_path = Path(d["class_map"]) if d["class_map"] else manifest.parent / "class_map.json"
        cm = ClassMap.load(cm_path)
        records = load_dataset(manifest, cm)
    if not records:
        raise ValidationError("data: dataset is empty")
    save_dataset(records, ctx.run_dir / "dataset", cm)
    return {"n_train": len(_split(records, "train")), "n_test": len(_split(records, "test")), "classes": cm.class_ids}


def stage_train_ssi_all(ctx: StageContext) -> dict:
    records, cm = _load_ingested(ctx)
    train = _split(records, "train")
    s = ctx.cfg["ssi"]
    registry = ModelRegistry(ctx.run_dir / "registry")
    classes = s["classes"] or cm.class_ids
    losses = {}
    for cid in classes:
        cfg = SSIConfig(
            steps=s["steps"], lr=s["lr"], batch=s["batch"], seed=ctx.item_seed(cid), p_uncond=s["p_uncond"],
            ema_decay=s["ema_decay"], masked_loss=s["masked_loss"], base_channels=s["base_channels"],
            channel_mults=tuple(s["channel_mults"]), prediction_type=s["prediction_type"], schedule=dict(s["schedule"]),
        )
        tm = train_ssi(int(cid), train, cm, cfg, registry)
        losses[int(cid)] = float(np.mean(tm.losses[-50:])) if tm.losses else None
    sm = ctx.cfg["scene_model"]
    scfg = SceneModelConfig(
        steps=sm["steps"], lr=sm["lr"], batch=sm["batch"], ema_decay=sm["ema_decay"], seed=ctx.item_seed(SCENE_ITEM),
        base_channels=s["base_channels"], channel_mults=tuple(s["channel_mults"]), schedule=dict(s["schedule"]),
    )
    train_scene_model(train, cm, scfg, registry)
    return {"classes": [int(c) for c in classes], "final_loss": losses}


def stage_train_adapter(ctx: StageContext) -> dict:
    records, cm = _load_ingested(ctx)
    train = _split(records, "train")
    registry = _registry(ctx)
    a = ctx.cfg["adapter"]
    classes = a["classes"] if a["classes"] else sorted(registry.classes)
    done = {}
    for cid in classes:
        cfg = AdapterConfig(
            steps=a["steps"], lr=a["lr"], batch=a["batch"], seed=ctx.item_seed(cid),
            true_mask_prob=a["true_mask_prob"], max_dilation=a["max_dilation"], masked_loss=a["masked_loss"],
            ema_decay=a["ema_decay"], blur_sigma=a["blur_sigma"], conditioning_scale=a["conditioning_scale"],
        )
        fname = f"adapter_class{cid}.ckpt"
        train_adapter((registry, int(cid)), train, int(cid), cfg, out_path=ctx.run_dir / fname)
        done[str(cid)] = fname
    (ctx.run_dir / "adapters.json").write_text(json.dumps(done, indent=2, sort_keys=True))
    return {"classes": [int(c) for c in classes]}


def _simulated_masks(path: Path, cm: ClassMap) -> list[tuple[str, np.ndarray]]:
    files = sorted(p for p in Path(path).glob("*.png"))
    if not files:
        raise ValidationError(f"generate.simulated_masks: no PNG label maps in {path}")
    out = []
    for f in files:
        lab = read_label_map(f)
        bad = set(np.unique(lab).tolist()) - cm.valid_labels
        if bad:
            raise ValidationError(f"{f}: label value {min(bad)} not in class map")
        out.append((f.stem, lab))
    return out


def _adapters(ctx: StageContext, registry: ModelRegistry) -> dict[int, object]:
    handles = {}
    if not ctx.cfg["generate"]["use_adapter"]:
        return handles
    root = ctx.maybe("train_adapter")
    if root is not None:
        for cid, fname in json.loads((root / "adapters.json").read_text()).items():
            if int(cid) in registry.classes:
                handles[int(cid)] = load_adapter(root / fname, registry.load(int(cid))[0])
    for cid, fname in registry.adapters.items():
        handles.setdefault(int(cid), load_adapter(registry.root / fname, registry.load(int(cid))[0]))
    return handles


def stage_generate_organs(ctx: StageContext) -> dict:
    records, cm = _load_ingested(ctx)
    g = ctx.cfg["generate"]
    registry = _registry(ctx)
    handles = _adapters(ctx, registry)
    n = g["n_scenes"]
    if g["mask_source"] == "real":
        train = _split(records, "train")
        if not train:
            raise ValidationError("ingested dataset has no training split for real masks")
        items = [(f"syn_{i:05d}", train[i % len(train)].label_map, train[i % len(train)].image, "source_image") for i in range(n)]
    else:
        masks = _simulated_masks(Path(g["simulated_masks"]), cm)
        try:
            registry.scene_path()
        except RegistryLookupError as exc:
            raise DependencyError(f"simulated masks need a scene model for the background render: {exc}") from exc
        prompt = make_prompt(None, cm, "scene")
        items = []
        for i in range(n):
            name, lab = masks[i % len(masks)]
            bg = refine_image(
                np.zeros(lab.shape + (3,), np.uint8), registry,
                RefineConfig(strength=1.0, n_steps=g["n_steps"], seed=ctx.item_seed(2 * i + 1)), prompt,
            )
            items.append((f"sssyn_{i:05d}", lab, bg, "background_render"))
    for sub in ("organs", "labels", "backgrounds"):
        (ctx.run_dir / sub).mkdir(parents=True, exist_ok=True)
    index = []
    for sid, lab, bg, src in items:
        write_label_map(ctx.run_dir / "labels" / f"{sid}.png", lab, cm)
        write_rgb(ctx.run_dir / "backgrounds" / f"{sid}.png", bg)
        index.append({"id": sid, "label": f"labels/{sid}.png", "background": f"backgrounds/{sid}.png", "background_source": src, "renders": []})
    n_renders = 0
    for cid in cm.class_ids:
        todo = [i for i, it in enumerate(items) if (it[1] == cid).any()]
        if not todo:
            continue
        if cid not in registry.classes:
            raise RegistryLookupError(f"no inpainting model registered for class {cid} ({cm.entry(cid).name})")
        name = cm.entry(cid).name
        scale = (g["guidance"] or {}).get(name, organ_defaults(name)[1])
        sc = SamplerConfig(n_steps=g["n_steps"], guidance_scale=float(scale))
        for lo in range(0, len(todo), g["batch"]):
            chunk = todo[lo : lo + g["batch"]]
            seeds = [ctx.item_seed(2 * (i * 256 + cid)) for i in chunk]
            src = np.stack([items[i][2] for i in chunk])
            msk = np.stack([(items[i][1] == cid).astype(np.uint8) for i in chunk])
            out = sample_inpaint(
                registry, cid, src, msk, sc, seeds, control=handles.get(cid), context_noise=g["context_noise"]
            )
            for j, i in enumerate(chunk):
                rel = f"organs/{items[i][0]}_c{cid}.png"
                write_rgb(ctx.run_dir / rel, out[j])
                index[i]["renders"].append(
                    {"class_id": int(cid), "image": rel, "seed": seeds[j], "guidance_scale": float(scale), "adapter": cid in handles}
                )
                n_renders += 1
    (ctx.run_dir / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return {"n_scenes": len(items), "n_renders": n_renders, "mask_source": g["mask_source"], "registry": str(registry.root)}


def stage_compose(ctx: StageContext) -> dict:
    gen = ctx.need("generate_organs")
    cm = ClassMap.load(ctx.need("ingest") / "dataset" / "class_map.json")
    index = json.loads((gen / "index.json").read_text())
    scenes = []
    for it in index:
        lab = read_label_map(gen / it["label"])
        renders = [
            OrganRender(r["class_id"], read_rgb(gen / r["image"]), BinaryMask(r["class_id"], (lab == r["class_id"]).astype(np.uint8)), r)
            for r in it["renders"]
        ]
        scenes.append(compose(renders, read_rgb(gen / it["background"]), cm, it["background_source"], it["id"]))
    _write_scene_dataset(scenes, ctx.run_dir, cm)
    return {"n_scenes": len(scenes)}


def stage_refine(ctx: StageContext) -> dict:
    r = ctx.cfg["refine"]
    comp = ctx.need("compose")
    if not r["enabled"]:
        return {"enabled": False}
    cm = ClassMap.load(ctx.need("ingest") / "dataset" / "class_map.json")
    registry = _registry(ctx)
    prompt = make_prompt(None, cm, "scene")
    out = []
    for i, scene in enumerate(_load_scenes(comp)):
        rc = RefineConfig(strength=r["strength"], n_steps=r["n_steps"], seed=ctx.item_seed(i), guidance_scale=r["guidance_scale"])
        out.append(refine(scene, registry, rc, prompt))
    _write_scene_dataset(out, ctx.run_dir, cm)
    return {"enabled": True, "n_scenes": len(out), "strength": r["strength"]}


def stage_evaluate_quality(ctx: StageContext) -> dict:
    records, cm = _load_ingested(ctx)
    q = ctx.cfg["quality"]
    train, test = _split(records, "train"), _split(records, "test")
    real_ref = test if len(test) >= 2 else train
    fx = toy_feature_extractor(np.stack([r.image for r in train]), seed=ctx.item_seed(0), steps=q["feature_steps"])
    reports = {}
    comp = ctx.manifest.require("compose", ctx.stage)
    ctx.inputs["compose"] = comp.run_dir
    sets = {"composite": ctx.manifest.run_path(comp)}
    syn_root = _synthetic_root(ctx)
    if syn_root != sets["composite"]:
        sets["refined"] = syn_root
    real_imgs = np.stack([r.image for r in real_ref])
    for name, root in sets.items():
        gen = np.stack([s.image for s in _load_scenes(root)])
        reports[name] = quality_report(
            real_imgs, gen, fx, kid_subset_size=q["kid_subset"], kid_subsets=q["kid_subsets"], seed=ctx.item_seed(1)
        )
    reports["extractor"] = {"descriptor": fx.descriptor, "init_loss": fx.init_loss, "final_loss": fx.final_loss}
    write_report(ctx.run_dir / "quality.json", reports)
    return {name: {"frechet": rep["frechet"], "kid": rep["kid"]["mean"]} for name, rep in reports.items() if name != "extractor"}


def stage_seg_train(ctx: StageContext) -> dict:
    records, cm = _load_ingested(ctx)
    syn = load_dataset(_synthetic_root(ctx) / "manifest.jsonl", cm)
    s = ctx.cfg["seg"]
    datasets = {"real": _split(records, "train"), "syn": syn}
    runs = []
    k = 0
    for kind in s["schemes"]:
        for seed in s["seeds"]:
            scheme = TrainingScheme(
                kind, datasets, steps=s["steps"], finetune_steps=s["finetune_steps"], seed=derive_seed(ctx.seed, f"seg_train/{kind}", seed),
                batch=s["batch"], lr=s["lr"], name=kind,
            )
            model = train_segmenter(scheme, cm)
            fname = f"{kind}_seed{seed}.ckpt"
            model.save(ctx.run_dir / fname)
            runs.append({"scheme": kind, "seed": int(seed), "checkpoint": fname, "final_loss": model.header["final_loss"]})
            k += 1
    (ctx.run_dir / "runs.json").write_text(json.dumps(runs, indent=2, sort_keys=True))
    return {"n_models": k}


def stage_seg_eval(ctx: StageContext) -> dict:
    records, cm = _load_ingested(ctx)
    test = _split(records, "test")
    root = ctx.need("seg_train")
    runs = json.loads((root / "runs.json").read_text())
    results: dict[str, list[SegMetricReport]] = {}
    per_run = []
    for r in runs:
        rep = evaluate_segmenter(Segmenter.load(root / r["checkpoint"], cm), test, cm)
        results.setdefault(r["scheme"], []).append(rep)
        per_run.append({**r, "report": rep.to_dict()})
    rows = comparison_rows(results)
    write_report(ctx.run_dir / "results.json", {"runs": per_run, "rows": rows})
    (ctx.run_dir / "table.txt").write_text(comparison_table_text(rows))
    (ctx.run_dir / "table.csv").write_text(comparison_table_csv(rows))
    return {r["scheme"]: round(r["dice_mean"], 6) for r in rows}


def stage_report(ctx: StageContext) -> dict:
    cm = ClassMap.load(ctx.need("ingest") / "dataset" / "class_map.json")
    comp_root = ctx.manifest.run_path(ctx.manifest.require("compose", "report"))
    ctx.inputs["compose"] = ctx.manifest.require("compose", "report").run_dir
    syn_root = _synthetic_root(ctx)
    n = ctx.cfg["report"]["grid_rows"]
    comp = _load_scenes(comp_root)[:n]
    refined = _load_scenes(syn_root)[:n] if syn_root != comp_root else None
    gen_root = ctx.manifest.run_path(ctx.manifest.latest("generate_organs"))
    index = {it["id"]: it for it in json.loads((gen_root / "index.json").read_text())}
    real = None
    if all(index[s.id]["background_source"] == "source_image" for s in comp):
        real = [read_rgb(gen_root / index[s.id]["background"]) for s in comp]
    emit_figure_grid(comp, ctx.run_dir / "figure_grid.png", cm, real, refined)
    referenced = {"figure_grid": f"{ctx.run_dir.relative_to(ctx.manifest.root).as_posix()}/figure_grid.png"}
    lines = ["# Experiment report", "", f"experiment: {ctx.manifest.experiment_id}", ""]
    q = ctx.maybe("evaluate_quality")
    if q is not None:
        quality = json.loads((q / "quality.json").read_text())
        referenced["quality"] = f"{ctx.inputs['evaluate_quality']}/quality.json"
        lines += ["## Image quality", "", "| set | Frechet | KID | CMMD | LPIPS |", "|---|---|---|---|---|"]
        for name in ("composite", "refined"):
            if name in quality:
                r = quality[name]
                lines.append(f"| {name} | {r['frechet']:.4f} | {r['kid']['mean']:.5f} | {r['cmmd']['value']:.5f} | {r['lpips']['mean']:.4f} |")
        lines.append("")
    s = ctx.maybe("seg_eval")
    if s is not None:
        referenced["seg_table"] = f"{ctx.inputs['seg_eval']}/table.txt"
        referenced["seg_results"] = f"{ctx.inputs['seg_eval']}/results.json"
        lines += ["## Segmentation", "", "```", (s / "table.txt").read_text().rstrip(), "```", ""]
    lines += ["![figure grid](figure_grid.png)", ""]
    (ctx.run_dir / "report.md").write_text("\n".join(lines))
    (ctx.run_dir / "report.json").write_text(json.dumps({"artifacts": referenced}, indent=2, sort_keys=True))
    # wall times differ between runs, so they sit in a file excluded from hash comparisons
    timing = {r.run_dir: {"stage": r.stage, "wall_time_s": r.wall_time} for r in ctx.manifest.records}
    (ctx.run_dir / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
    ctx.volatile.append("timing.json")
    return {"artifacts": referenced}


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "train_ssi_all": stage_train_ssi_all,
    "train_adapter": stage_train_adapter,
    "generate_organs": stage_generate_organs,
    "compose": stage_compose,
    "refine": stage_refine,
    "evaluate_quality": stage_evaluate_quality,
    "seg_train": stage_seg_train,
    "seg_eval": stage_seg_eval,
    "report": stage_report,
}


# ---------------------------------------------------------------------------
# Driver


def _config_store(exp_dir: Path, cfg: dict) -> str:
    digest = config_hash(cfg)
    path = exp_dir / "configs" / f"{digest}.json"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return digest


def _resolve_config(exp_dir: Path, manifest: ExperimentManifest, config_path, config: dict | None) -> dict:
    if config is not None:
        return validate_config(config)
    if config_path is not None:
        return load_config(config_path)
    if manifest.records:
        snap = exp_dir / "configs" / f"{manifest.records[-1].config_sha256}.json"
        return validate_config(json.loads(snap.read_text()))
    if not manifest.path.exists():
        raise FileNotFoundError(f"experiment directory {exp_dir} has no manifest")
    raise ValidationError("config: no config file given and the experiment has no stored config")


def experiment_dir(experiment: str, root: str | Path | None = None) -> Path:
    return artifact_root(root) / experiment


def run_stage(
    stage: str,
    config_path: str | Path | None = None,
    seed: int | None = None,
    experiment: str | None = None,
    *,
    artifact_root_dir: str | Path | None = None,
    config: dict | None = None,
) -> StageRecord:
    """Run one stage and append its record to the experiment manifest."""
    if stage not in STAGE_FUNCS:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if config is None and config_path is None and experiment is None:
        raise ValidationError("config: a config file or an existing experiment id is required")
    pre_cfg = None
    if experiment is None:
        pre_cfg = validate_config(config) if config is not None else load_config(config_path)
        experiment = pre_cfg["experiment"]["id"] or f"exp-{config_hash(pre_cfg)[:12]}"
    exp_dir = experiment_dir(experiment, artifact_root_dir)
    manifest = ExperimentManifest(exp_dir)
    cfg = pre_cfg or _resolve_config(exp_dir, manifest, config_path, config)
    if seed is None:
        seed = manifest.header["seed"] if manifest.header else cfg["experiment"]["seed"]
    digest = _config_store(exp_dir, cfg)
    manifest.init(experiment, digest, seed)
    rel = manifest.new_run_dir(stage)
    run_dir = exp_dir / rel
    ctx = StageContext(stage, cfg, int(seed), manifest, run_dir, {}, [])
    run_dir.mkdir(parents=True)
    t0 = time.perf_counter()
    log.info("[%s] stage %s -> %s", experiment, stage, rel)
    try:
        summary = STAGE_FUNCS[stage](ctx)
    except Exception:
        # leave no half-written run directory that a later run could be confused by
        import shutil

        shutil.rmtree(run_dir, ignore_errors=True)
        raise
    outputs = hash_tree(run_dir)
    record = StageRecord(
        stage=stage,
        run_dir=rel.as_posix(),
        inputs=dict(ctx.inputs),
        outputs=outputs,
        seeds={"experiment_seed": int(seed), "derivation": "blake2b(seed, stage, item)"},
        wall_time=time.perf_counter() - t0,
        config_sha256=digest,
        seed=int(seed),
        summary=summary,
        volatile=sorted(ctx.volatile),
    )
    manifest.append(record)
    return record


def run_pipeline(stages, config_path=None, seed=None, experiment=None, **kw) -> ExperimentManifest:
    """Run ``stages`` in order within one experiment; returns its manifest."""
    if experiment is None:
        cfg = validate_config(kw["config"]) if kw.get("config") is not None else load_config(config_path)
        experiment = cfg["experiment"]["id"] or f"exp-{config_hash(cfg)[:12]}"
    for st in stages:
        run_stage(st, config_path, seed, experiment, **kw)
    return ExperimentManifest(experiment_dir(experiment, kw.get("artifact_root_dir")))
