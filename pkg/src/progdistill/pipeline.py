"""Plain-file pipeline: every stage reads JSONL artifacts, writes JSONL
artifacts plus a manifest, and downstream stages verify upstream checksums.

Intermediate results are stored first and adapted/consumed later, so each
stage is independently inspectable and re-runnable. Reports contain no
timestamps; with fixed seeds and config, report bytes are identical across
runs (manifests carry the timestamps instead).
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backends import (CorruptionProfile, OracleBackend, TableStudent,
                       baseline_registry, consistency_verifier,
                       distilled_registry, fresh_students, oracle_registry,
                       perfect_registry)
from .datasets import SplitSpec, make_splits, stats
from .distill import (DistillConfig, harvest, load_triples, save_triples,
                      train)
from .evaluation import (EvalReport, ablate_distilled_count,
                         ablate_trainset_size, case_report, cross_framework,
                         error_taxonomy, grounding_eval, question_correct,
                         run_programs, score, visual_pointer_effect)
from .interpreter import trace_from_record, trace_to_record
from .questions import (DISTILLABLE_KINDS, GenConfig, generate_grounding,
                        generate_qa, qa_from_record, qa_to_record)
from .service import ProgramServiceClient, ServiceError
from .util import config_digest, read_jsonl, sha256_file, write_jsonl
from .worlds import WorldConfig, WorldStore, default_world_config, generate_world

REGISTRY_NAMES = ("baseline", "distilled", "teacher-replacement", "all-oracle")


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 2


class MissingArtifactError(PipelineError):
    exit_code = 3


class ChecksumError(PipelineError):
    exit_code = 4


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=default_world_config)
    train_scenes: int = 700
    eval_scenes: int = 300
    questions_per_scene: tuple[int, int] = (12, 16)
    fault_rate: float = 0.0
    visual_pointer: bool = True
    framework: str = "fine"
    miss_rate: float = 0.05
    detector_seed: int = 11
    # Chosen so the realized corrupted fraction sits at the nominal rho across
    # every question-form family (single draws over small form sets are lumpy).
    corruption_seed: int = 98
    rho: float = 0.3
    tau: int = 3
    alpha: float = 1.0
    epochs: int = 1
    per_type_cap: int = 160
    val_scene_share: float = 0.65
    grounding_per_scene: tuple[int, int] = (1, 2)
    vp_probe_scenes: int = 200
    vp_probe_ambiguity: float = 0.4
    trainset_ratios: tuple[int, int, int] = (1, 4, 6)
    service_timeout: float = 5.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "world": self.world.to_dict(),
            "scenes": {"train": self.train_scenes, "eval": self.eval_scenes},
            "questions": {
                "per_scene": list(self.questions_per_scene),
                "fault_rate": self.fault_rate,
                "visual_pointer": self.visual_pointer,
                "framework": self.framework,
            },
            "detector": {"miss_rate": self.miss_rate, "seed": self.detector_seed},
            "corruption": {"seed": self.corruption_seed, "rho": self.rho},
            "students": {"tau": self.tau, "alpha": self.alpha},
            "distill": {"epochs": self.epochs},
            "dataset": {"per_type_cap": self.per_type_cap,
                        "val_scene_share": self.val_scene_share},
            "grounding": {"per_scene": list(self.grounding_per_scene)},
            "vp_probe": {"scenes": self.vp_probe_scenes,
                         "ambiguity_rate": self.vp_probe_ambiguity},
            "ablation": {"trainset_ratios": list(self.trainset_ratios)},
            "service": {"timeout": self.service_timeout},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            cfg = cls()
            if "seed" in d:
                cfg.seed = int(d["seed"])
            if "world" in d:
                cfg.world = WorldConfig.from_dict(d["world"])
            scenes = d.get("scenes", {})
            cfg.train_scenes = int(scenes.get("train", cfg.train_scenes))
            cfg.eval_scenes = int(scenes.get("eval", cfg.eval_scenes))
            questions = d.get("questions", {})
            cfg.questions_per_scene = tuple(
                questions.get("per_scene", cfg.questions_per_scene))
            cfg.fault_rate = float(questions.get("fault_rate", cfg.fault_rate))
            cfg.visual_pointer = bool(questions.get("visual_pointer",
                                                    cfg.visual_pointer))
            cfg.framework = str(questions.get("framework", cfg.framework))
            detector = d.get("detector", {})
            cfg.miss_rate = float(detector.get("miss_rate", cfg.miss_rate))
            cfg.detector_seed = int(detector.get("seed", cfg.detector_seed))
            corruption = d.get("corruption", {})
            cfg.corruption_seed = int(corruption.get("seed", cfg.corruption_seed))
            cfg.rho = float(corruption.get("rho", cfg.rho))
            students = d.get("students", {})
            cfg.tau = int(students.get("tau", cfg.tau))
            cfg.alpha = float(students.get("alpha", cfg.alpha))
            cfg.epochs = int(d.get("distill", {}).get("epochs", cfg.epochs))
            dataset = d.get("dataset", {})
            cfg.per_type_cap = int(dataset.get("per_type_cap", cfg.per_type_cap))
            cfg.val_scene_share = float(dataset.get("val_scene_share",
                                                    cfg.val_scene_share))
            grounding = d.get("grounding", {})
            cfg.grounding_per_scene = tuple(grounding.get(
                "per_scene", cfg.grounding_per_scene))
            vp = d.get("vp_probe", {})
            cfg.vp_probe_scenes = int(vp.get("scenes", cfg.vp_probe_scenes))
            cfg.vp_probe_ambiguity = float(vp.get("ambiguity_rate",
                                                  cfg.vp_probe_ambiguity))
            ablation = d.get("ablation", {})
            cfg.trainset_ratios = tuple(ablation.get("trainset_ratios",
                                                     cfg.trainset_ratios))
            cfg.service_timeout = float(d.get("service", {}).get(
                "timeout", cfg.service_timeout))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        try:
            cfg.world.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.framework not in ("fine", "coarse"):
            raise ConfigError(f"unknown framework {cfg.framework!r}")
        if not 0.0 <= cfg.fault_rate <= 1.0:
            raise ConfigError("fault_rate outside [0, 1]")
        if cfg.train_scenes < 1 or cfg.eval_scenes < 1:
            raise ConfigError("scene counts must be >= 1")
        lo, hi = cfg.questions_per_scene
        if lo < 1 or hi < lo:
            raise ConfigError("questions per_scene range invalid")
        if not 0.0 <= cfg.rho <= 1.0:
            raise ConfigError("corruption rho outside [0, 1]")
        if not 0.0 <= cfg.miss_rate <= 1.0:
            raise ConfigError("detector miss_rate outside [0, 1]")
        if cfg.tau < 1 or cfg.epochs < 0 or cfg.per_type_cap < 1:
            raise ConfigError("tau/epochs/per_type_cap out of range")
        if not 0.0 <= cfg.val_scene_share <= 1.0:
            raise ConfigError("val_scene_share outside [0, 1]")
        return cfg

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @property
    def profile(self) -> CorruptionProfile:
        return CorruptionProfile(seed=self.corruption_seed, rho=self.rho)

    def gen_config(self, framework: str | None = None,
                   visual_pointer: bool | None = None) -> GenConfig:
        return GenConfig(
            world=self.world,
            questions_per_scene=self.questions_per_scene,
            fault_rate=self.fault_rate,
            visual_pointer=self.visual_pointer if visual_pointer is None else visual_pointer,
            framework=framework or self.framework,
        )


def load_config(path: str | Path | None, seed: int | None = None) -> PipelineConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = PipelineConfig.from_dict(data)
    if seed is not None:
        cfg.seed = seed
    return cfg


# ---------------------------------------------------------------------------
# Run directory layout and manifests
# ---------------------------------------------------------------------------

class RunPaths:
    def __init__(self, base: str | Path):
        self.base = Path(base)

    # artifacts
    @property
    def config(self): return self.base / "config.json"
    @property
    def worlds_train(self): return self.base / "worlds_train.jsonl"
    @property
    def worlds_eval(self): return self.base / "worlds_eval.jsonl"
    @property
    def qa_train(self): return self.base / "qa_train.jsonl"
    @property
    def qa_eval(self): return self.base / "qa_eval.jsonl"
    @property
    def split_manifest(self): return self.base / "split_manifest.json"
    @property
    def triples(self): return self.base / "triples.jsonl"
    @property
    def training_report(self): return self.base / "training_report.json"
    @property
    def students_dir(self): return self.base / "students"
    @property
    def manifests_dir(self): return self.base / "manifests"
    @property
    def report_md(self): return self.base / "report.md"
    @property
    def report_csv(self): return self.base / "report_tables.csv"
    @property
    def curve_csv(self): return self.base / "trainset_curve.csv"

    def split_file(self, name: str) -> Path:
        return self.base / f"split_{name}.jsonl"

    def traces_file(self, split: str, registry: str) -> Path:
        return self.base / f"traces_{split}_{registry.replace('-', '_')}.jsonl"

    def eval_file(self, registry: str, suffix: str = "json") -> Path:
        return self.base / f"eval_{registry.replace('-', '_')}.{suffix}"

    def student_file(self, kind: str) -> Path:
        return self.students_dir / f"{kind}.json"

    def ablation_file(self, axis: str) -> Path:
        return self.base / f"ablate_{axis.replace('-', '_')}.json"

    def grounding_file(self) -> Path:
        return self.base / "grounding.json"

    def manifest_file(self, stage: str) -> Path:
        safe = stage.replace(":", "_").replace("-", "_")
        return self.manifests_dir / f"{safe}.json"


def _artifact_entry(run: RunPaths, path: Path) -> dict:
    return {"path": str(path.relative_to(run.base)),
            "sha256": sha256_file(path)}


def write_stage_manifest(run: RunPaths, stage: str, cfg: PipelineConfig,
                         inputs: dict[str, Path],
                         outputs: dict[str, Path]) -> None:
    manifest = {
        "command": stage,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {name: _artifact_entry(run, p) for name, p in sorted(inputs.items())},
        "outputs": {name: _artifact_entry(run, p) for name, p in sorted(outputs.items())},
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    path = run.manifest_file(stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                    encoding="utf-8")


def require_artifacts(run: RunPaths, producer_stage: str,
                      names: list[str]) -> None:
    """Check that a producing stage ran and its recorded output checksums
    still match the files on disk."""
    manifest_path = run.manifest_file(producer_stage)
    if not manifest_path.exists():
        raise MissingArtifactError(
            f"stage {producer_stage!r} has not produced its artifacts "
            f"(missing {manifest_path.name})")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    outputs = manifest.get("outputs", {})
    for name in names:
        entry = outputs.get(name)
        if entry is None:
            raise MissingArtifactError(
                f"stage {producer_stage!r} did not record artifact {name!r}")
        path = run.base / entry["path"]
        if not path.exists():
            raise MissingArtifactError(f"artifact missing on disk: {path}")
        actual = sha256_file(path)
        if actual != entry["sha256"]:
            raise ChecksumError(
                f"artifact {name!r} changed since {producer_stage!r} ran "
                f"({actual[:12]} != {entry['sha256'][:12]})")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _scene_seed(cfg: PipelineConfig, pool: str, index: int) -> int:
    offset = 0 if pool == "train" else 500_000
    return cfg.seed * 1_000_000 + offset + index


def stage_gen_world(run: RunPaths, cfg: PipelineConfig) -> None:
    run.base.mkdir(parents=True, exist_ok=True)
    run.config.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True),
                          encoding="utf-8")
    train_store = WorldStore()
    for i in range(cfg.train_scenes):
        train_store.add(generate_world(_scene_seed(cfg, "train", i), cfg.world))
    eval_store = WorldStore()
    for i in range(cfg.eval_scenes):
        eval_store.add(generate_world(_scene_seed(cfg, "eval", i), cfg.world))
    train_store.save_jsonl(run.worlds_train)
    eval_store.save_jsonl(run.worlds_eval)
    write_stage_manifest(run, "gen-world", cfg, {}, {
        "worlds_train": run.worlds_train,
        "worlds_eval": run.worlds_eval,
    })


def load_world_stores(run: RunPaths) -> tuple[WorldStore, WorldStore, WorldStore]:
    """(train, eval, combined) stores; scene ids are globally unique."""
    train_store = WorldStore.load_jsonl(run.worlds_train)
    eval_store = WorldStore.load_jsonl(run.worlds_eval)
    combined = WorldStore()
    combined.scenes.update(train_store.scenes)
    combined.scenes.update(eval_store.scenes)
    return train_store, eval_store, combined


def stage_gen_qa(run: RunPaths, cfg: PipelineConfig) -> None:
    require_artifacts(run, "gen-world", ["worlds_train", "worlds_eval"])
    train_store, eval_store, _ = load_world_stores(run)
    gen = cfg.gen_config()
    for store, path in ((train_store, run.qa_train), (eval_store, run.qa_eval)):
        verifier = consistency_verifier(store, cfg.world) if gen.should_verify else None
        pool = []
        for scene_id in store.ids():
            pool.extend(generate_qa(store.get(scene_id), gen, cfg.seed,
                                    verifier=verifier))
        write_jsonl(path, (qa_to_record(qa) for qa in pool))
    write_stage_manifest(run, "gen-qa", cfg,
                         {"worlds_train": run.worlds_train,
                          "worlds_eval": run.worlds_eval},
                         {"qa_train": run.qa_train, "qa_eval": run.qa_eval})


def stage_build_dataset(run: RunPaths, cfg: PipelineConfig) -> dict:
    require_artifacts(run, "gen-qa", ["qa_train", "qa_eval"])
    pools = {
        "train_pool": [qa_from_record(r) for r in read_jsonl(run.qa_train)],
        "eval_pool": [qa_from_record(r) for r in read_jsonl(run.qa_eval)],
    }
    specs = {
        "train": SplitSpec("train", per_type_cap=cfg.per_type_cap,
                           source_pool="train_pool"),
        "val": SplitSpec("val", per_type_cap=cfg.per_type_cap,
                         source_pool="eval_pool",
                         scene_share=cfg.val_scene_share),
        "test": SplitSpec("test", per_type_cap=cfg.per_type_cap,
                          source_pool="eval_pool"),
    }
    result = make_splits(pools, specs, cfg.seed)
    outputs = {}
    for name, qas in result.splits.items():
        path = run.split_file(name)
        write_jsonl(path, (qa_to_record(qa) for qa in qas))
        outputs[f"split_{name}"] = path
    manifest = result.manifest()
    manifest["stats"] = {name: stats(qas) for name, qas in
                         sorted(result.splits.items())}
    run.split_manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                  encoding="utf-8")
    outputs["split_manifest"] = run.split_manifest
    write_stage_manifest(run, "build-dataset", cfg,
                         {"qa_train": run.qa_train, "qa_eval": run.qa_eval},
                         outputs)
    return manifest


def build_registry(name: str, run: RunPaths, cfg: PipelineConfig,
                   store: WorldStore):
    if name == "baseline":
        return baseline_registry(store, cfg.world, cfg.profile,
                                 miss_rate=cfg.miss_rate,
                                 detector_seed=cfg.detector_seed)
    if name == "distilled":
        require_artifacts(run, "distill",
                          [f"student_{k}" for k in DISTILLABLE_KINDS])
        students = {kind: TableStudent.load(run.student_file(kind), store, cfg.world)
                    for kind in DISTILLABLE_KINDS}
        base = baseline_registry(store, cfg.world, cfg.profile,
                                 miss_rate=cfg.miss_rate,
                                 detector_seed=cfg.detector_seed)
        return distilled_registry(base, students)
    if name == "teacher-replacement":
        return oracle_registry(store, cfg.world, miss_rate=cfg.miss_rate,
                               detector_seed=cfg.detector_seed)
    if name == "all-oracle":
        return perfect_registry(store, cfg.world)
    raise ConfigError(f"unknown registry {name!r}")


def stage_run_programs(run: RunPaths, cfg: PipelineConfig, split: str,
                       registry_name: str = "baseline",
                       program_source: str = "templates",
                       service_client: ProgramServiceClient | None = None,
                       on_service_error: str = "fail",
                       workers: int = 1) -> None:
    require_artifacts(run, "build-dataset", [f"split_{split}"])
    require_artifacts(run, "gen-world", ["worlds_train", "worlds_eval"])
    _, _, store = load_world_stores(run)
    qapairs = [qa_from_record(r) for r in read_jsonl(run.split_file(split))]

    if program_source == "service":
        if service_client is None:
            raise ConfigError("program source 'service' needs an endpoint")
        profile_name = "pointer" if cfg.visual_pointer else "plain"
        regenerated = []
        for qa in qapairs:
            try:
                text = service_client.generate(qa.question, profile_name)
            except ServiceError:
                if on_service_error == "templates":
                    regenerated.append(qa)
                    continue
                raise
            regenerated.append(replace(qa, program=text))
        qapairs = regenerated
    elif program_source != "templates":
        raise ConfigError(f"unknown program source {program_source!r}")

    registry = build_registry(registry_name, run, cfg, store)
    traces = run_programs(qapairs, store, registry, workers=workers)
    path = run.traces_file(split, registry_name)
    write_jsonl(path, (trace_to_record(t) for t in traces))
    write_stage_manifest(run, f"run-programs:{split}:{registry_name}", cfg,
                         {f"split_{split}": run.split_file(split)},
                         {"traces": path})


def stage_harvest(run: RunPaths, cfg: PipelineConfig) -> int:
    require_artifacts(run, "run-programs:train:baseline", ["traces"])
    train_store, _, store = load_world_stores(run)
    traces = [trace_from_record(r)
              for r in read_jsonl(run.traces_file("train", "baseline"))]
    qapairs = [qa_from_record(r) for r in read_jsonl(run.split_file("train"))]
    question_types = {qa.question_id: qa.question_type for qa in qapairs}
    teacher = OracleBackend(store, cfg.world)
    audit: list[dict] = []
    triples = harvest(traces, teacher, cfg.world, question_types=question_types,
                      audit=audit)
    save_triples(run.triples, triples)
    audit_path = run.base / "adapter_audit.jsonl"
    write_jsonl(audit_path, audit)
    write_stage_manifest(run, "harvest", cfg,
                         {"traces": run.traces_file("train", "baseline")},
                         {"triples": run.triples, "adapter_audit": audit_path})
    return len(triples)


def stage_distill(run: RunPaths, cfg: PipelineConfig) -> dict:
    require_artifacts(run, "harvest", ["triples"])
    _, _, store = load_world_stores(run)
    triples = load_triples(run.triples)
    students = fresh_students(store, cfg.world, cfg.profile, tau=cfg.tau,
                              alpha=cfg.alpha)
    _, report = train(students, triples,
                      DistillConfig(epochs=cfg.epochs, seed=cfg.seed), store)
    outputs = {}
    for kind, student in sorted(students.items()):
        path = run.student_file(kind)
        student.save(path)
        outputs[f"student_{kind}"] = path
    run.training_report.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    outputs["training_report"] = run.training_report
    write_stage_manifest(run, "distill", cfg, {"triples": run.triples}, outputs)
    return report.to_dict()


def stage_evaluate(run: RunPaths, cfg: PipelineConfig,
                   registry_name: str) -> EvalReport:
    """Accounting over traces stored by run-programs for the test split."""
    stage = f"run-programs:test:{registry_name}"
    require_artifacts(run, stage, ["traces"])
    _, _, store = load_world_stores(run)
    qapairs = [qa_from_record(r) for r in read_jsonl(run.split_file("test"))]
    traces = [trace_from_record(r)
              for r in read_jsonl(run.traces_file("test", registry_name))]
    by_id = {t.question_id: t for t in traces}
    missing = [qa.question_id for qa in qapairs if qa.question_id not in by_id]
    if missing:
        raise MissingArtifactError(
            f"traces missing for {len(missing)} question(s); re-run run-programs")
    ordered = [by_id[qa.question_id] for qa in qapairs]
    failures = [(qa, tr) for qa, tr in zip(qapairs, ordered)
                if not question_correct(qa, tr)[0]]
    taxonomy = error_taxonomy(failures, store, cfg.world)
    report = score(qapairs, ordered, taxonomy=taxonomy,
                   metadata={"registry": registry_name, "split": "test",
                             "config_digest": cfg.digest(), "seed": cfg.seed})
    _write_eval_outputs(run, registry_name, report)
    write_stage_manifest(run, f"evaluate:{registry_name}", cfg,
                         {"traces": run.traces_file("test", registry_name)},
                         {"eval_json": run.eval_file(registry_name)})
    return report


def _write_eval_outputs(run: RunPaths, registry_name: str,
                        report: EvalReport) -> None:
    run.eval_file(registry_name).write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(report.to_csv_rows())
    run.eval_file(registry_name, "csv").write_text(buf.getvalue(),
                                                   encoding="utf-8")
    run.eval_file(registry_name, "txt").write_text(report.to_text(),
                                                   encoding="utf-8")


def stage_ablate(run: RunPaths, cfg: PipelineConfig, axis: str,
                 workers: int = 1) -> dict:
    _, eval_store, store = load_world_stores(run)
    test_set = [qa_from_record(r) for r in read_jsonl(run.split_file("test"))]

    if axis == "distilled-count":
        require_artifacts(run, "distill",
                          [f"student_{k}" for k in DISTILLABLE_KINDS])
        students = {kind: TableStudent.load(run.student_file(kind), store,
                                            cfg.world)
                    for kind in DISTILLABLE_KINDS}
        base = baseline_registry(store, cfg.world, cfg.profile,
                                 miss_rate=cfg.miss_rate,
                                 detector_seed=cfg.detector_seed)
        result = ablate_distilled_count(base, students, test_set, store,
                                        cfg.world, workers=workers)
    elif axis == "trainset-size":
        require_artifacts(run, "harvest", ["triples"])
        triples = load_triples(run.triples)
        total = len(triples)
        hi = max(cfg.trainset_ratios)
        sizes = [max(1, total * r // hi) for r in cfg.trainset_ratios]
        base = baseline_registry(store, cfg.world, cfg.profile,
                                 miss_rate=cfg.miss_rate,
                                 detector_seed=cfg.detector_seed)
        result = ablate_trainset_size(sizes, triples, base, store, cfg.world,
                                      cfg.profile, test_set, tau=cfg.tau,
                                      alpha=cfg.alpha, seed=cfg.seed,
                                      workers=workers)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["size", "acc_all", "acc_no_nan"])
        for point in result["curve"]:
            writer.writerow([point["size"], f"{point['acc_all']:.6f}",
                             f"{point['acc_no_nan']:.6f}"])
        run.curve_csv.write_text(buf.getvalue(), encoding="utf-8")
    elif axis == "cross-framework":
        require_artifacts(run, "distill", ["student_simple_query"])
        coarse_test = _coarse_counterparts(run, cfg, eval_store, test_set)
        reports = cross_framework(run.student_file("simple_query"), coarse_test,
                                  store, cfg.world, cfg.profile,
                                  miss_rate=cfg.miss_rate,
                                  detector_seed=cfg.detector_seed,
                                  workers=workers)
        result = {name: rep.to_dict() for name, rep in reports.items()}
    elif axis == "visual-pointer":
        probe_world = replace_world(cfg.world, ambiguity_rate=cfg.vp_probe_ambiguity)
        probe_store = WorldStore()
        for i in range(cfg.vp_probe_scenes):
            probe_store.add(generate_world(
                cfg.seed * 1_000_000 + 900_000 + i, probe_world))
        gen = GenConfig(world=probe_world,
                        questions_per_scene=cfg.questions_per_scene)
        result = visual_pointer_effect(probe_store, probe_world, cfg.profile,
                                       gen, cfg.seed, miss_rate=cfg.miss_rate,
                                       detector_seed=cfg.detector_seed)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")

    path = run.ablation_file(axis)
    path.write_text(json.dumps(result, indent=2, sort_keys=True),
                    encoding="utf-8")
    write_stage_manifest(run, f"ablate:{axis}", cfg, {}, {"ablation": path})
    return result


def replace_world(world: WorldConfig, **kwargs) -> WorldConfig:
    data = world.to_dict()
    data.update({k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in kwargs.items()})
    return WorldConfig.from_dict(data)


def _coarse_counterparts(run: RunPaths, cfg: PipelineConfig,
                         eval_store: WorldStore, test_set) -> list:
    """Regenerate the test questions under the coarse framework; question ids
    pair with the fine-framework set by construction."""
    gen = cfg.gen_config(framework="coarse")
    gen.verify_consistency = False  # gt is shared with the fine counterpart
    pool = []
    for scene_id in eval_store.ids():
        pool.extend(generate_qa(eval_store.get(scene_id), gen, cfg.seed))
    wanted = {qa.question_id for qa in test_set}
    return [qa for qa in pool if qa.question_id in wanted]


def stage_ground_eval(run: RunPaths, cfg: PipelineConfig,
                      registries: tuple[str, ...] = ("baseline", "distilled")) -> dict:
    require_artifacts(run, "gen-world", ["worlds_eval"])
    _, eval_store, store = load_world_stores(run)
    cases = []
    for scene_id in eval_store.ids():
        cases.extend(generate_grounding(eval_store.get(scene_id), cfg.world,
                                        cfg.seed,
                                        per_scene=cfg.grounding_per_scene))
    result = {"cases": len(cases)}
    for name in registries:
        registry = build_registry(name, run, cfg, store)
        outcome = grounding_eval(registry, cases, store)
        result[name] = {"mean_iou": outcome["mean_iou"]}
    path = run.grounding_file()
    path.write_text(json.dumps(result, indent=2, sort_keys=True),
                    encoding="utf-8")
    write_stage_manifest(run, "ground-eval", cfg, {}, {"grounding": path})
    return result


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def _fmt_pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def stage_report(run: RunPaths, cfg: PipelineConfig) -> str:
    """Render stored eval/ablation artifacts into one deterministic report."""
    sections: list[str] = [
        "# Run report",
        "",
        f"- config digest: `{cfg.digest()}`",
        f"- seed: {cfg.seed}",
        "",
    ]
    csv_rows: list[list] = [["table", "row", "acc_all", "acc_no_nan"]]

    available = [name for name in REGISTRY_NAMES
                 if run.eval_file(name).exists()]
    if not available:
        raise MissingArtifactError("no eval_*.json artifacts; run `evaluate` first")

    sections.append("## Composite-task accuracy (test split)")
    sections.append("")
    sections.append("| configuration | acc All (%) | acc No-NaN (%) | NaN |")
    sections.append("|---|---|---|---|")
    for name in available:
        report = EvalReport.from_dict(
            json.loads(run.eval_file(name).read_text(encoding="utf-8")))
        sections.append(f"| {name} | {_fmt_pct(report.acc_all)} | "
                        f"{_fmt_pct(report.acc_no_nan)} | {report.nan_count} |")
        csv_rows.append(["composite", name, f"{report.acc_all:.6f}",
                         f"{report.acc_no_nan:.6f}"])
    sections.append("")

    dp_path = run.ablation_file("distilled-count")
    if dp_path.exists():
        data = json.loads(dp_path.read_text(encoding="utf-8"))
        sections.append("## Distilled sub-module count")
        sections.append("")
        sections.append("| distilled modules | acc All (%) | acc No-NaN (%) |")
        sections.append("|---|---|---|")
        for row in data["rows"]:
            sections.append(f"| {row['distilled_count']} | "
                            f"{_fmt_pct(row['acc_all'])} | "
                            f"{_fmt_pct(row['acc_no_nan'])} |")
            csv_rows.append(["distilled_count", str(row["distilled_count"]),
                             f"{row['acc_all']:.6f}", f"{row['acc_no_nan']:.6f}"])
        sections.append("")

    size_path = run.ablation_file("trainset-size")
    if size_path.exists():
        data = json.loads(size_path.read_text(encoding="utf-8"))
        sections.append("## Train-set size curve")
        sections.append("")
        sections.append("| triples | acc All (%) | acc No-NaN (%) |")
        sections.append("|---|---|---|")
        for point in data["curve"]:
            sections.append(f"| {point['size']} | {_fmt_pct(point['acc_all'])} |"
                            f" {_fmt_pct(point['acc_no_nan'])} |")
            csv_rows.append(["trainset_size", str(point["size"]),
                             f"{point['acc_all']:.6f}",
                             f"{point['acc_no_nan']:.6f}"])
        sections.append("")

    cf_path = run.ablation_file("cross-framework")
    if cf_path.exists():
        data = json.loads(cf_path.read_text(encoding="utf-8"))
        sections.append("## Cross-framework transfer (coarse framework)")
        sections.append("")
        sections.append("| configuration | acc All (%) | acc No-NaN (%) |")
        sections.append("|---|---|---|")
        for name in ("baseline", "transplanted"):
            entry = data[name]
            sections.append(f"| coarse {name} | {_fmt_pct(entry['acc_all'])} | "
                            f"{_fmt_pct(entry['acc_no_nan'])} |")
            csv_rows.append(["cross_framework", name,
                             f"{entry['acc_all']:.6f}",
                             f"{entry['acc_no_nan']:.6f}"])
        sections.append("")

    vp_path = run.ablation_file("visual-pointer")
    if vp_path.exists():
        data = json.loads(vp_path.read_text(encoding="utf-8"))
        sections.append("## Visual pointer probe (ambiguous patches)")
        sections.append("")
        sections.append(f"- paired questions: {data['paired_questions']} "
                        f"(ambiguous: {data['ambiguous_count']})")
        sections.append(f"- pointer on:  {_fmt_pct(data['acc_vp_ambiguous'])}%")
        sections.append(f"- pointer off: {_fmt_pct(data['acc_plain_ambiguous'])}%")
        sections.append("")
        csv_rows.append(["visual_pointer", "pointer_on",
                         f"{data['acc_vp_ambiguous']:.6f}", ""])
        csv_rows.append(["visual_pointer", "pointer_off",
                         f"{data['acc_plain_ambiguous']:.6f}", ""])

    ground_path = run.grounding_file()
    if ground_path.exists():
        data = json.loads(ground_path.read_text(encoding="utf-8"))
        sections.append("## Grounding (mean IoU)")
        sections.append("")
        for name in sorted(k for k in data if k != "cases"):
            sections.append(f"- {name}: {_fmt_pct(data[name]['mean_iou'])}%")
            csv_rows.append(["grounding", name,
                             f"{data[name]['mean_iou']:.6f}", ""])
        sections.append("")

    case_docs = _example_case_reports(run, cfg)
    if case_docs:
        sections.append("## Example trace diffs (baseline vs distilled)")
        sections.append("")
        sections.append("```")
        sections.extend(case_docs)
        sections.append("```")
        sections.append("")

    text = "\n".join(sections).rstrip() + "\n"
    run.report_md.write_text(text, encoding="utf-8")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(csv_rows)
    run.report_csv.write_text(buf.getvalue(), encoding="utf-8")
    write_stage_manifest(run, "report", cfg, {},
                         {"report_md": run.report_md,
                          "report_csv": run.report_csv})
    return text


def _example_case_reports(run: RunPaths, cfg: PipelineConfig,
                          limit: int = 2) -> list[str]:
    """Render trace diffs for the first questions the distilled framework
    fixes; empty when the needed artifacts are not there yet."""
    needed = [run.traces_file("test", "baseline"),
              run.traces_file("test", "distilled"), run.split_file("test")]
    if not all(p.exists() for p in needed):
        return []
    _, _, store = load_world_stores(run)
    qapairs = [qa_from_record(r) for r in read_jsonl(run.split_file("test"))]
    outcomes = {}
    for name in ("baseline", "distilled"):
        traces = {t.question_id: t for t in
                  (trace_from_record(r)
                   for r in read_jsonl(run.traces_file("test", name)))}
        outcomes[name] = traces
    fixed = []
    for qa in qapairs:
        base_trace = outcomes["baseline"].get(qa.question_id)
        dist_trace = outcomes["distilled"].get(qa.question_id)
        if base_trace is None or dist_trace is None:
            continue
        if (not question_correct(qa, base_trace)[0]
                and question_correct(qa, dist_trace)[0]):
            fixed.append(qa)
        if len(fixed) >= limit:
            break
    if not fixed:
        return []
    before = build_registry("baseline", run, cfg, store)
    after = build_registry("distilled", run, cfg, store)
    return [case_report(qa, before, after, store,
                        before_name="baseline", after_name="distilled")
            for qa in fixed]


# ---------------------------------------------------------------------------
# Full recipe
# ---------------------------------------------------------------------------

def run_full_recipe(base_dir: str | Path, cfg: PipelineConfig,
                    workers: int = 1) -> RunPaths:
    """Every stage end to end; byte-identical reports for identical
    (seed, config)."""
    run = RunPaths(base_dir)
    stage_gen_world(run, cfg)
    stage_gen_qa(run, cfg)
    stage_build_dataset(run, cfg)
    stage_run_programs(run, cfg, "train", "baseline", workers=workers)
    stage_harvest(run, cfg)
    stage_distill(run, cfg)
    for registry_name in REGISTRY_NAMES:
        stage_run_programs(run, cfg, "test", registry_name, workers=workers)
        stage_evaluate(run, cfg, registry_name)
    stage_ablate(run, cfg, "distilled-count", workers=workers)
    stage_ablate(run, cfg, "trainset-size", workers=workers)
    stage_ablate(run, cfg, "cross-framework", workers=workers)
    stage_ablate(run, cfg, "visual-pointer", workers=workers)
    stage_ground_eval(run, cfg)
    stage_report(run, cfg)
    return run
