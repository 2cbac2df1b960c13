"""End-to-end pipeline stages behind the command-line entry point.

Each stage reads and writes one shared artifact tree under an output root:

    run_config.json    resolved configuration, persisted verbatim
    run_meta.json      per-stage completion timestamps (the only timestamps)
    dataset/           images/, masks/, manifest.jsonl, vocab.json, config.json
    teachers/<task>/   checkpoint (params/, meta.json) + train_log.csv
    teachers/teacher_metrics.json
    student/           checkpoint/, train_log.csv, frozen_checksums.json,
                       phase_metrics.json
    explain/<id>/      heatmap PNGs, heatmap_meta.json, lime_<class>.json
    story/<id>/<aud>/  index.html, story.json, assets/*.png
    metrics.json, metrics.csv

Every stage is deterministic given the resolved config, so reruns overwrite
artifacts with identical bytes; run_meta.json is the single exception.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .distillation import (
    DistillConfig,
    TensorSplit,
    agreement_metrics,
    caption_loss,
    classification_loss,
    default_teacher_config,
    dice_loss,
    distill_student,
    prepare_tensors,
    teacher_metric,
    train_teacher,
)
from .errors import ConfigurationError, DomainError, LockError, MissingArtifactError
from .interpretability import (
    LimeConfig,
    PROVENANCES,
    attention_heatmaps,
    grad_cam,
    grad_cam_pp,
    lime_explain,
    lime_heatmap,
    overlay,
    segment_grid,
    write_heatmaps,
    write_rgb_png,
)
from .metrics import dice_score, macro_f1, token_accuracy
from .models import (
    MultiTaskStudent,
    TASKS,
    build_teacher,
    images_to_tensor,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
    student_forward,
)
from .storytelling import (
    AUDIENCES,
    StoryEvidence,
    build_story,
    cam_laterality,
    predicted_classes,
    render_html,
    render_json,
)
from .synthetic import DatasetConfig, Sample, generate_dataset, load_dataset, split, write_dataset

# Fixed per-task initialization seeds for the teacher networks; tuned together
# with the presets in default_teacher_config so every teacher clears its floor.
TEACHER_SEEDS = {"abnormality": 101, "segmentation": 102, "report": 103}


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for every pipeline stage.

    ``seed`` drives student initialization, distillation batch order, and the
    per-sample LIME draws; the dataset keeps its own master_seed so changing
    the training seed never silently regenerates different data.
    """

    dataset: DatasetConfig = DatasetConfig()
    distill: DistillConfig = DistillConfig()
    lime: LimeConfig = LimeConfig()
    teachers: dict = dataclasses.field(default_factory=dict)
    methods: tuple[str, ...] = PROVENANCES
    audiences: tuple[str, ...] = AUDIENCES
    threshold: float = 0.5
    lime_segments: int = 6
    seed: int = 103
    out: str = "out"

    def validate(self) -> None:
        self.dataset.validate()
        self.distill.validate()
        try:
            self.lime.validate()
        except DomainError as exc:
            raise ConfigurationError(f"lime: {exc}") from exc
        allowed = {"epochs", "lr", "batch_size", "quality_floor", "seed"}
        for task, overrides in self.teachers.items():
            if task not in TASKS:
                raise ConfigurationError(
                    f"teachers: unknown task {task!r}; valid tasks: " + ", ".join(TASKS)
                )
            if not isinstance(overrides, dict):
                raise ConfigurationError(f"teachers.{task}: must be an object")
            for key in overrides:
                if key not in allowed:
                    raise ConfigurationError(
                        f"teachers.{task}: unknown field {key!r}; valid fields: "
                        + ", ".join(sorted(allowed))
                    )
        if not self.methods:
            raise ConfigurationError("methods: must not be empty")
        for m in self.methods:
            if m not in PROVENANCES:
                raise ConfigurationError(
                    f"methods: unknown method {m!r}; valid methods: "
                    + ", ".join(PROVENANCES)
                )
        if not self.audiences:
            raise ConfigurationError("audiences: must not be empty")
        for a in self.audiences:
            if a not in AUDIENCES:
                raise ConfigurationError(
                    f"audiences: unknown audience {a!r}; valid audiences: "
                    + ", ".join(AUDIENCES)
                )
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(
                f"threshold: must be in (0, 1), got {self.threshold}"
            )
        if not 2 <= self.lime_segments <= self.dataset.image_size:
            raise ConfigurationError(
                f"lime_segments: must be in [2, {self.dataset.image_size}], "
                f"got {self.lime_segments}"
            )
        if self.seed < 0:
            raise ConfigurationError(f"seed: must be >= 0, got {self.seed}")
        if not self.out:
            raise ConfigurationError("out: output root must not be empty")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "distill": dataclasses.asdict(self.distill)
            | {"phase_order": list(self.distill.phase_order)},
            "lime": dataclasses.asdict(self.lime),
            "teachers": {task: dict(over) for task, over in sorted(self.teachers.items())},
            "methods": list(self.methods),
            "audiences": list(self.audiences),
            "threshold": self.threshold,
            "lime_segments": self.lime_segments,
            "seed": self.seed,
            "out": self.out,
        }

    def sha256(self) -> str:
        """Digest of the semantic configuration; the output root is excluded
        so the same run written to two places hashes identically."""
        payload = {k: v for k, v in self.to_dict().items() if k != "out"}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _build_section(name: str, cls, payload) -> object:
    if not isinstance(payload, dict):
        raise ConfigurationError(f"{name}: must be an object, got {type(payload).__name__}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from exc


def run_config_from_dict(d: dict) -> RunConfig:
    """Build a RunConfig from a JSON-shaped dict, rejecting unknown fields."""
    if not isinstance(d, dict):
        raise ConfigurationError(f"config: must be an object, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in d:
        if key not in known:
            raise ConfigurationError(f"config: unknown field {key!r}")
    kwargs: dict = {}
    if "dataset" in d:
        try:
            kwargs["dataset"] = DatasetConfig.from_dict(d["dataset"])
        except TypeError as exc:
            raise ConfigurationError(f"dataset: {exc}") from exc
    if "distill" in d:
        payload = dict(d["distill"])
        if "phase_order" in payload:
            payload["phase_order"] = tuple(payload["phase_order"])
        kwargs["distill"] = _build_section("distill", DistillConfig, payload)
    if "lime" in d:
        kwargs["lime"] = _build_section("lime", LimeConfig, dict(d["lime"]))
    if "teachers" in d:
        if not isinstance(d["teachers"], dict):
            raise ConfigurationError("teachers: must be an object keyed by task")
        kwargs["teachers"] = {task: dict(over) for task, over in d["teachers"].items()}
    for key in ("methods", "audiences"):
        if key in d:
            kwargs[key] = tuple(d[key])
    for key in ("threshold", "lime_segments", "seed", "out"):
        if key in d:
            kwargs[key] = d[key]
    run = RunConfig(**kwargs)
    run.validate()
    return run


# ---------------------------------------------------------------------------
# shared plumbing


@contextmanager
def output_lock(root: Path):
    """One writer per output root, via an O_EXCL lock file."""
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"output root {root} is locked by another run "
            f"(remove {lock} if that run is dead)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _persist_config(run: RunConfig, root: Path) -> None:
    write_json(root / "run_config.json", run.to_dict())


def _mark_done(root: Path, stage: str) -> None:
    meta_path = root / "run_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta.setdefault("stages", {})[stage] = datetime.now(timezone.utc).isoformat()
    write_json(meta_path, meta)


def _require(path: Path, what: str, hint: str) -> None:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}; run `{hint}` first")


def _load_data(root: Path):
    _require(root / "dataset" / "manifest.jsonl", "dataset", "gen-data")
    return load_dataset(root / "dataset")


def _splits(samples: list[Sample], cfg: DatasetConfig) -> tuple[TensorSplit, TensorSplit, TensorSplit, list[Sample]]:
    train_s, val_s, test_s = split(samples, cfg.split_ratios, cfg.master_seed)
    return (
        prepare_tensors(train_s, cfg.max_report_len),
        prepare_tensors(val_s, cfg.max_report_len),
        prepare_tensors(test_s, cfg.max_report_len),
        test_s,
    )


def _load_teachers(root: Path, n_classes: int, vocab_size: int) -> dict[str, torch.nn.Module]:
    teachers = {}
    for task in TASKS:
        ckpt = root / "teachers" / task
        _require(ckpt / "meta.json", f"{task} teacher checkpoint", "train-teachers")
        t = build_teacher(task, n_classes, vocab_size, seed=TEACHER_SEEDS[task])
        load_checkpoint(t, ckpt)
        t.eval()
        teachers[task] = t
    return teachers


def _load_student(root: Path, n_classes: int, vocab_size: int, seed: int) -> MultiTaskStudent:
    ckpt = root / "student" / "checkpoint"
    _require(ckpt / "meta.json", "student checkpoint", "distill")
    student = MultiTaskStudent(n_classes, vocab_size, seed=seed)
    load_checkpoint(student, ckpt)
    student.eval()
    return student


def _resolve_samples(
    samples: list[Sample], test_s: list[Sample], sample_ids: list[int] | None
) -> list[Sample]:
    if sample_ids is None:
        return test_s[:3]
    by_index = {s.index: s for s in samples}
    chosen = []
    for idx in sample_ids:
        if idx not in by_index:
            raise ConfigurationError(
                f"samples: index {idx} not in dataset (0..{len(samples) - 1})"
            )
        chosen.append(by_index[idx])
    return chosen


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(run: RunConfig, root: Path) -> Path:
    run.validate()
    with output_lock(root):
        _persist_config(run, root)
        samples, vocab = generate_dataset(run.dataset)
        out = write_dataset(samples, vocab, run.dataset, root / "dataset")
        _mark_done(root, "gen-data")
    return out


def stage_train_teachers(run: RunConfig, root: Path, only: str | None = None) -> dict[str, float]:
    run.validate()
    if only is not None and only not in TASKS:
        raise ConfigurationError(f"only: unknown task {only!r}; valid tasks: " + ", ".join(TASKS))
    with output_lock(root):
        _persist_config(run, root)
        samples, vocab, cfg = _load_data(root)
        train, val, _, _ = _splits(samples, cfg)
        metrics_path = root / "teachers" / "teacher_metrics.json"
        best: dict[str, float] = (
            json.loads(metrics_path.read_text()) if metrics_path.exists() else {}
        )
        for task in TASKS:
            if only is not None and task != only:
                continue
            tcfg = dataclasses.replace(
                default_teacher_config(task, seed=TEACHER_SEEDS[task]),
                **run.teachers.get(task, {}),
            )
            teacher = build_teacher(task, len(cfg.classes), len(vocab), seed=tcfg.seed)
            records = train_teacher(teacher, train, val, tcfg)
            best[task] = max(r["metric"] for r in records)
            ckpt = root / "teachers" / task
            save_checkpoint(teacher, ckpt, extra_meta={"task": task, "val_metric": best[task]})
            lines = ["epoch,loss,metric"] + [
                f"{r['epoch']},{r['loss']:.6f},{r['metric']:.6f}" for r in records
            ]
            (ckpt / "train_log.csv").write_text("\n".join(lines) + "\n")
        write_json(metrics_path, best)
        _mark_done(root, "train-teachers")
    return best


def stage_distill(run: RunConfig, root: Path) -> dict[str, float]:
    run.validate()
    with output_lock(root):
        _persist_config(run, root)
        samples, vocab, cfg = _load_data(root)
        train, val, _, _ = _splits(samples, cfg)
        teachers = _load_teachers(root, len(cfg.classes), len(vocab))
        student = MultiTaskStudent(len(cfg.classes), len(vocab), seed=run.seed)
        dcfg = dataclasses.replace(run.distill, seed=run.seed)
        log = distill_student(student, teachers, train, val, dcfg)
        save_checkpoint(
            student, root / "student" / "checkpoint", extra_meta={"seed": run.seed}
        )
        log.write(root / "student")
        _mark_done(root, "distill")
    end = agreement_metrics(student, teachers, val)
    student.eval()
    return end


def _lime_seed(run: RunConfig, sample_index: int, class_id: int) -> int:
    return run.seed + 1000 * sample_index + class_id


def _class_logit_fn(student: MultiTaskStudent, class_id: int):
    def fn(batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = student(images_to_tensor(np.asarray(batch, dtype=np.float64)))
        return out.class_logits[:, class_id].numpy()

    return fn


def _sample_lime(run: RunConfig, student: MultiTaskStudent, sample: Sample, class_id: int):
    segmap = segment_grid(sample.image, run.lime_segments)
    lcfg = dataclasses.replace(run.lime, seed=_lime_seed(run, sample.index, class_id))
    return lime_explain(_class_logit_fn(student, class_id), sample.image, segmap, lcfg), segmap


def stage_explain(
    run: RunConfig, root: Path, sample_ids: list[int] | None = None
) -> list[Path]:
    run.validate()
    with output_lock(root):
        _persist_config(run, root)
        samples, vocab, cfg = _load_data(root)
        _, _, _, test_s = _splits(samples, cfg)
        chosen = _resolve_samples(samples, test_s, sample_ids)
        student = _load_student(root, len(cfg.classes), len(vocab), run.seed)
        outdirs = []
        for s in chosen:
            outdir = root / "explain" / f"{s.index:06}"
            out = student_forward(student, s.image)
            positives = predicted_classes(out, run.threshold)
            heatmaps = {}
            for class_id in positives:
                name = cfg.classes[class_id]
                if "gradcam" in run.methods:
                    heatmaps[f"gradcam_{name}"] = grad_cam(student, s.image, class_id)
                if "gradcampp" in run.methods:
                    heatmaps[f"gradcampp_{name}"] = grad_cam_pp(student, s.image, class_id)
            if "attention" in run.methods:
                maps = attention_heatmaps(out.step_attention, out.feature_grid, s.image.shape)
                for i, hm in enumerate(maps):
                    heatmaps[f"attention_{i:02}"] = hm
            lime_jsons = {}
            if "lime" in run.methods:
                for class_id in positives:
                    name = cfg.classes[class_id]
                    explanation, segmap = _sample_lime(run, student, s, class_id)
                    heatmaps[f"lime_{name}"] = lime_heatmap(explanation, segmap)
                    lime_jsons[f"lime_{name}.json"] = explanation.to_json()
            write_heatmaps(heatmaps, outdir)
            for fname, text in lime_jsons.items():
                (outdir / fname).write_text(text + "\n")
            outdirs.append(outdir)
        _mark_done(root, "explain")
    return outdirs


def _sample_losses(
    student: MultiTaskStudent, tensors: TensorSplit
) -> dict[str, float]:
    with torch.no_grad():
        out = student(tensors.images, tokens=tensors.reports)
        return {
            "classification": float(classification_loss(out.class_logits, tensors.labels)),
            "segmentation": float(dice_loss(out.mask_logits, tensors.masks)),
            "report": float(caption_loss(out.caption_logits, tensors.reports[:, 1:])),
        }


def stage_story(
    run: RunConfig, root: Path, sample_ids: list[int] | None = None
) -> list[Path]:
    run.validate()
    with output_lock(root):
        _persist_config(run, root)
        samples, vocab, cfg = _load_data(root)
        _, _, _, test_s = _splits(samples, cfg)
        chosen = _resolve_samples(samples, test_s, sample_ids)
        student = _load_student(root, len(cfg.classes), len(vocab), run.seed)
        teachers = _load_teachers(root, len(cfg.classes), len(vocab))
        metadata = {
            "run_config_sha256": run.sha256(),
            "seed": run.seed,
            "student_checksum": parameter_checksum(student),
        }
        trees = []
        for s in chosen:
            out = student_forward(student, s.image)
            positives = predicted_classes(out, run.threshold)
            assets: dict[str, np.ndarray] = {}
            mask_probs = 1.0 / (1.0 + np.exp(-out.mask_logits))
            assets["assets/segmentation.png"] = overlay(s.image, mask_probs)
            cam_overlays, campp_overlays, lateralities, lime_tables = {}, {}, {}, {}
            for class_id in positives:
                name = cfg.classes[class_id]
                cam = grad_cam(student, s.image, class_id)
                campp = grad_cam_pp(student, s.image, class_id)
                cam_overlays[class_id] = f"assets/cam_gradcam_{name}.png"
                campp_overlays[class_id] = f"assets/cam_gradcampp_{name}.png"
                assets[cam_overlays[class_id]] = overlay(s.image, cam)
                assets[campp_overlays[class_id]] = overlay(s.image, campp)
                lateralities[class_id] = cam_laterality(cam.values)
                lime_tables[class_id], _ = _sample_lime(run, student, s, class_id)
            att_maps = attention_heatmaps(out.step_attention, out.feature_grid, s.image.shape)
            attention_images = []
            for i, (tok, hm) in enumerate(zip(out.tokens, att_maps)):
                rel = f"assets/attention_{i:02}.png"
                attention_images.append((vocab.token_of(tok), rel))
                assets[rel] = overlay(s.image, hm)
            tensors = prepare_tensors([s], cfg.max_report_len)
            evidence = StoryEvidence(
                sample_id=s.index,
                class_names=cfg.classes,
                report_text=vocab.decode(list(out.tokens)),
                segmentation_overlay="assets/segmentation.png",
                cam_overlays=cam_overlays,
                campp_overlays=campp_overlays,
                attention_images=tuple(attention_images),
                lime_tables=lime_tables,
                lateralities=lateralities,
                losses=_sample_losses(student, tensors),
                agreement=agreement_metrics(student, teachers, tensors),
                threshold=run.threshold,
            )
            student.eval()
            for audience in run.audiences:
                audir = root / "story" / f"{s.index:06}" / audience
                story = build_story(out, evidence, audience, metadata)
                for rel in story.image_paths():
                    (audir / rel).parent.mkdir(parents=True, exist_ok=True)
                    write_rgb_png(audir / rel, assets[rel])
                (audir / "story.json").parent.mkdir(parents=True, exist_ok=True)
                (audir / "story.json").write_text(render_json(story))
                render_html(story, audir)
                trees.append(audir)
        _mark_done(root, "story")
    return trees


def _student_metrics(student: MultiTaskStudent, data: TensorSplit, batch_size: int = 64) -> dict[str, float]:
    """Student quality vs ground truth, with the same metric per task as teachers."""
    cls_p, seg_p, cap_p = [], [], []
    with torch.no_grad():
        for start in range(0, data.images.shape[0], batch_size):
            x = data.images[start : start + batch_size]
            reports = data.reports[start : start + batch_size]
            out = student(x, tokens=reports)
            cls_p.append((torch.sigmoid(out.class_logits) >= 0.5).numpy())
            seg_p.append((torch.sigmoid(out.mask_logits) >= 0.5).numpy())
            cap_p.append(out.caption_logits.argmax(dim=-1).numpy())
    return {
        "abnormality": macro_f1(np.concatenate(cls_p), data.labels.numpy() >= 0.5),
        "segmentation": dice_score(np.concatenate(seg_p), data.masks.numpy() >= 0.5),
        "report": token_accuracy(np.concatenate(cap_p), data.reports[:, 1:].numpy()),
    }


def stage_evaluate(run: RunConfig, root: Path) -> dict[str, dict[str, float]]:
    run.validate()
    with output_lock(root):
        _persist_config(run, root)
        samples, vocab, cfg = _load_data(root)
        _, _, test, test_s = _splits(samples, cfg)
        if not test_s:
            raise ConfigurationError(
                f"split_ratios: test split is empty under {cfg.split_ratios}"
            )
        student = _load_student(root, len(cfg.classes), len(vocab), run.seed)
        teachers = _load_teachers(root, len(cfg.classes), len(vocab))
        student_m = _student_metrics(student, test)
        agreement = agreement_metrics(student, teachers, test)
        student.eval()
        report = {
            task: {
                "student": round(student_m[task], 6),
                "teacher": round(teacher_metric(teachers[task], test), 6),
                "agreement": round(agreement[task], 6),
            }
            for task in ("abnormality", "segmentation", "report")
        }
        write_json(root / "metrics.json", report)
        lines = ["task,student,teacher,agreement"] + [
            f"{task},{v['student']:.6f},{v['teacher']:.6f},{v['agreement']:.6f}"
            for task, v in report.items()
        ]
        (root / "metrics.csv").write_text("\n".join(lines) + "\n")
        _mark_done(root, "evaluate")
    return report


def run_pipeline(
    run: RunConfig, root: Path, sample_ids: list[int] | None = None
) -> dict[str, dict[str, float]]:
    """All six stages in order; returns the final metrics report."""
    stage_gen_data(run, root)
    stage_train_teachers(run, root)
    stage_distill(run, root)
    stage_explain(run, root, sample_ids)
    stage_story(run, root, sample_ids)
    return stage_evaluate(run, root)
