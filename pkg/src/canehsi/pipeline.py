"""End-to-end run: generate -> calibrate -> segment -> analyze -> patch -> svm -> resnet.

Every stage writes its artifacts under ``RunConfig.out``; later stages read
them back from disk when an earlier stage is not part of the run, so a run
can be resumed stage by stage.  Nothing time- or host-dependent is written,
so the same config and seed give byte-identical output trees.

Output layout::

    config.json                      resolved configuration (without ``out``)
    scenes/{stem}_{raw,dark,truth}.hsc, {stem}_mask.pgm, {stem}.json, manifest.json
    calibrated/{stem}.hsc, {stem}_report.json
    segmentation/model.json, report.json; masks/{stem}.pgm
    analysis/mean_curve_class{k}.csv, sam_map_{stem}.pgm/.json, summary.json
    patches/n{n}_s{stride}/{train,validation,test,train_aug}.hps, counts.json
    svm/n{n}_s{stride}/{svc,svr}.json, {svc,svr}_{val,test}.json, svc_test_confusion.csv
    resnet/n{n}_s{stride}/net.bin, curves.csv, curves.svg, eval_test.json
    summary.csv                      one row per (patch_size, stride)
    svm_summary.csv
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import resnet as rn
from .calibration import CalibrationParams, calibrate
from .hypercube import (
    SpectralCurve,
    load_cube,
    load_mask_pgm,
    save_cube,
    save_curve_csv,
    save_mask_pgm,
)
from .patches import (
    PatchSet,
    SplitResult,
    augment_set,
    extract_patches,
    load_patchset,
    save_patchset,
    split,
    split_by_scene,
)
from .segmentation import iou, mask_clean, sample_pixels, segment, train_pixel_svm
from .spectral import laplacian_map, sam_angle
from .svm import evaluate_model, save_model, train_svc, train_svr
from .synthgen import RATING_CLASSES, SceneSpec, dataset_specs, environment_preset, generate_scene, write_scene

log = logging.getLogger("canehsi")

STAGES = ("generate", "calibrate", "segment", "analyze", "patch", "svm", "resnet")
SUMMARY_COLUMNS = ("patch_size", "stride", "n_train", "n_val", "n_test", "environment", "train_error", "val_accuracy", "test_accuracy")
SVM_COLUMNS = ("patch_size", "stride", "model", "n_train", "val_accuracy", "test_accuracy")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --- configuration -----------------------------------------------------------


@dataclass
class SegmentationConfig:
    mode: str = "svm"  # "svm": learned pixel classifier; "truth": generator masks
    annotated_scenes: int = 3  # scenes whose truth masks act as manual annotations
    pixels_per_class: int = 1000  # per annotated scene
    lam: float = 1e-3
    epochs: int = 5
    min_component_px: int = 20

    def validate(self) -> None:
        if self.mode not in ("svm", "truth"):
            raise ValueError(f"segmentation.mode must be 'svm' or 'truth', got {self.mode!r}")
        if self.annotated_scenes < 1 or self.pixels_per_class < 1 or self.epochs < 1 or self.lam <= 0:
            raise ValueError("segmentation parameters must be positive")


@dataclass
class PatchConfig:
    sizes: list = field(default_factory=lambda: [[19, 9]])  # (n, stride) pairs, one summary row each
    augment_multiplicity: int = 3
    split_by_scene: bool = False
    stratified: bool = True

    def validate(self) -> None:
        if not self.sizes:
            raise ValueError("patches.sizes must list at least one (n, stride) pair")
        for pair in self.sizes:
            if len(pair) != 2 or min(pair) < 1:
                raise ValueError(f"bad (n, stride) pair {pair}")
        if self.augment_multiplicity < 0:
            raise ValueError("augment_multiplicity must be >= 0")


@dataclass
class SvmConfig:
    lam: float = 0.1
    epochs: int = 300
    svr: bool = True
    svr_lam: float = 0.01
    svr_epochs: int = 100
    epsilon_tube: float = 0.5
    use_augmented: bool = False

    def validate(self) -> None:
        if min(self.lam, self.svr_lam, self.epsilon_tube) <= 0 or min(self.epochs, self.svr_epochs) < 1:
            raise ValueError("svm parameters must be positive")


@dataclass
class ResnetConfig:
    stem_channels: int = 16
    num_blocks: int = 3
    channels_per_stage: list | None = None
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: list = field(default_factory=lambda: [0.6, 0.85])
    batch_size: int = 32
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("resnet epochs/batch_size must be >= 1 and lr >= 0")


@dataclass
class RunConfig:
    stages: list = field(default_factory=lambda: list(STAGES))
    environment: str = "indoor"
    per_class: int = 6
    scene: dict = field(default_factory=dict)  # SceneSpec field overrides on top of the environment preset
    calibration: CalibrationParams = field(default_factory=CalibrationParams)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    patches: PatchConfig = field(default_factory=PatchConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    resnet: ResnetConfig = field(default_factory=ResnetConfig)
    write_scenes: bool = True
    seed: int = 0
    out: str = "run"

    _NESTED = {
        "calibration": CalibrationParams,
        "segmentation": SegmentationConfig,
        "patches": PatchConfig,
        "svm": SvmConfig,
        "resnet": ResnetConfig,
    }

    def scene_spec(self) -> SceneSpec:
        base = SceneSpec(**environment_preset(self.environment))
        return SceneSpec.from_json({**base.to_json(), **self.scene})

    def validate(self) -> None:
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages {unknown}; choose from {list(STAGES)}")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        self.scene_spec().validate()
        self.calibration.validate()
        for name in ("segmentation", "patches", "svm", "resnet"):
            getattr(self, name).validate()
        if not str(self.out):
            raise ValueError("out path is empty")

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for name in self._NESTED:
            d[name] = dataclasses.asdict(d[name])
        d["stages"] = list(self.stages)
        d["out"] = str(self.out)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        for name, typ in cls._NESTED.items():
            if name in d:
                sub = dict(d[name])
                bad = set(sub) - {f.name for f in dataclasses.fields(typ)}
                if bad:
                    raise ValueError(f"unknown {name} fields: {sorted(bad)}")
                d[name] = typ(**sub)
        return cls(**d)


def apply_override(config: dict, assignment: str) -> dict:
    """``"resnet.epochs=5"`` -> nested dict update; the value is parsed as JSON when possible."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ValueError(f"override must look like key.path=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return config


# --- summary -----------------------------------------------------------------


@dataclass
class SummaryRow:
    patch_size: int
    stride: int
    n_train: int
    n_val: int
    n_test: int
    environment: str
    train_error: float
    val_accuracy: float
    test_accuracy: float


@dataclass
class PipelineSummary:
    rows: list = field(default_factory=list)
    svm_rows: list = field(default_factory=list)  # dicts keyed by SVM_COLUMNS

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(SUMMARY_COLUMNS)
            for r in self.rows:
                wr.writerow(
                    [r.patch_size, r.stride, r.n_train, r.n_val, r.n_test, r.environment]
                    + [f"{v:.6f}" for v in (r.train_error, r.val_accuracy, r.test_accuracy)]
                )

    def save_svm_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(SVM_COLUMNS)
            for r in self.svm_rows:
                wr.writerow([r["patch_size"], r["stride"], r["model"], r["n_train"], f"{r['val_accuracy']:.6f}", f"{r['test_accuracy']:.6f}"])


def load_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- curves ------------------------------------------------------------------


def _svg_plot(report: rn.TrainReport, width: int = 640, height: int = 360) -> str:
    series = [
        ("train_loss", "#d62728", [e.train_loss for e in report.epochs]),
        ("train_acc", "#1f77b4", [e.train_accuracy for e in report.epochs]),
        ("val_acc", "#2ca02c", [e.val_accuracy for e in report.epochs]),
    ]
    left, right, top, bottom = 50, 20, 20, 40
    pw, ph = width - left - right, height - top - bottom
    n = len(report.epochs)
    ymax = max(1.0, max(max(v) for _, _, v in series))

    def xy(i, v):
        x = left + (pw * i / (n - 1) if n > 1 else pw / 2)
        y = top + ph * (1 - v / ymax)
        return f"{x:.2f},{y:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">epoch (1-{n})</text>',
        f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-size="10">{ymax:.2f}</text>',
        f'<text x="{left - 6}" y="{top + ph}" text-anchor="end" font-size="10">0</text>',
    ]
    for k, (name, colour, vals) in enumerate(series):
        pts = " ".join(xy(i, v) for i, v in enumerate(vals))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{left + pw - 90}" y="{top + 14 + 14 * k}" font-size="11" fill="{colour}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_curves(report: rn.TrainReport, out_dir, svg: bool = True) -> list[Path]:
    """Write ``curves.csv`` (epoch,train_loss,train_acc,val_acc) and optionally ``curves.svg``."""
    if not report.epochs:
        raise ValueError("training report has no epochs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "curves.csv"]
    report.save_csv(paths[0])
    if svg:
        paths.append(out / "curves.svg")
        paths[1].write_text(_svg_plot(report))
    return paths


# --- helpers -----------------------------------------------------------------


def _dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stem(i: int, label: int) -> str:
    return f"scene{i:03d}_c{label}"


class _Run:
    """Mutable state passed between stages; fields are filled lazily from disk."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out)
        self.scenes = None  # list of (stem, raw, dark, truth_cube, truth_mask, label)
        self.calibrated = None  # stem -> HyperCube
        self.masks = None  # stem -> Mask
        self.splits = {}  # (n, stride) -> (SplitResult, augmented train PatchSet)
        self.summary = PipelineSummary()

    # scenes ------------------------------------------------------------------
    def need_scenes(self):
        if self.scenes is None:
            manifest = json.loads((self.out / "scenes" / "manifest.json").read_text())
            d = self.out / "scenes"
            self.scenes = [
                (
                    m["stem"],
                    load_cube(d / f"{m['stem']}_raw.hsc"),
                    load_cube(d / f"{m['stem']}_dark.hsc"),
                    load_cube(d / f"{m['stem']}_truth.hsc"),
                    load_mask_pgm(d / f"{m['stem']}_mask.pgm"),
                    int(m["label"]),
                )
                for m in manifest["scenes"]
            ]
        return self.scenes

    def need_calibrated(self):
        if self.calibrated is None:
            self.calibrated = {s[0]: load_cube(self.out / "calibrated" / f"{s[0]}.hsc") for s in self.need_scenes()}
        return self.calibrated

    def need_masks(self):
        if self.masks is None:
            d = self.out / "masks"
            if d.is_dir():
                self.masks = {s[0]: load_mask_pgm(d / f"{s[0]}.pgm") for s in self.need_scenes()}
            else:
                self.masks = {s[0]: s[4] for s in self.need_scenes()}
        return self.masks

    def need_split(self, n: int, stride: int):
        key = (n, stride)
        if key not in self.splits:
            d = self.out / "patches" / f"n{n}_s{stride}"
            sr = SplitResult(*(load_patchset(d / f"{p}.hps") for p in ("train", "validation", "test")))
            self.splits[key] = (sr, load_patchset(d / "train_aug.hps"))
        return self.splits[key]


# --- stages ------------------------------------------------------------------


def _stage_generate(run: _Run) -> None:
    cfg = run.config
    specs = dataset_specs(cfg.scene_spec(), cfg.per_class, cfg.seed)
    scenes, manifest = [], []
    for i, spec in enumerate(specs):
        raw, dark, truth = generate_scene(spec)
        stem = _stem(i, truth.label)
        if cfg.write_scenes:
            write_scene(run.out / "scenes", stem, raw, dark, truth)
        scenes.append((stem, raw, dark, truth.reflectance, truth.mask, truth.label))
        manifest.append({"stem": stem, "label": truth.label, "spec": spec.to_json()})
    _dump({"scenes": manifest, "environment": cfg.environment}, run.out / "scenes" / "manifest.json")
    run.scenes = scenes


def _stage_calibrate(run: _Run) -> None:
    out = run.out / "calibrated"
    out.mkdir(parents=True, exist_ok=True)
    run.calibrated = {}
    for stem, raw, dark, _, _, _ in run.need_scenes():
        cube, report = calibrate(raw, dark, run.config.calibration)
        save_cube(cube, out / f"{stem}.hsc")
        _dump(report.to_json(), out / f"{stem}_report.json")
        run.calibrated[stem] = cube


def _stage_segment(run: _Run) -> None:
    cfg = run.config.segmentation
    scenes = run.need_scenes()
    cubes = run.need_calibrated()
    out = run.out / "segmentation"
    mask_dir = run.out / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    model = None
    if cfg.mode == "svm":
        k = min(cfg.annotated_scenes, len(scenes))
        picks = np.linspace(0, len(scenes) - 1, k).round().astype(int)
        samples = []
        for j, idx in enumerate(sorted(set(picks.tolist()))):
            stem, *_, truth_mask, _ = scenes[idx]
            samples += sample_pixels(cubes[stem], truth_mask, cfg.pixels_per_class, [run.config.seed, j])
        model = train_pixel_svm(samples, cfg.lam, cfg.epochs, run.config.seed)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "model.json")
    run.masks = {}
    ious = {}
    for stem, *_, truth_mask, _ in scenes:
        if model is None:
            mask = truth_mask
        else:
            mask = mask_clean(segment(cubes[stem], model), cfg.min_component_px)
        save_mask_pgm(mask, mask_dir / f"{stem}.pgm")
        run.masks[stem] = mask
        ious[stem] = iou(mask, truth_mask)
    vals = list(ious.values())
    _dump({"mode": cfg.mode, "iou": ious, "min_iou": min(vals), "mean_iou": float(np.mean(vals))}, out / "report.json")


def _stage_analyze(run: _Run) -> None:
    scenes = run.need_scenes()
    cubes = run.need_calibrated()
    masks = run.need_masks()
    out = run.out / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    curves, texture = {}, {}
    for k in RATING_CLASSES:
        members = [s[0] for s in scenes if s[5] == k and masks[s[0]].count > 0]
        if not members:
            continue
        # pooled over every foreground pixel of the class, not a mean of per-scene means
        stacked = np.concatenate([cubes[m].data[masks[m].bits] for m in members]).astype(np.float64)
        curves[k] = SpectralCurve(cubes[members[0]].wavelengths_nm, stacked.mean(axis=0))
        save_curve_csv(curves[k], out / f"mean_curve_class{k}.csv")
        first = members[0]
        smap = laplacian_map(cubes[first], masks[first], "mean_angle")
        smap.save_pgm(out / f"sam_map_{first}.pgm", out / f"sam_map_{first}.json")
        texture[str(k)] = float(smap.values[smap.valid.bits].mean()) if smap.valid.bits.any() else None
    pair_angles = {
        f"{a}-{b}": sam_angle(curves[a].values, curves[b].values) for a in curves for b in curves if a < b
    }
    _dump({"mean_neighbour_angle": texture, "class_curve_angles": pair_angles}, out / "summary.json")


def _stage_patch(run: _Run) -> None:
    cfg = run.config.patches
    scenes = run.need_scenes()
    cubes = run.need_calibrated()
    masks = run.need_masks()
    lookup = {i: (cubes[s[0]], masks[s[0]]) for i, s in enumerate(scenes)}
    for n, stride in cfg.sizes:
        n, stride = int(n), int(stride)
        d = run.out / "patches" / f"n{n}_s{stride}"
        d.mkdir(parents=True, exist_ok=True)
        parts = [extract_patches(lookup[i][0], lookup[i][1], s[5], n, stride, scene_id=i) for i, s in enumerate(scenes)]
        allp = PatchSet([p for ps in parts for p in ps], n, scenes[0][1].bands)
        if len(allp) == 0:
            raise ValueError(f"no full-foreground {n}x{n} patches at stride {stride}")
        if cfg.split_by_scene:
            sr = split_by_scene(allp, seed=run.config.seed)
        else:
            sr = split(allp, seed=run.config.seed, stratified=cfg.stratified)
        aug = augment_set(sr.train, lookup, cfg.augment_multiplicity, run.config.seed)
        train_aug = sr.train.extend(aug)
        for name, ps in (("train", sr.train), ("validation", sr.validation), ("test", sr.test), ("train_aug", train_aug)):
            save_patchset(ps, d / f"{name}.hps")
        counts = {
            name: {"n": len(ps), "per_class": {str(k): v for k, v in sorted(ps.class_counts.items())}}
            for name, ps in (("all", allp), ("train", sr.train), ("validation", sr.validation), ("test", sr.test), ("train_aug", train_aug))
        }
        _dump(counts, d / "counts.json")
        run.splits[(n, stride)] = (sr, train_aug)


def _stage_svm(run: _Run) -> None:
    cfg = run.config.svm
    for n, stride in run.config.patches.sizes:
        sr, train_aug = run.need_split(int(n), int(stride))
        train = train_aug if cfg.use_augmented else sr.train
        d = run.out / "svm" / f"n{n}_s{stride}"
        d.mkdir(parents=True, exist_ok=True)
        models = [("svc", train_svc(train, cfg.lam, cfg.epochs, run.config.seed))]
        if cfg.svr:
            models.append(("svr", train_svr(train, cfg.svr_lam, cfg.epsilon_tube, cfg.svr_epochs, run.config.seed)))
        for name, model in models:
            save_model(model, d / f"{name}.json")
            val = evaluate_model(model, sr.validation) if len(sr.validation) else None
            test = evaluate_model(model, sr.test)
            if val is not None:
                _dump(val.to_json(), d / f"{name}_val.json")
            _dump(test.to_json(), d / f"{name}_test.json")
            test.save_confusion_csv(d / f"{name}_test_confusion.csv")
            run.summary.svm_rows.append(
                {
                    "patch_size": int(n),
                    "stride": int(stride),
                    "model": name,
                    "n_train": len(train),
                    "val_accuracy": val.accuracy if val is not None else float("nan"),
                    "test_accuracy": test.accuracy,
                }
            )
            log.info("svm %s n=%s stride=%s test accuracy %.4f", name, n, stride, test.accuracy)


def _stage_resnet(run: _Run) -> None:
    cfg = run.config.resnet
    for n, stride in run.config.patches.sizes:
        n, stride = int(n), int(stride)
        sr, train_aug = run.need_split(n, stride)
        net_cfg = rn.NetConfig(
            input_n=n,
            input_bands=sr.train.bands,
            stem_channels=cfg.stem_channels,
            num_blocks=cfg.num_blocks,
            channels_per_stage=cfg.channels_per_stage,
            seed=run.config.seed,
        )
        d = run.out / "resnet" / f"n{n}_s{stride}"
        d.mkdir(parents=True, exist_ok=True)
        net, report = rn.train(
            rn.init_net(net_cfg),
            SplitResult(train_aug, sr.validation, sr.test),
            epochs=cfg.epochs,
            lr=cfg.lr,
            momentum=cfg.momentum,
            lr_decay=tuple(cfg.lr_decay),
            seed=run.config.seed,
            batch_size=cfg.batch_size,
            weight_decay=cfg.weight_decay,
            log=lambda r: log.info("resnet n=%d stride=%d %s", n, stride, r),
        )
        rn.save_net(net, d / "net.bin")
        emit_curves(report, d)
        _dump(report.to_json(), d / "report.json")
        test_eval = rn.evaluate_net(net, sr.test)
        _dump(test_eval.to_json(), d / "eval_test.json")
        test_eval.save_confusion_csv(d / "test_confusion.csv")
        last = report.epochs[-1]
        run.summary.rows.append(
            SummaryRow(
                n,
                stride,
                len(train_aug),
                len(sr.validation),
                len(sr.test),
                run.config.environment,
                1.0 - last.train_accuracy,
                last.val_accuracy,
                test_eval.accuracy,
            )
        )


_STAGE_FUNCS = {
    "generate": _stage_generate,
    "calibrate": _stage_calibrate,
    "segment": _stage_segment,
    "analyze": _stage_analyze,
    "patch": _stage_patch,
    "svm": _stage_svm,
    "resnet": _stage_resnet,
}


def run_pipeline(config: RunConfig) -> PipelineSummary:
    """Run the selected stages in fixed order; raises :class:`StageError` naming the failing stage."""
    try:
        config.validate()
    except Exception as exc:
        raise StageError("config", exc) from exc
    run = _Run(config)
    run.out.mkdir(parents=True, exist_ok=True)
    # the output location is not part of the result; leave it out so trees compare byte for byte
    _dump({k: v for k, v in config.to_json().items() if k != "out"}, run.out / "config.json")
    selected = set(config.stages)
    for stage in STAGES:
        if stage not in selected:
            continue
        log.info("stage %s", stage)
        try:
            _STAGE_FUNCS[stage](run)
        except Exception as exc:
            raise StageError(stage, exc) from exc
    run.summary.save_csv(run.out / "summary.csv")
    if "svm" in selected:
        run.summary.save_svm_csv(run.out / "svm_summary.csv")
    return run.summary
