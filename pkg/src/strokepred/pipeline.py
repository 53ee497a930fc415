"""End-to-end experiment orchestration.

A run takes a cohort (in memory or on disk), builds one image variant,
partitions with group 5 sealed in the lock box, picks a learning rate by
4-fold cross-validation over groups 1-4, trains one model per seed on
groups 1-3 with group 4 as the validation/calibration split, unlocks the
lock box exactly once, and evaluates every seed on group 5.  All file
output is CSV/JSON/SVG with deterministic content; only the audit log
carries wall-clock timestamps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import core, evalharness, explain, glyphs, imaging, learn
from .core import CohortManifest, LabelVolume, SubjectRecord, Volume3D
from .evalharness import (Calibrator, LockBox, MetricsRow, SplitPlan,
                          lockbox_guard, lockbox_seal, lockbox_unlock)
from .glyphs import GlyphSpec
from .imaging import RoiImageSpec, StitchSpec
from .learn import ArrayDataset, CnnConfig, ModelParams, TabularEncoding, TrainConfig
from .synthcohort import SynthConfig, TruthModel, gen_atlas, gen_subject

VARIANTS = ("stitched", "gm-roi", "wm-roi",
            "hybrid-stitched", "hybrid-gm-roi", "hybrid-wm-roi")
FUSION_KINDS = ("early_fusion", "daft")
TRAIN_GROUPS = (1, 2, 3)
VAL_GROUP = 4
TEST_GROUP = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    variant: str = "gm-roi"
    model: str = "lightweight"
    seeds: tuple[int, ...] = tuple(range(1, 21))
    image_size: int = 64
    channels: tuple[int, ...] = (4, 8, 16)
    grid: tuple[int, int] | None = None  # stitched grid; None = near-square
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lrs=(3e-3, 1e-3), max_epochs=24, batch_size=16, optimizer="rmsprop"))
    roi_labels: tuple[int, ...] | None = None  # None = every atlas ROI
    partition_seed: int = 0
    threshold: float = 0.5
    jobs: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.model not in learn.MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.model in FUSION_KINDS and self.variant.startswith("hybrid"):
            raise ConfigError(
                "fusion models take tabular input separately; hybrid variants "
                "already carry it as glyphs")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be nonempty and distinct")
        if self.model != "logistic":
            f = 2 ** len(self.channels)
            if self.image_size % f:
                raise ConfigError(
                    f"image_size {self.image_size} not divisible by 2^"
                    f"{len(self.channels)}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    @property
    def cnn(self) -> CnnConfig:
        return CnnConfig(input_hw=(self.image_size, self.image_size),
                         channels=self.channels)

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant, "model": self.model,
            "seeds": list(self.seeds), "image_size": self.image_size,
            "channels": list(self.channels),
            "grid": None if self.grid is None else list(self.grid),
            "train": self.train.to_json_dict(),
            "roi_labels": (None if self.roi_labels is None
                           else list(self.roi_labels)),
            "partition_seed": self.partition_seed,
            "threshold": self.threshold, "jobs": self.jobs,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunConfig":
        kw = dict(d)
        kw["seeds"] = tuple(kw.get("seeds", range(1, 21)))
        kw["channels"] = tuple(kw.get("channels", (4, 8, 16)))
        if kw.get("grid") is not None:
            kw["grid"] = tuple(kw["grid"])
        if "train" in kw:
            kw["train"] = TrainConfig.from_json_dict(kw["train"])
        if kw.get("roi_labels") is not None:
            kw["roi_labels"] = tuple(kw["roi_labels"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def paper_preset(config: RunConfig) -> RunConfig:
    """Full-scale constants: 256x256 inputs, 6 blocks, 200 epochs, 20 seeds."""
    return replace(config, image_size=256,
                   channels=(8, 16, 32, 64, 128, 256),
                   grid=(8, 8),
                   train=replace(config.train, lrs=(1e-4, 5e-4, 1e-5),
                                 max_epochs=200),
                   seeds=tuple(range(1, 21)))


# ---------------------------------------------------------------------------
# Cohort access


@dataclass(frozen=True)
class CohortData:
    dims: tuple[int, int, int]
    atlas: LabelVolume  # grey-matter style ROI parcels
    tracts: LabelVolume | None
    records: tuple[SubjectRecord, ...]
    volume_of: Callable[[str], Volume3D]
    truth: TruthModel | None = None  # known only for in-memory synthetic runs

    @classmethod
    def from_memory(cls, config: SynthConfig, truth: TruthModel,
                    records: Sequence[SubjectRecord] | None = None,
                    atlas: LabelVolume | None = None) -> "CohortData":
        atlas = atlas if atlas is not None else gen_atlas(config, "rois")
        tracts = gen_atlas(config, "tracts")
        if records is None:
            records = [gen_subject(config, truth, i, atlas)[2]
                       for i in range(config.n_subjects)]
        seed_of = {r.id: int(r.id[1:]) for r in records}

        def volume_of(subject_id: str) -> Volume3D:
            return gen_subject(config, truth, seed_of[subject_id], atlas)[0]

        return cls(dims=config.dims, atlas=atlas, tracts=tracts,
                   records=tuple(records), volume_of=volume_of, truth=truth)

    @classmethod
    def from_directory(cls, path: str | Path) -> "CohortData":
        path = Path(path)
        manifest = CohortManifest.load(path)
        atlas = core.read_volume(path / manifest.atlas_path,
                                 label_names=manifest.atlas_labels)
        tracts = None
        if manifest.tract_atlas_path is not None:
            tracts = core.read_volume(path / manifest.tract_atlas_path,
                                      label_names=manifest.tract_labels)
        volume_paths = dict(manifest.volume_paths)

        def volume_of(subject_id: str) -> Volume3D:
            return core.read_volume(path / volume_paths[subject_id])

        return cls(dims=manifest.dims, atlas=atlas, tracts=tracts,
                   records=tuple(manifest.subjects), volume_of=volume_of)

    def labels_for(self, variant: str) -> LabelVolume:
        if "wm-roi" in variant:
            if self.tracts is None:
                raise ConfigError("cohort has no tract atlas for wm-roi")
            return self.tracts
        return self.atlas


# ---------------------------------------------------------------------------
# Variant image building


def auto_grid(nz: int) -> tuple[int, int]:
    rows = max(1, int(math.sqrt(nz)))
    while nz % rows:  # nearest exact factorization at or below the square root
        rows -= 1
    return rows, nz // rows


def _roi_bboxes(atlas: LabelVolume, labels: Sequence[int]):
    out = []
    for label in labels:
        mask = atlas.labels == label
        if not mask.any():
            raise core.DegenerateRoiError(f"ROI {label} has no voxels")
        for z in range(atlas.dims[2]):
            sl = mask[:, :, z]
            if not sl.any():
                continue
            xs = np.flatnonzero(sl.any(axis=1))
            ys = np.flatnonzero(sl.any(axis=0))
            out.append((label, z, int(xs[0]), int(xs[-1]) + 1,
                        int(ys[0]), int(ys[-1]) + 1))
    return out


def fit_roi_spec(atlas: LabelVolume, labels: Sequence[int], tile_gap: int = 1,
                 reserved_fraction: float = 0.0) -> RoiImageSpec:
    """Choose a canvas that holds all ROI tiles, near-square, plus an
    optional reserved bottom strip sized as a fraction of the tile area."""
    labels = tuple(int(v) for v in labels)
    boxes = _roi_bboxes(atlas, labels)
    area = sum((x1 - x0 + tile_gap) * (y1 - y0 + tile_gap)
               for _, _, x0, x1, y0, y1 in boxes)
    max_w = max(x1 - x0 for _, _, x0, x1, _, _ in boxes)
    width = max(max_w + 2 * tile_gap, int(math.sqrt(area * 1.3)) + 1)
    spec = RoiImageSpec(roi_labels=labels, canvas=(width, width),
                        tile_gap=tile_gap, reserved_bottom=0)
    try:
        imaging.plan_roi_tiles(atlas, spec)
        height = width
    except imaging.CanvasOverflowError as exc:
        height = exc.required[0]
    reserved = int(round(height * reserved_fraction))
    spec = RoiImageSpec(roi_labels=labels,
                        canvas=(height + reserved, width),
                        tile_gap=tile_gap, reserved_bottom=reserved)
    imaging.plan_roi_tiles(atlas, spec)  # must fit now
    return spec


def downsample_labels(label_image: np.ndarray, size: int) -> np.ndarray:
    """Nearest-pixel label shrink (labels cannot be averaged)."""
    h, w = label_image.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return np.asarray(label_image)[np.ix_(rows, cols)]


def roi_label_canvas(plan: imaging.RoiTilePlan) -> np.ndarray:
    """(h, w) label image marking each tile rectangle with its ROI label."""
    h, w = plan.spec.canvas
    out = np.zeros((h, w), dtype=np.uint16)
    for (label, _z, x0, x1, y0, y1, row0, col0) in plan.tiles:
        out[row0:row0 + (y1 - y0), col0:col0 + (x1 - x0)] = label
    return out


def _glyph_spec_for_boxes(boxes, size_ref: float, time_ref: float,
                          placement_cells=None) -> GlyphSpec:
    m = min(min(bh, bw) for (_r, _c, bh, bw) in boxes)
    if m < 6:
        raise ConfigError(f"glyph boxes of {m}px are too small to draw into")
    return GlyphSpec(
        pentagon_radius=(max(1.0, 0.10 * m), 0.45 * m),
        pie_radius=0.32 * m,
        pie_intensity=(0.25, 1.0),
        size_ref=size_ref, time_ref=time_ref,
        placement_cells=placement_cells)


@dataclass(frozen=True)
class VariantData:
    """Network-input images per subject plus the explainer's label map."""

    images: dict[str, np.ndarray]  # id -> (S, S) float32
    label_image: np.ndarray  # (S, S) ROI labels at input resolution
    glyph_spec: GlyphSpec | None
    full_shape: tuple[int, int]


def build_variant(cohort: CohortData, config: RunConfig,
                  size_ref: float, time_ref: float,
                  roi_labels: Sequence[int] | None = None) -> VariantData:
    """Render every subject's image for the configured variant, downsampled
    to the square network input."""
    variant = config.variant
    size = config.image_size
    dims = cohort.dims
    hybrid = variant.startswith("hybrid")
    records = {r.id: r for r in cohort.records}

    if variant.endswith("stitched"):
        grid = config.grid or auto_grid(dims[2])
        removed = ()
        glyph_spec = None
        if hybrid:
            nz = dims[2]
            removed = tuple(range(nz - 4, nz))
        spec = StitchSpec.for_volume(dims, grid, removed_cells=removed)
        if hybrid:
            ny, nx = spec.slice_shape
            cells = removed[:3]
            boxes = [(*spec.cell_origin(c), ny, nx) for c in cells]
            glyph_spec = _glyph_spec_for_boxes(boxes, size_ref, time_ref,
                                               placement_cells=cells)
        atlas = cohort.labels_for("gm-roi")
        label_full = imaging.stitched_label_image(atlas, spec)
        images = {}
        for sid in sorted(records):
            volume = cohort.volume_of(sid)
            if hybrid:
                img = glyphs.hybrid_stitched(volume, records[sid], spec,
                                             glyph_spec, target=(size, size))
            else:
                img = imaging.downsample(imaging.stitch(volume, spec),
                                         size, size)
            images[sid] = img.pixels
        return VariantData(images=images,
                           label_image=downsample_labels(label_full, size),
                           glyph_spec=glyph_spec,
                           full_shape=spec.image_shape)

    atlas = cohort.labels_for(variant)
    if roi_labels is None:
        roi_labels = config.roi_labels or tuple(sorted(atlas.label_names))
    spec = fit_roi_spec(atlas, roi_labels,
                        reserved_fraction=0.22 if hybrid else 0.0)
    plan = imaging.plan_roi_tiles(atlas, spec)
    glyph_spec = None
    if hybrid:
        boxes = glyphs.glyph_strip_boxes(spec)
        glyph_spec = _glyph_spec_for_boxes(boxes, size_ref, time_ref)
    label_full = roi_label_canvas(plan)
    images = {}
    for sid in sorted(records):
        volume = cohort.volume_of(sid)
        if hybrid:
            img = glyphs.hybrid_roi(volume, atlas, spec, records[sid],
                                    glyph_spec, plan=plan, target=(size, size))
        else:
            img = imaging.downsample(
                imaging.roi_image(volume, atlas, spec, plan), size, size)
        images[sid] = img.pixels
    return VariantData(images=images,
                       label_image=downsample_labels(label_full, size),
                       glyph_spec=glyph_spec, full_shape=spec.canvas)


# ---------------------------------------------------------------------------
# Dataset assembly under the lock box


def _group_ids(plan: SplitPlan, records: Sequence[SubjectRecord],
               groups: Sequence[int]) -> list[str]:
    want = set(groups)
    return [r.id for r in records if plan.assignment[r.id] in want]


def assemble(cohort: CohortData, data: VariantData | None,
             encoding: TabularEncoding | None, plan: SplitPlan, box: LockBox,
             groups: Sequence[int], caller: str, model: str) -> ArrayDataset:
    """Gather one group subset as an ArrayDataset; every call is audited."""
    lockbox_guard(box, groups, caller)
    ids = _group_ids(plan, cohort.records, groups)
    by_id = {r.id: r for r in cohort.records}
    labels = np.array([core.outcome_label(by_id[i].score) for i in ids],
                      dtype=np.float64)
    images = None
    if model != "logistic" and data is not None:
        images = np.stack([data.images[i] for i in ids]).astype(np.float32)
    tabular = None
    if encoding is not None and (model in FUSION_KINDS or model == "logistic"):
        tabular = encoding.design([by_id[i] for i in ids]).astype(np.float64)
    return ArrayDataset(images=images, tabular=tabular, labels=labels)


def concat_datasets(parts: Sequence[ArrayDataset]) -> ArrayDataset:
    def cat(field_name):
        vals = [getattr(p, field_name) for p in parts]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals)

    return ArrayDataset(images=cat("images"), tabular=cat("tabular"),
                        labels=np.concatenate([p.labels for p in parts]))


# ---------------------------------------------------------------------------
# Training drivers


def _val_loss_of(history) -> float:
    return min(h.val_loss for h in history)


def _train_once(config: RunConfig, train_set: ArrayDataset,
                val_set: ArrayDataset, lr: float, seed: int,
                ) -> tuple[ModelParams, float]:
    tc = replace(config.train, seed=seed)
    params, history = learn.train(config.model, train_set, val_set, tc, lr,
                                  cnn=None if config.model == "logistic"
                                  else config.cnn,
                                  tabular_dim=(train_set.tabular.shape[1]
                                               if train_set.tabular is not None
                                               else None))
    return params, _val_loss_of(history)


def pick_lr(cohort: CohortData, data: VariantData | None,
            encoding: TabularEncoding | None, plan: SplitPlan, box: LockBox,
            config: RunConfig) -> tuple[float, dict[float, list[float]]]:
    """4-fold CV over groups 1-4 on the configured lr grid."""
    folds = [assemble(cohort, data, encoding, plan, box, [g],
                      f"cv-fold-{g}", config.model)
             for g in (1, 2, 3, 4)]

    def trainer(train_folds, val_fold, lr):
        _, loss = _train_once(config, concat_datasets(train_folds), val_fold,
                              lr, seed=config.train.seed)
        return loss

    return evalharness.cross_validate(trainer, folds, list(config.train.lrs))


@dataclass(frozen=True)
class SeedResult:
    seed: int
    temperature: float
    val_loss: float
    test: MetricsRow
    subgroup: MetricsRow
    sweep: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class RunResult:
    config: RunConfig
    plan: SplitPlan
    best_lr: float
    cv_losses: dict[float, list[float]]
    seeds: tuple[SeedResult, ...]
    aggregate: dict[str, tuple[float, float]]
    subgroup_aggregate: dict[str, tuple[float, float]]
    sweep_mean: tuple[tuple[float, float], ...]
    audit_entries: tuple[dict, ...]
    checkpoints: dict[int, ModelParams]
    variant_data: VariantData | None
    encoding: TabularEncoding | None


def _predictor(config: RunConfig, params: ModelParams,
               cal: Calibrator) -> Callable[[ArrayDataset], np.ndarray]:
    def predict(ds: ArrayDataset) -> np.ndarray:
        z = learn.forward(params, ds.images, ds.tabular)
        return cal.apply(z)

    return predict


def run_experiment(cohort: CohortData, config: RunConfig,
                   audit_path: str | Path | None = None) -> RunResult:
    """The full protocol for one (variant, model) cell."""
    records = cohort.records
    plan = evalharness.stratified_partition(records, k=5,
                                            seed=config.partition_seed)
    box = lockbox_seal(plan, audit_path)

    # normalizers come from the training groups only
    lockbox_guard(box, TRAIN_GROUPS, "feature-normalizers")
    train_ids = set(_group_ids(plan, records, TRAIN_GROUPS))
    train_records = [r for r in records if r.id in train_ids]
    size_ref, time_ref = glyphs.normalizers_from_records(train_records)
    encoding = TabularEncoding(size_ref=size_ref, time_ref=time_ref)

    data = None
    if config.model != "logistic":
        data = build_variant(cohort, config, size_ref, time_ref)

    if config.model == "logistic":
        best_lr, cv_losses = config.train.lrs[0], {}
    else:
        best_lr, cv_losses = pick_lr(cohort, data, encoding, plan, box, config)

    train_set = assemble(cohort, data, encoding, plan, box, TRAIN_GROUPS,
                         "seed-training", config.model)
    val_set = assemble(cohort, data, encoding, plan, box, [VAL_GROUP],
                       "validation-calibration", config.model)

    def fit_seed(seed: int) -> tuple[int, ModelParams, Calibrator, float]:
        if config.model == "logistic":
            # IRLS is deterministic: every seed fits the same coefficients
            params = learn.logistic_fit(train_set.tabular, train_set.labels)
            val_logits = learn.forward(params, None, val_set.tabular)
            val_loss = learn.class_weighted_bce(
                val_logits, val_set.labels,
                learn.class_weights_from_labels(train_set.labels))
        else:
            params, val_loss = _train_once(config, train_set, val_set,
                                           best_lr, seed)
            val_logits = learn.forward(params, val_set.images, val_set.tabular)
        cal = evalharness.fit_temperature(val_logits, val_set.labels)
        return seed, params, cal, val_loss

    if config.jobs > 1 and len(config.seeds) > 1:
        # seed fits are independent; results are collected in seed order so
        # concurrency cannot change any output
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            fitted = list(pool.map(fit_seed, config.seeds))
    else:
        fitted = [fit_seed(s) for s in config.seeds]

    lockbox_unlock(box, "final evaluation on the held-out group")
    test_sets = {}  # one guarded access per seed, all post-unlock
    seed_results = []
    for seed, params, cal, val_loss in fitted:
        test_set = assemble(cohort, data, encoding, plan, box, [TEST_GROUP],
                            f"seed-{seed}-final-eval", config.model)
        probs = _predictor(config, params, cal)(test_set)
        test_ids = _group_ids(plan, records, [TEST_GROUP])
        by_id = {r.id: r for r in records}
        severities = [by_id[i].severity for i in test_ids]
        row = evalharness.metrics(probs, test_set.labels, config.threshold)
        sub = evalharness.subgroup_metrics(probs, test_set.labels, severities,
                                           config.threshold)
        sweep = tuple(evalharness.threshold_sweep(probs, test_set.labels))
        seed_results.append(SeedResult(seed=seed, temperature=cal.temperature,
                                       val_loss=val_loss, test=row,
                                       subgroup=sub, sweep=sweep))

    agg = evalharness.seed_aggregate([s.test.as_dict() for s in seed_results]) \
        if len(seed_results) > 1 else {
            k: (v, 0.0) for k, v in seed_results[0].test.as_dict().items()}
    sub_agg = evalharness.seed_aggregate(
        [s.subgroup.as_dict() for s in seed_results]) \
        if len(seed_results) > 1 else {
            k: (v, 0.0) for k, v in seed_results[0].subgroup.as_dict().items()}
    thresholds = [t for t, _ in seed_results[0].sweep]
    sweep_mean = tuple(
        (t, float(np.mean([dict(s.sweep)[t] for s in seed_results])))
        for t in thresholds)
    return RunResult(config=config, plan=plan, best_lr=best_lr,
                     cv_losses=cv_losses, seeds=tuple(seed_results),
                     aggregate=agg, subgroup_aggregate=sub_agg,
                     sweep_mean=sweep_mean,
                     audit_entries=tuple(box.entries),
                     checkpoints={s: p for s, p, _c, _v in fitted},
                     variant_data=data, encoding=encoding)


# ---------------------------------------------------------------------------
# Tabular baseline (feature-subset ordering)


def logistic_baseline(cohort: CohortData,
                      features: tuple[str, ...],
                      partition_seed: int = 0,
                      threshold: float = 0.5) -> MetricsRow:
    """Train the IRLS logistic model on groups 1-4 features and evaluate
    balanced accuracy on the unlocked group 5."""
    records = cohort.records
    plan = evalharness.stratified_partition(records, k=5, seed=partition_seed)
    box = lockbox_seal(plan)
    lockbox_guard(box, (1, 2, 3, 4), "baseline-training")
    fit_ids = set(_group_ids(plan, records, (1, 2, 3, 4)))
    fit_records = [r for r in records if r.id in fit_ids]
    size_ref, time_ref = glyphs.normalizers_from_records(fit_records)
    enc = TabularEncoding(size_ref=size_ref, time_ref=time_ref)
    x = enc.design(fit_records, features=features)
    y = np.array([core.outcome_label(r.score) for r in fit_records], float)
    params = learn.logistic_fit(x, y)
    lockbox_unlock(box, "baseline evaluation")
    lockbox_guard(box, [TEST_GROUP], "baseline-eval")
    test_ids = set(_group_ids(plan, records, [TEST_GROUP]))
    test_records = [r for r in records if r.id in test_ids]
    probs = learn.predict_proba(params, None,
                                enc.design(test_records, features=features))
    yt = np.array([core.outcome_label(r.score) for r in test_records], float)
    return evalharness.metrics(probs, yt, threshold)


# ---------------------------------------------------------------------------
# ROI importance and count selection on top of a run


def image_classifier(params: ModelParams) -> explain.Classifier:
    def classifier(batch: np.ndarray) -> np.ndarray:
        return learn.predict_proba(params, np.asarray(batch, dtype=np.float32))

    return classifier


def roi_ranking_for(result: RunResult, seed: int,
                    n_explain: int = 12, n_perturb: int = 160,
                    explain_seed: int = 0,
                    groups: Sequence[int] = (1, 2, 3, 4)) -> explain.RoiRanking:
    """Aggregate ROI importance for one trained seed.

    Defaults to the development pool so a ranking can feed ROI-count
    selection without ever touching the held-out group."""
    if result.config.model != "lightweight":
        raise ConfigError("ROI explanations support the image-only model")
    data = result.variant_data
    params = result.checkpoints[seed]
    want = set(groups)
    pool = {i: img for i, img in data.images.items()
            if result.plan.assignment[i] in want}
    return explain.aggregate_importance(
        image_classifier(params), pool, data.label_image,
        n_explain=n_explain, n_perturb=n_perturb, seed=explain_seed)


def roi_count_sweep(cohort: CohortData, config: RunConfig,
                    ranking: explain.RoiRanking,
                    counts: Sequence[int] = tuple(range(3, 13)),
                    sweep_epochs: int | None = None,
                    plan: SplitPlan | None = None,
                    box: LockBox | None = None) -> explain.RoiCountCurve:
    """Fig-2-style selection: for each k, rebuild top-k ROI images and
    cross-validate over groups 1-4; k* minimizes mean balanced val loss.

    Only groups 1-4 are touched, so an already-sealed box may be shared."""
    records = cohort.records
    if plan is None:
        plan = evalharness.stratified_partition(records, k=5,
                                                seed=config.partition_seed)
    if box is None:
        box = lockbox_seal(plan)
    lockbox_guard(box, TRAIN_GROUPS, "roi-sweep-normalizers")
    train_ids = set(_group_ids(plan, records, TRAIN_GROUPS))
    size_ref, time_ref = glyphs.normalizers_from_records(
        [r for r in records if r.id in train_ids])
    tc = config.train if sweep_epochs is None \
        else replace(config.train, max_epochs=sweep_epochs)
    sweep_config = replace(config, train=tc)

    def evaluate_k(k: int, top_rois: tuple[int, ...]) -> tuple[float, float]:
        data = build_variant(cohort, sweep_config, size_ref, time_ref,
                             roi_labels=top_rois)
        folds = [assemble(cohort, data, None, plan, box, [g],
                          f"roi-sweep-k{k}-fold-{g}", sweep_config.model)
                 for g in (1, 2, 3, 4)]
        losses, accs = [], []
        for i, val in enumerate(folds):
            train_folds = [f for j, f in enumerate(folds) if j != i]
            params, loss = _train_once(sweep_config,
                                       concat_datasets(train_folds), val,
                                       sweep_config.train.lrs[0],
                                       seed=sweep_config.train.seed)
            probs = learn.predict_proba(params, val.images, val.tabular)
            accs.append(evalharness.metrics(probs, val.labels).balanced_accuracy)
            losses.append(loss)
        return float(np.mean(losses)), float(np.mean(accs))

    return explain.select_roi_count(ranking, evaluate_k, counts=counts)


# ---------------------------------------------------------------------------
# Emission


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def write_csv(path: str | Path, header: Sequence[str],
              rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


METRIC_COLS = ("accuracy", "balanced_accuracy", "sensitivity", "specificity",
               "precision", "f1", "auc")


def emit_run(result: RunResult, out_dir: str | Path) -> dict[str, str]:
    """Write the CSV reports, checkpoints, and index; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    files = {}

    rows = [[s.seed] + [getattr(s.test, m) for m in METRIC_COLS]
            + [s.temperature, s.val_loss, "|".join(s.test.flags)]
            for s in result.seeds]
    write_csv(out / "per_seed.csv",
              ["seed", *METRIC_COLS, "temperature", "val_loss", "flags"], rows)
    files["per_seed"] = "per_seed.csv"

    rows = [[cfg.variant, cfg.model, m, result.aggregate[m][0],
             result.aggregate[m][1]] for m in METRIC_COLS]
    write_csv(out / "summary.csv",
              ["variant", "model", "metric", "mean", "se"], rows)
    files["summary"] = "summary.csv"

    rows = [[s.seed] + [getattr(s.subgroup, m) for m in METRIC_COLS]
            for s in result.seeds]
    rows.append(["mean"] + [result.subgroup_aggregate[m][0]
                            for m in METRIC_COLS])
    write_csv(out / "subgroup.csv", ["seed", *METRIC_COLS], rows)
    files["subgroup"] = "subgroup.csv"

    thresholds = [t for t, _ in result.sweep_mean]
    rows = [[s.seed] + [acc for _, acc in s.sweep] for s in result.seeds]
    rows.append(["mean"] + [acc for _, acc in result.sweep_mean])
    write_csv(out / "thresholds.csv",
              ["seed"] + [f"t_{t:g}" for t in thresholds], rows)
    files["thresholds"] = "thresholds.csv"

    ck_dir = out / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    for seed, params in result.checkpoints.items():
        learn.write_checkpoint(params, ck_dir / f"seed-{seed:03d}.ckp")
    files["checkpoints"] = "checkpoints"

    meta = {
        "config": cfg.to_json_dict(),
        "best_lr": result.best_lr,
        "cv_losses": {str(k): v for k, v in result.cv_losses.items()},
        "balance": {
            "max_smd": result.plan.balance.max_smd,
            "objective": result.plan.balance.objective,
            "severity_counts": {c: {str(g): n for g, n in per.items()}
                                for c, per in
                                result.plan.balance.severity_counts.items()},
        },
        "files": files,
    }
    (out / "index.json").write_text(json.dumps(meta, indent=2, sort_keys=True)
                                    + "\n")
    files["index"] = "index.json"
    return files


def write_curve_csv(curve: explain.RoiCountCurve, path: str | Path) -> None:
    write_csv(path, ["k", "mean_val_loss", "val_balanced_accuracy"],
              [list(row) for row in curve.rows])


def write_curve_svg(curve: explain.RoiCountCurve, path: str | Path) -> None:
    """Minimal two-series polyline chart (loss and accuracy vs k)."""
    w, h, pad = 480, 300, 40
    ks = [row[0] for row in curve.rows]
    series = {"loss": [row[1] for row in curve.rows],
              "accuracy": [row[2] for row in curve.rows]}
    lo = min(min(v) for v in series.values())
    hi = max(max(v) for v in series.values())
    span = (hi - lo) or 1.0

    def sx(k):
        return pad + (k - ks[0]) / max(1, ks[-1] - ks[0]) * (w - 2 * pad)

    def sy(v):
        return h - pad - (v - lo) / span * (h - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" '
             'stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" '
             'stroke="black"/>']
    for name, color in (("loss", "#c0392b"), ("accuracy", "#2471a3")):
        pts = " ".join(f"{sx(k):.1f},{sy(v):.1f}"
                       for k, v in zip(ks, series[name]))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
    for k in ks:
        parts.append(f'<text x="{sx(k):.1f}" y="{h - pad + 16}" '
                     f'font-size="11" text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{w - pad}" y="{pad}" font-size="11" '
                 f'text-anchor="end" fill="#c0392b">balanced val loss</text>')
    parts.append(f'<text x="{w - pad}" y="{pad + 14}" font-size="11" '
                 f'text-anchor="end" fill="#2471a3">val balanced accuracy'
                 f' (best k = {curve.best_k})</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def write_ranking_csv(ranking: explain.RoiRanking, path: str | Path,
                      roi_names: Mapping[int, str] | None = None) -> None:
    rows = [[roi,
             roi_names.get(roi, f"roi{roi:02d}") if roi_names else f"roi{roi:02d}",
             ranking.mean_importance[roi]]
            for roi in ranking.rois]
    write_csv(path, ["roi", "name", "mean_importance"], rows)
