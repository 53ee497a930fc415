"""Synthetic cohort generator with a known ground-truth outcome rule.

Everything here is driven by the counter-based generator in ``rng``; a
(config.seed, subject_seed) pair pins down every voxel and record field, so
cohorts regenerate bit-identically and subjects can be built in parallel or
streamed one at a time without storing the whole cohort.

The outcome rule is deliberately simple: damage to a small set of causal
atlas regions lowers the score, initial severity carries a penalty, longer
recovery time helps.  Nothing anatomical is being modeled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import core
from .core import LabelVolume, SubjectRecord, Volume3D
from .rng import CounterRng

SEVERITY_FROM_LOAD = ("severe", "moderate", "mild", "normal")


@dataclass(frozen=True)
class TruthModel:
    """Ground-truth scoring rule (the oracle the pipeline must rediscover)."""

    causal_rois: tuple[int, ...]
    betas: tuple[float, ...]  # score points lost per unit lesion load
    gamma: Mapping[str, float]  # severity penalty per category
    delta: float  # benefit per unit log(1 + recovery_time)
    noise_sd: float
    base: float

    def __post_init__(self):
        if len(self.betas) != len(self.causal_rois):
            raise ValueError("betas must align with causal_rois")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        missing = set(core.SEVERITY_CATEGORIES) - set(self.gamma)
        if missing:
            raise ValueError(f"gamma missing categories {sorted(missing)}")

    def to_json_dict(self) -> dict:
        return {
            "causal_rois": list(self.causal_rois),
            "betas": list(self.betas),
            "gamma": dict(self.gamma),
            "delta": self.delta,
            "noise_sd": self.noise_sd,
            "base": self.base,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TruthModel":
        return cls(causal_rois=tuple(d["causal_rois"]), betas=tuple(d["betas"]),
                   gamma=dict(d["gamma"]), delta=float(d["delta"]),
                   noise_sd=float(d["noise_sd"]), base=float(d["base"]))


def default_truth() -> TruthModel:
    # tuned so a 400-subject default-config cohort lands near 34% aphasic
    return TruthModel(
        causal_rois=(1, 2, 3),
        betas=(38.0, 30.0, 24.0),
        gamma={"severe": 12.0, "moderate": 8.0, "mild": 4.0,
               "normal": 0.0, "unknown": 6.0},
        delta=2.0,
        noise_sd=5.0,
        base=62.0,
    )


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 2024
    n_subjects: int = 400
    dims: tuple[int, int, int] = (64, 64, 64)
    n_rois: int = 20  # labels 1..12 left hemisphere, 13..n right
    n_tracts: int = 12
    aphasic_fraction: float = 0.34  # documentation target, not enforced
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (4.0, 11.0)  # ellipsoid semi-axes
    left_bias: float = 0.9  # probability a lesion center is left-hemisphere
    unknown_prob: float = 0.2  # chance severity is recorded as unknown
    recovery_range: tuple[float, float] = (7.0, 1000.0)  # days, log-uniform
    # total causal load thresholds for severe / moderate / mild
    severity_thresholds: tuple[float, float, float] = (0.55, 0.3, 0.1)

    def __post_init__(self):
        if self.n_subjects < 10:
            raise ValueError("n_subjects must be >= 10")
        if min(self.dims) < 16:
            raise ValueError("dims must be >= 16 per axis")
        if self.n_rois < 2:
            raise ValueError("n_rois must be >= 2")
        if not 0 <= self.left_bias <= 1 or not 0 <= self.unknown_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise ValueError("bad lesion_count range")
        if self.lesion_radius[0] > self.lesion_radius[1] or self.lesion_radius[0] < 0:
            raise ValueError("bad lesion_radius range")
        t = self.severity_thresholds
        if not t[0] > t[1] > t[2] > 0:
            raise ValueError("severity thresholds must be strictly decreasing")

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed, "n_subjects": self.n_subjects,
            "dims": list(self.dims), "n_rois": self.n_rois,
            "n_tracts": self.n_tracts,
            "aphasic_fraction": self.aphasic_fraction,
            "lesion_count": list(self.lesion_count),
            "lesion_radius": list(self.lesion_radius),
            "left_bias": self.left_bias, "unknown_prob": self.unknown_prob,
            "recovery_range": list(self.recovery_range),
            "severity_thresholds": list(self.severity_thresholds),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SynthConfig":
        kw = dict(d)
        for key in ("dims", "lesion_count", "lesion_radius", "recovery_range",
                    "severity_thresholds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


# ---------------------------------------------------------------------------
# Atlas generation


def brain_mask(dims: tuple[int, int, int]) -> np.ndarray:
    """Ellipsoidal mask, semi-axes (0.45, 0.45, 0.42) of each extent."""
    nx, ny, nz = dims
    x, y, z = np.mgrid[0:nx, 0:ny, 0:nz].astype(np.float64)
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2
    ax, ay, az = 0.45 * nx, 0.45 * ny, 0.42 * nz
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0


def atlas_sites(config: SynthConfig, kind: str = "rois") -> np.ndarray:
    """(n, 3) integer site voxels, distinct, inside the brain mask.

    For kind="rois" the first min(12, n) sites are constrained to the left
    hemisphere (x < nx/2), the rest to the right; tract sites are
    unconstrained.  Deterministic in config.seed.
    """
    if kind not in ("rois", "tracts"):
        raise ValueError(f"unknown atlas kind {kind!r}")
    n = config.n_rois if kind == "rois" else config.n_tracts
    nx, ny, nz = config.dims
    mask = brain_mask(config.dims)
    if n > int(mask.sum()):
        raise ValueError(f"{n} sites exceed {int(mask.sum())} brain voxels")
    n_left = min(12, n) if kind == "rois" else 0
    rng = CounterRng(config.seed, "atlas", kind)
    sites: list[tuple[int, int, int]] = []
    taken = set()
    for i in range(n):
        while True:
            x = rng.randint(0, nx - 1)
            y = rng.randint(0, ny - 1)
            z = rng.randint(0, nz - 1)
            if not mask[x, y, z] or (x, y, z) in taken:
                continue
            if kind == "rois":
                if i < n_left and x >= nx // 2:
                    continue
                if i >= n_left and x < nx // 2:
                    continue
            break
        taken.add((x, y, z))
        sites.append((x, y, z))
    return np.array(sites, dtype=np.int64)


def gen_atlas(config: SynthConfig, kind: str = "rois") -> LabelVolume:
    """Voronoi parcellation of the brain mask; ties go to the lowest label."""
    sites = atlas_sites(config, kind)
    nx, ny, nz = config.dims
    mask = brain_mask(config.dims)
    x, y, z = np.mgrid[0:nx, 0:ny, 0:nz].astype(np.float64)
    best = np.full(config.dims, np.inf)
    labels = np.zeros(config.dims, dtype=np.uint16)
    for i, (sx, sy, sz) in enumerate(sites):
        d2 = (x - sx) ** 2 + (y - sy) ** 2 + (z - sz) ** 2
        closer = d2 < best  # strict: earlier (lower) label wins ties
        labels[closer] = i + 1
        best[closer] = d2[closer]
    labels[~mask] = 0
    prefix = "roi" if kind == "rois" else "tract"
    names = {i + 1: f"{prefix}{i + 1:02d}" for i in range(len(sites))}
    return LabelVolume(dims=config.dims, labels=labels, label_names=names)


# ---------------------------------------------------------------------------
# Subject generation


def ground_truth_score(loads: Mapping[int, float], severity: str,
                       recovery_time: float, truth: TruthModel,
                       noise: float = 0.0) -> float:
    """score = base - sum(beta_j * load_j) - gamma(severity)
    + delta * log(1 + recovery_time) + noise."""
    for roi in truth.causal_rois:
        if roi not in loads:
            raise ValueError(f"loads missing causal ROI {roi}")
    damage = sum(b * loads[r] for r, b in zip(truth.causal_rois, truth.betas))
    return (truth.base - damage - truth.gamma[severity]
            + truth.delta * math.log1p(recovery_time) + noise)


def severity_from_load(total_causal_load: float, config: SynthConfig) -> str:
    t_severe, t_moderate, t_mild = config.severity_thresholds
    if total_causal_load >= t_severe:
        return "severe"
    if total_causal_load >= t_moderate:
        return "moderate"
    if total_causal_load >= t_mild:
        return "mild"
    return "normal"


def _sample_lesion(config: SynthConfig, rng: CounterRng,
                   mask: np.ndarray) -> np.ndarray:
    nx, ny, nz = config.dims
    lesion = np.zeros(config.dims, dtype=bool)
    n_les = rng.randint(*config.lesion_count)
    r_lo, r_hi = config.lesion_radius
    for _ in range(n_les):
        go_left = rng.bernoulli(config.left_bias)
        while True:
            cx = rng.randint(0, nx - 1)
            cy = rng.randint(0, ny - 1)
            cz = rng.randint(0, nz - 1)
            if not mask[cx, cy, cz]:
                continue
            if go_left and cx >= nx // 2:
                continue
            break
        a = rng.uniform(r_lo, r_hi)
        b = rng.uniform(r_lo, r_hi)
        c = rng.uniform(r_lo, r_hi)
        if min(a, b, c) <= 0:
            continue
        x0, x1 = max(0, int(cx - a)), min(nx, int(cx + a) + 1)
        y0, y1 = max(0, int(cy - b)), min(ny, int(cy + b) + 1)
        z0, z1 = max(0, int(cz - c)), min(nz, int(cz + c) + 1)
        x, y, z = np.mgrid[x0:x1, y0:y1, z0:z1].astype(np.float64)
        inside = (((x - cx) / a) ** 2 + ((y - cy) / b) ** 2
                  + ((z - cz) / c) ** 2) <= 1.0
        lesion[x0:x1, y0:y1, z0:z1] |= inside
    return lesion & mask


def _background(config: SynthConfig, rng: CounterRng) -> np.ndarray:
    nx, ny, nz = config.dims
    phases = [rng.uniform(0, 2 * math.pi) for _ in range(3)]
    freqs = [rng.randint(1, 3) for _ in range(3)]
    x, y, z = np.mgrid[0:nx, 0:ny, 0:nz].astype(np.float64)
    bg = (0.55
          + 0.13 * np.cos(2 * math.pi * freqs[0] * x / nx + phases[0])
          + 0.11 * np.cos(2 * math.pi * freqs[1] * y / ny + phases[1])
          + 0.09 * np.cos(2 * math.pi * freqs[2] * z / nz + phases[2]))
    return np.clip(bg, 0.05, 0.95)


def gen_subject(config: SynthConfig, truth: TruthModel, subject_seed: int,
                atlas: LabelVolume | None = None,
                ) -> tuple[Volume3D, LabelVolume, SubjectRecord]:
    """Build one subject: intensity volume, lesion mask, tabular record.

    Draw order within the subject stream is fixed (lesions, background,
    unknown-overwrite, recovery time, score noise), so outputs are
    bit-identical for a given (config.seed, subject_seed).
    """
    if atlas is None:
        atlas = gen_atlas(config)
    mask = brain_mask(config.dims)
    rng = CounterRng(config.seed, "subject", subject_seed)

    lesion_mask = _sample_lesion(config, rng, mask)
    bg = _background(config, rng)
    intensity = np.where(mask, bg, 0.0)
    intensity = np.where(lesion_mask, bg * 0.3, intensity)
    volume = Volume3D(dims=config.dims, data=intensity.astype(np.float32))
    lesion = LabelVolume(dims=config.dims,
                         labels=lesion_mask.astype(np.uint16),
                         label_names={1: "lesion"})

    loads = {roi: core.lesion_load(lesion, atlas, roi)
             for roi in truth.causal_rois}
    total = sum(loads.values())
    severity = severity_from_load(total, config)
    if rng.bernoulli(config.unknown_prob):
        severity = "unknown"
    recovery_time = rng.log_uniform(*config.recovery_range)
    noise = rng.normal(0.0, truth.noise_sd) if truth.noise_sd > 0 else 0.0
    score = ground_truth_score(loads, severity, recovery_time, truth, noise)

    hemi = core.left_hemisphere_mask(config.dims)
    record = SubjectRecord(
        id=f"s{subject_seed:04d}",
        severity=severity,
        recovery_time=recovery_time,
        left_lesion_size=core.lesion_size(lesion, hemi),
        score=score,
    )
    return volume, lesion, record


def subject_loads(lesion: LabelVolume, atlas: LabelVolume,
                  rois: Sequence[int]) -> dict[int, float]:
    return {roi: core.lesion_load(lesion, atlas, roi) for roi in rois}


def cohort_records(config: SynthConfig, truth: TruthModel,
                   atlas: LabelVolume | None = None) -> list[SubjectRecord]:
    """Records only (volumes are regenerated on demand via gen_subject)."""
    if atlas is None:
        atlas = gen_atlas(config)
    return [gen_subject(config, truth, i, atlas)[2]
            for i in range(config.n_subjects)]


def write_cohort(config: SynthConfig, truth: TruthModel,
                 out_dir: str | Path) -> core.CohortManifest:
    """Write atlas, tract atlas, per-subject volumes, and manifest.json."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "lesions").mkdir(exist_ok=True)
    atlas = gen_atlas(config, "rois")
    tracts = gen_atlas(config, "tracts")
    core.write_volume(atlas, out_dir / "atlas.vol")
    core.write_volume(tracts, out_dir / "tracts.vol")
    subjects = []
    volume_paths = {}
    lesion_paths = {}
    for i in range(config.n_subjects):
        volume, lesion, record = gen_subject(config, truth, i, atlas)
        vp = f"volumes/{record.id}.vol"
        lp = f"lesions/{record.id}.vol"
        core.write_volume(volume, out_dir / vp)
        core.write_volume(lesion, out_dir / lp)
        subjects.append(record)
        volume_paths[record.id] = vp
        lesion_paths[record.id] = lp
    manifest = core.CohortManifest(
        subjects=subjects,
        volume_paths=volume_paths,
        lesion_paths=lesion_paths,
        atlas_path="atlas.vol",
        atlas_labels=dict(atlas.label_names),
        tract_atlas_path="tracts.vol",
        tract_labels=dict(tracts.label_names),
        seed=config.seed,
        dims=config.dims,
    )
    manifest.save(out_dir)
    return manifest
