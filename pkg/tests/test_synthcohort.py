import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from strokepred import core
from strokepred.synthcohort import (SEVERITY_FROM_LOAD, SynthConfig,
                                    TruthModel, atlas_sites, brain_mask,
                                    cohort_records, default_truth, gen_atlas,
                                    gen_subject, ground_truth_score,
                                    severity_from_load, subject_loads,
                                    write_cohort)

SMALL = SynthConfig(seed=7, n_subjects=10, dims=(24, 24, 24), n_rois=8,
                    n_tracts=4)


def test_brain_mask_center_in_corners_out():
    m = brain_mask((32, 32, 32))
    assert m[16, 16, 16]
    assert not m[0, 0, 0] and not m[31, 31, 31]
    # ellipsoid is symmetric about the grid center
    assert np.array_equal(m, m[::-1, :, :])
    assert np.array_equal(m, m[:, :, ::-1])


def test_atlas_sites_distinct_in_mask_hemisphere_split():
    cfg = SynthConfig(seed=3, n_subjects=10, dims=(32, 32, 32), n_rois=16)
    sites = atlas_sites(cfg, "rois")
    assert sites.shape == (16, 3)
    assert len({tuple(s) for s in sites}) == 16
    mask = brain_mask(cfg.dims)
    for x, y, z in sites:
        assert mask[x, y, z]
    assert (sites[:12, 0] < 16).all()  # first 12 left of midline
    assert (sites[12:, 0] >= 16).all()


def test_atlas_voronoi_matches_brute_force_nearest_site():
    cfg = SynthConfig(seed=5, n_subjects=10, dims=(16, 16, 16), n_rois=5)
    atlas = gen_atlas(cfg, "rois")
    sites = atlas_sites(cfg, "rois")
    mask = brain_mask(cfg.dims)
    x, y, z = np.mgrid[0:16, 0:16, 0:16].astype(np.float64)
    d2 = np.stack([(x - sx) ** 2 + (y - sy) ** 2 + (z - sz) ** 2
                   for sx, sy, sz in sites])
    nearest = np.argmin(d2, axis=0) + 1  # argmin takes the first on ties
    assert np.array_equal(atlas.labels[mask], nearest[mask])
    assert (atlas.labels[~mask] == 0).all()


def test_atlas_every_label_present_and_named():
    atlas = gen_atlas(SMALL, "rois")
    present = set(np.unique(atlas.labels)) - {0}
    assert present == set(range(1, SMALL.n_rois + 1))
    assert atlas.label_names[1] == "roi01"
    tracts = gen_atlas(SMALL, "tracts")
    assert tracts.label_names[1] == "tract01"
    assert set(np.unique(tracts.labels)) - {0} == set(range(1, SMALL.n_tracts + 1))


def test_atlas_deterministic():
    a = gen_atlas(SMALL, "rois")
    b = gen_atlas(SMALL, "rois")
    assert np.array_equal(a.labels, b.labels)


def test_gen_subject_bit_identical_across_calls():
    atlas = gen_atlas(SMALL)
    v1, l1, r1 = gen_subject(SMALL, default_truth(), 4, atlas)
    v2, l2, r2 = gen_subject(SMALL, default_truth(), 4, atlas)
    assert np.array_equal(v1.data, v2.data)
    assert np.array_equal(l1.labels, l2.labels)
    assert r1 == r2


def test_subjects_differ_across_seeds():
    atlas = gen_atlas(SMALL)
    _, _, r0 = gen_subject(SMALL, default_truth(), 0, atlas)
    _, _, r1 = gen_subject(SMALL, default_truth(), 1, atlas)
    assert r0.id != r1.id
    assert (r0.score, r0.recovery_time) != (r1.score, r1.recovery_time)


def test_lesion_and_intensity_confined_to_brain():
    atlas = gen_atlas(SMALL)
    volume, lesion, _ = gen_subject(SMALL, default_truth(), 2, atlas)
    mask = brain_mask(SMALL.dims)
    assert not lesion.labels[~mask].any()
    assert (volume.data[~mask] == 0).all()
    assert (volume.data[mask] > 0).all()


def test_zero_lesion_config_gives_empty_mask():
    cfg = SynthConfig(seed=9, n_subjects=10, dims=(24, 24, 24), n_rois=6,
                      lesion_count=(0, 0))
    atlas = gen_atlas(cfg)
    _, lesion, record = gen_subject(cfg, default_truth(), 0, atlas)
    assert lesion.labels.sum() == 0
    assert record.left_lesion_size == 0
    assert record.severity in ("normal", "unknown")


def test_score_direct_arithmetic():
    truth = TruthModel(causal_rois=(1,), betas=(15.0,),
                       gamma={c: 0.0 for c in core.SEVERITY_CATEGORIES},
                       delta=0.0, noise_sd=0.0, base=70.0)
    assert ground_truth_score({1: 1.0}, "normal", 0.0, truth) == pytest.approx(55.0)


def test_score_trivial_truth_is_base():
    truth = TruthModel(causal_rois=(), betas=(),
                       gamma={c: 0.0 for c in core.SEVERITY_CATEGORIES},
                       delta=0.0, noise_sd=0.0, base=80.0)
    assert ground_truth_score({}, "severe", 500.0, truth) == 80.0


def test_score_monotonicity():
    truth = default_truth()
    lo = ground_truth_score({1: 0.1, 2: 0.0, 3: 0.0}, "normal", 30.0, truth)
    hi = ground_truth_score({1: 0.6, 2: 0.0, 3: 0.0}, "normal", 30.0, truth)
    assert hi < lo  # more causal damage, lower score
    slow = ground_truth_score({1: 0.1, 2: 0.0, 3: 0.0}, "normal", 10.0, truth)
    assert slow < lo  # less recovery time, lower score
    sev = ground_truth_score({1: 0.1, 2: 0.0, 3: 0.0}, "severe", 30.0, truth)
    assert sev < lo


def test_score_requires_causal_loads():
    with pytest.raises(ValueError):
        ground_truth_score({1: 0.5}, "normal", 10.0, default_truth())


def test_severity_threshold_boundaries():
    cfg = SynthConfig()
    assert severity_from_load(0.55, cfg) == "severe"
    assert severity_from_load(0.549, cfg) == "moderate"
    assert severity_from_load(0.30, cfg) == "moderate"
    assert severity_from_load(0.299, cfg) == "mild"
    assert severity_from_load(0.10, cfg) == "mild"
    assert severity_from_load(0.099, cfg) == "normal"
    assert severity_from_load(0.0, cfg) == "normal"


@given(a=st.floats(0, 1), b=st.floats(0, 1))
def test_severity_monotone_in_load(a, b):
    cfg = SynthConfig()
    if a > b:
        a, b = b, a
    # larger load is never ranked less severe
    assert SEVERITY_FROM_LOAD.index(severity_from_load(b, cfg)) \
        <= SEVERITY_FROM_LOAD.index(severity_from_load(a, cfg))


def test_non_causal_damage_does_not_move_score():
    atlas = gen_atlas(SMALL)
    truth = TruthModel(causal_rois=(1, 2), betas=(30.0, 20.0),
                       gamma=default_truth().gamma, delta=2.0,
                       noise_sd=0.0, base=62.0)
    spare = 5  # not causal
    lesion_a = core.LabelVolume(
        dims=SMALL.dims,
        labels=(atlas.labels == spare).astype(np.uint16),
        label_names={1: "lesion"})
    # grow the non-causal lesion into another non-causal parcel
    grown = ((atlas.labels == spare) | (atlas.labels == 6)).astype(np.uint16)
    lesion_b = core.LabelVolume(dims=SMALL.dims, labels=grown,
                                label_names={1: "lesion"})
    la = subject_loads(lesion_a, atlas, truth.causal_rois)
    lb = subject_loads(lesion_b, atlas, truth.causal_rois)
    assert la == lb == {1: 0.0, 2: 0.0}
    sa = ground_truth_score(la, "mild", 42.0, truth)
    sb = ground_truth_score(lb, "mild", 42.0, truth)
    assert sa == sb


def test_severity_mirrors_causal_load_unless_unknown():
    atlas = gen_atlas(SMALL)
    truth = default_truth()
    for seed in range(10):
        _, lesion, record = gen_subject(SMALL, truth, seed, atlas)
        total = sum(subject_loads(lesion, atlas, truth.causal_rois).values())
        if record.severity != "unknown":
            assert record.severity == severity_from_load(total, SMALL)


def test_cohort_records_match_streamed_subjects():
    atlas = gen_atlas(SMALL)
    records = cohort_records(SMALL, default_truth(), atlas)
    assert len(records) == SMALL.n_subjects
    assert records[3] == gen_subject(SMALL, default_truth(), 3, atlas)[2]
    assert len({r.id for r in records}) == len(records)


def test_desk_cohort_aphasic_fraction(desk_cohort):
    frac = np.mean([core.outcome_label(r.score) for r in desk_cohort.records])
    assert abs(frac - 0.34) <= 0.05


def test_desk_cohort_left_lesion_dominance(desk_cohort):
    assert desk_cohort.total_lesioned > 0
    assert desk_cohort.left_lesioned / desk_cohort.total_lesioned >= 0.8


def test_desk_cohort_unknown_fraction(desk_cohort):
    frac = np.mean([r.severity == "unknown" for r in desk_cohort.records])
    assert abs(frac - 0.2) <= 0.06


def test_desk_cohort_all_severities_represented(desk_cohort):
    counts = {c: 0 for c in core.SEVERITY_CATEGORIES}
    for r in desk_cohort.records:
        counts[r.severity] += 1
    assert min(counts.values()) >= 5


def test_desk_cohort_recovery_times_in_range(desk_cohort):
    lo, hi = desk_cohort.config.recovery_range
    for r in desk_cohort.records:
        assert lo <= r.recovery_time <= hi


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_subjects=5)
    with pytest.raises(ValueError):
        SynthConfig(dims=(8, 32, 32))
    with pytest.raises(ValueError):
        SynthConfig(severity_thresholds=(0.3, 0.3, 0.1))
    with pytest.raises(ValueError):
        SynthConfig(left_bias=1.5)


def test_truth_validation():
    with pytest.raises(ValueError):
        TruthModel(causal_rois=(1, 2), betas=(1.0,), gamma=default_truth().gamma,
                   delta=0.0, noise_sd=1.0, base=60.0)
    with pytest.raises(ValueError):
        TruthModel(causal_rois=(1,), betas=(1.0,), gamma={"severe": 1.0},
                   delta=0.0, noise_sd=1.0, base=60.0)


def test_truth_json_round_trip():
    t = default_truth()
    assert TruthModel.from_json_dict(t.to_json_dict()) == t
    c = SMALL
    assert SynthConfig.from_json_dict(c.to_json_dict()) == c


def test_write_cohort_round_trip(tmp_path):
    manifest = write_cohort(SMALL, default_truth(), tmp_path)
    assert len(manifest.subjects) == SMALL.n_subjects
    loaded = core.CohortManifest.load(tmp_path)
    assert loaded.to_json() == manifest.to_json()
    for rel in loaded.referenced_paths():
        assert (tmp_path / rel).is_file()
    atlas = core.read_volume(tmp_path / "atlas.vol")
    assert np.array_equal(atlas.labels, gen_atlas(SMALL, "rois").labels)
    rec = loaded.subjects[2]
    vol = core.read_volume(tmp_path / loaded.volume_paths[rec.id])
    want, lesion, _ = gen_subject(SMALL, default_truth(), 2)
    assert np.array_equal(vol.data, want.data)
    les = core.read_volume(tmp_path / loaded.lesion_paths[rec.id])
    assert np.array_equal(les.labels, lesion.labels)
