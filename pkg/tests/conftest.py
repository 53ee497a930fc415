"""Shared fixtures.  The full 400-subject cohort is expensive enough to build
once per session; volumes are streamed and dropped, only records and lesion
tallies are kept."""

from dataclasses import dataclass

import pytest

from strokepred.core import LabelVolume, SubjectRecord
from strokepred.synthcohort import (SynthConfig, TruthModel, default_truth,
                                    gen_atlas, gen_subject)


@dataclass(frozen=True)
class CohortBundle:
    config: SynthConfig
    truth: TruthModel
    atlas: LabelVolume
    records: list[SubjectRecord]
    left_lesioned: int  # lesioned voxels in the left hemisphere, cohort total
    total_lesioned: int


@pytest.fixture(scope="session")
def desk_cohort() -> CohortBundle:
    config = SynthConfig()
    truth = default_truth()
    atlas = gen_atlas(config, "rois")
    records = []
    left = total = 0
    half = config.dims[0] // 2
    for i in range(config.n_subjects):
        _, lesion, record = gen_subject(config, truth, i, atlas)
        records.append(record)
        hit = lesion.labels == 1
        left += int(hit[:half].sum())
        total += int(hit.sum())
    return CohortBundle(config=config, truth=truth, atlas=atlas,
                        records=records, left_lesioned=left,
                        total_lesioned=total)
