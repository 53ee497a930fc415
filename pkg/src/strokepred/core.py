"""Domain types, volume file I/O, lesion statistics and outcome labeling.

Volumes are stored on disk in the self-describing "VOL1" binary layout:

    offset  size  field
    0       4     magic b"VOL1"
    4       4     nx (u32 little-endian)
    8       4     ny
    12      4     nz
    16      1     dtype code: 0 = float32 intensities, 1 = uint16 labels
    17      15    zero padding (header padded to a 16-byte boundary)
    32      -     payload, little-endian, x-fastest (index = x + nx*(y + ny*z))

All multi-byte integers are little-endian.  In memory a volume's ``data``
array is indexed ``data[x, y, z]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VOL1"
HEADER_SIZE = 32
DTYPE_FLOAT32 = 0
DTYPE_UINT16 = 1

SEVERITY_CATEGORIES = ("severe", "moderate", "mild", "normal", "unknown")

APHASIA_THRESHOLD = 60.0

MANIFEST_VERSION = 1


class FormatError(ValueError):
    """Malformed volume/image file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DimensionMismatchError(ValueError):
    pass


class UnknownLabelError(KeyError):
    pass


class DegenerateRoiError(ValueError):
    pass


@dataclass(frozen=True)
class Volume3D:
    """Scalar intensity volume, values in [0, 1], float32."""

    dims: tuple[int, int, int]
    data: np.ndarray  # shape dims, float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        nx, ny, nz = self.dims
        if self.data.shape != (nx, ny, nz):
            raise DimensionMismatchError(
                f"data shape {self.data.shape} != dims {self.dims}")
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("volume intensities must lie in [0, 1]")
        self.data.flags.writeable = False


@dataclass(frozen=True)
class LabelVolume:
    """Integer label volume; 0 is background, uint16."""

    dims: tuple[int, int, int]
    labels: np.ndarray  # shape dims, uint16
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        nx, ny, nz = self.dims
        if self.labels.shape != (nx, ny, nz):
            raise DimensionMismatchError(
                f"labels shape {self.labels.shape} != dims {self.dims}")
        if self.labels.dtype != np.uint16:
            arr = self.labels
            if np.issubdtype(arr.dtype, np.signedinteger) and arr.size and arr.min() < 0:
                raise ValueError("labels must be non-negative")
            object.__setattr__(self, "labels", arr.astype(np.uint16))
        names = dict(self.label_names)
        for lab in self.present_labels():
            names.setdefault(int(lab), f"label_{int(lab)}")
        object.__setattr__(self, "label_names", names)
        self.labels.flags.writeable = False

    def present_labels(self) -> list[int]:
        labs = np.unique(self.labels)
        return [int(v) for v in labs if v != 0]


@dataclass
class SubjectRecord:
    """Tabular row for one subject."""

    id: str
    severity: str
    recovery_time: float  # days since stroke at assessment
    left_lesion_size: int  # damaged voxels in the left hemisphere
    score: float  # spoken picture description T-score
    group: int | None = None  # 1..5 once partitioned

    def __post_init__(self):
        if self.severity not in SEVERITY_CATEGORIES:
            raise ValueError(f"unknown severity category {self.severity!r}")
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")
        if self.recovery_time < 0:
            raise ValueError("recovery_time must be >= 0")
        if self.left_lesion_size < 0:
            raise ValueError("left_lesion_size must be >= 0")


def outcome_label(score: float) -> int:
    """1 = aphasic (score strictly below 60), 0 = non-aphasic."""
    if not np.isfinite(score):
        raise ValueError("score must be finite")
    return 1 if score < APHASIA_THRESHOLD else 0


def lesion_size(lesion: LabelVolume, hemisphere_mask: LabelVolume) -> int:
    """Count lesioned voxels inside the mask; both volumes binary {0,1}."""
    if lesion.dims != hemisphere_mask.dims:
        raise DimensionMismatchError(
            f"lesion dims {lesion.dims} != mask dims {hemisphere_mask.dims}")
    if lesion.labels.max(initial=0) > 1:
        raise ValueError("lesion labels must be in {0, 1}")
    return int(np.count_nonzero((lesion.labels == 1) & (hemisphere_mask.labels == 1)))


def lesion_load(lesion: LabelVolume, atlas: LabelVolume, roi: int) -> float:
    """Fraction of the ROI's voxels marked lesioned, in [0, 1]."""
    if lesion.dims != atlas.dims:
        raise DimensionMismatchError(
            f"lesion dims {lesion.dims} != atlas dims {atlas.dims}")
    roi_mask = atlas.labels == roi
    n_roi = int(np.count_nonzero(roi_mask))
    if roi not in atlas.label_names:
        raise UnknownLabelError(f"ROI {roi} not present in atlas")
    if n_roi == 0:
        raise DegenerateRoiError(f"ROI {roi} has no voxels")
    n_hit = int(np.count_nonzero(roi_mask & (lesion.labels == 1)))
    return n_hit / n_roi


def left_hemisphere_mask(dims: tuple[int, int, int]) -> LabelVolume:
    """Binary mask of the left hemisphere half-grid (x < nx/2)."""
    nx, ny, nz = dims
    labels = np.zeros(dims, dtype=np.uint16)
    labels[: nx // 2, :, :] = 1
    return LabelVolume(dims=dims, labels=labels, label_names={1: "left_hemisphere"})


# ---------------------------------------------------------------------------
# VOL1 file format


def write_volume(volume: Volume3D | LabelVolume, path: str | Path) -> None:
    """Serialize a volume to the VOL1 binary layout (see module docstring)."""
    path = Path(path)
    nx, ny, nz = volume.dims
    if isinstance(volume, Volume3D):
        code = DTYPE_FLOAT32
        payload = np.ascontiguousarray(
            volume.data.transpose(2, 1, 0), dtype="<f4").tobytes()
    else:
        code = DTYPE_UINT16
        payload = np.ascontiguousarray(
            volume.labels.transpose(2, 1, 0), dtype="<u2").tobytes()
    header = MAGIC + struct.pack("<IIIB", nx, ny, nz, code)
    header += b"\x00" * (HEADER_SIZE - len(header))
    path.write_bytes(header + payload)


def read_volume(path: str | Path,
                label_names: dict[int, str] | None = None) -> Volume3D | LabelVolume:
    """Parse a VOL1 file; dtype code selects Volume3D vs LabelVolume."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError("truncated header", len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    nx, ny, nz, code = struct.unpack("<IIIB", raw[4:17])
    if min(nx, ny, nz) == 0 or nx * ny * nz > 2**31:
        raise FormatError(f"dims ({nx}, {ny}, {nz}) out of range", 4)
    if code not in (DTYPE_FLOAT32, DTYPE_UINT16):
        raise FormatError(f"unknown dtype code {code}", 16)
    itemsize = 4 if code == DTYPE_FLOAT32 else 2
    expected = HEADER_SIZE + nx * ny * nz * itemsize
    if len(raw) != expected:
        raise FormatError(
            f"payload length {len(raw) - HEADER_SIZE} != expected {expected - HEADER_SIZE}",
            min(len(raw), expected))
    dims = (nx, ny, nz)
    if code == DTYPE_FLOAT32:
        data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE)
        data = data.reshape(nz, ny, nx).transpose(2, 1, 0).copy()
        return Volume3D(dims=dims, data=data)
    labels = np.frombuffer(raw, dtype="<u2", offset=HEADER_SIZE)
    labels = labels.reshape(nz, ny, nx).transpose(2, 1, 0).copy()
    return LabelVolume(dims=dims, labels=labels, label_names=label_names or {})


# ---------------------------------------------------------------------------
# Cohort manifest


@dataclass
class CohortManifest:
    """Index of a cohort directory: subject records plus file references.

    Serialized as JSON (manifest.json); volume paths are relative to the
    manifest's directory.
    """

    subjects: list[SubjectRecord]
    volume_paths: dict[str, str]
    lesion_paths: dict[str, str]
    atlas_path: str
    atlas_labels: dict[int, str]
    tract_atlas_path: str | None = None
    tract_labels: dict[int, str] = field(default_factory=dict)
    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 64)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "seed": self.seed,
            "dims": list(self.dims),
            "atlas_path": self.atlas_path,
            "atlas_labels": {str(k): v for k, v in sorted(self.atlas_labels.items())},
            "tract_atlas_path": self.tract_atlas_path,
            "tract_labels": {str(k): v for k, v in sorted(self.tract_labels.items())},
            "subjects": [
                {
                    "id": s.id,
                    "severity": s.severity,
                    "recovery_time": s.recovery_time,
                    "left_lesion_size": s.left_lesion_size,
                    "score": s.score,
                    "group": s.group,
                    "volume": self.volume_paths[s.id],
                    "lesion": self.lesion_paths[s.id],
                }
                for s in self.subjects
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CohortManifest":
        doc = json.loads(text)
        subjects = []
        volume_paths = {}
        lesion_paths = {}
        for row in doc["subjects"]:
            subjects.append(SubjectRecord(
                id=row["id"],
                severity=row["severity"],
                recovery_time=row["recovery_time"],
                left_lesion_size=row["left_lesion_size"],
                score=row["score"],
                group=row["group"],
            ))
            volume_paths[row["id"]] = row["volume"]
            lesion_paths[row["id"]] = row["lesion"]
        return cls(
            subjects=subjects,
            volume_paths=volume_paths,
            lesion_paths=lesion_paths,
            atlas_path=doc["atlas_path"],
            atlas_labels={int(k): v for k, v in doc["atlas_labels"].items()},
            tract_atlas_path=doc.get("tract_atlas_path"),
            tract_labels={int(k): v for k, v in doc.get("tract_labels", {}).items()},
            seed=doc["seed"],
            dims=tuple(doc["dims"]),
            version=doc["version"],
        )

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, directory: str | Path, check_files: bool = True) -> "CohortManifest":
        directory = Path(directory)
        manifest = cls.from_json((directory / "manifest.json").read_text())
        if check_files:
            missing = [p for p in manifest.referenced_paths()
                       if not (directory / p).exists()]
            if missing:
                raise FileNotFoundError(
                    f"manifest references missing files: {missing[:5]}")
        return manifest

    def referenced_paths(self) -> list[str]:
        paths = [self.atlas_path]
        if self.tract_atlas_path:
            paths.append(self.tract_atlas_path)
        for s in self.subjects:
            paths.append(self.volume_paths[s.id])
            paths.append(self.lesion_paths[s.id])
        return paths
