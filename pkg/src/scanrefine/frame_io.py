"""SemanticKITTI-compatible frame, label and pose files, plus rigid alignment.

On-disk conventions
-------------------
* ``<id>.bin``: packed little-endian float32 records ``(x, y, z, r)``.
* ``<id>.label``: packed little-endian uint32; the low 16 bits hold the
  semantic id, the high 16 bits the instance id.
* ``poses.txt``: one row-major 3x4 ``[R|t]`` per line, 12 ASCII floats.
* remap tables: ``raw_id=mapped_id`` lines, ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._atomic import atomic_write_bytes, atomic_write_text
from .errors import (
    InvalidConfigError,
    InvalidDataError,
    InvalidPoseError,
    MalformedFileError,
    MalformedLineError,
    NotFoundError,
    UnknownLabelError,
)

POINT_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
RIGID_TOL = 1e-5


def _readonly(a):
    a.setflags(write=False)
    return a


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise NotFoundError(f"no such file: {path}") from exc


@dataclass(frozen=True, eq=False)
class Frame:
    """One LiDAR scan.

    ``points`` is an ``(n, 4)`` float32 array of ``x, y, z, r`` and is made
    read-only on construction so a frame can be shared between threads.
    """

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise InvalidDataError(f"points must have shape (n, 4), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidDataError("a frame needs at least one point")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise InvalidDataError(f"non-finite value at point {int(np.argmax(bad))}")
        if pts is self.points:
            pts = pts.copy()
        object.__setattr__(self, "points", _readonly(pts))

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True, eq=False)
class LabelArray:
    """Per-point class ids in ``[0, q)`` plus the raw uint32 values they came from."""

    labels: np.ndarray
    raw_labels: np.ndarray | None = None

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise InvalidDataError("labels must be one-dimensional")
        raw = self.raw_labels
        if raw is None:
            raw = labels.astype(np.uint32)
        else:
            raw = np.array(raw, dtype=np.uint32)
            if raw.shape != labels.shape:
                raise InvalidDataError("raw_labels and labels differ in length")
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "raw_labels", _readonly(raw))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def instances(self) -> np.ndarray:
        return (self.raw_labels >> 16).astype(np.int64)

    @classmethod
    def from_mapped(cls, labels, inverse_map: Mapping[int, int], instances=None):
        """Build a label array from learning ids, encoding raw ids via ``inverse_map``."""
        labels = np.asarray(labels, dtype=np.int64)
        lut = np.zeros(max(inverse_map) + 1, dtype=np.uint32)
        for mapped, raw in inverse_map.items():
            lut[mapped] = raw
        raw = lut[labels]
        if instances is not None:
            raw = raw | (np.asarray(instances, dtype=np.uint32) << np.uint32(16))
        return cls(labels, raw)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform taking frame-local coordinates to the world frame."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", _readonly(rot))
        object.__setattr__(self, "translation", _readonly(trans))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_rigid(self, tol: float = RIGID_TOL) -> bool:
        r = self.rotation
        return bool(
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.abs(r.T @ r - np.eye(3)).max() <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def compose(self, inner: "Pose") -> "Pose":
        """``self ∘ inner``: apply ``inner`` first, then ``self``."""
        return Pose(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform_points(self, xyz) -> np.ndarray:
        """Map an ``(n, 3)`` array through the pose in float64."""
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation


def apply_pose(frame: Frame, pose: Pose) -> Frame:
    """Move a frame into the pose's target frame; intensities are left untouched."""
    if not pose.is_rigid():
        raise InvalidPoseError("rotation is not orthonormal with determinant +1")
    pts = frame.points.copy()
    pts[:, :3] = pose.transform_points(frame.xyz).astype(np.float32)
    return Frame(pts, frame.frame_id)


# ---------------------------------------------------------------------------
# Point files
# ---------------------------------------------------------------------------


def _frame_id_from_path(path) -> int:
    stem = Path(path).stem
    return int(stem) if stem.isdigit() else 0


def read_frame(path, frame_id: int | None = None) -> Frame:
    data = _read_bytes(path)
    if len(data) == 0 or len(data) % 16:
        raise MalformedFileError(
            f"{path}: size {len(data)} is not a positive multiple of 16 bytes"
        )
    pts = np.frombuffer(data, dtype=POINT_DTYPE).reshape(-1, 4)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise InvalidDataError(f"{path}: non-finite value at point {int(np.argmax(bad))}")
    if frame_id is None:
        frame_id = _frame_id_from_path(path)
    return Frame(pts.astype(np.float32), frame_id)


def write_frame(frame: Frame, path) -> None:
    atomic_write_bytes(path, frame.points.astype(POINT_DTYPE).tobytes())


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def parse_remap(text: str) -> dict[int, int]:
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        try:
            if not sep:
                raise ValueError
            raw, mapped = int(key), int(value)
        except ValueError:
            raise MalformedLineError(lineno, f"expected raw_id=mapped_id, got {line!r}") from None
        if not 0 <= raw <= 0xFFFF or mapped < 0:
            raise MalformedLineError(lineno, f"id out of range in {line!r}")
        table[raw] = mapped
    return table


def load_remap(path=None) -> dict[int, int]:
    """Load a remap table; without a path, the bundled SemanticKITTI learning map."""
    if path is None:
        text = resources.files("scanrefine.data").joinpath("semantic_kitti.remap").read_text()
    else:
        text = _read_bytes(path).decode()
    return parse_remap(text)


def inverse_remap(table: Mapping[int, int]) -> dict[int, int]:
    """Canonical raw id for each mapped id (the lowest raw id mapping to it)."""
    inv: dict[int, int] = {}
    for raw, mapped in sorted(table.items()):
        inv.setdefault(mapped, raw)
    return inv


def remap_labels(raw, table: Mapping[int, int], q: int) -> np.ndarray:
    bad_cfg = [m for m in table.values() if m >= q]
    if bad_cfg:
        raise InvalidConfigError(f"remap table maps to id {max(bad_cfg)} >= q={q}")
    lut = np.full(0x10000, -1, dtype=np.int64)
    for k, v in table.items():
        lut[k] = v
    semantic = np.asarray(raw, dtype=np.uint32) & np.uint32(0xFFFF)
    mapped = lut[semantic]
    missing = mapped < 0
    if missing.any():
        i = int(np.argmax(missing))
        raise UnknownLabelError(semantic[i], i)
    return mapped


def read_labels(path, q: int = 20, remap: Mapping[int, int] | None = None) -> LabelArray:
    data = _read_bytes(path)
    if len(data) == 0 or len(data) % 4:
        raise MalformedFileError(f"{path}: size {len(data)} is not a positive multiple of 4 bytes")
    raw = np.frombuffer(data, dtype=LABEL_DTYPE).astype(np.uint32)
    table = load_remap() if remap is None else remap
    return LabelArray(remap_labels(raw, table, q), raw)


def write_labels(labels: LabelArray, path) -> None:
    atomic_write_bytes(path, labels.raw_labels.astype(LABEL_DTYPE).tobytes())


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------


def parse_poses(text: str) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise MalformedLineError(lineno, f"expected 12 numbers, got {len(tokens)}")
        try:
            vals = np.array([float(t) for t in tokens])
        except ValueError:
            raise MalformedLineError(lineno, "unparseable number") from None
        m = vals.reshape(3, 4)
        poses.append(Pose(m[:, :3], m[:, 3]))
    return poses


def read_poses(path) -> list[Pose]:
    return parse_poses(_read_bytes(path).decode())


def format_poses(poses: Sequence[Pose]) -> str:
    lines = []
    for p in poses:
        m = np.hstack([p.rotation, p.translation[:, None]])
        lines.append(" ".join(repr(float(v)) for v in m.ravel()))
    return "\n".join(lines) + "\n"


def write_poses(poses: Sequence[Pose], path) -> None:
    atomic_write_text(path, format_poses(poses))


def frame_paths(seq_dir, frame_index: int) -> dict[str, Path]:
    """Canonical file locations for one frame inside a sequence directory."""
    seq_dir = Path(seq_dir)
    name = f"{frame_index:06d}"
    return {
        "velodyne": seq_dir / "velodyne" / f"{name}.bin",
        "labels": seq_dir / "labels" / f"{name}.label",
        "scores": seq_dir / "scores" / f"{name}.p2sc",
        "occlusion": seq_dir / "occlusion" / f"{name}.occ",
    }


def list_frames(seq_dir) -> list[int]:
    vel = Path(seq_dir) / "velodyne"
    if not vel.is_dir():
        raise NotFoundError(f"missing velodyne directory: {vel}")
    return sorted(int(p.stem) for p in vel.glob("*.bin") if p.stem.isdigit())


__all__ = [
    "Frame",
    "LabelArray",
    "Pose",
    "apply_pose",
    "read_frame",
    "write_frame",
    "read_labels",
    "write_labels",
    "read_poses",
    "write_poses",
    "parse_poses",
    "format_poses",
    "load_remap",
    "parse_remap",
    "inverse_remap",
    "remap_labels",
    "frame_paths",
    "list_frames",
]
