"""Cross-frame feature fusion.

For a point of the current frame and each of the ``K`` previous aligned
frames (most recent first), the fused row holds::

    [dx, dy, dz, r_neighbor, d, c_neighbor(q)]   # one block per history frame
    [r_current, c_current(q)]                    # trailing block

where ``dx, dy, dz`` are neighbour minus current coordinates, ``d`` is their
Euclidean norm and ``r_neighbor`` is the neighbour's raw intensity. Width is
``(q + 5) * K + q + 1``; values are not rescaled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ._atomic import atomic_write_bytes
from .errors import EmptyInputError, EmptyTargetError, InvalidConfigError, MalformedFileError, ShapeError
from .frame_io import Frame, Pose, _read_bytes, apply_pose
from .knn import build_index

SCORE_MAGIC = b"P2SC"
FEATURE_MAGIC = b"P2FT"
SCORE_ROW_TOL = 1e-4
POLICIES = ("skip", "pad")


def feature_width(q: int, k: int) -> int:
    return (q + 5) * k + q + 1


def validate_scores(scores, n: int | None = None, tol: float = SCORE_ROW_TOL) -> np.ndarray:
    """Check an ``(n, q)`` score matrix and return it as float32."""
    s = np.asarray(scores, dtype=np.float32)
    if s.ndim != 2 or s.shape[1] < 1:
        raise ShapeError(f"scores must be 2-D (n, q), got shape {s.shape}")
    if n is not None and s.shape[0] != n:
        raise ShapeError(f"score rows {s.shape[0]} != frame points {n}")
    if not np.isfinite(s).all() or s.min() < 0.0 or s.max() > 1.0:
        raise ShapeError("score entries must lie in [0, 1]")
    worst = np.abs(s.sum(axis=1, dtype=np.float64) - 1.0).max(initial=0.0)
    if worst > tol:
        raise ShapeError(f"score rows must sum to 1 (worst deviation {worst:.2e})")
    return s


@dataclass(frozen=True, eq=False)
class FusedFrame:
    features: np.ndarray
    q: int
    k: int
    frame_id: int = 0

    def __post_init__(self):
        if self.features.shape[1] != feature_width(self.q, self.k):
            raise ShapeError(
                f"feature width {self.features.shape[1]} != (q+5)K+q+1 = "
                f"{feature_width(self.q, self.k)}"
            )

    def __len__(self):
        return self.features.shape[0]

    def block(self, u: int) -> np.ndarray:
        """Columns describing history frame ``u`` (0 = most recent)."""
        w = self.q + 5
        return self.features[:, u * w:(u + 1) * w]

    @property
    def current_scores(self) -> np.ndarray:
        return self.features[:, -self.q:]


def _fuse(current: Frame, current_scores, history, indices, threads: int = 1) -> FusedFrame:
    n = len(current)
    scores = validate_scores(current_scores, n)
    q = scores.shape[1]
    k = len(history)
    if k < 1:
        raise InvalidConfigError("fusion needs at least one history frame")
    out = np.empty((n, feature_width(q, k)), dtype=np.float32)
    cur = current.xyz.astype(np.float64)
    col = 0
    for (frame, hscores), index in zip(history, indices):
        hscores = validate_scores(hscores, len(frame))
        if hscores.shape[1] != q:
            raise ShapeError(f"history has q={hscores.shape[1]}, current has q={q}")
        nn, _ = index.query_many(cur, threads=threads)
        delta = frame.xyz[nn].astype(np.float64) - cur
        out[:, col:col + 3] = delta
        out[:, col + 3] = frame.intensity[nn]
        out[:, col + 4] = np.sqrt((delta * delta).sum(axis=1))
        out[:, col + 5:col + 5 + q] = hscores[nn]
        col += q + 5
    out[:, col] = current.intensity
    out[:, col + 1:] = scores
    return FusedFrame(out, q, k, current.frame_id)


def fuse(current: Frame, current_scores, history: Sequence[tuple[Frame, np.ndarray]],
         index_kind: str = "kdtree", threads: int = 1) -> FusedFrame:
    """Fuse one frame with its aligned history (``history[0]`` is ``t-1``).

    All frames must already share a coordinate system.
    """
    for frame, _ in history:
        if len(frame) == 0:
            raise EmptyTargetError("history frame has no points")
    indices = [build_index(frame, index_kind) for frame, _ in history]
    return _fuse(current, current_scores, history, indices, threads)


def history_slots(t: int, k: int, policy: str) -> list[int] | None:
    """Sequence positions used as history for position ``t``, newest first.

    ``None`` means the frame is dropped (``skip`` policy). Under ``pad``
    missing slots reuse the oldest available frame; position 0 pads with
    itself.
    """
    if policy not in POLICIES:
        raise InvalidConfigError(f"unknown sequence-start policy {policy!r}")
    if t >= k:
        return [t - u for u in range(1, k + 1)]
    if policy == "skip":
        return None
    return [max(t - u, 0) for u in range(1, k + 1)]


def fuse_sequence(sequence: Iterable[tuple[Frame, Pose, np.ndarray]], k: int = 2,
                  policy: str = "skip", index_kind: str = "kdtree",
                  threads: int = 1) -> Iterator[FusedFrame]:
    """Align each ``(frame, pose, scores)`` to the world and fuse it with its history.

    Yields one FusedFrame per frame that has history under ``policy``,
    carrying the input frame's ``frame_id``. Indices over history frames are
    built once and reused.
    """
    if k < 1:
        raise InvalidConfigError("K must be >= 1")
    if policy not in POLICIES:
        raise InvalidConfigError(f"unknown sequence-start policy {policy!r}")
    window: dict[int, tuple[Frame, np.ndarray, object]] = {}
    seen = 0
    for t, (frame, pose, scores) in enumerate(sequence):
        seen += 1
        world = apply_pose(frame, pose)
        window[t] = (world, validate_scores(scores, len(world)), None)
        slots = history_slots(t, k, policy)
        if slots is not None:
            history, indices = [], []
            for s in slots:
                wf, ws, idx = window[s]
                if idx is None:
                    idx = build_index(wf, index_kind)
                    window[s] = (wf, ws, idx)
                history.append((wf, ws))
                indices.append(idx)
            yield _fuse(world, window[t][1], history, indices, threads)
        for s in list(window):
            # frame 0 stays while padding may still reuse it
            if s < t - k + 1 and not (policy == "pad" and s == 0 and t + 1 < k):
                del window[s]
    if seen == 0:
        raise EmptyInputError("sequence is empty")


# ---------------------------------------------------------------------------
# Binary formats
# ---------------------------------------------------------------------------


def _pack_matrix(magic: bytes, m: np.ndarray) -> bytes:
    m = np.ascontiguousarray(m, dtype="<f4")
    return magic + struct.pack("<II", m.shape[0], m.shape[1]) + m.tobytes()


def _unpack_matrix(magic: bytes, data: bytes, path) -> np.ndarray:
    if len(data) < 12 or data[:4] != magic:
        raise MalformedFileError(f"{path}: missing {magic.decode()} header")
    n, w = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * n * w:
        raise MalformedFileError(f"{path}: payload size does not match {n}x{w}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, w).astype(np.float32)


def write_scores(scores, path) -> None:
    atomic_write_bytes(path, _pack_matrix(SCORE_MAGIC, scores))


def read_scores(path, validate: bool = True) -> np.ndarray:
    s = _unpack_matrix(SCORE_MAGIC, _read_bytes(path), path)
    return validate_scores(s) if validate else s


def write_features(fused: FusedFrame, path) -> None:
    atomic_write_bytes(path, _pack_matrix(FEATURE_MAGIC, fused.features))


def read_features(path, q: int, frame_id: int | None = None) -> FusedFrame:
    """Read a feature cache; ``K`` is recovered from the stored width and ``q``."""
    feats = _unpack_matrix(FEATURE_MAGIC, _read_bytes(path), path)
    k, rem = divmod(feats.shape[1] - q - 1, q + 5)
    if rem or k < 1:
        raise ShapeError(f"{path}: width {feats.shape[1]} is not (q+5)K+q+1 for q={q}")
    if frame_id is None:
        stem = Path(path).name.split(".")[0]
        frame_id = int(stem) if stem.isdigit() else 0
    return FusedFrame(feats, q, k, frame_id)
