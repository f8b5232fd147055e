"""Exact 3D nearest-neighbour search across frames.

Two index structures are provided, a balanced KD-tree (the default) and a
uniform grid. Both are exact: the returned hit minimises Euclidean distance
over every indexed point, ties go to the lowest target index, and squared
distances are accumulated in float64 as ``dx*dx + dy*dy + dz*dz`` so that
:func:`brute_force_nearest` produces bit-identical distances.

Intensity never participates in the metric.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

import numba
import numpy as np

from .errors import EmptyTargetError, InvalidConfigError, MalformedLineError

DEFAULT_LEAF_SIZE = 16
_STACK_SIZE = 256


@dataclass(frozen=True)
class NeighborHit:
    target_index: int
    distance: float


def _coords(target) -> np.ndarray:
    """float64 ``(n, 3)`` coordinates of a Frame or raw array."""
    xyz = getattr(target, "xyz", target)
    xyz = np.asarray(xyz)
    if xyz.ndim != 2 or xyz.shape[1] < 3:
        raise ValueError(f"expected (n, 3) coordinates, got shape {xyz.shape}")
    if xyz.shape[0] == 0:
        raise EmptyTargetError("cannot search an empty target frame")
    return np.ascontiguousarray(xyz[:, :3], dtype=np.float64)


def _queries(query) -> np.ndarray:
    q = np.ascontiguousarray(np.atleast_2d(np.asarray(query, dtype=np.float64))[:, :3])
    if q.shape[1] != 3:
        raise ValueError("queries must be 3-vectors")
    return q


# ---------------------------------------------------------------------------
# Brute force (the reference)
# ---------------------------------------------------------------------------


def brute_force_many(target, queries, max_distance: float = math.inf):
    """Linear scan for every query; returns ``(indices, distances)``."""
    pts = _coords(target)
    qs = _queries(queries)
    idx = np.empty(len(qs), dtype=np.int64)
    d2 = np.empty(len(qs), dtype=np.float64)
    for i, q in enumerate(qs):
        dx = pts[:, 0] - q[0]
        dy = pts[:, 1] - q[1]
        dz = pts[:, 2] - q[2]
        dist2 = dx * dx + dy * dy + dz * dz
        j = int(np.argmin(dist2))  # first minimum = lowest index
        idx[i], d2[i] = j, dist2[j]
    miss = d2 > max_distance * max_distance
    idx[miss] = -1
    d2[miss] = math.inf
    return idx, np.sqrt(d2)


def brute_force_nearest(target, query) -> NeighborHit:
    idx, dist = brute_force_many(target, query)
    return NeighborHit(int(idx[0]), float(dist[0]))


# ---------------------------------------------------------------------------
# KD-tree
# ---------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _box_d2(lo, hi, node, qx, qy, qz):
    d2 = 0.0
    g = lo[node, 0] - qx
    if g > 0.0:
        d2 += g * g
    else:
        g = qx - hi[node, 0]
        if g > 0.0:
            d2 += g * g
    g = lo[node, 1] - qy
    if g > 0.0:
        d2 += g * g
    else:
        g = qy - hi[node, 1]
        if g > 0.0:
            d2 += g * g
    g = lo[node, 2] - qz
    if g > 0.0:
        d2 += g * g
    else:
        g = qz - hi[node, 2]
        if g > 0.0:
            d2 += g * g
    return d2


@numba.njit(cache=True, nogil=True)
def _kd_query(pts, perm, lo, hi, left, right, start, end, queries, max_d2, out_idx, out_d2):
    stack = np.empty(_STACK_SIZE, dtype=np.int64)
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        best = max_d2
        best_i = -1
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_d2(lo, hi, node, qx, qy, qz) > best:
                continue
            if left[node] < 0:
                for j in range(start[node], end[node]):
                    dx = pts[j, 0] - qx
                    dy = pts[j, 1] - qy
                    dz = pts[j, 2] - qz
                    d2 = dx * dx + dy * dy + dz * dz
                    oi = perm[j]
                    if d2 < best or (d2 == best and (best_i < 0 or oi < best_i)):
                        best = d2
                        best_i = oi
            else:
                a = left[node]
                b = right[node]
                da = _box_d2(lo, hi, a, qx, qy, qz)
                db = _box_d2(lo, hi, b, qx, qy, qz)
                if da <= db:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
        out_idx[qi] = best_i
        out_d2[qi] = best if best_i >= 0 else np.inf


class _BaseIndex:
    kind = "base"

    def __len__(self):
        return self.n

    def _run(self, qs, max_d2, out_idx, out_d2):
        raise NotImplementedError

    def query_many(self, queries, max_distance: float = math.inf, threads: int = 1):
        """Nearest target for every query row; returns ``(indices, distances)``.

        A query with nothing within ``max_distance`` gets index ``-1`` and
        distance ``inf``. Results do not depend on ``threads``.
        """
        qs = _queries(queries)
        m = len(qs)
        out_idx = np.empty(m, dtype=np.int64)
        out_d2 = np.empty(m, dtype=np.float64)
        max_d2 = max_distance * max_distance
        if threads <= 1 or m < 2048:
            self._run(qs, max_d2, out_idx, out_d2)
        else:
            bounds = np.linspace(0, m, threads + 1).astype(int)
            with ThreadPoolExecutor(threads) as pool:
                jobs = [
                    pool.submit(self._run, qs[a:b], max_d2, out_idx[a:b], out_d2[a:b])
                    for a, b in zip(bounds[:-1], bounds[1:])
                    if b > a
                ]
                for job in jobs:
                    job.result()
        return out_idx, np.sqrt(out_d2)

    def query(self, query) -> NeighborHit:
        idx, dist = self.query_many(query)
        return NeighborHit(int(idx[0]), float(dist[0]))


class KDTreeIndex(_BaseIndex):
    """Balanced KD-tree over a frozen copy of the target coordinates.

    Nodes split at the median of their widest axis; each node keeps the tight
    bounding box of its points, which is what the search prunes against.
    """

    kind = "kdtree"

    def __init__(self, target, leaf_size: int = DEFAULT_LEAF_SIZE):
        if leaf_size < 1:
            raise InvalidConfigError("leaf_size must be >= 1")
        xyz = _coords(target)
        self.n = len(xyz)
        perm = np.arange(self.n, dtype=np.int64)
        lo, hi, left, right, start, end = [], [], [], [], [], []

        def new_node(s, e):
            block = xyz[perm[s:e]]
            lo.append(block.min(axis=0))
            hi.append(block.max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            end.append(e)
            return len(lo) - 1

        todo = [new_node(0, self.n)]
        while todo:
            node = todo.pop()
            s, e = start[node], end[node]
            if e - s <= leaf_size:
                continue
            axis = int(np.argmax(hi[node] - lo[node]))
            mid = (s + e) // 2
            seg = perm[s:e]
            order = np.argpartition(xyz[seg, axis], mid - s, kind="introselect")
            perm[s:e] = seg[order]
            left[node] = new_node(s, mid)
            right[node] = new_node(mid, e)
            todo.extend((left[node], right[node]))

        self.perm = perm
        self.points = np.ascontiguousarray(xyz[perm])
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.end = np.array(end, dtype=np.int64)
        for a in (self.perm, self.points, self.lo, self.hi, self.left, self.right,
                  self.start, self.end):
            a.setflags(write=False)

    def _run(self, qs, max_d2, out_idx, out_d2):
        _kd_query(self.points, self.perm, self.lo, self.hi, self.left, self.right,
                  self.start, self.end, qs, max_d2, out_idx, out_d2)


# ---------------------------------------------------------------------------
# Uniform grid
# ---------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _grid_scan_cell(pts, order, cell_start, key, qx, qy, qz, best, best_i):
    for j in range(cell_start[key], cell_start[key + 1]):
        dx = pts[j, 0] - qx
        dy = pts[j, 1] - qy
        dz = pts[j, 2] - qz
        d2 = dx * dx + dy * dy + dz * dz
        oi = order[j]
        if d2 < best or (d2 == best and (best_i < 0 or oi < best_i)):
            best = d2
            best_i = oi
    return best, best_i


@numba.njit(cache=True, nogil=True)
def _grid_query(pts, order, cell_start, origin, h, dims, queries, max_d2, out_idx, out_d2):
    nx, ny, nz = dims[0], dims[1], dims[2]
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        c = np.empty(3, dtype=np.int64)
        for k in range(3):
            v = math.floor((queries[qi, k] - origin[k]) / h)
            if v < 0:
                v = 0
            if v > dims[k] - 1:
                v = dims[k] - 1
            c[k] = v
        best = max_d2
        best_i = -1
        r = 0
        while True:
            x0 = max(c[0] - r, 0)
            x1 = min(c[0] + r, nx - 1)
            y0 = max(c[1] - r, 0)
            y1 = min(c[1] + r, ny - 1)
            z0 = max(c[2] - r, 0)
            z1 = min(c[2] + r, nz - 1)
            for ix in range(x0, x1 + 1):
                edge_x = ix == c[0] - r or ix == c[0] + r
                for iy in range(y0, y1 + 1):
                    if edge_x or iy == c[1] - r or iy == c[1] + r:
                        for iz in range(z0, z1 + 1):
                            key = (ix * ny + iy) * nz + iz
                            best, best_i = _grid_scan_cell(
                                pts, order, cell_start, key, qx, qy, qz, best, best_i)
                    else:
                        # interior column of the shell: only its two z caps are new
                        for iz in (c[2] - r, c[2] + r):
                            if iz >= 0 and iz < nz:
                                key = (ix * ny + iy) * nz + iz
                                best, best_i = _grid_scan_cell(
                                    pts, order, cell_start, key, qx, qy, qz, best, best_i)
            # distance from the query to the closest cell not yet visited
            bound = np.inf
            for k in range(3):
                if c[k] - r > 0:
                    g = queries[qi, k] - (origin[k] + (c[k] - r) * h)
                    bound = min(bound, max(g, 0.0))
                if c[k] + r < dims[k] - 1:
                    g = origin[k] + (c[k] + r + 1) * h - queries[qi, k]
                    bound = min(bound, max(g, 0.0))
            if bound == np.inf:
                break
            if bound * bound > best * (1.0 + 1e-12):
                break
            r += 1
        out_idx[qi] = best_i
        out_d2[qi] = best if best_i >= 0 else np.inf


class GridIndex(_BaseIndex):
    """Uniform voxel grid with outward shell search.

    The cell edge is picked so that a cell holds about ``points_per_cell``
    points on average; the search stops once the closest unvisited cell is
    farther than the best hit.
    """

    kind = "grid"

    def __init__(self, target, points_per_cell: float = 2.0):
        if points_per_cell <= 0:
            raise InvalidConfigError("points_per_cell must be positive")
        xyz = _coords(target)
        self.n = len(xyz)
        origin = xyz.min(axis=0)
        extent = np.maximum(xyz.max(axis=0) - origin, 1e-9)
        volume = float(np.prod(np.maximum(extent, extent.max() * 1e-3)))
        h = (volume * points_per_cell / self.n) ** (1.0 / 3.0)
        dims = np.maximum(np.ceil(extent / h).astype(np.int64), 1)
        # cap the cell count so sparse elongated clouds don't allocate huge grids
        while np.prod(dims) > 8 * self.n + 64:
            h *= 1.25
            dims = np.maximum(np.ceil(extent / h).astype(np.int64), 1)
        cell = np.clip(np.floor((xyz - origin) / h).astype(np.int64), 0, dims - 1)
        keys = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]
        order = np.argsort(keys, kind="stable")
        counts = np.bincount(keys, minlength=int(np.prod(dims)))
        self.cell_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.order = order.astype(np.int64)
        self.points = np.ascontiguousarray(xyz[order])
        self.origin = origin
        self.h = float(h)
        self.dims = dims
        for a in (self.cell_start, self.order, self.points, self.origin, self.dims):
            a.setflags(write=False)

    def _run(self, qs, max_d2, out_idx, out_d2):
        _grid_query(self.points, self.order, self.cell_start, self.origin, self.h,
                    self.dims, qs, max_d2, out_idx, out_d2)


INDEX_KINDS = {"kdtree": KDTreeIndex, "grid": GridIndex}


def build_index(target, kind: str = "kdtree", **kwargs) -> _BaseIndex:
    try:
        cls = INDEX_KINDS[kind]
    except KeyError:
        raise InvalidConfigError(f"unknown index kind {kind!r}") from None
    return cls(target, **kwargs)


def query_nearest(index: _BaseIndex, query) -> NeighborHit:
    return index.query(query)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

REPORT_KEYS = ("kind", "target_n", "queries", "build_ms", "query_us_mean", "total_ms")


def bench_search(target_sizes: Iterable[int], query_counts: Iterable[int], seed: int = 0,
                 kind: str = "kdtree", extent: float = 50.0) -> list[dict]:
    """Time index build and queries on uniform random clouds.

    Every ``(target_n, queries)`` combination is run once after a warm-up
    query so JIT compilation does not land in the numbers.
    """
    sizes = [int(s) for s in target_sizes]
    counts = [int(c) for c in query_counts]
    if not sizes or not counts or min(sizes) < 1 or min(counts) < 1:
        raise InvalidConfigError("benchmark sizes and query counts must be >= 1")
    rng = np.random.default_rng(seed)
    build_index(np.zeros((1, 3)), kind).query_many(np.zeros((1, 3)))
    records = []
    for n in sizes:
        target = rng.uniform(-extent, extent, size=(n, 3)).astype(np.float32)
        for m in counts:
            queries = rng.uniform(-extent, extent, size=(m, 3)).astype(np.float32)
            t0 = time.perf_counter()
            index = build_index(target, kind)
            t1 = time.perf_counter()
            index.query_many(queries)
            t2 = time.perf_counter()
            records.append({
                "kind": kind,
                "target_n": n,
                "queries": m,
                "build_ms": (t1 - t0) * 1e3,
                "query_us_mean": (t2 - t1) * 1e6 / m,
                "total_ms": (t2 - t0) * 1e3,
            })
    return records


def format_report(records: Iterable[dict]) -> str:
    lines = []
    for rec in records:
        lines.append(" ".join(f"{k}={rec[k]}" for k in REPORT_KEYS if k in rec))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> list[dict]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise MalformedLineError(lineno, f"expected key=value, got {token!r}")
            if key in ("target_n", "queries"):
                rec[key] = int(value)
            elif key == "kind":
                rec[key] = value
            else:
                rec[key] = float(value)
        records.append(rec)
    return records
