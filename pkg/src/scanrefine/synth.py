"""Synthetic LiDAR-like sequences with labels, poses and occlusion flags.

A scene is a ground plane plus boxes (buildings, cars) and open cylinders
(poles, pedestrians). Each frame, surface points are drawn from the
sensor-facing surfaces with density proportional to the solid angle they
subtend, restricted to a vertical field of view, so the point layout roughly
resembles a spinning LiDAR. Points stay in the frame even when hidden;
hidden ones are flagged by a spherical depth buffer:

    a point is occluded when the nearest point of its (azimuth, elevation)
    cell is strictly closer and belongs to a different object.

The object rule keeps a lone surface from shadowing itself (a single plane
has no occluded points).

:func:`oracle_scores` turns labels into near-correct class probabilities and
corrupts a fraction of occluded points towards a confusable class, standing
in for a pre-trained segmentation model.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._atomic import atomic_write_bytes, atomic_write_text
from .errors import InvalidConfigError
from .frame_io import (
    Frame,
    LabelArray,
    Pose,
    apply_pose,
    frame_paths,
    inverse_remap,
    load_remap,
    write_frame,
    write_labels,
    write_poses,
)
from .fusion import write_scores
from .knn import build_index

# raw SemanticKITTI ids of the classes the generator emits
CLASS_RAW_IDS = {"road": 40, "building": 50, "car": 10, "pole": 80, "person": 30}
DEFAULT_INTENSITY = {"road": 0.25, "building": 0.45, "car": 0.55, "pole": 0.35, "person": 0.4}
DEFAULT_CONFUSABLE = {"car": "road", "road": "car", "building": "pole", "pole": "building",
                      "person": "road"}

PLANE, BOX, CYLINDER = "plane", "box", "cylinder"


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the master seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class SceneConfig:
    extent: float = 80.0
    ground_halfwidth: float = 12.0
    n_buildings: int = 4
    n_cars: int = 3
    n_poles: int = 6
    n_pedestrians: int = 0
    building_size: tuple[float, float, float] = (12.0, 8.0, 9.0)
    car_size: tuple[float, float, float] = (4.2, 1.8, 1.5)
    pole_size: tuple[float, float] = (0.15, 5.0)
    pedestrian_size: tuple[float, float] = (0.3, 1.75)
    car_speed: tuple[float, float] = (3.0, 4.5)
    pedestrian_speed: tuple[float, float] = (0.05, 0.15)
    frames: int = 30
    points_per_frame: int = 20_000
    sensor_speed: float = 1.0
    sensor_sway: float = 1.0
    sensor_height: float = 1.73
    fov_deg: tuple[float, float] = (-25.0, 3.0)
    max_range: float = 60.0
    patch_size: float = 1.0
    zbuffer_az_deg: float = 1.0
    zbuffer_el_deg: float = 1.0
    intensity_noise: float = 0.1
    k: int = 2
    seed: int = 0
    q: int = 20
    remap_path: str | None = None

    def validate(self) -> "SceneConfig":
        if self.frames < self.k + 1:
            raise InvalidConfigError(f"need at least K+1={self.k + 1} frames, got {self.frames}")
        if self.points_per_frame < 100:
            raise InvalidConfigError("points_per_frame must be >= 100")
        counts = (self.n_buildings, self.n_cars, self.n_poles, self.n_pedestrians)
        if min(counts) < 0:
            raise InvalidConfigError("object counts must be non-negative")
        sizes = (*self.building_size, *self.car_size, *self.pole_size, *self.pedestrian_size,
                 self.extent, self.patch_size, self.zbuffer_az_deg, self.zbuffer_el_deg,
                 self.max_range)
        if min(sizes) <= 0:
            raise InvalidConfigError("object sizes, extent and resolutions must be positive")
        if not self.fov_deg[0] < self.fov_deg[1]:
            raise InvalidConfigError("fov_deg must be (low, high) with low < high")
        return self

    def class_ids(self) -> dict[str, int]:
        table = load_remap(self.remap_path)
        ids = {}
        for name, raw in CLASS_RAW_IDS.items():
            if raw not in table or table[raw] >= self.q:
                raise InvalidConfigError(f"label map has no valid id for {name} (raw {raw})")
            ids[name] = table[raw]
        return ids


@dataclass
class SceneObject:
    object_id: int
    name: str
    kind: str
    center: np.ndarray  # plane/box: centre of the base; cylinder: centre of the base
    size: np.ndarray  # box (length, width, height); cylinder (radius, height); plane (lx, ly)
    yaw: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # traffic wrap: x stays within +-wrap/2 of a reference moving at wrap_speed
    wrap: float = 0.0
    wrap_x0: float = 0.0
    wrap_speed: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if (self.size <= 0).any():
            raise InvalidConfigError(f"object {self.object_id} ({self.name}) has zero extent")

    @property
    def static(self) -> bool:
        return not self.velocity.any()

    def position(self, t: int) -> np.ndarray:
        p = self.center + self.velocity * t
        if self.wrap > 0:
            ref = self.wrap_x0 + self.wrap_speed * t
            p[0] = ref + (p[0] - ref + self.wrap / 2) % self.wrap - self.wrap / 2
        return p

    def sdf(self, points, t: int) -> np.ndarray:
        """Signed distance from world points to this object's surface at frame ``t``."""
        p = np.asarray(points, dtype=np.float64) - self.position(t)
        if self.kind == PLANE:
            return np.abs(p[:, 2])
        local = p @ _rot_z(self.yaw)
        if self.kind == BOX:
            half = np.array([self.size[0] / 2, self.size[1] / 2, self.size[2] / 2])
            local[:, 2] -= half[2]
            d = np.abs(local) - half
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
            return outside + np.minimum(d.max(axis=1), 0.0)
        r, h = self.size
        dr = np.hypot(local[:, 0], local[:, 1]) - r
        dz = np.abs(local[:, 2] - h / 2) - h / 2
        d = np.stack([dr, dz], axis=1)
        return np.linalg.norm(np.maximum(d, 0.0), axis=1) + np.minimum(d.max(axis=1), 0.0)

    def footprint_contains(self, xy, t: int) -> np.ndarray:
        p = np.asarray(xy, dtype=np.float64)[:, :2] - self.position(t)[:2]
        local = p @ _rot_z(self.yaw)[:2, :2]
        if self.kind == BOX:
            return (np.abs(local[:, 0]) < self.size[0] / 2) & (np.abs(local[:, 1]) < self.size[1] / 2)
        if self.kind == CYLINDER:
            return np.hypot(local[:, 0], local[:, 1]) < self.size[0]
        return np.zeros(len(p), dtype=bool)


@dataclass
class Scene:
    objects: list[SceneObject]
    poses: list[Pose]
    class_ids: dict[str, int]

    def object(self, object_id: int) -> SceneObject:
        return next(o for o in self.objects if o.object_id == object_id)


@dataclass
class SynthFrame:
    frame: Frame
    pose: Pose
    labels: LabelArray
    occluded: np.ndarray

    @property
    def object_ids(self) -> np.ndarray:
        return self.labels.instances


# ---------------------------------------------------------------------------
# Scene layout
# ---------------------------------------------------------------------------


def sensor_poses(cfg: SceneConfig) -> list[Pose]:
    """Sensor-to-world poses: forward motion along x with a gentle lateral sway."""
    poses = []
    x0 = -cfg.sensor_speed * (cfg.frames - 1) / 2
    period = max(cfg.frames, 2)
    for t in range(cfg.frames):
        x = x0 + cfg.sensor_speed * t
        phase = 2 * math.pi * t / period
        y = cfg.sensor_sway * math.sin(phase)
        dx = cfg.sensor_speed
        dy = cfg.sensor_sway * 2 * math.pi / period * math.cos(phase)
        yaw = math.atan2(dy, dx) if (dx or dy) else 0.0
        poses.append(Pose(_rot_z(yaw), [x, y, cfg.sensor_height]))
    return poses


def _place(rng, count, radius, sample_xy, placed, tries=200):
    out = []
    for _ in range(count):
        for _ in range(tries):
            xy = sample_xy()
            if all(np.hypot(*(xy - p)) > radius + r for p, r in placed):
                break
        placed.append((xy, radius))
        out.append(xy)
    return out


def build_scene(cfg: SceneConfig) -> Scene:
    """Lay out the default street scene from the config's geometry stream."""
    cfg.validate()
    ids = cfg.class_ids()
    rng = stream(cfg.seed, "geometry")
    half = cfg.extent / 2
    along = min(half - 5.0, 30.0)
    gw = min(cfg.ground_halfwidth, half)
    # the ground is a street-wide strip so that buildings do not cast
    # permanent shadows onto it
    objects = [SceneObject(1, "road", PLANE, [0, 0, 0], [cfg.extent, 2 * gw])]
    placed: list = []
    next_id = 2

    # buildings take evenly spaced slots along the street on alternating
    # sides, so they rarely hide one another
    bl, bw, bh = cfg.building_size
    slot = 2 * along / max(cfg.n_buildings, 1)
    first_side = rng.choice([-1.0, 1.0])
    for i in range(cfg.n_buildings):
        size = [bl * rng.uniform(0.7, 1.3), bw * rng.uniform(0.7, 1.3), bh * rng.uniform(0.7, 1.3)]
        x = -along + (i + 0.5) * slot + rng.uniform(-0.1, 0.1) * slot
        y = first_side * (-1) ** i * (gw + 1.0 + size[1] / 2 + rng.uniform(0, 2))
        objects.append(SceneObject(next_id, "building", BOX, [x, y, 0], size,
                                   yaw=rng.uniform(-0.1, 0.1)))
        placed.append((np.array([x, y]), math.hypot(size[0], size[1]) / 2))
        next_id += 1

    # cars move relative to the sensor, each in its own lane, and re-enter
    # at the far end once they are more than `along` ahead of or behind it
    # (a steady stream of traffic); at mid-sequence they are spread out so
    # none trails another
    cl, cw, ch = cfg.car_size
    lanes = (5.0, -5.0, 8.0, -8.0)
    car_slot = 1.6 * along / max(cfg.n_cars, 1)
    x0 = -cfg.sensor_speed * (cfg.frames - 1) / 2
    for i in range(cfg.n_cars):
        rel = rng.uniform(*cfg.car_speed) * rng.choice([-1.0, 1.0])
        speed = cfg.sensor_speed + rel
        lane = lanes[i % len(lanes)] + rng.uniform(-0.3, 0.3)
        mid = -0.8 * along + (i + 0.5) * car_slot + rng.uniform(-0.15, 0.15) * car_slot
        x = mid - speed * (cfg.frames - 1) / 2
        objects.append(SceneObject(next_id, "car", BOX, [x, lane, 0], [cl, cw, ch],
                                   yaw=0.0 if speed >= 0 else math.pi, velocity=[speed, 0, 0],
                                   wrap=2 * along, wrap_x0=x0, wrap_speed=cfg.sensor_speed))
        next_id += 1

    pr, ph = cfg.pole_size
    for xy in _place(rng, cfg.n_poles, pr + 0.5,
                     lambda: np.array([rng.uniform(-along, along),
                                       rng.choice([-1, 1]) * rng.uniform(10.0, 11.5)]),
                     placed):
        objects.append(SceneObject(next_id, "pole", CYLINDER, [*xy, 0],
                                   [pr * rng.uniform(0.8, 1.3), ph * rng.uniform(0.8, 1.3)]))
        next_id += 1

    qr, qh = cfg.pedestrian_size
    for _ in range(cfg.n_pedestrians):
        side = rng.choice([-1.0, 1.0])
        speed = rng.uniform(*cfg.pedestrian_speed) * rng.choice([-1.0, 1.0])
        objects.append(SceneObject(next_id, "person", CYLINDER,
                                   [rng.uniform(-along, along), side * rng.uniform(10.0, 11.0), 0],
                                   [qr, qh], velocity=[speed, 0, 0]))
        next_id += 1
    return Scene(objects, sensor_poses(cfg), ids)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class _Patches:
    """Surface patches of one frame, stored column-wise."""

    kind: list = field(default_factory=list)  # 0 planar, 1 cylindrical
    origin: list = field(default_factory=list)  # planar: corner; cylinder: base centre
    e1: list = field(default_factory=list)  # planar edge; cylinder: (radius, theta0, dtheta)
    e2: list = field(default_factory=list)  # planar edge; cylinder: (z0, dz, 0)
    center: list = field(default_factory=list)
    normal: list = field(default_factory=list)
    area: list = field(default_factory=list)
    obj: list = field(default_factory=list)

    def add_rect(self, corner, u, v, normal, obj_index, size):
        lu, lv = np.linalg.norm(u), np.linalg.norm(v)
        nu, nv = max(1, math.ceil(lu / size)), max(1, math.ceil(lv / size))
        du, dv = u / nu, v / nv
        ii, jj = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
        corners = corner + ii.reshape(-1, 1) * du + jj.reshape(-1, 1) * dv
        m = len(corners)
        self.kind.append(np.zeros(m, dtype=np.int8))
        self.origin.append(corners)
        self.e1.append(np.tile(du, (m, 1)))
        self.e2.append(np.tile(dv, (m, 1)))
        self.center.append(corners + (du + dv) / 2)
        self.normal.append(np.tile(normal, (m, 1)))
        self.area.append(np.full(m, np.linalg.norm(np.cross(du, dv))))
        self.obj.append(np.full(m, obj_index))

    def add_cylinder(self, base, radius, height, obj_index, size):
        nt = max(8, math.ceil(2 * math.pi * radius / size))
        nz = max(1, math.ceil(height / size))
        dt, dz = 2 * math.pi / nt, height / nz
        ti, zi = np.meshgrid(np.arange(nt), np.arange(nz), indexing="ij")
        t0 = ti.ravel() * dt
        z0 = zi.ravel() * dz
        m = len(t0)
        tc = t0 + dt / 2
        normal = np.stack([np.cos(tc), np.sin(tc), np.zeros(m)], axis=1)
        self.kind.append(np.ones(m, dtype=np.int8))
        self.origin.append(np.tile(base, (m, 1)))
        self.e1.append(np.stack([np.full(m, radius), t0, np.full(m, dt)], axis=1))
        self.e2.append(np.stack([z0, np.full(m, dz), np.zeros(m)], axis=1))
        self.center.append(base + radius * normal + np.stack(
            [np.zeros(m), np.zeros(m), z0 + dz / 2], axis=1))
        self.normal.append(normal)
        self.area.append(np.full(m, radius * dt * dz))
        self.obj.append(np.full(m, obj_index))

    def arrays(self):
        return {k: np.concatenate(v) for k, v in self.__dict__.items()}


def _object_patches(scene: Scene, t: int, size: float):
    patches = _Patches()
    for oi, obj in enumerate(scene.objects):
        pos = obj.position(t)
        if obj.kind == PLANE:
            lx, ly = obj.size
            patches.add_rect(pos + [-lx / 2, -ly / 2, 0], np.array([lx, 0.0, 0]),
                             np.array([0.0, ly, 0]), np.array([0.0, 0, 1]), oi, size)
        elif obj.kind == BOX:
            rot = _rot_z(obj.yaw)
            l, w, h = obj.size
            ex, ey, ez = rot[:, 0] * l, rot[:, 1] * w, np.array([0.0, 0, h])
            c0 = pos - ex / 2 - ey / 2  # bottom corner
            faces = [
                (c0 + ez, ex, ey, np.array([0.0, 0, 1])),  # top
                (c0, ex, ez, -rot[:, 1]),
                (c0 + ey, ex, ez, rot[:, 1]),
                (c0, ey, ez, -rot[:, 0]),
                (c0 + ex, ey, ez, rot[:, 0]),
            ]
            for corner, u, v, n in faces:
                patches.add_rect(corner, u, v, n, oi, size)
        else:
            r, h = obj.size
            patches.add_cylinder(pos, r, h, oi, size)
    return patches.arrays()


def _draw_points(p, chosen, rng):
    """One uniform surface sample inside each chosen patch."""
    n = len(chosen)
    u, v = rng.random(n), rng.random(n)
    kind = p["kind"][chosen]
    pts = np.empty((n, 3))
    normals = np.empty((n, 3))
    planar = kind == 0
    c = chosen[planar]
    pts[planar] = p["origin"][c] + u[planar, None] * p["e1"][c] + v[planar, None] * p["e2"][c]
    normals[planar] = p["normal"][c]
    cyl = ~planar
    c = chosen[cyl]
    radius, t0, dt = p["e1"][c].T
    z0, dz, _ = p["e2"][c].T
    theta = t0 + u[cyl] * dt
    normals[cyl] = np.stack([np.cos(theta), np.sin(theta), np.zeros(len(c))], axis=1)
    pts[cyl] = p["origin"][c] + radius[:, None] * normals[cyl]
    pts[cyl, 2] = p["origin"][c][:, 2] + z0 + v[cyl] * dz
    return pts, normals


def _sample_world_points(scene: Scene, cfg: SceneConfig, t: int):
    """Return world points and the scene-object index of each."""
    rng = stream(cfg.seed, "sampling", t)
    sensor = scene.poses[t].translation
    p = _object_patches(scene, t, cfg.patch_size)
    to_sensor = sensor - p["center"]
    dist = np.linalg.norm(to_sensor, axis=1)
    cos = np.einsum("ij,ij->i", p["normal"], to_sensor) / np.maximum(dist, 1e-9)
    weight = p["area"] * np.clip(cos, 0.0, None) / np.maximum(dist, 1e-3) ** 2
    weight[dist > cfg.max_range + cfg.patch_size] = 0.0
    if weight.sum() <= 0:
        raise InvalidConfigError(f"frame {t}: no surface faces the sensor")
    lo, hi = np.radians(cfg.fov_deg)
    statics = [o for o in scene.objects if o.kind != PLANE and o.static]
    need = cfg.points_per_frame
    factor = 1.5
    for _ in range(8):
        m = int(need * factor) + 16
        counts = rng.multinomial(m, weight / weight.sum())
        chosen = np.repeat(np.arange(len(weight)), counts)
        pts, normals = _draw_points(p, chosen, rng)
        ray = pts - sensor
        rng_ = np.linalg.norm(ray, axis=1)
        el = np.arctan2(ray[:, 2], np.hypot(ray[:, 0], ray[:, 1]))
        keep = (el >= lo) & (el <= hi) & (rng_ <= cfg.max_range)
        keep &= np.einsum("ij,ij->i", normals, -ray) > 0  # front-facing
        obj = p["obj"][chosen]
        ground = np.array([scene.objects[i].kind == PLANE for i in obj])
        for o in statics:  # no ground inside solid static objects
            keep &= ~(ground & o.footprint_contains(pts, t))
        idx = np.flatnonzero(keep)
        if len(idx) >= need:
            pick = np.sort(rng.choice(idx, size=need, replace=False))
            return pts[pick], obj[pick]
        factor *= 2
    raise InvalidConfigError(f"frame {t}: cannot place {need} points inside the field of view")


# ---------------------------------------------------------------------------
# Occlusion
# ---------------------------------------------------------------------------


def zbuffer_occlusion(xyz, object_ids, az_res_deg: float = 1.0,
                      el_res_deg: float = 1.0) -> np.ndarray:
    """Flag points whose angular cell is won by a strictly closer point of another object.

    ``xyz`` is in sensor coordinates. Within a cell the winner is the
    closest point, ties broken by lowest index.
    """
    p = np.asarray(xyz, dtype=np.float64)
    obj = np.asarray(object_ids, dtype=np.int64)
    rng_ = np.sqrt((p * p).sum(axis=1))
    az = np.arctan2(p[:, 1], p[:, 0])
    el = np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))
    ra, re = math.radians(az_res_deg), math.radians(el_res_deg)
    n_el = int(math.ceil(math.pi / re)) + 1
    cell = np.floor((az + math.pi) / ra).astype(np.int64) * n_el + np.floor(
        (el + math.pi / 2) / re).astype(np.int64)
    order = np.lexsort((np.arange(len(p)), rng_, cell))
    sorted_cell = cell[order]
    first = np.ones(len(p), dtype=bool)
    first[1:] = sorted_cell[1:] != sorted_cell[:-1]
    group = np.cumsum(first) - 1
    winners = order[first][group]
    win_range = np.empty(len(p))
    win_obj = np.empty(len(p), dtype=np.int64)
    win_range[order] = rng_[winners]
    win_obj[order] = obj[winners]
    return (win_range < rng_) & (win_obj != obj)


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


def render_frame(scene: Scene, cfg: SceneConfig, t: int) -> SynthFrame:
    world, obj_index = _sample_world_points(scene, cfg, t)
    pose = scene.poses[t]
    local = pose.inverse().transform_points(world).astype(np.float32)
    objects = scene.objects
    names = [objects[i].name for i in obj_index]
    classes = np.array([scene.class_ids[nm] for nm in names], dtype=np.int64)
    instance = np.array([objects[i].object_id for i in obj_index], dtype=np.int64)
    base = np.array([DEFAULT_INTENSITY[nm] for nm in names])
    r = stream(cfg.seed, "intensity", t).normal(0.0, cfg.intensity_noise, len(base))
    intensity = np.clip(base + r, 0.0, 1.0).astype(np.float32)
    points = np.column_stack([local, intensity]).astype(np.float32)
    frame = Frame(points, t)
    table = load_remap(cfg.remap_path)
    labels = LabelArray.from_mapped(classes, inverse_remap(table), instance)
    occluded = zbuffer_occlusion(frame.xyz, instance, cfg.zbuffer_az_deg, cfg.zbuffer_el_deg)
    return SynthFrame(frame, pose, labels, occluded)


def gen_sequence(cfg: SceneConfig, scene: Scene | None = None) -> list[SynthFrame]:
    """Render every frame of a sequence; ``scene`` defaults to :func:`build_scene`."""
    cfg.validate()
    if scene is None:
        scene = build_scene(cfg)
    if len(scene.poses) < cfg.frames:
        raise InvalidConfigError("scene has fewer sensor poses than frames")
    return [render_frame(scene, cfg, t) for t in range(cfg.frames)]


def refinability(seq: Sequence[SynthFrame], k: int = 2) -> dict:
    """How often an occluded point has a visible world-space neighbour in the previous K frames.

    Only frames with a full history (``t >= k``) are counted.
    """
    world = [apply_pose(s.frame, s.pose) for s in seq]
    hits, total = 0, 0
    for t in range(k, len(seq)):
        occ = np.flatnonzero(seq[t].occluded)
        if not len(occ):
            continue
        ok = np.zeros(len(occ), dtype=bool)
        for u in range(1, k + 1):
            nn, _ = build_index(world[t - u]).query_many(world[t].xyz[occ])
            ok |= ~seq[t - u].occluded[nn]
        hits += int(ok.sum())
        total += len(occ)
    return {"occluded_points": total, "refinable_points": hits,
            "fraction": hits / total if total else 1.0}


# ---------------------------------------------------------------------------
# Noisy oracle scores
# ---------------------------------------------------------------------------


@dataclass
class NoiseConfig:
    epsilon: float = 0.05
    p_occ: float = 0.6
    confusable: Mapping[int, int] = field(default_factory=dict)
    seed: int = 0

    def validate(self, q: int | None = None) -> "NoiseConfig":
        if not 0 <= self.epsilon < 1:
            raise InvalidConfigError("epsilon must lie in [0, 1)")
        if not 0 <= self.p_occ <= 1:
            raise InvalidConfigError("p_occ must lie in [0, 1]")
        if q is not None:
            for a, b in self.confusable.items():
                if not (0 <= a < q and 0 <= b < q):
                    raise InvalidConfigError(f"confusable pair {a}->{b} outside [0, {q})")
        return self

    @classmethod
    def with_default_map(cls, class_ids: Mapping[str, int], **kwargs) -> "NoiseConfig":
        confusable = {class_ids[a]: class_ids[b] for a, b in DEFAULT_CONFUSABLE.items()
                      if a in class_ids and b in class_ids}
        return cls(confusable=confusable, **kwargs)


def oracle_scores(frame: Frame, labels, occluded, noise: NoiseConfig, q: int = 20) -> np.ndarray:
    """Near-correct probabilities with occlusion-driven confusions.

    Each row puts ``1 - epsilon`` on the true class and spreads ``epsilon``
    evenly over the rest. An occluded point whose class has a confusable
    partner is, with probability ``p_occ``, given the partner's row instead.
    The draw is seeded by ``(noise.seed, frame.frame_id)``.
    """
    noise.validate(q)
    y = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    occ = np.asarray(occluded, dtype=bool)
    n = len(frame)
    if y.shape != (n,) or occ.shape != (n,):
        raise InvalidConfigError("labels and occlusion flags must match the frame")
    lut = np.arange(q)
    for a, b in noise.confusable.items():
        lut[a] = b
    u = stream(noise.seed, "noise", frame.frame_id).random(n)
    corrupt = occ & (u < noise.p_occ) & (lut[y] != y)
    target = np.where(corrupt, lut[y], y)
    eps = noise.epsilon
    scores = np.full((n, q), eps / (q - 1))
    scores[np.arange(n), target] = 1.0 - eps
    scores /= scores.sum(axis=1, keepdims=True)
    return scores.astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset output
# ---------------------------------------------------------------------------


def write_sequence(seq_dir, seq: Sequence[SynthFrame], scores: Sequence[np.ndarray],
                   manifest: Mapping | None = None) -> None:
    """Write a SemanticKITTI-style sequence plus scores, occlusion sidecars and a manifest."""
    seq_dir = Path(seq_dir)
    for s, sc in zip(seq, scores):
        paths = frame_paths(seq_dir, s.frame.frame_id)
        write_frame(s.frame, paths["velodyne"])
        write_labels(s.labels, paths["labels"])
        write_scores(sc, paths["scores"])
        atomic_write_bytes(paths["occlusion"], s.occluded.astype(np.uint8).tobytes())
    write_poses([s.pose for s in seq], seq_dir / "poses.txt")
    if manifest is not None:
        atomic_write_text(seq_dir / "manifest.json",
                          json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def read_occlusion(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(bool)


def config_dict(cfg) -> dict:
    return asdict(cfg)
