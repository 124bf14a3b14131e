"""Static 3D scene: world bounds, axis-aligned buildings, ground users.

All geometric queries used by the channel model and the mission environment
live here. Buildings are axis-aligned boxes, which admit an exact slab-method
segment/box intersection test. A segment counts as blocked only when it
crosses the *open interior* of a box; face-grazing segments are unblocked.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

WORLD_SCHEMA_VERSION = 1

# Hard cap on obstacle height, independent of world size.
BUILDING_HEIGHT_CAP = 250.0


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    def to_array(self) -> np.ndarray:
        return np.array(self, dtype=float)

    @staticmethod
    def of(p: Sequence[float]) -> "Vec3":
        x, y, z = (float(v) for v in p)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise ValueError(f"non-finite coordinates: {(x, y, z)}")
        return Vec3(x, y, z)


@dataclass(frozen=True)
class Building:
    """Axis-aligned box; min_corner < max_corner componentwise."""

    min_corner: Vec3
    max_corner: Vec3

    def __post_init__(self):
        lo, hi = self.min_corner, self.max_corner
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate building box: {lo} .. {hi}")
        if hi.z > BUILDING_HEIGHT_CAP:
            raise ValueError(f"building exceeds {BUILDING_HEIGHT_CAP} m height cap: {hi.z}")

    @property
    def corners(self) -> np.ndarray:
        """All 8 box vertices, shape (8, 3), in a fixed lexicographic order."""
        lo, hi = self.min_corner, self.max_corner
        return np.array(
            [[x, y, z] for x in (lo.x, hi.x) for y in (lo.y, hi.y) for z in (lo.z, hi.z)],
            dtype=float,
        )

    def volume(self) -> float:
        lo, hi = self.min_corner, self.max_corner
        return (hi.x - lo.x) * (hi.y - lo.y) * (hi.z - lo.z)

    def contains_open(self, p: Sequence[float]) -> bool:
        lo, hi = self.min_corner, self.max_corner
        return all(lo[i] < p[i] < hi[i] for i in range(3))


@dataclass
class GroundUser:
    id: int
    position: Vec3
    payload_bits: float

    def __post_init__(self):
        if self.payload_bits < 0:
            raise ValueError("payload_bits must be >= 0")


@dataclass(frozen=True)
class WorldConfig:
    """Scene generation knobs. Defaults give the full-scale urban scene."""

    x_size: float = 1000.0
    y_size: float = 1000.0
    z_size: float = 750.0
    uav_min_height: float = 250.0
    n_users: int = 15
    n_buildings: int = 20
    user_max_z: float = 250.0
    payload_bits: float = 26e6
    building_footprint: tuple[float, float] = (40.0, 120.0)
    building_height: tuple[float, float] = (60.0, 250.0)
    max_placement_attempts: int = 1000

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError("need at least one ground user")
        if self.n_buildings < 0:
            raise ValueError("building count must be >= 0")
        if not 0 < self.uav_min_height < self.z_size:
            raise ValueError("uav_min_height must lie inside the vertical extent")


class PlacementError(RuntimeError):
    """Raised when a scene cannot host the requested objects."""


@dataclass(eq=False)
class World:
    """Immutable scene: bounds, buildings, users, UAV start point.

    Instances are never mutated after construction, so they are safe to share
    across parallel rollout workers.
    """

    bounds: Vec3
    uav_min_height: float
    buildings: list[Building]
    users: list[GroundUser]
    uav_start: Vec3

    # Cached (n, 3) corner arrays for the vectorized slab test.
    _box_lo: np.ndarray = field(init=False, repr=False)
    _box_hi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.buildings:
            self._box_lo = np.array([b.min_corner for b in self.buildings], dtype=float)
            self._box_hi = np.array([b.max_corner for b in self.buildings], dtype=float)
        else:
            self._box_lo = np.zeros((0, 3))
            self._box_hi = np.zeros((0, 3))
        bx, by, bz = self.bounds
        for b in self.buildings:
            if not (0 <= b.min_corner.x and b.max_corner.x <= bx
                    and 0 <= b.min_corner.y and b.max_corner.y <= by
                    and 0 <= b.min_corner.z and b.max_corner.z <= bz):
                raise ValueError(f"building outside bounds: {b}")
        for u in self.users:
            if not self.inside_bounds(u.position):
                raise ValueError(f"user outside bounds: {u}")

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds))

    def inside_bounds(self, p: Sequence[float]) -> bool:
        return all(0 <= p[i] <= self.bounds[i] for i in range(3))

    def point_in_any_building(self, p: Sequence[float]) -> bool:
        if self._box_lo.shape[0] == 0:
            return False
        q = np.asarray(p, dtype=float)
        inside = np.all((self._box_lo < q) & (q < self._box_hi), axis=1)
        return bool(inside.any())

    def to_json(self) -> str:
        doc = {
            "schema_version": WORLD_SCHEMA_VERSION,
            "bounds": list(self.bounds),
            "uav_min_height": self.uav_min_height,
            "uav_start": list(self.uav_start),
            "buildings": [
                {"min_corner": list(b.min_corner), "max_corner": list(b.max_corner)}
                for b in self.buildings
            ],
            "users": [
                {"id": u.id, "position": list(u.position), "payload_bits": u.payload_bits}
                for u in self.users
            ],
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "World":
        doc = json.loads(text)
        version = doc.get("schema_version")
        if version != WORLD_SCHEMA_VERSION:
            raise ValueError(f"unsupported world schema version: {version!r}")
        return World(
            bounds=Vec3.of(doc["bounds"]),
            uav_min_height=float(doc["uav_min_height"]),
            buildings=[
                Building(Vec3.of(b["min_corner"]), Vec3.of(b["max_corner"]))
                for b in doc["buildings"]
            ],
            users=[
                GroundUser(int(u["id"]), Vec3.of(u["position"]), float(u["payload_bits"]))
                for u in doc["users"]
            ],
            uav_start=Vec3.of(doc["uav_start"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path) -> "World":
        with open(path) as fh:
            return World.from_json(fh.read())


def generate_world(seed: int, config: WorldConfig = WorldConfig()) -> World:
    """Deterministically generate a scene from (seed, config).

    Buildings are placed uniformly (overlaps allowed); users are rejection
    sampled so that no user lies strictly inside a building volume.
    """
    rng = np.random.default_rng(seed)
    fp_lo, fp_hi = config.building_footprint
    h_lo, h_hi = config.building_height
    h_cap = min(BUILDING_HEIGHT_CAP, config.z_size)

    buildings = []
    for _ in range(config.n_buildings):
        for _attempt in range(config.max_placement_attempts):
            wx = rng.uniform(fp_lo, fp_hi)
            wy = rng.uniform(fp_lo, fp_hi)
            h = min(rng.uniform(h_lo, h_hi), h_cap)
            if wx >= config.x_size or wy >= config.y_size or h <= 0:
                continue
            x0 = rng.uniform(0, config.x_size - wx)
            y0 = rng.uniform(0, config.y_size - wy)
            buildings.append(Building(Vec3(x0, y0, 0.0), Vec3(x0 + wx, y0 + wy, h)))
            break
        else:
            raise PlacementError(
                f"could not place building within {config.max_placement_attempts} attempts"
            )

    probe = World(
        bounds=Vec3(config.x_size, config.y_size, config.z_size),
        uav_min_height=config.uav_min_height,
        buildings=buildings,
        users=[],
        uav_start=Vec3(0.0, 0.0, config.uav_min_height),
    )
    users = []
    for uid in range(config.n_users):
        pos = sample_user_position(probe, config.user_max_z, rng,
                                   max_attempts=config.max_placement_attempts)
        users.append(GroundUser(uid, pos, config.payload_bits))

    return World(
        bounds=probe.bounds,
        uav_min_height=config.uav_min_height,
        buildings=buildings,
        users=users,
        uav_start=probe.uav_start,
    )


def sample_user_position(world: World, max_z: float, rng: np.random.Generator,
                         max_attempts: int = 1000) -> Vec3:
    """Uniform position with z <= max_z that is not strictly inside a building."""
    for _attempt in range(max_attempts):
        p = Vec3(
            float(rng.uniform(0, world.bounds.x)),
            float(rng.uniform(0, world.bounds.y)),
            float(rng.uniform(0, min(max_z, world.bounds.z))),
        )
        if not world.point_in_any_building(p):
            return p
    raise PlacementError(f"could not place user outside buildings in {max_attempts} attempts")


def segment_blocked(a: Sequence[float], b: Sequence[float], world: World) -> bool:
    """True iff the open segment (a, b) crosses the open interior of any building.

    Slab method per axis. For an axis where the segment is parallel to the
    slab, the segment can only enter the box interior if its coordinate lies
    strictly inside the slab. Strict interval comparison makes face/edge
    grazing count as unblocked.
    """
    lo, hi = world._box_lo, world._box_hi
    n = lo.shape[0]
    if n == 0:
        return False
    p = np.asarray(a, dtype=float)
    q = np.asarray(b, dtype=float)
    d = q - p

    t_enter = np.zeros(n)
    t_exit = np.ones(n)
    alive = np.ones(n, dtype=bool)
    for ax in range(3):
        if d[ax] == 0.0:
            alive &= (lo[:, ax] < p[ax]) & (p[ax] < hi[:, ax])
        else:
            t1 = (lo[:, ax] - p[ax]) / d[ax]
            t2 = (hi[:, ax] - p[ax]) / d[ax]
            t_lo = np.minimum(t1, t2)
            t_hi = np.maximum(t1, t2)
            t_enter = np.maximum(t_enter, t_lo)
            t_exit = np.minimum(t_exit, t_hi)
        if not alive.any():
            return False
    return bool(np.any(alive & (t_enter < t_exit)))


def segment_blocked_sampled(a: Sequence[float], b: Sequence[float], world: World,
                            n_samples: int = 10_000, tol: float = 1e-9) -> bool:
    """Brute-force occlusion oracle: dense point sampling along the segment.

    Samples n_samples interior points and tests each against every building
    box shrunk by ``tol`` (so boundary contact never counts). Independent of
    the slab test; used to cross-check it.
    """
    if world._box_lo.shape[0] == 0:
        return False
    p = np.asarray(a, dtype=float)
    q = np.asarray(b, dtype=float)
    ts = (np.arange(1, n_samples + 1) / (n_samples + 1))[:, None]
    pts = p[None, :] + ts * (q - p)[None, :]
    lo = world._box_lo[:, None, :] + tol
    hi = world._box_hi[:, None, :] - tol
    inside = np.all((lo < pts[None, :, :]) & (pts[None, :, :] < hi), axis=2)
    return bool(inside.any())
