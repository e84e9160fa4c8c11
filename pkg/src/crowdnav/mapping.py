"""Robot-centric occupancy maps and the on-disk training-record format.

The policy's image input is a 64x64 grid centered on the robot and
rotated so the robot-to-goal bearing points along +x (increasing
column). Pedestrians are discs, walls are axis-aligned world rectangles;
a cell is occupied iff its center falls inside one of them. The robot
itself is never rendered; the goal is encoded purely by the alignment.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from crowdnav.tracking import RobotPose, wrap_angle

GRID = 64
CENTER = 32  # robot sits at the center of cell (row 32, col 32)

DATASET_MAGIC = b"CRWDNAV1"
DATASET_VERSION = 1
_RECORD_BYTES = GRID * GRID + 12  # map bytes + three f32 scalars


class EmptyDatasetError(ValueError):
    """Operation needs at least one record."""


class DatasetFormatError(ValueError):
    """Base class for dataset parse failures."""


class DatasetMagicError(DatasetFormatError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


class DatasetTruncatedError(DatasetFormatError):
    pass


class DatasetCountError(DatasetFormatError):
    """Record count in the header disagrees with the file contents."""


@dataclass(frozen=True)
class Scene:
    """World snapshot: robot pose, goal point, pedestrian discs
    ((x, y), radius), and axis-aligned wall rectangles (x0, y0, x1, y1),
    all in floor cm."""

    robot: RobotPose
    goal: tuple[float, float]
    pedestrians: tuple = ()
    walls: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "pedestrians", tuple(self.pedestrians))
        object.__setattr__(self, "walls", tuple(self.walls))
        if self.goal[0] == self.robot.x and self.goal[1] == self.robot.y:
            raise ValueError("goal must differ from the robot position")
        for (_, r) in self.pedestrians:
            if r <= 0:
                raise ValueError("pedestrian radii must be positive")
        for (x0, y0, x1, y1) in self.walls:
            if x0 > x1 or y0 > y1:
                raise ValueError("wall rectangles must be (x0, y0, x1, y1) with x0<=x1, y0<=y1")


@dataclass
class OccupancyMap:
    """64x64 byte grid, row-major; 0 = free, 255 = occupied."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        if self.grid.shape != (GRID, GRID):
            raise ValueError(f"occupancy grid must be {GRID}x{GRID}")
        if not np.all((self.grid == 0) | (self.grid == 255)):
            raise ValueError("occupancy values must be 0 or 255")

    def __eq__(self, other):
        return isinstance(other, OccupancyMap) and np.array_equal(self.grid, other.grid)


@dataclass(frozen=True)
class MapParams:
    extent_cm: float = 640.0  # metric width of the full 64-cell side
    person_radius_cm: float = 25.0

    def __post_init__(self):
        if self.extent_cm <= 0 or self.person_radius_cm <= 0:
            raise ValueError("map extent and person radius must be positive")


@dataclass
class TrainingRecord:
    """One supervised example. Scalars are quantized to float32 at
    construction so disk round trips are bit-exact."""

    map: OccupancyMap
    theta_rel: float
    speed: float
    rotation: float

    def __post_init__(self):
        self.theta_rel = float(np.float32(self.theta_rel))
        self.speed = float(np.float32(self.speed))
        self.rotation = float(np.float32(self.rotation))

    def __eq__(self, other):
        return (
            isinstance(other, TrainingRecord)
            and self.map == other.map
            and self.theta_rel == other.theta_rel
            and self.speed == other.speed
            and self.rotation == other.rotation
        )


def render_occupancy(s: Scene, p: MapParams) -> tuple[OccupancyMap, float]:
    """Render the robot-centric, goal-aligned occupancy map.

    Cell (row i, col j) has its center at map-frame point
    ((j - 32) * cs, (32 - i) * cs) with cs = extent / 64; the robot sits
    at the center of cell (32, 32) and the goal bearing points along +x.
    Returns the map and theta_rel = robot heading - goal bearing, wrapped.
    """
    bearing = math.atan2(s.goal[1] - s.robot.y, s.goal[0] - s.robot.x)
    theta_rel = wrap_angle(s.robot.theta - bearing)
    cs = p.extent_cm / GRID
    cb, sb = math.cos(bearing), math.sin(bearing)

    jj, ii = np.meshgrid(np.arange(GRID, dtype=float), np.arange(GRID, dtype=float))
    mx = (jj - CENTER) * cs
    my = (CENTER - ii) * cs
    wx = s.robot.x + cb * mx - sb * my
    wy = s.robot.y + sb * mx + cb * my

    occ = np.zeros((GRID, GRID), dtype=bool)
    for (px, py), r in s.pedestrians:
        occ |= (wx - px) ** 2 + (wy - py) ** 2 <= r * r
    for (x0, y0, x1, y1) in s.walls:
        occ |= (wx >= x0) & (wx <= x1) & (wy >= y0) & (wy <= y1)
    return OccupancyMap(np.where(occ, 255, 0).astype(np.uint8)), theta_rel


def normalize_map(m: OccupancyMap) -> np.ndarray:
    """Bytes to floats in [0, 1] (divide by 255)."""
    return m.grid.astype(np.float64) / 255.0


def orientation_features(theta_rel: float) -> tuple[float, float]:
    """Heading encoded as (sin, cos) so the regressor sees a continuous angle."""
    return (math.sin(theta_rel), math.cos(theta_rel))


# --- dataset file format -------------------------------------------------------

def write_dataset(records: list[TrainingRecord], path) -> None:
    """Binary dataset: 8-byte magic, u32 version, u32 count, then per
    record 4096 map bytes + theta_rel/speed/rotation as little-endian f32."""
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(records)))
        for r in records:
            f.write(r.map.grid.tobytes())
            f.write(struct.pack("<fff", r.theta_rel, r.speed, r.rotation))


def read_dataset(path) -> list[TrainingRecord]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:8] != DATASET_MAGIC:
        raise DatasetMagicError("not a dataset file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"unsupported dataset version {version}")
    body = blob[16:]
    if len(body) < count * _RECORD_BYTES:
        raise DatasetTruncatedError(
            f"expected {count} records ({count * _RECORD_BYTES} bytes), "
            f"found {len(body)} bytes"
        )
    if len(body) > count * _RECORD_BYTES:
        raise DatasetCountError(
            f"{len(body) - count * _RECORD_BYTES} trailing bytes beyond the "
            f"declared {count} records"
        )
    records = []
    for i in range(count):
        off = i * _RECORD_BYTES
        grid = np.frombuffer(body, dtype=np.uint8, count=GRID * GRID, offset=off)
        theta, speed, rotation = struct.unpack_from("<fff", body, off + GRID * GRID)
        records.append(
            TrainingRecord(
                map=OccupancyMap(grid.reshape(GRID, GRID).copy()),
                theta_rel=theta,
                speed=speed,
                rotation=rotation,
            )
        )
    return records


def split_dataset(
    records: list[TrainingRecord], test_fraction: float, seed: int
) -> tuple[list[TrainingRecord], list[TrainingRecord]]:
    """Deterministic seeded shuffle-split; |test| = round(fraction * N)."""
    if not records:
        raise EmptyDatasetError("cannot split an empty dataset")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(records))
    n_test = int(round(test_fraction * len(records)))
    test = [records[i] for i in perm[:n_test]]
    train = [records[i] for i in perm[n_test:]]
    return train, test


def dataset_action_stats(records: list[TrainingRecord]) -> tuple[float, float]:
    """(mean |speed| cm/s, mean |rotation| degrees) over the records."""
    if not records:
        raise EmptyDatasetError("no records to summarize")
    speeds = np.array([r.speed for r in records])
    rots = np.array([r.rotation for r in records])
    return (float(np.mean(np.abs(speeds))), float(np.mean(np.abs(rots))))
