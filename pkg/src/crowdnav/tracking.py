"""Detection logs to floor-plane poses and per-step action labels.

A detection log is per-frame image positions for humans (neck keypoints)
and the robot's two top markers. This module rectifies those into metric
floor positions, combines marker pairs into robot poses, and differences
consecutive poses into the (speed, rotation) labels the regressor learns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from crowdnav import geometry
from crowdnav.geometry import DistortionCoeffs, Homography, Point

DETECTION_KINDS = ("human", "marker_a", "marker_b")

MAX_SPEED_CM_S = 200.0
MAX_ROTATION_DEG = 90.0


class DegenerateMarkersError(ValueError):
    """Marker detections too close together to define a pose."""


class LabelOutOfRangeError(ValueError):
    """A derived action label violates the sanity bounds."""

    def __init__(self, speed: float, rotation: float, frame: int | None = None):
        self.speed = speed
        self.rotation = rotation
        self.frame = frame
        where = f" at frame {frame}" if frame is not None else ""
        super().__init__(
            f"action label (speed={speed:.3f} cm/s, rotation={rotation:.3f} deg)"
            f"{where} exceeds sanity bounds "
            f"(|speed| <= {MAX_SPEED_CM_S}, |rotation| <= {MAX_ROTATION_DEG})"
        )


class DetectionParseError(ValueError):
    """Detection log is malformed."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if -math.pi < a <= math.pi:
        return a
    return math.atan2(math.sin(a), math.cos(a))


@dataclass(frozen=True)
class Detection:
    frame: int
    kind: str
    x: float
    y: float

    def __post_init__(self):
        if self.frame < 0:
            raise ValueError("frame index must be >= 0")
        if self.kind not in DETECTION_KINDS:
            raise ValueError(f"unknown detection kind {self.kind!r}")


@dataclass
class RobotPose:
    """Floor-plane position in cm and heading in radians, (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        self.theta = wrap_angle(self.theta)

    def heading(self) -> Point:
        return (math.cos(self.theta), math.sin(self.theta))


@dataclass(frozen=True)
class ActionLabel:
    """Supervision target: signed speed in cm/s and rotation in degrees
    per decision step (positive = counter-clockwise)."""

    speed: float
    rotation: float

    def __post_init__(self):
        if abs(self.speed) > MAX_SPEED_CM_S or abs(self.rotation) > MAX_ROTATION_DEG:
            raise LabelOutOfRangeError(self.speed, self.rotation)


@dataclass(frozen=True)
class FloorScale:
    """Metric calibration: pixel size on the floor, camera height, and the
    assumed constant heights of humans (neck) and the robot markers.
    optical_center is the camera's floor foot point in rectified pixels."""

    cm_per_px: float
    h_camera: float
    h_human: float
    h_robot: float
    optical_center: Point

    def __post_init__(self):
        if self.cm_per_px <= 0:
            raise ValueError("cm_per_px must be positive")
        if self.h_camera <= 0:
            raise ValueError("h_camera must be positive")
        if not 0 <= self.h_human < self.h_camera:
            raise ValueError("h_human must be in [0, h_camera)")
        if not 0 <= self.h_robot < self.h_camera:
            raise ValueError("h_robot must be in [0, h_camera)")


def robot_pose_from_markers(a: Point, b: Point) -> RobotPose:
    """Pose from the two top markers, both in floor cm.

    Position is the midpoint. The marker axis lies perpendicular to the
    direction of travel, with marker a on the left when facing forward,
    so heading is the a->b vector rotated +90 degrees.
    """
    dx, dy = b[0] - a[0], b[1] - a[1]
    if math.hypot(dx, dy) <= 1.0:
        raise DegenerateMarkersError("markers are closer than 1 cm apart")
    return RobotPose(
        x=(a[0] + b[0]) / 2.0,
        y=(a[1] + b[1]) / 2.0,
        theta=wrap_angle(math.atan2(dy, dx) + math.pi / 2.0),
    )


def floor_position(
    d: Detection,
    scale: FloorScale,
    h: Homography,
    c: DistortionCoeffs,
) -> Point:
    """Map a detection to its floor position in cm.

    The detection's coordinates are camera pixels relative to the image's
    optical center (the distortion model's origin). Pipeline: undistort,
    rectify through the homography, shift into the foot-point frame,
    collapse the target's height, scale to cm.
    """
    q = geometry.undistort((d.x, d.y), c)
    w = geometry.homography_apply(h, q)
    rel = (w[0] - scale.optical_center[0], w[1] - scale.optical_center[1])
    h_target = scale.h_human if d.kind == "human" else scale.h_robot
    hc = geometry.height_correct(rel, h_target, scale.h_camera)
    return (hc[0] * scale.cm_per_px, hc[1] * scale.cm_per_px)


def action_labels(poses: list[RobotPose], dt: float) -> list[ActionLabel]:
    """Difference consecutive poses into per-step actions.

    Speed is the displacement projected onto the earlier heading over dt;
    rotation is the wrapped heading change in degrees. One label per
    consecutive pair. Out-of-range labels abort with the offending index.
    """
    if len(poses) < 2:
        raise ValueError("need at least 2 poses")
    if dt <= 0:
        raise ValueError("dt must be positive")
    labels = []
    for i in range(len(poses) - 1):
        p0, p1 = poses[i], poses[i + 1]
        hx, hy = p0.heading()
        speed = ((p1.x - p0.x) * hx + (p1.y - p0.y) * hy) / dt
        rotation = math.degrees(wrap_angle(p1.theta - p0.theta))
        if abs(speed) > MAX_SPEED_CM_S or abs(rotation) > MAX_ROTATION_DEG:
            raise LabelOutOfRangeError(speed, rotation, frame=i)
        labels.append(ActionLabel(speed=speed, rotation=rotation))
    return labels


# --- detection log I/O -------------------------------------------------------

DETECTION_HEADER = "frame,kind,x,y"


def read_detection_log(path) -> list[Detection]:
    """Parse a detection log: a header line then `frame,kind,x,y` lines."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != DETECTION_HEADER:
        raise DetectionParseError(
            f"detection log must start with header {DETECTION_HEADER!r}"
        )
    detections = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 4:
            raise DetectionParseError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            x = float(parts[2])
            y = float(parts[3])
        except ValueError as e:
            raise DetectionParseError(f"line {lineno}: {e}") from None
        kind = parts[1]
        if kind not in DETECTION_KINDS:
            raise DetectionParseError(f"line {lineno}: unknown kind {kind!r}")
        detections.append(Detection(frame=frame, kind=kind, x=x, y=y))
    return detections


def write_detection_log(detections: Iterable[Detection], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(DETECTION_HEADER + "\n")
        for d in detections:
            f.write(f"{d.frame},{d.kind},{d.x!r},{d.y!r}\n")


def poses_from_detections(
    detections: list[Detection],
    scale: FloorScale,
    h: Homography,
    c: DistortionCoeffs,
) -> list[tuple[int, RobotPose]]:
    """Robot pose per frame, for frames where both markers were seen.

    Frames missing either marker are dropped (no interpolation); callers
    must treat non-consecutive frame indices as gaps.
    """
    markers: dict[int, dict[str, Point]] = {}
    for d in detections:
        if d.kind in ("marker_a", "marker_b"):
            markers.setdefault(d.frame, {})[d.kind] = floor_position(d, scale, h, c)
    out = []
    for frame in sorted(markers):
        m = markers[frame]
        if "marker_a" in m and "marker_b" in m:
            out.append((frame, robot_pose_from_markers(m["marker_a"], m["marker_b"])))
    return out


def humans_by_frame(
    detections: list[Detection],
    scale: FloorScale,
    h: Homography,
    c: DistortionCoeffs,
) -> dict[int, list[Point]]:
    """Floor positions of all human detections, grouped by frame."""
    out: dict[int, list[Point]] = {}
    for d in detections:
        if d.kind == "human":
            out.setdefault(d.frame, []).append(floor_position(d, scale, h, c))
    return out
