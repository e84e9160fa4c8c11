import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowdnav.geometry import ZERO_DISTORTION, Homography
from crowdnav.tracking import (
    ActionLabel,
    DegenerateMarkersError,
    Detection,
    DetectionParseError,
    FloorScale,
    LabelOutOfRangeError,
    RobotPose,
    action_labels,
    floor_position,
    humans_by_frame,
    poses_from_detections,
    read_detection_log,
    robot_pose_from_markers,
    wrap_angle,
    write_detection_log,
)

IDENTITY = Homography.identity()


def make_scale(cm_per_px=1.0, h_camera=600.0, h_human=150.0, h_robot=40.0, center=(0.0, 0.0)):
    return FloorScale(
        cm_per_px=cm_per_px,
        h_camera=h_camera,
        h_human=h_human,
        h_robot=h_robot,
        optical_center=center,
    )


# --- marker pose -------------------------------------------------------------

def test_markers_along_x_give_quarter_turn():
    pose = robot_pose_from_markers((4.0, 4.0), (6.0, 4.0))
    assert (pose.x, pose.y) == (5.0, 4.0)
    assert pose.theta == pytest.approx(math.pi / 2)


def test_markers_heading_is_ab_rotated_plus_90():
    # a -> b points along +y, so the heading convention puts the front at +y
    # rotated a further +90 degrees: facing -x.
    pose = robot_pose_from_markers((0.0, 0.0), (0.0, 10.0))
    assert (pose.x, pose.y) == (0.0, 5.0)
    assert pose.theta == pytest.approx(math.pi)


def test_coincident_markers_rejected():
    with pytest.raises(DegenerateMarkersError):
        robot_pose_from_markers((3.0, 3.0), (3.0, 3.0))


@given(
    ax=st.floats(-100, 100), ay=st.floats(-100, 100),
    tx=st.floats(-50, 50), ty=st.floats(-50, 50),
)
def test_marker_pose_translation_equivariance(ax, ay, tx, ty):
    b = (ax + 10.0, ay + 4.0)
    base = robot_pose_from_markers((ax, ay), b)
    moved = robot_pose_from_markers((ax + tx, ay + ty), (b[0] + tx, b[1] + ty))
    assert moved.x == pytest.approx(base.x + tx, abs=1e-9)
    assert moved.y == pytest.approx(base.y + ty, abs=1e-9)
    assert moved.theta == pytest.approx(base.theta, abs=1e-12)


@given(phi=st.floats(-3.0, 3.0))
def test_marker_pose_rotation_equivariance(phi):
    a, b = (20.0, -5.0), (26.0, 3.0)
    c, s = math.cos(phi), math.sin(phi)
    rot = lambda p: (c * p[0] - s * p[1], s * p[0] + c * p[1])
    base = robot_pose_from_markers(a, b)
    moved = robot_pose_from_markers(rot(a), rot(b))
    assert moved.x == pytest.approx(c * base.x - s * base.y, abs=1e-7)
    assert moved.y == pytest.approx(s * base.x + c * base.y, abs=1e-7)
    assert wrap_angle(moved.theta - base.theta - phi) == pytest.approx(0.0, abs=1e-9)


# --- floor position ----------------------------------------------------------

def test_floor_position_fixes_optical_center():
    d = Detection(frame=0, kind="human", x=0.0, y=0.0)
    assert floor_position(d, make_scale(), IDENTITY, ZERO_DISTORTION) == (0.0, 0.0)


def test_floor_position_human_height_factor():
    scale = make_scale(h_camera=500.0, h_human=150.0)  # factor 0.7
    d = Detection(frame=0, kind="human", x=100.0, y=0.0)
    out = floor_position(d, scale, IDENTITY, ZERO_DISTORTION)
    assert out == pytest.approx((70.0, 0.0))


def test_floor_position_marker_height_and_scale():
    scale = make_scale(cm_per_px=2.0, h_camera=500.0, h_robot=100.0)  # factor 0.8
    d = Detection(frame=0, kind="marker_a", x=50.0, y=50.0)
    out = floor_position(d, scale, IDENTITY, ZERO_DISTORTION)
    assert out == pytest.approx((80.0, 80.0))


def test_floor_position_identity_with_zero_height_is_scaling():
    scale = make_scale(cm_per_px=3.0, h_human=0.0)
    d = Detection(frame=0, kind="human", x=-7.0, y=11.0)
    out = floor_position(d, scale, IDENTITY, ZERO_DISTORTION)
    assert out == pytest.approx((-21.0, 33.0))


# --- action labels -----------------------------------------------------------

def test_labels_stationary():
    poses = [RobotPose(5.0, 5.0, 0.3)] * 4
    labels = action_labels(poses, dt=0.2)
    assert labels == [ActionLabel(0.0, 0.0)] * 3


def test_labels_straight_line_speed():
    poses = [RobotPose(10.0 * i, 0.0, 0.0) for i in range(5)]
    labels = action_labels(poses, dt=0.2)
    for lab in labels:
        assert lab.speed == pytest.approx(50.0)
        assert lab.rotation == pytest.approx(0.0)


def test_labels_uniform_rotation():
    steps = 6
    poses = [RobotPose(0.0, 0.0, (math.pi / 2) * i / steps) for i in range(steps + 1)]
    labels = action_labels(poses, dt=0.2)
    assert len(labels) == steps
    for lab in labels:
        assert lab.rotation == pytest.approx(15.0)


def test_labels_reversed_straight_line_negates_speed():
    poses = [RobotPose(10.0 * i, 0.0, 0.0) for i in range(5)]
    fwd = action_labels(poses, dt=0.2)
    rev = action_labels(poses[::-1], dt=0.2)
    for f, r in zip(fwd, rev[::-1]):
        assert r.speed == pytest.approx(-f.speed)


def test_labels_out_of_range_identifies_frame():
    poses = [RobotPose(0.0, 0.0, 0.0), RobotPose(0.0, 0.0, 0.0), RobotPose(100.0, 0.0, 0.0)]
    with pytest.raises(LabelOutOfRangeError) as exc:
        action_labels(poses, dt=0.2)  # 500 cm/s on the second pair
    assert exc.value.frame == 1


def test_label_type_rejects_out_of_bounds():
    with pytest.raises(LabelOutOfRangeError):
        ActionLabel(speed=250.0, rotation=0.0)


# --- detection log I/O --------------------------------------------------------

def test_detection_log_round_trip(tmp_path):
    dets = [
        Detection(0, "marker_a", 10.5, 20.25),
        Detection(0, "marker_b", 15.5, 20.25),
        Detection(0, "human", -3.0, 40.0),
        Detection(1, "marker_a", 11.5, 20.25),
    ]
    p = tmp_path / "log.csv"
    write_detection_log(dets, p)
    assert read_detection_log(p) == dets


def test_detection_log_requires_header(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("0,human,1,2\n")
    with pytest.raises(DetectionParseError):
        read_detection_log(p)


def test_detection_log_rejects_bad_kind(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("frame,kind,x,y\n0,cat,1,2\n")
    with pytest.raises(DetectionParseError):
        read_detection_log(p)


def test_poses_skip_frames_missing_a_marker():
    scale = make_scale(h_robot=0.0)
    dets = [
        Detection(0, "marker_a", 0.0, 0.0),
        Detection(0, "marker_b", 10.0, 0.0),
        Detection(1, "marker_a", 1.0, 0.0),  # marker_b missing: dropped
        Detection(2, "marker_a", 2.0, 0.0),
        Detection(2, "marker_b", 12.0, 0.0),
    ]
    poses = poses_from_detections(dets, scale, IDENTITY, ZERO_DISTORTION)
    assert [f for f, _ in poses] == [0, 2]
    assert poses[0][1].x == pytest.approx(5.0)


def test_humans_grouped_by_frame():
    scale = make_scale(h_human=0.0)
    dets = [
        Detection(0, "human", 1.0, 2.0),
        Detection(0, "human", 3.0, 4.0),
        Detection(2, "human", 5.0, 6.0),
    ]
    groups = humans_by_frame(dets, scale, IDENTITY, ZERO_DISTORTION)
    assert sorted(groups) == [0, 2]
    assert len(groups[0]) == 2
