"""2D hallway crowd simulator.

A unicycle robot crosses a hallway from point A to point B while
pedestrians stream through under a minimal social-force-style model
(goal attraction plus exponential repulsion from neighbors and the
robot). Three scenario classes cover an empty hallway, a few
pedestrians, and a crowd containing groups. A scripted pilot stands in
for the human tele-operators when bootstrapping datasets, and
run_episode closes the loop for policy evaluation.

step() is a pure state transition; every function here is deterministic
given its inputs, so episodes replay bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, Union

import numpy as np

from crowdnav import mapping, neuralnet
from crowdnav.mapping import MapParams, Scene, TrainingRecord
from crowdnav.tracking import RobotPose, wrap_angle

ROBOT_RADIUS = 25.0  # cm
SUCCESS_RADIUS = 30.0  # cm from the active goal

PED_PREF_SPEED = 130.0  # cm/s
PED_MAX_SPEED = 160.0  # cm/s
PED_TAU = 0.5  # s, relaxation toward the preferred velocity
REPULSION_A = 200.0  # cm/s^2
REPULSION_B = 30.0  # cm, decay length
PED_GOAL_RADIUS = 30.0  # cm; arrived pedestrians brake and park

CRUISE_SPEED = 60.0  # cm/s, pilot cruise
SLOW_RANGE = 150.0  # cm, pilot starts slowing inside this range
FRONT_CONE_DEG = 120.0  # total cone width the pilot watches

SPEED_CLAMP = (-50.0, 100.0)
ROTATION_CLAMP = (-30.0, 30.0)

DEFAULT_ARENA = (800.0, 500.0)
WALL_THICKNESS = 20.0
GOAL_MARGIN = 60.0

SCENARIO_CLASSES = ("clear", "sparse", "crowded")


class PlacementError(RuntimeError):
    """Could not place all agents collision-free in the arena."""


def _f32(v: float) -> float:
    return float(np.float32(v))


@dataclass(frozen=True)
class RobotCommand:
    """One decision step: speed in cm/s, rotation in degrees per step.

    Values are clamped into the actuator range and quantized to float32
    so a recorded label equals the command that was actually applied.
    """

    speed: float = 0.0
    rotation: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "speed", _f32(min(max(self.speed, SPEED_CLAMP[0]), SPEED_CLAMP[1]))
        )
        object.__setattr__(
            self,
            "rotation",
            _f32(min(max(self.rotation, ROTATION_CLAMP[0]), ROTATION_CLAMP[1])),
        )


@dataclass(frozen=True)
class Pedestrian:
    position: tuple[float, float]
    velocity: tuple[float, float]
    goal: tuple[float, float]
    radius: float = 25.0


@dataclass(frozen=True)
class SimState:
    time: float
    robot: RobotPose
    robot_speed: float
    pedestrians: tuple
    walls: tuple
    goal_a: tuple[float, float]
    goal_b: tuple[float, float]
    active_goal: str  # "a" or "b"
    arena: tuple[float, float] = DEFAULT_ARENA

    def goal_point(self) -> tuple[float, float]:
        return self.goal_a if self.active_goal == "a" else self.goal_b


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    pedestrian_count: int = 0
    group_count: int = 0
    seed: int = 0
    arena: tuple[float, float] = DEFAULT_ARENA

    def __post_init__(self):
        if self.kind not in SCENARIO_CLASSES:
            raise ValueError(f"unknown scenario class {self.kind!r}")
        if self.kind == "clear" and self.pedestrian_count != 0:
            raise ValueError("clear scenarios have no pedestrians")
        if self.kind == "sparse" and not 1 <= self.pedestrian_count <= 4:
            raise ValueError("sparse scenarios have 1-4 pedestrians")
        if self.kind == "crowded" and (self.pedestrian_count < 5 or self.group_count < 1):
            raise ValueError("crowded scenarios need >= 5 pedestrians and >= 1 group")


def default_spec(kind: str, seed: int, arena=DEFAULT_ARENA) -> ScenarioSpec:
    """Canonical per-class population used by the CLI and the server."""
    counts = {"clear": (0, 0), "sparse": (3, 0), "crowded": (8, 2)}
    if kind not in counts:
        raise ValueError(f"unknown scenario class {kind!r}")
    n, g = counts[kind]
    return ScenarioSpec(kind=kind, pedestrian_count=n, group_count=g, seed=seed, arena=arena)


@dataclass
class EpisodeResult:
    success: bool
    steps_taken: int
    collisions: int
    min_clearance: float
    trajectory: list  # RobotPose per step, including the initial pose
    commands: list  # RobotCommand applied at each step (drives the export)


def hallway_walls(arena=DEFAULT_ARENA) -> tuple:
    w, h = arena
    return (
        (0.0, 0.0, w, WALL_THICKNESS),
        (0.0, h - WALL_THICKNESS, w, h),
    )


def _inside_wall(p, walls) -> bool:
    return any(x0 <= p[0] <= x1 and y0 <= p[1] <= y1 for (x0, y0, x1, y1) in walls)


def spawn_scenario(spec: ScenarioSpec) -> SimState:
    """Deterministic scenario setup.

    The robot starts at point A with a heading drawn within +-60 degrees
    of the goal bearing (so demonstrations cover the realignment the
    policy must learn). Pedestrians spawn collision-free in the corridor
    with goals at the far end of the hallway; crowded-group members share
    a goal and spawn within 100 cm of each other.
    """
    rng = np.random.default_rng(spec.seed)
    w, h = spec.arena
    walls = hallway_walls(spec.arena)
    goal_a = (GOAL_MARGIN, h / 2.0)
    goal_b = (w - GOAL_MARGIN, h / 2.0)
    heading = rng.uniform(-math.pi / 3, math.pi / 3)  # bearing to B is 0
    robot = RobotPose(x=goal_a[0], y=goal_a[1], theta=heading)

    y_lo = WALL_THICKNESS + 30.0
    y_hi = h - WALL_THICKNESS - 30.0

    # group sizes: 2-3 members each, remainder walk alone
    group_sizes = []
    remaining = spec.pedestrian_count
    for _ in range(spec.group_count):
        size = int(rng.integers(2, 4))
        size = min(size, remaining - (spec.group_count - len(group_sizes) - 1) * 2)
        size = max(size, 2)
        group_sizes.append(size)
        remaining -= size
    if remaining < 0:
        raise PlacementError("pedestrian_count too small for the requested groups")

    placed: list[Pedestrian] = []

    def try_place(group, goal) -> Pedestrian:
        # group members must stay pairwise within 100 cm while keeping the
        # usual collision-free separation from everyone
        for _ in range(1000):
            if not group:
                cand = (rng.uniform(150.0, w - 150.0), rng.uniform(y_lo, y_hi))
            else:
                cx, cy = group[0].position
                cand = (cx + rng.uniform(-100.0, 100.0), cy + rng.uniform(-100.0, 100.0))
                if any(math.dist(cand, g.position) > 100.0 for g in group):
                    continue
            if not (0 <= cand[0] <= w and y_lo <= cand[1] <= y_hi):
                continue
            if _inside_wall(cand, walls):
                continue
            if math.dist(cand, (robot.x, robot.y)) < 100.0:
                continue
            if all(
                math.dist(cand, q.position) >= 25.0 + q.radius for q in placed
            ):
                if goal is None:
                    gx = w - GOAL_MARGIN if cand[0] < w / 2.0 else GOAL_MARGIN
                    goal = (gx, rng.uniform(y_lo, y_hi))
                return Pedestrian(position=cand, velocity=(0.0, 0.0), goal=goal, radius=25.0)
        raise PlacementError(
            f"could not place a pedestrian after 1000 attempts in arena {spec.arena}"
        )

    for size in group_sizes:
        group: list[Pedestrian] = []
        anchor = try_place(group, None)
        group.append(anchor)
        placed.append(anchor)
        for _ in range(size - 1):
            member = try_place(group, anchor.goal)
            group.append(member)
            placed.append(member)
    for _ in range(remaining):
        placed.append(try_place([], None))

    return SimState(
        time=0.0,
        robot=robot,
        robot_speed=0.0,
        pedestrians=tuple(placed),
        walls=walls,
        goal_a=goal_a,
        goal_b=goal_b,
        active_goal="b",
        arena=spec.arena,
    )


def _resolve_move(pos, new_pos, walls, arena) -> tuple[float, float]:
    """Slide-along-wall: keep the axis components that stay legal."""
    w, h = arena
    clamp = lambda p: (min(max(p[0], 0.0), w), min(max(p[1], 0.0), h))
    cand = clamp(new_pos)
    if not _inside_wall(cand, walls):
        return cand
    slide_x = clamp((new_pos[0], pos[1]))
    if not _inside_wall(slide_x, walls):
        return slide_x
    slide_y = clamp((pos[0], new_pos[1]))
    if not _inside_wall(slide_y, walls):
        return slide_y
    return pos


def step(s: SimState, cmd: RobotCommand, dt: float) -> SimState:
    """Advance one decision step; pure (returns a new state).

    The robot turns by cmd.rotation (degrees per step), then moves
    cmd.speed * dt along the new heading, sliding along walls. Each
    pedestrian relaxes toward its preferred velocity at its goal
    direction (stops inside the goal radius) plus exponential repulsion
    from neighbors and the robot, capped at PED_MAX_SPEED.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    theta = wrap_angle(s.robot.theta + math.radians(cmd.rotation))
    move = (cmd.speed * dt * math.cos(theta), cmd.speed * dt * math.sin(theta))
    rp = (s.robot.x, s.robot.y)
    rx, ry = _resolve_move(rp, (rp[0] + move[0], rp[1] + move[1]), s.walls, s.arena)
    robot = RobotPose(x=rx, y=ry, theta=theta)

    peds = []
    for i, p in enumerate(s.pedestrians):
        px, py = p.position
        to_goal = (p.goal[0] - px, p.goal[1] - py)
        dist_goal = math.hypot(*to_goal)
        if dist_goal > PED_GOAL_RADIUS:
            desired = (
                PED_PREF_SPEED * to_goal[0] / dist_goal,
                PED_PREF_SPEED * to_goal[1] / dist_goal,
            )
        else:
            desired = (0.0, 0.0)
        ax = (desired[0] - p.velocity[0]) / PED_TAU
        ay = (desired[1] - p.velocity[1]) / PED_TAU
        for j, q in enumerate(s.pedestrians):
            if i == j:
                continue
            dx, dy = px - q.position[0], py - q.position[1]
            d = math.hypot(dx, dy)
            if d > 1e-9:
                f = REPULSION_A * math.exp(-d / REPULSION_B)
                ax += f * dx / d
                ay += f * dy / d
        dx, dy = px - s.robot.x, py - s.robot.y
        d = math.hypot(dx, dy)
        if d > 1e-9:
            f = REPULSION_A * math.exp(-d / REPULSION_B)
            ax += f * dx / d
            ay += f * dy / d
        vx = p.velocity[0] + ax * dt
        vy = p.velocity[1] + ay * dt
        speed = math.hypot(vx, vy)
        if speed > PED_MAX_SPEED:
            vx *= PED_MAX_SPEED / speed
            vy *= PED_MAX_SPEED / speed
        new_pos = _resolve_move(
            p.position, (px + vx * dt, py + vy * dt), s.walls, s.arena
        )
        peds.append(replace(p, position=new_pos, velocity=(vx, vy)))

    return replace(
        s,
        time=s.time + dt,
        robot=robot,
        robot_speed=cmd.speed,
        pedestrians=tuple(peds),
    )


def scripted_pilot(s: SimState) -> RobotCommand:
    """Deterministic stand-in for a human tele-operator.

    Steers toward the active goal; when the nearest pedestrian inside a
    120-degree front cone is closer than SLOW_RANGE, speed drops
    proportionally with the remaining clearance and steering biases away
    from that pedestrian, saturating at the rotation clamp.
    """
    goal = s.goal_point()
    bearing = math.atan2(goal[1] - s.robot.y, goal[0] - s.robot.x)
    angle_err = wrap_angle(bearing - s.robot.theta)
    rotation = math.degrees(angle_err)

    half_cone = math.radians(FRONT_CONE_DEG / 2.0)
    nearest = None
    nearest_d = SLOW_RANGE
    nearest_bearing = 0.0
    for p in s.pedestrians:
        dx, dy = p.position[0] - s.robot.x, p.position[1] - s.robot.y
        d = math.hypot(dx, dy)
        rel = wrap_angle(math.atan2(dy, dx) - s.robot.theta)
        if d < nearest_d and abs(rel) <= half_cone:
            nearest, nearest_d, nearest_bearing = p, d, rel

    speed = CRUISE_SPEED
    if nearest is not None:
        contact = ROBOT_RADIUS + nearest.radius
        span = SLOW_RANGE - contact
        speed = CRUISE_SPEED * min(max((nearest_d - contact) / span, 0.0), 1.0)
        away = 1.0 if nearest_bearing < 0 else -1.0  # steer to the free side
        rotation += away * ROTATION_CLAMP[1] * (1.0 - nearest_d / SLOW_RANGE)
    return RobotCommand(speed=speed, rotation=rotation)


PolicyOrStream = Union[Callable[[SimState], RobotCommand], Iterable[RobotCommand]]


def _command_source(source: PolicyOrStream) -> Callable[[SimState], RobotCommand | None]:
    if callable(source):
        return source
    it: Iterator[RobotCommand] = iter(source)

    def next_cmd(_s: SimState) -> RobotCommand | None:
        return next(it, None)

    return next_cmd


def run_episode(
    policy: Callable[[SimState], RobotCommand],
    spec: ScenarioSpec,
    max_steps: int,
    dt: float = 0.2,
) -> EpisodeResult:
    """Close the loop until the robot is within SUCCESS_RADIUS of the goal
    or the step budget runs out.

    Collisions are robot-pedestrian disc-overlap onsets (a sustained
    overlap counts once); min_clearance is the smallest surface gap seen
    (inf when there are no pedestrians).
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    state = spawn_scenario(spec)
    trajectory = [state.robot]
    commands: list[RobotCommand] = []
    overlapping = [False] * len(state.pedestrians)
    collisions = 0
    min_clearance = math.inf
    success = False
    steps = 0
    for _ in range(max_steps):
        cmd = policy(state)
        state = step(state, cmd, dt)
        commands.append(cmd)
        trajectory.append(state.robot)
        steps += 1
        for i, p in enumerate(state.pedestrians):
            gap = (
                math.dist((state.robot.x, state.robot.y), p.position)
                - ROBOT_RADIUS
                - p.radius
            )
            min_clearance = min(min_clearance, gap)
            if gap < 0.0:
                if not overlapping[i]:
                    collisions += 1
                overlapping[i] = True
            else:
                overlapping[i] = False
        gx, gy = state.goal_point()
        if math.dist((state.robot.x, state.robot.y), (gx, gy)) <= SUCCESS_RADIUS:
            success = True
            break
    return EpisodeResult(
        success=success,
        steps_taken=steps,
        collisions=collisions,
        min_clearance=min_clearance,
        trajectory=trajectory,
        commands=commands,
    )


def scene_of(s: SimState) -> Scene:
    """Project the simulator state into the occupancy-map Scene."""
    return Scene(
        robot=s.robot,
        goal=s.goal_point(),
        pedestrians=tuple((p.position, p.radius) for p in s.pedestrians),
        walls=s.walls,
    )


def record_episode(
    source: PolicyOrStream,
    spec: ScenarioSpec,
    map_params: MapParams,
    dt: float = 0.2,
    max_steps: int = 400,
) -> list[TrainingRecord]:
    """Run an episode and emit one TrainingRecord per step: the occupancy
    map and orientation seen before acting, labelled with the command
    actually applied (scripted pilot or a tele-op command stream)."""
    next_cmd = _command_source(source)
    state = spawn_scenario(spec)
    records: list[TrainingRecord] = []
    for _ in range(max_steps):
        cmd = next_cmd(state)
        if cmd is None:
            break
        m, theta_rel = mapping.render_occupancy(scene_of(state), map_params)
        records.append(
            TrainingRecord(map=m, theta_rel=theta_rel, speed=cmd.speed, rotation=cmd.rotation)
        )
        state = step(state, cmd, dt)
        gx, gy = state.goal_point()
        if math.dist((state.robot.x, state.robot.y), (gx, gy)) <= SUCCESS_RADIUS:
            break
    return records


def network_policy(
    params: neuralnet.NetworkParams, map_params: MapParams
) -> Callable[[SimState], RobotCommand]:
    """Wrap trained parameters as a closed-loop policy."""

    def policy(s: SimState) -> RobotCommand:
        m, theta_rel = mapping.render_occupancy(scene_of(s), map_params)
        pred = neuralnet.forward(
            params, mapping.normalize_map(m), mapping.orientation_features(theta_rel)
        )
        return RobotCommand(speed=pred.speed, rotation=pred.rotation)

    return policy


def export_trajectory(result: EpisodeResult, path) -> None:
    """Write `step,x,y,theta,speed,rotation` rows: the pose at which each
    command was issued."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,x,y,theta,speed,rotation\n")
        for i, cmd in enumerate(result.commands):
            pose = result.trajectory[i]
            f.write(
                f"{i},{pose.x!r},{pose.y!r},{pose.theta!r},{cmd.speed!r},{cmd.rotation!r}\n"
            )
