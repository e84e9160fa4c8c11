"""WebSocket bridge for tele-operating the simulator.

One session per server. The loop ticks at the display rate (10 Hz);
every second tick is a decision tick: the pending client command (or the
network in policy mode) is applied, the simulator advances by one
decision step, and a TrainingRecord is appended while recording. Every
tick broadcasts a state frame, so clients render at the display rate
while data collection stays at the 5 Hz decision cadence.

Wire protocol (one JSON object per text frame, units cm / radians /
cm/s / degrees-per-step):
  server -> client:
    {"type":"state","tick":n,"robot":{...},"pedestrians":[...],
     "goal":{...},"walls":[...],"mode":...,"recording":...}
    {"type":"ack","what":"record_stop","records":n}
    {"type":"error","detail":str}
  client -> server:
    {"type":"command","speed":f,"rotation":f}
    {"type":"record","action":"start"|"stop"}
    {"type":"mode","value":"teleop"|"policy"}
    {"type":"reset","scenario":"clear"|"sparse"|"crowded","seed":n}
"""

from __future__ import annotations

import asyncio
import json
import math
import os
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from crowdnav import mapping, neuralnet, simworld
from crowdnav.mapping import MapParams, TrainingRecord
from crowdnav.simworld import RobotCommand, ScenarioSpec

DISPLAY_TICK_RATE = 10.0  # Hz; decisions run at half this rate
TICKS_PER_DECISION = 2


class TeleopSession:
    """Session state machine, free of any transport concerns.

    handle_message() applies one client message and returns the replies;
    advance() performs one display tick and returns the state broadcast.
    """

    def __init__(
        self,
        scenario: ScenarioSpec,
        map_params: MapParams | None = None,
        params: neuralnet.NetworkParams | None = None,
        out_dir=".",
        tick_rate: float = DISPLAY_TICK_RATE,
    ):
        self.scenario = scenario
        self.map_params = map_params or MapParams()
        self.params = params
        self.out_dir = Path(out_dir)
        self.tick_rate = tick_rate
        self.dt = TICKS_PER_DECISION / tick_rate

        self.mode = "teleop"
        self.recording = False
        self.sim = simworld.spawn_scenario(scenario)
        self.pending_cmd = RobotCommand()
        self.tick = 0
        self.records: list[TrainingRecord] = []
        self._policy = (
            simworld.network_policy(params, self.map_params) if params is not None else None
        )
        self._flush_count = 0

    # -- messages ---------------------------------------------------------

    def handle_message(self, msg) -> list[dict]:
        if not isinstance(msg, dict) or "type" not in msg:
            return [_error("message must be an object with a 'type' field")]
        kind = msg["type"]
        if kind == "command":
            return self._on_command(msg)
        if kind == "record":
            return self._on_record(msg)
        if kind == "mode":
            return self._on_mode(msg)
        if kind == "reset":
            return self._on_reset(msg)
        return [_error(f"unknown message type {kind!r}")]

    def _on_command(self, msg) -> list[dict]:
        try:
            speed = float(msg["speed"])
            rotation = float(msg["rotation"])
            if not (math.isfinite(speed) and math.isfinite(rotation)):
                raise ValueError("non-finite command")
        except (KeyError, TypeError, ValueError):
            return [_error("command needs numeric 'speed' and 'rotation'")]
        self.pending_cmd = RobotCommand(speed=speed, rotation=rotation)
        return []

    def _on_record(self, msg) -> list[dict]:
        action = msg.get("action")
        if action == "start":
            if self.recording:
                return [_error("already recording")]
            self.recording = True
            self.records = []
            return []
        if action == "stop":
            if not self.recording:
                return [_error("not recording")]
            return [self._stop_and_flush()]
        return [_error("record action must be 'start' or 'stop'")]

    def _on_mode(self, msg) -> list[dict]:
        value = msg.get("value")
        if value not in ("teleop", "policy"):
            return [_error("mode value must be 'teleop' or 'policy'")]
        if value == "policy" and self._policy is None:
            return [_error("mode-unavailable: no network parameters loaded")]
        self.mode = value
        return []

    def _on_reset(self, msg) -> list[dict]:
        scenario = msg.get("scenario")
        seed = msg.get("seed", 0)
        if scenario not in simworld.SCENARIO_CLASSES or not isinstance(seed, int):
            return [_error("reset needs a scenario class and an integer seed")]
        replies = []
        if self.recording:
            replies.append(self._stop_and_flush())  # never lose collected data
        spec = simworld.default_spec(scenario, seed, self.scenario.arena)
        self.scenario = spec
        self.sim = simworld.spawn_scenario(spec)
        self.pending_cmd = RobotCommand()
        return replies

    def _stop_and_flush(self) -> dict:
        self.recording = False
        path = self.out_dir / f"teleop-{self._flush_count:03d}.bin"
        mapping.write_dataset(self.records, path)
        self._flush_count += 1
        count = len(self.records)
        self.records = []
        return {"type": "ack", "what": "record_stop", "records": count}

    def on_disconnect(self) -> None:
        """Last client gone: stop and flush any live recording."""
        if self.recording:
            self._stop_and_flush()

    # -- ticking ----------------------------------------------------------

    def advance(self) -> dict:
        """One display tick; simulates on every TICKS_PER_DECISION-th."""
        self.tick += 1
        if self.tick % TICKS_PER_DECISION == 1 or TICKS_PER_DECISION == 1:
            cmd = (
                self._policy(self.sim)
                if self.mode == "policy" and self._policy is not None
                else self.pending_cmd
            )
            if self.recording:
                m, theta_rel = mapping.render_occupancy(
                    simworld.scene_of(self.sim), self.map_params
                )
                self.records.append(
                    TrainingRecord(
                        map=m, theta_rel=theta_rel, speed=cmd.speed, rotation=cmd.rotation
                    )
                )
            self.sim = simworld.step(self.sim, cmd, self.dt)
        return self.state_message()

    def state_message(self) -> dict:
        s = self.sim
        return {
            "type": "state",
            "tick": self.tick,
            "robot": {"x": s.robot.x, "y": s.robot.y, "theta": s.robot.theta},
            "pedestrians": [
                {"x": p.position[0], "y": p.position[1], "r": p.radius}
                for p in s.pedestrians
            ],
            "goal": {"x": s.goal_point()[0], "y": s.goal_point()[1]},
            "walls": [list(wall) for wall in s.walls],
            "mode": self.mode,
            "recording": self.recording,
        }


def _error(detail: str) -> dict:
    return {"type": "error", "detail": detail}


def create_app(session: TeleopSession) -> FastAPI:
    """HTTP shell: a /ws endpoint plus the broadcast tick task.

    All session mutation happens on the event loop; each connection gets
    its own outbound queue so broadcasts and replies never interleave
    within a frame.
    """
    queues: set[asyncio.Queue] = set()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        task = asyncio.create_task(_tick_loop())
        print(f"teleop session ready (tick rate {session.tick_rate} Hz)", flush=True)
        try:
            yield
        finally:
            task.cancel()

    async def _tick_loop():
        period = 1.0 / session.tick_rate
        while True:
            await asyncio.sleep(period)
            msg = session.advance()
            for q in list(queues):
                q.put_nowait(msg)

    app = FastAPI(lifespan=lifespan)

    @app.websocket("/ws")
    async def ws_endpoint(websocket: WebSocket):
        await websocket.accept()
        q: asyncio.Queue = asyncio.Queue()
        queues.add(q)

        async def sender():
            while True:
                await websocket.send_text(json.dumps(await q.get()))

        send_task = asyncio.create_task(sender())
        try:
            while True:
                text = await websocket.receive_text()
                try:
                    msg = json.loads(text)
                except json.JSONDecodeError:
                    replies = [_error("frame is not valid JSON")]
                else:
                    replies = session.handle_message(msg)
                for r in replies:
                    q.put_nowait(r)
        except WebSocketDisconnect:
            pass
        finally:
            queues.discard(q)
            send_task.cancel()
            if not queues:
                session.on_disconnect()

    return app


def run_session(
    scenario: ScenarioSpec,
    map_params: MapParams | None = None,
    params: neuralnet.NetworkParams | None = None,
    out_dir=".",
    host: str = "127.0.0.1",
    port: int = 8765,
    tick_rate: float = DISPLAY_TICK_RATE,
) -> None:
    """Blocking server loop; returns on interrupt."""
    import socket

    import uvicorn

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError as e:
        probe.close()
        raise OSError(f"cannot bind {host}:{port}: {e}") from None
    probe.close()

    session = TeleopSession(
        scenario, map_params=map_params, params=params, out_dir=out_dir, tick_rate=tick_rate
    )
    app = create_app(session)
    uvicorn.run(app, host=host, port=port, log_level="warning")
