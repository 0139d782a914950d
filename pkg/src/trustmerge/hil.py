"""Human-in-the-loop bridge: a WebSocket session around the simulation loop.

One cockpit client drives the designated human vehicle with throttle/brake
messages while the unchanged decision pipeline runs; the bridge paces the
loop to the wall clock, streams vehicle state every tick and trust every
decision interval, and finishes with a summary. A scripted control tape over
the same protocol makes sessions fully reproducible for tests.
"""

from __future__ import annotations

import asyncio
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any, Optional

import websockets

from .config import ScenarioConfig
from .logs import EpisodeLog
from .metrics import episode_metrics
from .sim import Simulation
from .world import MergePhase

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024
SLOW_DRIFT_S = 0.25

# Required fields per message variant; unknown extra fields are ignored.
MESSAGE_FIELDS = {
    "hello": ("schema_version", "scenario"),
    "state": ("tick", "time_s", "vehicles"),
    "trust": ("tick", "vehicle_id", "p", "p_forward", "p_backward", "noise_w"),
    "control": ("throttle", "brake"),
    "event": ("kind", "tick"),
    "end": ("summary",),
    "error": ("message",),
}


class CodecError(ValueError):
    pass


def encode_msg(msg: dict) -> bytes:
    """Serialize a session message; oversized frames are refused."""
    kind = msg.get("type")
    if kind not in MESSAGE_FIELDS:
        raise CodecError(f"unknown message type {kind!r}")
    missing = [f for f in MESSAGE_FIELDS[kind] if f not in msg]
    if missing:
        raise CodecError(f"{kind} message missing fields {missing}")
    data = json.dumps(msg, sort_keys=True, allow_nan=False).encode()
    if len(data) > MAX_FRAME_BYTES:
        raise CodecError(f"frame of {len(data)} bytes exceeds {MAX_FRAME_BYTES}")
    return data


def decode_msg(data: bytes | str) -> dict:
    """Parse a frame into a message; malformed frames raise, the session
    decides whether to keep going."""
    if isinstance(data, str):
        data = data.encode()
    if len(data) > MAX_FRAME_BYTES:
        raise CodecError(f"frame of {len(data)} bytes exceeds {MAX_FRAME_BYTES}")
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise CodecError(f"malformed frame: {exc}") from exc
    if not isinstance(raw, dict):
        raise CodecError("frame must encode an object")
    kind = raw.get("type")
    if kind not in MESSAGE_FIELDS:
        raise CodecError(f"unknown message type {kind!r}")
    missing = [f for f in MESSAGE_FIELDS[kind] if f not in raw]
    if missing:
        raise CodecError(f"{kind} message missing fields {missing}")
    return raw


def state_message(sim: Simulation) -> dict:
    vehicles = []
    for vid, rt in sim.vehicles.items():
        st = rt.state
        vehicles.append({"id": vid, "kind": rt.spec.kind.value, "s": st.s,
                         "d": st.d, "v": st.v, "a": st.a, "lane": st.lane,
                         "merge_phase": st.merge_phase.value})
    return {"type": "state", "tick": sim.tick_index,
            "time_s": round(sim.time, 6), "vehicles": vehicles}


def hello_message(config: ScenarioConfig) -> dict:
    return {
        "type": "hello",
        "schema_version": PROTOCOL_VERSION,
        "scenario": {
            "dt": config.dt,
            "decision_interval": config.decision_interval,
            "merge_zone": list(config.layout.merge_zone),
            "lane_width": config.layout.lane_width,
            "human_vehicle": config.hil.human_vehicle,
            "sv": config.sv_id,
            "vehicles": [{"id": v.vid, "kind": v.kind.value, "lane": v.lane}
                         for v in config.vehicles],
        },
    }


@dataclass
class PacingClock:
    """Keeps simulated time tied to the wall clock (scaled by `pace`)."""

    dt: float
    pace: float = 1.0
    max_drift: float = 0.05
    _anchor: float = field(default_factory=time.monotonic)
    _ticks: int = 0
    drift_events: int = 0

    async def wait_for_tick(self) -> None:
        self._ticks += 1
        if self.pace <= 0:
            return
        target = self._anchor + self._ticks * self.dt * self.pace
        now = time.monotonic()
        if now < target:
            await asyncio.sleep(target - now)
        elif now - target > SLOW_DRIFT_S:
            self.drift_events += 1
            # Never skip ticks: re-anchor and carry on.
            self._anchor = now - self._ticks * self.dt * self.pace


@dataclass
class SessionResult:
    log: Optional[EpisodeLog]
    aborted: bool = False
    drift_events: int = 0
    error: Optional[str] = None


class BridgeSession:
    """One episode driven over a single cockpit connection."""

    def __init__(self, config: ScenarioConfig):
        if config.hil.human_vehicle is None:
            raise ValueError("HIL session needs hil.human_vehicle set")
        self.config = config
        external = {v.vid for v in config.vehicles if v.vid == config.hil.human_vehicle}
        specs = []
        for v in config.vehicles:
            if v.vid in external and v.controller != "external":
                from dataclasses import replace as dc_replace
                specs.append(dc_replace(v, controller="external"))
            else:
                specs.append(v)
        from dataclasses import replace as dc_replace
        self.run_config = dc_replace(config, vehicles=tuple(specs))
        self.sim = Simulation(self.run_config)
        self.clock = PacingClock(dt=config.dt, pace=config.hil.pace,
                                 max_drift=config.hil.max_drift)
        self._control_queue: asyncio.Queue = asyncio.Queue()
        self._latest_control: Optional[tuple[float, float]] = None

    def apply_latest_control(self) -> None:
        if self._latest_control is not None:
            throttle, brake = self._latest_control
            self.sim.apply_control(self.config.hil.human_vehicle, throttle, brake)

    async def _reader(self, socket) -> None:
        async for frame in socket:
            try:
                msg = decode_msg(frame)
            except CodecError as exc:
                await socket.send(encode_msg({"type": "error", "message": str(exc)}))
                continue
            if msg["type"] == "control":
                throttle = min(max(float(msg["throttle"]), 0.0), 1.0)
                brake = min(max(float(msg["brake"]), 0.0), 1.0)
                self._latest_control = (throttle, brake)
                if self.config.hil.lockstep:
                    await self._control_queue.put((throttle, brake))

    async def run(self, socket) -> SessionResult:
        await socket.send(encode_msg(hello_message(self.config)))
        reader = asyncio.create_task(self._reader(socket))
        sim = self.sim
        steps_per_decision = self.config.steps_per_decision
        known_events = 0
        try:
            await socket.send(encode_msg(state_message(sim)))
            trust_sent = 0
            while True:
                if sim.tick_index % steps_per_decision == 0:
                    if self.config.hil.lockstep:
                        throttle, brake = await asyncio.wait_for(
                            self._control_queue.get(), timeout=30.0)
                        self._latest_control = (throttle, brake)
                    self.apply_latest_control()
                alive = sim.tick()
                await self.clock.wait_for_tick()
                await socket.send(encode_msg(state_message(sim)))
                for trace in sim.log.trust_traces[trust_sent:]:
                    await socket.send(encode_msg({
                        "type": "trust", "tick": trace["tick"],
                        "vehicle_id": trace["vehicle_id"], "p": trace["p"],
                        "p_forward": trace["p_forward"],
                        "p_backward": trace["p_backward"],
                        "noise_w": trace["noise_w"]}))
                trust_sent = len(sim.log.trust_traces)
                if not alive:
                    break
            for event in sim.log.events[known_events:]:
                await socket.send(encode_msg({"type": "event", "kind": event.kind,
                                              "tick": event.tick}))
            summary = _summary_of(sim.log)
            await socket.send(encode_msg({"type": "end", "summary": summary}))
            await socket.close()
            return SessionResult(log=sim.log, drift_events=self.clock.drift_events)
        except (websockets.exceptions.ConnectionClosed, asyncio.TimeoutError) as exc:
            # Keep the partial episode; mark it aborted.
            sim.log.final_tick = sim.tick_index
            from .sim import detect_events
            sim.log.events = detect_events(sim.log)
            return SessionResult(log=sim.log, aborted=True,
                                 drift_events=self.clock.drift_events,
                                 error=str(exc))
        finally:
            reader.cancel()


def _summary_of(log: EpisodeLog) -> dict:
    m = episode_metrics(log)
    return {
        "outcome": m.outcome,
        "min_thw_s": m.min_thw,
        "min_distance_m": None if math.isnan(m.min_distance) else m.min_distance,
        "avg_speed_sv": m.avg_speed_sv,
        "avg_speed_hv": m.avg_speed_hv,
        "max_jerk_sv": m.max_jerk_sv,
        "max_jerk_hv": m.max_jerk_hv,
        "merge_duration_s": m.merge_duration,
    }


async def serve_session(config: ScenarioConfig, port: Optional[int] = None,
                        host: str = "127.0.0.1") -> SessionResult:
    """Serve exactly one cockpit session and return its episode.

    A second concurrent client is refused. With no client within the
    connect timeout the server shuts down cleanly (log is None).
    """
    port = port if port is not None else config.hil.port
    result_future: asyncio.Future = asyncio.get_event_loop().create_future()
    busy = {"session": False}

    async def handler(socket):
        if busy["session"]:
            await socket.send(encode_msg({"type": "error",
                                          "message": "session already in progress"}))
            await socket.close()
            return
        busy["session"] = True
        session = BridgeSession(config)
        result = await session.run(socket)
        if not result_future.done():
            result_future.set_result(result)

    async with websockets.serve(handler, host, port, max_size=MAX_FRAME_BYTES):
        try:
            result = await asyncio.wait_for(result_future,
                                            timeout=config.hil.connect_timeout)
        except asyncio.TimeoutError:
            return SessionResult(log=None, error="no client within timeout")
    return result


def run_session(config: ScenarioConfig, port: Optional[int] = None) -> SessionResult:
    return asyncio.run(serve_session(config, port=port))


async def run_tape_client(uri: str, tape: dict[int, tuple[float, float]],
                          default: tuple[float, float] = (0.0, 0.0)) -> list[dict]:
    """Scripted cockpit: answers each decision boundary with the tape's
    control for that tick (lockstep sessions pair one control per decision).

    Returns every message received, for end-to-end assertions.
    """
    received: list[dict] = []
    async with websockets.connect(uri, max_size=MAX_FRAME_BYTES) as socket:
        hello = decode_msg(await socket.recv())
        received.append(hello)
        steps = int(round(hello["scenario"]["decision_interval"]
                          / hello["scenario"]["dt"]))
        async for frame in socket:
            msg = decode_msg(frame)
            received.append(msg)
            if msg["type"] == "end":
                break
            if msg["type"] == "state" and msg["tick"] % steps == 0:
                throttle, brake = tape.get(msg["tick"], default)
                try:
                    await socket.send(encode_msg({
                        "type": "control", "throttle": throttle, "brake": brake,
                        "client_time": msg["time_s"]}))
                except websockets.exceptions.ConnectionClosed:
                    continue  # keep draining buffered frames until the end
    return received
