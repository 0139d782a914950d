"""Episode logs: containers, JSON-lines round trip and content hashing.

One log line per record, each tagged with a `type`; the header echoes the
full scenario config so a log alone suffices to replay the episode.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional

SCHEMA_VERSION = 1


class LogError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    kind: str  # collision | merge_complete | merge_abort | deadlock | episode_end
    tick: int
    vehicles: tuple[int, ...] = ()


@dataclass
class TickRecord:
    tick: int
    t: float
    vehicles: dict[int, dict]  # vid -> state fields


@dataclass
class DecisionRecord:
    tick: int
    phase: str
    trust: dict[int, float]
    profiles: dict[int, dict]
    action: dict
    gap_id: Optional[str]
    committed: bool
    abort: bool
    deadlock: bool
    gap_scores: dict[str, float]
    outcomes: list[dict]
    committed_gap: Optional[dict] = None
    remaining_merge_time: Optional[float] = None
    directions: dict[int, float] = field(default_factory=dict)
    noise: dict[int, float] = field(default_factory=dict)
    previous_gap_id: Optional[str] = None
    latched_gap_id: Optional[str] = None


@dataclass
class EpisodeLog:
    config: dict
    seed: int
    mode: str
    schema_version: int = SCHEMA_VERSION
    ticks: list[TickRecord] = field(default_factory=list)
    decisions: list[DecisionRecord] = field(default_factory=list)
    trust_traces: list[dict] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    final_tick: int = 0

    def tick_by_index(self, tick: int) -> TickRecord:
        # Ticks are appended densely from zero.
        record = self.ticks[tick]
        if record.tick != tick:
            raise LogError(f"tick record misaligned at {tick}")
        return record

    def events_of(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]


def _record_lines(log: EpisodeLog) -> Iterator[dict]:
    yield {"type": "header", "schema_version": log.schema_version,
           "seed": log.seed, "mode": log.mode, "config": log.config}
    for tick in log.ticks:
        yield {"type": "tick", "tick": tick.tick, "t": round(tick.t, 9),
               "vehicles": {str(k): v for k, v in tick.vehicles.items()}}
    for dec in log.decisions:
        yield {"type": "decision", "tick": dec.tick, "phase": dec.phase,
               "trust": {str(k): v for k, v in dec.trust.items()},
               "profiles": {str(k): v for k, v in dec.profiles.items()},
               "action": dec.action, "gap_id": dec.gap_id,
               "committed": dec.committed, "abort": dec.abort,
               "deadlock": dec.deadlock, "gap_scores": dec.gap_scores,
               "outcomes": dec.outcomes,
               "committed_gap": dec.committed_gap,
               "remaining_merge_time": dec.remaining_merge_time,
               "directions": {str(k): v for k, v in dec.directions.items()},
               "noise": {str(k): v for k, v in dec.noise.items()},
               "previous_gap_id": dec.previous_gap_id,
               "latched_gap_id": dec.latched_gap_id}
    for trace in log.trust_traces:
        yield {"type": "trust", **trace}
    for event in log.events:
        yield {"type": "event", "kind": event.kind, "tick": event.tick,
               "vehicles": list(event.vehicles)}
    yield {"type": "end", "final_tick": log.final_tick}


def serialize_log(log: EpisodeLog) -> str:
    return "\n".join(json.dumps(line, sort_keys=True, allow_nan=False)
                     for line in _record_lines(log)) + "\n"


def write_log(log: EpisodeLog, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_log(log))


def log_hash(log: EpisodeLog) -> str:
    return hashlib.sha256(serialize_log(log).encode()).hexdigest()


def _parse_line(line: str, lineno: int) -> dict:
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogError(f"line {lineno}: malformed record ({exc})") from exc


def read_log(path: str) -> EpisodeLog:
    """Parse a JSONL episode log; truncation errors name the last valid tick."""
    log: Optional[EpisodeLog] = None
    last_tick = -1
    saw_end = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = _parse_line(raw, lineno)
            except LogError as exc:
                raise LogError(f"{exc}; last valid tick {last_tick}") from None
            kind = record.get("type")
            if kind == "header":
                if record.get("schema_version") != SCHEMA_VERSION:
                    raise LogError(
                        f"schema_version mismatch: log has {record.get('schema_version')}, "
                        f"reader supports {SCHEMA_VERSION}")
                log = EpisodeLog(config=record["config"], seed=record["seed"],
                                 mode=record["mode"],
                                 schema_version=record["schema_version"])
            elif log is None:
                raise LogError(f"line {lineno}: record before header")
            elif kind == "tick":
                log.ticks.append(TickRecord(
                    tick=record["tick"], t=record["t"],
                    vehicles={int(k): v for k, v in record["vehicles"].items()}))
                last_tick = record["tick"]
            elif kind == "decision":
                log.decisions.append(DecisionRecord(
                    tick=record["tick"], phase=record["phase"],
                    trust={int(k): v for k, v in record["trust"].items()},
                    profiles={int(k): v for k, v in record["profiles"].items()},
                    action=record["action"], gap_id=record["gap_id"],
                    committed=record["committed"], abort=record["abort"],
                    deadlock=record["deadlock"], gap_scores=record["gap_scores"],
                    outcomes=record["outcomes"],
                    committed_gap=record.get("committed_gap"),
                    remaining_merge_time=record.get("remaining_merge_time"),
                    directions={int(k): v for k, v in record.get("directions", {}).items()},
                    noise={int(k): v for k, v in record.get("noise", {}).items()},
                    previous_gap_id=record.get("previous_gap_id"),
                    latched_gap_id=record.get("latched_gap_id")))
            elif kind == "trust":
                log.trust_traces.append({k: v for k, v in record.items() if k != "type"})
            elif kind == "event":
                log.events.append(Event(kind=record["kind"], tick=record["tick"],
                                        vehicles=tuple(record["vehicles"])))
            elif kind == "end":
                log.final_tick = record["final_tick"]
                saw_end = True
            else:
                raise LogError(f"line {lineno}: unknown record type {kind!r}")
    if log is None:
        raise LogError("empty log: no header record")
    if not saw_end:
        raise LogError(f"truncated log: no end record; last valid tick {last_tick}")
    return log
