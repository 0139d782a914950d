"""Command-line entry point: single runs, paired ablations, replays and the
human-in-the-loop bridge.

Exit codes: 0 clean, 1 invalid input (config or log), 2 episode ended in a
collision, 3 replay found divergences.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from .config import (ConfigError, ScenarioConfig, config_from_dict, config_to_dict,
                     default_scenario_dict, init_merge_scenario, load_config,
                     save_config)
from .game import GapRef, SvParams, merge_decision
from .logs import EpisodeLog, LogError, log_hash, read_log, write_log
from .metrics import CSV_HEADER, EpisodeMetrics, ablation_compare, episode_metrics
from .sim import run_episode
from .world import MergePhase, VehicleKind, VehicleState

ABLATION_TAUS = (0.1, 0.3, 0.5, 0.7, 0.9)


def _out_dir(arg: Optional[str]) -> Path:
    root = arg or os.environ.get("TGLD_OUT_DIR", "runs")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, config: ScenarioConfig, seeds: list[int],
                    modes: list[str]) -> None:
    manifest = {
        "config": config_to_dict(config),
        "seeds": seeds,
        "modes": modes,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _write_metrics_csv(path: Path, rows: list[EpisodeMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for m in rows:
            writer.writerow(m.csv_row())


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None or args.mode is not None:
            data = config_to_dict(config)
            if args.seed is not None:
                data["seed"] = args.seed
            if args.mode is not None:
                data["mode"] = args.mode
            config = config_from_dict(data)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1

    out = _out_dir(args.out)
    _write_manifest(out, config, [config.seed], [config.mode])
    log = run_episode(config)
    write_log(log, str(out / f"episode_{config.seed}_{config.mode}.jsonl"))
    metrics = episode_metrics(log)
    _write_metrics_csv(out / "metrics.csv", [metrics])
    print(f"episode seed={config.seed} mode={config.mode} outcome={metrics.outcome} "
          f"hash={log_hash(log)[:16]}")
    return 2 if metrics.outcome == "collision" else 0


def _ablate_episode(payload: tuple[dict, int, str, float]) -> tuple[int, str, EpisodeLog]:
    data, seed, mode, tau = payload
    config = init_merge_scenario(overrides=data, seed=seed, mode=mode, hv_tau=tau)
    return seed, mode, run_episode(config)


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.seeds < 10:
        print("ablation needs at least 10 paired seeds", file=sys.stderr)
        return 1
    try:
        overrides = {}
        if args.config is not None:
            overrides = config_to_dict(load_config(args.config))
            overrides.pop("seed", None)
            overrides.pop("mode", None)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1

    out = _out_dir(args.out)
    jobs = []
    for i in range(args.seeds):
        tau = ABLATION_TAUS[i % len(ABLATION_TAUS)]
        for mode in ("trust_on", "trust_off"):
            jobs.append((overrides, i, mode, tau))

    results: dict[tuple[int, str], EpisodeLog] = {}
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                for seed, mode, log in pool.map(_ablate_episode, jobs):
                    results[(seed, mode)] = log
        else:
            for payload in jobs:
                seed, mode, log = _ablate_episode(payload)
                results[(seed, mode)] = log
    finally:
        # Keep whatever finished even if an episode crashed.
        rows = [episode_metrics(log) for (_, _), log in sorted(results.items())]
        _write_metrics_csv(out / "ablation_metrics.csv", rows)

    arm_on = [episode_metrics(results[(i, "trust_on")]) for i in range(args.seeds)
              if (i, "trust_on") in results]
    arm_off = [episode_metrics(results[(i, "trust_off")]) for i in range(args.seeds)
               if (i, "trust_off") in results]
    report = ablation_compare(arm_on, arm_off)
    table = report.table()
    (out / "ablation_report.txt").write_text(table + "\n")
    with open(out / "ablation_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "median_trust_on", "median_trust_off",
                         "direction", "p_one_sided", "p_two_sided", "method"])
        for c in report.comparisons:
            writer.writerow([c.metric, c.median_a, c.median_b, c.direction,
                             c.wilcoxon.p_one_sided, c.wilcoxon.p_two_sided,
                             c.wilcoxon.method])
    print(table)
    return 0


def _snapshot_from_record(log: EpisodeLog, record) -> "WorldSnapshot":
    from .game import ResponderProfile, VehicleInfo, WorldSnapshot
    from .payoff import HvWeights
    from .world import RoadLayout

    config = log.config
    layout = RoadLayout(merge_zone=tuple(config["layout"]["merge_zone"]),
                        lane_width=config["layout"]["lane_width"])
    sv_id = next(v["id"] for v in config["vehicles"] if v["controller"] == "sv")
    kinds = {v["id"]: VehicleKind(v["kind"]) for v in config["vehicles"]}
    tick_record = log.tick_by_index(record.tick)
    infos = {}
    for vid, entry in tick_record.vehicles.items():
        # The SV's phase at solve time may differ from the tick record (the
        # signaling transition happens inside the decision step).
        phase = MergePhase(record.phase) if vid == sv_id \
            else MergePhase(entry["merge_phase"])
        state = VehicleState(s=entry["s"], v=entry["v"], a=entry["a"],
                             d=entry["d"], lane=entry["lane"],
                             merge_phase=phase, t=record.tick * config["dt"])
        infos[vid] = VehicleInfo(vid=vid, kind=kinds[vid], state=state)
    hvw = config["weights"]["hv"]
    profiles = {vid: ResponderProfile(gamma=p["gamma"], v_desire=p["v_desire"],
                                      weights=HvWeights(**hvw))
                for vid, p in record.profiles.items()}
    return WorldSnapshot(layout=layout, sv_id=sv_id, vehicles=infos,
                         perception_range=config["perception_range"],
                         responder_profiles=profiles)


def replay_divergences(log: EpisodeLog) -> list[dict]:
    """Re-solve every logged decision from its logged inputs and diff."""
    from .payoff import SvWeights

    config = log.config
    svw = config["weights"]["sv"]
    weights = SvWeights(safe=svw["safe"], eff=svw["eff"], com=svw["com"],
                        trust=svw["trust"], xi1=svw["xi1"], xi2=svw["xi2"])
    params = SvParams(v_desire=config["sv"]["v_desire"],
                      decision_dt=config["decision_interval"],
                      sim_dt=config["dt"])
    divergences = []
    for record in log.decisions:
        snapshot = _snapshot_from_record(log, record)
        committed_gap = None
        if record.committed_gap is not None:
            committed_gap = GapRef(gap_id=record.committed_gap["gap_id"],
                                   lag_id=record.committed_gap["lag_id"],
                                   lead_id=record.committed_gap["lead_id"])
        plan = merge_decision(snapshot, record.trust, weights, params,
                              mode=log.mode, committed_gap=committed_gap,
                              remaining_merge_time=record.remaining_merge_time,
                              directions=record.directions,
                              previous_gap_id=record.previous_gap_id,
                              noise=record.noise,
                              latched_gap_id=record.latched_gap_id)
        replayed = {"a": plan.action.accel, "intent": plan.action.intent.value}
        gap_id = plan.gap.gap_id if plan.gap is not None else None
        outcome_keys = [(o.col_id, o.row_idx, o.col_idx, o.mode) for o in plan.outcomes]
        logged_keys = [(o["col_id"], o["row_idx"], o["col_idx"], o["mode"])
                       for o in record.outcomes]
        if (replayed != record.action or gap_id != record.gap_id
                or plan.committed != record.committed or plan.abort != record.abort
                or outcome_keys != logged_keys):
            divergences.append({
                "tick": record.tick,
                "logged": {"action": record.action, "gap": record.gap_id,
                           "committed": record.committed},
                "replayed": {"action": replayed, "gap": gap_id,
                             "committed": plan.committed},
            })
    return divergences


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        log = read_log(args.log)
    except LogError as exc:
        print(f"invalid log: {exc}", file=sys.stderr)
        return 1
    metrics = episode_metrics(log)
    print("recomputed metrics:", dict(zip(CSV_HEADER, metrics.csv_row())))
    divergences = replay_divergences(log)
    if divergences:
        print(f"{len(divergences)} diverging decision(s); first at tick "
              f"{divergences[0]['tick']}:")
        print(json.dumps(divergences[0], indent=2))
        return 3
    print(f"replay clean: {len(log.decisions)} decisions re-solved identically")
    return 0


def cmd_hil_serve(args: argparse.Namespace) -> int:
    from .hil import run_session

    try:
        config = load_config(args.config)
        if args.port is not None:
            data = config_to_dict(config)
            data["hil"]["port"] = args.port
            config = config_from_dict(data)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    try:
        result = run_session(config)
    except OSError as exc:
        print(f"cannot serve: {exc}", file=sys.stderr)
        return 1
    if result.log is None:
        print(result.error or "no session")
        return 0
    out = _out_dir(args.out)
    _write_manifest(out, config, [config.seed], [config.mode])
    suffix = "aborted" if result.aborted else "complete"
    write_log(result.log, str(out / f"hil_{config.seed}_{suffix}.jsonl"))
    metrics = episode_metrics(result.log)
    _write_metrics_csv(out / "hil_metrics.csv", [metrics])
    print(f"session {suffix}; outcome={metrics.outcome}; "
          f"drift events={result.drift_events}")
    return 2 if metrics.outcome == "collision" else 0


def cmd_init_config(args: argparse.Namespace) -> int:
    save_config(init_merge_scenario(), args.path)
    print(f"wrote default scenario to {args.path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trustmerge",
        description="Trust-adaptive on-ramp merging simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one episode from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--mode", choices=("trust_on", "trust_off"), default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run)

    p_ab = sub.add_parser("ablate", help="paired trust_on/trust_off batch")
    p_ab.add_argument("--config", default=None,
                      help="optional base config (defaults to the built-in scenario)")
    p_ab.add_argument("--seeds", type=int, default=30)
    p_ab.add_argument("--jobs", type=int, default=1)
    p_ab.add_argument("--out", default=None)
    p_ab.set_defaults(func=cmd_ablate)

    p_rp = sub.add_parser("replay", help="recompute metrics and re-solve decisions")
    p_rp.add_argument("log")
    p_rp.set_defaults(func=cmd_replay)

    p_hil = sub.add_parser("hil-serve", help="serve a human-in-the-loop session")
    p_hil.add_argument("config")
    p_hil.add_argument("--port", type=int, default=None)
    p_hil.add_argument("--out", default=None)
    p_hil.set_defaults(func=cmd_hil_serve)

    p_ic = sub.add_parser("init-config", help="write the default scenario config")
    p_ic.add_argument("path")
    p_ic.set_defaults(func=cmd_init_config)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
