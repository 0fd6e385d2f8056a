"""Command-line entry point: generate, ingest, fit-emulator, train, evaluate, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, dump_config, load_config
from .emulator import fit_behaviour_model, load_behaviour_model, save_behaviour_model
from .evaluation import BehaviourPolicy, UniformPolicy, evaluate, read_metrics, report
from .events import (
    DataError, DomainError, aggregate_events, read_event_log, read_event_meta, read_sessions,
    split_chronological, write_event_log, write_event_meta, write_sessions,
)
from .learner import NumericError, load_checkpoint, read_curves, save_checkpoint, train, write_curves
from .synthetic import generate_synthetic

log = logging.getLogger("streamsched")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test", "all")


def _split(path: str, which: str):
    event_log = read_event_log(path)
    if which == "all":
        return event_log
    return dict(zip(SPLITS, split_chronological(event_log)))[which]


def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sessions, meta, truth = generate_synthetic(cfg.synth, cfg.seed)
    write_sessions(out / "sessions.csv", sessions)
    write_event_meta(out / "events.csv", meta)
    print(f"wrote {len(sessions)} sessions for {len(meta)} events to {out}")
    print(f"mean engagement {truth.engagement.mean():.4f}, mean adoption {truth.adoption.mean():.4f}, "
          f"best slot {int(truth.optimal_slot[0])}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    event_log = aggregate_events(read_sessions(args.sessions), read_event_meta(args.events),
                                 slot_count=cfg.synth.slot_count)
    write_event_log(args.out, event_log)
    print(f"events {len(event_log)}  avg engagement {event_log.engagement().mean():.4f}  "
          f"avg adoption {event_log.adoption().mean():.4f}")
    return EXIT_OK


def cmd_fit(args, cfg: RunConfig) -> int:
    model = fit_behaviour_model(_split(args.log, args.split), cfg.emulator)
    save_behaviour_model(model, args.out)
    print(json.dumps(model.losses, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    model = load_behaviour_model(args.emulator)
    trained = train(cfg.learner, model, _split(args.log, "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, out / "agent.bin")
    write_curves(out / "curves.csv", trained.curves)
    (out / "run.cfg").write_text(dump_config(cfg))
    print(f"trained {cfg.learner.episodes} episodes; checkpoint {out / 'agent.bin'}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    model = load_behaviour_model(args.emulator)
    if args.policy == "agent":
        if not args.agent:
            raise ConfigError("--agent is required with --policy agent")
        policy = load_checkpoint(args.agent)
    elif args.policy == "uniform":
        policy = UniformPolicy(model.slot_count, model.window)
    else:
        policy = BehaviourPolicy(model)
    ev = cfg.evaluation
    metrics = evaluate(policy, model, _split(args.log, args.split), ev.trials, ev.delta, cfg.seed,
                       horizon=cfg.eval_horizon, mode=ev.ncis_mode)
    Path(args.out).write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    print(f"Eng. NCIS {metrics.eng_ncis:.4f}  Ad. NCIS {metrics.ad_ncis:.4f}  ({metrics.trials} trials)")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    metrics = read_metrics(args.metrics) if args.metrics else None
    curves = read_curves(args.curves) if args.curves else []
    for path in report(metrics, curves, args.out):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamsched", description=__doc__)
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--seed", type=int, help="run seed (overrides the config file)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="write a synthetic session log")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("ingest", help="aggregate sessions into an event log")
    s.add_argument("--sessions", required=True)
    s.add_argument("--events", required=True, help="per-event slot/duration/date CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit-emulator", help="fit the behaviour model on one split")
    s.add_argument("--log", required=True)
    s.add_argument("--split", choices=SPLITS, default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("train", help="train the agent against a fitted emulator")
    s.add_argument("--log", required=True)
    s.add_argument("--emulator", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="NCIS of a policy on a split")
    s.add_argument("--log", required=True)
    s.add_argument("--emulator", required=True, help="behaviour model fitted on the evaluation split")
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--policy", choices=("agent", "uniform", "behaviour"), default="agent")
    s.add_argument("--agent", help="checkpoint from train")
    s.add_argument("--out", required=True, help="metrics JSON path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="write metrics.json, curves.csv and reward plots")
    s.add_argument("--metrics")
    s.add_argument("--curves")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DomainError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
