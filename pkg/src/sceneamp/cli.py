"""Command-line entry points.

Every subcommand takes a config path, `--seed` and `--out-dir`. Failures exit
with status 2 and print one line to stderr: `error: <kind>: <message>`.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evaluation as E
from . import tasks as T
from .amp import LayoutMismatch
from .motiondata import ClipError, SynthParams, generate_dataset, save_clips
from .physics import SimulationFault
from .trainer import TrainConfig, build_body, load_agent, load_config, train

log = logging.getLogger("sceneamp")


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CLIError("config", f"config not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise CLIError("config", f"{path}: invalid YAML ({str(e).splitlines()[0]})") from e
    if not isinstance(raw, dict):
        raise CLIError("config", f"{path}: config must be a mapping")
    return raw


def _train_config(path, seed) -> TrainConfig:
    raw = _read_yaml(path)
    try:
        return load_config(path, seed=seed)
    except (TypeError, ValueError) as e:
        raise CLIError("config", f"{path}: {e}") from e


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise CLIError("config", f"section {name!r} must be a mapping")
    return sec


def _checkpoint_path(raw: dict, args, config_path) -> Path:
    ckpt = args.checkpoint or raw.get("checkpoint")
    if ckpt is None:
        raise CLIError("config", "no checkpoint given (use --checkpoint or a 'checkpoint' key)")
    p = Path(ckpt)
    if not p.is_absolute() and args.checkpoint is None:
        p = Path(config_path).parent / p
    if p.is_dir():
        p = p / "checkpoint.npz"
    if not p.exists():
        raise CLIError("checkpoint", f"checkpoint not found: {p}")
    return p


def cmd_generate_data(args) -> dict:
    raw = _read_yaml(args.config)
    sec = _section(raw, "data")
    tasks = sec.get("tasks", [sec.get("task", "sit")])
    n = int(sec.get("clips_per_task", 8))
    params = SynthParams(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in _section(sec, "synth").items()})
    body = build_body(TrainConfig(body=raw.get("body")))
    out = Path(args.out_dir)
    written = []
    for i, task in enumerate(tasks):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, i]))
        clips = generate_dataset(task, n, rng, params, body)
        written += save_clips(out, clips, prefix=task)
    return {"clips": len(written), "out_dir": str(out)}


def cmd_train(args) -> dict:
    cfg = _train_config(args.config, args.seed)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    summary = train(cfg, args.out_dir,
                    progress=lambda s: log.info("iter %d steps %d r_task %.4f r_style %.4f",
                                                s["iteration"], s["env_steps"], s["task_reward"],
                                                s["style_reward"]))
    return {"iterations": summary.get("iteration", 0), "env_steps": summary.get("env_steps", 0),
            "out_dir": str(args.out_dir)}


def _eval_setup(args):
    raw = _read_yaml(args.config)
    path = _checkpoint_path(raw, args, args.config)
    agent, _, ckpt = load_agent(path)
    cfg = TrainConfig(**{k: v for k, v in ckpt.meta["config"].items()})
    sec = _section(raw, "eval")
    task = sec.get("task", cfg.task)
    if task != cfg.task:
        raise CLIError("config", f"checkpoint was trained for {cfg.task!r}, not {task!r}")
    body = build_body(cfg)
    goal = cfg.goal()
    try:
        E.check_agent(agent, body, task, goal)
    except LayoutMismatch as e:
        raise CLIError("layout", str(e)) from e
    spec = T.TaskSpec.from_dict({**cfg.spec().to_dict(), **_section(sec, "task_spec")})
    n = 4096 if args.full else int(args.trials or sec.get("trials", 256))
    return raw, sec, agent, body, goal, spec, n


def cmd_evaluate(args) -> dict:
    _, _, agent, body, goal, spec, n = _eval_setup(args)
    metrics, _ = E.evaluate(E.PolicyController(agent), spec.kind, n, args.seed, body, spec,
                            goal, out_dir=args.out_dir)
    return metrics.to_dict()


def cmd_perturb_eval(args) -> dict:
    _, sec, agent, body, goal, spec, n = _eval_setup(args)
    try:
        pcfg = E.PerturbConfig(**_section(sec, "perturb"))
    except (TypeError, ValueError, KeyError) as e:
        raise CLIError("config", f"perturb: {e}") from e
    metrics, _ = E.perturb_evaluate(E.PolicyController(agent), spec.kind, pcfg, n, args.seed,
                                    body, spec=spec, goal=goal, out_dir=args.out_dir)
    return metrics.to_dict()


def cmd_replay_export(args) -> dict:
    _, sec, agent, body, goal, spec, _ = _eval_setup(args)
    episodes = int(args.episodes or sec.get("episodes", 1))
    out = Path(args.out_dir)
    rows = []
    for k in range(episodes):
        (clip, table), res = E.record_episode(E.PolicyController(agent), spec.kind,
                                              args.seed + k, body,
                                              out / f"episode_{k:03d}.jsonl", spec, goal)
        rows.append({"clip": str(clip), "csv": str(table), "termination": res.termination})
    return {"episodes": rows}


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "perturb-eval": cmd_perturb_eval,
    "replay-export": cmd_replay_export,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sceneamp", description="Scene-conditioned adversarial motion priors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out-dir", required=True)
        if name == "train":
            s.add_argument("--iterations", type=int)
        if name in ("evaluate", "perturb-eval", "replay-export"):
            s.add_argument("--checkpoint")
            s.add_argument("--trials", type=int)
            s.add_argument("--full", action="store_true", help="4096 trials")
        if name == "replay-export":
            s.add_argument("--episodes", type=int)
    return p


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CLIError("usage", f"missing command (one of {', '.join(COMMANDS)})")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        result = COMMANDS[args.command](args)
    except CLIError as e:
        print(f"error: {e.kind}: {_one_line(e)}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing-file: {_one_line(e)}", file=sys.stderr)
        return 2
    except LayoutMismatch as e:
        print(f"error: layout: {_one_line(e)}", file=sys.stderr)
        return 2
    except ClipError as e:
        print(f"error: data: {_one_line(e)}", file=sys.stderr)
        return 2
    except SimulationFault as e:
        print(f"error: simulation: {_one_line(e)}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, KeyError, FloatingPointError) as e:
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "status": "ok", **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
