"""Train the desk-scale acceptance runs into runs/acceptance/<name>/ and report
their 256-trial evaluation.

    python scripts/train_acceptance.py                 # all four runs
    python scripts/train_acceptance.py sit carry       # a subset
    python scripts/train_acceptance.py --eval-only
"""
import argparse
import logging
import time
from pathlib import Path

from sceneamp import tasks as T
from sceneamp.evaluation import PerturbConfig, PolicyController, evaluate, perturb_evaluate
from sceneamp.physics import default_body
from sceneamp.trainer import TrainConfig, load_agent, load_config, train

ROOT = Path(__file__).resolve().parents[1]
RUNS = ["sit", "carry", "sit_nobb", "carry_nobb"]

log = logging.getLogger("train_acceptance")


def report(name, out, trials, seed):
    agent, _, ckpt = load_agent(out / "checkpoint.npz")
    cfg = TrainConfig(**ckpt.meta["config"])
    body = default_body()
    kw = dict(spec=T.default_spec(cfg.task), goal=cfg.goal())
    m, _ = evaluate(PolicyController(agent), cfg.task, trials, seed, body,
                    out_dir=out / "eval", **kw)
    log.info("%s: %.1f%% success, time %s, precision %s, failures %s", name, m.success_rate,
             m.execution_time, m.precision_cm, m.failures)
    if name == "sit":
        p, _ = perturb_evaluate(PolicyController(agent), cfg.task, PerturbConfig(), trials, seed,
                                body, out_dir=out / "eval_perturbed", **kw)
        log.info("%s perturbed: %.1f%% success, failures %s", name, p.success_rate, p.failures)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("runs", nargs="*", help=f"subset of {RUNS}")
    ap.add_argument("--out-root", default=ROOT / "runs" / "acceptance", type=Path)
    ap.add_argument("--eval-only", action="store_true")
    ap.add_argument("--trials", type=int, default=256)
    ap.add_argument("--seed", type=int, default=12345)
    args = ap.parse_args()
    if unknown := set(args.runs) - set(RUNS):
        ap.error(f"unknown runs: {sorted(unknown)}")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in args.runs or RUNS:
        out = args.out_root / name
        if not args.eval_only:
            cfg = load_config(ROOT / "configs" / f"acceptance_{name}.yaml")
            t0 = time.perf_counter()
            summary = train(cfg, out, progress=lambda s: log.info(
                "%s it %d steps %d task %.3f style %.3f", name, s["iteration"], s["env_steps"],
                s["task_reward"], s["style_reward"]) if s["iteration"] % 10 == 0 else None)
            log.info("%s trained: %d env steps in %.0f s", name, summary["env_steps"],
                     time.perf_counter() - t0)
        report(name, out, args.trials, args.seed)


if __name__ == "__main__":
    main()
