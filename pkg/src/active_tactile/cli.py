"""Command-line entry point.

    active-tactile train  --config run.json [--set loss.learning_rate=3e-3] [--resume]
    active-tactile eval   --config run.json [--policy mpc|scripted|random] [--episodes 10] [--dump DIR]
    active-tactile replay --config run.json
    active-tactile export --config run.json [--out metrics.csv]

Exit codes: 0 success, 1 configuration error, 2 divergence that rollback could not repair.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigurationError, DatasetError, ModelDivergenceError, SerializationError

log = logging.getLogger("active_tactile")

SINGLE_THREAD_FLAGS = "--xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads=1"


def _config(args):
    from .experiment import ExperimentConfig, apply_overrides
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    else:
        data = {}
    return ExperimentConfig.from_dict(apply_overrides(data, args.set or []))


def _load_run(config):
    from . import experiment
    out = Path(config.output_dir)
    ckpt = out / "checkpoint.bin"
    if not ckpt.exists():
        raise ConfigurationError(f"no checkpoint at {ckpt}; run `train` first")
    state, _ = experiment.load_checkpoint(ckpt, config, out / "dataset")
    return state, out


def cmd_train(args) -> int:
    from . import experiment
    config = _config(args)
    state = experiment.run_training(config, resume=args.resume, stop_after=args.stop_after)
    last = state.metrics[-1] if state.metrics else {}
    print(json.dumps({"epoch": state.epoch, "env_steps": state.env_steps, **last}))
    return 0


def cmd_eval(args) -> int:
    import numpy as np
    from . import experiment
    config = _config(args)
    state, out = _load_run(config)
    spec = config.task_spec()
    prior = experiment.make_prior(config)
    policy = experiment.make_policy(args.policy, spec, state.model, prior, state.normalizer, config.mpc_config())
    rng = np.random.default_rng(args.seed if args.seed is not None else config.seed + 1)
    res = experiment.evaluate(state.model, policy, spec, args.episodes or config.eval_episodes, rng, prior,
                              state.normalizer, keep=args.dump is not None)
    if args.dump is not None:
        dump = Path(args.dump)
        dump.mkdir(parents=True, exist_ok=True)
        for i, (traj, path) in enumerate(zip(res.trajectories, res.sigma_paths)):
            experiment.export_trajectory(traj, dump / f"episode_{i:03d}.json", path, res.estimates[i])
    print(json.dumps({"policy": args.policy, "mae": res.mae, "contact_rate": res.contact_rate,
                      "mean_final_sigma_m": float(np.nanmean(res.final_sigma)) if res.final_sigma.size else None,
                      "flagged": res.flagged}))
    return 0


def cmd_replay(args) -> int:
    from . import experiment, training
    config = _config(args)
    state, out = _load_run(config)
    dataset = training.replay_beliefs(state.dataset, state.model, experiment.make_prior(config), state.normalizer)
    for rec in dataset:
        training.save_beliefs(out / "dataset", rec)
    print(json.dumps({"episodes": len(dataset), "invalid": sum(not r.valid for r in dataset)}))
    return 0


def cmd_export(args) -> int:
    from . import experiment
    config = _config(args)
    state, out = _load_run(config)
    path = experiment.export_metrics(state.metrics, args.out or out / "metrics.csv")
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="active-tactile", description=__doc__.split("\n")[0])
    p.add_argument("--single-thread", action="store_true", help="single-threaded XLA for bit-exact reruns")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")

    t = sub.add_parser("train", help="run or resume the collect/train/replay loop")
    common(t)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs in total")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a policy with the checkpointed filter")
    common(e)
    e.add_argument("--policy", choices=("mpc", "scripted", "random"), default="mpc")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--dump", default=None, help="directory for per-episode trajectory JSON")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="recompute stored beliefs under the checkpointed model")
    common(r)
    r.set_defaults(func=cmd_replay)

    x = sub.add_parser("export", help="write the metrics CSV")
    common(x)
    x.add_argument("--out", default=None)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.single_thread:
        # read when the XLA backend starts, which happens on the first computation
        os.environ["XLA_FLAGS"] = (os.environ.get("XLA_FLAGS", "") + " " + SINGLE_THREAD_FLAGS).strip()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, SerializationError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ModelDivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
