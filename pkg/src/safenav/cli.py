"""``safenav`` command line: data collection, training, evaluation, ablation, visualisation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import safety as sf
from .config import ConfigError, RunConfig, default_config_text, load_config
from .evaluation import (ABLATION_CELLS, ActorPolicy, IdmEgoPolicy, RandomPolicy, run_ablation,
                         run_episode, run_eval)
from .nn import CheckpointError
from .td3 import load_actor, run_training
from .viz import render_attention, write_attention_csv, write_episode_trace

log = logging.getLogger("safenav")


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--episodes", type=int, help="override training or evaluation episodes")
    common.add_argument("--task", choices=("left", "straight", "right", "multi"))
    common.add_argument("--safety", type=_on_off, metavar="{on,off}")
    common.add_argument("--attention", type=_on_off, metavar="{on,off}")
    common.add_argument("--checkpoint", help="actor checkpoint prefix (or ablation directory)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--safety-model", help="trained safety model file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="safenav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("config", parents=[common], help="print the documented default configuration")
    c = sub.add_parser("collect-safety-data", parents=[common], help="roll a random policy for constraint data")
    c.add_argument("--samples", type=int, help="override safety.dataset_size")
    t = sub.add_parser("train-safety", parents=[common], help="fit the constraint model")
    t.add_argument("--dataset", required=True)
    sub.add_parser("train-rl", parents=[common], help="train a TD3 agent")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a baseline")
    e.add_argument("--policy", choices=("actor", "random", "idm"))
    a = sub.add_parser("ablate", parents=[common], help="train and/or evaluate the ablation grid")
    a.add_argument("--train", action="store_true", help="train cells without a checkpoint")
    a.add_argument("--cells", nargs="+", choices=tuple(ABLATION_CELLS))
    v = sub.add_parser("visualize-attention", parents=[common], help="render attention frames")
    v.add_argument("--trace", required=True)
    v.add_argument("--weights", required=True)
    v.add_argument("--every", type=int, default=10)
    sub.add_parser("replay", parents=[common], help="record one episode trace and attention weights")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.task is not None:
        cfg = replace(cfg, task=args.task)
    if args.safety is not None or args.attention is not None:
        abl = cfg.ablation
        cfg = replace(cfg, ablation=replace(
            abl, safety=abl.safety if args.safety is None else args.safety,
            attention=abl.attention if args.attention is None else args.attention))
    return cfg


def load_safety_layer(cfg: RunConfig, path) -> sf.SafetyLayer:
    if path is None:
        raise ConfigError("--safety-model is required when the safety layer is on")
    if not Path(path).exists():
        raise FileNotFoundError(f"safety model {path} not found")
    model = sf.load_model(path, cfg.constraint)
    if model.multitask != cfg.multitask:
        raise ConfigError("safety model input width does not match the task setting")
    return sf.SafetyLayer(model, cfg.safety.correction_space)


def _policy(cfg: RunConfig, kind: str, checkpoint):
    if kind == "random":
        return RandomPolicy(cfg.eval.seed)
    if kind == "idm":
        return IdmEgoPolicy(v0=cfg.sim.limits.max_speed)
    if checkpoint is None:
        raise ConfigError("--checkpoint is required for the actor policy")
    return ActorPolicy(load_actor(checkpoint))


def cmd_config(cfg, args) -> int:
    sys.stdout.write(default_config_text())
    return 0


def cmd_collect(cfg, args) -> int:
    n = args.samples or cfg.safety.dataset_size
    env = cfg.make_env(cfg.seed)
    ds = sf.collect_dataset(env, n, cfg.seed, cfg.constraint, cfg.tasks, cfg.multitask,
                            cfg.safety.active_only)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "csv" if cfg.safety.dataset_format == "csv" else "bin"
    path = out / f"safety_data.{ext}"
    sf.save_dataset(ds, path, cfg.safety.dataset_format)
    print(f"wrote {len(ds)} samples to {path}")
    return 0


def cmd_train_safety(cfg, args) -> int:
    ds = sf.load_dataset(args.dataset)
    s = cfg.safety
    res = sf.train_safety(ds, s.epochs, s.lr, s.batch_size, cfg.seed, s.hidden, cfg.constraint, s.lr_decay)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sf.save_model(res.model, out / "safety_model")
    res.write_loss_curve(out / "safety_loss.csv")
    print(f"final loss {res.final_loss:.6g}; model written to {out / 'safety_model'}")
    return 0


def cmd_train_rl(cfg, args) -> int:
    tc = cfg.train_config()
    if args.episodes is not None:
        tc = replace(tc, episodes=args.episodes)
    layer = load_safety_layer(cfg, args.safety_model) if tc.safety else None
    res = run_training(cfg.make_env, tc, layer, args.out)
    outs = [e.outcome for e in res.logs]
    print(f"trained {len(outs)} episodes; last-100 success "
          f"{100.0 * outs[-100:].count('success') / max(1, len(outs[-100:])):.1f}%; "
          f"checkpoint {res.checkpoints[-1]}")
    return 0


def cmd_eval(cfg, args) -> int:
    kind = args.policy or cfg.eval.policy
    policy = _policy(cfg, kind, args.checkpoint)
    layer = load_safety_layer(cfg, args.safety_model) if cfg.ablation.safety or args.safety else None
    n = cfg.eval.episodes
    name = f"{cfg.name}: {kind}" + (" + safety" if layer else "")
    rep = run_eval(policy, cfg.make_env, n, cfg.eval.seed, cfg.tasks, layer, name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "report.csv")
    (out / "report.txt").write_text(rep.table())
    print(rep.table())
    return 0


def cmd_ablate(cfg, args) -> int:
    cells = tuple(args.cells or cfg.ablation.cells)
    root = Path(args.checkpoint or args.out)
    layer = None
    if args.safety_model:
        layer = load_safety_layer(cfg, args.safety_model)
    actors = {}
    for name in cells:
        attention_on, train_safety, _, base = ABLATION_CELLS[name]
        if base is not None:
            continue
        prefix = root / name / "final"
        if not Path(f"{prefix}.json").exists() and args.train:
            if train_safety and layer is None:
                log.warning("cannot train %s without --safety-model", name)
                continue
            tc = cfg.train_config(safety=train_safety, attention=attention_on)
            if args.episodes is not None:
                tc = replace(tc, episodes=args.episodes)
            run_training(cfg.make_env, tc, layer if train_safety else None, root / name)
        if Path(f"{prefix}.json").exists():
            actors[name] = load_actor(prefix)
    for name in cells:
        base = ABLATION_CELLS[name][3]
        if base is not None and base not in actors and Path(root / base / "final.json").exists():
            actors[base] = load_actor(root / base / "final")
    result = run_ablation(cells, actors, layer, cfg.make_env, cfg.eval.episodes, cfg.eval.seed, cfg.tasks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "ablation.csv", cfg.tasks[0])
    table = result.table(cfg.tasks[0])
    (out / "ablation.txt").write_text(table)
    print(table)
    for m in result.missing:
        print(f"missing cell: {m}")
    for f in result.flags:
        print(f"DIRECTION FLAG: {f}")
    return 0


def cmd_replay(cfg, args) -> int:
    policy = _policy(cfg, "actor" if args.checkpoint else "random", args.checkpoint)
    layer = load_safety_layer(cfg, args.safety_model) if cfg.ablation.safety else None
    env = cfg.make_env(cfg.eval.seed)
    env.set_yield_probability(0.0)
    env.rng = np.random.default_rng(np.random.SeedSequence([cfg.eval.seed, 0, cfg.seed]))
    rec = run_episode(env, policy, cfg.tasks[0], layer, record=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_episode_trace(out / "trace.csv", rec.trace)
    if rec.attention:
        write_attention_csv(out / "attention.csv", rec.attention)
    (out / "episode.json").write_text(json.dumps(
        {"outcome": rec.outcome, "time": rec.time, "steps": rec.steps, "activations": rec.activations}))
    print(f"{rec.outcome} after {rec.time:.1f} s; trace in {out / 'trace.csv'}")
    return 0


def cmd_visualize(cfg, args) -> int:
    paths = render_attention(args.trace, args.weights, args.out, args.every, cfg.map,
                             cfg.traffic.vehicle_length, cfg.traffic.vehicle_width)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


COMMANDS = {
    "config": cmd_config,
    "collect-safety-data": cmd_collect,
    "train-safety": cmd_train_safety,
    "train-rl": cmd_train_rl,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "replay": cmd_replay,
    "visualize-attention": cmd_visualize,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "eval" and args.episodes is not None:
            cfg = replace(cfg, eval=replace(cfg.eval, episodes=args.episodes))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
