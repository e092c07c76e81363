"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O or checkpoint error,
4 replay divergence.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import os
import pathlib
import sys

import numpy as np

from . import agent as agent_mod
from . import bench, curriculum, percept, qfunc, world
from .config import ConfigError, Profile, dump_profile, load_profile

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

TRAIN_WINDOW = 100


def _resolve_profile(name: str | None) -> Profile:
    if name is None:
        name = "desk"
    path = pathlib.Path(name)
    if path.is_file():
        return load_profile(str(path))
    ref = importlib.resources.files("pushgrasp").joinpath(f"data/profiles/{name}.cfg")
    if ref.is_file():
        import configparser
        parser = configparser.ConfigParser()
        parser.read_string(ref.read_text(encoding="utf-8"))
        from .config import profile_from_parser
        return profile_from_parser(parser)
    raise ConfigError(f"profile {name!r} is neither a file nor a built-in profile")


def _out_dir(args) -> pathlib.Path:
    out = args.out or os.environ.get("PUSHGRASP_OUTPUT_DIR") or "runs"
    path = pathlib.Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_summary(log_path: pathlib.Path, summary_path: pathlib.Path,
                   stage: int, seed: int):
    records = agent_mod.parse_log(str(log_path))
    actions = [r for r in records if "action" in r]
    series = []
    window = []
    for rec in actions:
        if rec["action"]["primitive"] == "grasp":
            window.append((rec["step"], 1 if rec["success"] else 0))
        lo = rec["step"] - TRAIN_WINDOW
        window = [(s, ok) for (s, ok) in window if s >= lo]
        rate = round(sum(ok for _, ok in window) / len(window), 6) if window else None
        series.append([rec["step"], rate])
    summary = {
        "stage": stage, "seed": seed, "steps": len(actions),
        "window": TRAIN_WINDOW,
        "final_trailing_success": series[-1][1] if series else None,
        "total_reward": round(sum(r["reward"] for r in actions), 6),
        "series": series,
    }
    summary_path.write_text(json.dumps(summary, sort_keys=True) + "\n",
                            encoding="utf-8")


def cmd_train(args) -> int:
    profile = _resolve_profile(args.profile)
    if args.print_config:
        print(dump_profile(profile), end="")
        return EXIT_OK
    out = _out_dir(args)
    stage_cfg = profile.stage1 if args.stage == 1 else profile.stage2
    if args.steps is not None:
        stage_cfg.steps = args.steps

    if args.resume:
        state = curriculum.load_checkpoint(args.resume)
        if state.stage != args.stage:
            raise ConfigError(
                f"checkpoint is for stage {state.stage}, not {args.stage}")
        profile = state.profile
        stage_cfg = profile.stage1 if args.stage == 1 else profile.stage2
        if args.steps is not None:
            stage_cfg.steps = args.steps
    elif args.stage == 2:
        if args.from_stage1:
            prev = curriculum.load_checkpoint(args.from_stage1)
            state = curriculum.TrainState.fresh(profile, 2, args.seed,
                                                params=prev.params)
        elif args.no_pretrain:
            state = curriculum.TrainState.fresh(profile, 2, args.seed)
        else:
            raise ConfigError(
                "stage 2 needs --from-stage1 CHECKPOINT (or --no-pretrain "
                "for the single-stage ablation)")
    else:
        state = curriculum.TrainState.fresh(profile, 1, args.seed)

    tag = f"stage{args.stage}_seed{args.seed}"
    log_path = out / f"{tag}_transitions.jsonl"
    ckpt_path = out / f"{tag}.ckpt"
    state = curriculum.run_stage(stage_cfg, state, log_path=str(log_path),
                                 stop_success=args.stop_success)
    curriculum.save_checkpoint(state, str(ckpt_path),
                               include_replay=not args.no_replay_in_checkpoint)
    _write_summary(log_path, out / f"{tag}_summary.json", args.stage, args.seed)
    print(f"trained {state.step} steps -> {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    profile = _resolve_profile(args.profile)
    if args.print_config:
        print(dump_profile(profile), end="")
        return EXIT_OK
    state = curriculum.load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    ecfg = profile.eval
    if args.runs is not None:
        ecfg.n_runs = args.runs
    epsilon = ecfg.epsilon if args.epsilon is None else args.epsilon
    policy = bench.QPolicy(
        params=state.params, profile=profile, epsilon=epsilon,
        forced_push=ecfg.forced_push,
        grasp_only=(args.policy == "grasping-only"),
    )

    records = []
    if args.arrangement == "challenge":
        if args.cases == "all":
            case_ids = list(range(1, bench.N_CHALLENGE_CASES + 1))
        else:
            case_ids = [int(c) for c in args.cases.split(",")]
        for cid in case_ids:
            scene, goal_id = bench.challenge_case(cid)
            for run in range(ecfg.n_runs):
                rng = np.random.default_rng(
                    np.random.SeedSequence((args.seed, 2, cid, run)))
                dump = str(out / "images" / f"challenge{cid:02d}_run{run:02d}") \
                    if args.dump_images else None
                records.append(bench.run_episode(
                    policy, scene, args.mode, goal_id,
                    ecfg.max_consecutive_failures, ecfg.motion_cap, rng,
                    arrangement=f"challenge-{cid:02d}",
                    world_cfg=profile.world, dump_dir=dump))
    else:
        for run in range(ecfg.n_runs):
            spawn_rng = np.random.default_rng(
                np.random.SeedSequence((args.seed, 2, run)))
            scene, goal_id = bench.gen_random_arrangement(
                args.objects, spawn_rng, args.mode, profile,
                cluster_radius=args.cluster_radius)
            ep_rng = np.random.default_rng(
                np.random.SeedSequence((args.seed, 2, run, 1)))
            dump = str(out / "images" / f"random_run{run:02d}") \
                if args.dump_images else None
            records.append(bench.run_episode(
                policy, scene, args.mode, goal_id,
                ecfg.max_consecutive_failures, ecfg.motion_cap, ep_rng,
                arrangement=f"random-{args.objects}",
                world_cfg=profile.world, dump_dir=dump))

    metrics = bench.compute_metrics(records)
    bench.write_results(str(out / "results.jsonl"), records, metrics)
    print(json.dumps(metrics.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    profile = _resolve_profile(args.profile)
    out = _out_dir(args)
    scene = world.scene_from_text(
        pathlib.Path(args.scene).read_text(encoding="utf-8"))
    hmap, seg = percept.render(scene, profile.percept.resolution)
    percept.write_pgm(hmap.height, str(out / "height.pgm"))
    percept.write_pgm(seg.ids.astype(np.float64), str(out / "seg.pgm"))
    percept.write_pgm(percept.object_mask(seg).astype(np.float64),
                      str(out / "object_mask.pgm"), scale=1.0)
    goals = [o.id for o in scene.objects if o.is_goal_candidate]
    if goals:
        goal = percept.goal_mask(seg, goals[0])
        percept.write_pgm(goal.astype(np.float64), str(out / "goal_mask.pgm"),
                          scale=1.0)
        border = percept.border_mask(goal, profile.percept.border_radius)
        percept.write_pgm(border.astype(np.float64), str(out / "border_mask.pgm"),
                          scale=1.0)
    if args.checkpoint:
        state = curriculum.load_checkpoint(args.checkpoint)
        qmaps = agent_mod.forward_all_rotations(
            state.params, percept.net_input(hmap))
        lo = min(qmaps.grasp.min(), qmaps.push.min())
        hi = max(qmaps.grasp.max(), qmaps.push.max())
        span = (hi - lo) if hi > lo else 1.0
        for k in range(percept.N_ROTATIONS):
            percept.write_pgm((qmaps.grasp[k] - lo) / span,
                              str(out / f"q_grasp_k{k:02d}.pgm"), scale=1.0)
            percept.write_pgm((qmaps.push[k] - lo) / span,
                              str(out / f"q_push_k{k:02d}.pgm"), scale=1.0)
        (out / "qmaps.scale").write_text(
            f"value_at_0 = {float(lo)!r}\nvalue_at_255 = {float(hi)!r}\n",
            encoding="utf-8")
    print(f"rendered {len(scene.objects)} objects -> {out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    profile = _resolve_profile(args.profile)
    records = agent_mod.parse_log(args.log)
    scene = None
    if args.scene:
        scene = world.scene_from_text(
            pathlib.Path(args.scene).read_text(encoding="utf-8"))
    verified = 0
    for rec in records:
        if "respawn" in rec:
            spawned = world.scene_from_text(rec["respawn"]["scene"])
            if scene is not None and verified == 0:
                if world.scene_hash(scene) != world.scene_hash(spawned):
                    print("initial scene does not match the log", file=sys.stderr)
                    return EXIT_CONFIG
            scene = spawned
            continue
        if scene is None:
            print("log contains actions before any scene", file=sys.stderr)
            return EXIT_CONFIG
        action = agent_mod.ActionSpec.from_json(rec["action"])
        x, y, _z, theta = action.world
        if action.primitive == "grasp":
            outcome = world.apply_grasp(scene, (x, y), theta, profile.world)
        else:
            outcome = world.apply_push(scene, (x, y), theta,
                                       profile.world.push_length, profile.world)
        got = world.scene_hash(outcome.scene_after)
        if got != rec["scene_hash_after"]:
            print(f"divergence at step {rec['step']}: "
                  f"expected {rec['scene_hash_after']}, got {got}")
            return EXIT_DIVERGENCE
        scene = outcome.scene_after
        verified += 1
    print(f"replay ok: {verified} actions verified")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        state = curriculum.load_checkpoint(args.checkpoint)
        arch = state.params.arch
        info = {
            "stage": state.stage,
            "step": state.step,
            "parameters": qfunc.count_params(arch),
            "encoder_channels": list(arch.encoder_channels),
            "decoder_channels": list(arch.decoder_channels),
            "replay_size": len(state.buffer),
            "goal_id": state.goal_id,
            "scene_objects": len(state.scene.objects) if state.scene else 0,
        }
        print(json.dumps(info, sort_keys=True, indent=2))
    if args.log:
        records = [r for r in agent_mod.parse_log(args.log) if "action" in r]
        grasps = [r for r in records if r["action"]["primitive"] == "grasp"]
        info = {
            "actions": len(records),
            "grasps": len(grasps),
            "grasp_successes": sum(1 for r in grasps if r["success"]),
            "pushes": len(records) - len(grasps),
            "total_reward": round(sum(r["reward"] for r in records), 6),
        }
        print(json.dumps(info, sort_keys=True, indent=2))
    if not args.checkpoint and not args.log:
        print("nothing to inspect; pass --checkpoint and/or --log",
              file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pushgrasp",
        description="Push-grasp synergy lab: train, evaluate, and inspect "
                    "pixel-wise Q policies on a deterministic 2D tabletop.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--profile", default=None, help="profile file or built-in name")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=None, help="override stage steps")
    t.add_argument("--resume", default=None, help="resume from a checkpoint")
    t.add_argument("--from-stage1", default=None,
                   help="stage-1 checkpoint to initialise stage 2 from")
    t.add_argument("--no-pretrain", action="store_true",
                   help="stage 2 from scratch (single-stage ablation)")
    t.add_argument("--stop-success", type=float, default=None,
                   help="stop once trailing grasp success reaches this rate")
    t.add_argument("--no-replay-in-checkpoint", action="store_true")
    t.add_argument("--out", default=None)
    t.add_argument("--print-config", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--profile", default=None)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--arrangement", choices=("random", "challenge"),
                   default="random")
    e.add_argument("--cases", default="all", help="challenge case ids, e.g. 1,3,7")
    e.add_argument("--runs", type=int, default=None)
    e.add_argument("--mode", choices=("agnostic", "oriented"), default="oriented")
    e.add_argument("--objects", type=int, default=30)
    e.add_argument("--cluster-radius", type=float, default=0.0)
    e.add_argument("--policy", choices=("full", "grasping-only"), default="full")
    e.add_argument("--epsilon", type=float, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--dump-images", action="store_true",
                   help="write per-step heightmap and Q-map P5 images")
    e.add_argument("--out", default=None)
    e.add_argument("--print-config", action="store_true")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render", help="export maps as P5 images")
    r.add_argument("--profile", default=None)
    r.add_argument("--scene", required=True)
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_render)

    rp = sub.add_parser("replay", help="re-execute a transition log")
    rp.add_argument("--profile", default=None)
    rp.add_argument("--log", required=True)
    rp.add_argument("--scene", default=None,
                    help="initial scene to check against the log")
    rp.set_defaults(fn=cmd_replay)

    i = sub.add_parser("inspect", help="describe checkpoints and logs")
    i.add_argument("--checkpoint", default=None)
    i.add_argument("--log", default=None)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (curriculum.CheckpointError, qfunc.CheckpointError,
            world.SceneFormatError, bench.BenchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
