"""Command-line surface: ``sprite-story <command> [options]``.

Every command writes ``run_manifest.json`` next to its outputs. Errors are printed
to stderr and mapped to exit codes: 2 for validation errors, 3 for numeric failures,
1 for anything else and 130 when interrupted.
"""
import os
import sys
import json
import argparse
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import yaml

from . import __version__
from .checkpoint import checkpoint_hash
from .config import EvalConfig, PretrainConfig, TrainConfig
from .errors import SpriteStoryError, ValidationError
from .evaluation import cmd_eval, cmd_generate, cmd_inspect_attn
from .pretraining import BasePretrainer, EncoderPretrainer
from .synthdata import (
    HELDOUT_IDENTITIES,
    TRAIN_IDENTITIES,
    Scene,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_dataset,
    save_dataset,
)
from .trainer import TrainingManager
from .workspace import WorkspaceManager

RUN_MANIFEST_NAME = "run_manifest.json"


def write_run_manifest(out_dir: str, command: str, args: argparse.Namespace, config_hash: Optional[str] = None,
                       checkpoint: Optional[str] = None, seeds: Optional[Dict[str, int]] = None) -> str:
    """Record what produced the files in ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    arguments = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    manifest = {
        "command": command,
        "arguments": arguments,
        "config_hash": config_hash,
        "checkpoint": checkpoint,
        "checkpoint_hash": checkpoint_hash(checkpoint) if checkpoint else None,
        "seeds": seeds or {},
        "version": __version__,
    }
    path = os.path.join(out_dir, RUN_MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as manifest_file:
        json.dump(manifest, manifest_file, indent=2, sort_keys=True, default=str)
    return path


def parse_ids(text: Optional[str]) -> Optional[tuple]:
    if text is None:
        return None
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ValidationError(f"Expected comma-separated integers, got '{text}'") from e


def resolve_scene(ref: str, seed: int = 0, clothing: Optional[str] = None, pose_seed: int = 0,
                  background: int = 0, canvas_size: int = 64) -> Scene:
    """A scene from ``DATASET_DIR@INDEX`` or from comma-separated identity ids."""
    if "@" in ref:
        path, index = ref.rsplit("@", 1)
        dataset = load_dataset(path)
        try:
            return dataset[int(index)]
        except (ValueError, IndexError) as e:
            raise ValidationError(f"No scene '{index}' in dataset {path} of {len(dataset)} scenes") from e
    identities = parse_ids(ref)
    spec = SceneSpec(
        num_characters=len(identities),
        identity_ids=identities,
        canvas_size=canvas_size,
        pose_seed=pose_seed,
        background_id=background,
        clothing_ids=parse_ids(clothing),
    )
    return generate_scene(spec, seed)


def read_prompts(prompts: Sequence[str], prompts_file: Optional[str]) -> List[str]:
    """Prompts from the command line, then from a YAML list or a one-prompt-per-line file."""
    result = list(prompts or [])
    if prompts_file:
        with open(prompts_file, "r", encoding="utf-8") as file:
            text = file.read()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError:
            loaded = None
        if isinstance(loaded, list):
            result += [str(p) for p in loaded]
        else:
            result += [line.strip() for line in text.splitlines() if line.strip()]
    return result


def overridden(config, **values):
    """Copy of ``config`` with every non-``None`` value replaced, validated."""
    config = replace(config, **{k: v for k, v in values.items() if v is not None})
    config.validate()
    return config


def cmd_synth(args: argparse.Namespace) -> int:
    workspace = WorkspaceManager(args.workspace, component="SynthData")
    out_dir = args.out or workspace.path_for("data")
    pool = HELDOUT_IDENTITIES if args.heldout else TRAIN_IDENTITIES
    dataset = generate_dataset(args.count, mix=args.mix, seed=args.seed, identity_pool=pool,
                               canvas_size=args.canvas_size)
    save_dataset(dataset, out_dir)
    singles = sum(1 for spec in dataset.specs() if spec.num_characters == 1)
    workspace.logger.info(f"Wrote {len(dataset)} scenes ({singles} single-character) to {out_dir}")
    write_run_manifest(out_dir, "synth", args, seeds={"dataset": args.seed})
    return 0


def cmd_pretrain_encoders(args: argparse.Namespace) -> int:
    workspace = WorkspaceManager(args.workspace)
    config = PretrainConfig.load(args.config, "pretrain") if args.config else workspace.load_pretrain_config()
    config = overridden(config, seed=args.seed, encoder_steps=args.steps)
    manager = EncoderPretrainer(args.workspace, config)
    out_dir, _ = manager.run(args.out, device=args.device, progress=not args.quiet)
    write_run_manifest(out_dir, "pretrain-encoders", args, config.config_hash(), seeds={"seed": config.seed})
    return 0


def cmd_pretrain_base(args: argparse.Namespace) -> int:
    workspace = WorkspaceManager(args.workspace)
    config = PretrainConfig.load(args.config, "pretrain") if args.config else workspace.load_pretrain_config()
    config = overridden(config, seed=args.seed, vae_steps=args.vae_steps, base_steps=args.base_steps)
    manager = BasePretrainer(args.workspace, config)
    if args.vae_only:
        out_dir, _ = manager.run_vae(args.out, device=args.device, progress=not args.quiet)
        write_run_manifest(out_dir, "pretrain-base", args, config.config_hash(), seeds={"seed": config.seed})
        return 0
    encoders = args.encoders or manager.path_for("encoders")
    out_dir, _ = manager.run(encoders, args.out, device=args.device, progress=not args.quiet)
    write_run_manifest(out_dir, "pretrain-base", args, config.config_hash(), checkpoint=encoders,
                       seeds={"seed": config.seed})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    workspace = WorkspaceManager(args.workspace)
    config = TrainConfig.load(args.config, "train") if args.config else workspace.load_train_config()
    config = overridden(
        config,
        total_steps=args.total_steps,
        batch_size=args.batch_size,
        lr_phase1=args.lr_phase1,
        lr_phase2=args.lr_phase2,
        phase_boundary=args.phase_boundary,
        lambda_attn=args.lambda_attn,
        caption_drop_prob=args.caption_drop_prob,
        character_drop_prob=args.character_drop_prob,
        seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
        gamma=args.gamma,
        reference_pose_perturbation=False if args.no_pose_perturbation else None,
    )
    manager = TrainingManager(args.workspace, config)
    dataset = load_dataset(args.dataset) if args.dataset else None
    out_dir = args.out or manager.path_for("checkpoints")
    base = args.base or manager.path_for("base")
    manager.run(dataset, base, out_dir, resume=args.resume, device=args.device, progress=not args.quiet)
    write_run_manifest(out_dir, "train", args, config.config_hash(), checkpoint=args.resume or base,
                       seeds={"seed": config.seed})
    return 0


def _eval_config(args: argparse.Namespace, **values) -> EvalConfig:
    workspace = WorkspaceManager(args.workspace)
    config = EvalConfig.load(args.config, "eval") if args.config else workspace.load_eval_config()
    return overridden(config, **values)


def cmd_generate_images(args: argparse.Namespace) -> int:
    out_dir = args.out or WorkspaceManager(args.workspace).path_for("samples")
    reference = resolve_scene(args.ref, args.ref_seed, args.clothing, args.pose_seed, args.background,
                              args.canvas_size)
    other = None
    if args.interpolate_with:
        other = resolve_scene(args.interpolate_with, args.ref_seed, None, args.pose_seed, args.background,
                              args.canvas_size)
    prompts = read_prompts(args.prompt, args.prompts_file)
    options: Dict[str, Any] = {
        "zero_character": args.zero_character,
        "guidance": args.guidance,
        "steps": args.steps,
        "seed": args.seed,
        "gamma": args.gamma,
        "interpolate_with": other,
        "alpha": args.alpha,
    }
    cmd_generate(args.checkpoint, reference, prompts, out_dir, pose_file=args.pose, workspace=args.workspace,
                 device=args.device, **options)
    write_run_manifest(out_dir, "generate", args, checkpoint=args.checkpoint,
                       seeds={"seed": args.seed, "ref_seed": args.ref_seed})
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _eval_config(
        args, seed=args.seed, steps=args.steps, guidance=args.guidance,
        num_references=args.num_references, prompts_per_ref=args.prompts_per_ref,
        single_character_only=True if args.single_character_only else (False if args.mixed else None),
    )
    out_path = args.out or os.path.join(WorkspaceManager(args.workspace).path_for("reports"), "eval.json")
    eval_set = load_dataset(args.eval_set) if args.eval_set else None
    cmd_eval(
        args.checkpoint, out_path, eval_set, workspace=args.workspace, eval_config=config, device=args.device,
        self_check=args.self_check, zero_character=args.zero_character, use_pose=not args.no_pose,
        baseline=not args.no_baseline,
    )
    write_run_manifest(os.path.dirname(os.path.abspath(out_path)), "eval", args, config.config_hash(),
                       checkpoint=args.checkpoint, seeds={"seed": config.seed})
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    config = _eval_config(args, record_timestep=args.timestep)
    out_dir = args.out or os.path.join(WorkspaceManager(args.workspace).path_for("reports"), "attention")
    scene = resolve_scene(args.scene, args.ref_seed, args.clothing, args.pose_seed, args.background,
                          args.canvas_size)
    cmd_inspect_attn(args.checkpoint, scene, out_dir, workspace=args.workspace, eval_config=config,
                     device=args.device, seed=args.seed)
    write_run_manifest(out_dir, "inspect-attn", args, config.config_hash(), checkpoint=args.checkpoint,
                       seeds={"seed": config.seed if args.seed is None else args.seed})
    return 0


def _add_common(parser: argparse.ArgumentParser, config: bool = True) -> None:
    parser.add_argument("--workspace", default=None, help="Workspace directory. Default: current directory")
    parser.add_argument("--device", default=None, help="Torch device, for example cpu or cuda")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    if config:
        parser.add_argument("--config", default=None, help="YAML/JSON file with model/train/pretrain/eval sections")


def _add_scene_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ref-seed", type=int, default=0, help="Scene seed for identity-id references. Default: 0")
    parser.add_argument("--clothing", default=None, help="Comma-separated clothing ids for identity-id references")
    parser.add_argument("--pose-seed", type=int, default=0, help="Pose seed for identity-id references. Default: 0")
    parser.add_argument("--background", type=int, default=0, help="Background id for identity-id references")
    parser.add_argument("--canvas-size", type=int, default=64,
                        help="Canvas size for identity-id references; must match the checkpoint. Default: 64")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sprite-story",
        description="Train and evaluate a character-consistent sprite story generator.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Render a synthetic scene dataset")
    synth.add_argument("--count", type=int, default=512, help="Number of scenes. Default: 512")
    synth.add_argument("--mix", type=float, default=0.6, help="Fraction of single-character scenes. Default: 0.6")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--canvas-size", type=int, default=64)
    synth.add_argument("--heldout", action="store_true", help="Draw identities from the held-out palette")
    synth.add_argument("--out", default=None, help="Dataset directory. Default: <workspace>/data")
    _add_common(synth, config=False)
    synth.set_defaults(handler=cmd_synth)

    encoders = commands.add_parser("pretrain-encoders", help="Pretrain and freeze the toy encoders")
    encoders.add_argument("--steps", type=int, default=None)
    encoders.add_argument("--seed", type=int, default=None)
    encoders.add_argument("--out", default=None, help="Checkpoint directory. Default: <workspace>/encoders")
    _add_common(encoders)
    encoders.set_defaults(handler=cmd_pretrain_encoders)

    base = commands.add_parser("pretrain-base", help="Pretrain the VAE and the text-only U-Net")
    base.add_argument("--encoders", default=None, help="Encoder checkpoint. Default: <workspace>/encoders")
    base.add_argument("--vae-steps", type=int, default=None)
    base.add_argument("--base-steps", type=int, default=None)
    base.add_argument("--seed", type=int, default=None)
    base.add_argument("--vae-only", action="store_true", help="Fit only the VAE and write a vae checkpoint")
    base.add_argument("--out", default=None, help="Checkpoint directory. Default: <workspace>/base")
    _add_common(base)
    base.set_defaults(handler=cmd_pretrain_base)

    train = commands.add_parser("train", help="Story training on top of a base checkpoint")
    train.add_argument("--dataset", default=None, help="Dataset directory. Default: <workspace>/data")
    train.add_argument("--base", default=None, help="Base checkpoint. Default: <workspace>/base")
    train.add_argument("--resume", default=None, help="Story checkpoint to resume from")
    train.add_argument("--out", default=None, help="Checkpoint directory. Default: <workspace>/checkpoints")
    train.add_argument("--total-steps", type=int, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--lr-phase1", type=float, default=None)
    train.add_argument("--lr-phase2", type=float, default=None)
    train.add_argument("--phase-boundary", type=int, default=None)
    train.add_argument("--lambda-attn", type=float, default=None)
    train.add_argument("--caption-drop-prob", type=float, default=None)
    train.add_argument("--character-drop-prob", type=float, default=None)
    train.add_argument("--checkpoint-interval", type=int, default=None)
    train.add_argument("--gamma", type=float, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--no-pose-perturbation", action="store_true",
                       help="Take references from the target scene itself")
    _add_common(train)
    train.set_defaults(handler=cmd_train)

    generate = commands.add_parser("generate", help="Generate one image per prompt for the same characters")
    generate.add_argument("checkpoint")
    generate.add_argument("--ref", required=True, help="DATASET_DIR@INDEX or comma-separated identity ids")
    generate.add_argument("--prompt", action="append", default=[], help="Prompt; repeat for a story")
    generate.add_argument("--prompts-file", default=None, help="YAML list or one prompt per line")
    generate.add_argument("--pose", default=None, help="Keypoints as .npy, .json or .yml")
    generate.add_argument("--zero-character", action="store_true", help="Zero the character embeddings")
    generate.add_argument("--interpolate-with", default=None, help="Second reference to blend with")
    generate.add_argument("--alpha", type=float, default=0.5, help="Blend weight of --interpolate-with")
    generate.add_argument("--guidance", type=float, default=None)
    generate.add_argument("--steps", type=int, default=None)
    generate.add_argument("--gamma", type=float, default=None)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--out", default=None, help="Output directory. Default: <workspace>/samples")
    _add_scene_args(generate)
    _add_common(generate, config=False)
    generate.set_defaults(handler=cmd_generate_images)

    evaluate = commands.add_parser("eval", help="Compute similarity and attention metrics")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("--eval-set", default=None, help="Held-out dataset directory. Default: generated")
    evaluate.add_argument("--prompts-per-ref", type=int, default=None)
    evaluate.add_argument("--num-references", type=int, default=None)
    evaluate.add_argument("--steps", type=int, default=None)
    evaluate.add_argument("--guidance", type=float, default=None)
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--single-character-only", action="store_true")
    evaluate.add_argument("--mixed", action="store_true", help="Include two-character references")
    evaluate.add_argument("--self-check", action="store_true", help="Score the references against themselves")
    evaluate.add_argument("--zero-character", action="store_true")
    evaluate.add_argument("--no-pose", action="store_true", help="Sample without the pose branch")
    evaluate.add_argument("--no-baseline", action="store_true", help="Skip the unconditioned baseline")
    evaluate.add_argument("--out", default=None, help="JSON report path. Default: <workspace>/reports/eval.json")
    _add_common(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)

    inspect = commands.add_parser("inspect-attn", help="Write attention region maps and leakage matrices")
    inspect.add_argument("checkpoint")
    inspect.add_argument("--scene", required=True, help="DATASET_DIR@INDEX or comma-separated identity ids")
    inspect.add_argument("--timestep", type=int, default=None)
    inspect.add_argument("--seed", type=int, default=None)
    inspect.add_argument("--out", default=None, help="Output directory. Default: <workspace>/reports/attention")
    _add_scene_args(inspect)
    _add_common(inspect)
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except KeyboardInterrupt:
        print("ERROR: interrupted", file=sys.stderr)
        return 130
    except SpriteStoryError as e:
        print("ERROR:", e, file=sys.stderr)
        return e.exit_code
    except Exception as e:
        print("ERROR:", e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
