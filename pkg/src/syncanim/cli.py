"""Command-line entry point: synth | train | infer | eval | bench.

Exit codes: 0 success, 2 validation/configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import SCHEMA, format_config, resolve_config
from .errors import ConfigInvalid, MissingFile, SyncAnimError


def _add_key_flag(parser: argparse.ArgumentParser, key: str, **kwargs) -> None:
    spec = SCHEMA[key]
    flag = "--" + key.replace("_", "-")
    if spec.type is bool:
        parser.add_argument(flag, dest=key, default=None, metavar="BOOL", help=spec.help, **kwargs)
    else:
        parser.add_argument(flag, dest=key, default=None, help=spec.help, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syncanim",
        description="Audio-driven avatar pipeline: synthetic scenes, staged training, "
                    "one-shot/zero-shot inference, evaluation, benchmarking.",
    )
    sub = parser.add_subparsers(dest="command")

    common = {"synth": ["seed", "out", "n_train", "n_eval", "fps", "resolution",
                        "blink_period", "audio_coupling"],
              "train": ["seed", "dataset", "out", "stage", "profile",
                        "stage1_steps", "stage2_steps", "stage3_steps",
                        "rays_per_iter", "n_samples", "lr_field", "lr_audio",
                        "batch_frames", "lambda_lip", "single_thread",
                        "unfreeze_pose_stage2"],
              "infer": ["seed", "ckpt", "audio", "dataset", "split", "mode", "out", "render",
                        "single_thread"],
              "eval": ["pred", "dataset", "out", "json"],
              "bench": ["seed", "ckpt", "n_frames", "resolution", "out"]}
    helps = {"synth": "generate a synthetic ground-truth scene",
             "train": "run the staged training schedule",
             "infer": "drive the avatar from audio features",
             "eval": "compare inference outputs against ground truth",
             "bench": "measure end-to-end inference throughput"}
    for cmd, keys in common.items():
        p = sub.add_parser(cmd, help=helps[cmd])
        for key in keys:
            _add_key_flag(p, key)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--print-config", action="store_true",
                       help="print the fully resolved configuration and exit")
    return parser


def _require(cfg: dict, key: str, why: str) -> str:
    if not cfg.get(key):
        raise ConfigInvalid(f"--{key.replace('_', '-')} is required {why}")
    return cfg[key]


def run_synth(cfg: dict) -> int:
    from .dataset import SyntheticSceneConfig, generate_synthetic_dataset, save_dataset

    out = _require(cfg, "out", "to store the dataset bundle")
    scene = SyntheticSceneConfig(
        n_train=cfg["n_train"], n_eval=cfg["n_eval"], fps=cfg["fps"],
        resolution=cfg["resolution"], blink_period=cfg["blink_period"],
        audio_coupling=cfg["audio_coupling"], seed=cfg["seed"],
    )
    scene.validate()
    bundle = generate_synthetic_dataset(scene)
    save_dataset(bundle, out)
    print(f"wrote {bundle.n_frames} frames ({bundle.n_train} train) to {out}")
    return 0


def _train_config(cfg: dict):
    from .trainer import desk_profile, paper_profile
    from dataclasses import replace

    tcfg = paper_profile(cfg["seed"]) if cfg["profile"] == "paper" else desk_profile(cfg["seed"])
    steps = list(tcfg.stage_steps)
    for i, key in enumerate(("stage1_steps", "stage2_steps", "stage3_steps")):
        if cfg[key] >= 0:
            steps[i] = cfg[key]
    tcfg = replace(
        tcfg, stage_steps=tuple(steps),
        rays_per_iter=cfg["rays_per_iter"] if cfg["rays_per_iter"] > 0 else tcfg.rays_per_iter,
        n_samples=cfg["n_samples"] if cfg["n_samples"] > 0 else tcfg.n_samples,
        lr_field=cfg["lr_field"], lr_audio_modules=cfg["lr_audio"],
        batch_frames=cfg["batch_frames"], lambda_lip=cfg["lambda_lip"],
        single_thread=cfg["single_thread"], unfreeze_pose_stage2=cfg["unfreeze_pose_stage2"],
    )
    return tcfg


def run_train(cfg: dict) -> int:
    from .dataset import load_dataset
    from .trainer import (load_checkpoint, render_meta_from_bundle, run_stage,
                          save_checkpoint, setup_training)

    dataset_dir = _require(cfg, "dataset", "to train on")
    out = Path(_require(cfg, "out", "to store checkpoints"))
    bundle = load_dataset(dataset_dir)
    tcfg = _train_config(cfg)
    stage = cfg["stage"]
    if stage in ("all", "1"):
        state = setup_training(bundle, tcfg)
    else:
        ts = out / "trainstate.ckpt"
        if not ts.exists():
            raise ConfigInvalid(f"stage {stage} needs an earlier checkpoint; {ts} is missing")
        state = load_checkpoint(out, bundle)
        needed = int(stage) - 1
        if needed not in state.stages_done:
            raise ConfigInvalid(
                f"stage {stage} requires a completed stage-{needed} checkpoint in {out}"
            )
    stages = (1, 2, 3) if stage == "all" else (int(stage),)
    for s in stages:
        run_stage(bundle, state, s)
        print(f"stage {s} done at step {state.step}")
    save_checkpoint(state, out, render_meta_from_bundle(bundle, tcfg))
    print(f"checkpoints written to {out}")
    return 0


def run_infer(cfg: dict) -> int:
    import torch

    from .audiofeat import MelFeatureProvider
    from .pipeline import eval_feature_track, eval_references, load_models, run_inference

    if cfg["single_thread"]:
        torch.set_num_threads(1)
    models = load_models(_require(cfg, "ckpt", "to load trained models"))
    out = _require(cfg, "out", "to store inference outputs")
    mode = cfg["mode"]
    tau_offset = 0
    pose_ref = exp_ref = None
    if cfg["audio"]:
        provider = MelFeatureProvider(fps=float(models.render_meta["fps"]),
                                      n_mels=models.a2p.cfg.feat_dim)
        features = provider.from_wav(cfg["audio"])
        if mode == "one-shot":
            raise ConfigInvalid(
                "one-shot inference needs --dataset for the reference frame; "
                "use --mode zero-shot for audio-only input"
            )
    else:
        from .dataset import load_dataset
        from .audiofeat import FeatureTrack

        bundle = load_dataset(_require(cfg, "dataset", "when --audio is not given"))
        if cfg["split"] == "eval":
            features = eval_feature_track(bundle)
            tau_offset = bundle.n_train
        else:
            features = FeatureTrack(frames=bundle.features.frames[: bundle.n_train].copy(),
                                    fps=bundle.features.fps)
        pose_ref, exp_ref = eval_references(bundle, cfg["split"])
    result = run_inference(
        models, features, mode, cfg["seed"], tau_offset=tau_offset,
        reference_pose_offset=pose_ref, reference_exp_offset=exp_ref,
        render=cfg["render"], out_dir=out,
    )
    n = result.pose_offsets.shape[0]
    print(f"{mode} inference over {n} frames -> {out}")
    return 0


def run_eval(cfg: dict) -> int:
    from .dataset import load_dataset
    from .report import evaluate_outputs

    bundle = load_dataset(_require(cfg, "dataset", "for ground truth"))
    pred = _require(cfg, "pred", "pointing at the inference outputs")
    out = _require(cfg, "out", "to store the report")
    result = evaluate_outputs(pred, bundle, out, write_json=cfg["json"])
    for key in sorted(result):
        print(f"{key}: {result[key]}")
    return 0


def run_bench(cfg: dict) -> int:
    from .pipeline import load_models, throughput_bench

    if cfg["ckpt"]:
        models = load_models(cfg["ckpt"])
    else:
        models = _fresh_models(cfg["resolution"], cfg["seed"])
    report = throughput_bench(models, cfg["n_frames"], resolution=cfg["resolution"],
                              seed=cfg["seed"])
    print(f"benchmark: {report['n_frames']} frames at {report['resolution']}px")
    for stage, secs in report["stage_s"].items():
        print(f"  {stage:>10}: {secs:.3f} s")
    print(f"  {'total':>10}: {report['total_s']:.3f} s  ({report['fps']:.2f} FPS)")
    if cfg["out"]:
        Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
        (Path(cfg["out"]) / "bench.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    return 0


def _fresh_models(resolution: int, seed: int):
    """Random-weight models over a throwaway scene, for checkpoint-free benching."""
    from .dataset import SyntheticSceneConfig, generate_synthetic_dataset
    from .pipeline import InferenceModels
    from .trainer import desk_profile, render_meta_from_bundle, setup_training

    scene = SyntheticSceneConfig(n_train=8, n_eval=2, resolution=resolution, seed=seed)
    bundle = generate_synthetic_dataset(scene)
    state = setup_training(bundle, desk_profile(seed))
    meta = render_meta_from_bundle(bundle, state.cfg)
    return InferenceModels(state.a2p, state.a2e, state.body, state.head, meta)


_RUNNERS = {"synth": run_synth, "train": run_train, "infer": run_infer,
            "eval": run_eval, "bench": run_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    cli_values = {k: v for k, v in vars(args).items()
                  if k in SCHEMA and v is not None}
    try:
        cfg = resolve_config(cli_values, config_file=args.config)
        if args.print_config:
            print(format_config(cfg))
            return 0
        return _RUNNERS[args.command](cfg)
    except (ConfigInvalid, MissingFile) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SyncAnimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
