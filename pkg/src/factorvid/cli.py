"""Command-line entry point wiring all modules.

Subcommands: generate, train, train-lstm, predict, eval. One YAML config
file drives every subcommand; flags override file values. Every run
directory receives a manifest (config snapshot, seeds, code version) so its
artifacts are reproducible from the manifest alone.

Exit codes: 0 success, 2 configuration error, 3 I/O error (missing or
corrupt files), 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import (BASELINES, DEVICE_ENV_VAR, load_train_config,
                     save_train_config, train_config_to_dict)
from .errors import (CheckpointError, ConfigError, DatasetIOError,
                     NonFiniteLossError)
from .evalkit import (collect_mig_samples, evaluate_rollout, save_image,
                      swap_grid, swap_grid_centroid_errors, tile_grid)
from .miest import mig_score, write_mig_csv
from .synthvid import generate_dataset, read_dataset, write_dataset
from . import trainer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def code_version() -> str:
    """Content hash over the package sources, recorded in manifests."""
    digest = hashlib.sha1()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_manifest(run_dir: Path, command: str, cfg, inputs: dict,
                   outputs: list[str]) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "command": command,
        "argv": sys.argv[1:],
        "code_version": code_version(),
        "config": train_config_to_dict(cfg),
        "seeds": {"train": cfg.seed, "dataset": cfg.dataset.seed},
        "inputs": inputs,
        "outputs": outputs,
    }
    path = run_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _overrides(args, *, dataset_seed: bool = False) -> dict:
    over = {
        "dataset": {"context": getattr(args, "context", None),
                    "horizon": getattr(args, "horizon", None)},
        "train": {"seed": getattr(args, "seed", None),
                  "baseline": getattr(args, "baseline", None)},
    }
    if dataset_seed:
        over["dataset"]["seed"] = getattr(args, "seed", None)
    return over


def cmd_generate(args) -> int:
    cfg = load_train_config(args.config, _overrides(args, dataset_seed=True))
    out = Path(args.out)
    dataset = generate_dataset(cfg.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out)
    write_manifest(out.parent, "generate", cfg,
                   inputs={}, outputs=[out.name])
    logger.info("wrote %d clips to %s", len(dataset), out)
    return EXIT_OK


def _load_or_generate_dataset(args, cfg):
    if getattr(args, "dataset", None):
        dataset = read_dataset(args.dataset)
        return dataset, str(args.dataset)
    logger.info("no --dataset given; generating from config")
    return generate_dataset(cfg.dataset), "<generated>"


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, _overrides(args))
    run_dir = Path(args.out)
    dataset, dataset_src = _load_or_generate_dataset(args, cfg)
    cfg = dataclasses.replace(cfg, dataset=dataset.config)
    cfg.validate()
    run_dir.mkdir(parents=True, exist_ok=True)
    save_train_config(cfg, run_dir / "config.yaml")
    trainer.train_main(dataset, cfg, out_dir=run_dir)
    write_manifest(run_dir, "train", cfg,
                   inputs={"dataset": dataset_src},
                   outputs=["checkpoint.pt", "train_log.csv", "config.yaml"])
    return EXIT_OK


def cmd_train_lstm(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config
    if args.config:
        cfg = load_train_config(args.config, _overrides(args))
    run_dir = Path(args.out)
    dataset, dataset_src = _load_or_generate_dataset(args, cfg)
    trainer.train_lstm(dataset, ckpt, cfg, out_dir=run_dir)
    write_manifest(run_dir, "train-lstm", cfg,
                   inputs={"dataset": dataset_src,
                           "checkpoint": str(args.checkpoint)},
                   outputs=["checkpoint.pt", "train_lstm_log.csv"])
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config
    context = args.context if args.context is not None else cfg.dataset.context
    horizon = args.horizon if args.horizon is not None else cfg.dataset.horizon
    if context != cfg.dataset.context:
        raise ConfigError(
            f"--context {context} does not match the trained context "
            f"{cfg.dataset.context}"
        )
    dataset = read_dataset(args.dataset)
    if dataset.config.clip_len < context:
        raise ConfigError("dataset clips provide fewer frames than the context")
    n = min(args.num_clips, len(dataset))
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)

    models = ckpt.build_models(cfg.resolved_device())
    import torch

    frames_u8 = torch.from_numpy(dataset.frames[:n]).movedim(-1, 2)
    clips = frames_u8.float() / 255.0
    predicted = trainer.predict_frames(models, clips[:, :context],
                                       context, horizon)
    from .nets import tensor_to_frames

    preds = tensor_to_frames(predicted)
    np.savez_compressed(
        run_dir / "predictions.npz",
        predictions=preds,
        context=dataset.frames[:n, :context],
        ground_truth=dataset.frames[:n, context:context + horizon]
        if dataset.config.clip_len >= context + horizon else np.empty(0),
    )
    for i in range(min(4, n)):
        strip = np.concatenate(list(preds[i]), axis=1)
        save_image(strip, run_dir / f"prediction_{i:03d}.png")
    write_manifest(run_dir, "predict", cfg,
                   inputs={"dataset": str(args.dataset),
                           "checkpoint": str(args.checkpoint)},
                   outputs=["predictions.npz"])
    logger.info("wrote %d predicted clips of %d frames", n, horizon)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config
    dataset = read_dataset(args.dataset)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    device = cfg.resolved_device()

    outputs = ["report.csv", "curves.svg"]
    report = evaluate_rollout(ckpt, dataset, num_clips=args.num_clips,
                              device=device, out_dir=run_dir)
    logger.info("rollout over %d clips: mean PSNR %.2f dB, mean SSIM %.4f",
                report.num_clips, report.psnr_mean.mean(),
                report.ssim_mean.mean())

    rng = np.random.default_rng(cfg.seed)
    n_rows = min(6, len(dataset))
    content_rows = np.stack([dataset.clip_frames(i)[0] for i in range(n_rows)])
    pose_src = dataset.clip_frames(int(rng.integers(len(dataset))))
    cells = swap_grid(ckpt, content_rows, pose_src, device=device)
    save_image(tile_grid(cells), run_dir / "swap_grid.png")
    errors = swap_grid_centroid_errors(cells, pose_src)
    np.savetxt(run_dir / "swap_errors.csv", errors, delimiter=",", fmt="%.3f")
    outputs += ["swap_grid.png", "swap_errors.csv"]

    if args.mig:
        factors, reps = collect_mig_samples(ckpt, dataset, device=device)
        mig = mig_score(factors, reps)
        write_mig_csv({cfg.baseline: mig}, run_dir / "mig.csv")
        outputs.append("mig.csv")
        logger.info("MIG %.4f", mig.mig)

    write_manifest(run_dir, "eval", cfg,
                   inputs={"dataset": str(args.dataset),
                           "checkpoint": str(args.checkpoint)},
                   outputs=outputs)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorvid",
        description="Disentangled content/pose video prediction toolkit.",
        epilog=f"Set {DEVICE_ENV_VAR}=cuda|cpu to override the configured "
               f"device. Exit codes: 0 ok, 2 config error, 3 I/O error, "
               f"4 numeric failure.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, dataset=False, out=True):
        p.add_argument("--config", type=Path, default=None,
                       help="YAML config file; flags override its values")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if out:
            p.add_argument("--out", type=Path, required=True,
                           help="output file or run directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)
        if dataset:
            p.add_argument("--dataset", type=Path, default=None,
                           help="dataset container file")

    p = sub.add_parser("generate", help="generate a moving-shapes dataset")
    common(p)
    p.add_argument("--context", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="phase 1: encoders/decoder vs critic")
    common(p, dataset=True)
    p.add_argument("--baseline", choices=BASELINES, default=None,
                   help="pose objective: mipae (MI bound), drnet "
                        "(adversarial), none (ablation)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-lstm", help="phase 2: recurrent pose predictor")
    common(p, checkpoint=True, dataset=True)
    p.set_defaults(func=cmd_train_lstm)

    p = sub.add_parser("predict", help="roll out future frames")
    common(p, checkpoint=True, dataset=True)
    p.add_argument("--context", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--num-clips", type=int, default=16)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="rollout metrics, swap grids, optional MIG")
    common(p, checkpoint=True, dataset=True)
    p.add_argument("--mig", action="store_true",
                   help="also estimate the mutual-information gap")
    p.add_argument("--num-clips", type=int, default=256)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DatasetIOError, CheckpointError, FileNotFoundError, OSError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except NonFiniteLossError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
