"""Two-phase training orchestration.

Phase 1 alternates critic ascent steps with one descent step on the combined
autoencoder objective. Reconstruction decodes a cross-frame combination
(content code from frame t, pose code from frame t+k) half the time, which
is what forces content codes to be interchangeable across a clip. Phase 2
freezes everything from phase 1 and fits the recurrent pose predictor on
encoded pose tracks.

Every random choice flows from the config seed through dedicated generators,
so a fixed (dataset, config) pair reproduces loss traces exactly. The
training log CSV holds one row per step: step, recon, sim, mi, critic (for
the adversarial baseline the ``mi`` column carries the encoder confusion
loss and ``critic`` the discriminator objective).
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import TrainConfig
from .errors import CheckpointError, ConfigError, NonFiniteLossError
from .nets import ModelSet, frames_to_tensor, tensor_to_frames
from .objectives import (PairBatch, adversarial_pose_loss, critic_objective,
                         main_objective, mi_lower_bound, recon_loss,
                         sim_codes_loss)
from .synthvid import ShapeDataset

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "recon", "sim", "mi", "critic")
PHASE2_LOG_COLUMNS = ("step", "pose")
_VAL_CLIP_CAP = 32


def _dataset_tensor(dataset: ShapeDataset) -> torch.Tensor:
    """Whole dataset as a uint8 tensor (N, L, C, H, W); batches index it."""
    return torch.from_numpy(dataset.frames).movedim(-1, 2).contiguous()


def _split_indices(n: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    val_count = int(round(n * val_fraction))
    val_count = min(val_count, n - 2)
    if val_count <= 0:
        return np.arange(n), np.empty(0, dtype=np.int64)
    return np.arange(n - val_count), np.arange(n - val_count, n)


def _sample_times(rng: np.random.Generator, batch: int, clip_len: int,
                  max_offset: int) -> tuple[np.ndarray, np.ndarray]:
    ks = rng.integers(1, max_offset + 1, size=batch)
    ts = np.array([rng.integers(0, clip_len - k) for k in ks])
    return ts, ks


def _derangement(clip_idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permutation of batch positions such that no pair shares a clip."""
    batch = clip_idx.shape[0]
    for _ in range(20):
        perm = rng.permutation(batch)
        if not np.any(clip_idx[perm] == clip_idx):
            return perm
    for shift in range(1, batch):
        perm = np.roll(np.arange(batch), shift)
        if not np.any(clip_idx[perm] == clip_idx):
            return perm
    raise ConfigError("cannot build cross-clip pairs: batch holds a single clip")


def _build_pair_batch(zp_a, zp_b, clip_idx: np.ndarray, offsets: np.ndarray,
                      rng: np.random.Generator) -> PairBatch:
    perm = _derangement(clip_idx, rng)
    return PairBatch(
        joint_a=zp_a,
        joint_b=zp_b,
        marginal_a=zp_a,
        marginal_b=zp_b[perm],
        offsets=torch.from_numpy(offsets.astype(np.int64)),
        clip_index=torch.from_numpy(clip_idx.astype(np.int64)),
        marginal_index=torch.from_numpy(clip_idx[perm].astype(np.int64)),
    )


def _check_finite(values: dict, step: int, out_dir, dump_payload) -> None:
    bad = [name for name, v in values.items() if not np.isfinite(v)]
    if not bad:
        return
    dump_path = None
    if out_dir is not None:
        dump_path = Path(out_dir) / f"diagnostics_step{step}.pt"
        torch.save({"step": step, "losses": values, **dump_payload}, dump_path)
    raise NonFiniteLossError(
        f"non-finite loss {bad} at step {step}"
        + (f"; batch dumped to {dump_path}" if dump_path else ""),
        dump_path=dump_path,
    )


def _write_log(rows: list[dict], columns, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _validation_recon(models: ModelSet, frames_u8: torch.Tensor,
                      val_idx: np.ndarray, device) -> float:
    """Same-frame reconstruction MSE on a fixed validation probe."""
    if val_idx.size == 0:
        return float("nan")
    clip_len = frames_u8.shape[1]
    probe_t = sorted({0, clip_len // 2, clip_len - 1})
    models.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, min(val_idx.size, _VAL_CLIP_CAP), 8):
            idx = val_idx[start:start + 8]
            clips = frames_u8[idx][:, probe_t].to(device).float() / 255.0
            flat = clips.reshape(-1, *clips.shape[2:])
            if models.config.use_skip_connections:
                z_c, feats = models.content_encoder(flat, return_features=True)
                decoded = models.decoder(z_c, models.pose_encoder(flat), feats)
            else:
                decoded = models.decoder(models.content_encoder(flat),
                                         models.pose_encoder(flat))
            total += torch.sum((decoded - flat) ** 2).item()
            count += flat.numel()
    models.train()
    return total / count


def train_main(dataset: ShapeDataset, cfg: TrainConfig,
               out_dir=None) -> Checkpoint:
    """Phase 1: fit encoders/decoder against the critic.

    Returns the checkpoint with the best validation reconstruction; also
    writes periodic checkpoints and the loss trace when ``out_dir`` is given.
    """
    cfg.validate()
    if len(dataset) < 2:
        raise ConfigError("need at least 2 clips to form cross-clip pairs")
    clip_len = dataset.config.clip_len
    max_offset = cfg.loss.resolve_offset(clip_len)
    if clip_len < max_offset + 1:
        raise ConfigError("clips shorter than max_offset + 1")

    device = cfg.resolved_device()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    models = ModelSet.build(cfg.nets).to(device).train()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    frames_u8 = _dataset_tensor(dataset)
    train_idx, val_idx = _split_indices(len(dataset), cfg.val_fraction)

    main_opt = torch.optim.Adam(models.main_parameters(), lr=cfg.lr,
                                betas=(cfg.beta1, 0.999))
    critic_opt = torch.optim.Adam(models.critic.parameters(), lr=cfg.lr,
                                  betas=(cfg.beta1, 0.999))

    use_skips = cfg.nets.use_skip_connections
    rows: list[dict] = []
    best_val = float("inf")
    best_state: dict | None = None
    sim_keep_p = max_offset / (max_offset + 1.0)

    for step in range(1, cfg.steps_phase1 + 1):
        idx = rng.choice(train_idx, size=min(cfg.batch_size, train_idx.size),
                         replace=train_idx.size < cfg.batch_size)
        ts, ks = _sample_times(rng, idx.size, clip_len, max_offset)
        idx_t = torch.from_numpy(idx.astype(np.int64))
        frames_a = frames_u8[idx_t, torch.from_numpy(ts)].to(device).float() / 255.0
        frames_b = frames_u8[idx_t, torch.from_numpy(ts + ks)].to(device).float() / 255.0

        if use_skips:
            ec_a, feats_a = models.content_encoder(frames_a, return_features=True)
        else:
            ec_a = models.content_encoder(frames_a)
            feats_a = None
        ec_b = models.content_encoder(frames_b)
        zp_a = models.pose_encoder(frames_a)
        zp_b = models.pose_encoder(frames_b)

        critic_value = 0.0
        if cfg.baseline in ("mipae", "drnet"):
            for _ in range(cfg.critic_steps):
                pair = _build_pair_batch(zp_a, zp_b, idx, ks, rng)
                objective = critic_objective(models.critic, pair)
                critic_opt.zero_grad()
                (-objective).backward()
                critic_opt.step()
                critic_value = objective.item()

        # Cross-frame reconstruction half the time: content from frame t,
        # pose from frame t+k, target frame t+k.
        cross = torch.from_numpy(
            (rng.random(idx.size) < 0.5).astype(np.float32)).to(device)
        z_p_sel = torch.where(cross[:, None] > 0, zp_b, zp_a)
        target = torch.where(cross[:, None, None, None] > 0, frames_b, frames_a)
        decoded = models.decoder(ec_a, z_p_sel, feats_a) if use_skips \
            else models.decoder(ec_a, z_p_sel)
        recon = recon_loss(decoded, target)

        # Zero-offset similarity pairs are exact zeros, so they enter as a
        # mask instead of a second pass through the encoder.
        keep = torch.from_numpy(
            (rng.random(idx.size) < sim_keep_p).astype(np.float32)).to(device)
        sim = torch.mean(torch.sum((ec_a - ec_b) ** 2, dim=1) * keep)

        if cfg.baseline == "mipae":
            pair = _build_pair_batch(zp_a, zp_b, idx, ks, rng)
            third = mi_lower_bound(models.critic, pair, cfg.loss.exp_ceiling)
        elif cfg.baseline == "drnet":
            pair = _build_pair_batch(zp_a, zp_b, idx, ks, rng)
            _, third = adversarial_pose_loss(models.critic, pair)
        else:
            third = torch.zeros((), device=device)

        total = main_objective(recon, sim, third, cfg.loss)
        main_opt.zero_grad()
        total.backward()
        main_opt.step()

        values = {"step": step, "recon": recon.item(), "sim": sim.item(),
                  "mi": third.item(), "critic": critic_value}
        _check_finite(values, step, out_dir, {
            "clip_indices": idx, "t": ts, "k": ks,
            "frames_a": frames_a.detach().cpu(),
            "frames_b": frames_b.detach().cpu(),
        })
        rows.append(values)

        if step % cfg.checkpoint_interval == 0 or step == cfg.steps_phase1:
            val = _validation_recon(models, frames_u8, val_idx, device)
            if not np.isfinite(val) or val <= best_val:
                best_val = val if np.isfinite(val) else best_val
                best_state = {
                    name: {k: v.detach().cpu().clone()
                           for k, v in module.state_dict().items()}
                    for name, module in models.named_components().items()
                }
            logger.info("phase1 step %d recon=%.5f sim=%.5f mi=%.5f val=%.5f",
                        step, values["recon"], values["sim"], values["mi"], val)
            if out_dir is not None:
                _make_checkpoint(models, cfg, rng, main_opt, critic_opt,
                                 step, 0, rows, best_val).save(
                    out_dir / f"ckpt_step{step}.pt")

    ckpt = _make_checkpoint(models, cfg, rng, main_opt, critic_opt,
                            cfg.steps_phase1, 0, rows, best_val)
    if best_state is not None:
        ckpt.model_state = best_state
    if out_dir is not None:
        _write_log(rows, LOG_COLUMNS, out_dir / "train_log.csv")
        ckpt.save(out_dir / "checkpoint.pt")
    return ckpt


def _make_checkpoint(models, cfg, rng, main_opt, critic_opt, step1, step2,
                     rows, best_val) -> Checkpoint:
    last = rows[-1] if rows else {}
    return Checkpoint.capture(
        models, cfg,
        optimizer_state={"main": main_opt.state_dict(),
                         "critic": critic_opt.state_dict()},
        step_phase1=step1,
        step_phase2=step2,
        rng_state={"torch": torch.get_rng_state(),
                   "numpy": rng.bit_generator.state},
        loss_stats={"best_val_recon": best_val, "last": dict(last)},
    )


def encode_dataset(models: ModelSet, frames_u8: torch.Tensor, context: int,
                    device, batch: int = 64):
    """Frozen-encoder pass over every clip: pose per frame, content at the
    last context frame."""
    n, clip_len = frames_u8.shape[:2]
    z_p = []
    z_c = []
    models.eval()
    with torch.no_grad():
        for start in range(0, n, batch):
            clips = frames_u8[start:start + batch].to(device).float() / 255.0
            flat = clips.reshape(-1, *clips.shape[2:])
            z_p.append(models.pose_encoder(flat).reshape(clips.shape[0],
                                                         clip_len, -1).cpu())
            z_c.append(models.content_encoder(clips[:, context - 1]).cpu())
    return torch.cat(z_c), torch.cat(z_p)


def rollout_poses(predictor, z_c: torch.Tensor, z_p: torch.Tensor,
                  context: int, horizon: int) -> torch.Tensor:
    """Recurrent pose prediction for steps 1..context+horizon-1.

    Inputs before the prediction boundary are encoder poses; from there on
    the predictor consumes its own outputs.
    """
    preds = []
    state = None
    for t in range(1, context + horizon):
        prev = z_p[:, t - 1] if t - 1 < context else preds[-1]
        pred, state = predictor.step(z_c, prev, state)
        preds.append(pred)
    return torch.stack(preds, dim=1)  # (B, context+horizon-1, pose_dim)


def train_lstm(dataset: ShapeDataset, ckpt: Checkpoint,
               cfg: TrainConfig | None = None, out_dir=None) -> Checkpoint:
    """Phase 2: fit the pose predictor on frozen phase-1 encoders."""
    if cfg is None:
        cfg = ckpt.train_config
    cfg.validate()
    if cfg.nets != ckpt.train_config.nets:
        raise ConfigError("checkpoint was built with a different net config")
    if ckpt.step_phase1 <= 0:
        raise CheckpointError("checkpoint has no phase-1 training")

    device = cfg.resolved_device()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed + 1)
    models = ckpt.build_models(device)
    for name, module in models.named_components().items():
        if name != "predictor":
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
    models.predictor.train()

    context = cfg.dataset.context
    horizon = cfg.dataset.horizon
    frames_u8 = _dataset_tensor(dataset)
    z_c_all, z_p_all = encode_dataset(models, frames_u8, context, device)
    z_c_all = z_c_all.to(device)
    z_p_all = z_p_all.to(device)

    train_idx, val_idx = _split_indices(len(dataset), cfg.val_fraction)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    opt = torch.optim.Adam(models.predictor.parameters(), lr=cfg.lr,
                           betas=(cfg.beta1, 0.999))

    def pose_loss_on(idx: np.ndarray) -> torch.Tensor:
        z_c = z_c_all[idx]
        z_p = z_p_all[idx]
        preds = rollout_poses(models.predictor, z_c, z_p, context, horizon)
        return torch.mean(torch.sum((preds - z_p[:, 1:]) ** 2, dim=2))

    rows: list[dict] = []
    best_val = float("inf")
    best_state = None
    for step in range(1, cfg.steps_phase2 + 1):
        idx = rng.choice(train_idx, size=min(cfg.batch_size, train_idx.size),
                         replace=train_idx.size < cfg.batch_size)
        loss = pose_loss_on(idx)
        opt.zero_grad()
        loss.backward()
        opt.step()
        values = {"step": step, "pose": loss.item()}
        _check_finite(values, step, out_dir, {"clip_indices": idx})
        rows.append(values)

        if step % cfg.checkpoint_interval == 0 or step == cfg.steps_phase2:
            with torch.no_grad():
                models.predictor.eval()
                val = pose_loss_on(val_idx[:_VAL_CLIP_CAP]).item() \
                    if val_idx.size else float("nan")
                models.predictor.train()
            if not np.isfinite(val) or val <= best_val:
                best_val = val if np.isfinite(val) else best_val
                best_state = {k: v.detach().cpu().clone()
                              for k, v in models.predictor.state_dict().items()}
            logger.info("phase2 step %d pose=%.6f val=%.6f", step,
                        values["pose"], val)

    if best_state is not None:
        models.predictor.load_state_dict(best_state)
    result = Checkpoint.capture(
        models, cfg,
        optimizer_state={**ckpt.optimizer_state,
                         "predictor": opt.state_dict()},
        step_phase1=ckpt.step_phase1,
        step_phase2=cfg.steps_phase2,
        rng_state={"torch": torch.get_rng_state(),
                   "numpy": rng.bit_generator.state},
        loss_stats={**ckpt.loss_stats, "best_val_pose": best_val},
    )
    if out_dir is not None:
        _write_log(rows, PHASE2_LOG_COLUMNS, out_dir / "train_lstm_log.csv")
        result.save(out_dir / "checkpoint.pt")
    return result


def predict_frames(models: ModelSet, context_clips: torch.Tensor,
                   context: int, horizon: int) -> torch.Tensor:
    """Batched rollout: (B, C, ch, H, W) context -> (B, T, ch, H, W) frames.

    The content code is taken from the last context frame and held fixed
    while pose codes are predicted recurrently and decoded.
    """
    models.eval()
    with torch.no_grad():
        b, c = context_clips.shape[:2]
        flat = context_clips.reshape(b * c, *context_clips.shape[2:])
        z_p = models.pose_encoder(flat).reshape(b, c, -1)
        last = context_clips[:, context - 1]
        if models.config.use_skip_connections:
            z_c, feats = models.content_encoder(last, return_features=True)
        else:
            z_c = models.content_encoder(last)
            feats = None
        preds = []
        state = None
        last_pred = None
        for t in range(1, context + horizon):
            prev = z_p[:, t - 1] if t - 1 < context else last_pred
            last_pred, state = models.predictor.step(z_c, prev, state)
            if t >= context:
                preds.append(last_pred)
        frames = []
        for pose in preds:
            frames.append(models.decoder(z_c, pose, feats) if feats is not None
                          else models.decoder(z_c, pose))
        return torch.stack(frames, dim=1)


def predict(ckpt: Checkpoint, context_frames, horizon: int):
    """Predict ``horizon`` future frames from one clip's context frames.

    ``context_frames`` is (C, H, W, ch) in [0, 1]; C must match the context
    length the checkpoint was trained with.
    """
    cfg = ckpt.train_config
    context = cfg.dataset.context
    if len(context_frames) != context:
        raise ConfigError(
            f"context length {len(context_frames)} does not match the "
            f"trained context {context}"
        )
    device = cfg.resolved_device()
    models = ckpt.build_models(device)
    clips = frames_to_tensor(context_frames, device).unsqueeze(0)
    frames = predict_frames(models, clips, context, horizon)
    return tensor_to_frames(frames[0])
