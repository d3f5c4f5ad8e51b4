"""Evaluation: frame metrics, swap grids, pose oracle, rollout reports.

The report path writes delimited output (report.csv, mig.csv) next to
rendered figures: PSNR/SSIM curves as vector plots and swap grids as
lossless rasters. A centroid oracle turns the qualitative pose-swap claim
into pixel errors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import matplotlib
import numpy as np
import torch
from scipy.signal import convolve2d

from .checkpoint import Checkpoint
from .errors import CheckpointError, ConfigError, EmptyForegroundError
from .miest import (FactorSamples, MigReport, RepSamples, quantize_positions)
from .nets import ModelSet, frames_to_tensor, tensor_to_frames
from .synthvid import (NUM_ORIENTATIONS, NUM_SCALES, ShapeDataset,
                       position_bounds)
from .trainer import encode_dataset, predict_frames

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

PSNR_CAP_DB = 100.0
CENTROID_THRESHOLD = 0.1
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


@dataclass
class EvalReport:
    """Per-timestep quality curves plus the optional disentanglement extras."""

    psnr_mean: np.ndarray
    psnr_std: np.ndarray
    ssim_mean: np.ndarray
    ssim_std: np.ndarray
    num_clips: int
    mig: Optional[MigReport] = None
    grid_paths: list[str] = field(default_factory=list)
    pose_swap_errors: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return len(self.psnr_mean)


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 (zero-error cap)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_val ** 2 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, max_val: float) -> float:
    window = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    mu_a = convolve2d(a, window, mode="valid")
    mu_b = convolve2d(b, window, mode="valid")
    var_a = convolve2d(a * a, window, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, window, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, window, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, max_val: float = 1.0) -> float:
    """Mean local structural similarity with an 11x11 Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ValueError("expected (H, W) or (H, W, channels) frames")
    if min(a.shape[0], a.shape[1]) < _SSIM_WINDOW:
        raise ValueError(f"frames smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    return float(np.mean([_ssim_plane(a[..., ch], b[..., ch], max_val)
                          for ch in range(a.shape[2])]))


def centroid_oracle(frame, threshold: float = CENTROID_THRESHOLD) -> tuple[float, float]:
    """Intensity-weighted foreground centroid in pixel coordinates.

    Pixel (row i, col j) is centered at (j + 0.5, i + 0.5); the returned
    (x, y) is directly comparable to a normalized track position scaled by
    the frame size.
    """
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., 0]
    mask = arr > threshold
    if not mask.any():
        raise EmptyForegroundError("frame has no foreground above threshold")
    weights = np.where(mask, arr, 0.0)
    total = weights.sum()
    ys, xs = np.mgrid[0:arr.shape[0], 0:arr.shape[1]]
    x = float(((xs + 0.5) * weights).sum() / total)
    y = float(((ys + 0.5) * weights).sum() / total)
    return x, y


def _resolve_models(source, device: str = "cpu") -> ModelSet:
    if isinstance(source, ModelSet):
        return source
    if isinstance(source, Checkpoint):
        return source.build_models(device)
    raise TypeError("expected a Checkpoint or ModelSet")


def swap_grid(source, content_frames, pose_sequence, device: str = "cpu") -> np.ndarray:
    """Cross-decode grid: cell (r, c) decodes content of row r with the pose
    of column c. Returns (rows, cols, H, W, ch) float frames."""
    models = _resolve_models(source, device).eval()
    content = frames_to_tensor(np.asarray(content_frames), device)
    poses = frames_to_tensor(np.asarray(pose_sequence), device)
    rows, cols = content.shape[0], poses.shape[0]
    with torch.no_grad():
        if models.config.use_skip_connections:
            z_c, feats = models.content_encoder(content, return_features=True)
        else:
            z_c = models.content_encoder(content)
            feats = None
        z_p = models.pose_encoder(poses)
        cells = []
        for r in range(rows):
            zc_r = z_c[r:r + 1].expand(cols, -1)
            if feats is not None:
                feats_r = [f[r:r + 1].expand(cols, -1, -1, -1) for f in feats]
                cells.append(models.decoder(zc_r, z_p, feats_r))
            else:
                cells.append(models.decoder(zc_r, z_p))
    grid = torch.stack(cells, dim=0)  # (rows, cols, ch, H, W)
    return tensor_to_frames(grid)


def tile_grid(cells: np.ndarray, pad: int = 2) -> np.ndarray:
    """Assemble grid cells into one image with light separators."""
    rows, cols, h, w, ch = cells.shape
    canvas = np.full((rows * (h + pad) - pad, cols * (w + pad) - pad, ch),
                     0.25, dtype=np.float32)
    for r in range(rows):
        for c in range(cols):
            y, x = r * (h + pad), c * (w + pad)
            canvas[y:y + h, x:x + w] = cells[r, c]
    return canvas


def save_image(image: np.ndarray, path) -> None:
    """Write a [0, 1] image as a lossless PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    plt.imsave(Path(path), arr, cmap="gray", vmin=0.0, vmax=1.0)


def swap_grid_centroid_errors(cells: np.ndarray, pose_sequence) -> np.ndarray:
    """Pixel distance between each cell's centroid and its pose source's."""
    pose_frames = np.asarray(pose_sequence)
    rows, cols = cells.shape[:2]
    errors = np.empty((rows, cols), dtype=np.float64)
    for c in range(cols):
        target = centroid_oracle(pose_frames[c])
        for r in range(rows):
            got = centroid_oracle(cells[r, c])
            errors[r, c] = math.hypot(got[0] - target[0], got[1] - target[1])
    return errors


def rollout_curves(predictions: np.ndarray, targets: np.ndarray):
    """Per-timestep PSNR/SSIM stats for (N, T, H, W, ch) frame stacks."""
    if predictions.shape != targets.shape:
        raise ValueError("prediction/target shapes differ")
    n, horizon = predictions.shape[:2]
    psnr_vals = np.empty((n, horizon))
    ssim_vals = np.empty((n, horizon))
    for i in range(n):
        for t in range(horizon):
            psnr_vals[i, t] = psnr(predictions[i, t], targets[i, t])
            ssim_vals[i, t] = ssim(predictions[i, t], targets[i, t])
    return (psnr_vals.mean(0), psnr_vals.std(0),
            ssim_vals.mean(0), ssim_vals.std(0))


def evaluate_rollout(ckpt: Checkpoint, test_dataset: ShapeDataset,
                     num_clips: Optional[int] = None, batch: int = 16,
                     device: str = "cpu", out_dir=None) -> EvalReport:
    """Predict the future of held-out clips and score against ground truth.

    Writes report.csv and the PSNR/SSIM curve figure when ``out_dir`` is set.
    """
    cfg = ckpt.train_config
    context = cfg.dataset.context
    horizon = cfg.dataset.horizon
    if test_dataset.config.frame_size != cfg.nets.frame_size:
        raise ConfigError("dataset frame size differs from the checkpoint")
    if test_dataset.config.clip_len < context + horizon:
        raise ConfigError("dataset clips shorter than context + horizon")
    models = ckpt.build_models(device)

    n = len(test_dataset) if num_clips is None else min(num_clips, len(test_dataset))
    preds = np.empty((n, horizon, cfg.nets.frame_size, cfg.nets.frame_size, 1),
                     dtype=np.float32)
    targets = np.empty_like(preds)
    frames_u8 = torch.from_numpy(test_dataset.frames).movedim(-1, 2)
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        clips = frames_u8[start:stop].to(device).float() / 255.0
        out = predict_frames(models, clips[:, :context], context, horizon)
        preds[start:stop] = tensor_to_frames(out)
        targets[start:stop] = tensor_to_frames(
            clips[:, context:context + horizon])

    psnr_mean, psnr_std, ssim_mean, ssim_std = rollout_curves(preds, targets)
    report = EvalReport(psnr_mean=psnr_mean, psnr_std=psnr_std,
                        ssim_mean=ssim_mean, ssim_std=ssim_std, num_clips=n)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report_csv(report, out_dir / "report.csv")
        plot_curves(report, out_dir / "curves.svg")
    return report


def write_report_csv(report: EvalReport, path) -> None:
    """Long-format metric rows; the lpips column is reserved and left empty."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "timestep", "mean", "std", "lpips"])
        for t in range(report.horizon):
            writer.writerow(["psnr", t + 1, report.psnr_mean[t],
                             report.psnr_std[t], ""])
            writer.writerow(["ssim", t + 1, report.ssim_mean[t],
                             report.ssim_std[t], ""])


def plot_curves(report: EvalReport, path) -> None:
    """PSNR and SSIM over the prediction horizon, saved as a vector figure."""
    steps = np.arange(1, report.horizon + 1)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, mean, std, label in (
        (axes[0], report.psnr_mean, report.psnr_std, "PSNR (dB)"),
        (axes[1], report.ssim_mean, report.ssim_std, "SSIM"),
    ):
        ax.plot(steps, mean, marker="o", lw=1.5)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.25)
        ax.set_xlabel("prediction step")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.suptitle(f"future-frame quality over {report.num_clips} clips")
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)


def content_label(track) -> int:
    """Flatten (shape, scale, orientation) into one categorical label."""
    return ((track.shape_id * NUM_SCALES) + track.scale_id) * NUM_ORIENTATIONS \
        + track.orient_id


def collect_mig_samples(source, dataset: ShapeDataset,
                        device: str = "cpu") -> tuple[FactorSamples, RepSamples]:
    """Encode a single-object dataset into aligned factor/representation
    samples for the disentanglement score."""
    if dataset.config.num_objects != 1:
        raise ConfigError("disentanglement scoring expects single-object clips")
    models = _resolve_models(source, device)
    context = dataset.config.context
    frames_u8 = torch.from_numpy(dataset.frames).movedim(-1, 2)
    z_c, z_p = encode_dataset(models, frames_u8, context, device)

    n = len(dataset)
    clip_len = dataset.config.clip_len
    f_c = np.empty(n, dtype=np.int64)
    positions = np.empty((n, clip_len, 2), dtype=np.float64)
    bounds = np.empty((n, 2), dtype=np.float64)
    for i in range(n):
        track = dataset.tracks[i][0]
        f_c[i] = content_label(track)
        positions[i] = track.positions
        bounds[i] = position_bounds(track.scale_id, dataset.config)
    f_p = quantize_positions(positions, bounds)
    factors = FactorSamples(f_c=f_c, f_p=f_p)
    reps = RepSamples(z_c=z_c.numpy().astype(np.float64),
                      z_p=z_p.numpy().astype(np.float64))
    return factors, reps
