"""Procedural moving-shapes video clips with known generative factors.

Each clip shows one or two sprites (square, ellipse, or triangle) at a fixed
scale and rotational orientation, translating with constant speed and
mirror-reflecting off the frame borders. The content factors (shape, scale,
orientation) never change within a clip; only position does. Every clip
carries its full factor track so evaluation code can compare learned
representations against the true generative factors.

Coordinates are normalized to [0, 1]^2 and converted to pixels only at
render time, so the dynamics are resolution independent.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptFileError, VersionError

SHAPE_NAMES = ("square", "ellipse", "triangle")
NUM_SHAPES = 3
NUM_SCALES = 6
NUM_ORIENTATIONS = 40

# Sprite circumradius as a fraction of the frame side, per scale step.
_RADIUS_BASE = 0.10
_RADIUS_STEP = 0.016

# Ellipse minor/major axis ratio; < 1 so orientation is visible.
_ELLIPSE_RATIO = 0.6

# Supersampling factor per axis for anti-aliased rasterization.
_SUPERSAMPLE = 4

_FORMAT_MAGIC = b"FVDS"
_FORMAT_VERSION = 1
_FORMAT_SENTINEL = b"FVDSEND!"
_TRACK_COLUMNS = (
    "seq", "obj", "frame", "shape_id", "scale_id", "orient_id",
    "x", "y", "vx", "vy",
)


def sprite_radius(scale_id: int) -> float:
    """Circumradius of a sprite at the given scale, as a frame fraction."""
    return _RADIUS_BASE + _RADIUS_STEP * scale_id


@dataclass(frozen=True)
class DatasetConfig:
    """Knobs for procedural clip generation.

    ``margin`` is extra clearance added to the sprite's own circumradius;
    positions are confined so the sprite always stays fully inside the frame.
    """

    num_sequences: int = 2000
    context: int = 5
    horizon: int = 10
    frame_size: int = 64
    num_objects: int = 1
    speed_range: tuple[float, float] = (0.03, 0.08)
    seed: int = 0
    margin: float = 0.01

    @property
    def clip_len(self) -> int:
        return self.context + self.horizon

    def validate(self) -> "DatasetConfig":
        if self.num_sequences < 1:
            raise ConfigError("num_sequences must be >= 1")
        if self.context < 1 or self.horizon < 1:
            raise ConfigError("context and horizon must both be >= 1")
        if self.frame_size < 16:
            raise ConfigError("frame_size must be >= 16")
        if self.num_objects not in (1, 2):
            raise ConfigError("num_objects must be 1 or 2")
        lo, hi = self.speed_range
        if not (0.0 < lo <= hi < 0.5):
            raise ConfigError("speed_range must satisfy 0 < lo <= hi < 0.5")
        if self.margin < 0.0:
            raise ConfigError("margin must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        worst = sprite_radius(NUM_SCALES - 1) + self.margin
        if worst >= 0.5:
            raise ConfigError(
                f"largest sprite extent {worst:.3f} does not fit in the frame"
            )
        return self


@dataclass(frozen=True)
class FactorTrack:
    """True generative factors of one object over a clip.

    Content (shape/scale/orientation) is constant for the whole clip;
    ``positions`` holds the normalized (x, y) center per frame and
    ``velocity`` the initial velocity vector. Speed is conserved by the
    reflection dynamics; only the direction changes.
    """

    shape_id: int
    scale_id: int
    orient_id: int
    positions: np.ndarray  # (clip_len, 2) float64 in [0, 1]^2
    velocity: np.ndarray   # (2,) float64, frame fractions per step

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass(frozen=True)
class VideoSequence:
    """One generated clip: frames plus the factor track per object."""

    frames: np.ndarray           # (clip_len, H, W, 1) float32 in [0, 1]
    tracks: tuple[FactorTrack, ...]
    seed: int

    @property
    def track(self) -> FactorTrack:
        return self.tracks[0]


def position_bounds(scale_id: int, config: DatasetConfig) -> tuple[float, float]:
    """Allowed center range per axis for a sprite of the given scale."""
    lo = sprite_radius(scale_id) + config.margin
    return lo, 1.0 - lo


def step_dynamics(pos, vel, bounds):
    """Advance one constant-velocity step with mirror reflection.

    Positions exceeding a bound b are reflected to 2*b - pos with the
    velocity component negated, repeatedly, so corner hits and overshoots
    larger than the box are handled.
    """
    lo, hi = bounds
    new_pos = []
    new_vel = []
    for p, v in zip(pos, vel):
        p = p + v
        while p < lo or p > hi:
            if p < lo:
                p = 2.0 * lo - p
            else:
                p = 2.0 * hi - p
            v = -v
        new_pos.append(p)
        new_vel.append(v)
    return (new_pos[0], new_pos[1]), (new_vel[0], new_vel[1])


def _roll_positions(pos0, vel, bounds, steps):
    positions = np.empty((steps, 2), dtype=np.float64)
    positions[0] = pos0
    pos, v = tuple(pos0), tuple(vel)
    for t in range(1, steps):
        pos, v = step_dynamics(pos, v, bounds)
        positions[t] = pos
    return positions


def sample_factor_track(rng: np.random.Generator, config: DatasetConfig) -> FactorTrack:
    """Draw content factors, an initial pose, and roll the dynamics.

    Cheap relative to rendering, so callers that only need ground-truth
    tracks (factor statistics, stratified evaluation sets) can use it alone.
    """
    shape_id = int(rng.integers(NUM_SHAPES))
    scale_id = int(rng.integers(NUM_SCALES))
    orient_id = int(rng.integers(NUM_ORIENTATIONS))
    bounds = position_bounds(scale_id, config)
    pos0 = rng.uniform(bounds[0], bounds[1], size=2)
    speed = rng.uniform(*config.speed_range)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    velocity = np.array([speed * math.cos(angle), speed * math.sin(angle)])
    positions = _roll_positions(pos0, velocity, bounds, config.clip_len)
    return FactorTrack(shape_id, scale_id, orient_id, positions, velocity)


def _sprite_coverage(shape_id, scale_id, orient_id, pos, frame_size):
    """Anti-aliased coverage map of one sprite, float64 in [0, 1]."""
    radius_px = sprite_radius(scale_id) * frame_size
    cx = pos[0] * frame_size
    cy = pos[1] * frame_size

    pad = radius_px + 1.0
    x0 = max(int(math.floor(cx - pad)), 0)
    x1 = min(int(math.ceil(cx + pad)), frame_size)
    y0 = max(int(math.floor(cy - pad)), 0)
    y1 = min(int(math.ceil(cy + pad)), frame_size)

    frame = np.zeros((frame_size, frame_size), dtype=np.float64)
    if x0 >= x1 or y0 >= y1:
        return frame

    s = _SUPERSAMPLE
    xs = x0 + (np.arange((x1 - x0) * s) + 0.5) / s
    ys = y0 + (np.arange((y1 - y0) * s) + 0.5) / s
    gx, gy = np.meshgrid(xs - cx, ys - cy)

    angle = orient_id * (2.0 * math.pi / NUM_ORIENTATIONS)
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = cos_a * gx + sin_a * gy
    v = -sin_a * gx + cos_a * gy

    if shape_id == 0:  # square, circumradius = half diagonal
        half = radius_px / math.sqrt(2.0)
        inside = (np.abs(u) <= half) & (np.abs(v) <= half)
    elif shape_id == 1:  # ellipse
        a = radius_px
        b = radius_px * _ELLIPSE_RATIO
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    elif shape_id == 2:  # equilateral triangle, vertex toward +v at angle 0
        inradius = radius_px / 2.0
        inside = np.ones_like(u, dtype=bool)
        for phi in (math.pi / 2.0, 7.0 * math.pi / 6.0, 11.0 * math.pi / 6.0):
            # outward edge normals are opposite the vertex directions
            nx, ny = -math.cos(phi), -math.sin(phi)
            inside &= (nx * u + ny * v) <= inradius
    else:
        raise ConfigError(f"unknown shape_id {shape_id}")

    cov = inside.reshape(y1 - y0, s, x1 - x0, s).mean(axis=(1, 3))
    frame[y0:y1, x0:x1] = cov
    return frame


def _quantize(frame: np.ndarray) -> np.ndarray:
    """Snap intensities to the uint8 grid so file round-trips are lossless."""
    return (np.round(frame * 255.0) / 255.0).astype(np.float32)


def render_frame(track_state, config: DatasetConfig) -> np.ndarray:
    """Rasterize one sprite; returns an (H, W, 1) float32 frame in [0, 1].

    ``track_state`` is (shape_id, scale_id, orient_id, (x, y)). Background is
    0, foreground 1, with supersampled anti-aliased edges. Deterministic for
    fixed inputs.
    """
    shape_id, scale_id, orient_id, pos = track_state
    if not (0 <= shape_id < NUM_SHAPES):
        raise ConfigError(f"shape_id {shape_id} out of range")
    if not (0 <= scale_id < NUM_SCALES):
        raise ConfigError(f"scale_id {scale_id} out of range")
    if not (0 <= orient_id < NUM_ORIENTATIONS):
        raise ConfigError(f"orient_id {orient_id} out of range")
    if sprite_radius(scale_id) >= 0.5:
        raise ConfigError("sprite extent exceeds the frame")
    cov = _sprite_coverage(shape_id, scale_id, orient_id, pos, config.frame_size)
    return _quantize(cov)[..., None]


def generate_sequence(seed: int, config: DatasetConfig) -> VideoSequence:
    """Generate one clip from a seed: factors, dynamics, rendered frames.

    Factors are sampled uniformly from their ranges. Overlapping objects are
    composed by taking the per-pixel maximum so both stay visible.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tracks = tuple(sample_factor_track(rng, config) for _ in range(config.num_objects))
    size = config.frame_size
    frames = np.zeros((config.clip_len, size, size), dtype=np.float64)
    for track in tracks:
        for t in range(config.clip_len):
            cov = _sprite_coverage(
                track.shape_id, track.scale_id, track.orient_id,
                track.positions[t], size,
            )
            np.maximum(frames[t], cov, out=frames[t])
    return VideoSequence(frames=_quantize(frames)[..., None], tracks=tracks, seed=seed)


def clip_seed(base_seed: int, index: int) -> int:
    """Stable per-clip seed derived from the dataset seed and clip index."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


@dataclass
class ShapeDataset:
    """In-memory dataset: uint8 frames plus factor tracks and per-clip seeds."""

    config: DatasetConfig
    frames: np.ndarray   # (N, clip_len, H, W, 1) uint8
    tracks: list[tuple[FactorTrack, ...]]
    seeds: np.ndarray    # (N,) uint64

    def __len__(self) -> int:
        return self.frames.shape[0]

    def clip_frames(self, index: int) -> np.ndarray:
        """Frames of one clip as float32 in [0, 1]."""
        return self.frames[index].astype(np.float32) / 255.0

    def sequence(self, index: int) -> VideoSequence:
        return VideoSequence(
            frames=self.clip_frames(index),
            tracks=self.tracks[index],
            seed=int(self.seeds[index]),
        )


def generate_dataset(config: DatasetConfig) -> ShapeDataset:
    """Generate ``config.num_sequences`` clips with stable per-clip seeds."""
    config.validate()
    n = config.num_sequences
    size = config.frame_size
    frames = np.empty((n, config.clip_len, size, size, 1), dtype=np.uint8)
    tracks: list[tuple[FactorTrack, ...]] = []
    seeds = np.empty(n, dtype=np.uint64)
    for i in range(n):
        seed = clip_seed(config.seed, i)
        seq = generate_sequence(seed, config)
        frames[i] = np.round(seq.frames * 255.0).astype(np.uint8)
        tracks.append(seq.tracks)
        seeds[i] = seed
    return ShapeDataset(config=config, frames=frames, tracks=tracks, seeds=seeds)


def dataset_from_tracks(config: DatasetConfig,
                        all_tracks: list[tuple[FactorTrack, ...]],
                        seeds: np.ndarray) -> ShapeDataset:
    """Render a dataset from pre-sampled tracks (e.g. a stratified subset)."""
    config.validate()
    n = len(all_tracks)
    size = config.frame_size
    frames = np.empty((n, config.clip_len, size, size, 1), dtype=np.uint8)
    for i, tracks in enumerate(all_tracks):
        clip = np.zeros((config.clip_len, size, size), dtype=np.float64)
        for track in tracks:
            for t in range(config.clip_len):
                cov = _sprite_coverage(
                    track.shape_id, track.scale_id, track.orient_id,
                    track.positions[t], size,
                )
                np.maximum(clip[t], cov, out=clip[t])
        frames[i] = np.round(_quantize(clip) * 255.0).astype(np.uint8)[..., None]
    return ShapeDataset(config=config, frames=frames,
                        tracks=list(all_tracks), seeds=np.asarray(seeds, dtype=np.uint64))


# ---------------------------------------------------------------------------
# Dataset container file (layout documented in docs/dataset_format.md)
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = ("num_sequences", "context", "horizon", "frame_size",
                  "num_objects", "speed_range", "seed", "margin")


def _config_to_text(config: DatasetConfig) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(config, name)
        if name == "speed_range":
            value = f"{value[0]!r},{value[1]!r}"
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> DatasetConfig:
    values = {}
    for line in text.strip().splitlines():
        key, _, raw = line.partition("=")
        if key not in _CONFIG_FIELDS:
            raise CorruptFileError(f"unknown config key {key!r} in dataset file")
        values[key] = raw
    try:
        return DatasetConfig(
            num_sequences=int(values["num_sequences"]),
            context=int(values["context"]),
            horizon=int(values["horizon"]),
            frame_size=int(values["frame_size"]),
            num_objects=int(values["num_objects"]),
            speed_range=tuple(float(v) for v in values["speed_range"].split(",")),
            seed=int(values["seed"]),
            margin=float(values["margin"]),
        )
    except (KeyError, ValueError) as exc:
        raise CorruptFileError(f"bad config block in dataset file: {exc}") from exc


def _tracks_to_table(dataset: ShapeDataset) -> np.ndarray:
    rows = []
    for i, tracks in enumerate(dataset.tracks):
        for j, track in enumerate(tracks):
            for t in range(dataset.config.clip_len):
                rows.append((
                    i, j, t,
                    track.shape_id, track.scale_id, track.orient_id,
                    track.positions[t, 0], track.positions[t, 1],
                    track.velocity[0], track.velocity[1],
                ))
    return np.asarray(rows, dtype=np.float64)


def _tracks_from_table(table: np.ndarray, config: DatasetConfig) -> list[tuple[FactorTrack, ...]]:
    n, k, length = config.num_sequences, config.num_objects, config.clip_len
    table = table.reshape(n, k, length, len(_TRACK_COLUMNS))
    tracks = []
    for i in range(n):
        per_obj = []
        for j in range(k):
            block = table[i, j]
            per_obj.append(FactorTrack(
                shape_id=int(block[0, 3]),
                scale_id=int(block[0, 4]),
                orient_id=int(block[0, 5]),
                positions=block[:, 6:8].copy(),
                velocity=block[0, 8:10].copy(),
            ))
        tracks.append(tuple(per_obj))
    return tracks


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CorruptFileError(
            f"dataset file truncated while reading {what}: "
            f"wanted {count} bytes, got {len(data)}"
        )
    return data


def write_dataset(dataset: ShapeDataset, path) -> None:
    """Write the dataset container; layout in docs/dataset_format.md."""
    path = Path(path)
    config = dataset.config
    config_text = _config_to_text(config).encode("utf-8")
    dims = np.array(
        [len(dataset), config.clip_len, config.frame_size, config.frame_size,
         1, config.num_objects],
        dtype="<u4",
    )
    table = _tracks_to_table(dataset)
    with open(path, "wb") as fh:
        fh.write(_FORMAT_MAGIC)
        fh.write(np.array([_FORMAT_VERSION], dtype="<u4").tobytes())
        fh.write(np.array([len(config_text)], dtype="<u4").tobytes())
        fh.write(config_text)
        fh.write(dims.tobytes())
        fh.write(dataset.seeds.astype("<u8").tobytes())
        fh.write(np.array([table.shape[1]], dtype="<u4").tobytes())
        fh.write(table.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.frames).tobytes())
        fh.write(_FORMAT_SENTINEL)


def read_dataset(path) -> ShapeDataset:
    """Read a dataset container written by :func:`write_dataset`."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _FORMAT_MAGIC:
            raise CorruptFileError(
                f"{path} is not a dataset container (magic {magic!r})"
            )
        version = int(np.frombuffer(_read_exact(fh, 4, "version"), "<u4")[0])
        if version != _FORMAT_VERSION:
            raise VersionError(
                f"dataset format version {version} not supported "
                f"(expected {_FORMAT_VERSION})"
            )
        config_len = int(np.frombuffer(_read_exact(fh, 4, "config length"), "<u4")[0])
        config = _config_from_text(_read_exact(fh, config_len, "config").decode("utf-8"))
        dims = np.frombuffer(_read_exact(fh, 24, "dimensions"), "<u4")
        n, length, height, width, channels, num_objects = (int(v) for v in dims)
        if (n, length, num_objects) != (config.num_sequences, config.clip_len,
                                        config.num_objects):
            raise CorruptFileError(
                "dataset dimensions disagree with the stored config"
            )
        if channels != 1 or height != config.frame_size or width != config.frame_size:
            raise CorruptFileError("unexpected frame geometry in dataset file")
        seeds = np.frombuffer(_read_exact(fh, 8 * n, "seeds"), "<u8").copy()
        ncols = int(np.frombuffer(_read_exact(fh, 4, "track column count"), "<u4")[0])
        if ncols != len(_TRACK_COLUMNS):
            raise CorruptFileError(
                f"track table has {ncols} columns, expected {len(_TRACK_COLUMNS)}"
            )
        n_rows = n * num_objects * length
        table = np.frombuffer(
            _read_exact(fh, 8 * n_rows * ncols, "track table"), "<f8"
        ).reshape(n_rows, ncols).copy()
        frame_bytes = n * length * height * width * channels
        frames = np.frombuffer(
            _read_exact(fh, frame_bytes, "frames"), np.uint8
        ).reshape(n, length, height, width, channels).copy()
        sentinel = _read_exact(fh, len(_FORMAT_SENTINEL), "end sentinel")
        if sentinel != _FORMAT_SENTINEL:
            raise CorruptFileError("dataset file end sentinel missing")
        if fh.read(1):
            raise CorruptFileError("trailing bytes after dataset end sentinel")
    return ShapeDataset(
        config=config,
        frames=frames,
        tracks=_tracks_from_table(table, config),
        seeds=seeds,
    )
