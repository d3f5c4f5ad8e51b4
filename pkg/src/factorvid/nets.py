"""Parametric components: encoders, decoder, pair critic, pose predictor.

The content encoder maps a frame to a wide code that should stay constant
over a clip; the pose encoder maps each frame to a narrow, tanh-bounded code
that should track only the moving state. The decoder reconstructs a frame
from one content code and one pose code. A small MLP critic scores pose-code
pairs for the mutual-information objective, and a two-layer LSTM predicts
future pose codes conditioned on the content code of the last observed frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass(frozen=True)
class NetConfig:
    content_dim: int = 128
    pose_dim: int = 5
    base_channels: int = 64
    frame_size: int = 64
    in_channels: int = 1
    use_skip_connections: bool = False
    critic_hidden: int = 512
    critic_layers: int = 2
    lstm_cells: int = 256
    lstm_layers: int = 2

    def validate(self) -> "NetConfig":
        dims = (self.content_dim, self.pose_dim, self.base_channels,
                self.in_channels, self.critic_hidden, self.critic_layers,
                self.lstm_cells, self.lstm_layers)
        if any(d < 1 for d in dims):
            raise ConfigError("all network dimensions must be positive")
        if self.pose_dim >= self.content_dim:
            raise ConfigError("pose_dim must be smaller than content_dim")
        size = self.frame_size
        if size < 16 or (size & (size - 1)) != 0:
            raise ConfigError(
                f"frame_size {size} is not a power-of-two multiple of the "
                f"4x4 final feature map"
            )
        return self

    @property
    def num_down(self) -> int:
        """Stride-2 stages between frame resolution and the 4x4 feature map."""
        return int(math.log2(self.frame_size // 4))


@dataclass
class LatentBundle:
    """Codes of one clip batch: one content code, a pose code per frame."""

    z_c: torch.Tensor                      # (B, content_dim)
    z_p: torch.Tensor                      # (B, clip_len, pose_dim)
    z_p_hat: Optional[torch.Tensor] = None  # (B, T, pose_dim) predictions


def _init_dcgan(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


def _stage_channels(cfg: NetConfig) -> list[int]:
    # base, 2*base, 4*base, ... growing toward the 4x4 map, DCGAN style
    return [cfg.base_channels * (2 ** i) for i in range(cfg.num_down)]


class FrameEncoder(nn.Module):
    """Strided-conv encoder from a frame to a flat code.

    ``bounded`` applies tanh to the output, used for pose codes so the critic
    sees inputs from a compact range.
    """

    def __init__(self, cfg: NetConfig, out_dim: int, bounded: bool):
        super().__init__()
        cfg.validate()
        self.bounded = bounded
        channels = _stage_channels(cfg)
        blocks = []
        prev = cfg.in_channels
        for i, ch in enumerate(channels):
            layers = [nn.Conv2d(prev, ch, 4, stride=2, padding=1, bias=False)]
            if i > 0:
                layers.append(nn.BatchNorm2d(ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            blocks.append(nn.Sequential(*layers))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(prev, out_dim, 4, stride=1, padding=0)
        self.apply(_init_dcgan)

    def forward(self, frames: torch.Tensor, return_features: bool = False):
        h = frames
        features = []
        for block in self.blocks:
            h = block(h)
            features.append(h)
        code = self.head(h).flatten(1)
        if self.bounded:
            code = torch.tanh(code)
        if return_features:
            return code, features
        return code


class FrameDecoder(nn.Module):
    """Mirrored transposed-conv decoder from (z_c, z_p) to a frame in [0, 1].

    With skip connections enabled, content-encoder feature maps are
    concatenated at matching resolutions before each upsampling stage.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        channels = _stage_channels(cfg)[::-1]  # deepest first
        latent = cfg.content_dim + cfg.pose_dim
        self.stem = nn.Sequential(
            nn.ConvTranspose2d(latent, channels[0], 4, stride=1, padding=0,
                               bias=False),
            nn.BatchNorm2d(channels[0]),
            nn.ReLU(inplace=True),
        )
        blocks = []
        skip_mult = 2 if cfg.use_skip_connections else 1
        for i in range(len(channels)):
            in_ch = channels[i] * skip_mult
            if i + 1 < len(channels):
                blocks.append(nn.Sequential(
                    nn.ConvTranspose2d(in_ch, channels[i + 1], 4, stride=2,
                                       padding=1, bias=False),
                    nn.BatchNorm2d(channels[i + 1]),
                    nn.ReLU(inplace=True),
                ))
            else:
                blocks.append(nn.Sequential(
                    nn.ConvTranspose2d(in_ch, cfg.in_channels, 4, stride=2,
                                       padding=1),
                    nn.Sigmoid(),
                ))
        self.blocks = nn.ModuleList(blocks)
        self.apply(_init_dcgan)

    def forward(self, z_c: torch.Tensor, z_p: torch.Tensor,
                content_features: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
        if self.config.use_skip_connections and content_features is None:
            raise ValueError("decoder built with skip connections needs "
                             "content encoder features")
        h = self.stem(torch.cat([z_c, z_p], dim=1)[..., None, None])
        for i, block in enumerate(self.blocks):
            if self.config.use_skip_connections:
                h = torch.cat([h, content_features[-(i + 1)]], dim=1)
            h = block(h)
        return h


class PairCritic(nn.Module):
    """MLP scoring a pair of pose codes with an unbounded scalar.

    The final layer is zero-initialized so an untrained critic scores every
    pair 0; any squashing happens inside the objectives, not here.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        layers: list[nn.Module] = []
        prev = 2 * cfg.pose_dim
        for _ in range(cfg.critic_layers):
            layers += [nn.Linear(prev, cfg.critic_hidden), nn.ReLU(inplace=True)]
            prev = cfg.critic_hidden
        head = nn.Linear(prev, 1)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
        layers.append(head)
        self.net = nn.Sequential(*layers)

    def forward(self, pose_a: torch.Tensor, pose_b: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([pose_a, pose_b], dim=1)).squeeze(1)


class PosePredictor(nn.Module):
    """Recurrent pose model: (content code, previous pose, state) -> next pose."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.input_embed = nn.Linear(cfg.content_dim + cfg.pose_dim, cfg.lstm_cells)
        self.lstm = nn.LSTM(cfg.lstm_cells, cfg.lstm_cells,
                            num_layers=cfg.lstm_layers, batch_first=True)
        self.output_embed = nn.Linear(cfg.lstm_cells, cfg.pose_dim)

    def initial_state(self, batch: int, device=None, dtype=None):
        shape = (self.config.lstm_layers, batch, self.config.lstm_cells)
        kw = {"device": device, "dtype": dtype}
        return torch.zeros(shape, **kw), torch.zeros(shape, **kw)

    def step(self, z_c: torch.Tensor, prev_pose: torch.Tensor, state=None):
        if state is None:
            state = self.initial_state(z_c.shape[0], device=z_c.device,
                                       dtype=z_c.dtype)
        x = self.input_embed(torch.cat([z_c, prev_pose], dim=1)).unsqueeze(1)
        out, state = self.lstm(x, state)
        return self.output_embed(out.squeeze(1)), state

    def forward(self, z_c, prev_pose, state=None):
        return self.step(z_c, prev_pose, state)


def build_content_encoder(cfg: NetConfig) -> FrameEncoder:
    return FrameEncoder(cfg, cfg.content_dim, bounded=False)


def build_pose_encoder(cfg: NetConfig) -> FrameEncoder:
    return FrameEncoder(cfg, cfg.pose_dim, bounded=True)


def build_decoder(cfg: NetConfig) -> FrameDecoder:
    return FrameDecoder(cfg)


def build_critic(cfg: NetConfig) -> PairCritic:
    return PairCritic(cfg)


def build_pose_predictor(cfg: NetConfig) -> PosePredictor:
    return PosePredictor(cfg)


@dataclass
class ModelSet:
    """All five components plus their config, as built for one experiment."""

    config: NetConfig
    content_encoder: FrameEncoder
    pose_encoder: FrameEncoder
    decoder: FrameDecoder
    critic: PairCritic
    predictor: PosePredictor

    @classmethod
    def build(cls, cfg: NetConfig) -> "ModelSet":
        cfg.validate()
        return cls(
            config=cfg,
            content_encoder=build_content_encoder(cfg),
            pose_encoder=build_pose_encoder(cfg),
            decoder=build_decoder(cfg),
            critic=build_critic(cfg),
            predictor=build_pose_predictor(cfg),
        )

    def named_components(self) -> dict[str, nn.Module]:
        return {
            "content_encoder": self.content_encoder,
            "pose_encoder": self.pose_encoder,
            "decoder": self.decoder,
            "critic": self.critic,
            "predictor": self.predictor,
        }

    def main_parameters(self):
        """Parameters updated by the combined reconstruction objective."""
        for module in (self.content_encoder, self.pose_encoder, self.decoder):
            yield from module.parameters()

    def train(self, mode: bool = True) -> "ModelSet":
        for module in self.named_components().values():
            module.train(mode)
        return self

    def eval(self) -> "ModelSet":
        return self.train(False)

    def to(self, device) -> "ModelSet":
        for module in self.named_components().values():
            module.to(device)
        return self


def encode_clip(models: ModelSet, frames: torch.Tensor, context: int) -> LatentBundle:
    """Encode a clip batch (B, L, C, H, W): pose per frame, content at the
    last context frame."""
    b, length = frames.shape[:2]
    flat = frames.reshape(b * length, *frames.shape[2:])
    z_p = models.pose_encoder(flat).reshape(b, length, -1)
    z_c = models.content_encoder(frames[:, context - 1])
    return LatentBundle(z_c=z_c, z_p=z_p)


def frames_to_tensor(frames: "np.ndarray", device=None) -> torch.Tensor:
    """(..., H, W, C) float arrays in [0, 1] to torch (..., C, H, W)."""
    import numpy as np

    arr = np.asarray(frames, dtype=np.float32)
    tensor = torch.from_numpy(arr).movedim(-1, -3)
    return tensor.to(device) if device is not None else tensor


def tensor_to_frames(tensor: torch.Tensor) -> "np.ndarray":
    """Inverse of :func:`frames_to_tensor`."""
    return tensor.detach().movedim(-3, -1).cpu().numpy()
