"""Loss terms for the two-player training scheme.

The autoencoder side minimizes reconstruction error, a content-similarity
penalty across frames of the same clip, and a variational lower bound on the
mutual information between pose codes at different times. The critic side
maximizes a GAN-style discrimination objective between same-clip (joint) and
cross-clip (marginal) pose-code pairs; its scores plug into the MI bound.

Gradient isolation is structural: the critic objective sees pose codes as
constants, and the MI bound sees critic parameters as constants.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError

DEFAULT_EXP_CEILING = 20.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective and the pair-offset range."""

    alpha: float = 1.0
    beta: float = 0.0001
    max_offset: Optional[int] = None  # K; defaults to clip_len - 1
    exp_ceiling: float = DEFAULT_EXP_CEILING

    def validate(self, clip_len: Optional[int] = None) -> "LossWeights":
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        k = self.max_offset
        if k is not None:
            if k < 1:
                raise ConfigError("max_offset must be >= 1")
            if clip_len is not None and k > clip_len - 1:
                raise ConfigError(
                    f"max_offset {k} exceeds clip length - 1 = {clip_len - 1}"
                )
        if self.exp_ceiling <= 0:
            raise ConfigError("exp_ceiling must be positive")
        return self

    def resolve_offset(self, clip_len: int) -> int:
        return self.max_offset if self.max_offset is not None else clip_len - 1


@dataclass
class PairBatch:
    """Pose-code pairs: joint from the same clip at offset k, marginal across
    two different clips. Index metadata is kept so invariants stay checkable."""

    joint_a: torch.Tensor      # (B, pose_dim)  z_p at time t, clip i
    joint_b: torch.Tensor      # (B, pose_dim)  z_p at time t+k, clip i
    marginal_a: torch.Tensor   # (B, pose_dim)  z_p at time t, clip i
    marginal_b: torch.Tensor   # (B, pose_dim)  z_p at time t+k, clip j != i
    offsets: torch.Tensor      # (B,) int, k per pair
    clip_index: Optional[torch.Tensor] = None      # i per pair
    marginal_index: Optional[torch.Tensor] = None  # j per pair

    def __post_init__(self):
        if self.joint_a.shape != self.joint_b.shape:
            raise ValueError("joint pair shapes differ")
        if self.marginal_a.shape != self.marginal_b.shape:
            raise ValueError("marginal pair shapes differ")
        if self.joint_a.shape[0] == 0 or self.marginal_a.shape[0] == 0:
            raise ValueError("pair batch must be nonempty")
        if (self.offsets < 1).any():
            raise ValueError("pair offsets must be >= 1")
        if self.clip_index is not None and self.marginal_index is not None:
            if (self.clip_index == self.marginal_index).any():
                raise ValueError("marginal pairs must come from distinct clips")


@contextmanager
def frozen_parameters(module: torch.nn.Module):
    """Treat a module's parameters as constants inside the block.

    Gradients still flow through the module to its inputs.
    """
    params = list(module.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


def recon_loss(decoded: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-wise squared error, averaged over pixels and batch."""
    if decoded.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(decoded.shape)} vs "
                         f"{tuple(target.shape)}")
    return torch.mean((decoded - target) ** 2)


def sim_codes_loss(codes_a: torch.Tensor, codes_b: torch.Tensor) -> torch.Tensor:
    """Squared euclidean distance between content codes, batch-averaged."""
    return torch.mean(torch.sum((codes_a - codes_b) ** 2, dim=1))


def sim_loss(content_encoder, frames_t: torch.Tensor,
             frames_tk: torch.Tensor) -> torch.Tensor:
    """Content-change penalty between two frames of the same clip."""
    return sim_codes_loss(content_encoder(frames_t), content_encoder(frames_tk))


def critic_objective(critic, batch: PairBatch) -> torch.Tensor:
    """Discrimination objective the critic maximizes.

    mean log sigma(C(joint)) + mean log(1 - sigma(C(marginal))), evaluated in
    log space. Pose codes are detached so no gradient reaches the encoders.
    """
    s_joint = critic(batch.joint_a.detach(), batch.joint_b.detach())
    s_marg = critic(batch.marginal_a.detach(), batch.marginal_b.detach())
    return F.logsigmoid(s_joint).mean() + F.logsigmoid(-s_marg).mean()


def mi_lower_bound(critic, batch: PairBatch,
                   exp_ceiling: float = DEFAULT_EXP_CEILING) -> torch.Tensor:
    """Variational MI lower bound the encoders minimize.

    mean C(joint) - mean exp(C(marginal)); the exponent is clamped at
    ``exp_ceiling`` to prevent overflow. Critic parameters are frozen during
    evaluation so the gradient reaches only the pose codes.
    """
    with frozen_parameters(critic):
        s_joint = critic(batch.joint_a, batch.joint_b)
        s_marg = critic(batch.marginal_a, batch.marginal_b)
    return s_joint.mean() - torch.exp(torch.clamp(s_marg, max=exp_ceiling)).mean()


def main_objective(recon: torch.Tensor, sim: torch.Tensor, mi: torch.Tensor,
                   weights: LossWeights) -> torch.Tensor:
    """Combined objective: recon + alpha * sim + beta * mi."""
    return recon + weights.alpha * sim + weights.beta * mi


def adversarial_pose_loss(discriminator, batch: PairBatch):
    """Optional baseline: same/different-clip classification on pose pairs.

    Returns (disc_objective, enc_loss): the discriminator maximizes the same
    GAN objective as the critic; the encoder minimizes cross-entropy against
    a 0.5 target on both pair kinds, i.e. it is rewarded for leaving the
    discriminator maximally uncertain.
    """
    disc_objective = critic_objective(discriminator, batch)
    with frozen_parameters(discriminator):
        s_joint = discriminator(batch.joint_a, batch.joint_b)
        s_marg = discriminator(batch.marginal_a, batch.marginal_b)
    scores = torch.cat([s_joint, s_marg])
    # -0.5*log(sigma) - 0.5*log(1-sigma), minimal (= ln 2) at sigma = 0.5
    enc_loss = (-0.5 * F.logsigmoid(scores) - 0.5 * F.logsigmoid(-scores)).mean()
    return disc_objective, enc_loss
