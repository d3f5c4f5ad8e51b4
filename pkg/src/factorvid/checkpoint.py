"""Versioned checkpoint container.

Holds the parameter groups of all five components plus both configs, step
counters, RNG states, and running loss statistics. Evaluation code rebuilds
models from the stored config alone, so checkpoints load without the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import TrainConfig, train_config_from_dict, train_config_to_dict
from .errors import CheckpointError, VersionError
from .nets import ModelSet

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    train_config: TrainConfig
    model_state: dict[str, dict]
    optimizer_state: dict[str, dict] = field(default_factory=dict)
    step_phase1: int = 0
    step_phase2: int = 0
    rng_state: dict = field(default_factory=dict)
    loss_stats: dict = field(default_factory=dict)

    def build_models(self, device: str = "cpu") -> ModelSet:
        """Instantiate all components and load their parameters."""
        models = ModelSet.build(self.train_config.nets).to(device)
        for name, module in models.named_components().items():
            if name not in self.model_state:
                raise CheckpointError(f"checkpoint missing parameters for {name!r}")
            module.load_state_dict(self.model_state[name])
        return models

    @staticmethod
    def capture(models: ModelSet, train_config: TrainConfig, **kwargs) -> "Checkpoint":
        state = {name: {k: v.detach().clone() for k, v in module.state_dict().items()}
                 for name, module in models.named_components().items()}
        return Checkpoint(train_config=train_config, model_state=state, **kwargs)

    def save(self, path) -> None:
        payload = {
            "version": CHECKPOINT_VERSION,
            "train_config": train_config_to_dict(self.train_config),
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "step_phase1": self.step_phase1,
            "step_phase2": self.step_phase2,
            "rng_state": self.rng_state,
            "loss_stats": self.loss_stats,
        }
        torch.save(payload, Path(path))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint container")
    version = payload["version"]
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint version {version} not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return Checkpoint(
        train_config=train_config_from_dict(payload["train_config"]),
        model_state=payload["model_state"],
        optimizer_state=payload.get("optimizer_state", {}),
        step_phase1=payload.get("step_phase1", 0),
        step_phase2=payload.get("step_phase2", 0),
        rng_state=payload.get("rng_state", {}),
        loss_stats=payload.get("loss_stats", {}),
    )
