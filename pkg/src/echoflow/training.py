"""Unsupervised training loop with checkpointing and ground-truth evaluation.

The trainer never sees ground-truth displacement fields: it minimizes the
iterate-weighted cyclic similarity loss over image pairs drawn from the
supplied sequences and synthetic samples. Ground truth is used only by
:func:`evaluate_epe`, which scores a model against samples that carry their
true field.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import DimensionMismatch, DivergenceError
from .imaging import Image, VideoSequence
from .losses import iterate_weighted_full
from .network import ModelConfig, RecurrentFlowNet
from .synthetic import SyntheticSample


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults reproduce the reference runs."""

    learning_rate: float = 2e-4
    steps: int = 5000
    batch_size: int = 4
    lambda_smooth: float = 0.1
    gamma: float = 0.8
    seed: int = 0
    image_size: int = 128
    checkpoint_interval: int = 500
    gradient_clip_norm: float = 1.0
    min_learning_rate: float = 1e-5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.gradient_clip_norm <= 0:
            raise ValueError("gradient_clip_norm must be positive")
        if self.min_learning_rate <= 0:
            raise ValueError("min_learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    """Model parameters plus everything needed to rebuild and resume."""

    model_state: dict
    model_config: ModelConfig
    train_state: dict = field(default_factory=dict)

    def build_model(self) -> RecurrentFlowNet:
        model = RecurrentFlowNet(self.model_config,
                                 seed=self.train_state.get("seed", 0))
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def save(self, path: str | Path) -> Path:
        """Atomic write (temp file then rename) plus a JSON sidecar holding
        the architecture and step count for inspection without torch."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "model_state": {k: v.cpu() for k, v in self.model_state.items()},
            "model_config": self.model_config.to_dict(),
            "train_state": self.train_state,
        }
        tmp = path.parent / f".{path.name}.tmp.{os.getpid()}"
        torch.save(payload, tmp)
        os.replace(tmp, path)
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar_tmp = path.parent / f".{sidecar.name}.tmp.{os.getpid()}"
        sidecar_tmp.write_text(json.dumps({
            "model_config": self.model_config.to_dict(),
            "step": self.train_state.get("step"),
            "seed": self.train_state.get("seed"),
        }, indent=2))
        os.replace(sidecar_tmp, sidecar)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        return cls(
            model_state=payload["model_state"],
            model_config=ModelConfig.from_dict(payload["model_config"]),
            train_state=payload.get("train_state", {}),
        )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    return checkpoint.save(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.load(path)


def make_pairs(
    sequence: VideoSequence,
    strategy: str = "first-frame-anchor",
    max_offset: int = 3,
    seed: int = 0,
) -> list[tuple[Image, Image]]:
    """Build (fixed, moving) training pairs from one sequence.

    ``first-frame-anchor`` pairs frame 0 with every later frame, matching how
    the tracker consumes sequences. ``random-offset`` pairs each frame with a
    seeded random neighbor at most ``max_offset`` frames away.
    """
    if strategy == "first-frame-anchor":
        return [(sequence[0], sequence[i]) for i in range(1, len(sequence))]
    if strategy == "random-offset":
        if max_offset < 1:
            raise ValueError("max_offset must be >= 1")
        rng = np.random.default_rng(seed)
        pairs = []
        n = len(sequence)
        for i in range(n):
            candidates = [j for j in range(max(0, i - max_offset),
                                           min(n, i + max_offset + 1)) if j != i]
            j = int(rng.choice(candidates))
            pairs.append((sequence[i], sequence[j]))
        return pairs
    raise ValueError(f"unknown pair strategy {strategy!r}")


def _collect_pairs(
    dataset: Iterable,
    strategy: str,
    max_offset: int,
    seed: int,
) -> list[tuple[Image, Image]]:
    pairs: list[tuple[Image, Image]] = []
    for item in dataset:
        if isinstance(item, SyntheticSample):
            pairs.append((item.fixed, item.moving))
        elif isinstance(item, VideoSequence):
            pairs.extend(make_pairs(item, strategy, max_offset, seed))
        elif (isinstance(item, tuple) and len(item) == 2
              and all(isinstance(x, Image) for x in item)):
            pairs.append(item)
        else:
            raise TypeError(
                "dataset items must be SyntheticSample, VideoSequence, or "
                f"(Image, Image) pairs; got {type(item).__name__}"
            )
    if not pairs:
        raise ValueError("dataset produced no training pairs")
    shape = pairs[0][0].shape
    for fixed, moving in pairs:
        if fixed.shape != shape or moving.shape != shape:
            raise DimensionMismatch(
                f"all training images must share one shape; saw {shape} and "
                f"{fixed.shape}/{moving.shape}"
            )
    return pairs


def train(
    config: TrainConfig,
    dataset: Sequence,
    model_config: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    pair_strategy: str = "first-frame-anchor",
    max_offset: int = 3,
) -> Checkpoint:
    """Run the unsupervised optimization and return the final checkpoint.

    Writes a JSON-lines log (one record per step) when ``log_path`` or
    ``out_dir`` is given, and periodic checkpoints under ``out_dir``.
    Raises :class:`DivergenceError` the first time the loss goes non-finite.
    """
    model_config = model_config or ModelConfig()
    pairs = _collect_pairs(dataset, pair_strategy, max_offset, config.seed)
    height, width = pairs[0][0].shape
    factor = model_config.downsample_factor
    if height % factor or width % factor:
        raise DimensionMismatch(
            f"training images {height}x{width} not divisible by downsample "
            f"factor {factor}"
        )

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = RecurrentFlowNet(model_config, seed=config.seed)
    model.train()

    fixed_all = torch.tensor(
        np.stack([p[0].pixels for p in pairs])[:, None], dtype=torch.float32)
    moving_all = torch.tensor(
        np.stack([p[1].pixels for p in pairs])[:, None], dtype=torch.float32)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(config.steps, 1), eta_min=config.min_learning_rate)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        if log_path is None:
            log_path = out_path / "train_log.jsonl"

    history: list[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None
    start = time.perf_counter()
    try:
        for step in range(config.steps):
            replace = len(pairs) < config.batch_size
            idx = rng.choice(len(pairs), size=config.batch_size, replace=replace)
            idx_t = torch.from_numpy(np.sort(idx))
            fixed_b = fixed_all[idx_t]
            moving_b = moving_all[idx_t]

            terms = iterate_weighted_full(
                model, fixed_b, moving_b,
                gamma=config.gamma, lambda_smooth=config.lambda_smooth)
            loss = terms.total.mean()
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise DivergenceError(step)

            lr_now = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(),
                                           config.gradient_clip_norm)
            optimizer.step()
            scheduler.step()

            record = {
                "step": step,
                "forward_similarity": float(terms.forward_similarity.detach().mean()),
                "backward_similarity": float(terms.backward_similarity.detach().mean()),
                "smoothness": float(terms.smoothness.detach().mean()),
                "total": loss_value,
                "lr": lr_now,
                "wall_time_s": time.perf_counter() - start,
            }
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()

            if out_path is not None and (step + 1) % config.checkpoint_interval == 0:
                _snapshot(model, model_config, config, step + 1, history).save(
                    out_path / f"checkpoint_step_{step + 1:06d}.pt")
    finally:
        if log_file is not None:
            log_file.close()

    checkpoint = _snapshot(model, model_config, config, config.steps, history)
    if out_path is not None:
        checkpoint.save(out_path / "checkpoint_final.pt")
    return checkpoint


def _snapshot(model: RecurrentFlowNet, model_config: ModelConfig,
              config: TrainConfig, step: int, history: list[dict]) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(
        model_state=state,
        model_config=model_config,
        train_state={
            "step": step,
            "seed": config.seed,
            "train_config": config.to_dict(),
            "loss_history": list(history),
        },
    )


def evaluate_epe(model_or_checkpoint, samples: Sequence[SyntheticSample]) -> dict:
    """Mean endpoint error of predictions against known true fields.

    Endpoint error for one sample is the mean over pixels of the Euclidean
    distance between predicted and true displacement.
    """
    if isinstance(model_or_checkpoint, Checkpoint):
        model = model_or_checkpoint.build_model()
    else:
        model = model_or_checkpoint
    if not samples:
        raise ValueError("need at least one sample")
    per_sample = []
    for sample in samples:
        predicted = model.predict_field(sample.fixed, sample.moving)
        diff = predicted.vectors.astype(np.float64) - sample.field_gt.vectors.astype(np.float64)
        per_sample.append(float(np.hypot(diff[..., 0], diff[..., 1]).mean()))
    return {
        "mean_epe": float(np.mean(per_sample)),
        "median_epe": float(np.median(per_sample)),
        "per_sample": per_sample,
    }
