"""Recurrent all-pairs flow network.

Given a fixed/moving image pair the network extracts convolutional features
at 1/4 or 1/8 resolution, builds an all-pairs correlation pyramid between
them, and refines a displacement field through a fixed number of
convolutional-GRU update steps. Each feature-resolution iterate is
bilinearly upsampled (components scaled by the downsample factor) to full
resolution; the last iterate is the registration output.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionMismatch
from .imaging import DisplacementField, Image
from .warp import bilinear_sample


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for the flow network."""

    feature_dim: int = 96
    context_dim: int = 64
    hidden_dim: int = 96
    downsample_factor: int = 8
    pyramid_levels: int = 4
    lookup_radius: int = 4
    iterations: int = 8

    def __post_init__(self):
        for name in ("feature_dim", "context_dim", "hidden_dim", "pyramid_levels",
                     "lookup_radius", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.downsample_factor not in (4, 8):
            raise ValueError(
                f"downsample_factor must be 4 or 8, got {self.downsample_factor}"
            )

    @property
    def lookup_length(self) -> int:
        return self.pyramid_levels * (2 * self.lookup_radius + 1) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class FlowPrediction:
    """All refinement iterates at full resolution; the last is the output."""

    iterates: tuple[DisplacementField, ...]

    @property
    def final(self) -> DisplacementField:
        return self.iterates[-1]

    def __len__(self) -> int:
        return len(self.iterates)


class FlowIterates(NamedTuple):
    """Tensor-valued forward output: feature-scale flows, their increments,
    and full-resolution upsampled flows (one entry per update step)."""

    feature: list[torch.Tensor]
    deltas: list[torch.Tensor]
    full: list[torch.Tensor]


class CorrelationPyramid:
    """All-pairs feature correlation with 2x2 mean-pooled coarser levels.

    Level 0 holds ``C0[i, j, k, l] = <f_fixed(i, j), f_moving(k, l)> / sqrt(D)``
    over all position pairs; level ``l`` pools the moving-position axes.
    """

    def __init__(self, f_fixed: torch.Tensor, f_moving: torch.Tensor,
                 levels: int = 4, radius: int = 4):
        if f_fixed.shape != f_moving.shape:
            raise DimensionMismatch(
                f"feature maps {tuple(f_fixed.shape)} vs {tuple(f_moving.shape)}"
            )
        batch, dim, height, width = f_fixed.shape
        if min(height, width) < 2 ** (levels - 1):
            raise DimensionMismatch(
                f"{height}x{width} feature grid cannot support {levels} pyramid levels"
            )
        self.levels = levels
        self.radius = radius
        self.batch = batch
        self.height = height
        self.width = width

        flat_fixed = f_fixed.reshape(batch, dim, height * width)
        flat_moving = f_moving.reshape(batch, dim, height * width)
        corr = torch.matmul(flat_fixed.transpose(1, 2), flat_moving)
        corr = corr / dim**0.5
        corr = corr.reshape(batch * height * width, 1, height, width)

        self.volumes = [corr]
        for _ in range(levels - 1):
            corr = F.avg_pool2d(corr, 2)
            self.volumes.append(corr)

    def level_tensor(self, level: int) -> torch.Tensor:
        """Level ``level`` reshaped to (B, h, w, h_l, w_l) for inspection."""
        vol = self.volumes[level]
        return vol.reshape(self.batch, self.height, self.width, *vol.shape[-2:])

    def lookup(self, flow: torch.Tensor) -> torch.Tensor:
        """Sample correlation windows around the flow-displaced positions.

        ``flow`` is (B, 2, h, w) at feature resolution; the result is
        (B, levels * (2r + 1)**2, h, w).
        """
        if flow.shape[-2:] != (self.height, self.width):
            raise DimensionMismatch(
                f"flow grid {tuple(flow.shape[-2:])} vs features "
                f"({self.height}, {self.width})"
            )
        batch, _, height, width = flow.shape
        r = self.radius
        side = 2 * r + 1
        device, dtype = flow.device, flow.dtype

        gy, gx = torch.meshgrid(
            torch.arange(height, dtype=dtype, device=device),
            torch.arange(width, dtype=dtype, device=device),
            indexing="ij",
        )
        cx = (gx.unsqueeze(0) + flow[:, 0]).reshape(batch * height * width, 1)
        cy = (gy.unsqueeze(0) + flow[:, 1]).reshape(batch * height * width, 1)

        dy, dx = torch.meshgrid(
            torch.arange(-r, r + 1, dtype=dtype, device=device),
            torch.arange(-r, r + 1, dtype=dtype, device=device),
            indexing="ij",
        )
        dx = dx.reshape(1, side * side)
        dy = dy.reshape(1, side * side)

        out = []
        for level, vol in enumerate(self.volumes):
            scale = 2.0**level
            xs = cx / scale + dx
            ys = cy / scale + dy
            values, _ = bilinear_sample(vol, xs, ys)
            out.append(values.reshape(batch, height, width, side * side))
        stacked = torch.cat(out, dim=3)
        return stacked.permute(0, 3, 1, 2).contiguous()


class ResidualUnit(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, norm: str):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm1 = _make_norm(norm, out_ch)
        self.norm2 = _make_norm(norm, out_ch)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + self.skip(x))


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class Encoder(nn.Module):
    """Convolutional encoder producing a feature grid at 1/4 or 1/8 scale."""

    def __init__(self, out_dim: int, downsample_factor: int, norm: str):
        super().__init__()
        self.stem = nn.Conv2d(1, 32, 7, stride=2, padding=3)
        self.stem_norm = _make_norm(norm, 32)
        stages = [ResidualUnit(32, 48, 2, norm)]
        if downsample_factor == 8:
            stages.append(ResidualUnit(48, 64, 2, norm))
            last = 64
        else:
            last = 48
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(last, out_dim, 1)

    def forward(self, x):
        x = F.relu(self.stem_norm(self.stem(x)))
        x = self.stages(x)
        return self.head(x)


class MotionEncoder(nn.Module):
    """Mix correlation features with the current flow estimate."""

    def __init__(self, lookup_length: int):
        super().__init__()
        self.conv_corr = nn.Conv2d(lookup_length, 96, 1)
        self.conv_flow1 = nn.Conv2d(2, 64, 7, padding=3)
        self.conv_flow2 = nn.Conv2d(64, 32, 3, padding=1)
        self.conv_out = nn.Conv2d(96 + 32, 78, 3, padding=1)
        self.out_dim = 78 + 2

    def forward(self, corr, flow):
        c = F.relu(self.conv_corr(corr))
        f = F.relu(self.conv_flow1(flow))
        f = F.relu(self.conv_flow2(f))
        m = F.relu(self.conv_out(torch.cat([c, f], dim=1)))
        return torch.cat([m, flow], dim=1)


class ConvGRU(nn.Module):
    def __init__(self, hidden_dim: int, input_dim: int):
        super().__init__()
        both = hidden_dim + input_dim
        self.conv_z = nn.Conv2d(both, hidden_dim, 3, padding=1)
        self.conv_r = nn.Conv2d(both, hidden_dim, 3, padding=1)
        self.conv_q = nn.Conv2d(both, hidden_dim, 3, padding=1)

    def forward(self, h, x):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.conv_z(hx))
        r = torch.sigmoid(self.conv_r(hx))
        q = torch.tanh(self.conv_q(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


class FlowHead(nn.Module):
    def __init__(self, hidden_dim: int, mid: int = 128):
        super().__init__()
        self.conv1 = nn.Conv2d(hidden_dim, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, 2, 3, padding=1)

    def forward(self, h):
        return self.conv2(F.relu(self.conv1(h)))


class UpdateBlock(nn.Module):
    """One recurrent refinement step: correlation + flow -> (hidden', dflow).

    The hidden state is a gated convex combination of tanh-bounded values,
    so its components stay strictly inside (-1, 1).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.motion = MotionEncoder(config.lookup_length)
        self.gru = ConvGRU(config.hidden_dim, config.context_dim + self.motion.out_dim)
        self.flow_head = FlowHead(config.hidden_dim)

    def forward(self, hidden, context, corr, flow):
        features = torch.cat([context, self.motion(corr, flow)], dim=1)
        hidden = self.gru(hidden, features)
        return hidden, self.flow_head(hidden)


class RecurrentFlowNet(nn.Module):
    """End-to-end flow predictor; see the module docstring for the dataflow."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        self.seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.fnet = Encoder(self.config.feature_dim,
                                self.config.downsample_factor, "instance")
            self.cnet = Encoder(self.config.hidden_dim + self.config.context_dim,
                                self.config.downsample_factor, "none")
            self.update = UpdateBlock(self.config)

    def _check_divisible(self, height: int, width: int) -> None:
        factor = self.config.downsample_factor
        if height % factor or width % factor:
            raise DimensionMismatch(
                f"{height}x{width} not divisible by downsample factor {factor}"
            )

    def encode(self, image: torch.Tensor, which: str = "feature") -> torch.Tensor:
        """Feature or context encoding of a (B, 1, H, W) tensor."""
        self._check_divisible(*image.shape[-2:])
        if which == "feature":
            return self.fnet(image)
        if which == "context":
            return self.cnet(image)
        raise ValueError(f"which must be 'feature' or 'context', got {which!r}")

    def encode_features(self, image: Image, which: str = "feature") -> np.ndarray:
        """Encode a single image; returns an (h, w, D) array."""
        tensor = torch.tensor(image.pixels, dtype=self._dtype())[None, None]
        with torch.no_grad():
            out = self.encode(tensor, which)
        return out[0].permute(1, 2, 0).numpy()

    def _dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor) -> FlowIterates:
        if fixed.shape != moving.shape:
            raise DimensionMismatch(
                f"fixed {tuple(fixed.shape)} vs moving {tuple(moving.shape)}"
            )
        self._check_divisible(*fixed.shape[-2:])
        cfg = self.config
        factor = cfg.downsample_factor
        batch, _, height, width = fixed.shape

        fmap_fixed = self.fnet(fixed)
        fmap_moving = self.fnet(moving)
        pyramid = CorrelationPyramid(fmap_fixed, fmap_moving,
                                     cfg.pyramid_levels, cfg.lookup_radius)

        ctx = self.cnet(fixed)
        hidden, context = torch.split(ctx, [cfg.hidden_dim, cfg.context_dim], dim=1)
        hidden = torch.tanh(hidden)
        context = torch.relu(context)

        flow = torch.zeros(batch, 2, height // factor, width // factor,
                           dtype=fixed.dtype, device=fixed.device)
        feature_flows: list[torch.Tensor] = []
        deltas: list[torch.Tensor] = []
        full_flows: list[torch.Tensor] = []
        for _ in range(cfg.iterations):
            if self.training:
                flow = flow.detach()
            corr = pyramid.lookup(flow)
            hidden, dflow = self.update(hidden, context, corr, flow)
            flow = flow + dflow
            feature_flows.append(flow)
            deltas.append(dflow)
            full_flows.append(self._upsample(flow, height, width))
        return FlowIterates(feature_flows, deltas, full_flows)

    def _upsample(self, flow: torch.Tensor, height: int, width: int) -> torch.Tensor:
        up = F.interpolate(flow, size=(height, width), mode="bilinear",
                           align_corners=True)
        return up * self.config.downsample_factor

    def predict(self, fixed: Image, moving: Image) -> FlowPrediction:
        """Register a fixed/moving pair; returns all full-resolution iterates."""
        if fixed.shape != moving.shape:
            raise DimensionMismatch(f"fixed {fixed.shape} vs moving {moving.shape}")
        dtype = self._dtype()
        ft = torch.tensor(fixed.pixels, dtype=dtype)[None, None]
        mt = torch.tensor(moving.pixels, dtype=dtype)[None, None]
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                iterates = self.forward(ft, mt)
        finally:
            self.train(was_training)
        fields = tuple(
            DisplacementField(f[0].permute(1, 2, 0).numpy().astype(np.float32))
            for f in iterates.full
        )
        return FlowPrediction(fields)

    def predict_field(self, fixed: Image, moving: Image) -> DisplacementField:
        """Final displacement field only (the common case)."""
        return self.predict(fixed, moving).final


def predict_flow(fixed: Image, moving: Image, model: RecurrentFlowNet) -> FlowPrediction:
    """Functional wrapper around :meth:`RecurrentFlowNet.predict`."""
    return model.predict(fixed, moving)


def throughput_report(model: RecurrentFlowNet, image_size: int = 128,
                      n_trials: int = 10, seed: int = 0) -> dict:
    """Measure inference rate on random same-size pairs.

    Purely a measurement: reports the median frames-per-second over
    ``n_trials`` single-pair predictions, with the configuration that
    produced it. No throughput threshold is asserted here.
    """
    if n_trials < 5:
        raise ValueError(f"need at least 5 trials, got {n_trials}")
    rng = np.random.default_rng(seed)
    fixed = Image(rng.random((image_size, image_size), dtype=np.float32))
    moving = Image(rng.random((image_size, image_size), dtype=np.float32))
    model.predict(fixed, moving)  # warm-up outside the timed trials
    times = []
    for _ in range(n_trials):
        start = time.perf_counter()
        model.predict(fixed, moving)
        times.append(time.perf_counter() - start)
    median_latency = float(np.median(times))
    return {
        "fps_median": 1.0 / median_latency,
        "latency_median_s": median_latency,
        "latency_per_trial_s": times,
        "image_size": image_size,
        "iterations": model.config.iterations,
        "downsample_factor": model.config.downsample_factor,
        "n_trials": n_trials,
    }
