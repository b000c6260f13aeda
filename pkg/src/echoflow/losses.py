"""Unsupervised training objective: cyclic MS-SSIM plus flow smoothness.

The loss never sees ground-truth fields. A predicted field warps the moving
image onto the fixed one; a second pass of the same network warps that
reconstruction back. Both reconstructions are scored with multi-scale
structural similarity and the fields are regularized by first-order total
variation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionMismatch, ScaleError
from .imaging import DisplacementField, Image
from .warp import warp_tensor

# Canonical five-scale MS-SSIM exponents; truncated and renormalized when
# fewer scales are used.
_FIVE_SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class MsSsimConfig:
    """Multi-scale SSIM parameters for unit-dynamic-range images."""

    scales: int = 3
    window_size: int = 11
    sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        if self.scales > len(_FIVE_SCALE_WEIGHTS):
            raise ValueError(f"at most {len(_FIVE_SCALE_WEIGHTS)} scales supported")
        if self.window_size % 2 != 1 or self.window_size < 3:
            raise ValueError("window_size must be odd and >= 3")

    @property
    def scale_weights(self) -> tuple[float, ...]:
        w = _FIVE_SCALE_WEIGHTS[: self.scales]
        total = sum(w)
        return tuple(v / total for v in w)

    def min_side(self) -> int:
        return self.window_size * 2 ** (self.scales - 1)


def gaussian_window(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    """Normalized 1-D Gaussian window."""
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _window_mean(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable valid-mode Gaussian filtering
    channels = x.shape[1]
    kh = win.view(1, 1, -1, 1).expand(channels, 1, -1, 1)
    kw = win.view(1, 1, 1, -1).expand(channels, 1, 1, -1)
    x = F.conv2d(x, kh, groups=channels)
    return F.conv2d(x, kw, groups=channels)


def ms_ssim_tensor(
    a: torch.Tensor, b: torch.Tensor, config: MsSsimConfig | None = None
) -> torch.Tensor:
    """MS-SSIM between two (B, 1, H, W) tensors in [0, 1]; returns shape (B,).

    Contrast/structure terms contribute at every scale and the luminance
    term only at the coarsest. Per-scale means are clamped at zero before
    the fractional exponents so the result stays defined; the value lies in
    [0, 1] with 1 exactly for identical inputs.
    """
    config = config or MsSsimConfig()
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < config.min_side():
        raise ScaleError(
            f"min dimension {min(a.shape[-2:])} < {config.min_side()} required "
            f"for {config.scales} scales of a {config.window_size}-pixel window"
        )
    win = gaussian_window(config.window_size, config.sigma, dtype=a.dtype).to(a.device)
    weights = config.scale_weights

    per_scale: list[torch.Tensor] = []
    for level in range(config.scales):
        mu_a = _window_mean(a, win)
        mu_b = _window_mean(b, win)
        var_a = _window_mean(a * a, win) - mu_a * mu_a
        var_b = _window_mean(b * b, win) - mu_b * mu_b
        cov = _window_mean(a * b, win) - mu_a * mu_b
        cs_map = (2.0 * cov + config.c2) / (var_a + var_b + config.c2)
        if level == config.scales - 1:
            lum_map = (2.0 * mu_a * mu_b + config.c1) / (mu_a**2 + mu_b**2 + config.c1)
            per_scale.append((lum_map * cs_map).mean(dim=(1, 2, 3)))
        else:
            per_scale.append(cs_map.mean(dim=(1, 2, 3)))
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)

    result = torch.ones_like(per_scale[0])
    for value, weight in zip(per_scale, weights):
        result = result * torch.clamp(value, min=0.0) ** weight
    return result


def ms_ssim(a, b, config: MsSsimConfig | None = None) -> float:
    """Scalar MS-SSIM between two images (``Image`` or 2-D arrays)."""
    pa = a.pixels if isinstance(a, Image) else np.asarray(a)
    pb = b.pixels if isinstance(b, Image) else np.asarray(b)
    if pa.shape != pb.shape:
        raise DimensionMismatch(f"shape {pa.shape} vs {pb.shape}")
    dtype = torch.float64 if pa.dtype == np.float64 else torch.float32
    ta = torch.tensor(pa, dtype=dtype)[None, None]
    tb = torch.tensor(pb, dtype=dtype)[None, None]
    with torch.no_grad():
        value = ms_ssim_tensor(ta, tb, config)
    return float(value[0])


def smoothness_tensor(flow: torch.Tensor) -> torch.Tensor:
    """First-order total variation of a (B, 2, H, W) flow; returns (B,).

    Sum over the four component/axis combinations of the mean absolute
    forward difference.
    """
    dx = (flow[:, :, :, 1:] - flow[:, :, :, :-1]).abs().mean(dim=(2, 3))
    dy = (flow[:, :, 1:, :] - flow[:, :, :-1, :]).abs().mean(dim=(2, 3))
    return dx.sum(dim=1) + dy.sum(dim=1)


def smoothness(field) -> float:
    """Total-variation roughness of a displacement field (scalar, >= 0)."""
    vectors = field.vectors if isinstance(field, DisplacementField) else np.asarray(field)
    if vectors.ndim != 3 or vectors.shape[2] != 2:
        raise DimensionMismatch(f"expected (H, W, 2), got {vectors.shape}")
    if vectors.shape[0] < 2 or vectors.shape[1] < 2:
        raise DimensionMismatch("field must be at least 2x2")
    t = torch.tensor(vectors, dtype=torch.float64)
    t = t.permute(2, 0, 1)[None]
    return float(smoothness_tensor(t)[0])


@dataclass(frozen=True)
class LossBreakdown:
    """Cyclic-loss terms for one image pair."""

    forward_similarity: float
    backward_similarity: float
    smoothness: float
    lambda_smooth: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "forward_similarity": self.forward_similarity,
            "backward_similarity": self.backward_similarity,
            "smoothness": self.smoothness,
            "lambda_smooth": self.lambda_smooth,
            "total": self.total,
        }


class CyclicTerms(NamedTuple):
    """Tensor-valued loss terms (batch-shaped), keeping the autograd graph."""

    forward_similarity: torch.Tensor
    backward_similarity: torch.Tensor
    smoothness: torch.Tensor
    total: torch.Tensor
    forward_field: torch.Tensor
    backward_field: torch.Tensor


def cyclic_terms(
    model,
    fixed: torch.Tensor,
    moving: torch.Tensor,
    lambda_smooth: float = 0.1,
    config: MsSsimConfig | None = None,
) -> CyclicTerms:
    """Differentiable cyclic loss on (B, 1, H, W) tensors.

    ``model(fixed, moving)`` must yield an object whose ``full`` attribute is
    the list of full-resolution flow iterates, the last being the prediction.
    """
    u_fm = model(fixed, moving).full[-1]
    recon_fixed, _ = warp_tensor(moving, u_fm)
    u_mf = model(moving, recon_fixed).full[-1]
    recon_moving, _ = warp_tensor(recon_fixed, u_mf)

    fwd = 1.0 - ms_ssim_tensor(fixed, recon_fixed, config)
    bwd = 1.0 - ms_ssim_tensor(moving, recon_moving, config)
    smooth = 0.5 * (smoothness_tensor(u_fm) + smoothness_tensor(u_mf))
    total = fwd + bwd + lambda_smooth * smooth
    return CyclicTerms(fwd, bwd, smooth, total, u_fm, u_mf)


def _pair_tensors(model, fixed, moving) -> tuple[torch.Tensor, torch.Tensor]:
    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.float32
    fa = fixed.pixels if isinstance(fixed, Image) else np.asarray(fixed)
    ma = moving.pixels if isinstance(moving, Image) else np.asarray(moving)
    if fa.shape != ma.shape:
        raise DimensionMismatch(f"fixed {fa.shape} vs moving {ma.shape}")
    ft = torch.tensor(fa, dtype=dtype)[None, None]
    mt = torch.tensor(ma, dtype=dtype)[None, None]
    return ft, mt


def cyclic_loss(
    model,
    fixed,
    moving,
    lambda_smooth: float = 0.1,
    config: MsSsimConfig | None = None,
) -> LossBreakdown:
    """Evaluate the cyclic loss for one pair and report its terms."""
    ft, mt = _pair_tensors(model, fixed, moving)
    with torch.no_grad():
        terms = cyclic_terms(model, ft, mt, lambda_smooth, config)
    return LossBreakdown(
        forward_similarity=float(terms.forward_similarity[0]),
        backward_similarity=float(terms.backward_similarity[0]),
        smoothness=float(terms.smoothness[0]),
        lambda_smooth=lambda_smooth,
        total=float(terms.total[0]),
    )


class WeightedCyclicTerms(NamedTuple):
    """Iterate-weighted total plus the final iterate's own loss terms."""

    total: torch.Tensor
    forward_similarity: torch.Tensor
    backward_similarity: torch.Tensor
    smoothness: torch.Tensor


def iterate_weighted_full(
    model,
    fixed: torch.Tensor,
    moving: torch.Tensor,
    gamma: float = 0.8,
    lambda_smooth: float = 0.1,
    config: MsSsimConfig | None = None,
) -> WeightedCyclicTerms:
    """Exponentially weighted cyclic loss over the flow iterates.

    Iterate k (of N) contributes ``gamma**(N - k)`` times its cyclic total.
    The forward reconstruction is re-evaluated per iterate; the backward leg
    of the cycle is computed once from the final forward field to bound the
    cost of the recurrent refinement. All tensors are batch-shaped (B,).
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    iterates = model(fixed, moving).full
    n = len(iterates)

    u_final = iterates[-1]
    recon_fixed_final, _ = warp_tensor(moving, u_final)
    u_back = model(moving, recon_fixed_final).full[-1]
    recon_moving, _ = warp_tensor(recon_fixed_final, u_back)
    backward_sim = 1.0 - ms_ssim_tensor(moving, recon_moving, config)
    smooth_back = smoothness_tensor(u_back)

    total = torch.zeros_like(backward_sim)
    final_fwd = final_smooth = None
    for k, u_k in enumerate(iterates):
        if k == n - 1:
            recon_k = recon_fixed_final
        else:
            recon_k, _ = warp_tensor(moving, u_k)
        fwd_k = 1.0 - ms_ssim_tensor(fixed, recon_k, config)
        smooth_k = 0.5 * (smoothness_tensor(u_k) + smooth_back)
        total_k = fwd_k + backward_sim + lambda_smooth * smooth_k
        total = total + gamma ** (n - 1 - k) * total_k
        if k == n - 1:
            final_fwd, final_smooth = fwd_k, smooth_k
    return WeightedCyclicTerms(total, final_fwd, backward_sim, final_smooth)


def iterate_weighted_terms(
    model,
    fixed: torch.Tensor,
    moving: torch.Tensor,
    gamma: float = 0.8,
    lambda_smooth: float = 0.1,
    config: MsSsimConfig | None = None,
) -> torch.Tensor:
    """Iterate-weighted cyclic loss totals only; shape (B,)."""
    return iterate_weighted_full(model, fixed, moving, gamma, lambda_smooth, config).total


def iterate_weighted_loss(
    model,
    fixed,
    moving,
    gamma: float = 0.8,
    lambda_smooth: float = 0.1,
    config: MsSsimConfig | None = None,
) -> float:
    """Scalar iterate-weighted cyclic loss for one image pair."""
    ft, mt = _pair_tensors(model, fixed, moving)
    with torch.no_grad():
        total = iterate_weighted_terms(model, ft, mt, gamma, lambda_smooth, config)
    return float(total[0])
