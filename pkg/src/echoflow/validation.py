"""Input coercion helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import DimensionMismatch, InvalidImage
from .imaging import DisplacementField, Image, VideoSequence


def as_image(obj) -> Image:
    """Coerce an ``Image`` or a [0, 1] 2-D array to ``Image``."""
    if isinstance(obj, Image):
        return obj
    arr = np.asarray(obj)
    if arr.ndim != 2:
        raise InvalidImage(f"expected a 2-D array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise InvalidImage(
            f"expected floating-point pixels in [0, 1], got dtype {arr.dtype}; "
            "use normalize_image for raw intensities"
        )
    return Image(arr.astype(np.float32, copy=False))


def as_field(obj) -> DisplacementField:
    """Coerce a ``DisplacementField`` or an (H, W, 2) array."""
    if isinstance(obj, DisplacementField):
        return obj
    arr = np.asarray(obj)
    return DisplacementField(arr.astype(np.float32, copy=False))


def as_pair(obj) -> tuple[Image, Image]:
    """Coerce a (fixed, moving) pair and check the shapes agree."""
    try:
        fixed_raw, moving_raw = obj
    except (TypeError, ValueError):
        raise TypeError(
            f"expected a (fixed, moving) pair, got {type(obj).__name__}"
        ) from None
    fixed, moving = as_image(fixed_raw), as_image(moving_raw)
    if fixed.shape != moving.shape:
        raise DimensionMismatch(
            f"fixed {fixed.shape} vs moving {moving.shape}"
        )
    return fixed, moving


def as_sequence(obj, fps: float | None = None) -> VideoSequence:
    """Coerce a ``VideoSequence``, a (T, H, W) array, or an iterable of
    frames; ``fps`` is required for anything but a ``VideoSequence``."""
    if isinstance(obj, VideoSequence):
        return obj
    if fps is None:
        raise ValueError("fps is required when the input is not a VideoSequence")
    arr = np.asarray(obj) if isinstance(obj, np.ndarray) else None
    if arr is not None:
        if arr.ndim != 3:
            raise DimensionMismatch(f"expected (T, H, W), got {arr.shape}")
        frames: Iterable = (arr[i] for i in range(arr.shape[0]))
    else:
        frames = obj
    return VideoSequence(tuple(as_image(f) for f in frames), fps=fps)
