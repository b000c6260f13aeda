"""Core image, field, and sequence types.

Conventions used everywhere in the package:

* intensities are dimensionless, finite, and live in [0, 1];
* ``x`` indexes columns, ``y`` indexes rows;
* displacement vectors are stored x-component first, in pixel units.

All types are immutable after construction (the wrapped arrays are marked
read-only), so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InsufficientFrames, InvalidImage

MIN_IMAGE_SIDE = 16


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    """Single-channel 2-D intensity grid with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise InvalidImage(f"expected a 2-D grid, got shape {px.shape}")
        if px.shape[0] < MIN_IMAGE_SIDE or px.shape[1] < MIN_IMAGE_SIDE:
            raise InvalidImage(
                f"image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {px.shape}"
            )
        if not np.all(np.isfinite(px)):
            raise InvalidImage("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InvalidImage("image intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement vectors in pixel units, shape (H, W, 2).

    ``vectors[y, x, 0]`` is the x (column) component, ``vectors[y, x, 1]``
    the y (row) component.
    """

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 3 or v.shape[2] != 2:
            raise DimensionMismatch(f"expected shape (H, W, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidImage("displacement field contains non-finite values")
        object.__setattr__(self, "vectors", _freeze(v))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    def magnitude(self) -> np.ndarray:
        """Per-pixel Euclidean norm of the displacement, shape (H, W)."""
        return np.linalg.norm(self.vectors.astype(np.float64), axis=2)

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))


@dataclass(frozen=True)
class PixelLocation:
    """Integer pixel coordinate, x = column, y = row."""

    x: int
    y: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"pixel location must be non-negative, got {(self.x, self.y)}")

    def check_within(self, height: int, width: int) -> "PixelLocation":
        if not (0 <= self.x < width and 0 <= self.y < height):
            raise ValueError(
                f"pixel ({self.x}, {self.y}) outside a {width}x{height} grid"
            )
        return self


@dataclass(frozen=True)
class VideoSequence:
    """Ordered frames of uniform size plus a frame rate."""

    frames: tuple[Image, ...]
    fps: float

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise InsufficientFrames(f"need at least 2 frames, got {len(frames)}")
        shape = frames[0].shape
        for i, frame in enumerate(frames):
            if frame.shape != shape:
                raise DimensionMismatch(
                    f"frame {i} has shape {frame.shape}, expected {shape}"
                )
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", float(self.fps))

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Image:
        return self.frames[i]

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def times(self) -> np.ndarray:
        """Timestamp of each frame in seconds."""
        return np.arange(len(self.frames)) / self.fps

    def as_array(self) -> np.ndarray:
        """Stack frames into a (T, H, W) float32 array."""
        return np.stack([f.pixels for f in self.frames])


def normalize_image(raw) -> Image:
    """Affinely rescale an arbitrary finite grid into [0, 1].

    A constant grid maps to all zeros rather than raising, so degenerate
    synthetic frames cannot abort a pipeline.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidImage(f"expected a non-empty 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidImage("input contains non-finite values")
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        out = np.zeros_like(arr)
    else:
        out = (arr - lo) / (hi - lo)
    return Image(out.astype(np.float32))
