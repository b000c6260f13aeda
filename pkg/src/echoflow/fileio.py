"""File formats: UDF1 displacement fields, grayscale PNG frames, sequences.

UDF1 layout (little-endian throughout):

====== ======= ==============================================
bytes  type    meaning
====== ======= ==============================================
0-3    ASCII   magic ``"UDF1"``
4-7    uint32  width
8-11   uint32  height
12-    float32 height*width*(u_x, u_y) pairs, row-major
====== ======= ==============================================
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import IO, Iterable, Union

import numpy as np
from PIL import Image as PILImage

from .errors import DimensionMismatch, FormatError, InsufficientFrames, InvalidImage
from .imaging import DisplacementField, Image, VideoSequence

FLOW_MAGIC = b"UDF1"

PathLike = Union[str, Path]


def write_flow(field: DisplacementField, destination: PathLike | IO[bytes]) -> None:
    """Serialize a displacement field; ``read_flow`` restores it bit-exactly."""
    header = FLOW_MAGIC + struct.pack("<II", field.width, field.height)
    payload = np.ascontiguousarray(field.vectors, dtype="<f4").tobytes()
    if hasattr(destination, "write"):
        destination.write(header + payload)
    else:
        Path(destination).write_bytes(header + payload)


def read_flow(source: PathLike | IO[bytes]) -> DisplacementField:
    """Parse one UDF1 record from a path or binary stream."""
    if hasattr(source, "read"):
        return _read_flow_stream(source)
    with open(source, "rb") as fh:
        return _read_flow_stream(fh)


def _read_flow_stream(fh: IO[bytes]) -> DisplacementField:
    header = fh.read(12)
    if len(header) < 12:
        raise FormatError("truncated UDF1 header")
    if header[:4] != FLOW_MAGIC:
        raise FormatError(f"bad magic bytes {header[:4]!r}, expected {FLOW_MAGIC!r}")
    width, height = struct.unpack("<II", header[4:12])
    if width == 0 or height == 0:
        raise FormatError(f"degenerate field dimensions {width}x{height}")
    expected = height * width * 2 * 4
    payload = fh.read(expected)
    if len(payload) < expected:
        raise FormatError(
            f"truncated UDF1 payload: expected {expected} bytes, got {len(payload)}"
        )
    vectors = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2)
    return DisplacementField(vectors)


def write_image(image: Image, destination: PathLike, bits: int = 16) -> None:
    """Write an image as 8- or 16-bit grayscale PNG."""
    if bits == 8:
        data = np.round(image.pixels * 255.0).astype(np.uint8)
        PILImage.fromarray(data, mode="L").save(destination, format="PNG")
    elif bits == 16:
        data = np.round(image.pixels.astype(np.float64) * 65535.0).astype(np.uint16)
        PILImage.fromarray(data).save(destination, format="PNG")
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")


def read_image(source: PathLike) -> Image:
    """Read an 8- or 16-bit grayscale PNG, scaling intensities to [0, 1].

    Scaling divides by the dtype maximum (255 or 65535) rather than
    per-frame min/max, so frames of one sequence share an intensity map.
    """
    try:
        img = PILImage.open(source)
    except PILImage.UnidentifiedImageError as exc:
        raise FormatError(f"{source}: not a recognizable image file") from exc
    with img:
        if img.mode == "L":
            scale = 255.0
        elif img.mode in ("I;16", "I"):
            scale = 65535.0
        else:
            raise FormatError(
                f"{source}: unsupported PNG mode {img.mode!r}; expected 8/16-bit grayscale"
            )
        arr = np.asarray(img, dtype=np.float64)
    if arr.max() > scale:
        raise FormatError(f"{source}: sample values exceed {int(scale)}")
    return Image((arr / scale).astype(np.float32))


def load_sequence(source: PathLike | Iterable, fps: float) -> VideoSequence:
    """Build a VideoSequence from a directory of PNG frames or a frame list.

    Directory frames are ordered by lexicographic filename. List elements may
    be ``Image`` instances or arrays already scaled to [0, 1].
    """
    if isinstance(source, (str, Path)):
        directory = Path(source)
        if not directory.is_dir():
            raise FileNotFoundError(f"{directory}: no such directory")
        paths = sorted(directory.glob("*.png"))
        if len(paths) < 2:
            raise InsufficientFrames(
                f"{source}: found {len(paths)} PNG frames, need at least 2"
            )
        frames = [read_image(p) for p in paths]
    else:
        frames = []
        for item in source:
            if isinstance(item, Image):
                frames.append(item)
            else:
                arr = np.asarray(item, dtype=np.float32)
                if not np.all(np.isfinite(arr)):
                    raise InvalidImage("frame contains non-finite values")
                frames.append(Image(arr))
        if len(frames) < 2:
            raise InsufficientFrames(f"got {len(frames)} frames, need at least 2")
    shape = frames[0].shape
    for i, frame in enumerate(frames):
        if frame.shape != shape:
            raise DimensionMismatch(
                f"frame {i} has shape {frame.shape}, expected {shape}"
            )
    return VideoSequence(tuple(frames), fps)
