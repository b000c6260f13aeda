"""Synthetic ground truth: speckle phantoms, smooth fields, warped pairs.

Every sample built here satisfies ``warp(moving, field_gt) == fixed``
bit-exactly with this package's own warper, so endpoint error against
``field_gt`` is a meaningful oracle for registration quality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionMismatch
from .fileio import load_sequence, read_flow, read_image, write_flow, write_image
from .imaging import DisplacementField, Image, VideoSequence
from .warp import warp

_LOG_COMPRESSION = 60.0  # dynamic-range constant: mean of default phantom ~0.45


class Inclusion(NamedTuple):
    """Disc of altered echogenicity: scatterer amplitudes scale by contrast."""

    center: tuple[float, float]  # (x, y) pixels
    radius: float
    contrast: float


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a speckle phantom image."""

    size: int = 128
    speckle_density: float = 0.6
    psf_sigma_axial: float = 1.0
    psf_sigma_lateral: float = 2.0
    inclusions: tuple[Inclusion, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValueError(f"size must be >= 32, got {self.size}")
        if self.speckle_density <= 0:
            raise ValueError("speckle_density must be positive")
        if self.psf_sigma_axial <= 0 or self.psf_sigma_lateral <= 0:
            raise ValueError("point-spread sigmas must be positive")
        object.__setattr__(
            self, "inclusions", tuple(Inclusion(*i) for i in self.inclusions)
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inclusions"] = [list(i) for i in self.inclusions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["inclusions"] = tuple(
            Inclusion((c[0][0], c[0][1]), c[1], c[2]) for c in d.get("inclusions", ())
        )
        return cls(**d)


@dataclass(frozen=True)
class DeformationSpec:
    """A smooth parametric displacement field on a ``size`` x ``size`` grid.

    ``gaussian_bump``: u(p) = peak * exp(-||p - center||^2 / (2 sigma^2)).
    ``respiratory``:   u(p, t) = amplitude * sin(2 pi frequency t + phase)
    * bump(p), i.e. the bump scaled by a sinusoid of time. By convention the
    bump's peak vector should point mostly vertically (axial tissue motion).
    """

    kind: str
    size: int
    center: tuple[float, float]
    sigma: float
    peak: tuple[float, float]
    amplitude: float | None = None
    frequency: float | None = None
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian_bump", "respiratory"):
            raise ValueError(f"unknown deformation kind {self.kind!r}")
        if self.size < 32:
            raise ValueError(f"size must be >= 32, got {self.size}")
        if self.sigma < 4:
            raise ValueError(f"sigma must be >= 4 px, got {self.sigma}")
        peak_norm = float(np.hypot(*self.peak))
        if self.kind == "respiratory":
            if self.amplitude is None or self.frequency is None:
                raise ValueError("respiratory kind needs amplitude and frequency")
            if self.frequency <= 0:
                raise ValueError("frequency must be positive")
            peak_norm *= abs(self.amplitude)
        if peak_norm > 0.15 * self.size:
            raise ValueError(
                f"peak displacement {peak_norm:.2f} px exceeds 15% of "
                f"image size {self.size}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeformationSpec":
        d = dict(d)
        d["center"] = tuple(d["center"])
        d["peak"] = tuple(d["peak"])
        return cls(**d)


@dataclass(frozen=True)
class SyntheticSample:
    """A registration pair whose true field is known by construction."""

    fixed: Image
    moving: Image
    field_gt: DisplacementField


def generate_speckle(spec: PhantomSpec) -> Image:
    """Render a speckle phantom: seeded scatterers blurred by an anisotropic
    point-spread function, envelope-detected, and log-compressed to [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    n_scatterers = int(round(spec.speckle_density * size * size))
    xs = rng.uniform(0, size, n_scatterers)
    ys = rng.uniform(0, size, n_scatterers)
    amplitudes = rng.standard_normal(n_scatterers)

    for inc in spec.inclusions:
        inside = (xs - inc.center[0]) ** 2 + (ys - inc.center[1]) ** 2 <= inc.radius**2
        amplitudes[inside] *= inc.contrast

    scatter = np.zeros((size, size))
    np.add.at(scatter, (ys.astype(np.intp), xs.astype(np.intp)), amplitudes)

    # axial = rows (beam direction), lateral = columns
    field = gaussian_filter(scatter, sigma=(spec.psf_sigma_axial, spec.psf_sigma_lateral))
    envelope = np.abs(field)
    peak = envelope.max()
    if peak > 0:
        envelope = envelope / peak
    compressed = np.log1p(_LOG_COMPRESSION * envelope) / np.log1p(_LOG_COMPRESSION)
    return Image(compressed.astype(np.float32))


def _bump(spec: DeformationSpec) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(spec.size, dtype=np.float64),
                         np.arange(spec.size, dtype=np.float64), indexing="ij")
    cx, cy = spec.center
    r2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return np.exp(-r2 / (2.0 * spec.sigma**2))


def make_field(spec: DeformationSpec, t: float | None = None) -> DisplacementField:
    """Evaluate the field; ``t`` (seconds) is required for respiratory kind."""
    bump = _bump(spec)
    if spec.kind == "gaussian_bump":
        scale = 1.0
    else:
        if t is None:
            raise ValueError("respiratory field requires a time t")
        scale = spec.amplitude * np.sin(2.0 * np.pi * spec.frequency * t + spec.phase)
    vectors = np.empty((spec.size, spec.size, 2), dtype=np.float32)
    vectors[..., 0] = scale * spec.peak[0] * bump
    vectors[..., 1] = scale * spec.peak[1] * bump
    return DisplacementField(vectors)


def render_pair(template: Image, field: DisplacementField) -> SyntheticSample:
    """Deform ``template`` to get the fixed image; the template itself is the
    moving image, so ``field`` pulls moving exactly onto fixed."""
    if template.shape != field.vectors.shape[:2]:
        raise DimensionMismatch(
            f"template {template.shape} vs field {field.vectors.shape[:2]}"
        )
    fixed = warp(template, field).image
    return SyntheticSample(fixed=fixed, moving=template, field_gt=field)


def make_respiratory_sequence(
    phantom: PhantomSpec,
    motion: DeformationSpec,
    fps: float,
    duration_s: float,
) -> tuple[VideoSequence, list[DisplacementField]]:
    """Breathing-like clip: each frame is the phantom warped by the motion
    field at that frame's time. Returns the per-frame true fields alongside."""
    if motion.kind != "respiratory":
        raise ValueError(f"motion spec must be respiratory, got {motion.kind!r}")
    if phantom.size != motion.size:
        raise DimensionMismatch(
            f"phantom size {phantom.size} vs motion size {motion.size}"
        )
    if fps <= 0 or duration_s <= 0:
        raise ValueError("fps and duration_s must be positive")
    if duration_s * motion.frequency < 4:
        raise ValueError(
            f"duration {duration_s} s covers fewer than 4 periods at "
            f"{motion.frequency} Hz"
        )
    template = generate_speckle(phantom)
    n_frames = int(round(fps * duration_s))
    fields = [make_field(motion, i / fps) for i in range(n_frames)]
    frames = [warp(template, f).image for f in fields]
    return VideoSequence(tuple(frames), fps=fps), fields


def make_training_corpus(
    n_pairs: int,
    size: int = 128,
    seed: int = 0,
    max_disp: float = 5.0,
) -> list[SyntheticSample]:
    """Random bump-deformed speckle pairs for unsupervised training.

    Bump width, direction, peak magnitude (40-100% of ``max_disp``), and
    center vary per pair; each pair gets its own phantom.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if max_disp <= 0:
        raise ValueError("max_disp must be positive")
    rng = np.random.default_rng(seed)
    samples = []
    margin = 0.2 * size
    for k in range(n_pairs):
        template = generate_speckle(PhantomSpec(size=size, seed=seed * 100003 + k))
        sigma = rng.uniform(16.0, 40.0) * size / 128.0
        magnitude = rng.uniform(0.4 * max_disp, max_disp)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        center = (rng.uniform(margin, size - margin),
                  rng.uniform(margin, size - margin))
        spec = DeformationSpec(
            kind="gaussian_bump",
            size=size,
            center=center,
            sigma=float(sigma),
            peak=(float(magnitude * np.cos(angle)), float(magnitude * np.sin(angle))),
        )
        samples.append(render_pair(template, make_field(spec)))
    return samples


def save_pair_dataset(
    out_dir: str | Path,
    samples: Sequence[SyntheticSample],
    manifest_extra: dict | None = None,
) -> Path:
    """Write fixed/moving frames (16-bit PNG) and exact true fields per pair."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for idx, sample in enumerate(samples):
        pair_dir = out / f"sample_{idx:04d}"
        pair_dir.mkdir(exist_ok=True)
        write_image(sample.fixed, pair_dir / "fixed.png", bits=16)
        write_image(sample.moving, pair_dir / "moving.png", bits=16)
        write_flow(sample.field_gt, pair_dir / "field_gt.udf")
    manifest = {
        "kind": "pair",
        "n_samples": len(samples),
        "height": samples[0].fixed.height,
        "width": samples[0].fixed.width,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_pair_dataset(in_dir: str | Path) -> tuple[list[SyntheticSample], dict]:
    """Read a pair dataset back; images round-trip up to PNG quantization,
    fields exactly."""
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for pair_dir in sorted(root.glob("sample_*")):
        samples.append(SyntheticSample(
            fixed=read_image(pair_dir / "fixed.png"),
            moving=read_image(pair_dir / "moving.png"),
            field_gt=read_flow(pair_dir / "field_gt.udf"),
        ))
    if not samples:
        raise FileNotFoundError(f"no sample_* directories under {root}")
    return samples, manifest


def save_sequence_dataset(
    out_dir: str | Path,
    sequence: VideoSequence,
    fields: Sequence[DisplacementField] | None = None,
    manifest_extra: dict | None = None,
) -> Path:
    """Write frames (16-bit PNG), optional true fields, and a manifest."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for idx, frame in enumerate(sequence):
        write_image(frame, frames_dir / f"frame_{idx:04d}.png", bits=16)
    if fields is not None:
        if len(fields) != len(sequence):
            raise DimensionMismatch(
                f"{len(fields)} fields for {len(sequence)} frames"
            )
        fields_dir = out / "fields"
        fields_dir.mkdir(parents=True, exist_ok=True)
        for idx, field in enumerate(fields):
            write_flow(field, fields_dir / f"field_{idx:04d}.udf")
    manifest = {
        "kind": "sequence",
        "fps": sequence.fps,
        "n_frames": len(sequence),
        "height": sequence[0].height,
        "width": sequence[0].width,
        "has_fields": fields is not None,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_sequence_dataset(
    in_dir: str | Path,
) -> tuple[VideoSequence, list[DisplacementField] | None, dict]:
    """Inverse of :func:`save_sequence_dataset` (up to PNG quantization)."""
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    sequence = load_sequence(root / "frames", fps=manifest["fps"])
    fields = None
    if manifest.get("has_fields"):
        paths = sorted((root / "fields").glob("field_*.udf"))
        fields = [read_flow(p) for p in paths]
    return sequence, fields, manifest
