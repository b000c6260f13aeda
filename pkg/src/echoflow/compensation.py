"""Sequence-level motion analysis: track, stabilize, report, estimate rate.

The first frame of a sequence is the fixed reference. A flow model predicts
the field pulling each later frame onto it; per-pixel displacement magnitude
is tracked over time, frames are warped back to cancel the motion, and the
dominant frequency of the displacement trace gives the breathing rate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InsufficientData,
    NoDominantPeak,
)
from .fileio import write_flow
from .imaging import DisplacementField, Image, VideoSequence
from .warp import warp

# Below this average displacement (pixels) a clip is effectively static and
# a reduction percentage would be noise over noise.
MIN_REPORTABLE_MOTION_PX = 0.05

DEFAULT_BAND_HZ = (0.05, 1.5)


def _as_field_predictor(model) -> Callable[[Image, Image], DisplacementField]:
    """Accept anything that can map (fixed, moving) -> DisplacementField."""
    if hasattr(model, "predict_field"):
        return model.predict_field
    if hasattr(model, "predict"):
        return lambda fixed, moving: model.predict(fixed, moving).final
    if callable(model):
        def call(fixed: Image, moving: Image) -> DisplacementField:
            result = model(fixed, moving)
            return result.final if hasattr(result, "final") else result
        return call
    raise TypeError(
        f"{type(model).__name__} is not a flow model (needs predict_field, "
        "predict, or plain callable)"
    )


@dataclass(frozen=True)
class DisplacementTrack:
    """Per-pixel displacement magnitude for every frame after the first.

    ``magnitudes[i - 1, y, x]`` is the length in pixels of the displacement
    of frame ``i`` relative to frame 0. The optional per-frame fields are
    retained for export and re-use.
    """

    magnitudes: np.ndarray
    fps: float
    fields: tuple[DisplacementField, ...] | None = None

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        if mags.ndim != 3:
            raise DimensionMismatch(
                f"magnitudes must be (frames, H, W), got {mags.shape}"
            )
        if not np.isfinite(mags).all() or (mags < 0).any():
            raise ValueError("magnitudes must be finite and non-negative")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.fields is not None and len(self.fields) != mags.shape[0]:
            raise DimensionMismatch(
                f"{len(self.fields)} fields for {mags.shape[0]} tracked frames"
            )
        mags.flags.writeable = False
        object.__setattr__(self, "magnitudes", mags)
        if self.fields is not None:
            object.__setattr__(self, "fields", tuple(self.fields))

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    def per_frame_mean(self) -> np.ndarray:
        """Mean displacement of each tracked frame (pixels)."""
        return self.magnitudes.mean(axis=(1, 2))

    def overall_mean(self) -> float:
        """Mean displacement over all tracked frames and pixels (pixels)."""
        return float(self.magnitudes.mean())

    def pixel_trace(self, x: int, y: int) -> np.ndarray:
        """Displacement-over-time series for one pixel."""
        height, width = self.magnitudes.shape[1:]
        if not (0 <= x < width and 0 <= y < height):
            raise IndexError(f"pixel ({x}, {y}) outside {height}x{width} grid")
        return self.magnitudes[:, y, x].copy()

    def mean_trace(self) -> np.ndarray:
        """Displacement-over-time series mean-pooled over all pixels."""
        return self.per_frame_mean()

    def times(self) -> np.ndarray:
        """Timestamps (seconds) of the tracked frames (frame 1 onward)."""
        return (np.arange(self.n_frames) + 1) / self.fps


@dataclass(frozen=True)
class CompensationReport:
    """Before/after displacement statistics for one stabilized clip."""

    avg_before: float
    avg_after: float
    reduction_percent: float | None
    per_frame_before: tuple[float, ...]
    per_frame_after: tuple[float, ...]
    fps: float
    model_id: str = ""

    def as_dict(self) -> dict:
        return {
            "avg_before_px": self.avg_before,
            "avg_after_px": self.avg_after,
            "reduction_percent": self.reduction_percent,
            "per_frame_before_px": list(self.per_frame_before),
            "per_frame_after_px": list(self.per_frame_after),
            "fps": self.fps,
            "model_id": self.model_id,
        }

    def to_json(self, dest: str | Path) -> Path:
        dest = Path(dest)
        dest.write_text(json.dumps(self.as_dict(), indent=2))
        return dest


@dataclass(frozen=True)
class SpectrumEstimate:
    """Dominant-frequency readout of a displacement trace."""

    dominant_frequency: float
    rate_bpm: float
    frequency_resolution: float
    frequencies: np.ndarray
    power: np.ndarray
    band: tuple[float, float]

    def as_dict(self) -> dict:
        return {
            "dominant_frequency_hz": self.dominant_frequency,
            "rate_bpm": self.rate_bpm,
            "frequency_resolution_hz": self.frequency_resolution,
            "band_hz": list(self.band),
            "spectrum": [
                [float(f), float(p)]
                for f, p in zip(self.frequencies, self.power)
            ],
        }


def track_sequence(model, seq: VideoSequence,
                   keep_fields: bool = True) -> DisplacementTrack:
    """Register every frame i >= 1 against frame 0 and record ``||u||``."""
    predict = _as_field_predictor(model)
    fixed = seq[0]
    fields = []
    magnitudes = np.empty((len(seq) - 1, fixed.height, fixed.width))
    for i in range(1, len(seq)):
        field = predict(fixed, seq[i])
        if field.vectors.shape[:2] != fixed.shape:
            raise DimensionMismatch(
                f"model produced {field.vectors.shape[:2]} field for "
                f"{fixed.shape} frames"
            )
        magnitudes[i - 1] = field.magnitude()
        if keep_fields:
            fields.append(field)
    return DisplacementTrack(
        magnitudes=magnitudes,
        fps=seq.fps,
        fields=tuple(fields) if keep_fields else None,
    )


def stabilize_sequence(model, seq: VideoSequence
                       ) -> tuple[VideoSequence, DisplacementTrack]:
    """Warp every frame back onto frame 0; returns the motion track too.

    Frame 0 passes through unchanged; frame i becomes
    ``warp(frame_i, u_{0,i})`` with the model's predicted field.
    """
    track = track_sequence(model, seq, keep_fields=True)
    frames = [seq[0]]
    for i in range(1, len(seq)):
        frames.append(warp(seq[i], track.fields[i - 1]).image)
    return VideoSequence(tuple(frames), fps=seq.fps), track


def compensation_report(model, seq: VideoSequence, compensated: VideoSequence,
                        before: DisplacementTrack | None = None,
                        model_id: str = "") -> CompensationReport:
    """Before/after statistics, the "after" measured by re-tracking the
    compensated clip with the same model."""
    if len(seq) != len(compensated):
        raise DimensionMismatch(
            f"original has {len(seq)} frames, compensated {len(compensated)}"
        )
    if seq[0].shape != compensated[0].shape:
        raise DimensionMismatch(
            f"original frames {seq[0].shape} vs compensated {compensated[0].shape}"
        )
    if before is None:
        before = track_sequence(model, seq, keep_fields=False)
    after = track_sequence(model, compensated, keep_fields=False)
    return report_from_tracks(before, after, model_id=model_id)


def report_from_tracks(before: DisplacementTrack, after: DisplacementTrack,
                       model_id: str = "") -> CompensationReport:
    if before.n_frames != after.n_frames:
        raise DimensionMismatch(
            f"before tracks {before.n_frames} frames, after {after.n_frames}"
        )
    avg_before = before.overall_mean()
    avg_after = after.overall_mean()
    if avg_before < MIN_REPORTABLE_MOTION_PX:
        reduction = None
    else:
        reduction = 100.0 * (1.0 - avg_after / avg_before)
    return CompensationReport(
        avg_before=avg_before,
        avg_after=avg_after,
        reduction_percent=reduction,
        per_frame_before=tuple(float(v) for v in before.per_frame_mean()),
        per_frame_after=tuple(float(v) for v in after.per_frame_mean()),
        fps=before.fps,
        model_id=model_id,
    )


def pooled_reduction(avg_befores: Sequence[float],
                     avg_afters: Sequence[float]) -> float:
    """Reduction percentage from equal-weight pooling of per-dataset means."""
    if len(avg_befores) != len(avg_afters) or not avg_befores:
        raise ValueError("need matching, non-empty before/after lists")
    before = float(np.mean(avg_befores))
    after = float(np.mean(avg_afters))
    if before <= 0:
        raise ValueError("pooled before-average must be positive")
    return 100.0 * (1.0 - after / before)


def estimate_rate(trace, fps: float,
                  band: tuple[float, float] = DEFAULT_BAND_HZ) -> SpectrumEstimate:
    """Dominant in-band frequency of a displacement trace via the FFT.

    The trace is mean-subtracted and Hann-windowed; the peak of the
    magnitude-squared spectrum inside ``band`` must exceed 3x the in-band
    median power, otherwise :class:`NoDominantPeak` is raised.
    """
    series = np.asarray(trace, dtype=np.float64).ravel()
    if series.size < 64:
        raise InsufficientData(
            f"trace has {series.size} samples; need at least 64"
        )
    if not np.isfinite(series).all():
        raise ValueError("trace contains non-finite values")
    low, high = band
    if not 0 <= low < high:
        raise ValueError(f"invalid band {band}")
    if fps <= 2 * high:
        raise ValueError(
            f"fps {fps} too low to resolve the band upper edge {high} Hz"
        )

    n = series.size
    windowed = (series - series.mean()) * np.hanning(n)
    power = np.abs(np.fft.rfft(windowed)) ** 2
    freqs = np.fft.rfftfreq(n, d=1.0 / fps)

    in_band = (freqs >= low) & (freqs <= high)
    if not in_band.any():
        raise ValueError(f"band {band} contains no frequency bins at fps {fps}")
    band_power = power[in_band]
    band_freqs = freqs[in_band]
    peak_idx = int(np.argmax(band_power))
    peak_power = float(band_power[peak_idx])
    median_power = float(np.median(band_power))

    # a numerically flat trace has an all-but-zero spectrum: no peak to report
    if peak_power <= 1e-18 * n or peak_power < 3.0 * median_power:
        raise NoDominantPeak(
            f"in-band peak {peak_power:.3e} is below 3x the median "
            f"power {median_power:.3e}"
        )
    dominant = float(band_freqs[peak_idx])
    return SpectrumEstimate(
        dominant_frequency=dominant,
        rate_bpm=60.0 * dominant,
        frequency_resolution=fps / n,
        frequencies=freqs,
        power=power,
        band=(low, high),
    )


def track_to_csv(track: DisplacementTrack, pixels: Sequence[tuple[int, int]],
                 dest: str | Path) -> Path:
    """Write displacement-vs-time rows for chosen pixels."""
    dest = Path(dest)
    times = track.times()
    with open(dest, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame_index", "time_s", "x", "y", "d_pixels"])
        for x, y in pixels:
            trace = track.pixel_trace(x, y)
            for i, (t, d) in enumerate(zip(times, trace), start=1):
                writer.writerow([i, f"{t:.6f}", x, y, f"{d:.6f}"])
    return dest


def export_track_fields(track: DisplacementTrack, out_dir: str | Path) -> list[Path]:
    """Full-grid binary dump: one flow file per tracked frame."""
    if track.fields is None:
        raise ValueError("track was built without retained fields")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, field in enumerate(track.fields, start=1):
        path = out / f"field_{i:04d}.udf"
        write_flow(field, path)
        paths.append(path)
    return paths


def plot_displacement_curves(before: DisplacementTrack,
                             after: DisplacementTrack,
                             pixel: tuple[int, int],
                             dest: str | Path) -> Path:
    """Displacement-vs-frame curves for one pixel, before and after.

    Imports the plotting backend lazily; callers that must not fail on a
    headless box should catch ImportError and degrade to data-only output.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x, y = pixel
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(before.times(), before.pixel_trace(x, y), label="before")
    ax.plot(after.times(), after.pixel_trace(x, y), label="after")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("displacement (px)")
    ax.set_title(f"pixel ({x}, {y}) displacement")
    ax.legend()
    fig.tight_layout()
    dest = Path(dest)
    fig.savefig(dest, dpi=120)
    plt.close(fig)
    return dest


def plot_spectrum(estimate: SpectrumEstimate, dest: str | Path) -> Path:
    """Power spectrum with the detected peak marked."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(estimate.frequencies, estimate.power)
    ax.axvline(estimate.dominant_frequency, color="tab:red", linestyle="--",
               label=f"{estimate.rate_bpm:.1f} bpm")
    ax.axvspan(*estimate.band, alpha=0.1, color="tab:green", label="search band")
    ax.set_xlim(0, max(estimate.band[1] * 2, estimate.dominant_frequency * 2))
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("power")
    ax.legend()
    fig.tight_layout()
    dest = Path(dest)
    fig.savefig(dest, dpi=120)
    plt.close(fig)
    return dest
