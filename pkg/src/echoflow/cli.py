"""Command-line interface: synth, train, register, compensate, analyze.

Every command accepts ``--config`` (a JSON file of model/training/analysis
settings), ``--seed``, and ``--out``. The merged, effective configuration is
echoed into each output directory so runs are self-describing. Exit codes:
0 success, 2 usage or input error, 3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .compensation import (
    DEFAULT_BAND_HZ,
    estimate_rate,
    plot_displacement_curves,
    plot_spectrum,
    report_from_tracks,
    stabilize_sequence,
    track_sequence,
    track_to_csv,
)
from .errors import InsufficientData, NoDominantPeak
from .fileio import load_sequence, read_flow, read_image, write_flow, write_image
from .imaging import PixelLocation, VideoSequence
from .losses import MsSsimConfig
from .network import ModelConfig, throughput_report
from .synthetic import (
    DeformationSpec,
    PhantomSpec,
    load_pair_dataset,
    load_sequence_dataset,
    make_respiratory_sequence,
    make_training_corpus,
    save_pair_dataset,
    save_sequence_dataset,
)
from .training import Checkpoint, TrainConfig, train
from .warp import warp

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)
_MODEL_KEYS = set(ModelConfig.__dataclass_fields__)
_MSSSIM_KEYS = set(MsSsimConfig.__dataclass_fields__)
_EXTRA_KEYS = {"band_low_hz", "band_high_hz", "fps"}
KNOWN_CONFIG_KEYS = _TRAIN_KEYS | _MODEL_KEYS | _MSSSIM_KEYS | _EXTRA_KEYS


@dataclass(frozen=True)
class RunConfig:
    """Validated union of all tunable settings for one command invocation."""

    settings: Mapping[str, object]

    def __post_init__(self):
        unknown = set(self.settings) - KNOWN_CONFIG_KEYS
        if unknown:
            raise ValueError(
                f"unknown config keys: {', '.join(sorted(unknown))}; "
                f"known keys are {', '.join(sorted(KNOWN_CONFIG_KEYS))}"
            )

    @classmethod
    def load(cls, config_path: str | Path | None,
             overrides: Mapping[str, object] | None = None) -> "RunConfig":
        """Read the JSON config file (if any) and apply non-None overrides."""
        settings: dict = {}
        if config_path is not None:
            raw = json.loads(Path(config_path).read_text())
            if not isinstance(raw, dict):
                raise ValueError("config file must hold a JSON object")
            settings.update(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                settings[key] = value
        return cls(settings)

    def _subset(self, keys: set[str]) -> dict:
        return {k: v for k, v in self.settings.items() if k in keys}

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self._subset(_TRAIN_KEYS))

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self._subset(_MODEL_KEYS))

    def msssim_config(self) -> MsSsimConfig:
        return MsSsimConfig(**self._subset(_MSSSIM_KEYS))

    def band(self) -> tuple[float, float]:
        return (
            float(self.settings.get("band_low_hz", DEFAULT_BAND_HZ[0])),
            float(self.settings.get("band_high_hz", DEFAULT_BAND_HZ[1])),
        )

    def fps(self, default: float = 30.0) -> float:
        return float(self.settings.get("fps", default))

    def seed(self) -> int:
        return self.train_config().seed

    def effective(self) -> dict:
        return {
            "train": self.train_config().to_dict(),
            "model": self.model_config().to_dict(),
            "msssim": {
                "scales": self.msssim_config().scales,
                "window_size": self.msssim_config().window_size,
                "sigma": self.msssim_config().sigma,
                "c1": self.msssim_config().c1,
                "c2": self.msssim_config().c2,
            },
            "band_hz": list(self.band()),
            "fps": self.fps(),
        }


def _echo_config(out_dir: Path, command: str, config: RunConfig,
                 extra: dict | None = None) -> None:
    payload = {"command": command, **config.effective()}
    if extra:
        payload.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True))


def _require_out(args) -> Path:
    if args.out is None:
        raise ValueError(f"{args.command} requires --out")
    return Path(args.out)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2))


def _best_effort_plot(plot_fn, *fn_args) -> Path | None:
    """Plots must never fail a run: warn and continue without one."""
    try:
        return plot_fn(*fn_args)
    except Exception as exc:  # noqa: BLE001 - any backend failure degrades
        warnings.warn(f"plotting skipped: {exc}", stacklevel=2)
        return None


def _load_clip(path: str | Path, fps: float) -> VideoSequence:
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"no such frames directory: {root}")
    if (root / "manifest.json").exists():
        sequence, _, _ = load_sequence_dataset(root)
        return sequence
    if (root / "frames").is_dir():
        return load_sequence(root / "frames", fps=fps)
    return load_sequence(root, fps=fps)


def _load_dataset(path: str | Path, fps: float) -> list:
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"no such data directory: {root}")
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("kind") == "pair":
            samples, _ = load_pair_dataset(root)
            return samples
        sequence, _, _ = load_sequence_dataset(root)
        return [sequence]
    return [_load_clip(root, fps)]


def _load_model(ckpt: str | Path):
    path = Path(ckpt)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    return Checkpoint.load(path).build_model()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _require_out(args)
    config = RunConfig.load(args.config, {"seed": args.seed})
    seed = config.seed()
    if args.size < 32:
        raise ValueError(f"--size must be >= 32, got {args.size}")

    if args.kind == "pair":
        samples = make_training_corpus(
            args.n, size=args.size, seed=seed, max_disp=args.max_disp)
        save_pair_dataset(out, samples, manifest_extra={
            "seed": seed, "max_disp": args.max_disp})
        summary = {"kind": "pair", "n_samples": len(samples),
                   "size": args.size, "seed": seed, "out": str(out)}
    else:
        phantom = PhantomSpec(size=args.size, seed=seed)
        motion = DeformationSpec(
            kind="respiratory",
            size=args.size,
            center=(args.size / 2.0, args.size / 2.0 - 4.0),
            sigma=48.0 * args.size / 128.0,
            peak=(0.2, 0.98),
            amplitude=args.amplitude,
            frequency=args.frequency,
        )
        sequence, fields = make_respiratory_sequence(
            phantom, motion, fps=args.fps, duration_s=args.duration)
        save_sequence_dataset(out, sequence, fields, manifest_extra={
            "seed": seed,
            "phantom": phantom.to_dict(),
            "motion": motion.to_dict(),
        })
        summary = {"kind": "sequence", "n_frames": len(sequence),
                   "fps": args.fps, "seed": seed, "out": str(out)}

    _echo_config(out, "synth", config, summary)
    _emit(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    out = _require_out(args)
    config = RunConfig.load(args.config, {"seed": args.seed, "steps": args.steps})
    train_cfg = config.train_config()
    dataset = _load_dataset(args.data, config.fps())
    _echo_config(out, "train", config, {"data": str(args.data)})

    checkpoint = train(
        train_cfg,
        dataset,
        model_config=config.model_config(),
        out_dir=out,
    )
    history = checkpoint.train_state.get("loss_history", [])
    summary = {
        "checkpoint": str(out / "checkpoint_final.pt"),
        "steps": train_cfg.steps,
        "final_total": history[-1]["total"] if history else None,
        "log": str(out / "train_log.jsonl"),
    }
    _emit(summary)
    return EXIT_OK


def cmd_register(args) -> int:
    fixed = read_image(args.fixed)
    moving = read_image(args.moving)
    model = _load_model(args.ckpt)
    field = model.predict_field(fixed, moving)
    magnitude = field.magnitude()

    summary = {
        "mean_disp": float(magnitude.mean()),
        "max_disp": float(magnitude.max()),
    }
    if args.gt is not None:
        gt = read_flow(args.gt)
        diff = field.vectors.astype(np.float64) - gt.vectors.astype(np.float64)
        summary["epe"] = float(np.hypot(diff[..., 0], diff[..., 1]).mean())

    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_flow(field, out / "flow.udf")
        write_image(warp(moving, field).image, out / "warped.png", bits=16)
        config = RunConfig.load(args.config, {"seed": args.seed})
        _echo_config(out, "register", config, {
            "fixed": str(args.fixed), "moving": str(args.moving),
            "ckpt": str(args.ckpt)})
        summary["flow"] = str(out / "flow.udf")
        summary["warped"] = str(out / "warped.png")
    _emit(summary)
    return EXIT_OK


def _parse_pixel(text: str | None, sequence: VideoSequence) -> tuple[int, int]:
    height, width = sequence[0].shape
    if text is None:
        return width // 2, height // 2
    try:
        x_str, y_str = text.split(",")
        pixel = PixelLocation(int(x_str), int(y_str))
    except ValueError as exc:
        raise ValueError(f"--pixel must be 'x,y' integers, got {text!r}") from exc
    pixel.check_within(height, width)
    return pixel.x, pixel.y


def cmd_compensate(args) -> int:
    out = _require_out(args)
    config = RunConfig.load(args.config, {"seed": args.seed})
    sequence = _load_clip(args.frames, args.fps or config.fps())
    model = _load_model(args.ckpt)
    pixel = _parse_pixel(args.pixel, sequence)

    compensated, before = stabilize_sequence(model, sequence)
    after = track_sequence(model, compensated, keep_fields=False)
    report = report_from_tracks(before, after, model_id=Path(args.ckpt).name)

    comp_dir = out / "compensated"
    comp_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(compensated):
        write_image(frame, comp_dir / f"frame_{i:04d}.png", bits=16)
    report.to_json(out / "report.json")
    track_to_csv(before, [pixel], out / "track.csv")
    _best_effort_plot(plot_displacement_curves, before, after, pixel,
                      out / "displacement.png")
    _echo_config(out, "compensate", config, {
        "frames": str(args.frames), "ckpt": str(args.ckpt),
        "pixel": list(pixel)})
    _emit(report.as_dict())
    return EXIT_OK


def _trace_from_csv(path: str | Path) -> tuple[np.ndarray, tuple[int, int]]:
    """Displacement series of the first pixel listed in a track CSV."""
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise InsufficientData(f"track file {path} is empty")
    first = (int(rows[0]["x"]), int(rows[0]["y"]))
    values = [float(r["d_pixels"]) for r in rows
              if (int(r["x"]), int(r["y"])) == first]
    return np.asarray(values), first


def cmd_analyze(args) -> int:
    config = RunConfig.load(args.config, {
        "seed": args.seed,
        "band_low_hz": args.band[0] if args.band else None,
        "band_high_hz": args.band[1] if args.band else None,
    })
    band = config.band()

    if args.track is not None:
        trace, pixel = _trace_from_csv(args.track)
        source = {"track": str(args.track), "pixel": list(pixel)}
    elif args.frames is not None and args.ckpt is not None:
        sequence = _load_clip(args.frames, args.fps or config.fps())
        model = _load_model(args.ckpt)
        trace = track_sequence(model, sequence, keep_fields=False).mean_trace()
        source = {"frames": str(args.frames), "ckpt": str(args.ckpt)}
    else:
        raise ValueError("analyze needs --track, or both --frames and --ckpt")

    fps = args.fps or config.fps()
    try:
        estimate = estimate_rate(trace, fps=fps, band=band)
    except NoDominantPeak as exc:
        payload = {"rate_bpm": None, "dominant_frequency_hz": None,
                   "flag": "no_dominant_peak", "detail": str(exc),
                   "band_hz": list(band), **source}
        _emit(payload)
        return EXIT_OK

    payload = {**estimate.as_dict(), **source}
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _best_effort_plot(plot_spectrum, estimate, out / "spectrum.png")
        (out / "rate.json").write_text(json.dumps(payload, indent=2))
        _echo_config(out, "analyze", config, source)
    _emit(payload)
    return EXIT_OK


def cmd_throughput(args) -> int:
    model = _load_model(args.ckpt) if args.ckpt else None
    if model is None:
        config = RunConfig.load(args.config, {"seed": args.seed})
        from .network import RecurrentFlowNet

        model = RecurrentFlowNet(config.model_config(), seed=config.seed())
    report = throughput_report(model, image_size=args.size,
                               n_trials=args.trials)
    _emit(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def _band_pair(text: str) -> tuple[float, float]:
    try:
        low, high = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"band must be 'low,high' in Hz, got {text!r}") from exc
    return low, high


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="JSON file of model/training/analysis settings")
    common.add_argument("--seed", type=int, default=None,
                        help="override the configured random seed")
    common.add_argument("--out", type=str, default=None,
                        help="output directory")

    parser = argparse.ArgumentParser(
        prog="echoflow",
        description="Unsupervised deformable registration and respiratory "
                    "motion analysis for ultrasound-like sequences.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common],
                       help="generate synthetic pairs or a breathing clip")
    p.add_argument("--kind", choices=["pair", "sequence"], default="pair")
    p.add_argument("--n", type=int, default=20, help="number of pairs")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--max-disp", type=float, default=5.0,
                   help="maximum bump displacement in pixels")
    p.add_argument("--fps", type=float, default=20.0)
    p.add_argument("--duration", type=float, default=30.0, help="seconds")
    p.add_argument("--amplitude", type=float, default=3.0, help="pixels")
    p.add_argument("--frequency", type=float, default=0.3, help="Hz")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="train the flow network unsupervised")
    p.add_argument("--data", type=str, required=True,
                   help="dataset directory (synth layout or PNG frames)")
    p.add_argument("--steps", type=int, default=None,
                   help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", parents=[common],
                       help="register one image pair")
    p.add_argument("--fixed", type=str, required=True)
    p.add_argument("--moving", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--gt", type=str, default=None,
                   help="true flow file for endpoint-error reporting")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("compensate", parents=[common],
                       help="stabilize a sequence and report motion statistics")
    p.add_argument("--frames", type=str, required=True)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--pixel", type=str, default=None,
                   help="x,y pixel for the displacement curve (default center)")
    p.set_defaults(func=cmd_compensate)

    p = sub.add_parser("analyze", parents=[common],
                       help="estimate the dominant motion rate")
    p.add_argument("--track", type=str, default=None,
                   help="track CSV produced by compensate")
    p.add_argument("--frames", type=str, default=None)
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--band", type=_band_pair, default=None,
                   help="search band 'low,high' in Hz")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("throughput", parents=[common],
                       help="measure registration frames per second")
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_throughput)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ValueError, TypeError, OSError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
