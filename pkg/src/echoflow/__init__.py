"""Unsupervised deformable registration for ultrasound-like sequences.

The toolkit tracks per-pixel tissue displacement with a recurrent flow
network trained without ground truth, cancels periodic motion by warping
frames back onto a reference frame, and reads the motion rate off the
displacement spectrum.
"""

from .compensation import (
    CompensationReport,
    DisplacementTrack,
    SpectrumEstimate,
    compensation_report,
    estimate_rate,
    pooled_reduction,
    stabilize_sequence,
    track_sequence,
)
from .errors import (
    DimensionMismatch,
    DivergenceError,
    EchoFlowError,
    FormatError,
    InsufficientData,
    InsufficientFrames,
    InvalidImage,
    NoDominantPeak,
    ScaleError,
)
from .estimator import DeformableRegistrar
from .fileio import load_sequence, read_flow, read_image, write_flow, write_image
from .imaging import (
    DisplacementField,
    Image,
    PixelLocation,
    VideoSequence,
    normalize_image,
)
from .losses import (
    LossBreakdown,
    MsSsimConfig,
    cyclic_loss,
    iterate_weighted_loss,
    ms_ssim,
    smoothness,
)
from .network import (
    FlowPrediction,
    ModelConfig,
    RecurrentFlowNet,
    predict_flow,
    throughput_report,
)
from .synthetic import (
    DeformationSpec,
    PhantomSpec,
    SyntheticSample,
    generate_speckle,
    make_field,
    make_respiratory_sequence,
    make_training_corpus,
    render_pair,
)
from .training import Checkpoint, TrainConfig, evaluate_epe, make_pairs, train
from .warp import (
    WarpResult,
    bilinear_sample,
    invert_field,
    sample_field,
    warp,
    warp_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "CompensationReport",
    "Checkpoint",
    "DeformableRegistrar",
    "DeformationSpec",
    "DimensionMismatch",
    "DisplacementField",
    "DisplacementTrack",
    "DivergenceError",
    "EchoFlowError",
    "FlowPrediction",
    "FormatError",
    "Image",
    "InsufficientData",
    "InsufficientFrames",
    "InvalidImage",
    "LossBreakdown",
    "ModelConfig",
    "MsSsimConfig",
    "NoDominantPeak",
    "PhantomSpec",
    "PixelLocation",
    "RecurrentFlowNet",
    "ScaleError",
    "SpectrumEstimate",
    "SyntheticSample",
    "TrainConfig",
    "VideoSequence",
    "WarpResult",
    "bilinear_sample",
    "compensation_report",
    "cyclic_loss",
    "estimate_rate",
    "evaluate_epe",
    "generate_speckle",
    "invert_field",
    "iterate_weighted_loss",
    "load_sequence",
    "make_field",
    "make_pairs",
    "make_respiratory_sequence",
    "make_training_corpus",
    "ms_ssim",
    "normalize_image",
    "pooled_reduction",
    "predict_flow",
    "read_flow",
    "read_image",
    "render_pair",
    "sample_field",
    "smoothness",
    "stabilize_sequence",
    "throughput_report",
    "track_sequence",
    "train",
    "warp",
    "warp_tensor",
    "write_flow",
    "write_image",
]
