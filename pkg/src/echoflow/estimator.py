"""scikit-learn style facade over the registration pipeline.

``DeformableRegistrar`` exposes the whole toolchain through the familiar
estimator verbs: ``fit`` trains the flow network unsupervised on image
sequences or synthetic pairs, ``predict`` registers image pairs,
``transform`` stabilizes a sequence, and ``score`` reports negative mean
endpoint error on samples with known fields.
"""

from __future__ import annotations

from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .compensation import stabilize_sequence, track_sequence
from .imaging import DisplacementField, VideoSequence
from .network import ModelConfig
from .training import Checkpoint, TrainConfig, evaluate_epe, train
from .validation import as_pair, as_sequence


class DeformableRegistrar(BaseEstimator):
    """Unsupervised deformable registration with a recurrent flow network.

    Parameters mirror the model and training configurations one-to-one, so
    ``get_params``/``set_params`` and grid-search style tooling work
    unchanged. The estimator is fitted by unsupervised training; no ground
    truth fields are consumed by ``fit``.
    """

    def __init__(
        self,
        feature_dim: int = 96,
        context_dim: int = 64,
        hidden_dim: int = 96,
        downsample_factor: int = 8,
        pyramid_levels: int = 4,
        lookup_radius: int = 4,
        iterations: int = 8,
        learning_rate: float = 2e-4,
        steps: int = 5000,
        batch_size: int = 4,
        lambda_smooth: float = 0.1,
        gamma: float = 0.8,
        seed: int = 0,
        image_size: int = 128,
        checkpoint_interval: int = 500,
        gradient_clip_norm: float = 1.0,
        min_learning_rate: float = 1e-5,
        fps: float = 30.0,
    ):
        self.feature_dim = feature_dim
        self.context_dim = context_dim
        self.hidden_dim = hidden_dim
        self.downsample_factor = downsample_factor
        self.pyramid_levels = pyramid_levels
        self.lookup_radius = lookup_radius
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.lambda_smooth = lambda_smooth
        self.gamma = gamma
        self.seed = seed
        self.image_size = image_size
        self.checkpoint_interval = checkpoint_interval
        self.gradient_clip_norm = gradient_clip_norm
        self.min_learning_rate = min_learning_rate
        self.fps = fps

    # -- configuration plumbing ------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.feature_dim,
            context_dim=self.context_dim,
            hidden_dim=self.hidden_dim,
            downsample_factor=self.downsample_factor,
            pyramid_levels=self.pyramid_levels,
            lookup_radius=self.lookup_radius,
            iterations=self.iterations,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            steps=self.steps,
            batch_size=self.batch_size,
            lambda_smooth=self.lambda_smooth,
            gamma=self.gamma,
            seed=self.seed,
            image_size=self.image_size,
            checkpoint_interval=self.checkpoint_interval,
            gradient_clip_norm=self.gradient_clip_norm,
            min_learning_rate=self.min_learning_rate,
        )

    # -- estimator verbs ---------------------------------------------------

    def fit(self, X, y=None, out_dir: str | Path | None = None):
        """Train unsupervised on sequences, synthetic samples, or pairs."""
        checkpoint = train(
            self._train_config(),
            list(X),
            model_config=self._model_config(),
            out_dir=out_dir,
        )
        self.checkpoint_ = checkpoint
        self.model_ = checkpoint.build_model()
        self.history_ = checkpoint.train_state.get("loss_history", [])
        self.n_steps_ = checkpoint.train_state.get("step", 0)
        return self

    def predict(self, X):
        """Displacement field(s) for a (fixed, moving) pair or list of pairs.

        A single pair yields one :class:`DisplacementField`; a list of pairs
        yields a list.
        """
        check_is_fitted(self, "model_")
        single = (
            isinstance(X, tuple)
            and len(X) == 2
            and not isinstance(X[0], tuple)
        )
        pairs = [X] if single else list(X)
        fields: list[DisplacementField] = []
        for item in pairs:
            fixed, moving = as_pair(item)
            fields.append(self.model_.predict_field(fixed, moving))
        return fields[0] if single else fields

    def transform(self, X, fps: float | None = None) -> VideoSequence:
        """Stabilize a sequence: warp every frame back onto frame 0."""
        check_is_fitted(self, "model_")
        sequence = as_sequence(X, fps=fps if fps is not None else self.fps)
        compensated, _ = stabilize_sequence(self.model_, sequence)
        return compensated

    def track(self, X, fps: float | None = None):
        """Displacement track of a sequence (convenience passthrough)."""
        check_is_fitted(self, "model_")
        sequence = as_sequence(X, fps=fps if fps is not None else self.fps)
        return track_sequence(self.model_, sequence)

    def score(self, X, y=None) -> float:
        """Negative mean endpoint error on samples with true fields."""
        check_is_fitted(self, "model_")
        return -evaluate_epe(self.model_, list(X))["mean_epe"]

    # -- persistence -------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> Path:
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_.save(path)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "DeformableRegistrar":
        """Build an already-fitted registrar from a saved checkpoint."""
        checkpoint = Checkpoint.load(path)
        cfg = checkpoint.model_config
        train_cfg = checkpoint.train_state.get("train_config", {})
        est = cls(
            feature_dim=cfg.feature_dim,
            context_dim=cfg.context_dim,
            hidden_dim=cfg.hidden_dim,
            downsample_factor=cfg.downsample_factor,
            pyramid_levels=cfg.pyramid_levels,
            lookup_radius=cfg.lookup_radius,
            iterations=cfg.iterations,
            **{k: v for k, v in train_cfg.items()
               if k in TrainConfig.__dataclass_fields__},
        )
        est.checkpoint_ = checkpoint
        est.model_ = checkpoint.build_model()
        est.history_ = checkpoint.train_state.get("loss_history", [])
        est.n_steps_ = checkpoint.train_state.get("step", 0)
        return est
