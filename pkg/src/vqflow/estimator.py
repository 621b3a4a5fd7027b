"""scikit-learn style front end.

Inputs are either sequences of FeatureSample or lists of channels-first
per-scale arrays ``[N, D_i, H_i, W_i]``; see :mod:`vqflow.validation`.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, VqFlowModel, desk_config
from .scoring import DENSITY_MODES, SCORE_MODES, anomaly_maps, image_score
from .training import TrainConfig, train
from .validation import check_feature_stack


class VQFlowDetector(OutlierMixin, BaseEstimator):
    """Unsupervised multi-class anomaly detector over multi-scale feature stacks.

    Parameters
    ----------
    preset : {"desk", "full"}
        ``"desk"`` is a small architecture for CPU runs; ``"full"`` uses the
        large codebooks (32 prototypes, 512 patterns) and wide projections.
    cadm, cpc, cspc, pe : bool
        Component switches; all on is the full model.
    density_mode : {"dedicated", "mixture"}
        Base density used for scoring.
    score_mode : {"max", "mean"}
        Reduction from anomaly map to image score.
    contamination : float
        Expected anomalous fraction, used only to place the ``predict`` threshold.
    """

    def __init__(self, preset="desk", n_blocks=None, k_cp=None, k_csp=None, cadm=True, cpc=True,
                 cspc=True, pe=True, branches=None, epochs=10, lr=1e-3, batch_size=16,
                 density_mode="dedicated", score_mode="max", contamination=0.1, random_state=0):
        self.preset = preset
        self.n_blocks = n_blocks
        self.k_cp = k_cp
        self.k_csp = k_csp
        self.cadm = cadm
        self.cpc = cpc
        self.cspc = cspc
        self.pe = pe
        self.branches = branches
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.density_mode = density_mode
        self.score_mode = score_mode
        self.contamination = contamination
        self.random_state = random_state

    def _model_config(self, feats: list[np.ndarray]) -> ModelConfig:
        geometry = dict(
            in_channels=tuple(f.shape[-1] for f in feats),
            spatial=tuple(f.shape[1:3] for f in feats),
            cadm=self.cadm, cpc=self.cpc, cspc=self.cspc, pe=self.pe,
            branches=self.branches, seed=self.random_state,
        )
        for name in ("n_blocks", "k_cp", "k_csp"):
            if getattr(self, name) is not None:
                geometry[name] = getattr(self, name)
        if self.preset == "desk":
            return desk_config(**geometry)
        if self.preset == "full":
            return ModelConfig(**geometry)
        raise ValueError(f"preset must be 'desk' or 'full', got {self.preset!r}")

    def _check_modes(self):
        if self.density_mode not in DENSITY_MODES:
            raise ValueError(f"density_mode must be one of {DENSITY_MODES}")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}")
        if not 0.0 < self.contamination < 0.5:
            raise ValueError("contamination must lie in (0, 0.5)")

    def fit(self, X, y=None):
        """Train on normal samples only; ``y`` is ignored."""
        self._check_modes()
        feats = check_feature_stack(X, require_normal=True)
        self.n_scales_in_ = len(feats)
        self.model_ = VqFlowModel(self._model_config(feats))
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=self.random_state)
        result = train(self.model_, X, cfg)
        self.loss_trace_ = np.array(result.trace_rows())
        self.offset_ = float(np.percentile(self.score_samples(X), 100.0 * self.contamination))
        return self

    def anomaly_maps(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return anomaly_maps(self.model_, X, self.density_mode)

    def score_samples(self, X) -> np.ndarray:
        """Opposite of the anomaly score: lower means more abnormal."""
        return -np.atleast_1d(image_score(self.anomaly_maps(X), self.score_mode))

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "offset_")
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        """``+1`` for inliers, ``-1`` for outliers."""
        return np.where(self.decision_function(X) < 0, -1, 1)
