"""Scikit-learn style facade over the pipeline.

``PpcDetector`` wraps model construction, training, batched conformance
scoring and threshold calibration behind the familiar ``fit`` /
``predict`` / ``score_samples`` API.  Scores are sequence-level p-values
(lower = more anomalous); ``predict`` returns True for items flagged
anomalous under the current threshold.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import Tensor
from .conformance import chi2_survival
from .errors import ConfigError
from .metrics import select_threshold_max_f1
from .model import PpcModel, build_pipeline, preset
from .training import LOG_SQRT_2PI, evaluate_loss, train


def as_sequences(X, segment_shape: tuple, n_steps: int) -> np.ndarray:
    """Validate/reshape input into [N, n_steps, segment_len] float32."""
    X = np.asarray(X, dtype=np.float32)
    seg = segment_shape[0]
    if X.ndim == 2 and X.shape[1] == n_steps * seg:
        X = X.reshape(len(X), n_steps, seg)
    if X.ndim != 3 or X.shape[1:] != (n_steps, seg):
        raise ConfigError(
            f"expected [N, {n_steps}, {seg}] sequences or flat [N, {n_steps * seg}] "
            f"rows, got {X.shape}"
        )
    if not np.all(np.isfinite(X)):
        raise ConfigError("input contains non-finite values")
    return np.ascontiguousarray(X)


def batch_conformance(model: PpcModel, X: np.ndarray, chunk: int = 512):
    """Sequence p-values and mean log-likelihoods for [N, S, L] sequences."""
    cfg = model.config
    n_p, n_f, n_e = cfg.n_past, cfg.n_forecast, cfg.latent_size
    p_seq = np.empty(len(X))
    mean_ll = np.empty(len(X))
    for start in range(0, len(X), chunk):
        xb = X[start:start + chunk]
        b, s, length = xb.shape
        flat = np.ascontiguousarray(xb.reshape(b * s, length), dtype=model.dtype)
        z = model.encode_graph(Tensor(flat), training=False).data.reshape(b, s, n_e)
        forecasts = model.predict_batch(z[:, :n_p, :])
        d2 = np.zeros(b)
        ll = np.zeros(b)
        for i, (z_hat, sigma) in enumerate(forecasts):
            z_true = z[:, n_p + i, :].astype(np.float64)
            step_d2 = np.sum(((z_true - z_hat) / sigma) ** 2, axis=1)
            d2 += step_d2
            ll += -(n_e * LOG_SQRT_2PI + np.sum(np.log(sigma), axis=1) + 0.5 * step_d2)
        for j in range(b):
            p_seq[start + j] = chi2_survival(float(d2[j]), n_f * n_e)
        mean_ll[start:start + chunk] = ll / n_f
    return p_seq, mean_ll


class PpcDetector(BaseEstimator):
    """Change-point detector with a fit/predict interface.

    Parameters mirror the pipeline config; any left at None fall back to
    the chosen preset's value.  ``threshold`` is the p-value below which a
    sequence is flagged anomalous; ``calibrate_threshold`` replaces it with
    the max-F1 value on labeled data.
    """

    def __init__(
        self,
        preset_name: str = "sine",
        threshold: float = 0.01,
        warmup_iters: int | None = None,
        max_iters: int | None = None,
        eval_every: int | None = None,
        patience: int | None = None,
        batch_size: int | None = None,
        lr: float | None = None,
        val_fraction: float = 0.1,
        seed: int = 0,
    ):
        self.preset_name = preset_name
        self.threshold = threshold
        self.warmup_iters = warmup_iters
        self.max_iters = max_iters
        self.eval_every = eval_every
        self.patience = patience
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.seed = seed

    # -- config assembly ----------------------------------------------------

    def _build_config(self):
        cfg = preset(self.preset_name, seed=self.seed)
        schedule = dict(cfg.schedule)
        for key in ("warmup_iters", "max_iters", "eval_every", "patience", "batch_size"):
            value = getattr(self, key)
            if value is not None:
                schedule[key] = int(value)
        optimizer = dict(cfg.optimizer)
        if self.lr is not None:
            optimizer["lr"] = float(self.lr)
        return cfg.with_overrides(schedule=schedule, optimizer=optimizer)

    def _n_steps(self, cfg) -> int:
        return cfg.n_past + cfg.n_forecast

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y=None):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        cfg = self._build_config()
        X = as_sequences(X, cfg.segment_shape, self._n_steps(cfg))
        n_val = max(1, int(round(len(X) * self.val_fraction)))
        if n_val >= len(X):
            raise ConfigError(f"need at least 2 sequences, got {len(X)}")
        # deterministic split: tail of the (already shuffled or generated)
        # input becomes validation
        train_x, val_x = X[:-n_val], X[-n_val:]
        self.model_ = build_pipeline(cfg)
        result = train(self.model_, train_x, val_x)
        self.history_ = result.history
        self.best_val_loss_ = result.best_val_loss
        self.threshold_ = float(self.threshold)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("detector is not fitted; call fit() or load a checkpoint")

    def score_samples(self, X) -> np.ndarray:
        """Sequence-level p-values in [0, 1]; lower = more anomalous."""
        self._check_fitted()
        cfg = self.model_.config
        X = as_sequences(X, cfg.segment_shape, self._n_steps(cfg))
        p_seq, _ = batch_conformance(self.model_, X)
        return p_seq

    def predict(self, X) -> np.ndarray:
        """True where the sequence is flagged anomalous (p < threshold)."""
        return self.score_samples(X) < self.threshold_

    def calibrate_threshold(self, X, y) -> float:
        """Set the threshold to the max-F1 p-value cut on labeled data."""
        scores = self.score_samples(X)
        self.threshold_ = float(select_threshold_max_f1(scores, np.asarray(y, dtype=bool)))
        return self.threshold_

    def score(self, X, y) -> float:
        """Balanced accuracy of the thresholded detector on labeled data."""
        y = np.asarray(y, dtype=bool)
        flagged = self.predict(X)
        tpr = np.mean(flagged[y]) if y.any() else math.nan
        tnr = np.mean(~flagged[~y]) if (~y).any() else math.nan
        return float((tpr + tnr) / 2.0)

    def validation_loss(self, X) -> float:
        self._check_fitted()
        cfg = self.model_.config
        X = as_sequences(X, cfg.segment_shape, self._n_steps(cfg))
        loss, _, _ = evaluate_loss(self.model_, X)
        return loss

    @classmethod
    def from_model(cls, model: PpcModel, threshold: float = 0.01) -> "PpcDetector":
        det = cls(threshold=threshold, seed=model.config.seed)
        det.model_ = model
        det.threshold_ = float(threshold)
        det.n_features_in_ = int(
            (model.config.n_past + model.config.n_forecast) * model.config.segment_shape[0]
        )
        return det
