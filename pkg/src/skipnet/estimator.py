"""scikit-learn style estimator wrapping the model and training loop.

``SkipPredictor`` follows the fit/predict protocol with ``get_params`` /
``set_params`` inherited from ``BaseEstimator``, so it composes with
clone, pipelines and search utilities.  X is a ``SessionDataset``;
predictions are per-session boolean arrays over the second half.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import model as mdl
from . import train as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (NormalizationStats, SessionDataset, apply_normalization,
                   check_dataset, fit_normalization, make_batches, split_sessions)
from .errors import ContractError, SchemaError
from .metrics import mean_average_accuracy


def _as_dataset(X):
    if isinstance(X, SessionDataset):
        return check_dataset(X)
    raise ContractError("X must be a SessionDataset (sessions + tracks + schema)")


class SkipPredictor(BaseEstimator):
    """Skip-prediction estimator: fit on labeled sessions, predict booleans.

    Parameters mirror the model dimensions and the training configuration;
    ``validation_fraction`` is carved out of the fit data for early
    stopping.  After ``fit`` the attributes ``model_params_``,
    ``normalization_``, ``history_`` and ``best_epoch_`` are available.
    """

    def __init__(self, track_fc_dim=64, interaction_fc_dim=64, sessrep_hidden=64,
                 enc_fc_dim=128, enc_hidden=128, dec_final_hidden=128,
                 hard_feedback=False, learning_rate=1e-3, batch_size=64,
                 max_epochs=50, patience=3, min_delta=1e-4, clip_norm=5.0,
                 validation_fraction=0.1, workers=1, seed=0):
        self.track_fc_dim = track_fc_dim
        self.interaction_fc_dim = interaction_fc_dim
        self.sessrep_hidden = sessrep_hidden
        self.enc_fc_dim = enc_fc_dim
        self.enc_hidden = enc_hidden
        self.dec_final_hidden = dec_final_hidden
        self.hard_feedback = hard_feedback
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.workers = workers
        self.seed = seed

    def _model_config(self, schema):
        return mdl.config_for_schema(
            schema,
            track_fc_dim=self.track_fc_dim,
            interaction_fc_dim=self.interaction_fc_dim,
            sessrep_hidden=self.sessrep_hidden,
            enc_fc_dim=self.enc_fc_dim,
            enc_hidden=self.enc_hidden,
            dec_final_hidden=self.dec_final_hidden,
            hard_feedback=self.hard_feedback,
            seed=self.seed,
        )

    def _train_config(self):
        return tr.TrainConfig(learning_rate=self.learning_rate,
                              batch_size=self.batch_size,
                              max_epochs=self.max_epochs,
                              patience=self.patience,
                              min_delta=self.min_delta,
                              clip_norm=self.clip_norm,
                              workers=self.workers,
                              seed=self.seed)

    def fit(self, X, y=None):
        """Train on a labeled SessionDataset; returns self."""
        dataset = _as_dataset(X)
        if not dataset.labeled:
            raise ContractError("fit needs labeled sessions")
        if not (0 < self.validation_fraction < 1):
            raise ContractError("validation_fraction must be in (0, 1)")
        train, val, _ = split_sessions(dataset.sessions,
                                       (1.0 - self.validation_fraction,
                                        self.validation_fraction, 0.0),
                                       seed=self.seed)
        if not train or not val:
            raise ContractError("not enough sessions for a train/validation split")
        stats = fit_normalization(train, dataset.tracks, dataset.schema)
        norm_train, norm_tracks = apply_normalization(train, dataset.tracks, stats,
                                                      dataset.schema)
        norm_val, _ = apply_normalization(val, dataset.tracks, stats, dataset.schema)

        params = mdl.init_model_params(self._model_config(dataset.schema))
        adam = tr.init_adam_state(params)
        result = tr.run_training(params, adam, norm_train, norm_val, norm_tracks,
                                 dataset.schema, self._train_config())

        self.model_params_ = result.best_params
        self.normalization_ = stats
        self.schema_fingerprint_ = dataset.schema.fingerprint()
        self.history_ = result.history
        self.val_losses_ = result.val_losses
        self.best_epoch_ = result.best_epoch
        self.n_epochs_ = result.stopped_epoch
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_params_"):
            raise NotFittedError("this SkipPredictor has not been fitted yet")

    def _prepare(self, X):
        dataset = _as_dataset(X)
        if dataset.schema.fingerprint() != self.schema_fingerprint_:
            raise SchemaError("dataset schema does not match the fitted schema")
        sessions, tracks = apply_normalization(dataset.sessions, dataset.tracks,
                                               self.normalization_, dataset.schema)
        return dataset, sessions, tracks

    def predict_proba(self, X):
        """Per-session arrays of skip probabilities for the second half."""
        self._check_fitted()
        dataset, sessions, tracks = self._prepare(X)
        out = []
        for batch in make_batches(sessions, tracks, dataset.schema, 256):
            output = mdl.forward(self.model_params_, batch)
            probs = output.prob_matrix()
            for j, n in enumerate(batch.second_lengths):
                out.append(probs[:int(n), j].copy())
        return out

    def predict(self, X):
        """Per-session boolean skip decisions (probability >= 0.5)."""
        return [p >= 0.5 for p in self.predict_proba(X)]

    def score(self, X, y=None):
        """Mean average accuracy on a labeled dataset (higher is better)."""
        self._check_fitted()
        dataset = _as_dataset(X)
        if not dataset.labeled:
            raise ContractError("score needs labeled sessions")
        preds = self.predict(X)
        report = mean_average_accuracy(
            [(s.labels, p) for s, p in zip(dataset.sessions, preds)])
        return report.maa

    def save(self, path):
        """Persist the fitted model as a checkpoint file."""
        self._check_fitted()
        extras = {"normalization": self.normalization_.to_json_dict(),
                  "estimator_params": self.get_params(),
                  "best_epoch": self.best_epoch_,
                  "n_epochs": self.n_epochs_}
        save_checkpoint(path, self.model_params_, self.schema_fingerprint_, extras=extras)

    @classmethod
    def load(cls, path):
        """Restore a fitted estimator from ``save`` output."""
        ckpt = load_checkpoint(path)
        est = cls(**ckpt.extras.get("estimator_params", {}))
        est.model_params_ = ckpt.params
        est.normalization_ = NormalizationStats.from_json_dict(ckpt.extras["normalization"])
        est.schema_fingerprint_ = ckpt.schema_fingerprint
        est.best_epoch_ = ckpt.extras.get("best_epoch")
        est.n_epochs_ = ckpt.extras.get("n_epochs")
        est.history_ = []
        est.val_losses_ = []
        return est
