"""scikit-learn style wrapper around training and early-exit inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .benchdata import Dataset, DatasetSplits
from .exitpolicy import ExitPolicy, evaluate_policy, parse_policy
from .gradcore import RngStream
from .model import ModelConfig
from .training import TrainConfig, train


def _check_tokens(X):
    X = check_array(X, dtype=np.int64)
    if X.size and X.min() < 0:
        raise ValueError("token ids must be non-negative")
    return X


class PonderClassifier(ClassifierMixin, BaseEstimator):
    """Weight-shared encoder that learns where to stop.

    ``X`` is an integer array of token ids, shape ``(n_samples, seq_len)``.
    A slice of the training data (``validation_fraction``) drives early
    stopping.  ``exit_policy`` accepts the same strings as the command line,
    e.g. ``"q_exit:0.5"`` or ``"patience:6"``.
    """

    def __init__(self, max_layers=12, d_model=64, n_heads=2, d_ff=128, lambda_arch="one_layer",
                 lambda_input="single_h", classifier_mode="shared", objective="ponder", lambda_prior=0.1,
                 beta=0.5, learning_rate=1e-3, lambda_learning_rate=None, batch_size=32, max_epochs=50,
                 patience_epochs=5, exit_policy="q_exit:0.5", validation_fraction=0.1, random_state=0):
        self.max_layers = max_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.lambda_arch = lambda_arch
        self.lambda_input = lambda_input
        self.classifier_mode = classifier_mode
        self.objective = objective
        self.lambda_prior = lambda_prior
        self.beta = beta
        self.learning_rate = learning_rate
        self.lambda_learning_rate = lambda_learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience_epochs = patience_epochs
        self.exit_policy = exit_policy
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _policy(self) -> ExitPolicy:
        p = self.exit_policy
        return parse_policy(p) if isinstance(p, str) else p

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.int64)
        check_classification_targets(y)
        if X.min() < 0:
            raise ValueError("token ids must be non-negative")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        self._policy()
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        seed = int(self.random_state or 0)
        order = RngStream(seed, 99).permutation(len(y))
        n_dev = max(1, int(round(len(y) * self.validation_fraction)))
        if n_dev >= len(y):
            raise ValueError("too few samples to hold out a validation slice")
        zeros = np.zeros(len(y), dtype=np.int64)
        full = Dataset(X, codes.astype(np.int64), zeros)
        splits = DatasetSplits(full.subset(order[n_dev:]), full.subset(order[:n_dev]), Dataset.empty(X.shape[1]))
        mcfg = ModelConfig(vocab_size=int(X.max()) + 1, max_seq_len=X.shape[1], d_model=self.d_model,
                           n_heads=self.n_heads, d_ff=self.d_ff, max_layers=self.max_layers,
                           num_classes=len(self.classes_), lambda_arch=self.lambda_arch,
                           lambda_input=self.lambda_input, classifier_mode=self.classifier_mode,
                           lambda_init_prior=self.lambda_prior)
        tcfg = TrainConfig(learning_rate=self.learning_rate, lambda_learning_rate=self.lambda_learning_rate,
                           batch_size=self.batch_size, beta=self.beta, lambda_prior=self.lambda_prior,
                           patience_epochs=self.patience_epochs, max_epochs=self.max_epochs, seed=seed,
                           objective=self.objective)
        report = train(mcfg, tcfg, splits)
        self.model_config_ = report.model_config
        self.params_ = report.params
        self.train_report_ = report
        self.n_features_in_ = X.shape[1]
        return self

    def _decide(self, X):
        check_is_fitted(self, "params_")
        X = _check_tokens(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} tokens per row, expected {self.n_features_in_}")
        if X.size and X.max() >= self.model_config_.vocab_size:
            raise ValueError(f"token id {int(X.max())} outside the fitted vocabulary")
        ds = Dataset(X, np.zeros(len(X), dtype=np.int64), np.zeros(len(X), dtype=np.int64))
        return evaluate_policy(self.model_config_, self.params_, ds, self._policy(), seed=int(self.random_state or 0))

    def predict_proba(self, X):
        return self._decide(X).probs

    def predict(self, X):
        dec = self._decide(X)
        return self.classes_[dec.prediction]

    def exit_layers(self, X):
        """Number of layers each row evaluated under the current policy."""
        return self._decide(X).layers_evaluated
