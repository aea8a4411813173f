"""scikit-learn style wrapper around the joint flow + classifier trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .classifier import predict_proba
from .config import RunConfig
from .generalizer import TrainState, train
from .preprocessing import Preprocessor


class UNVPClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Classifier trained with flow-regularized hard-sample augmentation.

    ``mode`` is ``"pure"`` (plain classifier), ``"unvp"`` (fixed class priors)
    or ``"eunvp"`` (learnable, noise-shifted priors). ``input_range`` is the
    declared ``(low, high)`` of the raw features; when omitted it is taken
    from the training data, padded by 10% on each side. Later inputs are
    clipped to that range. ``transform`` returns flow latents.
    """

    def __init__(
        self,
        mode="eunvp",
        alpha=0.1,
        beta=0.2,
        K=2,
        T_max=15,
        eta_adv=0.1,
        gamma=1.0,
        lam=0.1,
        epochs=30,
        pretrain_epochs=5,
        lr=1e-3,
        batch=64,
        flow_blocks=4,
        flow_hidden=32,
        input_shape=None,
        input_range=None,
        levels=0,
        random_state=0,
    ):
        self.mode = mode
        self.alpha = alpha
        self.beta = beta
        self.K = K
        self.T_max = T_max
        self.eta_adv = eta_adv
        self.gamma = gamma
        self.lam = lam
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.lr = lr
        self.batch = batch
        self.flow_blocks = flow_blocks
        self.flow_hidden = flow_hidden
        self.input_shape = input_shape
        self.input_range = input_range
        self.levels = levels
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        return RunConfig(
            mode=self.mode,
            alpha=self.alpha,
            beta=self.beta,
            K=self.K,
            T_max=self.T_max,
            eta_adv=self.eta_adv,
            gamma=self.gamma,
            lam=self.lam,
            epochs=self.epochs,
            pretrain_epochs=self.pretrain_epochs,
            lr=self.lr,
            batch=self.batch,
            flow_blocks=self.flow_blocks,
            flow_hidden=self.flow_hidden,
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        shape = tuple(self.input_shape) if self.input_shape is not None else (X.shape[1],)
        if int(np.prod(shape)) != X.shape[1]:
            raise ValueError(f"input_shape {shape} does not match {X.shape[1]} features")
        if self.input_range is not None:
            low, high = map(float, self.input_range)
        else:
            lo, hi = float(X.min()), float(X.max())
            pad = 0.1 * max(hi - lo, 1e-6)
            low, high = lo - pad, hi + pad
        self.preprocessor_ = Preprocessor(low, high, int(self.levels))
        self.n_features_in_ = X.shape[1]
        config = self._run_config()
        self.state_ = TrainState.create(config, shape, len(self.classes_), self.preprocessor_)
        train(self.state_, self._prepare(X), self.label_encoder_.transform(y))
        self.history_ = self.state_.history
        return self

    def _prepare(self, X) -> np.ndarray:
        p = self.preprocessor_
        return p(np.clip(X, p.low, p.high))

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self._prepare(X)

    def predict_proba(self, X) -> np.ndarray:
        x = self._check(X)
        return predict_proba(self.state_.clf, x)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        x = self._check(X)
        if self.state_.flow is None:
            raise ValueError("mode='pure' has no flow; latents are unavailable")
        return self.state_.flow.encode(x)
