"""A scikit-learn classifier wrapping network construction and training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .clique import MBCliqueNet, preset
from .data import Dataset
from .training import TrainConfig, fit
from .validation import check_images, check_labels, check_positive_int

__all__ = ["MBCliqueNetClassifier"]


class MBCliqueNetClassifier(ClassifierMixin, BaseEstimator):
    """Modulated binary CliqueNet image classifier.

    Parameters
    ----------
    preset : str
        Architecture preset; channel count, image size and class count are
        taken from the training data.
    k : int or None
        Override of the modulation factor of every block.
    epochs, batch_size, lr_max, lr_min, momentum, weight_decay
        Training schedule (one warm-restart period spanning all epochs).
    augment : bool
        Random flip and pad-and-crop during training.
    image_shape : tuple or None
        (channels, height, width) for flat 2-D input.
    random_state : int
        Seeds initialization, shuffling and augmentation.
    """

    def __init__(self, preset="tiny", k=None, epochs=2, batch_size=64, lr_max=0.1, lr_min=1e-4,
                 momentum=0.9, weight_decay=5e-4, augment=False, image_shape=None, random_state=0):
        self.preset = preset
        self.k = k
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.image_shape = image_shape
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        epochs = check_positive_int(self.epochs, "epochs")
        return TrainConfig(batch_size=check_positive_int(self.batch_size, "batch_size"),
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           lr_max=self.lr_max, lr_min=self.lr_min, restart_periods=[epochs],
                           total_epochs=epochs, rng_seed=int(self.random_state))

    def fit(self, X, y):
        X = check_images(X, self.image_shape)
        self.classes_, encoded = check_labels(y, X.shape[0])
        config = preset(self.preset, k=self.k, in_channels=X.shape[1], image_size=X.shape[2],
                        num_classes=len(self.classes_))
        tc = self._train_config()
        self.net_ = MBCliqueNet(config, seed=self.random_state)
        data = Dataset(X, encoded, len(self.classes_))
        self.history_ = fit(self.net_, data, tc, epochs=tc.total_epochs, augment_data=self.augment)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, self.image_shape)
        return self.net_.predict_logits(X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
