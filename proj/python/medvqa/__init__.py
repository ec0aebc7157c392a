"""Medical visual question answering: synthetic data, training and explanations."""

import json

from ._core import (
    ConfigError,
    DataError,
    Error,
    LoadError,
    RangeError,
    ShapeError,
    format_mean_std,
    gradcam_from_activations,
    normalize_answer,
    nt_xent_loss,
    synthetic_dataset,
    tokenize,
)
from ._core import Model as _Model
from ._core import evaluate_predictions as _evaluate_predictions

__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "LoadError",
    "Model",
    "RangeError",
    "ShapeError",
    "evaluate_predictions",
    "format_mean_std",
    "gradcam_from_activations",
    "normalize_answer",
    "nt_xent_loss",
    "synthetic_dataset",
    "tokenize",
]


def evaluate_predictions(samples, predictions):
    return json.loads(_evaluate_predictions(samples, list(predictions)))


class Model:
    """A trained model together with its vocabulary and answer classes."""

    def __init__(self, core):
        self._core = core

    @classmethod
    def load(cls, checkpoint_dir):
        return cls(_Model.load(str(checkpoint_dir)))

    @classmethod
    def fit(cls, samples, model_config=None, train_config=None, seed=0):
        return cls(_Model.fit(samples, json.dumps(model_config or {}), json.dumps(train_config or {}), seed))

    def save(self, checkpoint_dir):
        self._core.save(str(checkpoint_dir))

    def predict(self, image, question, k=5):
        return self._core.predict(image, question, k)

    def gradcam(self, image, question, target=None):
        return self._core.gradcam(image, question, target)

    def evaluate(self, samples):
        return json.loads(self._core.evaluate(samples))

    @property
    def variant(self):
        return self._core.variant

    @property
    def answers(self):
        return list(self._core.answers)

    @property
    def config(self):
        return json.loads(self._core.config)
