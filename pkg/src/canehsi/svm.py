"""Flat-feature baselines: one-vs-rest linear SVC and epsilon-insensitive SVR."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .patches import PatchSet, flatten
from .segmentation import hinge_sgd
from .synthgen import RATING_CLASSES

CLASSES = np.array(RATING_CLASSES)


@dataclass
class MulticlassSvmModel:
    weights: np.ndarray  # (classes, features)
    biases: np.ndarray
    lam: float = 0.1
    epochs: int = 300
    seed: int = 0
    classes: tuple = RATING_CLASSES

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if tuple(self.classes) != RATING_CLASSES:
            raise ValueError("classes must be the rating vocabulary in ascending order")
        if self.weights.shape[0] != len(self.classes) or self.biases.shape != (len(self.classes),):
            raise ValueError("one weight row and bias per class required")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    @property
    def feature_len(self) -> int:
        return self.weights.shape[1]

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_len:
            raise ValueError(f"feature length {X.shape[1]} != model {self.feature_len}")
        return X @ self.weights.T + self.biases

    def predict(self, X: np.ndarray) -> np.ndarray:
        # argmax keeps the first maximum, i.e. the lowest class on ties
        return CLASSES[np.argmax(self.scores(X), axis=1)]

    def to_json(self) -> dict:
        return {
            "kind": "svc",
            "classes": list(self.classes),
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "hyperparams": {"lambda": self.lam, "epochs": self.epochs, "seed": self.seed},
        }

    @classmethod
    def from_json(cls, d: dict) -> "MulticlassSvmModel":
        hp = d["hyperparams"]
        return cls(d["weights"], d["biases"], hp["lambda"], hp["epochs"], hp["seed"], tuple(d["classes"]))


@dataclass
class SvrModel:
    weights: np.ndarray
    bias: float
    epsilon_tube: float = 0.5
    lam: float = 1e-3
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.epsilon_tube <= 0:
            raise ValueError("epsilon_tube must be > 0")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X @ self.weights + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Regression output rounded to the nearest rating class (ties to the lower class)."""
        v = self.predict_value(X)
        return CLASSES[np.argmin(np.abs(v[:, None] - CLASSES[None, :]), axis=1)]

    def to_json(self) -> dict:
        return {
            "kind": "svr",
            "weights": self.weights.tolist(),
            "bias": float(self.bias),
            "epsilon_tube": self.epsilon_tube,
            "hyperparams": {"lambda": self.lam, "epochs": self.epochs, "seed": self.seed},
        }

    @classmethod
    def from_json(cls, d: dict) -> "SvrModel":
        hp = d["hyperparams"]
        return cls(d["weights"], d["bias"], d["epsilon_tube"], hp["lambda"], hp["epochs"], hp["seed"])


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh)


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    return SvrModel.from_json(d) if d.get("kind") == "svr" else MulticlassSvmModel.from_json(d)


def train_svc(train: PatchSet, lam: float = 0.1, epochs: int = 300, seed: int = 0) -> MulticlassSvmModel:
    labels = train.labels()
    if np.unique(labels).size < 2:
        raise ValueError("train_svc needs at least two classes")
    X = train.features().astype(np.float64)
    Y = np.where(labels[:, None] == CLASSES[None, :], 1.0, -1.0)
    # one visit order for every class: with two classes the models are exact negatives
    W, b, _ = hinge_sgd(X, Y, lam, epochs, int(seed))
    return MulticlassSvmModel(W, b, lam, epochs, seed)


def predict_svc(model: MulticlassSvmModel, patch) -> int:
    x = flatten(patch) if hasattr(patch, "data") else np.asarray(patch)
    return int(model.predict(x.reshape(1, -1))[0])


def train_svr(train: PatchSet, lam: float = 0.01, epsilon_tube: float = 0.5, epochs: int = 100, seed: int = 0) -> SvrModel:
    """SGD on lam/2 |w|^2 + mean(max(0, |y - (w.x + b)| - eps)), step 1/(lam t).

    As in the hinge trainer the bias is a constant-1 feature sharing the shrinkage.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    X = train.features().astype(np.float64)
    y = train.labels().astype(np.float64)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    w = np.zeros(X.shape[1])
    b = 0.0
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(len(y)):
            t += 1
            eta = 1.0 / (lam * t)
            resid = y[i] - (X[i] @ w + b)
            shrink = 1.0 - eta * lam
            w *= shrink
            b *= shrink
            if abs(resid) > epsilon_tube:
                step = eta * np.sign(resid)
                w += step * X[i]
                b += step
    return SvrModel(w, b, epsilon_tube, lam, epochs, seed)


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    per_class_recall: dict = field(default_factory=dict)
    n: int = 0

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n": self.n,
            "classes": list(RATING_CLASSES),
            "confusion": self.confusion.tolist(),
            "per_class_recall": {str(k): v for k, v in self.per_class_recall.items()},
        }

    def save_confusion_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("true\\pred," + ",".join(str(c) for c in RATING_CLASSES) + "\n")
            for cls, row in zip(RATING_CLASSES, self.confusion):
                fh.write(f"{cls}," + ",".join(str(int(v)) for v in row) + "\n")


def evaluate(predictions) -> EvalReport:
    """``predictions``: iterable of (true_class, predicted_class)."""
    pairs = list(predictions)
    if not pairs:
        raise ValueError("no predictions to evaluate")
    index = {c: i for i, c in enumerate(RATING_CLASSES)}
    conf = np.zeros((len(RATING_CLASSES), len(RATING_CLASSES)), dtype=np.int64)
    for t, p in pairs:
        conf[index[int(t)], index[int(p)]] += 1
    n = len(pairs)
    recall = {}
    for c, row in zip(RATING_CLASSES, conf):
        if row.sum():
            recall[c] = float(row[index[c]] / row.sum())
    return EvalReport(float(np.trace(conf) / n), conf, recall, n)


def evaluate_model(model, patch_set: PatchSet) -> EvalReport:
    preds = model.predict(patch_set.features())
    return evaluate(zip(patch_set.labels(), preds))
