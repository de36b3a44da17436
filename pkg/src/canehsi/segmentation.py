"""Foreground/background segmentation with a pixel-level linear SVM."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .hypercube import HyperCube, Mask, SpectralCurve


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def hinge_objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, lam: float) -> float:
    margins = y * (X @ w + b)
    return float(0.5 * lam * (w @ w + b * b) + np.maximum(0.0, 1.0 - margins).mean())


def hinge_sgd(X: np.ndarray, y: np.ndarray, lam: float, epochs: int, seed):
    """Stochastic sub-gradient descent on the L2-regularised hinge loss.

    One sample per step, step size ``1 / (lam * t)`` with ``t`` counting
    steps across epochs, samples visited in a fresh seeded permutation per
    epoch.  The bias is carried as a constant-1 feature and so shares the
    shrinkage of the weights.

    ``y`` may be a label vector (n,) or a matrix (n, K) of K independent
    binary problems sharing the visit order; then ``w`` is (K, d) and ``b``
    is (K,).  Returns ``(w, b, objectives)`` where ``objectives[e]`` is the
    full training objective after ``e`` epochs (``objectives[0]`` at w = 0);
    for K problems it is a list of length-K arrays.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = y[:, None] if single else y
    n, d = X.shape
    k = Y.shape[1]
    rng = _rng(seed)
    W = np.zeros((k, d))
    b = np.zeros(k)
    t = 0

    def objective():
        margins = Y * (X @ W.T + b)
        vals = 0.5 * lam * ((W * W).sum(axis=1) + b * b) + np.maximum(0.0, 1.0 - margins).mean(axis=0)
        return float(vals[0]) if single else vals

    objectives = [objective()]
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            xi, yi = X[i], Y[i]
            active = yi * (W @ xi + b) < 1.0
            shrink = 1.0 - eta * lam
            W *= shrink
            b *= shrink
            if active.any():
                step = np.where(active, eta * yi, 0.0)
                W += step[:, None] * xi
                b += step
        objectives.append(objective())
    if single:
        return W[0], float(b[0]), objectives
    return W, b, objectives


@dataclass
class PixelSvmModel:
    weights: np.ndarray
    bias: float
    trained_on: int
    lam: float = 1e-3
    epochs: int = 5
    seed: int = 0
    objectives: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if self.trained_on < 1:
            raise ValueError("trained_on must be positive")

    @property
    def bands(self) -> int:
        return self.weights.size

    def to_json(self) -> dict:
        return {
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "bands": self.bands,
            "trained_on": self.trained_on,
            "hyperparams": {"lambda": self.lam, "epochs": self.epochs, "seed": self.seed},
        }

    @classmethod
    def from_json(cls, d: dict) -> "PixelSvmModel":
        hp = d.get("hyperparams", {})
        if len(d["weights"]) != d.get("bands", len(d["weights"])):
            raise ValueError("band count does not match weights")
        return cls(d["weights"], d["bias"], d["trained_on"], hp.get("lambda", 1e-3), hp.get("epochs", 5), hp.get("seed", 0))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "PixelSvmModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def train_pixel_svm(samples, lam: float = 1e-3, epochs: int = 5, seed: int = 0) -> PixelSvmModel:
    """``samples``: iterable of (SpectralCurve or array, label) with label True/'fg' for foreground."""
    samples = list(samples)
    if not samples:
        raise ValueError("no training samples")
    X = np.stack([np.asarray(s.values if isinstance(s, SpectralCurve) else s, dtype=np.float64) for s, _ in samples])
    y = np.array([1.0 if lab in (True, 1, "fg") else -1.0 for _, lab in samples])
    if np.all(y > 0) or np.all(y < 0):
        raise ValueError("training samples contain a single class")
    w, b, objectives = hinge_sgd(X, y, lam, epochs, seed)
    return PixelSvmModel(w, b, len(samples), lam, epochs, seed, objectives)


def sample_pixels(cube: HyperCube, mask: Mask, per_class: int, seed) -> list:
    """Seeded subsample of (spectrum, is_foreground) pairs from annotated pixels."""
    mask.check_matches(cube)
    rng = _rng(seed)
    X = cube.pixels()
    bits = mask.bits.reshape(-1)
    out = []
    for label in (True, False):
        idx = np.flatnonzero(bits == label)
        take = rng.permutation(idx)[:per_class]
        out.extend((X[i], label) for i in np.sort(take))
    return out


def decision_values(cube: HyperCube, model: PixelSvmModel) -> np.ndarray:
    if cube.bands != model.bands:
        raise ValueError(f"cube has {cube.bands} bands, model expects {model.bands}")
    return (cube.pixels().astype(np.float64) @ model.weights + model.bias).reshape(cube.height, cube.width)


def segment(cube: HyperCube, model: PixelSvmModel) -> Mask:
    return Mask(decision_values(cube, model) > 0)


def mask_clean(mask: Mask, min_component_px: int) -> Mask:
    """Drop 4-connected foreground components smaller than ``min_component_px``."""
    if min_component_px <= 1:
        return Mask(mask.bits)
    labels, count = ndimage.label(mask.bits)  # default structure is 4-connectivity
    if count == 0:
        return Mask(mask.bits)
    sizes = np.bincount(labels.reshape(-1), minlength=count + 1)
    keep = sizes >= min_component_px
    keep[0] = False
    return Mask(keep[labels])


def iou(a: Mask, b: Mask) -> float:
    inter = np.logical_and(a.bits, b.bits).sum()
    union = np.logical_or(a.bits, b.bits).sum()
    return 1.0 if union == 0 else float(inter / union)
