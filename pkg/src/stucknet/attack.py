"""FGSM evasion attack with an explicit attacker/defender separation.

The attacker differentiates through an *assumed* model (by default the
trained digital weights with no nonidealities); the defender classifies
the crafted inputs on whatever realization is actually deployed. The two
never have to agree.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .crossbar import IdealRealization
from .data import ImageSet, write_idx_images, write_idx_labels
from .mlp import MlpParams


@dataclass
class AttackSpec:
    """Perturbation budget plus the model the attacker differentiates through."""

    epsilon: float
    grad_params: MlpParams
    grad_realization: object = field(default_factory=IdealRealization)
    clip: bool = True
    clip_range: tuple[float, float] = (0.0, 1.0)
    activation: str = "relu"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class AdversarialBatch:
    original: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    epsilon: float

    def digest(self) -> str:
        """Stable content hash of the perturbed inputs."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.perturbed, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def _input_gradients(X: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    trace = mlp._forward(spec.grad_params, spec.grad_realization, X, spec.activation)
    # per-sample gradients: no batch averaging, FGSM is defined per input
    g = mlp.backward(trace, y, mean=False).dx
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite input gradient")
    return g


def _enforce_budget(x: np.ndarray, x_adv: np.ndarray, eps: float) -> np.ndarray:
    """Nudge entries toward x until |x_adv - x| <= eps holds in float
    arithmetic (x + eps can round one ulp past the budget)."""
    over = np.abs(x_adv - x) > eps
    while np.any(over):
        x_adv = np.where(over, np.nextafter(x_adv, x), x_adv)
        over = np.abs(x_adv - x) > eps
    return x_adv


def fgsm(x: np.ndarray, y: int, spec: AttackSpec) -> np.ndarray:
    """x_adv = clip(x + eps * sign(grad_x loss), 0, 1); sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    g = _input_gradients(x[None, :], np.asarray([y]), spec)[0]
    x_adv = _enforce_budget(x, x + spec.epsilon * np.sign(g), spec.epsilon)
    if spec.clip:
        x_adv = np.clip(x_adv, *spec.clip_range)
    return x_adv


def craft_batch(data: ImageSet, spec: AttackSpec) -> AdversarialBatch:
    """Craft adversarial versions of every image in the set."""
    X = data.images
    if spec.epsilon == 0.0:
        # exact identity; keeps eps=0 bit-equal to clean evaluation
        return AdversarialBatch(X, X.copy(), data.labels.copy(), 0.0)
    g = _input_gradients(X, data.labels, spec)
    X_adv = _enforce_budget(X, X + spec.epsilon * np.sign(g), spec.epsilon)
    if spec.clip:
        X_adv = np.clip(X_adv, *spec.clip_range)
    return AdversarialBatch(X, X_adv, data.labels.copy(), spec.epsilon)


def attack_accuracy(params: MlpParams, deployed, spec: AttackSpec, data: ImageSet) -> float:
    """Accuracy of (params, deployed) on inputs crafted through spec."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    batch = craft_batch(data, spec)
    trace = mlp._forward(params, deployed, batch.perturbed, spec.activation)
    pred = np.argmax(trace.z2, axis=1)
    return float(np.mean(pred == batch.labels))


def dump_adversarial(batch: AdversarialBatch, images_path, labels_path) -> None:
    """Write the perturbed inputs as IDX files for external inspection."""
    pixels = np.clip(np.rint(batch.perturbed * 255.0), 0, 255).astype(np.uint8)
    write_idx_images(images_path, pixels.reshape(-1, 28, 28))
    write_idx_labels(labels_path, batch.labels)
