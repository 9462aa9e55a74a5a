"""Differential-pair conductance mapping and stuck-at-OFF fault injection.

A signed weight w is stored on two devices:

    G± = (G_off + G_on)/2 ± (G_on - G_off) / (2 max|w|) * w

and read out differentially, w_eff = (G+ - G-) * max|w| / (G_on - G_off).
Faulty devices are frozen at G_off. Applying the read-out algebra to a
faulted pair gives a closed form per weight:

    neither device stuck:  w_eff = w             dw_eff/dw = 1
    only G+ stuck:         w_eff = (w - wmax)/2  dw_eff/dw = 1/2
    only G- stuck:         w_eff = (w + wmax)/2  dw_eff/dw = 1/2
    both stuck:            w_eff = 0             dw_eff/dw = 0

(wmax treated as a constant for differentiation). Both routes are kept:
the explicit map -> stick -> unmap pipeline and the closed form, so each
can be checked against the other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASK_MAGIC = b"MASK"
MASK_VERSION = 1


@dataclass(frozen=True)
class DeviceRange:
    """Lowest and highest achievable device conductances (arbitrary units)."""

    g_off: float = 1.0
    g_on: float = 5.0

    def __post_init__(self):
        if not (self.g_on > self.g_off >= 0):
            raise ValueError(f"need g_on > g_off >= 0, got {self}")


@dataclass
class CrossbarPair:
    """Per-layer conductance matrices with the mapping scale max|w|."""

    g_plus: np.ndarray
    g_minus: np.ndarray
    w_max: float
    range: DeviceRange


@dataclass
class StuckMask:
    """Boolean fault maps for both conductance matrices of one layer."""

    stuck_plus: np.ndarray
    stuck_minus: np.ndarray

    @property
    def shape(self):
        return self.stuck_plus.shape

    @property
    def n_stuck(self) -> int:
        return int(self.stuck_plus.sum() + self.stuck_minus.sum())

    @classmethod
    def empty(cls, shape) -> "StuckMask":
        return cls(np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool))


def map_weights(W: np.ndarray, rng_range: DeviceRange) -> CrossbarPair:
    """Map a weight matrix onto a differential conductance pair.

    An all-zero layer has no usable scale; every device is programmed to
    the midpoint conductance and w_max = 0 is recorded as a sentinel
    (unmap then returns all zeros).
    """
    W = np.asarray(W, dtype=np.float64)
    mid = (rng_range.g_off + rng_range.g_on) / 2.0
    w_max = float(np.max(np.abs(W))) if W.size else 0.0
    if w_max == 0.0:
        g = np.full_like(W, mid)
        return CrossbarPair(g.copy(), g.copy(), 0.0, rng_range)
    half_span = (rng_range.g_on - rng_range.g_off) / (2.0 * w_max)
    return CrossbarPair(mid + half_span * W, mid - half_span * W, w_max, rng_range)


def unmap(pair: CrossbarPair) -> np.ndarray:
    """Differential read-out back to effective weights."""
    span = pair.range.g_on - pair.range.g_off
    return (pair.g_plus - pair.g_minus) * (pair.w_max / span)


def sample_stuck_mask(shape, p: float, rng: np.random.Generator) -> StuckMask:
    """Select exactly round(p * 2 * weight_count) devices, uniformly
    without replacement across both conductance matrices."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {p}")
    n_weights = int(np.prod(shape))
    n_devices = 2 * n_weights
    k = int(round(p * n_devices))
    flat = np.zeros(n_devices, dtype=bool)
    if k:
        flat[rng.choice(n_devices, size=k, replace=False)] = True
    return StuckMask(
        stuck_plus=flat[:n_weights].reshape(shape),
        stuck_minus=flat[n_weights:].reshape(shape),
    )


def apply_stuck(pair: CrossbarPair, mask: StuckMask) -> CrossbarPair:
    """Force masked devices to G_off; everything else is unchanged."""
    if mask.shape != pair.g_plus.shape:
        raise ValueError(f"mask shape {mask.shape} != layer shape {pair.g_plus.shape}")
    g_plus = np.where(mask.stuck_plus, pair.range.g_off, pair.g_plus)
    g_minus = np.where(mask.stuck_minus, pair.range.g_off, pair.g_minus)
    return CrossbarPair(g_plus, g_minus, pair.w_max, pair.range)


def crossbar_matvec(V: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Ideal Ohm/Kirchhoff crossbar: I_j = sum_i V_i G_ij."""
    V = np.asarray(V, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if V.shape[-1] != G.shape[0]:
        raise ValueError(f"dimension mismatch: V {V.shape} vs G {G.shape}")
    return V @ G


class IdealRealization:
    """No nonidealities: effective weights equal the digital weights."""

    def realize(self, layer: int, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return W, np.ones_like(W)


@dataclass
class StuckRealization:
    """One concrete faulty hardware instance: a fixed mask per layer.

    With w_max unset (training use) the mapping scale is recomputed from
    the weights on every call; a deployed instance freezes it per layer.
    """

    masks: list[StuckMask]
    range: DeviceRange = field(default_factory=DeviceRange)
    w_max: list[float] | None = None

    def realize(self, layer: int, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mask = self.masks[layer]
        if mask.shape != W.shape:
            raise ValueError(f"mask shape {mask.shape} != weight shape {W.shape}")
        if self.w_max is not None:
            w_max = self.w_max[layer]
        else:
            w_max = float(np.max(np.abs(W))) if W.size else 0.0
        plus, minus = mask.stuck_plus, mask.stuck_minus
        both = plus & minus
        only_plus = plus & ~minus
        only_minus = minus & ~plus
        w_eff = np.where(
            both, 0.0,
            np.where(only_plus, (W - w_max) / 2.0,
                     np.where(only_minus, (W + w_max) / 2.0, W)),
        )
        deriv = np.where(both, 0.0, np.where(plus ^ minus, 0.5, 1.0))
        return w_eff, deriv


WeightRealization = IdealRealization | StuckRealization


def effective_weights(W: np.ndarray, realization, layer: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Effective weights seen by the computation plus the local derivative
    dW_eff/dW used to chain gradients back to the digital weights."""
    return realization.realize(layer, np.asarray(W, dtype=np.float64))


def save_masks(path, masks: list[StuckMask]) -> None:
    """Versioned binary mask file: magic, version, layer count, then per
    layer (rows, cols, packed bitset for G+, packed bitset for G-)."""
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<II", MASK_VERSION, len(masks)))
        for m in masks:
            rows, cols = m.shape
            f.write(struct.pack("<II", rows, cols))
            f.write(np.packbits(m.stuck_plus.ravel()).tobytes())
            f.write(np.packbits(m.stuck_minus.ravel()).tobytes())


def load_masks(path) -> list[StuckMask]:
    raw = Path(path).read_bytes()
    if raw[:4] != MASK_MAGIC:
        raise ValueError(f"{path}: not a mask file")
    version, n_layers = struct.unpack("<II", raw[4:12])
    if version != MASK_VERSION:
        raise ValueError(f"{path}: unsupported mask file version {version}")
    off = 12
    masks = []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", raw[off : off + 8])
        off += 8
        nbytes = (rows * cols + 7) // 8
        parts = []
        for _ in range(2):
            bits = np.unpackbits(
                np.frombuffer(raw[off : off + nbytes], dtype=np.uint8),
                count=rows * cols,
            ).astype(bool).reshape(rows, cols)
            parts.append(bits)
            off += nbytes
        masks.append(StuckMask(stuck_plus=parts[0], stuck_minus=parts[1]))
    return masks
