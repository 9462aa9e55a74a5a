"""A 784-32-10 fully connected network with exact manual backpropagation.

Forward passes go through a pluggable weight realization (identity for a
digital network, stuck-device crossbar otherwise). Biases are handed to
the realization as an extra input row at fixed value 1, so bias weights
live on the crossbar too and are subject to the same faults.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crossbar import (
    DeviceRange,
    IdealRealization,
    StuckRealization,
    sample_stuck_mask,
    StuckMask,
)
from .data import ImageSet, minibatches

MODEL_MAGIC = b"MNNA"
MODEL_VERSION = 1

N_INPUT, N_HIDDEN, N_OUTPUT = 784, 32, 10


@dataclass
class MlpParams:
    """Digital weights and biases, layout (in, out) per layer."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            setattr(self, name, arr)
        if self.W1.shape[1] != self.b1.shape[0] or self.W2.shape[1] != self.b2.shape[0]:
            raise ValueError("bias shape does not match weight columns")
        if self.W1.shape[1] != self.W2.shape[0]:
            raise ValueError("hidden dimensions disagree")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def augmented(self) -> list[np.ndarray]:
        """Per-layer (in+1, out) matrices with the bias as the last row."""
        return [
            np.vstack([self.W1, self.b1[None, :]]),
            np.vstack([self.W2, self.b2[None, :]]),
        ]


@dataclass
class ForwardTrace:
    x: np.ndarray          # (784,) or (N, 784)
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    eff: list[np.ndarray]    # realized augmented weights per layer
    deriv: list[np.ndarray]  # local derivative d(eff)/d(digital) per layer
    activation: str


@dataclass
class Gradients:
    dW1: np.ndarray
    db1: np.ndarray
    dW2: np.ndarray
    db2: np.ndarray
    dx: np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    optimizer: str = "adam"      # "adam" or "sgd"
    activation: str = "relu"     # "relu", "tanh" or "sigmoid"
    seed: int = 0
    p_train: float = 0.0
    device_range: DeviceRange = field(default_factory=DeviceRange)
    bias_on_crossbar: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.p_train <= 1.0:
            raise ValueError("p_train must be in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


def _tanh(z):
    return np.tanh(z)


def _tanh_grad(z, a):
    return 1.0 - a * a


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _sigmoid_grad(z, a):
    return a * (1.0 - a)


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (_tanh, _tanh_grad),
    "sigmoid": (_sigmoid, _sigmoid_grad),
}


def init_params(seed: int, sizes: tuple[int, int, int] = (N_INPUT, N_HIDDEN, N_OUTPUT)) -> MlpParams:
    """Uniform Glorot-style init, limit = sqrt(6/(fan_in+fan_out)); zero biases."""
    n_in, n_hid, n_out = sizes
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (n_in + n_hid))
    lim2 = np.sqrt(6.0 / (n_hid + n_out))
    return MlpParams(
        W1=rng.uniform(-lim1, lim1, size=(n_in, n_hid)),
        b1=np.zeros(n_hid),
        W2=rng.uniform(-lim2, lim2, size=(n_hid, n_out)),
        b2=np.zeros(n_out),
    )


def sample_realization(
    params: MlpParams,
    p: float,
    rng: np.random.Generator,
    device_range: DeviceRange | None = None,
    include_bias: bool = True,
    freeze_w_max: bool = False,
) -> StuckRealization:
    """Draw one stuck-mask set for this network's (augmented) layer shapes."""
    device_range = device_range or DeviceRange()
    masks = []
    for aug in params.augmented():
        if include_bias:
            masks.append(sample_stuck_mask(aug.shape, p, rng))
        else:
            body = sample_stuck_mask((aug.shape[0] - 1, aug.shape[1]), p, rng)
            pad = np.zeros((1, aug.shape[1]), dtype=bool)
            masks.append(
                StuckMask(
                    stuck_plus=np.vstack([body.stuck_plus, pad]),
                    stuck_minus=np.vstack([body.stuck_minus, pad]),
                )
            )
    w_max = None
    if freeze_w_max:
        w_max = [float(np.max(np.abs(aug))) for aug in params.augmented()]
    return StuckRealization(masks=masks, range=device_range, w_max=w_max)


def forward(params: MlpParams, realization, x: np.ndarray) -> ForwardTrace:
    """Run the network on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return _forward(params, realization, x, activation="relu")


def _forward(params: MlpParams, realization, x: np.ndarray, activation: str) -> ForwardTrace:
    act, _ = _ACTIVATIONS[activation]
    eff, deriv = [], []
    for layer, aug in enumerate(params.augmented()):
        e, d = realization.realize(layer, aug)
        eff.append(e)
        deriv.append(d)
    W1e, b1e = eff[0][:-1], eff[0][-1]
    W2e, b2e = eff[1][:-1], eff[1][-1]
    z1 = x @ W1e + b1e
    a1 = act(z1)
    z2 = a1 @ W2e + b2e
    return ForwardTrace(x=x, z1=z1, a1=a1, z2=z2, eff=eff, deriv=deriv, activation=activation)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def loss_softmax_xent(logits: np.ndarray, label: int) -> float:
    """Cross-entropy of the softmax over logits, computed with
    max-subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range")
    shifted = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(shifted))) - shifted[label])


def _batch_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    return lse - shifted[np.arange(len(labels)), labels]


def backward(trace: ForwardTrace, label: int | np.ndarray, mean: bool = False) -> Gradients:
    """Exact gradients of the loss w.r.t. the digital parameters and the
    input. Effective-weight gradients are chained through the
    realization's local derivative; with a batched trace and mean=False
    dx holds per-sample input gradients (parameter gradients are summed).
    """
    _, act_grad = _ACTIVATIONS[trace.activation]
    batched = trace.x.ndim == 2
    x = trace.x if batched else trace.x[None, :]
    z1 = trace.z1 if batched else trace.z1[None, :]
    a1 = trace.a1 if batched else trace.a1[None, :]
    z2 = trace.z2 if batched else trace.z2[None, :]
    labels = np.atleast_1d(np.asarray(label))

    p = softmax(z2)
    dz2 = p.copy()
    dz2[np.arange(len(labels)), labels] -= 1.0
    if mean:
        dz2 /= len(labels)

    W1e, W2e = trace.eff[0][:-1], trace.eff[1][:-1]
    dW2e = a1.T @ dz2
    db2e = dz2.sum(axis=0)
    da1 = dz2 @ W2e.T
    dz1 = da1 * act_grad(z1, a1)
    dW1e = x.T @ dz1
    db1e = dz1.sum(axis=0)
    dx = dz1 @ W1e.T

    dA1 = np.vstack([dW1e, db1e[None, :]]) * trace.deriv[0]
    dA2 = np.vstack([dW2e, db2e[None, :]]) * trace.deriv[1]
    return Gradients(
        dW1=dA1[:-1],
        db1=dA1[-1],
        dW2=dA2[:-1],
        db2=dA2[-1],
        dx=dx if batched else dx[0],
    )


class _Adam:
    def __init__(self, cfg: TrainConfig, shapes):
        self.cfg = cfg
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, arrays, grads):
        c = self.cfg
        self.t += 1
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mhat = self.m[i] / (1 - c.beta1**self.t)
            vhat = self.v[i] / (1 - c.beta2**self.t)
            a -= c.lr * mhat / (np.sqrt(vhat) + c.adam_eps)


class _Sgd:
    def __init__(self, cfg: TrainConfig, shapes):
        self.cfg = cfg

    def step(self, arrays, grads):
        for a, g in zip(arrays, grads):
            a -= self.cfg.lr * g


def train(
    data: ImageSet,
    cfg: TrainConfig,
    realization_factory=None,
    sizes: tuple[int, int, int] = (N_INPUT, N_HIDDEN, N_OUTPUT),
    log_fn=None,
) -> MlpParams:
    """Minibatch training, fully deterministic given cfg.seed.

    When cfg.p_train > 0 (or a realization_factory is given) a fresh
    stuck-device realization is drawn per minibatch and applied during
    both forward and backward passes; the updated parameters stay digital.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    init_ss, shuffle_ss, mask_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init_params(init_ss.generate_state(1)[0], sizes=sizes)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    mask_rng = np.random.default_rng(mask_ss)

    if realization_factory is None:
        if cfg.p_train > 0:
            def realization_factory(rng, p=params):
                return sample_realization(
                    p, cfg.p_train, rng,
                    device_range=cfg.device_range,
                    include_bias=cfg.bias_on_crossbar,
                )
        else:
            ident = IdealRealization()
            def realization_factory(rng):
                return ident

    opt_cls = _Adam if cfg.optimizer == "adam" else _Sgd
    arrays = [params.W1, params.b1, params.W2, params.b2]
    opt = opt_cls(cfg, [a.shape for a in arrays])

    for epoch in range(cfg.epochs):
        epoch_seed = int(shuffle_rng.integers(0, 2**63))
        losses = []
        for idx in minibatches(len(data), cfg.batch, shuffle=True, seed=epoch_seed):
            X, y = data.images[idx], data.labels[idx]
            realization = realization_factory(mask_rng)
            trace = _forward(params, realization, X, cfg.activation)
            losses.append(float(np.mean(_batch_loss(trace.z2, y))))
            g = backward(trace, y, mean=True)
            opt.step(arrays, [g.dW1, g.db1, g.dW2, g.db2])
        if log_fn is not None:
            log_fn(epoch, float(np.mean(losses)))
    return params


def mean_loss(params: MlpParams, realization, data: ImageSet, activation: str = "relu") -> float:
    trace = _forward(params, realization, data.images, activation)
    return float(np.mean(_batch_loss(trace.z2, data.labels)))


def evaluate(params: MlpParams, realization, data: ImageSet, activation: str = "relu") -> float:
    """Fraction of argmax(logits) == label; ties break to the lowest class."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    trace = _forward(params, realization, data.images, activation)
    pred = np.argmax(trace.z2, axis=1)
    return float(np.mean(pred == data.labels))


def save_model(path, params: MlpParams) -> None:
    """Binary model file; round trips bit-exactly."""
    layers = [(params.W1, params.b1), (params.W2, params.b2)]
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", MODEL_VERSION, len(layers)))
        for W, b in layers:
            rows, cols = W.shape
            f.write(struct.pack("<II", rows, cols))
            f.write(W.astype("<f8").tobytes(order="C"))
            f.write(b.astype("<f8").tobytes())


def load_model(path) -> MlpParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, n_layers = struct.unpack("<II", raw[4:12])
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 12
    layers = []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", raw[off : off + 8])
        off += 8
        W = np.frombuffer(raw[off : off + rows * cols * 8], dtype="<f8").reshape(rows, cols).copy()
        off += rows * cols * 8
        b = np.frombuffer(raw[off : off + cols * 8], dtype="<f8").copy()
        off += cols * 8
        layers.append((W, b))
    if len(layers) != 2:
        raise ValueError(f"{path}: expected 2 layers, got {len(layers)}")
    return MlpParams(W1=layers[0][0], b1=layers[0][1], W2=layers[1][0], b2=layers[1][1])
