"""The CSC classifier: a small conv backbone under a 1024-unit softmax head.

Parameters live in an ordered ``dict`` of float32 arrays keyed
``conv{i}.w``, ``conv{i}.b``, ``fc1.w``, ``fc1.b``, ``fc2.w``, ``fc2.b``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import layers as L

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelSpec:
    input_size: int = 64
    conv_channels: tuple[int, ...] = (8, 16, 32)
    hidden: int = 1024
    dropout: float = 0.5
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.input_size < 1 or self.hidden < 1 or any(c < 1 for c in self.conv_channels):
            raise ValueError("sizes must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_classes != 2:
            raise ValueError("only binary classification is supported")
        if self.feature_hw < 1:
            raise ValueError(f"input_size {self.input_size} too small for {len(self.conv_channels)} pooling stages")

    @property
    def feature_hw(self) -> int:
        s = self.input_size
        for _ in self.conv_channels:
            s //= 2
        return s

    @property
    def n_features(self) -> int:
        return self.feature_hw**2 * (self.conv_channels[-1] if self.conv_channels else 3)

    @property
    def paper_parity(self) -> bool:
        return self.hidden == 1024 and self.n_classes == 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = 3
        for i, cout in enumerate(self.conv_channels):
            shapes[f"conv{i}.w"] = (3, 3, cin, cout)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        shapes["fc1.w"] = (self.n_features, self.hidden)
        shapes["fc1.b"] = (self.hidden,)
        shapes["fc2.w"] = (self.hidden, self.n_classes)
        shapes["fc2.b"] = (self.n_classes,)
        return shapes


def init_params(spec: ModelSpec, seed: int = 0, zero_head: bool = False) -> Params:
    """Seeded fan-in uniform weights, zero biases.

    ``zero_head`` zeroes the output layer so every input scores exactly 0.5.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[:-1]))
        gain = 3.0 if name == "fc2.w" else 6.0
        lim = np.float32(np.sqrt(gain / fan_in))
        w = rng.random(shape, dtype=np.float32)
        w *= 2 * lim
        w -= lim
        params[name] = w
    if zero_head:
        params["fc2.w"][:] = 0
    return params


def images_to_input(images) -> np.ndarray:
    """Stack uint8 RGB images into a float32 NHWC batch scaled to [0, 1]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    return x.astype(np.float32) / np.float32(255)


def _check_input(spec: ModelSpec, x: np.ndarray):
    if x.ndim != 4 or x.shape[1:] != (spec.input_size, spec.input_size, 3):
        raise ValueError(f"expected input of shape (N, {spec.input_size}, {spec.input_size}, 3), got {x.shape}")


def logits_forward(params: Params, spec: ModelSpec, x: np.ndarray, dropout_seed: Optional[Sequence[int]] = None):
    """Return ``(logits, caches)``; ``dropout_seed=None`` means eval mode."""
    _check_input(spec, x)
    caches = []
    h = x
    for i in range(len(spec.conv_channels)):
        h, c_conv = L.conv3x3_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        h, c_relu = L.relu_forward(h)
        h, c_pool = L.maxpool2_forward(h)
        caches.append((c_conv, c_relu, c_pool))
    flat_shape = h.shape
    h = h.reshape(len(x), -1)
    h, c_fc1 = L.dense_forward(h, params["fc1.w"], params["fc1.b"])
    h, c_relu1 = L.relu_forward(h)
    mask = None
    if dropout_seed is not None and spec.dropout > 0:
        mask = L.dropout_mask(h.shape, spec.dropout, list(dropout_seed), dtype=h.dtype)
        h = h * mask
    logits, c_fc2 = L.dense_forward(h, params["fc2.w"], params["fc2.b"])
    return logits, (caches, flat_shape, c_fc1, c_relu1, mask, c_fc2)


def forward(params: Params, spec: ModelSpec, x: np.ndarray, dropout_seed: Optional[Sequence[int]] = None) -> np.ndarray:
    """Class probabilities, shape (N, 2)."""
    logits, _ = logits_forward(params, spec, x, dropout_seed)
    return L.softmax(logits)


def gradients(params: Params, spec: ModelSpec, x: np.ndarray, labels, dropout_seed: Optional[Sequence[int]] = None):
    """Mean cross-entropy, probabilities and the gradient of every parameter.

    Returns:
        ``(loss, probs, grads)`` with ``grads`` keyed like ``params``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    logits, (caches, flat_shape, c_fc1, c_relu1, mask, c_fc2) = logits_forward(params, spec, x, dropout_seed)
    probs = L.softmax(logits)
    loss = L.cross_entropy(probs, labels)

    grads: Params = {}
    g = L.softmax_cross_entropy_backward(probs, labels)
    g, grads["fc2.w"], grads["fc2.b"] = L.dense_backward(g, c_fc2)
    if mask is not None:
        g = g * mask
    g = L.relu_backward(g, c_relu1)
    g, grads["fc1.w"], grads["fc1.b"] = L.dense_backward(g, c_fc1)
    g = g.reshape(flat_shape)
    for i in reversed(range(len(spec.conv_channels))):
        c_conv, c_relu, c_pool = caches[i]
        g = L.maxpool2_backward(g, c_pool)
        g = L.relu_backward(g, c_relu)
        g, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = L.conv3x3_backward(g, c_conv, need_dx=i > 0)
    return loss, probs, {k: grads[k] for k in params}


def predict_proba(params: Params, spec: ModelSpec, images, batch_size: int = 64) -> np.ndarray:
    """Class-1 (CSC) probability for each preprocessed uint8 image."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(params, spec, images_to_input(images[start : start + batch_size]))[:, 1])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def predict(params: Params, spec: ModelSpec, img: np.ndarray) -> float:
    """Probability that a single preprocessed image shows CSC."""
    return float(predict_proba(params, spec, img[None])[0])
