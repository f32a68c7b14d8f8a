"""Small strided convolutional encoder producing dense feature maps.

Three 3x3 stride-2 same-padded conv layers (1 -> 8 -> 16 -> 16 channels,
ReLU between layers) turn a grayscale image into a (16, H/8, W/8) feature
map. The graph path builds gradients; the array path replays the identical
arithmetic for mining and evaluation, where no gradients are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import EvaluationError, ShapeError
from .seeding import derive_rng

CHANNELS = (1, 8, 16, 16)
KERNEL = 3
STRIDE = 2
PAD = 1
FEATURE_DIM = CHANNELS[-1]


@dataclass
class EncoderParams:
    """Conv weights/biases as graph leaves, in fixed parameter order."""

    weights: list[ag.Tensor]
    biases: list[ag.Tensor]

    def tensors(self) -> list[ag.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def freeze_all_but_last(self):
        """Stop gradient flow into every layer except the final conv."""
        for t in self.tensors()[:-2]:
            t.requires_grad = False


def init_encoder(seed: int) -> EncoderParams:
    """Scaled-uniform weight init, zero biases, keyed by the run seed."""
    rng = derive_rng(seed, "encoder-init")
    weights, biases = [], []
    for cin, cout in zip(CHANNELS, CHANNELS[1:]):
        fan_in = cin * KERNEL * KERNEL
        fan_out = cout * KERNEL * KERNEL
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(cout, cin, KERNEL, KERNEL))
        weights.append(ag.parameter(w))
        biases.append(ag.parameter(np.zeros(cout)))
    return EncoderParams(weights, biases)


def _check_image(image: np.ndarray):
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale image, got shape {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ShapeError(f"image {image.shape} too small for three stride-2 layers")
    if not np.all(np.isfinite(image)):
        raise EvaluationError("image contains non-finite pixels")


def encode(params: EncoderParams, image: np.ndarray) -> ag.Tensor:
    """Graph-building forward pass; returns a (16, H/8, W/8) feature map."""
    image = np.asarray(image, dtype=np.float64)
    _check_image(image)
    x = ag.constant(image[None, :, :])
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = ag.conv2d(x, w, b, stride=STRIDE, pad=PAD)
        if i < n_layers - 1:
            x = ag.relu(x)
    return x


def encode_array(params: EncoderParams, image: np.ndarray) -> np.ndarray:
    """Gradient-free forward pass, bitwise identical to :func:`encode`."""
    image = np.asarray(image, dtype=np.float64)
    _check_image(image)
    x = image[None, :, :]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x, _ = ag.conv2d_forward(x, w.data, b.data, STRIDE, PAD)
        if i < n_layers - 1:
            x = x * (x > 0)
    return x
