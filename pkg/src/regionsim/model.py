"""Encoder + VLAD bundle and descriptor helpers.

Queries are always represented by their full-map descriptor; only gallery
feature maps are decomposed into regions, and that asymmetry is baked into
the helper names here rather than left to call sites.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import encoder as enc
from . import vlad
from .regions import region_view


@dataclass
class Model:
    encoder: enc.EncoderParams
    vlad: vlad.VladParams

    def parameters(self) -> list[ag.Tensor]:
        return self.encoder.tensors() + [self.vlad.centers]

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    @property
    def descriptor_dim(self) -> int:
        return self.vlad.k * self.vlad.dim


def init_model(
    seed: int,
    sample_images: Sequence[np.ndarray],
    k: int = vlad.DEFAULT_K,
    freeze_early: bool = False,
) -> Model:
    """Fresh model: seeded encoder, then k-means centers over its features.

    The same seed and sample images always produce bit-identical parameters,
    which is what lets every generation restart from the same initialization.
    """
    params = enc.init_encoder(seed)
    rows = []
    for img in sample_images:
        fm = enc.encode_array(params, img)
        rows.append(fm.reshape(fm.shape[0], -1).T)
    features = np.concatenate(rows, axis=0)
    centers = vlad.init_centers(features, k, seed)
    if freeze_early:
        params.freeze_all_but_last()
    return Model(encoder=params, vlad=vlad.VladParams(centers=ag.parameter(centers)))


def image_descriptor(model: Model, image: np.ndarray) -> ag.Tensor:
    """Full-image descriptor with gradients."""
    return vlad.aggregate(model.vlad, enc.encode(model.encoder, image))


def region_descriptor(model: Model, fm: ag.Tensor, region_id: int) -> ag.Tensor:
    """Descriptor of one region of an already-encoded gallery feature map."""
    return vlad.aggregate(model.vlad, region_view(fm, region_id))


def image_descriptor_array(model: Model, image: np.ndarray) -> np.ndarray:
    """Gradient-free full-image descriptor (bitwise equal to the graph path)."""
    return vlad.aggregate_array(model.vlad, enc.encode_array(model.encoder, image))


def region_descriptor_array(model: Model, fm: np.ndarray, region_id: int) -> np.ndarray:
    """Gradient-free region descriptor from a precomputed feature map."""
    return vlad.aggregate_array(model.vlad, region_view(fm, region_id))
