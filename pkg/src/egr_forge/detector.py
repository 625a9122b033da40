"""Compact convolutional forgery detector: image -> score in (0, 1)."""

from __future__ import annotations

import hashlib

import numpy as np

from .nn import (
    Conv3x3,
    GlobalAvgPool,
    Linear,
    MaxPool2,
    Network,
    ParameterStore,
    ReLU,
    ShapeError,
    Sigmoid,
    make_rng,
    read_checkpoint,
    save_checkpoint,
)

INPUT_SIZE = 64
INPUT_CHANNELS = 3
BLOCK_CHANNELS = (8, 16, 32)
HEAD_PARAMS = ("fc.weight", "fc.bias")


class Detector(Network):
    """Three conv/relu/maxpool blocks, global average pooling, linear, sigmoid.

    Parameters are Glorot-uniform drawn in layer order from ``make_rng(seed)``;
    biases start at zero.
    """

    def __init__(self, seed=0, channels=BLOCK_CHANNELS, in_channels=INPUT_CHANNELS):
        store = ParameterStore()
        rng = make_rng(seed)
        layers = []
        cin = in_channels
        for i, cout in enumerate(channels, start=1):
            layers += [
                Conv3x3(store, f"conv{i}", cin, cout, rng, input_grad=i > 1),
                ReLU(),
                MaxPool2(),
            ]
            cin = cout
        layers += [GlobalAvgPool(), Linear(store, "fc", cin, 1, rng), Sigmoid()]
        super().__init__(layers, store)
        self.seed = seed
        self.channels = tuple(channels)
        self.in_channels = in_channels

    def arch_spec(self):
        return {
            "input": [self.in_channels, INPUT_SIZE, INPUT_SIZE],
            "blocks": list(self.channels),
            "layers": self.architecture(),
        }

    def save(self, path, extra=None):
        header = {"arch": self.arch_spec(), "seed": self.seed}
        header.update(extra or {})
        save_checkpoint(path, self.store, header)

    @classmethod
    def load(cls, path):
        header, values = read_checkpoint(path)
        arch = header["arch"]
        model = cls(
            seed=header.get("seed", 0),
            channels=tuple(arch["blocks"]),
            in_channels=arch["input"][0],
        )
        model.store.load_values(values)
        model.header = header
        return model


def init_detector(seed):
    return Detector(seed=seed)


def predict(model, img):
    """Score one channel-last image of shape (64, 64, 3)."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS):
        raise ShapeError(
            f"predict expects ({INPUT_SIZE}, {INPUT_SIZE}, {INPUT_CHANNELS}), got {img.shape}"
        )
    return float(model.predict_scores(img.transpose(2, 0, 1)[None])[0])


def probe_mask(model):
    """Names to freeze for linear probing: everything but the final linear layer."""
    return {name for name in model.store.names() if name not in HEAD_PARAMS}


def param_checksums(model, names=None):
    names = model.store.names() if names is None else names
    return {
        n: hashlib.sha256(np.ascontiguousarray(model.store.params[n]).tobytes()).hexdigest()
        for n in names
    }
