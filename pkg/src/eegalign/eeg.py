"""EEG branch: learnable elementwise perturbation and a linear encoder.

The perturbation is an elementwise affine map over the channel x time
grid, initialized to the identity so training starts from the raw
signal. The encoder flattens the perturbed trial and applies a single
fully connected layer followed by L2 normalization; there is no
activation anywhere on this branch.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor, l2_normalize, matmul

# encoder families that exist in the configuration vocabulary but have no
# implementation here; "linear" is the only one that runs
KNOWN_UNIMPLEMENTED_ENCODERS = ("tsconv", "eegnet", "shallownet", "deepnet", "eegfusenet", "eegproject")


class Perturbation:
    """Per-entry gain and offset over the EEG grid, identity at init."""

    def __init__(self, channels: int, timesteps: int):
        self.channels = channels
        self.timesteps = timesteps
        self.gain = Parameter("perturb.gain", Tensor(np.ones((channels, timesteps))), group="A")
        self.offset = Parameter("perturb.offset", Tensor(np.zeros((channels, timesteps))), group="A")

    def apply(self, eeg: Tensor) -> Tensor:
        if eeg.ndim != 3 or eeg.shape[1:] != (self.channels, self.timesteps):
            raise DimensionError(
                f"expected EEG of shape (B, {self.channels}, {self.timesteps}), got {eeg.shape}"
            )
        return eeg * self.gain.value + self.offset.value

    def params(self) -> list[Parameter]:
        return [self.gain, self.offset]


class LinearEncoder:
    """Flatten, one fully connected layer, unit-normalize."""

    def __init__(self, channels: int, timesteps: int, dim: int, rng: np.random.Generator):
        self.channels = channels
        self.timesteps = timesteps
        self.dim = dim
        fan_in = channels * timesteps
        self.weight = Parameter(
            "encoder.weight", Tensor(rng.normal(size=(fan_in, dim)) / np.sqrt(fan_in)), group="A"
        )
        self.bias = Parameter("encoder.bias", Tensor(np.zeros(dim)), group="A")

    def project(self, eeg: Tensor) -> Tensor:
        """The pre-normalization linear map; linear in its input."""
        if eeg.ndim != 3 or eeg.shape[1:] != (self.channels, self.timesteps):
            raise DimensionError(
                f"expected EEG of shape (B, {self.channels}, {self.timesteps}), got {eeg.shape}"
            )
        flat = eeg.reshape((eeg.shape[0], self.channels * self.timesteps))
        return matmul(flat, self.weight.value) + self.bias.value

    def encode(self, eeg: Tensor) -> Tensor:
        return l2_normalize(self.project(eeg))

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]


def build_encoder(kind: str, channels: int, timesteps: int, dim: int, rng: np.random.Generator) -> LinearEncoder:
    if kind == "linear":
        return LinearEncoder(channels, timesteps, dim, rng)
    if kind in KNOWN_UNIMPLEMENTED_ENCODERS:
        raise NotImplementedError(f"encoder kind {kind!r} is not implemented; only 'linear' is")
    raise ConfigError(f"unknown encoder kind {kind!r}")
