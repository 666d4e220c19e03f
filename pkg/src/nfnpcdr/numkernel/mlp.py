from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ACTIVATIONS, DimensionError, ParameterBlock, as_tensor, matmul


@dataclass(frozen=True)
class MLPSpec:
    """Layer layout of a fully connected network.

    ``widths[k]`` is the output width of layer k; the first layer reads
    ``in_width`` features.
    """

    in_width: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if not self.widths:
            raise ValueError("MLPSpec needs at least one layer")
        if len(self.activations) != len(self.widths):
            raise ValueError("one activation per layer is required")
        if self.in_width < 1 or min(self.widths) < 1:
            raise ValueError(f"widths must be positive: {self.in_width}, {self.widths}")
        unknown = set(self.activations) - set(ACTIVATIONS)
        if unknown:
            raise ValueError(f"unknown activation(s) {sorted(unknown)}")

    @property
    def out_width(self):
        return self.widths[-1]

    @classmethod
    def stack(cls, in_width, hidden, out_width, layers=3, hidden_act="relu", out_act="identity"):
        widths = (hidden,) * (layers - 1) + (out_width,)
        acts = (hidden_act,) * (layers - 1) + (out_act,)
        return cls(in_width, widths, acts)


def init_mlp(spec, rng, prefix):
    """He-uniform weights for ReLU layers, Glorot-uniform otherwise; zero biases."""
    params = []
    fan_in = spec.in_width
    for k, (width, act) in enumerate(zip(spec.widths, spec.activations)):
        if act == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + width))
        params.append(ParameterBlock(f"{prefix}.{k}.weight",
                                     rng.uniform(-bound, bound, (fan_in, width))))
        params.append(ParameterBlock(f"{prefix}.{k}.bias", np.zeros(width)))
        fan_in = width
    return params


def forward_mlp(spec, params, x):
    """Apply ``act_k(x @ W_k + b_k)`` layer by layer; works on (..., in) inputs."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != spec.in_width:
        raise DimensionError(
            f"MLP input shape {x.shape} does not match first layer input width {spec.in_width}")
    if len(params) != 2 * len(spec.widths):
        raise DimensionError(f"expected {2 * len(spec.widths)} parameter blocks, got {len(params)}")
    lead = x.shape[:-1]
    if len(lead) > 1:
        x = x.reshape(-1, spec.in_width)
    for k, act in enumerate(spec.activations):
        x = ACTIVATIONS[act](matmul(x, params[2 * k]) + params[2 * k + 1])
    return x.reshape(lead + (spec.out_width,)) if len(lead) > 1 else x


class MLP:
    """An :class:`MLPSpec` bundled with its parameter blocks."""

    def __init__(self, spec, rng, prefix):
        self.spec = spec
        self.params = init_mlp(spec, rng, prefix)

    def __call__(self, x):
        return forward_mlp(self.spec, self.params, x)
