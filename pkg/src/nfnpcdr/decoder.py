"""FiLM-modulated rating decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import MLP, MLPSpec, DimensionError, Tensor, init_mlp
from .numkernel import tensor as T


@dataclass(frozen=True)
class DecoderSpec:
    in_width: int
    hidden: int = 64
    layers: int = 3

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("decoder needs at least one layer")


class FiLMHeads:
    """One (eta, delta) pair of affine heads on h per decoder layer."""

    def __init__(self, cond_width, spec, rng, prefix="film"):
        one = MLPSpec(cond_width, (spec.hidden,), ("identity",))
        self.eta = [MLP(one, rng, f"{prefix}.{l}.eta") for l in range(spec.layers)]
        self.delta = [MLP(one, rng, f"{prefix}.{l}.delta") for l in range(spec.layers)]

    @property
    def params(self):
        return [p for pair in zip(self.eta, self.delta) for head in pair for p in head.params]


def film_params(h, heads):
    """[(eta_l, delta_l)] with every component in (-1, 1)."""
    return [(T.tanh(eta(h)), T.tanh(delta(h))) for eta, delta in zip(heads.eta, heads.delta)]


def neutral_film(spec):
    """eta = 1, delta = 0: the decoder reduces to a plain MLP."""
    return [(Tensor(np.ones(spec.hidden)), Tensor(np.zeros(spec.hidden)))
            for _ in range(spec.layers)]


class Decoder:
    def __init__(self, spec, rng, prefix="decoder"):
        self.spec = spec
        widths = (spec.hidden,) * spec.layers + (1,)
        self.mlp_spec = MLPSpec(spec.in_width, widths, ("relu",) * spec.layers + ("identity",))
        self.params = init_mlp(self.mlp_spec, rng, prefix)


def decode(u, v, z, film, decoder):
    """Predict raw ratings from ``[u || v || z]`` rows.

    Each modulated layer computes ReLU(eta_l * (w W_l + b_l) + delta_l);
    a final unmodulated affine head maps to one scalar per row. Film
    entries may be per-row (R, hidden) or shared (hidden,).
    """
    w = T.concat([T.as_tensor(u), T.as_tensor(v), T.as_tensor(z)], axis=-1)
    spec = decoder.spec
    if w.shape[-1] != spec.in_width:
        raise DimensionError(f"decoder input width {w.shape[-1]} != expected {spec.in_width}")
    if len(film) != spec.layers:
        raise DimensionError(f"{len(film)} FiLM pairs for {spec.layers} decoder layers")
    p = decoder.params
    for l, (eta, delta) in enumerate(film):
        w = T.relu(eta * (T.matmul(w, p[2 * l]) + p[2 * l + 1]) + delta)
    out = T.matmul(w, p[-2]) + p[-1]
    return out.reshape(out.shape[:-1])


def clamp_ratings(pred, lo=1.0, hi=5.0):
    return np.clip(np.asarray(pred, dtype=np.float64), lo, hi)
