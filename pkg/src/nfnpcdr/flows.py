"""Invertible latent transforms with exact log-determinant bookkeeping.

Three families are provided, each acting on vectors stored in the last axis
of a tensor (so a whole batch of latents moves through in one call):

* planar:   g(z) = z + u_hat * tanh(w.z + b)
* radial:   g(z) = z + beta / (alpha + |z - z_ref|) * (z - z_ref)
* coupling: affine transform of one half of the coordinates, conditioned on
  the other half, with a tanh-bounded log-scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numkernel import MLP, MLPSpec, ParameterBlock, Tensor, no_grad
from .numkernel import tensor as T

FAMILIES = ("planar", "radial", "coupling", "none")

# keeps w.u_hat at least 1e-7 above -1 after rounding
PLANAR_MARGIN = 2e-7
SINGULAR_DET = 1e-12


class FlowNumericError(ArithmeticError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class SingularJacobianWarning(RuntimeWarning):
    pass


def _column(x):
    return x.reshape(x.shape + (1,))


class PlanarStep:
    family = "planar"

    def __init__(self, dim, rng, prefix):
        self.dim = dim
        self.u = ParameterBlock(f"{prefix}.u", rng.normal(0.0, 0.1, dim))
        self.w = ParameterBlock(f"{prefix}.w", rng.normal(0.0, 0.1, dim))
        self.b = ParameterBlock(f"{prefix}.b", np.zeros(()))

    @property
    def params(self):
        return [self.u, self.w, self.b]

    def direction(self):
        """``(u_hat, w.u_hat)`` with w.u_hat = m(w.u) >= -1 + margin (invertibility).

        w.u_hat is returned in closed form rather than as a float dot
        product, which can round below the bound for huge anti-parallel u, w.
        """
        ww = float(np.dot(self.w.data, self.w.data))
        wu = (self.w * self.u).sum()
        if ww == 0.0:
            return T.as_tensor(self.u), wu
        m = -1.0 + PLANAR_MARGIN + T.softplus(wu)
        return self.u + ((m - wu) / (self.w * self.w).sum()) * self.w, m

    def u_hat(self):
        return self.direction()[0]

    def forward(self, z):
        z = T.as_tensor(z)
        u_hat, w_dot_u_hat = self.direction()
        act = T.tanh((z * self.w).sum(axis=-1) + self.b)
        z_new = z + _column(act) * u_hat
        # psi(z).u_hat = (1 - tanh^2) * (w.u_hat)
        det = 1.0 + (1.0 - T.square(act)) * w_dot_u_hat
        return z_new, T.log(T.tabs(det))


class RadialStep:
    family = "radial"

    def __init__(self, dim, rng, prefix):
        self.dim = dim
        self.z_ref = ParameterBlock(f"{prefix}.z_ref", rng.normal(0.0, 0.1, dim))
        self.alpha_raw = ParameterBlock(f"{prefix}.alpha_raw", np.zeros(()))
        self.beta_raw = ParameterBlock(f"{prefix}.beta_raw", np.zeros(()))

    @property
    def params(self):
        return [self.z_ref, self.alpha_raw, self.beta_raw]

    def coefficients(self):
        alpha = T.softplus(self.alpha_raw)
        return alpha, T.softplus(self.beta_raw) - alpha

    def forward(self, z):
        z = T.as_tensor(z)
        alpha, beta = self.coefficients()
        diff = z - self.z_ref
        r = T.sqrt(T.square(diff).sum(axis=-1))
        h = 1.0 / (alpha + r)
        bh = beta * h
        z_new = z + _column(bh) * diff
        # det = (1 + beta h)^(d-1) * (1 + beta h + beta h'(r) r), h' = -h^2
        outer = 1.0 + bh
        radial = 1.0 + bh - bh * h * r
        log_det = (self.dim - 1) * T.log(T.tabs(outer)) + T.log(T.tabs(radial))
        return z_new, log_det


def coupling_mask(dim, parity):
    """1 marks conditioning (passive) coordinates; halves alternate by parity."""
    if dim < 2:
        raise ValueError("coupling steps need at least 2 latent dimensions")
    mask = np.zeros(dim)
    half = dim // 2
    if parity % 2 == 0:
        mask[:half] = 1.0
    else:
        mask[half:] = 1.0
    return mask


class CouplingStep:
    family = "coupling"

    def __init__(self, dim, rng, prefix, parity=0, hidden=64):
        self.dim = dim
        self.mask = coupling_mask(dim, parity)
        spec = MLPSpec(dim, (hidden, dim), ("tanh", "identity"))
        self.scale_net = MLP(spec, rng, f"{prefix}.scale")
        self.shift_net = MLP(spec, rng, f"{prefix}.shift")

    @property
    def params(self):
        return self.scale_net.params + self.shift_net.params

    def _scale_shift(self, passive):
        active = 1.0 - self.mask
        return T.tanh(self.scale_net(passive)) * active, self.shift_net(passive) * active

    def forward(self, z):
        z = T.as_tensor(z)
        passive = z * self.mask
        s, t = self._scale_shift(passive)
        z_new = passive + (1.0 - self.mask) * (z * T.exp(s) + t)
        return z_new, s.sum(axis=-1)

    def inverse(self, z_out):
        z_out = T.as_tensor(z_out)
        passive = z_out * self.mask
        s, t = self._scale_shift(passive)
        return passive + (1.0 - self.mask) * ((z_out - t) * T.exp(-s))


@dataclass
class FlowResult:
    z: Tensor
    sum_log_det: Tensor


class FlowStack:
    def __init__(self, family, steps):
        if family not in FAMILIES:
            raise ValueError(f"unknown flow family {family!r}; choose from {FAMILIES}")
        if family == "none" and steps:
            raise ValueError("family 'none' cannot hold steps")
        if any(s.family != family for s in steps):
            raise ValueError("a flow stack must be homogeneous")
        self.family = family
        self.steps = list(steps)

    @classmethod
    def build(cls, family, n_steps, dim, rng, hidden=64):
        if family == "none" or n_steps == 0:
            return cls(family, [])
        if family == "planar":
            steps = [PlanarStep(dim, rng, f"flow.{k}") for k in range(n_steps)]
        elif family == "radial":
            steps = [RadialStep(dim, rng, f"flow.{k}") for k in range(n_steps)]
        elif family == "coupling":
            steps = [CouplingStep(dim, rng, f"flow.{k}", parity=k, hidden=hidden)
                     for k in range(n_steps)]
        else:
            raise ValueError(f"unknown flow family {family!r}")
        return cls(family, steps)

    def __len__(self):
        return len(self.steps)

    @property
    def params(self):
        return [p for s in self.steps for p in s.params]


def log_det_step(step, z):
    """log|det dg/dz| of a single step at ``z``."""
    return step.forward(z)[1]


def apply_flow(stack, z0):
    """Push ``z0`` (shape (..., d)) through every step of ``stack``."""
    z = T.as_tensor(z0)
    total = Tensor(np.zeros(z.shape[:-1]))
    for k, step in enumerate(stack.steps):
        z, log_det = step.forward(z)
        if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(log_det.data))):
            raise FlowNumericError(f"non-finite value after flow step {k}", step=k)
        if np.any(log_det.data < np.log(SINGULAR_DET)):
            raise FlowNumericError(f"flow step {k} has a singular Jacobian", step=k)
        total = total + log_det
    return FlowResult(z, total)


def invert_coupling(step, z_out):
    with no_grad():
        return step.inverse(np.asarray(z_out, dtype=np.float64)).data


def numeric_jacobian_logdet(step, z, h=1e-5):
    """log|det J| from a central-difference Jacobian of ``step`` at ``z``.

    A near-singular Jacobian emits :class:`SingularJacobianWarning` instead
    of raising; the (possibly -inf) value is still returned.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step size h={h} outside [1e-7, 1e-4]")
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    probes = np.concatenate([z + h * np.eye(d), z - h * np.eye(d)])
    with no_grad():
        out = step.forward(probes)[0].data
    jac = (out[:d] - out[d:]).T / (2.0 * h)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0 or logabs < np.log(SINGULAR_DET):
        warnings.warn(f"near-singular numeric Jacobian (log|det|={logabs})",
                      SingularJacobianWarning, stacklevel=2)
    return float(logabs)
